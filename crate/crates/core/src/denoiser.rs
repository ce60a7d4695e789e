//! Noise predictor: a small convolutional encoder-decoder with timestep
//! embedding, per-block conditioning modulation, and attachable control
//! branches whose outputs enter through zero-initialized projections.
//!
//! Layout (base):
//!
//! ```text
//! z ── enc1 ──┬─ pool ─ enc2 ─ bott ─(+zA·branch)─ up ─┐
//!             └────────────── skip ───────────────── dec1 ─(+zB·branch)─ out ── eps
//! ```
//!
//! A branch clones the encoder blocks, runs on `z` concatenated with the
//! pose-map raster, and injects its features at the two marked sites.

use crate::error::{Error, Result};
use crate::nn::{
    avgpool2_backward, avgpool2_forward, conv1x1_backward, conv1x1_forward, conv3x3_backward,
    conv3x3_forward, time_embedding, upsample2_backward, upsample2_forward, Plane,
};
use crate::rng::StreamRng;
use crate::tensor::{Tensor, TensorMap};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    /// Conditioning embedding width (0 disables modulation entirely).
    pub emb_dim: usize,
    /// Timestep embedding width (0 disables the time pathway).
    pub time_dim: usize,
    pub num_prompts: usize,
    pub attr_dim: usize,
    pub pose_channels: usize,
    pub skip: bool,
    /// Append normalized coordinate channels to the latent input. Plain
    /// convolutions carry no absolute-position signal, but the data
    /// distribution is not translation invariant (the figure sits at a fixed
    /// location), so the net needs coordinates to model it.
    pub coords: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            height: 32,
            width: 32,
            c1: 12,
            c2: 24,
            emb_dim: 8,
            time_dim: 16,
            num_prompts: 3,
            attr_dim: 2,
            pose_channels: 5,
            skip: true,
            coords: true,
        }
    }
}

impl NetConfig {
    /// Input channels of the base encoder: the latent, plus two coordinate
    /// planes when enabled.
    pub fn base_in(&self) -> usize {
        if self.coords {
            3
        } else {
            1
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// The triple of independently nullable conditions. Null maps to a zero
/// embedding / zero raster.
#[derive(Debug, Clone, Default)]
pub struct ConditionSet {
    pub prompt: Option<usize>,
    pub attribute: Option<Vec<f64>>,
    pub pose_map: Option<Plane>,
}

impl ConditionSet {
    pub fn none() -> Self {
        ConditionSet::default()
    }

    pub fn without_prompt(&self) -> Self {
        ConditionSet {
            prompt: None,
            attribute: self.attribute.clone(),
            pose_map: self.pose_map.clone(),
        }
    }

    pub fn without_attribute(&self) -> Self {
        ConditionSet {
            prompt: self.prompt,
            attribute: None,
            pose_map: self.pose_map.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: NetConfig,
    pub tensors: TensorMap,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Conditioned on the prompt label (clone of the base prompt table).
    Pose,
    /// Conditioned on the attribute vector through a single linear embedding.
    Attribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneScope {
    AttnOnly,
    All,
}

impl FinetuneScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinetuneScope::AttnOnly => "attn_only",
            FinetuneScope::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attn_only" => Some(FinetuneScope::AttnOnly),
            "all" => Some(FinetuneScope::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlBranchParams {
    pub config: NetConfig,
    pub kind: BranchKind,
    pub scope: FinetuneScope,
    pub tensors: TensorMap,
}

impl ControlBranchParams {
    /// Names of tensors the finetune scope marks trainable.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|name| match self.scope {
                FinetuneScope::All => true,
                FinetuneScope::AttnOnly => {
                    name.ends_with(".wc")
                        || name.as_str() == "attr.w"
                        || name.as_str() == "attr.b"
                        || name.as_str() == "prompt.table"
                }
            })
            .cloned()
            .collect()
    }
}

fn he_conv(rng: &mut StreamRng, cout: usize, cin: usize) -> Tensor {
    let std = (2.0 / (9.0 * cin as f64)).sqrt();
    Tensor {
        dims: vec![cout, cin, 3, 3],
        data: (0..cout * cin * 9).map(|_| std * rng.normal()).collect(),
    }
}

fn insert_block(
    tensors: &mut TensorMap,
    rng: &mut StreamRng,
    cfg: &NetConfig,
    prefix: &str,
    cin: usize,
    cout: usize,
) {
    tensors.insert(format!("{prefix}.w"), he_conv(rng, cout, cin));
    tensors.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    if cfg.time_dim > 0 {
        let std = 0.1 / (cfg.time_dim as f64).sqrt();
        tensors.insert(
            format!("{prefix}.wt"),
            Tensor {
                dims: vec![cout, cfg.time_dim],
                data: (0..cout * cfg.time_dim)
                    .map(|_| std * rng.normal())
                    .collect(),
            },
        );
    }
    if cfg.emb_dim > 0 {
        tensors.insert(
            format!("{prefix}.wc"),
            Tensor {
                dims: vec![cout, cfg.emb_dim],
                data: (0..cout * cfg.emb_dim).map(|_| 0.05 * rng.normal()).collect(),
            },
        );
    }
}

/// Normalized coordinate channel planes (see `NetConfig::coords`).
fn coord_planes(height: usize, width: usize) -> Plane {
    let mut p = Plane::zeros(2, height, width);
    for y in 0..height {
        for x in 0..width {
            p.data[y * width + x] = 2.0 * x as f64 / (width - 1) as f64 - 1.0;
            p.data[height * width + y * width + x] = 2.0 * y as f64 / (height - 1) as f64 - 1.0;
        }
    }
    p
}


/// Freshly initialized base predictor. The output convolution starts at zero
/// so the initial prediction is the zero vector.
pub fn init_base(config: &NetConfig, seed: u64) -> DenoiserParams {
    let mut rng = StreamRng::new(seed, "init/base");
    let mut tensors = TensorMap::new();
    let dec_in = if config.skip {
        config.c2 + config.c1
    } else {
        config.c2
    };
    insert_block(&mut tensors, &mut rng, config, "enc1", config.base_in(), config.c1);
    insert_block(&mut tensors, &mut rng, config, "enc2", config.c1, config.c2);
    insert_block(&mut tensors, &mut rng, config, "bott", config.c2, config.c2);
    insert_block(&mut tensors, &mut rng, config, "dec1", dec_in, config.c1);
    tensors.insert("out.w".into(), Tensor::zeros(&[1, config.c1, 3, 3]));
    tensors.insert("out.b".into(), Tensor::zeros(&[1]));
    if config.emb_dim > 0 && config.num_prompts > 0 {
        tensors.insert(
            "prompt.table".into(),
            Tensor {
                dims: vec![config.num_prompts, config.emb_dim],
                data: (0..config.num_prompts * config.emb_dim)
                    .map(|_| rng.normal())
                    .collect(),
            },
        );
    }
    DenoiserParams {
        config: config.clone(),
        tensors,
        frozen: false,
    }
}

/// Clone the base encoder into a pose-conditioned control branch. The first
/// convolution gains pose-map input channels (initialized to zero) and both
/// output projections start exactly at zero.
pub fn init_branch_from_base(
    base: &DenoiserParams,
    scope: FinetuneScope,
    _seed: u64,
) -> ControlBranchParams {
    let cfg = &base.config;
    let mut tensors = TensorMap::new();

    // enc1 with widened input: the latent-and-coordinate channels copy the
    // base kernel, pose-map channels start at zero.
    let base_w = &base.tensors["enc1.w"];
    let base_in = cfg.base_in();
    let cin = base_in + cfg.pose_channels;
    let mut w = Tensor::zeros(&[cfg.c1, cin, 3, 3]);
    for o in 0..cfg.c1 {
        for ic in 0..base_in {
            for k in 0..9 {
                w.data[(o * cin + ic) * 9 + k] = base_w.data[(o * base_in + ic) * 9 + k];
            }
        }
    }
    tensors.insert("enc1.w".into(), w);
    for suffix in ["b", "wt", "wc"] {
        if let Some(t) = base.tensors.get(&format!("enc1.{suffix}")) {
            tensors.insert(format!("enc1.{suffix}"), t.clone());
        }
    }
    for prefix in ["enc2", "bott"] {
        for suffix in ["w", "b", "wt", "wc"] {
            if let Some(t) = base.tensors.get(&format!("{prefix}.{suffix}")) {
                tensors.insert(format!("{prefix}.{suffix}"), t.clone());
            }
        }
    }
    if let Some(t) = base.tensors.get("prompt.table") {
        tensors.insert("prompt.table".into(), t.clone());
    }
    tensors.insert("proj_mid.w".into(), Tensor::zeros(&[cfg.c2, cfg.c2]));
    tensors.insert("proj_mid.b".into(), Tensor::zeros(&[cfg.c2]));
    tensors.insert("proj_out.w".into(), Tensor::zeros(&[cfg.c1, cfg.c1]));
    tensors.insert("proj_out.b".into(), Tensor::zeros(&[cfg.c1]));

    ControlBranchParams {
        config: cfg.clone(),
        kind: BranchKind::Pose,
        scope,
        tensors,
    }
}

/// Clone a trained pose branch into an attribute branch: the prompt table is
/// replaced by a zero-initialized linear attribute embedding, so a null (or
/// fresh) attribute reproduces the donor's null-prompt prediction.
pub fn init_attribute_branch(
    donor: &ControlBranchParams,
    scope: FinetuneScope,
) -> ControlBranchParams {
    let cfg = &donor.config;
    let mut tensors = donor.tensors.clone();
    tensors.remove("prompt.table");
    if cfg.emb_dim > 0 {
        tensors.insert(
            "attr.w".into(),
            Tensor::zeros(&[cfg.emb_dim, cfg.attr_dim]),
        );
        tensors.insert("attr.b".into(), Tensor::zeros(&[cfg.emb_dim]));
    }
    ControlBranchParams {
        config: cfg.clone(),
        kind: BranchKind::Attribute,
        scope,
        tensors,
    }
}

/// c_s = W * concat(pose_params, shape_params) + b
pub fn embed_attribute(
    pose_params: &[f64],
    shape_params: &[f64],
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Vec<f64>> {
    let k = pose_params.len() + shape_params.len();
    if weights.dims.len() != 2 || weights.dims[1] != k || bias.len() != weights.dims[0] {
        return Err(Error::ShapeMismatch(format!(
            "attribute embedding expects input width {}, got {k}",
            weights.dims.get(1).copied().unwrap_or(0)
        )));
    }
    let e_dim = weights.dims[0];
    let concat: Vec<f64> = pose_params.iter().chain(shape_params).copied().collect();
    let mut out = bias.data.clone();
    for (i, o) in out.iter_mut().enumerate().take(e_dim) {
        for (j, x) in concat.iter().enumerate() {
            *o += weights.at2(i, j) * x;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
    input: Plane,
    pre: Plane,
    gamma: Vec<f64>,
    out: Plane,
}

fn block_forward(
    tensors: &TensorMap,
    prefix: &str,
    input: Plane,
    temb: &[f64],
    e: &[f64],
) -> BlockCache {
    let w = &tensors[&format!("{prefix}.w")];
    let b = &tensors[&format!("{prefix}.b")];
    let cout = w.dims[0];
    let mut pre = conv3x3_forward(&input, &w.data, cout);
    let wt = tensors.get(&format!("{prefix}.wt"));
    for c in 0..cout {
        let mut shift = b.data[c];
        if let Some(wt) = wt {
            for (j, tv) in temb.iter().enumerate() {
                shift += wt.at2(c, j) * tv;
            }
        }
        if shift != 0.0 {
            for v in pre.channel_mut(c) {
                *v += shift;
            }
        }
    }
    let mut gamma = vec![0.0; cout];
    if let Some(wc) = tensors.get(&format!("{prefix}.wc")) {
        for (c, g) in gamma.iter_mut().enumerate() {
            for (j, ev) in e.iter().enumerate() {
                *g += wc.at2(c, j) * ev;
            }
        }
    }
    let mut out = pre.clone();
    for c in 0..cout {
        let scale = 1.0 + gamma[c];
        for v in out.channel_mut(c) {
            let m = *v * scale;
            *v = if m > 0.0 { m } else { 0.0 };
        }
    }
    BlockCache {
        input,
        pre,
        gamma,
        out,
    }
}

/// Backward through one block. `e` is the conditioning embedding used in the
/// forward pass. Accumulates parameter gradients into `grads` and the
/// embedding gradient into `de`; returns the gradient w.r.t. the block input.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    tensors: &TensorMap,
    prefix: &str,
    cache: &BlockCache,
    grad_out: &Plane,
    temb: &[f64],
    e: &[f64],
    grads: &mut TensorMap,
    de: &mut [f64],
) -> Plane {
    let w = &tensors[&format!("{prefix}.w")];
    let cout = w.dims[0];
    let mut grad_pre = Plane::zeros(cout, cache.pre.height, cache.pre.width);
    let mut dgamma = vec![0.0; cout];
    for c in 0..cout {
        let scale = 1.0 + cache.gamma[c];
        let h = cache.out.channel(c);
        let pre = cache.pre.channel(c);
        let go = grad_out.channel(c);
        let gp = grad_pre.channel_mut(c);
        let mut dg = 0.0;
        for k in 0..go.len() {
            if h[k] > 0.0 {
                let dm = go[k];
                gp[k] = dm * scale;
                dg += dm * pre[k];
            }
        }
        dgamma[c] = dg;
    }

    if let Some(wc) = tensors.get(&format!("{prefix}.wc")) {
        let gwc = grads
            .entry(format!("{prefix}.wc"))
            .or_insert_with(|| Tensor::zeros(&wc.dims));
        for c in 0..cout {
            for (j, ev) in de.iter_mut().enumerate() {
                *gwc.at2_mut(c, j) += dgamma[c] * e[j];
                *ev += dgamma[c] * wc.at2(c, j);
            }
        }
    }

    // Bias and time-projection gradients share the per-channel sum.
    let gb = grads
        .entry(format!("{prefix}.b"))
        .or_insert_with(|| Tensor::zeros(&[cout]));
    let mut chan_sums = vec![0.0; cout];
    for c in 0..cout {
        let s: f64 = grad_pre.channel(c).iter().sum();
        chan_sums[c] = s;
        gb.data[c] += s;
    }
    if let Some(wt) = tensors.get(&format!("{prefix}.wt")) {
        let gwt = grads
            .entry(format!("{prefix}.wt"))
            .or_insert_with(|| Tensor::zeros(&wt.dims));
        for c in 0..cout {
            for (j, tv) in temb.iter().enumerate() {
                *gwt.at2_mut(c, j) += chan_sums[c] * tv;
            }
        }
    }

    let gw = grads
        .entry(format!("{prefix}.w"))
        .or_insert_with(|| Tensor::zeros(&w.dims));
    conv3x3_backward(&cache.input, &w.data, cout, &grad_pre, &mut gw.data)
}

pub struct ForwardCache {
    temb: Vec<f64>,
    e_base: Vec<f64>,
    e_branch: Vec<f64>,
    prompt: Option<usize>,
    attr_input: Option<Vec<f64>>,
    enc1: BlockCache,
    enc2: BlockCache,
    bott: BlockCache,
    dec1: BlockCache,
    dec_input_site: Plane,
    branch: Option<BranchCache>,
}

struct BranchCache {
    enc1: BlockCache,
    enc2: BlockCache,
    bott: BlockCache,
}

fn lookup_prompt(tensors: &TensorMap, prompt: Option<usize>, emb_dim: usize) -> Result<Vec<f64>> {
    let Some(p) = prompt else {
        return Ok(vec![0.0; emb_dim]);
    };
    let table = tensors.get("prompt.table").ok_or_else(|| {
        Error::IncompatibleCheckpoint("prompt table missing from parameters".into())
    })?;
    if p >= table.dims[0] {
        return Err(Error::ShapeMismatch(format!(
            "prompt id {p} out of range (table has {} rows)",
            table.dims[0]
        )));
    }
    Ok((0..emb_dim).map(|j| table.at2(p, j)).collect())
}

fn branch_embedding(branch: &ControlBranchParams, cond: &ConditionSet) -> Result<Vec<f64>> {
    let e_dim = branch.config.emb_dim;
    match branch.kind {
        BranchKind::Pose => lookup_prompt(&branch.tensors, cond.prompt, e_dim),
        BranchKind::Attribute => match (&cond.attribute, e_dim) {
            (_, 0) => Ok(Vec::new()),
            (None, _) => Ok(vec![0.0; e_dim]),
            (Some(attr), _) => {
                if attr.len() != branch.config.attr_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "attribute length {} != configured {}",
                        attr.len(),
                        branch.config.attr_dim
                    )));
                }
                embed_attribute(attr, &[], &branch.tensors["attr.w"], &branch.tensors["attr.b"])
            }
        },
    }
}

/// Full forward pass retaining every intermediate needed for backprop.
pub fn forward_with_cache(
    base: &DenoiserParams,
    branch: Option<&ControlBranchParams>,
    z_t: &[f64],
    t: usize,
    cond: &ConditionSet,
) -> Result<(Vec<f64>, ForwardCache)> {
    let cfg = &base.config;
    if z_t.len() != cfg.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "z_t length {} != {}x{}",
            z_t.len(),
            cfg.height,
            cfg.width
        )));
    }
    if let Some(br) = branch {
        if br.config != *cfg {
            return Err(Error::IncompatibleCheckpoint(
                "branch and base network configs differ".into(),
            ));
        }
    }

    let temb = time_embedding(t, cfg.time_dim);
    let e_base = lookup_prompt(&base.tensors, cond.prompt, cfg.emb_dim)?;
    let mut z_plane = Plane::from_data(1, cfg.height, cfg.width, z_t.to_vec());
    if cfg.coords {
        z_plane = z_plane.concat(&coord_planes(cfg.height, cfg.width));
    }

    // Branch encoder on z concatenated with the (possibly zero) pose map.
    let mut branch_cache = None;
    let mut e_branch = Vec::new();
    if let Some(br) = branch {
        e_branch = branch_embedding(br, cond)?;
        let pose = match &cond.pose_map {
            Some(p) => {
                if p.channels != cfg.pose_channels || p.height != cfg.height || p.width != cfg.width
                {
                    return Err(Error::ShapeMismatch(format!(
                        "pose map {}x{}x{} does not match config",
                        p.channels, p.height, p.width
                    )));
                }
                p.clone()
            }
            None => Plane::zeros(cfg.pose_channels, cfg.height, cfg.width),
        };
        let xbr = z_plane.concat(&pose);
        let b1 = block_forward(&br.tensors, "enc1", xbr, &temb, &e_branch);
        let pooled = avgpool2_forward(&b1.out);
        let b2 = block_forward(&br.tensors, "enc2", pooled, &temb, &e_branch);
        let b2_out = b2.out.clone();
        let b3 = block_forward(&br.tensors, "bott", b2_out, &temb, &e_branch);
        branch_cache = Some(BranchCache {
            enc1: b1,
            enc2: b2,
            bott: b3,
        });
    }

    let h1 = block_forward(&base.tensors, "enc1", z_plane, &temb, &e_base);
    let pooled = avgpool2_forward(&h1.out);
    let h2 = block_forward(&base.tensors, "enc2", pooled, &temb, &e_base);
    let h2_out = h2.out.clone();
    let h3 = block_forward(&base.tensors, "bott", h2_out, &temb, &e_base);

    // Mid injection site.
    let mut mid = h3.out.clone();
    if let (Some(br), Some(bc)) = (branch, &branch_cache) {
        let inj = conv1x1_forward(
            &bc.bott.out,
            &br.tensors["proj_mid.w"].data,
            &br.tensors["proj_mid.b"].data,
            cfg.c2,
        );
        for (m, v) in mid.data.iter_mut().zip(&inj.data) {
            *m += v;
        }
    }

    let up = upsample2_forward(&mid);
    let dec_in = if cfg.skip { up.concat(&h1.out) } else { up };
    let d1 = block_forward(&base.tensors, "dec1", dec_in, &temb, &e_base);

    // Out injection site.
    let mut out_site = d1.out.clone();
    if let (Some(br), Some(bc)) = (branch, &branch_cache) {
        let inj = conv1x1_forward(
            &bc.enc1.out,
            &br.tensors["proj_out.w"].data,
            &br.tensors["proj_out.b"].data,
            cfg.c1,
        );
        for (m, v) in out_site.data.iter_mut().zip(&inj.data) {
            *m += v;
        }
    }

    let mut eps = conv3x3_forward(&out_site, &base.tensors["out.w"].data, 1);
    let ob = base.tensors["out.b"].data[0];
    for v in &mut eps.data {
        *v += ob;
    }

    let cache = ForwardCache {
        temb,
        e_base,
        e_branch,
        prompt: cond.prompt,
        attr_input: cond.attribute.clone(),
        enc1: h1,
        enc2: h2,
        bott: h3,
        dec1: d1,
        dec_input_site: out_site,
        branch: branch_cache,
    };
    Ok((eps.data, cache))
}

/// Deterministic noise prediction. With no branch (or a freshly constructed
/// one) this equals the bare base prediction.
pub fn predict_eps(
    base: &DenoiserParams,
    branch: Option<&ControlBranchParams>,
    z_t: &[f64],
    t: usize,
    cond: &ConditionSet,
) -> Result<Vec<f64>> {
    forward_with_cache(base, branch, z_t, t, cond).map(|(eps, _)| eps)
}

pub struct Gradients {
    pub base: TensorMap,
    pub branch: Option<TensorMap>,
}

/// Backward pass matching [`forward_with_cache`]. `grad_eps` is dL/d(eps).
pub fn backward(
    base: &DenoiserParams,
    branch: Option<&ControlBranchParams>,
    cache: &ForwardCache,
    grad_eps: &[f64],
) -> Gradients {
    let cfg = &base.config;
    let mut gbase = TensorMap::new();
    let mut gbranch = TensorMap::new();

    // Output convolution.
    let grad_out_plane = Plane::from_data(1, cfg.height, cfg.width, grad_eps.to_vec());
    gbase
        .entry("out.w".into())
        .or_insert_with(|| Tensor::zeros(&base.tensors["out.w"].dims));
    gbase
        .entry("out.b".into())
        .or_insert_with(|| Tensor::zeros(&[1]))
        .data[0] += grad_eps.iter().sum::<f64>();
    let mut gw_out = vec![0.0; base.tensors["out.w"].len()];
    let grad_site = conv3x3_backward(
        &cache.dec_input_site,
        &base.tensors["out.w"].data,
        1,
        &grad_out_plane,
        &mut gw_out,
    );
    for (dst, src) in gbase.get_mut("out.w").unwrap().data.iter_mut().zip(&gw_out) {
        *dst += src;
    }

    // Out injection: gradient flows unchanged into dec1 and into the branch
    // output projection.
    let mut de_base = vec![0.0; cfg.emb_dim];
    let mut de_branch = vec![0.0; cfg.emb_dim];
    let mut grad_b1_extra: Option<Plane> = None;
    if let (Some(br), Some(bc)) = (branch, &cache.branch) {
        let w = &br.tensors["proj_out.w"];
        let gw = gbranch
            .entry("proj_out.w".into())
            .or_insert_with(|| Tensor::zeros(&w.dims));
        let mut gb = Tensor::zeros(&[cfg.c1]);
        let gin = conv1x1_backward(
            &bc.enc1.out,
            &w.data,
            cfg.c1,
            &grad_site,
            &mut gw.data,
            &mut gb.data,
        );
        gbranch.insert("proj_out.b".into(), gb);
        grad_b1_extra = Some(gin);
    }

    let grad_dec_in = block_backward(
        &base.tensors,
        "dec1",
        &cache.dec1,
        &grad_site,
        &cache.temb,
        &cache.e_base,
        &mut gbase,
        &mut de_base,
    );

    // Split the decoder-input gradient into the upsampled path and the skip.
    let hw = cfg.pixels();
    let grad_up = Plane::from_data(
        cfg.c2,
        cfg.height,
        cfg.width,
        grad_dec_in.data[..cfg.c2 * hw].to_vec(),
    );
    let grad_skip = if cfg.skip {
        Some(Plane::from_data(
            cfg.c1,
            cfg.height,
            cfg.width,
            grad_dec_in.data[cfg.c2 * hw..].to_vec(),
        ))
    } else {
        None
    };
    let grad_mid = upsample2_backward(&grad_up);

    // Mid injection.
    let mut grad_b3: Option<Plane> = None;
    if let (Some(br), Some(bc)) = (branch, &cache.branch) {
        let w = &br.tensors["proj_mid.w"];
        let gw = gbranch
            .entry("proj_mid.w".into())
            .or_insert_with(|| Tensor::zeros(&w.dims));
        let mut gb = Tensor::zeros(&[cfg.c2]);
        let gin = conv1x1_backward(
            &bc.bott.out,
            &w.data,
            cfg.c2,
            &grad_mid,
            &mut gw.data,
            &mut gb.data,
        );
        gbranch.insert("proj_mid.b".into(), gb);
        grad_b3 = Some(gin);
    }

    let grad_h2 = block_backward(
        &base.tensors,
        "bott",
        &cache.bott,
        &grad_mid,
        &cache.temb,
        &cache.e_base,
        &mut gbase,
        &mut de_base,
    );
    let grad_pool1 = block_backward(
        &base.tensors,
        "enc2",
        &cache.enc2,
        &grad_h2,
        &cache.temb,
        &cache.e_base,
        &mut gbase,
        &mut de_base,
    );
    let mut grad_h1 = avgpool2_backward(&grad_pool1);
    if let Some(skip) = grad_skip {
        for (a, b) in grad_h1.data.iter_mut().zip(&skip.data) {
            *a += b;
        }
    }
    let _ = block_backward(
        &base.tensors,
        "enc1",
        &cache.enc1,
        &grad_h1,
        &cache.temb,
        &cache.e_base,
        &mut gbase,
        &mut de_base,
    );

    // Base prompt-table gradient.
    if let (Some(p), Some(table)) = (cache.prompt, base.tensors.get("prompt.table")) {
        let gt = gbase
            .entry("prompt.table".into())
            .or_insert_with(|| Tensor::zeros(&table.dims));
        for (j, g) in de_base.iter().enumerate() {
            *gt.at2_mut(p, j) += g;
        }
    }

    // Branch blocks.
    if let (Some(br), Some(bc)) = (branch, &cache.branch) {
        let grad_b3 = grad_b3.expect("branch gradient");
        let grad_b2 = block_backward(
            &br.tensors,
            "bott",
            &bc.bott,
            &grad_b3,
            &cache.temb,
            &cache.e_branch,
            &mut gbranch,
            &mut de_branch,
        );
        let grad_poolb = block_backward(
            &br.tensors,
            "enc2",
            &bc.enc2,
            &grad_b2,
            &cache.temb,
            &cache.e_branch,
            &mut gbranch,
            &mut de_branch,
        );
        let mut grad_b1 = avgpool2_backward(&grad_poolb);
        if let Some(extra) = grad_b1_extra {
            for (a, b) in grad_b1.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        let _ = block_backward(
            &br.tensors,
            "enc1",
            &bc.enc1,
            &grad_b1,
            &cache.temb,
            &cache.e_branch,
            &mut gbranch,
            &mut de_branch,
        );

        match br.kind {
            BranchKind::Pose => {
                if let (Some(p), Some(table)) = (cache.prompt, br.tensors.get("prompt.table")) {
                    let gt = gbranch
                        .entry("prompt.table".into())
                        .or_insert_with(|| Tensor::zeros(&table.dims));
                    for (j, g) in de_branch.iter().enumerate() {
                        *gt.at2_mut(p, j) += g;
                    }
                }
            }
            BranchKind::Attribute => {
                if let Some(w) = br.tensors.get("attr.w") {
                    let wdims = w.dims.clone();
                    if let Some(attr) = &cache.attr_input {
                        {
                            let gw = gbranch
                                .entry("attr.w".into())
                                .or_insert_with(|| Tensor::zeros(&wdims));
                            for (j, g) in de_branch.iter().enumerate() {
                                for (k, x) in attr.iter().enumerate() {
                                    *gw.at2_mut(j, k) += g * x;
                                }
                            }
                        }
                        let gb = gbranch
                            .entry("attr.b".into())
                            .or_insert_with(|| Tensor::zeros(&[cfg.emb_dim]));
                        for (j, g) in de_branch.iter().enumerate() {
                            gb.data[j] += g;
                        }
                    }
                }
            }
        }
    }

    // Fill in zero gradients for untouched tensors so the maps always share
    // keys with their parameter tables.
    for (name, t) in &base.tensors {
        gbase
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&t.dims));
    }
    let branch_grads = branch.map(|br| {
        for (name, t) in &br.tensors {
            gbranch
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&t.dims));
        }
        gbranch
    });

    Gradients {
        base: gbase,
        branch: branch_grads,
    }
}

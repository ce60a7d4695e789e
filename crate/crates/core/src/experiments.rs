//! Scripted directional experiments on the toy pipeline: the
//! domain-adaptation comparison, the shape-adherence comparison, and the
//! guidance-scale grids. Each experiment runs matched arms that share initial
//! noise and conditions so differences are attributable to the composition.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::denoiser::{
    init_attribute_branch, init_base, init_branch_from_base, ConditionSet, ControlBranchParams,
    DenoiserParams, FinetuneScope, NetConfig,
};
use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::guidance::{initial_noise, sample_from, GuidanceConfig, GuidanceVariant, Networks};
use crate::metrics::{kid, toy_features, MetricReport};
use crate::rng::{derive_seed, StreamRng};
use crate::synthdata::{
    generate_dataset_with, render_pose_map, AnnotatedSample, FigureSpec, ShapeDistribution, Style,
    NUM_KEYPOINTS, NUM_PROMPTS, POSE_RANGE, RASTER_SIZE, SHAPE_RANGE,
};
use crate::training::{train_base, train_control, LossRecord, TrainConfig, TrainSample};

/// Everything needed to reproduce one end-to-end toy run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub net: NetConfig,
    /// Forward-process length T.
    pub train_steps: usize,
    pub beta_range: (f64, f64),
    /// Dataset sizes for the two domains.
    pub n_target: usize,
    pub n_synth: usize,
    /// Optimizer steps per stage.
    pub base_steps: usize,
    pub pose_steps: usize,
    pub attr_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Separate learning rate for the pose stage: the zero-initialized branch
    /// projections see much smaller gradients than the backbone convolutions
    /// and need a larger step to move at all.
    pub pose_lr: f64,
    /// Separate learning rate for the attribute stage, for the same reason.
    pub attr_lr: f64,
    pub cond_dropout: f64,
    /// Sampler settings shared by all experiments.
    pub sample_steps: usize,
    pub w1: f64,
    pub w2: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            net: default_net_config(),
            train_steps: 100,
            beta_range: (1.0e-4, 0.07),
            n_target: 256,
            n_synth: 256,
            base_steps: 400,
            pose_steps: 400,
            attr_steps: 400,
            batch_size: 16,
            learning_rate: 2.0e-3,
            pose_lr: 2.0e-2,
            attr_lr: 1.0e-2,
            cond_dropout: 0.1,
            sample_steps: 15,
            w1: 7.5,
            w2: 7.5,
            seed: 0,
        }
    }
}

pub fn default_net_config() -> NetConfig {
    NetConfig {
        height: RASTER_SIZE,
        width: RASTER_SIZE,
        c1: 8,
        c2: 16,
        emb_dim: 8,
        time_dim: 8,
        num_prompts: NUM_PROMPTS,
        attr_dim: 2,
        pose_channels: NUM_KEYPOINTS,
        coords: true,
        skip: true,
    }
}

impl PipelineConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(ScheduleKind::Linear, self.train_steps, self.beta_range)
    }

    fn train_config(&self, stage: &str, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            learning_rate: match stage {
                "attr" => self.attr_lr,
                "pose" => self.pose_lr,
                _ => self.learning_rate,
            },
            embed_bias_lr: if stage == "attr" {
                Some(self.learning_rate)
            } else {
                None
            },
            momentum: 0.9,
            cond_dropout: self.cond_dropout,
            seed: derive_seed(self.seed, &format!("train/{stage}")),
            stage: stage.into(),
        }
    }

    fn guidance_config(&self, variant: GuidanceVariant, seed: u64) -> GuidanceConfig {
        GuidanceConfig {
            variant,
            w1: self.w1,
            w2: self.w2,
            steps: self.sample_steps,
            seed,
            clip_z0: true,
        }
    }
}

/// The attribute vector c_s: (shape, pose) scaled to [-1, 1].
pub fn attribute_vec(shape: f64, pose: f64) -> Vec<f64> {
    vec![shape / SHAPE_RANGE, pose / POSE_RANGE]
}

/// Raster [0, 1] -> latent [-1, 1].
pub fn to_latent(raster: &[f64]) -> Vec<f64> {
    raster.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Latent -> raster, clamped to the valid intensity range.
pub fn to_raster(latent: &[f64]) -> Vec<f64> {
    latent.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

/// Dataset row -> training example. Attributes are attached only when
/// requested (the attribute branch's stage); prompts ride along as annotated.
pub fn to_train_sample(sample: &AnnotatedSample, with_attribute: bool) -> TrainSample {
    TrainSample {
        z0: to_latent(&sample.raster),
        cond: ConditionSet {
            prompt: sample.spec.prompt,
            attribute: with_attribute
                .then(|| attribute_vec(sample.spec.shape, sample.spec.pose)),
            pose_map: Some(sample.pose_map.clone()),
        },
    }
}

/// The frozen backbone plus both trained control branches.
pub struct TrainedPipeline {
    pub base: DenoiserParams,
    pub pose: ControlBranchParams,
    pub attr: ControlBranchParams,
    pub schedule: NoiseSchedule,
}

impl TrainedPipeline {
    pub fn networks(&self) -> Networks<'_> {
        Networks {
            base: &self.base,
            pose: Some(&self.pose),
            attr: Some(&self.attr),
        }
    }
}

/// Three-stage training: backbone on the target domain, pose branch on the
/// target domain against the frozen backbone, attribute branch on the
/// synthetic domain starting from the trained pose branch.
pub fn train_pipeline(cfg: &PipelineConfig) -> Result<(TrainedPipeline, Vec<LossRecord>)> {
    let schedule = cfg.schedule()?;
    let target = generate_dataset_with(
        cfg.n_target,
        Style::Target,
        ShapeDistribution::TruncatedNormal,
        derive_seed(cfg.seed, "data/target"),
    )?;
    let synth = generate_dataset_with(
        cfg.n_synth,
        Style::Synthetic,
        ShapeDistribution::Uniform,
        derive_seed(cfg.seed, "data/synth"),
    )?;
    let target_samples: Vec<TrainSample> =
        target.iter().map(|s| to_train_sample(s, false)).collect();
    let synth_samples: Vec<TrainSample> =
        synth.iter().map(|s| to_train_sample(s, true)).collect();

    let mut records = Vec::new();
    let mut base = init_base(&cfg.net, derive_seed(cfg.seed, "init/base"));
    records.extend(train_base(
        &mut base,
        &schedule,
        &target_samples,
        &cfg.train_config("base", cfg.base_steps),
    )?);
    base.frozen = true;

    let mut pose = init_branch_from_base(&base, FinetuneScope::All, 0);
    records.extend(train_control(
        &base,
        &mut pose,
        &schedule,
        &target_samples,
        &cfg.train_config("pose", cfg.pose_steps),
    )?);

    let mut attr = init_attribute_branch(&pose, FinetuneScope::All);
    records.extend(train_control(
        &base,
        &mut attr,
        &schedule,
        &synth_samples,
        &cfg.train_config("attr", cfg.attr_steps),
    )?);

    Ok((
        TrainedPipeline {
            base,
            pose,
            attr,
            schedule,
        },
        records,
    ))
}

fn noise_digest(z: &[f64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in z {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Draw a target-domain condition (prompt, shape, pose) for generation.
fn draw_condition(seed: u64) -> (FigureSpec, ConditionSet) {
    let mut rng = StreamRng::new(seed, "experiment/cond");
    let spec = FigureSpec {
        shape: rng.truncated_normal(-SHAPE_RANGE, SHAPE_RANGE),
        pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
        style: Style::Target,
        prompt: Some(rng.below(NUM_PROMPTS)),
    };
    let pose_map = render_pose_map(&spec).expect("sampled spec in range");
    let cond = ConditionSet {
        prompt: spec.prompt,
        attribute: Some(attribute_vec(spec.shape, spec.pose)),
        pose_map: Some(pose_map),
    };
    (spec, cond)
}

// ---------------------------------------------------------------------------
// Domain-gap experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DomainGapRow {
    pub seed: u64,
    pub kid_full: f64,
    pub kid_no_da: f64,
}

#[derive(Debug, Clone)]
pub struct DomainGapOutcome {
    pub rows: Vec<DomainGapRow>,
    /// mean KID(no_domain_adaptation) / mean KID(full_composition).
    pub ratio: f64,
    pub reports: Vec<MetricReport>,
}

/// Generate matched sample sets under the full composition and the
/// no-domain-adaptation ablation, then score each against a target-domain
/// holdout with KID over toy features.
pub fn run_domain_gap_experiment(
    pipe: &TrainedPipeline,
    cfg: &PipelineConfig,
    n_samples: usize,
    seeds: &[u64],
) -> Result<DomainGapOutcome> {
    if n_samples < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: n_samples,
        });
    }
    if seeds.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let holdout = generate_dataset_with(
        n_samples.max(16),
        Style::Target,
        ShapeDistribution::TruncatedNormal,
        derive_seed(cfg.seed, "data/holdout"),
    )?;
    let holdout_features: Vec<Vec<f64>> = holdout
        .iter()
        .map(|s| toy_features(&s.raster))
        .collect::<Result<_>>()?;

    let nets = pipe.networks();
    let mut rows = Vec::with_capacity(seeds.len());
    let mut reports = Vec::with_capacity(seeds.len() + 1);
    for &seed in seeds {
        let arms: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let cell = derive_seed(seed, &format!("domain/{i}"));
                let (_, cond) = draw_condition(cell);
                let noise = initial_noise(cell, cfg.net.pixels());
                let noise_b = noise.clone();
                // Matched-arm discipline: both arms consume the same latent.
                debug_assert_eq!(noise_digest(&noise), noise_digest(&noise_b));
                let (z_full, _) = sample_from(
                    &nets,
                    noise,
                    &cond,
                    &cfg.guidance_config(GuidanceVariant::FullComposition, cell),
                    &pipe.schedule,
                )?;
                let (z_noda, _) = sample_from(
                    &nets,
                    noise_b,
                    &cond,
                    &cfg.guidance_config(GuidanceVariant::NoDomainAdaptation, cell),
                    &pipe.schedule,
                )?;
                Ok((
                    toy_features(&to_raster(&z_full))?,
                    toy_features(&to_raster(&z_noda))?,
                ))
            })
            .collect();
        let mut full_features = Vec::with_capacity(n_samples);
        let mut noda_features = Vec::with_capacity(n_samples);
        for arm in arms {
            let (f, n) = arm?;
            full_features.push(f);
            noda_features.push(n);
        }
        let kid_full = kid(&full_features, &holdout_features)?;
        let kid_no_da = kid(&noda_features, &holdout_features)?;
        let mut report = MetricReport::new(format!("domain-gap/seed{seed}"));
        report.push("kid_full_composition", kid_full);
        report.push("kid_no_domain_adaptation", kid_no_da);
        reports.push(report);
        rows.push(DomainGapRow {
            seed,
            kid_full,
            kid_no_da,
        });
    }
    let mean_full: f64 = rows.iter().map(|r| r.kid_full).sum::<f64>() / rows.len() as f64;
    let mean_noda: f64 = rows.iter().map(|r| r.kid_no_da).sum::<f64>() / rows.len() as f64;
    let ratio = mean_noda / mean_full;
    let mut agg = MetricReport::new("domain-gap/aggregate");
    agg.push("kid_full_composition_mean", mean_full);
    agg.push("kid_no_domain_adaptation_mean", mean_noda);
    agg.push("kid_ratio", ratio);
    reports.push(agg);
    Ok(DomainGapOutcome {
        rows,
        ratio,
        reports,
    })
}

// ---------------------------------------------------------------------------
// Shape-adherence experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ShapeCell {
    pub shape: f64,
    /// Mean |s - s_hat| for the composed arm.
    pub composed_err: f64,
    /// Mean |s - s_hat| for the pose-only plain-CfG baseline.
    pub baseline_err: f64,
    /// Samples on which the analyzer found no figure (scored as if the
    /// generator produced the mean shape).
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct ShapeAdherenceOutcome {
    pub cells: Vec<ShapeCell>,
}

pub const SHAPE_CSV_HEADER: &str = "shape,composed_err,baseline_err,failures";

impl ShapeAdherenceOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SHAPE_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{}\n",
                c.shape, c.composed_err, c.baseline_err, c.failures
            ));
        }
        out
    }
}

/// Recovered shape for a generated latent; analyzer failures fall back to the
/// mean shape (the least-informative estimate), which is also what a sample
/// with no discernible figure conveys.
fn recovered_shape(z: &[f64]) -> (f64, bool) {
    match crate::synthdata::analyze_figure(&to_raster(z)) {
        Ok((s_hat, _)) => (s_hat, false),
        Err(_) => (0.0, true),
    }
}

/// For each grid shape, generate matched samples with (a) the full composition
/// conditioned on the shape and (b) the pose-only plain-CfG baseline carrying
/// no shape information, then measure recovered-shape error per arm.
pub fn run_shape_adherence_experiment(
    pipe: &TrainedPipeline,
    cfg: &PipelineConfig,
    shape_grid: &[f64],
    seeds: &[u64],
    n_per_cell: usize,
) -> Result<ShapeAdherenceOutcome> {
    if shape_grid.is_empty() || seeds.is_empty() || n_per_cell == 0 {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let nets = pipe.networks();
    let cells: Vec<Result<ShapeCell>> = shape_grid
        .par_iter()
        .map(|&shape| {
            let mut composed_sum = 0.0;
            let mut baseline_sum = 0.0;
            let mut failures = 0;
            for &seed in seeds {
                for rep in 0..n_per_cell {
                    let cell = derive_seed(seed, &format!("shape/{shape:.6}/{rep}"));
                    let mut rng = StreamRng::new(cell, "pose-prompt");
                    let spec = FigureSpec {
                        shape,
                        pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
                        style: Style::Target,
                        prompt: Some(rng.below(NUM_PROMPTS)),
                    };
                    spec.validate()?;
                    let pose_map = render_pose_map(&spec)?;
                    let cond = ConditionSet {
                        prompt: spec.prompt,
                        attribute: Some(attribute_vec(spec.shape, spec.pose)),
                        pose_map: Some(pose_map),
                    };
                    let noise = initial_noise(cell, cfg.net.pixels());
                    debug_assert_eq!(noise_digest(&noise), noise_digest(&noise.clone()));
                    let (z_full, _) = sample_from(
                        &nets,
                        noise.clone(),
                        &cond,
                        &cfg.guidance_config(GuidanceVariant::FullComposition, cell),
                        &pipe.schedule,
                    )?;
                    // The baseline arm is pose-only: no prompt and no
                    // attribute, so its guidance vector is identically zero
                    // and sampling follows the pose-conditional prediction.
                    let pose_only = ConditionSet {
                        prompt: None,
                        attribute: None,
                        pose_map: cond.pose_map.clone(),
                    };
                    let (z_base, _) = sample_from(
                        &nets,
                        noise,
                        &pose_only,
                        &cfg.guidance_config(GuidanceVariant::PlainCfg, cell),
                        &pipe.schedule,
                    )?;
                    let (s_full, fail_a) = recovered_shape(&z_full);
                    let (s_base, fail_b) = recovered_shape(&z_base);
                    failures += fail_a as usize + fail_b as usize;
                    composed_sum += (shape - s_full).abs();
                    baseline_sum += (shape - s_base).abs();
                }
            }
            let n = (seeds.len() * n_per_cell) as f64;
            Ok(ShapeCell {
                shape,
                composed_err: composed_sum / n,
                baseline_err: baseline_sum / n,
                failures,
            })
        })
        .collect();
    Ok(ShapeAdherenceOutcome {
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

// ---------------------------------------------------------------------------
// Guidance grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridCell {
    pub w1: f64,
    pub w2: f64,
    pub raster: Vec<f64>,
    /// NaN when the analyzer finds no figure in the cell.
    pub s_hat: f64,
    pub p_hat: f64,
    /// Mean absolute border-pixel deviation from the (0, 0) cell.
    pub bg_dev: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
}

pub const GRID_CSV_HEADER: &str = "w1,w2,s_hat,p_hat,bg_dev";

impl GridOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(GRID_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                c.w1, c.w2, c.s_hat, c.p_hat, c.bg_dev
            ));
        }
        out
    }

    pub fn cell(&self, w1: f64, w2: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.w1 == w1 && c.w2 == w2)
    }
}

fn border_deviation(raster: &[f64], reference: &[f64]) -> f64 {
    let n = RASTER_SIZE;
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        for idx in [i, (n - 1) * n + i, i * n, i * n + n - 1] {
            sum += (raster[idx] - reference[idx]).abs();
            count += 1.0;
        }
    }
    sum / count
}

/// One sample per (w1, w2) cell with shared initial noise and condition. The
/// default scale pair (7.5, 7.5) is always included; background deviation is
/// measured against the unguided (0, 0) cell.
pub fn run_guidance_grid(
    pipe: &TrainedPipeline,
    cfg: &PipelineConfig,
    w1_list: &[f64],
    w2_list: &[f64],
    spec: &FigureSpec,
    seed: u64,
) -> Result<GridOutcome> {
    if w1_list.is_empty() || w2_list.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    spec.validate()?;
    let mut w1s = w1_list.to_vec();
    let mut w2s = w2_list.to_vec();
    for ws in [&mut w1s, &mut w2s] {
        if !ws.contains(&7.5) {
            ws.push(7.5);
        }
    }
    let pose_map = render_pose_map(spec)?;
    let cond = ConditionSet {
        prompt: spec.prompt,
        attribute: Some(attribute_vec(spec.shape, spec.pose)),
        pose_map: Some(pose_map),
    };
    let nets = pipe.networks();
    let noise = initial_noise(derive_seed(seed, "grid"), cfg.net.pixels());

    let run_cell = |w1: f64, w2: f64| -> Result<Vec<f64>> {
        let gcfg = GuidanceConfig {
            variant: GuidanceVariant::FullComposition,
            w1,
            w2,
            steps: cfg.sample_steps,
            seed,
            clip_z0: true,
        };
        debug_assert_eq!(noise_digest(&noise), noise_digest(&noise.clone()));
        let (z, _) = sample_from(&nets, noise.clone(), &cond, &gcfg, &pipe.schedule)?;
        Ok(to_raster(&z))
    };

    let reference = run_cell(0.0, 0.0)?;
    let pairs: Vec<(f64, f64)> = w1s
        .iter()
        .flat_map(|&a| w2s.iter().map(move |&b| (a, b)))
        .collect();
    let cells: Vec<Result<GridCell>> = pairs
        .par_iter()
        .map(|&(w1, w2)| {
            let raster = run_cell(w1, w2)?;
            let (s_hat, p_hat) = crate::synthdata::analyze_figure(&raster)
                .unwrap_or((f64::NAN, f64::NAN));
            let bg_dev = border_deviation(&raster, &reference);
            Ok(GridCell {
                w1,
                w2,
                raster,
                s_hat,
                p_hat,
                bg_dev,
            })
        })
        .collect();
    Ok(GridOutcome {
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

//! Command-line front end: dataset generation, staged training, guided
//! sampling, and the evaluation experiments. Exit codes: 0 success, 1 usage
//! error, 2 validation/data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use guidecomp::body::{lbs, sample_body_params, BodyModel};
use guidecomp::denoiser::{
    init_attribute_branch, init_base, init_branch_from_base, ConditionSet, FinetuneScope,
};
use guidecomp::error::Error;
use guidecomp::experiments::{
    attribute_vec, run_domain_gap_experiment, run_guidance_grid, run_shape_adherence_experiment,
    to_raster, to_train_sample, PipelineConfig, TrainedPipeline,
};
use guidecomp::guidance::{
    initial_noise, sample_from, GuidanceConfig, GuidanceVariant, Networks, TRACE_CSV_HEADER,
};
use guidecomp::io::{
    base_from_checkpoint, branch_from_checkpoint, checkpoint_from_base, checkpoint_from_branch,
    load_checkpoint, save_checkpoint, save_csv, save_raster, RunConfig,
};
use guidecomp::metrics::{kid, mpjpe_pa, pvet_sc, toy_features, MetricReport};
use guidecomp::rng::{derive_seed, StreamRng};
use guidecomp::synthdata::{
    generate_dataset_with, render_pose_map, FigureSpec, ShapeDistribution, Style, NUM_PROMPTS,
    POSE_RANGE, SHAPE_RANGE,
};
use guidecomp::training::{loss_csv_rows, train_base, train_control, LOSS_CSV_HEADER};

/// Configuration keys accepted in `--config` files, with their defaults in
/// parentheses. Any other key is rejected.
const CONFIG_HELP: &str = "\
Config file keys (key = value, # comments):
  net.c1 (8), net.c2 (16), net.emb_dim (8), net.time_dim (8)
  train_steps (100), beta_min (0.0001), beta_max (0.07)
  n_target (256), n_synth (256)
  base_steps (400), pose_steps (400), attr_steps (400)
  batch_size (16), learning_rate (0.002), attr_lr (0.01), cond_dropout (0.1)
  sample_steps (15), w1 (7.5), w2 (7.5), seed (0)";

const KNOWN_KEYS: &[&str] = &[
    "net.c1",
    "net.c2",
    "net.emb_dim",
    "net.time_dim",
    "train_steps",
    "beta_min",
    "beta_max",
    "n_target",
    "n_synth",
    "base_steps",
    "pose_steps",
    "attr_steps",
    "batch_size",
    "learning_rate",
    "attr_lr",
    "cond_dropout",
    "sample_steps",
    "w1",
    "w2",
    "seed",
];

#[derive(Parser)]
#[command(
    name = "guidecomp",
    version,
    about = "Toy conditional-diffusion laboratory with composed guidance",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    /// Configuration file (flat key = value); unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configured seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, rasters, and reports
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker-thread cap (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Target,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Pose,
    Attr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    AttnOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoDa,
    NoPose,
    ExtraPrompt,
    Plain,
}

impl VariantArg {
    fn to_variant(self) -> GuidanceVariant {
        match self {
            VariantArg::Full => GuidanceVariant::FullComposition,
            VariantArg::NoDa => GuidanceVariant::NoDomainAdaptation,
            VariantArg::NoPose => GuidanceVariant::NoPoseGuidance,
            VariantArg::ExtraPrompt => GuidanceVariant::ExtraPrompt,
            VariantArg::Plain => GuidanceVariant::PlainCfg,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render an annotated figure dataset to rasters plus a spec CSV
    GenData {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, value_enum, default_value_t = StyleArg::Target)]
        style: StyleArg,
        /// Draw shapes uniformly instead of from the truncated normal
        #[arg(long)]
        uniform_shapes: bool,
    },
    /// Stage 1: train the backbone on the target domain
    TrainBase,
    /// Stage 2/3: train a control branch against the frozen backbone
    TrainControl {
        #[arg(long, value_enum)]
        kind: BranchArg,
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
    },
    /// Draw one guided sample and write the raster plus the guidance trace
    Sample {
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        #[arg(long)]
        w1: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        shape: f64,
        #[arg(long, default_value_t = 0.0)]
        pose: f64,
        #[arg(long, default_value_t = 0)]
        prompt: usize,
    },
    /// Sample a (w1, w2) grid with shared noise; writes rasters and a CSV
    Grid {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,7.5")]
        w1: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,7.5")]
        w2: Vec<f64>,
        #[arg(long, default_value_t = 2.0)]
        shape: f64,
        #[arg(long, default_value_t = 0.3)]
        pose: f64,
        #[arg(long, default_value_t = 0)]
        prompt: usize,
    },
    /// Domain-adaptation comparison: KID against a target holdout
    EvalDomain {
        #[arg(long, default_value_t = 24)]
        n_samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Shape-adherence comparison across a shape grid
    EvalShape {
        #[arg(long, value_delimiter = ',', default_value = "-2.5,-2,-1,0,1,2,2.5")]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 3)]
        n_per_cell: usize,
    },
    /// Body-metric calibration: PVET-sc / MPJPE-PA under known perturbations
    EvalBody {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Matched-noise comparison of every guidance variant
    Ablate {
        #[arg(long, default_value_t = 16)]
        n_samples: usize,
    },
    /// Merge every CSV report under the output directory into report.csv
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout (success) and usage errors
            // with their synopsis to stderr.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn ctx<T>(r: Result<T, Error>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

/// Effective pipeline configuration: file values over defaults, then the
/// --seed override.
fn effective_config(cli: &Cli) -> Result<(PipelineConfig, String), String> {
    let mut cfg = PipelineConfig::default();
    let mut tag = "default".to_string();
    if let Some(path) = &cli.config {
        let rc = ctx(RunConfig::load(path), &path.display().to_string())?;
        for key in rc.values.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(format!(
                    "{}: unknown configuration key {key:?}",
                    path.display()
                ));
            }
        }
        let g = |k: &str, d: f64| rc.get_f64(k, d);
        let u = |k: &str, d: usize| rc.get_usize(k, d);
        cfg.net.c1 = ctx(u("net.c1", cfg.net.c1), "config")?;
        cfg.net.c2 = ctx(u("net.c2", cfg.net.c2), "config")?;
        cfg.net.emb_dim = ctx(u("net.emb_dim", cfg.net.emb_dim), "config")?;
        cfg.net.time_dim = ctx(u("net.time_dim", cfg.net.time_dim), "config")?;
        cfg.train_steps = ctx(u("train_steps", cfg.train_steps), "config")?;
        cfg.beta_range.0 = ctx(g("beta_min", cfg.beta_range.0), "config")?;
        cfg.beta_range.1 = ctx(g("beta_max", cfg.beta_range.1), "config")?;
        cfg.n_target = ctx(u("n_target", cfg.n_target), "config")?;
        cfg.n_synth = ctx(u("n_synth", cfg.n_synth), "config")?;
        cfg.base_steps = ctx(u("base_steps", cfg.base_steps), "config")?;
        cfg.pose_steps = ctx(u("pose_steps", cfg.pose_steps), "config")?;
        cfg.attr_steps = ctx(u("attr_steps", cfg.attr_steps), "config")?;
        cfg.batch_size = ctx(u("batch_size", cfg.batch_size), "config")?;
        cfg.learning_rate = ctx(g("learning_rate", cfg.learning_rate), "config")?;
        cfg.attr_lr = ctx(g("attr_lr", cfg.attr_lr), "config")?;
        cfg.cond_dropout = ctx(g("cond_dropout", cfg.cond_dropout), "config")?;
        cfg.sample_steps = ctx(u("sample_steps", cfg.sample_steps), "config")?;
        cfg.w1 = ctx(g("w1", cfg.w1), "config")?;
        cfg.w2 = ctx(g("w2", cfg.w2), "config")?;
        cfg.seed = ctx(u("seed", cfg.seed as usize), "config")? as u64;
        tag = rc.digest_hex();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        tag = format!("{tag}-s{seed}");
    }
    Ok((cfg, tag))
}

fn ckpt_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}.ckpt"))
}

fn load_pipeline(out: &Path, cfg: &PipelineConfig) -> Result<TrainedPipeline, String> {
    let load = |name: &str| {
        let path = ckpt_path(out, name);
        ctx(load_checkpoint(&path), &path.display().to_string())
    };
    let base = ctx(base_from_checkpoint(&load("base")?), "base checkpoint")?;
    let pose = ctx(branch_from_checkpoint(&load("pose")?), "pose checkpoint")?;
    let attr = ctx(
        branch_from_checkpoint(&load("attribute")?),
        "attribute checkpoint",
    )?;
    let schedule = ctx(cfg.schedule(), "schedule")?;
    Ok(TrainedPipeline {
        base,
        pose,
        attr,
        schedule,
    })
}

fn spec_for(shape: f64, pose: f64, prompt: usize) -> Result<FigureSpec, String> {
    let spec = FigureSpec {
        shape,
        pose,
        style: Style::Target,
        prompt: Some(prompt),
    };
    ctx(spec.validate(), "condition")?;
    Ok(spec)
}

fn cond_for(spec: &FigureSpec) -> Result<ConditionSet, String> {
    Ok(ConditionSet {
        prompt: spec.prompt,
        attribute: Some(attribute_vec(spec.shape, spec.pose)),
        pose_map: Some(ctx(render_pose_map(spec), "pose map")?),
    })
}

fn run(cli: Cli) -> Result<(), String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))?;
    }
    let (cfg, tag) = effective_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;

    match cli.cmd {
        Cmd::GenData {
            n,
            style,
            uniform_shapes,
        } => {
            let style = match style {
                StyleArg::Target => Style::Target,
                StyleArg::Synthetic => Style::Synthetic,
            };
            let dist = if uniform_shapes {
                ShapeDistribution::Uniform
            } else {
                ShapeDistribution::TruncatedNormal
            };
            let seed = derive_seed(cfg.seed, &format!("data/{}", style.as_str()));
            let data = ctx(generate_dataset_with(n, style, dist, seed), "gen-data")?;
            let mut rows = Vec::with_capacity(n);
            for (i, s) in data.iter().enumerate() {
                let path = out.join(format!("{}_{i:05}.pgm", style.as_str()));
                ctx(save_raster(&path, &s.raster), &path.display().to_string())?;
                rows.push(format!(
                    "{i},{},{:.17e},{:.17e},{}",
                    s.spec.style.as_str(),
                    s.spec.shape,
                    s.spec.pose,
                    s.spec.prompt.map_or(-1_i64, |p| p as i64)
                ));
            }
            let csv = out.join("dataset.csv");
            ctx(
                save_csv(&csv, "index,style,shape,pose,prompt", &rows),
                &csv.display().to_string(),
            )?;
            println!("wrote {n} rasters and {}", csv.display());
        }
        Cmd::TrainBase => {
            let schedule = ctx(cfg.schedule(), "schedule")?;
            let data = ctx(
                generate_dataset_with(
                    cfg.n_target,
                    Style::Target,
                    ShapeDistribution::TruncatedNormal,
                    derive_seed(cfg.seed, "data/target"),
                ),
                "dataset",
            )?;
            let samples: Vec<_> = data.iter().map(|s| to_train_sample(s, false)).collect();
            let mut base = init_base(&cfg.net, derive_seed(cfg.seed, "init/base"));
            let tc = stage_config(&cfg, "base", cfg.base_steps);
            let records = ctx(train_base(&mut base, &schedule, &samples, &tc), "train-base")?;
            base.frozen = true;
            let path = ckpt_path(&out, "base");
            ctx(
                save_checkpoint(&path, &checkpoint_from_base(&base)),
                &path.display().to_string(),
            )?;
            let loss_path = out.join("loss_base.csv");
            ctx(
                save_csv(&loss_path, LOSS_CSV_HEADER, &loss_csv_rows(&records)),
                &loss_path.display().to_string(),
            )?;
            println!(
                "trained base ({} steps, final loss {:.4}) -> {}",
                records.len(),
                records.last().map_or(f64::NAN, |r| r.loss),
                path.display()
            );
        }
        Cmd::TrainControl { kind, scope } => {
            let schedule = ctx(cfg.schedule(), "schedule")?;
            let base_path = ckpt_path(&out, "base");
            let base = ctx(
                load_checkpoint(&base_path).and_then(|ck| base_from_checkpoint(&ck)),
                &base_path.display().to_string(),
            )?;
            let scope = match scope {
                ScopeArg::All => FinetuneScope::All,
                ScopeArg::AttnOnly => FinetuneScope::AttnOnly,
            };
            let (stage, name) = match kind {
                BranchArg::Pose => ("pose", "pose"),
                BranchArg::Attr => ("attr", "attribute"),
            };
            let (mut branch, samples) = match kind {
                BranchArg::Pose => {
                    let data = ctx(
                        generate_dataset_with(
                            cfg.n_target,
                            Style::Target,
                            ShapeDistribution::TruncatedNormal,
                            derive_seed(cfg.seed, "data/target"),
                        ),
                        "dataset",
                    )?;
                    let samples: Vec<_> = data.iter().map(|s| to_train_sample(s, false)).collect();
                    (init_branch_from_base(&base, scope, 0), samples)
                }
                BranchArg::Attr => {
                    let pose_path = ckpt_path(&out, "pose");
                    let donor = ctx(
                        load_checkpoint(&pose_path).and_then(|ck| branch_from_checkpoint(&ck)),
                        &pose_path.display().to_string(),
                    )?;
                    let data = ctx(
                        generate_dataset_with(
                            cfg.n_synth,
                            Style::Synthetic,
                            ShapeDistribution::Uniform,
                            derive_seed(cfg.seed, "data/synth"),
                        ),
                        "dataset",
                    )?;
                    let samples: Vec<_> = data.iter().map(|s| to_train_sample(s, true)).collect();
                    (init_attribute_branch(&donor, scope), samples)
                }
            };
            let steps = match kind {
                BranchArg::Pose => cfg.pose_steps,
                BranchArg::Attr => cfg.attr_steps,
            };
            let tc = stage_config(&cfg, stage, steps);
            let records = ctx(
                train_control(&base, &mut branch, &schedule, &samples, &tc),
                "train-control",
            )?;
            let path = ckpt_path(&out, name);
            ctx(
                save_checkpoint(&path, &checkpoint_from_branch(&branch)),
                &path.display().to_string(),
            )?;
            let loss_path = out.join(format!("loss_{stage}.csv"));
            ctx(
                save_csv(&loss_path, LOSS_CSV_HEADER, &loss_csv_rows(&records)),
                &loss_path.display().to_string(),
            )?;
            println!(
                "trained {name} branch ({} steps, final loss {:.4}) -> {}",
                records.len(),
                records.last().map_or(f64::NAN, |r| r.loss),
                path.display()
            );
        }
        Cmd::Sample {
            variant,
            w1,
            w2,
            shape,
            pose,
            prompt,
        } => {
            let pipe = load_pipeline(&out, &cfg)?;
            let spec = spec_for(shape, pose, prompt)?;
            let cond = cond_for(&spec)?;
            let gcfg = GuidanceConfig {
                variant: variant.to_variant(),
                w1: w1.unwrap_or(cfg.w1),
                w2: w2.unwrap_or(cfg.w2),
                steps: cfg.sample_steps,
                seed: cfg.seed,
                clip_z0: true,
            };
            let nets = networks_for(&pipe, gcfg.variant, gcfg.w1, gcfg.w2);
            let noise = initial_noise(gcfg.seed, cfg.net.pixels());
            let (z, trace) = ctx(
                sample_from(&nets, noise, &cond, &gcfg, &pipe.schedule),
                "sample",
            )?;
            let raster_path = out.join("sample.pgm");
            ctx(
                save_raster(&raster_path, &to_raster(&z)),
                &raster_path.display().to_string(),
            )?;
            let trace_path = out.join("trace.csv");
            ctx(
                save_csv(&trace_path, TRACE_CSV_HEADER, &trace.csv_rows()),
                &trace_path.display().to_string(),
            )?;
            println!(
                "wrote {} and {}",
                raster_path.display(),
                trace_path.display()
            );
        }
        Cmd::Grid {
            w1,
            w2,
            shape,
            pose,
            prompt,
        } => {
            let pipe = load_pipeline(&out, &cfg)?;
            let spec = spec_for(shape, pose, prompt)?;
            let grid = ctx(
                run_guidance_grid(&pipe, &cfg, &w1, &w2, &spec, cfg.seed),
                "grid",
            )?;
            for cell in &grid.cells {
                let path = out.join(format!("grid_w1_{}_w2_{}.pgm", cell.w1, cell.w2));
                ctx(save_raster(&path, &cell.raster), &path.display().to_string())?;
            }
            let csv = out.join("grid.csv");
            guidecomp::io::write_atomic(&csv, grid.to_csv().as_bytes())
                .map_err(|e| format!("{}: {e}", csv.display()))?;
            println!("wrote {} grid cells and {}", grid.cells.len(), csv.display());
        }
        Cmd::EvalDomain { n_samples, seeds } => {
            let pipe = load_pipeline(&out, &cfg)?;
            let outcome = ctx(
                run_domain_gap_experiment(&pipe, &cfg, n_samples, &seeds),
                "eval-domain",
            )?;
            let mut rows = Vec::new();
            for report in &outcome.reports {
                for line in report.to_csv().lines().skip(1) {
                    rows.push(line.to_string());
                }
            }
            let csv = out.join("domain.csv");
            ctx(
                save_csv(&csv, "tag,metric,value", &rows),
                &csv.display().to_string(),
            )?;
            println!(
                "KID ratio {:.3} over {} seeds -> {}",
                outcome.ratio,
                outcome.rows.len(),
                csv.display()
            );
        }
        Cmd::EvalShape {
            grid,
            seeds,
            n_per_cell,
        } => {
            let pipe = load_pipeline(&out, &cfg)?;
            let outcome = ctx(
                run_shape_adherence_experiment(&pipe, &cfg, &grid, &seeds, n_per_cell),
                "eval-shape",
            )?;
            let csv = out.join("shape.csv");
            guidecomp::io::write_atomic(&csv, outcome.to_csv().as_bytes())
                .map_err(|e| format!("{}: {e}", csv.display()))?;
            println!("wrote {}", csv.display());
        }
        Cmd::EvalBody { n } => {
            let report = eval_body(n, cfg.seed, &tag)?;
            let csv = out.join("body.csv");
            guidecomp::io::write_atomic(&csv, report.to_csv().as_bytes())
                .map_err(|e| format!("{}: {e}", csv.display()))?;
            println!("wrote {}", csv.display());
        }
        Cmd::Ablate { n_samples } => {
            let pipe = load_pipeline(&out, &cfg)?;
            let report = ablate(&pipe, &cfg, n_samples, &tag)?;
            let csv = out.join("ablation.csv");
            guidecomp::io::write_atomic(&csv, report.to_csv().as_bytes())
                .map_err(|e| format!("{}: {e}", csv.display()))?;
            println!("wrote {}", csv.display());
        }
        Cmd::Report => {
            let mut rows = Vec::new();
            let mut entries: Vec<_> = std::fs::read_dir(&out)
                .map_err(|e| format!("{}: {e}", out.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .collect();
            entries.sort();
            for path in entries {
                let name = path.file_name().unwrap_or_default().to_string_lossy();
                if path.extension().map(|e| e == "csv").unwrap_or(false) && name != "report.csv" {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| format!("{}: {e}", path.display()))?;
                    for line in text.lines().skip(1) {
                        rows.push(format!("{name},{line}"));
                    }
                }
            }
            let csv = out.join("report.csv");
            ctx(
                save_csv(&csv, "source,fields", &rows),
                &csv.display().to_string(),
            )?;
            println!("merged {} rows into {}", rows.len(), csv.display());
        }
    }
    Ok(())
}

fn stage_config(cfg: &PipelineConfig, stage: &str, steps: usize) -> guidecomp::training::TrainConfig {
    guidecomp::training::TrainConfig {
        steps,
        batch_size: cfg.batch_size,
        learning_rate: match stage {
            "attr" => cfg.attr_lr,
            "pose" => cfg.pose_lr,
            _ => cfg.learning_rate,
        },
        embed_bias_lr: if stage == "attr" {
            Some(cfg.learning_rate)
        } else {
            None
        },
        momentum: 0.9,
        cond_dropout: cfg.cond_dropout,
        seed: derive_seed(cfg.seed, &format!("train/{stage}")),
        stage: stage.into(),
    }
}

/// Only hand the sampler the networks its variant (and non-zero scales)
/// actually needs, so missing checkpoints surface as MissingNetwork.
fn networks_for<'a>(
    pipe: &'a TrainedPipeline,
    variant: GuidanceVariant,
    _w1: f64,
    _w2: f64,
) -> Networks<'a> {
    let mut nets = pipe.networks();
    if variant == GuidanceVariant::PlainCfg {
        nets.attr = None;
    }
    nets
}

fn eval_body(n: usize, seed: u64, tag: &str) -> Result<MetricReport, String> {
    let model = BodyModel::default_toy();
    let mut rng = StreamRng::new(seed, "eval-body");
    let mut sum_pvet = 0.0;
    let mut sum_mpjpe = 0.0;
    for _ in 0..n {
        let (shape, pose, trans) = sample_body_params(&mut rng, 0.6);
        let (verts, joints) = ctx(lbs(&model, &shape, &pose, &trans), "lbs")?;
        // Jittered estimate standing in for a recovered body.
        let jitter = 0.05;
        let verts_hat: Vec<_> = verts
            .iter()
            .map(|v| [0, 1, 2].map(|k| v[k] + jitter * rng.normal()))
            .collect();
        let joints_hat: Vec<_> = joints
            .iter()
            .map(|j| [0, 1, 2].map(|k| j[k] + jitter * rng.normal()))
            .collect();
        sum_pvet += ctx(pvet_sc(&verts_hat, &verts), "pvet")?;
        sum_mpjpe += ctx(mpjpe_pa(&joints_hat, &joints), "mpjpe")?;
    }
    let mut report = MetricReport::new(format!("body/{tag}"));
    report.push("pvet_sc_mean", sum_pvet / n.max(1) as f64);
    report.push("mpjpe_pa_mean", sum_mpjpe / n.max(1) as f64);
    report.push("samples", n as f64);
    Ok(report)
}

fn ablate(
    pipe: &TrainedPipeline,
    cfg: &PipelineConfig,
    n_samples: usize,
    tag: &str,
) -> Result<MetricReport, String> {
    if n_samples < 2 {
        return Err("ablate: need at least 2 samples".into());
    }
    let holdout = ctx(
        generate_dataset_with(
            n_samples.max(16),
            Style::Target,
            ShapeDistribution::TruncatedNormal,
            derive_seed(cfg.seed, "data/holdout"),
        ),
        "holdout",
    )?;
    let holdout_features: Vec<Vec<f64>> = holdout
        .iter()
        .map(|s| ctx(toy_features(&s.raster), "features"))
        .collect::<Result<_, _>>()?;
    let variants = [
        GuidanceVariant::FullComposition,
        GuidanceVariant::NoDomainAdaptation,
        GuidanceVariant::NoPoseGuidance,
        GuidanceVariant::ExtraPrompt,
        GuidanceVariant::PlainCfg,
    ];
    let mut report = MetricReport::new(format!("ablation/{tag}"));
    let nets = pipe.networks();
    for variant in variants {
        let mut features = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let cell = derive_seed(cfg.seed, &format!("ablate/{i}"));
            let mut rng = StreamRng::new(cell, "cond");
            let spec = FigureSpec {
                shape: rng.truncated_normal(-SHAPE_RANGE, SHAPE_RANGE),
                pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
                style: Style::Target,
                prompt: Some(rng.below(NUM_PROMPTS)),
            };
            let cond = cond_for(&spec)?;
            let gcfg = GuidanceConfig {
                variant,
                w1: cfg.w1,
                w2: cfg.w2,
                steps: cfg.sample_steps,
                seed: cell,
                clip_z0: true,
            };
            let noise = initial_noise(cell, cfg.net.pixels());
            let (z, _) = ctx(
                sample_from(&nets, noise, &cond, &gcfg, &pipe.schedule),
                "ablate sample",
            )?;
            features.push(ctx(toy_features(&to_raster(&z)), "features")?);
        }
        let k = ctx(kid(&features, &holdout_features), "kid")?;
        report.push(format!("kid_{}", variant.as_str()), k);
    }
    Ok(report)
}

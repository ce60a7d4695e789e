use std::time::Instant;

use guidecomp::experiments::*;
use guidecomp::metrics::spearman;
use guidecomp::synthdata::{FigureSpec, Style};

fn main() {
    let mut cfg = PipelineConfig::default();
    let mut save_dir: Option<String> = None;
    let mut load_dir: Option<String> = None;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let v = args.next().expect("value");
        match a.as_str() {
            "--save-dir" => {
                save_dir = Some(v);
                continue;
            }
            "--load-dir" => {
                load_dir = Some(v);
                continue;
            }
            _ => {}
        }
        match a.as_str() {
            "--base-steps" => cfg.base_steps = v.parse().unwrap(),
            "--pose-steps" => cfg.pose_steps = v.parse().unwrap(),
            "--attr-steps" => cfg.attr_steps = v.parse().unwrap(),
            "--lr" => cfg.learning_rate = v.parse().unwrap(),
            "--attr-lr" => cfg.attr_lr = v.parse().unwrap(),
            "--pose-lr" => cfg.pose_lr = v.parse().unwrap(),
            "--dropout" => cfg.cond_dropout = v.parse().unwrap(),
            "--batch" => cfg.batch_size = v.parse().unwrap(),
            "--sample-steps" => cfg.sample_steps = v.parse().unwrap(),
            "--w1" => cfg.w1 = v.parse().unwrap(),
            "--w2" => cfg.w2 = v.parse().unwrap(),
            "--seed" => cfg.seed = v.parse().unwrap(),
            "--n-target" => cfg.n_target = v.parse().unwrap(),
            "--n-synth" => cfg.n_synth = v.parse().unwrap(),
            "--c1" => cfg.net.c1 = v.parse().unwrap(),
            "--c2" => cfg.net.c2 = v.parse().unwrap(),
            "--beta-max" => cfg.beta_range.1 = v.parse().unwrap(),
            "--train-steps" => cfg.train_steps = v.parse().unwrap(),
            other => panic!("unknown flag {other}"),
        }
    }
    println!("config: {cfg:?}");

    let t0 = Instant::now();
    let (pipe, records) = if let Some(dir) = &load_dir {
        use guidecomp::io::*;
        use std::path::Path;
        let d = Path::new(dir);
        let base = base_from_checkpoint(&load_checkpoint(&d.join("base.ckpt")).unwrap()).unwrap();
        let pose = branch_from_checkpoint(&load_checkpoint(&d.join("pose.ckpt")).unwrap()).unwrap();
        let attr = branch_from_checkpoint(&load_checkpoint(&d.join("attr.ckpt")).unwrap()).unwrap();
        let schedule = cfg.schedule().unwrap();
        (
            TrainedPipeline {
                base,
                pose,
                attr,
                schedule,
            },
            Vec::new(),
        )
    } else {
        train_pipeline(&cfg).expect("training")
    };
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    if let Some(dir) = &save_dir {
        use guidecomp::io::*;
        use std::path::Path;
        let d = Path::new(dir);
        std::fs::create_dir_all(d).unwrap();
        save_checkpoint(&d.join("base.ckpt"), &checkpoint_from_base(&pipe.base)).unwrap();
        save_checkpoint(&d.join("pose.ckpt"), &checkpoint_from_branch(&pipe.pose)).unwrap();
        save_checkpoint(&d.join("attr.ckpt"), &checkpoint_from_branch(&pipe.attr)).unwrap();
        println!("saved checkpoints to {dir}");
    }
    for stage in ["base", "pose", "attr"] {
        let losses: Vec<f64> = records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.loss)
            .collect();
        if losses.is_empty() {
            continue;
        }
        let head: f64 = losses[..5.min(losses.len())].iter().sum::<f64>() / 5.0_f64.min(losses.len() as f64);
        let k = losses.len().saturating_sub(10);
        let tail: f64 = losses[k..].iter().sum::<f64>() / (losses.len() - k) as f64;
        println!("stage {stage}: first {head:.4} -> last {tail:.4} ({} steps)", losses.len());
    }

    for name in ["attr.w", "attr.b"] {
        if let Some(t) = pipe.attr.tensors.get(name) {
            let norm: f64 = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("{name} norm {norm:.5}");
        }
    }

    // Raw sample diagnostics: how saturated are the generated rasters?
    {
        use guidecomp::guidance::{initial_noise, sample_from, GuidanceConfig, GuidanceVariant};
        use guidecomp::synthdata::render_pose_map;
        for (w1, w2) in [(0.0, 0.0), (7.5, 0.0), (7.5, 7.5)] {
            let spec = FigureSpec {
                shape: 2.0,
                pose: 0.3,
                style: Style::Target,
                prompt: Some(1),
            };
            let cond = guidecomp::denoiser::ConditionSet {
                prompt: spec.prompt,
                attribute: Some(attribute_vec(spec.shape, spec.pose)),
                pose_map: Some(render_pose_map(&spec).unwrap()),
            };
            let gcfg = GuidanceConfig {
                variant: GuidanceVariant::FullComposition,
                w1,
                w2,
                steps: cfg.sample_steps,
                seed: 123,
                clip_z0: true,
            };
            let noise = initial_noise(123, cfg.net.pixels());
            let (z, trace) =
                sample_from(&pipe.networks(), noise, &cond, &gcfg, &pipe.schedule).unwrap();
            let n = trace.records.len() as f64;
            let g1: f64 = trace.records.iter().map(|r| r.norm_g1).sum::<f64>() / n;
            let g2: f64 = trace.records.iter().map(|r| r.norm_g2).sum::<f64>() / n;
            println!("  mean |g1| {g1:.4} mean |g2| {g2:.4}");
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let mn = z.iter().cloned().fold(f64::MAX, f64::min);
            let r = to_raster(&z);
            let bright = r.iter().filter(|v| **v > 0.7).count();
            let ana = guidecomp::synthdata::analyze_figure(&r);
            println!(
                "sample w=({w1},{w2}): z mean {mean:.2} range [{mn:.2},{mx:.2}] bright {bright} analyze {ana:?}"
            );
        }
    }

    // Style diagnostics: where do full / noDA samples sit between the target
    // (gradient bg, AA edges) and synthetic (flat 0.5 bg, hard edges) styles?
    {
        use guidecomp::guidance::{initial_noise, sample_from, GuidanceConfig, GuidanceVariant};
        use guidecomp::synthdata::{render_pose_map, RASTER_SIZE};
        let stats = |r: &[f64]| -> (f64, f64, f64) {
            let n = RASTER_SIZE;
            let mut border = 0.0;
            let mut cnt = 0.0;
            for i in 0..n {
                for (y, x) in [(0, i), (n - 1, i), (i, 0), (i, n - 1)] {
                    border += r[y * n + x];
                    cnt += 1.0;
                }
            }
            let mut sdx = 0.0;
            let mut strong = 0.0;
            for y in 0..n - 1 {
                for x in 0..n - 1 {
                    let v = r[y * n + x];
                    let dx = (r[y * n + x + 1] - v).abs();
                    let dy = (r[(y + 1) * n + x] - v).abs();
                    sdx += dx + dy;
                    if dx.max(dy) > 0.25 {
                        strong += 1.0;
                    }
                }
            }
            let m = ((n - 1) * (n - 1)) as f64;
            (border / cnt, sdx / (2.0 * m), strong / m)
        };
        for (name, variant) in [
            ("full", GuidanceVariant::FullComposition),
            ("noda", GuidanceVariant::NoDomainAdaptation),
        ] {
            let mut acc = (0.0, 0.0, 0.0);
            for k in 0..6u64 {
                let spec = FigureSpec {
                    shape: 0.5 - 0.2 * k as f64,
                    pose: 0.1 * k as f64 - 0.3,
                    style: Style::Target,
                    prompt: Some((k % 3) as usize),
                };
                let cond = guidecomp::denoiser::ConditionSet {
                    prompt: spec.prompt,
                    attribute: Some(attribute_vec(spec.shape, spec.pose)),
                    pose_map: Some(render_pose_map(&spec).unwrap()),
                };
                let gcfg = GuidanceConfig {
                    variant,
                    w1: 7.5,
                    w2: 7.5,
                    steps: cfg.sample_steps,
                    seed: 500 + k,
                    clip_z0: true,
                };
                let noise = initial_noise(500 + k, cfg.net.pixels());
                let (z, _) =
                    sample_from(&pipe.networks(), noise, &cond, &gcfg, &pipe.schedule).unwrap();
                let (b, e, s) = stats(&to_raster(&z));
                acc = (acc.0 + b / 6.0, acc.1 + e / 6.0, acc.2 + s / 6.0);
            }
            println!("style {name}: border {:.3} edge {:.4} strong {:.4}", acc.0, acc.1, acc.2);
        }
        // Reference values from real data.
        let data = guidecomp::synthdata::generate_dataset_with(
            12,
            Style::Target,
            guidecomp::synthdata::ShapeDistribution::TruncatedNormal,
            77,
        )
        .unwrap();
        let mut acc = (0.0, 0.0, 0.0);
        for s in &data {
            let (b, e, st) = stats(&s.raster);
            acc = (acc.0 + b / 12.0, acc.1 + e / 12.0, acc.2 + st / 12.0);
        }
        println!("style target-data: border {:.3} edge {:.4} strong {:.4}", acc.0, acc.1, acc.2);
        let data = guidecomp::synthdata::generate_dataset_with(
            12,
            Style::Synthetic,
            guidecomp::synthdata::ShapeDistribution::Uniform,
            78,
        )
        .unwrap();
        let mut acc = (0.0, 0.0, 0.0);
        for s in &data {
            let (b, e, st) = stats(&s.raster);
            acc = (acc.0 + b / 12.0, acc.1 + e / 12.0, acc.2 + st / 12.0);
        }
        println!("style synth-data: border {:.3} edge {:.4} strong {:.4}", acc.0, acc.1, acc.2);
    }

    // Criterion 8 analog: domain gap.
    let t = Instant::now();
    let dg = run_domain_gap_experiment(&pipe, &cfg, 24, &[1, 2, 3]).expect("domain gap");
    for r in &dg.rows {
        println!(
            "domain seed {}: kid_full {:.5} kid_noda {:.5} ({})",
            r.seed,
            r.kid_full,
            r.kid_no_da,
            if r.kid_full < r.kid_no_da { "OK" } else { "FAIL" }
        );
    }
    println!("domain ratio {:.3} (need >= 1.5), {:.1}s", dg.ratio, t.elapsed().as_secs_f64());

    // Per-sample baseline shape estimates: where does the pose-only arm land?
    {
        use guidecomp::guidance::{initial_noise, sample_from, GuidanceVariant};
        use guidecomp::synthdata::{analyze_figure, render_pose_map, POSE_RANGE};
        use guidecomp::rng::{derive_seed, StreamRng};
        const NUM_PROMPTS: usize = 3;
        for &shape in &[-2.0, 0.0, 2.0] {
            let mut vals = Vec::new();
            for seed in [1u64, 2, 3] {
                for rep in 0..5 {
                    let cell = derive_seed(seed, &format!("shape/{shape:.6}/{rep}"));
                    let mut rng = StreamRng::new(cell, "pose-prompt");
                    let spec = FigureSpec {
                        shape,
                        pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
                        style: Style::Target,
                        prompt: Some(rng.below(NUM_PROMPTS)),
                    };
                    let cond = guidecomp::denoiser::ConditionSet {
                        prompt: None,
                        attribute: None,
                        pose_map: Some(render_pose_map(&spec).unwrap()),
                    };
                    let gcfg = guidecomp::guidance::GuidanceConfig {
                        variant: GuidanceVariant::PlainCfg,
                        w1: cfg.w1,
                        w2: cfg.w2,
                        steps: cfg.sample_steps,
                        seed: cell,
                        clip_z0: true,
                    };
                    let noise = initial_noise(cell, cfg.net.pixels());
                    let (z, _) =
                        sample_from(&pipe.networks(), noise, &cond, &gcfg, &pipe.schedule).unwrap();
                    let s = match analyze_figure(&to_raster(&z)) {
                        Ok((s, _)) => s,
                        Err(_) => f64::NAN,
                    };
                    vals.push(s);
                }
            }
            let strs: Vec<String> = vals.iter().map(|v| format!("{v:+.2}")).collect();
            println!("baseline s_hat at s={shape:+.1}: [{}]", strs.join(", "));
        }
    }

    // Criterion 9 analog: shape adherence.
    let t = Instant::now();
    let grid = [-2.5, -2.0, -1.0, 0.0, 1.0, 2.0, 2.5];
    let sa = run_shape_adherence_experiment(&pipe, &cfg, &grid, &[1, 2, 3], 5).expect("shape");
    for c in &sa.cells {
        println!(
            "shape {:+.1}: composed {:.3} baseline {:.3} fail {}",
            c.shape, c.composed_err, c.baseline_err, c.failures
        );
    }
    let at = |s: f64| sa.cells.iter().find(|c| c.shape == s).unwrap();
    let base0 = at(0.0).baseline_err;
    let base2 = (at(2.0).baseline_err + at(-2.0).baseline_err) / 2.0;
    let cmax = sa.cells.iter().map(|c| c.composed_err).fold(f64::MIN, f64::max);
    let cmin = sa.cells.iter().map(|c| c.composed_err).fold(f64::MAX, f64::min);
    println!(
        "baseline 2sigma/0 ratio {:.2} (need >= 2), composed max/min {:.2} (need <= 2), {:.1}s",
        base2 / base0,
        cmax / cmin,
        t.elapsed().as_secs_f64()
    );

    // Criterion 10 analog: guidance-grid monotonicity.
    let t = Instant::now();
    let w2s = [0.0, 1.0, 2.0, 5.0, 7.5];
    let mut passes = 0;
    for seed in [1u64, 2, 3, 4, 5] {
        let spec = FigureSpec {
            shape: 2.0,
            pose: 0.4,
            style: Style::Target,
            prompt: Some(1),
        };
        let g = run_guidance_grid(&pipe, &cfg, &[7.5], &w2s, &spec, seed).expect("grid");
        let mut dev = Vec::new();
        for &w2 in &w2s {
            let c = g.cell(7.5, w2).unwrap();
            let s_hat = if c.s_hat.is_nan() { 0.0 } else { c.s_hat };
            dev.push(s_hat.abs());
        }
        let rho = spearman(&w2s, &dev).unwrap_or(0.0);
        let ok = rho >= 0.8;
        passes += ok as usize;
        println!("grid seed {seed}: |s_hat| {dev:?} rho {rho:.2} ({})", if ok { "OK" } else { "FAIL" });
    }
    println!("grid majority: {passes}/5 (need >= 3), {:.1}s", t.elapsed().as_secs_f64());
}

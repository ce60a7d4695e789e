use guidecomp::denoiser::ConditionSet;
use guidecomp::experiments::{to_raster, PipelineConfig, TrainedPipeline};
use guidecomp::guidance::{initial_noise, sample_from, GuidanceConfig, GuidanceVariant};
use guidecomp::io::*;
use guidecomp::rng::{derive_seed, StreamRng};
use guidecomp::synthdata::{render_figure, render_pose_map, FigureSpec, Style, POSE_RANGE, RASTER_SIZE};
use std::path::Path;

fn show(r: &[f64]) {
    for y in 0..RASTER_SIZE {
        let row: String = (0..RASTER_SIZE)
            .map(|x| {
                let v = r[y * RASTER_SIZE + x];
                if v > 0.8 { '#' } else if v > 0.6 { '+' } else if v > 0.35 { '.' } else { ' ' }
            })
            .collect();
        println!("|{row}|");
    }
}

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.beta_range.1 = 0.12;
    cfg.sample_steps = 40;
    let d = Path::new("/tmp/pipe4");
    let base = base_from_checkpoint(&load_checkpoint(&d.join("base.ckpt")).unwrap()).unwrap();
    let pose = branch_from_checkpoint(&load_checkpoint(&d.join("pose.ckpt")).unwrap()).unwrap();
    let attr = branch_from_checkpoint(&load_checkpoint(&d.join("attr.ckpt")).unwrap()).unwrap();
    let pipe = TrainedPipeline { base, pose, attr, schedule: cfg.schedule().unwrap() };

    // A real data sample for reference.
    let spec0 = FigureSpec { shape: 0.0, pose: 0.2, style: Style::Target, prompt: Some(1) };
    println!("== real target render, shape 0:");
    show(&render_figure(&spec0).unwrap());

    for rep in 0..3u64 {
        let cell = derive_seed(1, &format!("shape/{:.6}/{rep}", 0.0));
        let mut rng = StreamRng::new(cell, "pose-prompt");
        let spec = FigureSpec {
            shape: 0.0,
            pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
            prompt: Some(rng.below(3)),
            style: Style::Target,
        };
        let cond = ConditionSet {
            prompt: None,
            attribute: None,
            pose_map: Some(render_pose_map(&spec).unwrap()),
        };
        let gcfg = GuidanceConfig { variant: GuidanceVariant::PlainCfg, w1: 7.5, w2: 7.5, steps: 40, seed: cell, clip_z0: true };
        let noise = initial_noise(cell, cfg.net.pixels());
        let (z, _) = sample_from(&pipe.networks(), noise, &cond, &gcfg, &pipe.schedule).unwrap();
        println!("== baseline sample rep {rep} (pose {:.2} prompt {:?}):", spec.pose, spec.prompt);
        show(&to_raster(&z));
        println!("analyze: {:?}", guidecomp::synthdata::analyze_figure(&to_raster(&z)));
    }
}

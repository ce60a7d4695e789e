use guidecomp::rng::StreamRng;
use guidecomp::synthdata::*;

fn main() {
    let mut rng = StreamRng::new(2024, "roundtrip");
    let mut worst: Vec<(f64, f64, f64, &str, f64)> = Vec::new();
    for i in 0..1000 {
        let style = if i % 2 == 0 {
            Style::Target
        } else {
            Style::Synthetic
        };
        let spec = FigureSpec {
            shape: rng.uniform(-SHAPE_RANGE, SHAPE_RANGE),
            pose: rng.uniform(-POSE_RANGE, POSE_RANGE),
            style,
            prompt: if style == Style::Target {
                Some(rng.below(NUM_PROMPTS))
            } else {
                None
            },
        };
        let raster = render_figure(&spec).unwrap();
        let (s_hat, p_hat) = analyze_figure(&raster).unwrap();
        worst.push((
            (s_hat - spec.shape).abs(),
            spec.shape,
            spec.pose,
            style.as_str(),
            (p_hat - spec.pose).abs(),
        ));
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("worst shape errors:");
    for w in &worst[..15] {
        println!("ds={:.4} s={:+.3} p={:+.3} {} dp={:.4}", w.0, w.1, w.2, w.3, w.4);
    }
    worst.sort_by(|a, b| b.4.partial_cmp(&a.4).unwrap());
    println!("worst pose errors:");
    for w in &worst[..15] {
        println!("dp={:.4} s={:+.3} p={:+.3} {} ds={:.4}", w.4, w.1, w.2, w.3, w.0);
    }
}

use guidecomp::synthdata::*;
fn main() {
    for style in [Style::Target, Style::Synthetic] {
        let mut worst = (0.0f64, 0.0, 0.0, 0);
        for i in 0..=60 {
            let s = -3.0 + 0.1 * i as f64;
            for (pi, p) in [0.0, 0.7, -1.2].iter().enumerate() {
                for prompt in 0..3usize {
                    let spec = FigureSpec {
                        shape: s, pose: *p, style,
                        prompt: if style == Style::Target { Some(prompt) } else { None },
                    };
                    let raster = render_figure(&spec).unwrap();
                    let (s_hat, _) = analyze_figure(&raster).unwrap();
                    let e = (s_hat - s).abs();
                    if e > worst.0 { worst = (e, s, *p, prompt); }
                    let _ = pi;
                }
            }
        }
        println!("{style:?}: worst ds {:.4} at s={} pose={} prompt={}", worst.0, worst.1, worst.2, worst.3);
    }
}

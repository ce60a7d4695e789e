//! Evaluation metrics: Procrustes-aligned joint error, scale-corrected
//! per-vertex error, kernel inception distance on hand-crafted raster
//! features, and an inception-score analog over analyzer histograms.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::synthdata::RASTER_SIZE;

pub type Vec3 = [f64; 3];

/// Feature dimension produced by [`toy_features`].
pub const FEATURE_DIM: usize = 25;

// ---------------------------------------------------------------------------
// Rigid alignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for (i, row) in r.iter().enumerate() {
            out[i] = self.scale * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2])
                + self.translation[i];
        }
        out
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in pts {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    for v in &mut c {
        *v /= pts.len() as f64;
    }
    c
}

/// Optimal similarity transform (scale, rotation, translation) mapping
/// `source` onto `target` in the least-squares sense (Umeyama alignment).
pub fn procrustes_align(source: &[Vec3], target: &[Vec3]) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "point sets of sizes {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::InsufficientSamples {
            need: 3,
            got: source.len(),
        });
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_s = 0.0;
    for (p, q) in source.iter().zip(target) {
        let x = Vector3::new(p[0] - cs[0], p[1] - cs[1], p[2] - cs[2]);
        let y = Vector3::new(q[0] - ct[0], q[1] - ct[1], q[2] - ct[2]);
        cov += y * x.transpose();
        var_s += x.norm_squared();
    }
    if var_s < 1e-24 {
        return Err(Error::DegenerateConfiguration("source points are coincident".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    // Reflection guard: force det(R) = +1.
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let trace = (svd.singular_values[0] * s[(0, 0)]
        + svd.singular_values[1] * s[(1, 1)]
        + svd.singular_values[2] * s[(2, 2)])
        .max(0.0);
    let scale = trace / var_s;
    let rc = Vector3::new(cs[0], cs[1], cs[2]);
    let t = Vector3::new(ct[0], ct[1], ct[2]) - scale * (r * rc);
    let mut rot = [[0.0; 3]; 3];
    for (i, row) in rot.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = r[(i, j)];
        }
    }
    Ok(SimilarityTransform {
        scale,
        rotation: rot,
        translation: [t[0], t[1], t[2]],
    })
}

/// Mean per-joint position error after Procrustes alignment.
pub fn mpjpe_pa(predicted: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    let tf = procrustes_align(predicted, reference)?;
    let sum: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(p, q)| {
            let a = tf.apply(p);
            ((a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2) + (a[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Per-vertex error after correcting only a global scale (no rotation or
/// translation beyond centering). The optimal scale has the closed form
/// s* = <x, y> / <x, x> on centered point sets.
pub fn pvet_sc(predicted: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "point sets of sizes {} and {}",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let cp = centroid(predicted);
    let cr = centroid(reference);
    let mut xx = 0.0;
    let mut xy = 0.0;
    for (p, q) in predicted.iter().zip(reference) {
        for i in 0..3 {
            let x = p[i] - cp[i];
            let y = q[i] - cr[i];
            xx += x * x;
            xy += x * y;
        }
    }
    if xx < 1e-24 {
        return Err(Error::DegenerateConfiguration(
            "predicted points are coincident".into(),
        ));
    }
    let s = xy / xx;
    let sum: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(p, q)| {
            let mut d2 = 0.0;
            for i in 0..3 {
                let e = s * (p[i] - cp[i]) - (q[i] - cr[i]);
                d2 += e * e;
            }
            d2.sqrt()
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

// ---------------------------------------------------------------------------
// Raster features
// ---------------------------------------------------------------------------

/// Hand-crafted 25-d feature vector for a 32x32 raster: 16 pooled 8x8-block
/// means, 6 row/column profile moments, and 3 edge statistics.
pub fn toy_features(raster: &[f64]) -> Result<Vec<f64>> {
    let n = RASTER_SIZE;
    if raster.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "raster length {} != {}",
            raster.len(),
            n * n
        )));
    }
    let mut f = Vec::with_capacity(FEATURE_DIM);
    // 4x4 grid of pooled means.
    let block = n / 4;
    for by in 0..4 {
        for bx in 0..4 {
            let mut s = 0.0;
            for y in 0..block {
                for x in 0..block {
                    s += raster[(by * block + y) * n + bx * block + x];
                }
            }
            f.push(s / (block * block) as f64);
        }
    }
    // Row/column intensity profile moments: mean position, spread, skew proxy.
    for axis in 0..2 {
        let mut profile = vec![0.0; n];
        for y in 0..n {
            for x in 0..n {
                let idx = if axis == 0 { y } else { x };
                profile[idx] += raster[y * n + x];
            }
        }
        let total: f64 = profile.iter().sum();
        let total = total.max(1e-12);
        let mean: f64 = profile
            .iter()
            .enumerate()
            .map(|(i, p)| i as f64 * p)
            .sum::<f64>()
            / total;
        let var: f64 = profile
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 - mean).powi(2) * p)
            .sum::<f64>()
            / total;
        let skew: f64 = profile
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 - mean).powi(3) * p)
            .sum::<f64>()
            / total;
        f.push(mean / n as f64);
        f.push(var.sqrt() / n as f64);
        f.push(skew / (n as f64).powi(3));
    }
    // Edge statistics: mean |dx|, mean |dy|, fraction of strong edges.
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut strong = 0.0;
    for y in 0..n - 1 {
        for x in 0..n - 1 {
            let v = raster[y * n + x];
            let dx = (raster[y * n + x + 1] - v).abs();
            let dy = (raster[(y + 1) * n + x] - v).abs();
            sx += dx;
            sy += dy;
            if dx.max(dy) > 0.25 {
                strong += 1.0;
            }
        }
    }
    let m = ((n - 1) * (n - 1)) as f64;
    f.push(sx / m);
    f.push(sy / m);
    f.push(strong / m);
    debug_assert_eq!(f.len(), FEATURE_DIM);
    Ok(f)
}

// ---------------------------------------------------------------------------
// Kernel inception distance
// ---------------------------------------------------------------------------

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared maximum mean discrepancy with the cubic polynomial kernel
/// k(x, y) = (x.y / d + 1)^3; within-set sums exclude the diagonal.
pub fn kid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let m = features_a.len();
    let n = features_b.len();
    if m < 2 || n < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: m.min(n),
        });
    }
    let d = features_a[0].len();
    for f in features_a.iter().chain(features_b) {
        if f.len() != d {
            return Err(Error::ShapeMismatch("feature dimension mismatch".into()));
        }
    }
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += poly_kernel(&features_a[i], &features_a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += poly_kernel(&features_b[i], &features_b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for fa in features_a {
        for fb in features_b {
            kab += poly_kernel(fa, fb);
        }
    }
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64
        - 2.0 * kab / (m * n) as f64)
}

// ---------------------------------------------------------------------------
// Inception-score analog
// ---------------------------------------------------------------------------

/// exp(E_i[ KL(p_i || p_bar) ]) over per-sample class distributions.
pub fn inception_score(class_probs: &[Vec<f64>]) -> Result<f64> {
    if class_probs.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let k = class_probs[0].len();
    for p in class_probs {
        if p.len() != k {
            return Err(Error::ShapeMismatch("class distribution length".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
            return Err(Error::OutOfRangeSpec(format!(
                "class distribution sums to {s} or has negative mass"
            )));
        }
    }
    let n = class_probs.len() as f64;
    let mut marginal = vec![0.0; k];
    for p in class_probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut mean_kl = 0.0;
    for p in class_probs {
        let mut kl = 0.0;
        for (pi, mi) in p.iter().zip(&marginal) {
            if *pi > 0.0 {
                kl += pi * (pi / mi).ln();
            }
        }
        mean_kl += kl / n;
    }
    Ok(mean_kl.exp())
}

/// One-hot helper for hard classifier outputs.
pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut p = vec![0.0; num_classes];
    p[class] = 1.0;
    p
}

/// Fractional (average) ranks, 1-based; ties share the mean of their ranks.
fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of fractional ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "rank inputs of lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: xs.len(),
        });
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateConfiguration(
            "constant sequence has no rank correlation".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// Report container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Caller-supplied deterministic timestamp tag (derived from the run
    /// configuration, not the wall clock, so reports are reproducible).
    pub tag: String,
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn new(tag: impl Into<String>) -> Self {
        MetricReport {
            tag: tag.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    /// CSV rendering: header then `tag,name,value` rows with full-precision
    /// floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,metric,value\n");
        for (name, value) in &self.entries {
            out.push_str(&format!("{},{},{:.17e}\n", self.tag, name, value));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::rodrigues;
    use crate::rng::StreamRng;

    fn random_cloud(rng: &mut StreamRng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect()
    }

    fn transform_cloud(pts: &[Vec3], s: f64, aa: &Vec3, t: &Vec3) -> Vec<Vec3> {
        let r = rodrigues(aa);
        pts.iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for (i, row) in r.iter().enumerate() {
                    q[i] = s * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]) + t[i];
                }
                q
            })
            .collect()
    }

    #[test]
    fn procrustes_recovers_planted_transform() {
        for seed in 0..10u64 {
            let mut rng = StreamRng::new(seed, "metrics/procrustes");
            let src = random_cloud(&mut rng, 8);
            let s = rng.uniform(0.3, 2.5);
            let aa = [rng.normal(), rng.normal(), rng.normal()];
            let t = [rng.normal(), rng.normal(), rng.normal()];
            let dst = transform_cloud(&src, s, &aa, &t);
            let tf = procrustes_align(&src, &dst).unwrap();
            assert!((tf.scale - s).abs() < 1e-9, "scale {} vs {s}", tf.scale);
            for (p, q) in src.iter().zip(&dst) {
                let a = tf.apply(p);
                for i in 0..3 {
                    assert!((a[i] - q[i]).abs() < 1e-9);
                }
            }
            assert!(mpjpe_pa(&src, &dst).unwrap() < 1e-9);
        }
    }

    /// Brute-force Procrustes oracle: golden-section scan over scale with an
    /// inner polar-decomposition-free rotation fit via many random rotations
    /// is too weak; instead verify optimality by perturbation — no nearby
    /// similarity transform achieves lower squared error.
    #[test]
    fn procrustes_is_a_local_minimum() {
        let mut rng = StreamRng::new(7, "metrics/perturb");
        let src = random_cloud(&mut rng, 10);
        // Target is a noisy transform of the source, so the fit is nontrivial.
        let mut dst = transform_cloud(&src, 1.4, &[0.2, -0.6, 0.3], &[0.5, 0.0, -1.0]);
        for p in &mut dst {
            for c in p.iter_mut() {
                *c += 0.1 * rng.normal();
            }
        }
        let tf = procrustes_align(&src, &dst).unwrap();
        let err = |tf: &SimilarityTransform| -> f64 {
            src.iter()
                .zip(&dst)
                .map(|(p, q)| {
                    let a = tf.apply(p);
                    (a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2) + (a[2] - q[2]).powi(2)
                })
                .sum()
        };
        let base = err(&tf);
        for trial in 0..200 {
            let mut rng2 = StreamRng::new(trial, "metrics/perturb2");
            let mut p = tf.clone();
            p.scale *= 1.0 + 0.01 * rng2.normal();
            let d = rodrigues(&[
                0.01 * rng2.normal(),
                0.01 * rng2.normal(),
                0.01 * rng2.normal(),
            ]);
            let mut nr = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for (k, drow) in d.iter().enumerate() {
                        let _ = drow;
                        nr[i][j] += d[i][k] * tf.rotation[k][j];
                    }
                }
            }
            p.rotation = nr;
            for c in p.translation.iter_mut() {
                *c += 0.01 * rng2.normal();
            }
            assert!(err(&p) >= base - 1e-9, "perturbation beat the SVD fit");
        }
    }

    #[test]
    fn pvet_sc_matches_scan_oracle() {
        // Golden-section scan over the scale factor must agree with the
        // closed-form least-squares scale.
        let mut rng = StreamRng::new(3, "metrics/pvet");
        let a = random_cloud(&mut rng, 12);
        let mut b = transform_cloud(&a, 1.7, &[0.0, 0.0, 0.0], &[0.2, 0.2, 0.2]);
        for p in &mut b {
            for c in p.iter_mut() {
                *c += 0.05 * rng.normal();
            }
        }
        let ca = {
            let mut c = [0.0; 3];
            for p in &a {
                for i in 0..3 {
                    c[i] += p[i] / a.len() as f64;
                }
            }
            c
        };
        let cb = {
            let mut c = [0.0; 3];
            for p in &b {
                for i in 0..3 {
                    c[i] += p[i] / b.len() as f64;
                }
            }
            c
        };
        let sq = |s: f64| -> f64 {
            a.iter()
                .zip(&b)
                .map(|(p, q)| {
                    (0..3)
                        .map(|i| (s * (p[i] - ca[i]) - (q[i] - cb[i])).powi(2))
                        .sum::<f64>()
                })
                .sum()
        };
        // Golden-section minimize sq over [0, 5].
        let (mut lo, mut hi) = (0.0f64, 5.0f64);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = hi - phi * (hi - lo);
            let x2 = lo + phi * (hi - lo);
            if sq(x1) < sq(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        let s_star = 0.5 * (lo + hi);
        // Mean per-vertex error at the scanned optimum.
        let scan_err: f64 = a
            .iter()
            .zip(&b)
            .map(|(p, q)| {
                (0..3)
                    .map(|i| (s_star * (p[i] - ca[i]) - (q[i] - cb[i])).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / a.len() as f64;
        let closed = pvet_sc(&a, &b).unwrap();
        assert!(
            (closed - scan_err).abs() < 1e-8,
            "closed {closed} vs scan {scan_err}"
        );
        // Exact-scale clouds align perfectly.
        let c = transform_cloud(&a, 0.4, &[0.0; 3], &[1.0, 2.0, 3.0]);
        assert!(pvet_sc(&a, &c).unwrap() < 1e-12);
    }

    #[test]
    fn kid_identical_sets_near_zero_and_symmetric() {
        let mut rng = StreamRng::new(5, "metrics/kid");
        let feats: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..FEATURE_DIM).map(|_| rng.normal()).collect())
            .collect();
        // Identical sets: unbiased MMD^2 is exactly Kaa + Kbb - 2Kab with
        // Kaa = Kbb and Kab including the diagonal, so slightly negative.
        let same = kid(&feats, &feats).unwrap();
        assert!(same <= 1e-12, "kid(same, same) = {same}");
        assert!(same > -1.0);
        let other: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..FEATURE_DIM).map(|_| rng.normal() + 1.0).collect())
            .collect();
        let ab = kid(&feats, &other).unwrap();
        let ba = kid(&other, &feats).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > same);
    }

    #[test]
    fn kid_matches_direct_sum_oracle() {
        // Small hand-checkable case in 1-d with k(x,y) = (xy/1 + 1)^3.
        let a = vec![vec![1.0], vec![2.0]];
        let b = vec![vec![0.0], vec![1.0]];
        // Kaa: k(1,2)=k(2,1)=(2+1)^3=27 -> mean 27.
        // Kbb: k(0,1)=k(1,0)=1 -> mean 1.
        // Kab: k(1,0)=1, k(1,1)=8, k(2,0)=1, k(2,1)=27 -> mean 37/4.
        let expected = 27.0 + 1.0 - 2.0 * 37.0 / 4.0;
        assert!((kid(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn inception_score_bounds_and_exact_values() {
        // Deterministic classifier, both classes present equally:
        // KL(p_i || p_bar) = ln 2 for every sample, IS = 2 exactly.
        let probs: Vec<Vec<f64>> = (0..10).map(|i| one_hot(i % 2, 2)).collect();
        let is = inception_score(&probs).unwrap();
        assert!((is - 2.0).abs() <= 4.0 * f64::EPSILON, "IS = {is}");
        // All samples in one class: IS = 1.
        let solo: Vec<Vec<f64>> = (0..10).map(|_| one_hot(0, 3)).collect();
        assert!((inception_score(&solo).unwrap() - 1.0).abs() <= 4.0 * f64::EPSILON);
        // Uniform per-sample distributions: IS = 1.
        let unif: Vec<Vec<f64>> = (0..6).map(|_| vec![0.25; 4]).collect();
        assert!((inception_score(&unif).unwrap() - 1.0).abs() <= 4.0 * f64::EPSILON);
        // IS never exceeds the class count.
        let probs: Vec<Vec<f64>> = (0..9).map(|i| one_hot(i % 3, 3)).collect();
        assert!(inception_score(&probs).unwrap() <= 3.0 + 1e-12);
        // Bad distributions are rejected.
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn features_shape_and_determinism() {
        let raster = vec![0.3; RASTER_SIZE * RASTER_SIZE];
        let f = toy_features(&raster).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(f, toy_features(&raster).unwrap());
        // Flat raster: all pooled means are 0.3, no strong edges.
        for v in &f[..16] {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert_eq!(f[FEATURE_DIM - 1], 0.0);
        assert!(toy_features(&raster[..10]).is_err());
    }

    #[test]
    fn report_csv_round_numbers() {
        let mut r = MetricReport::new("cfg-abc");
        r.push("kid", 0.0123);
        r.push("is", 2.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("tag,metric,value\n"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(r.get("is"), Some(2.0));
        assert_eq!(r.get("missing"), None);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let flat = vec![[1.0, 1.0, 1.0]; 5];
        assert!(matches!(
            procrustes_align(&flat, &flat),
            Err(Error::DegenerateConfiguration(_))
        ));
        let a = vec![[0.0; 3]; 2];
        assert!(procrustes_align(&a, &a).is_err());
        assert!(kid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn spearman_matches_classic_formula() {
        // Monotone transforms of distinct values give exactly +/-1.
        let x: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 9.0];
        let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y_neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &y_neg).unwrap() + 1.0).abs() < 1e-12);

        // Tie-free case: oracle 1 - 6 sum(d^2) / (n (n^2 - 1)).
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 5.0];
        let d2 = 1.0 + 1.0 + 1.0 + 1.0 + 0.0;
        let oracle = 1.0 - 6.0 * d2 / (5.0 * 24.0);
        assert!((spearman(&xs, &ys).unwrap() - oracle).abs() < 1e-12);

        // Ties use average ranks: hand-computed Pearson on ranks.
        let xt = [1.0, 1.0, 2.0, 3.0];
        let yt = [1.0, 2.0, 3.0, 4.0];
        let rx = [1.5, 1.5, 3.0, 4.0];
        let ry = [1.0, 2.0, 3.0, 4.0];
        let mx = 2.5;
        let my = 2.5;
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        let oracle = sxy / (sxx * syy).sqrt();
        assert!((spearman(&xt, &yt).unwrap() - oracle).abs() < 1e-12);

        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&xs, &ys[..3]).is_err());
    }
}

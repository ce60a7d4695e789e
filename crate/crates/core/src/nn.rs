//! Layer primitives (convolution, pooling, resampling, embeddings) with
//! hand-written backward passes. Everything operates on channel-major
//! `[C, H, W]` buffers stored in flat `Vec<f64>`s.

/// Planar activation buffer.
#[derive(Debug, Clone)]
pub struct Plane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Plane {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Plane {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn concat(&self, other: &Plane) -> Plane {
        assert_eq!(self.height, other.height);
        assert_eq!(self.width, other.width);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Plane::from_data(
            self.channels + other.channels,
            self.height,
            self.width,
            data,
        )
    }
}

/// 3x3 same-padding convolution. Weights are `[out, in, 3, 3]` row-major.
pub fn conv3x3_forward(input: &Plane, weights: &[f64], out_channels: usize) -> Plane {
    let (h, w, cin) = (input.height, input.width, input.channels);
    assert_eq!(weights.len(), out_channels * cin * 9);
    let mut out = Plane::zeros(out_channels, h, w);
    for o in 0..out_channels {
        let oc = out.channel_mut(o);
        for i in 0..cin {
            let ic = input.channel(i);
            let wbase = (o * cin + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weights[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        let orow = &mut oc[y * w + x0..y * w + x1];
                        let irow = &ic[sy * w + (x0 as isize + dx) as usize
                            ..sy * w + (x1 as isize + dx) as usize];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward for [`conv3x3_forward`]. Returns gradient w.r.t. the input and
/// accumulates weight gradients into `grad_weights`.
pub fn conv3x3_backward(
    input: &Plane,
    weights: &[f64],
    out_channels: usize,
    grad_out: &Plane,
    grad_weights: &mut [f64],
) -> Plane {
    let (h, w, cin) = (input.height, input.width, input.channels);
    assert_eq!(grad_out.channels, out_channels);
    let mut grad_in = Plane::zeros(cin, h, w);
    for o in 0..out_channels {
        let gc = grad_out.channel(o);
        for i in 0..cin {
            let ic = input.channel(i);
            let gic = grad_in.channel_mut(i);
            let wbase = (o * cin + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let mut wgrad = 0.0;
                    let wv = weights[wbase + ky * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        let grow = &gc[y * w + x0..y * w + x1];
                        let ioff = sy * w;
                        let irow = &ic[ioff + (x0 as isize + dx) as usize
                            ..ioff + (x1 as isize + dx) as usize];
                        let girow = &mut gic[ioff + (x0 as isize + dx) as usize
                            ..ioff + (x1 as isize + dx) as usize];
                        for k in 0..grow.len() {
                            wgrad += grow[k] * irow[k];
                            girow[k] += wv * grow[k];
                        }
                    }
                    grad_weights[wbase + ky * 3 + kx] += wgrad;
                }
            }
        }
    }
    grad_in
}

/// 1x1 convolution (per-pixel linear map). Weights `[out, in]`, bias `[out]`.
pub fn conv1x1_forward(input: &Plane, weights: &[f64], bias: &[f64], out_channels: usize) -> Plane {
    let (h, w, cin) = (input.height, input.width, input.channels);
    assert_eq!(weights.len(), out_channels * cin);
    assert_eq!(bias.len(), out_channels);
    let mut out = Plane::zeros(out_channels, h, w);
    for o in 0..out_channels {
        let oc = out.channel_mut(o);
        oc.fill(bias[o]);
        for i in 0..cin {
            let wv = weights[o * cin + i];
            if wv == 0.0 {
                continue;
            }
            let ic = input.channel(i);
            for (ov, iv) in oc.iter_mut().zip(ic) {
                *ov += wv * iv;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Plane,
    weights: &[f64],
    out_channels: usize,
    grad_out: &Plane,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) -> Plane {
    let (h, w, cin) = (input.height, input.width, input.channels);
    let mut grad_in = Plane::zeros(cin, h, w);
    for o in 0..out_channels {
        let gc = grad_out.channel(o);
        grad_bias[o] += gc.iter().sum::<f64>();
        for i in 0..cin {
            let ic = input.channel(i);
            let gic = grad_in.channel_mut(i);
            let wv = weights[o * cin + i];
            let mut wg = 0.0;
            for k in 0..gc.len() {
                wg += gc[k] * ic[k];
                gic[k] += wv * gc[k];
            }
            grad_weights[o * cin + i] += wg;
        }
    }
    grad_in
}

/// 2x2 average pooling; assumes even spatial dims.
pub fn avgpool2_forward(input: &Plane) -> Plane {
    let (h, w, c) = (input.height, input.width, input.channels);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Plane::zeros(c, oh, ow);
    for ch in 0..c {
        let ic = input.channel(ch);
        let oc = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                oc[y * ow + x] =
                    0.25 * (ic[base] + ic[base + 1] + ic[base + w] + ic[base + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &Plane) -> Plane {
    let (oh, ow, c) = (grad_out.height, grad_out.width, grad_out.channels);
    let (h, w) = (oh * 2, ow * 2);
    let mut grad_in = Plane::zeros(c, h, w);
    for ch in 0..c {
        let gc = grad_out.channel(ch);
        let gic = grad_in.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * gc[y * ow + x];
                let base = 2 * y * w + 2 * x;
                gic[base] += g;
                gic[base + 1] += g;
                gic[base + w] += g;
                gic[base + w + 1] += g;
            }
        }
    }
    grad_in
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &Plane) -> Plane {
    let (h, w, c) = (input.height, input.width, input.channels);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Plane::zeros(c, oh, ow);
    for ch in 0..c {
        let ic = input.channel(ch);
        let oc = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                oc[y * ow + x] = ic[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Plane) -> Plane {
    let (oh, ow, c) = (grad_out.height, grad_out.width, grad_out.channels);
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_in = Plane::zeros(c, h, w);
    for ch in 0..c {
        let gc = grad_out.channel(ch);
        let gic = grad_in.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                gic[(y / 2) * w + x / 2] += gc[y * ow + x];
            }
        }
    }
    grad_in
}

/// Sinusoidal timestep embedding of even dimension `dim`; `dim = 0` yields an
/// empty vector, odd dims put the extra slot on the sine half.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let half = dim.div_ceil(2);
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (10_000.0f64).powf(-(k as f64) / half as f64);
        out.push((t as f64 * freq).sin());
    }
    for k in 0..dim - half {
        let freq = (10_000.0f64).powf(-(k as f64) / half as f64);
        out.push((t as f64 * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn random_plane(rng: &mut StreamRng, c: usize, h: usize, w: usize) -> Plane {
        Plane::from_data(c, h, w, rng.normal_vec(c * h * w))
    }

    /// Reference convolution written as the naive five-loop definition.
    fn conv3x3_naive(input: &Plane, weights: &[f64], cout: usize) -> Plane {
        let (h, w, cin) = (input.height, input.width, input.channels);
        let mut out = Plane::zeros(cout, h, w);
        for o in 0..cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = weights
                                    [(o * cin + i) * 9 + ((ky + 1) * 3 + kx + 1) as usize];
                                acc += wv * input.channel(i)[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out.channel_mut(o)[y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_naive() {
        let mut rng = StreamRng::new(1, "conv");
        let input = random_plane(&mut rng, 3, 6, 5);
        let weights = rng.normal_vec(2 * 3 * 9);
        let fast = conv3x3_forward(&input, &weights, 2);
        let slow = conv3x3_naive(&input, &weights, 2);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3x3_backward_finite_difference() {
        let mut rng = StreamRng::new(2, "convgrad");
        let input = random_plane(&mut rng, 2, 4, 4);
        let mut weights = rng.normal_vec(2 * 2 * 9);
        let grad_out = random_plane(&mut rng, 2, 4, 4);

        let loss = |inp: &Plane, wts: &[f64]| -> f64 {
            let out = conv3x3_forward(inp, wts, 2);
            out.data.iter().zip(&grad_out.data).map(|(a, b)| a * b).sum()
        };

        let mut gw = vec![0.0; weights.len()];
        let gi = conv3x3_backward(&input, &weights, 2, &grad_out, &mut gw);

        let eps = 1e-6;
        for k in [0usize, 7, 17, 35] {
            let orig = weights[k];
            weights[k] = orig + eps;
            let lp = loss(&input, &weights);
            weights[k] = orig - eps;
            let lm = loss(&input, &weights);
            weights[k] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((gw[k] - fd).abs() < 1e-6, "w[{k}]: {} vs {fd}", gw[k]);
        }
        for k in [0usize, 9, 20, 31] {
            let mut inp2 = input.clone();
            inp2.data[k] += eps;
            let lp = loss(&inp2, &weights);
            inp2.data[k] -= 2.0 * eps;
            let lm = loss(&inp2, &weights);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((gi.data[k] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        // <pool(x), y> == <x, pool_backward(y)> and likewise for upsample.
        let mut rng = StreamRng::new(3, "pool");
        let x = random_plane(&mut rng, 2, 4, 4);
        let y = random_plane(&mut rng, 2, 2, 2);
        let lhs: f64 = avgpool2_forward(&x)
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&avgpool2_backward(&y).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = upsample2_forward(&y)
            .data
            .iter()
            .zip(&x.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = y
            .data
            .iter()
            .zip(&upsample2_backward(&x).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv1x1_zero_weights_zero_output() {
        let mut rng = StreamRng::new(4, "zconv");
        let input = random_plane(&mut rng, 3, 4, 4);
        let out = conv1x1_forward(&input, &vec![0.0; 2 * 3], &[0.0, 0.0], 2);
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn time_embedding_shapes() {
        assert!(time_embedding(5, 0).is_empty());
        assert_eq!(time_embedding(5, 8).len(), 8);
        assert_eq!(time_embedding(5, 1).len(), 1);
        assert_ne!(time_embedding(5, 8), time_embedding(6, 8));
    }
}

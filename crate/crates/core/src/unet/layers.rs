//! Layer primitives on `(batch, channels, h, w)` arrays with explicit backward passes.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Unfolds a `(c, h, w)` map into `(c * k * k, h * w)` patch columns with zero
/// "same" padding of `k / 2`.
pub(crate) fn im2col(x: ArrayView3<'_, f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut dst[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let s0 = (src_row as isize + x_lo as isize + dx) as usize;
                    out[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch columns back onto a `(c, h, w)` map, summing overlaps.
pub(crate) fn col2im(cols: ArrayView2<'_, f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = (k / 2) as isize;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array3::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("fresh array");
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
                    let target = &mut plane[s0 as usize..s0 as usize + (x_hi - x_lo)];
                    for (t, v) in target.iter_mut().zip(&col[y * w + x_lo..y * w + x_hi]) {
                        *t += v;
                    }
                }
            }
        }
    }
    x
}

fn he_normal<R: Rng>(rng: &mut R, shape: (usize, usize, usize, usize), fan_in: usize) -> Array4<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Array4::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Square convolution with odd kernel size, stride 1 and same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv2d {
            weight: he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, c, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let mut y = Array4::zeros((b, o, h, w));
        for n in 0..b {
            let cols = im2col(x.index_axis(Axis(0), n), self.kernel());
            let mut out = wm.dot(&cols);
            out += &self.bias.view().insert_axis(Axis(1));
            y.index_axis_mut(Axis(0), n)
                .assign(&out.into_shape_with_order((o, h, w)).expect("contiguous"));
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: ArrayView4<'_, f64>, dy: ArrayView4<'_, f64>, grad: &mut Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (o, _, k, _) = self.weight.dim();
        let wm = self.weight_matrix();
        let mut dx = Array4::zeros((b, c, h, w));
        let mut dw = Array2::<f64>::zeros((o, c * k * k));
        for n in 0..b {
            let cols = im2col(x.index_axis(Axis(0), n), k);
            let dyn_ = dy.index_axis(Axis(0), n);
            let dym = dyn_.as_standard_layout();
            let dym = dym.view().into_shape_with_order((o, h * w)).expect("contiguous");
            dw += &dym.dot(&cols.t());
            grad.bias += &dym.sum_axis(Axis(1));
            let dcols = wm.t().dot(&dym);
            dx.index_axis_mut(Axis(0), n)
                .assign(&col2im(dcols.view(), c, h, w, k));
        }
        grad.weight += &dw.into_shape_with_order((o, c, k, k)).expect("contiguous");
        dx
    }
}

/// 2x2 transposed convolution with stride 2, doubling the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    /// `(in, out, 2, 2)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize) -> Self {
        // Each output pixel sees one kernel tap per input channel.
        ConvTranspose2d {
            weight: he_normal(rng, (in_ch, out_ch, 2, 2), in_ch),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvTranspose2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (c, o, _, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((c, o * 4))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let mut y = Array4::zeros((b, o, 2 * h, 2 * w));
        for n in 0..b {
            let xn = x.index_axis(Axis(0), n);
            let xn = xn.as_standard_layout();
            let xm = xn.view().into_shape_with_order((c, h * w)).expect("contiguous");
            // (o * 4, h * w), row = o * 4 + a * 2 + b for kernel tap (a, b)
            let taps = wm.t().dot(&xm);
            let taps = taps.into_shape_with_order((o, 2, 2, h, w)).expect("contiguous");
            let mut yn = y.index_axis_mut(Axis(0), n);
            for a in 0..2 {
                for bb in 0..2 {
                    let mut dst = yn.slice_mut(s![.., a..;2, bb..;2]);
                    dst.assign(&taps.slice(s![.., a, bb, .., ..]));
                    dst += &self.bias.view().insert_axis(Axis(1)).insert_axis(Axis(2));
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: ArrayView4<'_, f64>,
        dy: ArrayView4<'_, f64>,
        grad: &mut ConvTranspose2d,
    ) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let mut dx = Array4::zeros((b, c, h, w));
        let mut dw = Array2::<f64>::zeros((c, o * 4));
        for n in 0..b {
            let dyn_ = dy.index_axis(Axis(0), n);
            let mut taps = ndarray::Array5::<f64>::zeros((o, 2, 2, h, w));
            for a in 0..2 {
                for bb in 0..2 {
                    taps.slice_mut(s![.., a, bb, .., ..])
                        .assign(&dyn_.slice(s![.., a..;2, bb..;2]));
                }
            }
            let taps = taps.into_shape_with_order((o * 4, h * w)).expect("contiguous");
            let xn = x.index_axis(Axis(0), n);
            let xn = xn.as_standard_layout();
            let xm = xn.view().into_shape_with_order((c, h * w)).expect("contiguous");
            dw += &xm.dot(&taps.t());
            grad.bias += &dyn_.sum_axis(Axis(2)).sum_axis(Axis(1));
            let dxn = wm.dot(&taps).into_shape_with_order((c, h, w)).expect("contiguous");
            dx.index_axis_mut(Axis(0), n).assign(&dxn);
        }
        grad.weight += &dw.into_shape_with_order((c, o, 2, 2)).expect("contiguous");
        dx
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the winning
/// offset (0..4, row-major within the window, first maximum wins).
pub(crate) fn max_pool2(x: ArrayView4<'_, f64>) -> (Array4<f64>, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((b, c, oh, ow));
    let mut arg = Array4::zeros((b, c, oh, ow));
    for n in 0..b {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let v = x[[n, ch, 2 * i + (k / 2) as usize, 2 * j + (k % 2) as usize]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    y[[n, ch, i, j]] = best;
                    arg[[n, ch, i, j]] = best_k;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool2_backward(dy: ArrayView4<'_, f64>, arg: &Array4<u8>, in_hw: (usize, usize)) -> Array4<f64> {
    let (b, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, in_hw.0, in_hw.1));
    for ((n, ch, i, j), &g) in dy.indexed_iter() {
        let k = arg[[n, ch, i, j]];
        dx[[n, ch, 2 * i + (k / 2) as usize, 2 * j + (k % 2) as usize]] += g;
    }
    debug_assert_eq!((oh * 2, ow * 2), (in_hw.0 - in_hw.0 % 2, in_hw.1 - in_hw.1 % 2));
    dx
}

pub(crate) fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries whose activation was clamped by ReLU.
pub(crate) fn relu_backward_inplace(dy: &mut Array4<f64>, activated: &Array4<f64>) {
    ndarray::Zip::from(dy).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Softmax over the channel axis of `(b, c, h, w)` logits.
pub(crate) fn softmax_channels(logits: ArrayView4<'_, f64>) -> Array4<f64> {
    let mut out = logits.to_owned();
    let (b, c, h, w) = logits.dim();
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut lane = out.slice_mut(s![n, .., i, j]);
                let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                lane.mapv_inplace(|v| (v - max).exp());
                let sum = lane.sum();
                lane.mapv_inplace(|v| v / sum);
            }
        }
    }
    debug_assert!(c > 0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Direct 4-loop convolution used as the reference for the im2col path.
    fn naive_conv(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let p = (k / 2) as isize;
        Array4::from_shape_fn((b, o, h, w), |(n, oc, i, j)| {
            let mut acc = conv.bias[oc];
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = i as isize + ky as isize - p;
                        let xx = j as isize + kx as isize - p;
                        if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                            acc += conv.weight[[oc, ic, ky, kx]] * x[[n, ic, y as usize, xx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::new(&mut rng, 3, 4, k);
            conv.bias = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let x = random4(&mut rng, (2, 3, 5, 6));
            let fast = conv.forward(x.view());
            let slow = naive_conv(&x, &conv);
            assert!((fast - slow).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random4(&mut rng, (1, 2, 4, 5)).index_axis(Axis(0), 0).to_owned();
        let cols = im2col(x.view(), 3);
        let probe = Array2::from_shape_simple_fn(cols.raw_dim(), || rng.random_range(-1.0..1.0));
        let lhs = (&cols * &probe).sum();
        let rhs = (&x * &col2im(probe.view(), 2, 4, 5, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_places_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = ConvTranspose2d::new(&mut rng, 1, 1);
        up.weight = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        up.bias[0] = 0.5;
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 10.0]).unwrap();
        let y = up.forward(x.view());
        let expected = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.5, 2.5, 10.5, 20.5, 3.5, 4.5, 30.5, 40.5],
        )
        .unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn max_pool_prefers_first_maximum() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 3.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(x.view());
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        assert_eq!(arg[[0, 0, 0, 0]], 1);
        let dx = max_pool2_backward(Array4::from_elem((1, 1, 1, 1), 5.0).view(), &arg, (2, 2));
        assert_eq!(dx.into_raw_vec_and_offset().0, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random4(&mut rng, (2, 4, 3, 3)) * 5.0;
        let shift = Array4::from_shape_fn((2, 4, 3, 3), |(n, _, i, j)| (n * 7 + i * 3 + j) as f64 * 11.0);
        let a = softmax_channels(logits.view());
        let b = softmax_channels((&logits + &shift).view());
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.slice(s![n, .., i, j]).sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

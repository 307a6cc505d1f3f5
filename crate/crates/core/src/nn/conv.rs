//! 3D convolutions lowered to single-precision GEMM.
//!
//! Cubic kernels use "same" zero padding (`pad = dilation * (k / 2)`), so the
//! spatial shape is preserved. Pointwise kernels and transposed convolutions
//! go through GEMM; larger kernels use the direct padded-domain correlation.

use rand::Rng;

use super::direct::{correlate, pack_weights, weight_grad, PadGeom};
use super::param::{Param, Parameters};
use super::tensor::Tensor;
use crate::volume::Shape3;

/// `C = alpha * A * B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || span(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || span(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched lies within the asserted spans of the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv3d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "only odd cubic kernels are supported");
        assert!(dilation >= 1);
        let taps = kernel * kernel * kernel;
        let fan_in = in_channels * taps;
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight: Param::he_normal(out_channels * fan_in, fan_in, rng),
            bias: Param::zeros(out_channels),
        }
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.in_channels * self.taps()
    }

    /// Taps that can reach inside a volume of shape `s`, with their
    /// per-axis displacements; the others only ever see zero padding.
    fn live_taps(&self, s: Shape3) -> (Vec<usize>, Vec<[isize; 3]>) {
        let k = self.kernel;
        let r = (k / 2) as isize;
        let dil = self.dilation as isize;
        let dims = s.dims();
        (0..k * k * k)
            .map(|t| {
                let kk = [t / (k * k), (t / k) % k, t % k];
                (t, kk.map(|v| (v as isize - r) * dil))
            })
            .filter(|(_, d)| (0..3).all(|a| d[a].unsigned_abs() < dims[a]))
            .unzip()
    }

    fn plan(&self, s: Shape3) -> (PadGeom, Vec<usize>, Vec<isize>) {
        let (ids, disp) = self.live_taps(s);
        let pad: [usize; 3] = std::array::from_fn(|a| disp.iter().map(|d| d[a].unsigned_abs()).max().unwrap_or(0));
        let geom = PadGeom::new(s, pad);
        let offsets = disp.iter().map(|d| geom.offset(d[0], d[1], d[2])).collect();
        (geom, ids, offsets)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let s = x.shape;
        let total = s.len();
        let mut out = Tensor::zeros(self.out_channels, s);
        for (co, b) in self.bias.value.iter().enumerate() {
            out.channel_mut(co).fill(*b);
        }
        let k = self.rows();
        if self.kernel == 1 {
            gemm(
                self.out_channels,
                k,
                total,
                &self.weight.value,
                (k as isize, 1),
                &x.data,
                (total as isize, 1),
                1.0,
                &mut out.data,
                (total as isize, 1),
            );
            return out;
        }
        let (geom, ids, offsets) = self.plan(s);
        let dims = (self.out_channels, self.in_channels, self.taps());
        let (wp, co_pad) = pack_weights(&self.weight.value, dims, &ids, false);
        let mut buf = vec![0.0f32; self.out_channels * geom.len];
        correlate(&geom.embed(x), self.in_channels, &geom, &offsets, &wp, co_pad, self.out_channels, &self.bias.value, &mut buf);
        geom.extract(&buf, self.out_channels)
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let s = x.shape;
        let total = s.len();
        for co in 0..self.out_channels {
            self.bias.grad[co] += dy.channel(co).iter().sum::<f32>();
        }
        let k = self.rows();
        if self.kernel == 1 {
            // dW += dY · Xᵀ
            gemm(
                self.out_channels,
                total,
                k,
                &dy.data,
                (total as isize, 1),
                &x.data,
                (1, total as isize),
                1.0,
                &mut self.weight.grad,
                (k as isize, 1),
            );
            return need_dx.then(|| {
                let mut dx = Tensor::zeros(self.in_channels, s);
                gemm(
                    self.in_channels,
                    self.out_channels,
                    total,
                    &self.weight.value,
                    (1, k as isize),
                    &dy.data,
                    (total as isize, 1),
                    0.0,
                    &mut dx.data,
                    (total as isize, 1),
                );
                dx
            });
        }
        let (geom, ids, offsets) = self.plan(s);
        let dims = (self.out_channels, self.in_channels, self.taps());
        let dy_pad = geom.embed(dy);
        let (x_pad, taps) = (geom.embed(x), (&offsets[..], &ids[..], dims.2));
        weight_grad(&x_pad, self.in_channels, &dy_pad, self.out_channels, &geom, taps, &mut self.weight.grad);
        need_dx.then(|| {
            let (wt, ci_pad) = pack_weights(&self.weight.value, dims, &ids, true);
            let mirrored: Vec<isize> = offsets.iter().map(|o| -o).collect();
            let mut buf = vec![0.0f32; self.in_channels * geom.len];
            correlate(&dy_pad, self.out_channels, &geom, &mirrored, &wt, ci_pad, self.in_channels, &[], &mut buf);
            geom.extract(&buf, self.in_channels)
        })
    }
}

impl Parameters for Conv3d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// up-sampling by an integer factor per axis).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: [usize; 3],
    /// `[out][fz][fy][fx][in]`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose3d {
    pub fn new(in_channels: usize, out_channels: usize, factor: [usize; 3], rng: &mut impl Rng) -> Self {
        let taps: usize = factor.iter().product();
        Self {
            in_channels,
            out_channels,
            factor,
            weight: Param::he_normal(out_channels * taps * in_channels, in_channels, rng),
            bias: Param::zeros(out_channels),
        }
    }

    fn taps(&self) -> usize {
        self.factor.iter().product()
    }

    pub fn output_shape(&self, s: Shape3) -> Shape3 {
        Shape3::new(s.depth * self.factor[0], s.height * self.factor[1], s.width * self.factor[2])
    }

    /// Calls `f(tap, input index, output index)` for every input voxel and tap.
    fn for_each_tap(&self, s: Shape3, mut f: impl FnMut(usize, usize, usize)) {
        let o = self.output_shape(s);
        let [fd, fh, fw] = self.factor;
        for z in 0..s.depth {
            for y in 0..s.height {
                for x in 0..s.width {
                    let i = s.index(z, y, x);
                    for a in 0..fd {
                        for b in 0..fh {
                            for c in 0..fw {
                                let tap = (a * fh + b) * fw + c;
                                f(tap, i, o.index(z * fd + a, y * fh + b, x * fw + c));
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let s = x.shape;
        let nin = s.len();
        let rows = self.out_channels * self.taps();
        let mut t = vec![0.0f32; rows * nin];
        gemm(
            rows,
            self.in_channels,
            nin,
            &self.weight.value,
            (self.in_channels as isize, 1),
            &x.data,
            (nin as isize, 1),
            0.0,
            &mut t,
            (nin as isize, 1),
        );
        let o = self.output_shape(s);
        let mut out = Tensor::zeros(self.out_channels, o);
        let taps = self.taps();
        for co in 0..self.out_channels {
            let b = self.bias.value[co];
            let trows = &t[co * taps * nin..(co + 1) * taps * nin];
            let dst = out.channel_mut(co);
            self.for_each_tap(s, |tap, i, j| dst[j] = trows[tap * nin + i] + b);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let s = x.shape;
        let nin = s.len();
        let taps = self.taps();
        let rows = self.out_channels * taps;
        let mut dt = vec![0.0f32; rows * nin];
        for co in 0..self.out_channels {
            let src = dy.channel(co);
            self.bias.grad[co] += src.iter().sum::<f32>();
            let drows = &mut dt[co * taps * nin..(co + 1) * taps * nin];
            self.for_each_tap(s, |tap, i, j| drows[tap * nin + i] = src[j]);
        }
        gemm(
            rows,
            nin,
            self.in_channels,
            &dt,
            (nin as isize, 1),
            &x.data,
            (1, nin as isize),
            1.0,
            &mut self.weight.grad,
            (self.in_channels as isize, 1),
        );
        let mut dx = Tensor::zeros(self.in_channels, s);
        gemm(
            self.in_channels,
            rows,
            nin,
            &self.weight.value,
            (1, self.in_channels as isize),
            &dt,
            (nin as isize, 1),
            0.0,
            &mut dx.data,
            (nin as isize, 1),
        );
        dx
    }
}

impl Parameters for ConvTranspose3d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loop convolution used as an oracle.
    fn direct_conv(conv: &Conv3d, x: &Tensor) -> Tensor {
        let s = x.shape;
        let k = conv.kernel as isize;
        let r = k / 2;
        let dil = conv.dilation as isize;
        let mut out = Tensor::zeros(conv.out_channels, s);
        for co in 0..conv.out_channels {
            for z in 0..s.depth as isize {
                for y in 0..s.height as isize {
                    for xx in 0..s.width as isize {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..conv.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sz, sy, sx) = (z + (kz - r) * dil, y + (ky - r) * dil, xx + (kx - r) * dil);
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= s.depth as isize || sy >= s.height as isize || sx >= s.width as isize {
                                            continue;
                                        }
                                        let widx = ((((co * conv.in_channels + ci) as isize * k + kz) * k + ky) * k + kx) as usize;
                                        let v = x.channel(ci)[s.index(sz as usize, sy as usize, sx as usize)];
                                        acc += conv.weight.value[widx] as f64 * v as f64;
                                    }
                                }
                            }
                        }
                        out.channel_mut(co)[s.index(z as usize, y as usize, xx as usize)] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, s: Shape3, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, s, (0..c * s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, dil) in [(3, 1), (3, 2), (1, 1), (3, 3)] {
            let mut conv = Conv3d::new(3, 4, k, dil, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(3, Shape3::new(4, 5, 6), &mut rng);
            let fast = conv.forward(&x);
            let slow = direct_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4, "k={k} dil={dil}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_kernel_on_constant_input_counts_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv3d::new(1, 1, 3, 1, &mut rng);
        conv.weight.value.fill(0.5);
        let x = Tensor::from_vec(1, Shape3::new(4, 4, 4), vec![2.0; 64]);
        let y = conv.forward(&x);
        // corner voxel sees 2x2x2 in-bounds taps, interior sees 27
        assert_eq!(y.data[0], 8.0);
        assert_eq!(y.data[Shape3::new(4, 4, 4).index(1, 1, 1)], 27.0);
    }

    /// Checks backward against finite differences of `sum(w ⊙ forward(x))`.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape3::new(3, 4, 5);
        for (k, dil) in [(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(2, 3, k, dil, &mut rng);
            let x = random_tensor(2, s, &mut rng);
            let wout = random_tensor(3, s, &mut rng);
            let objective = |c: &Conv3d, x: &Tensor| -> f64 {
                c.forward(x).data.iter().zip(&wout.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let dx = conv.backward(&x, &wout, true).unwrap();
            let h = 1e-2f32;
            for idx in [0, 7, 19, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let mut xm = x.clone();
                xm.data[idx] -= h;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h as f64);
                assert!((fd - dx.data[idx] as f64).abs() < 1e-2 * (1.0 + fd.abs()), "dx[{idx}]");
            }
            for idx in [0, 5, conv.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight.value[idx] += h;
                let mut cm = conv.clone();
                cm.weight.value[idx] -= h;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h as f64);
                let g = conv.weight.grad[idx] as f64;
                assert!((fd - g).abs() < 1e-2 * (1.0 + fd.abs()), "dw[{idx}] {fd} vs {g}");
            }
        }
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape3::new(2, 3, 2);
        let mut up = ConvTranspose3d::new(3, 2, [2, 2, 1], &mut rng);
        let x = random_tensor(3, s, &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.shape, Shape3::new(4, 6, 2));
        let wout = random_tensor(2, y.shape, &mut rng);
        let objective = |u: &ConvTranspose3d, x: &Tensor| -> f64 {
            u.forward(x).data.iter().zip(&wout.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let dx = up.backward(&x, &wout);
        let h = 1e-2f32;
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&up, &xp) - objective(&up, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 1e-2 * (1.0 + fd.abs()));
        }
        for idx in 0..up.weight.len() {
            let mut p = up.clone();
            p.weight.value[idx] += h;
            let mut m = up.clone();
            m.weight.value[idx] -= h;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h as f64);
            assert!((fd - up.weight.grad[idx] as f64).abs() < 1e-2 * (1.0 + fd.abs()));
        }
    }
}

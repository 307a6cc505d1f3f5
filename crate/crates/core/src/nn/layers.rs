use super::param::{Param, Parameters};
use super::tensor::Tensor;
use crate::volume::Shape3;

pub const LEAKY_SLOPE: f32 = 0.01;
const NORM_EPS: f32 = 1e-5;

/// Per-channel instance normalisation with a learned affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        let n = x.voxels() as f64;
        let mut normalized = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.channels);
        for c in 0..x.channels {
            let src = x.channel(c);
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std.push(istd as f32);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let nrm = normalized.channel_mut(c);
            for v in nrm.iter_mut() {
                *v = ((*v as f64 - mean) * istd) as f32;
            }
            for (o, v) in out.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
                *o = g * v + b;
            }
        }
        (out, NormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Tensor) -> Tensor {
        let n = dy.voxels() as f64;
        let mut dx = Tensor::zeros(dy.channels, dy.shape);
        for c in 0..dy.channels {
            let g = dy.channel(c);
            let xh = cache.normalized.channel(c);
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for (&gi, &xi) in g.iter().zip(xh) {
                sum_g += gi as f64;
                sum_gx += gi as f64 * xi as f64;
            }
            self.beta.grad[c] += sum_g as f32;
            self.gamma.grad[c] += sum_gx as f32;
            let gamma = self.gamma.value[c] as f64;
            let scale = gamma * cache.inv_std[c] as f64 / n;
            for ((d, &gi), &xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *d = (scale * (n * gi as f64 - sum_g - xi as f64 * sum_gx)) as f32;
            }
        }
        dx
    }
}

impl Parameters for InstanceNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub fn leaky_relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Gradient through a leaky ReLU given its output (sign is preserved).
pub fn leaky_relu_backward(output: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&output.data) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Non-overlapping max pooling by an integer factor per axis.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Shape3,
    argmax: Vec<u32>,
}

pub fn max_pool(x: &Tensor, factor: [usize; 3]) -> (Tensor, PoolCache) {
    let s = x.shape;
    let o = Shape3::new(s.depth / factor[0], s.height / factor[1], s.width / factor[2]);
    let mut out = Tensor::zeros(x.channels, o);
    let mut argmax = vec![0u32; x.channels * o.len()];
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..o.depth {
            for y in 0..o.height {
                for xx in 0..o.width {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            for d in 0..factor[2] {
                                let i = s.index(z * factor[0] + a, y * factor[1] + b, xx * factor[2] + d);
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let j = o.index(z, y, xx);
                    out.data[c * o.len() + j] = best;
                    argmax[c * o.len() + j] = best_i as u32;
                }
            }
        }
    }
    (
        out,
        PoolCache {
            input_shape: s,
            argmax,
        },
    )
}

pub fn max_pool_backward(cache: &PoolCache, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.channels, cache.input_shape);
    let no = dy.voxels();
    for c in 0..dy.channels {
        let dst = dx.channel_mut(c);
        for j in 0..no {
            dst[cache.argmax[c * no + j] as usize] += dy.data[c * no + j];
        }
    }
    dx
}

/// Softmax across channels at every voxel.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = logits.clone();
    for i in 0..n {
        let max = (0..c).map(|k| logits.data[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for k in 0..c {
            let e = ((logits.data[k * n + i] - max) as f64).exp();
            out.data[k * n + i] = e as f32;
            sum += e;
        }
        for k in 0..c {
            out.data[k * n + i] = (out.data[k * n + i] as f64 / sum) as f32;
        }
    }
    out
}

/// Backward of a channel softmax given its output `p` and `dL/dp`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let n = p.voxels();
    let c = p.channels;
    let mut out = Tensor::zeros(c, p.shape);
    for i in 0..n {
        let dot: f64 = (0..c).map(|k| p.data[k * n + i] as f64 * dp.data[k * n + i] as f64).sum();
        for k in 0..c {
            out.data[k * n + i] = (p.data[k * n + i] as f64 * (dp.data[k * n + i] as f64 - dot)) as f32;
        }
    }
    out
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = (1.0 / (1.0 + (-*v as f64).exp())) as f32;
    }
    out
}

pub fn sigmoid_backward(s: &Tensor, ds: &Tensor) -> Tensor {
    let mut out = ds.clone();
    for (g, &v) in out.data.iter_mut().zip(&s.data) {
        *g *= v * (1.0 - v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(c: usize, s: Shape3, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, s, (0..c * s.len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let s = Shape3::new(2, 3, 3);
        let x = rand_t(2, s, 1);
        let w = rand_t(2, s, 2);
        let mut norm = InstanceNorm::new(2);
        norm.gamma.value = vec![1.5, -0.7];
        norm.beta.value = vec![0.2, 0.1];
        let obj = |n: &InstanceNorm, x: &Tensor| -> f64 {
            n.forward(x).0.data.iter().zip(&w.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = norm.forward(&x);
        let dx = norm.backward(&cache, &w);
        let h = 1e-2;
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (obj(&norm, &p) - obj(&norm, &m)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "{i}: {fd} {}", dx.data[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_consistent() {
        let s = Shape3::new(1, 2, 3);
        let logits = rand_t(5, s, 3);
        let p = softmax_channels(&logits);
        for i in 0..s.len() {
            let sum: f32 = (0..5).map(|k| p.data[k * s.len() + i]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let w = rand_t(5, s, 4);
        let dl = softmax_backward(&p, &w);
        let obj = |l: &Tensor| -> f64 {
            softmax_channels(l).data.iter().zip(&w.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-3;
        for i in 0..logits.data.len() {
            let mut a = logits.clone();
            a.data[i] += h;
            let mut b = logits.clone();
            b.data[i] -= h;
            let fd = (obj(&a) - obj(&b)) / (2.0 * h as f64);
            assert!((fd - dl.data[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let s = Shape3::new(2, 2, 2);
        let mut x = Tensor::zeros(1, s);
        x.data[5] = 3.0;
        let (y, cache) = max_pool(&x, [2, 2, 2]);
        assert_eq!(y.data, vec![3.0]);
        let dx = max_pool_backward(&cache, &Tensor::from_vec(1, Shape3::new(1, 1, 1), vec![1.0]));
        assert_eq!(dx.data.iter().sum::<f32>(), 1.0);
        assert_eq!(dx.data[5], 1.0);
    }
}

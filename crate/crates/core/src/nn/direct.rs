//! Direct 3D correlation on a zero-padded, flattened domain.
//!
//! With the input embedded in a zero border of width `pad`, every kernel tap
//! becomes a constant offset in the flat index, so one output voxel is a
//! dot product over `(channel, tap)` pairs of contiguous loads. Outputs are
//! computed over the flat span covering the interior; entries that land in
//! the border are scratch and dropped on extraction.

use super::tensor::Tensor;
use crate::volume::Shape3;

const CO_TILE: usize = 4;
const V_TILE: usize = 24;
const DW_TILE: usize = 1024;

#[derive(Debug, Clone, Copy)]
pub(crate) struct PadGeom {
    pub shape: Shape3,
    pub pad: [usize; 3],
    pub strides: [usize; 2],
    pub len: usize,
}

impl PadGeom {
    pub fn new(shape: Shape3, pad: [usize; 3]) -> Self {
        let (ph, pw) = (shape.height + 2 * pad[1], shape.width + 2 * pad[2]);
        let pd = shape.depth + 2 * pad[0];
        Self {
            shape,
            pad,
            strides: [ph * pw, pw],
            len: pd * ph * pw,
        }
    }

    fn flat(&self, z: usize, y: usize, x: usize) -> usize {
        z * self.strides[0] + y * self.strides[1] + x
    }

    /// Flat span `[start, end)` covering all interior voxels.
    pub fn span(&self) -> (usize, usize) {
        let [pz, py, px] = self.pad;
        let s = self.shape;
        (
            self.flat(pz, py, px),
            self.flat(s.depth + pz - 1, s.height + py - 1, s.width + px - 1) + 1,
        )
    }

    pub fn offset(&self, dz: isize, dy: isize, dx: isize) -> isize {
        dz * self.strides[0] as isize + dy * self.strides[1] as isize + dx
    }

    pub fn embed(&self, t: &Tensor) -> Vec<f32> {
        let s = self.shape;
        let [pz, py, px] = self.pad;
        let mut out = vec![0.0f32; t.channels * self.len];
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = &mut out[c * self.len..(c + 1) * self.len];
            for z in 0..s.depth {
                for y in 0..s.height {
                    let d0 = self.flat(z + pz, y + py, px);
                    let s0 = (z * s.height + y) * s.width;
                    dst[d0..d0 + s.width].copy_from_slice(&src[s0..s0 + s.width]);
                }
            }
        }
        out
    }

    pub fn extract(&self, buf: &[f32], channels: usize) -> Tensor {
        let s = self.shape;
        let [pz, py, px] = self.pad;
        let mut out = Tensor::zeros(channels, s);
        for c in 0..channels {
            let src = &buf[c * self.len..(c + 1) * self.len];
            let dst = out.channel_mut(c);
            for z in 0..s.depth {
                for y in 0..s.height {
                    let s0 = self.flat(z + pz, y + py, px);
                    let d0 = (z * s.height + y) * s.width;
                    dst[d0..d0 + s.width].copy_from_slice(&src[s0..s0 + s.width]);
                }
            }
        }
        out
    }
}

/// Packs `[out][in][taps]` weights restricted to the `live` taps as
/// `[in][live][out_padded]`, out padded to the tile width. With `transpose`
/// the roles of in and out are swapped.
pub(crate) fn pack_weights(
    w: &[f32],
    (cout, cin, taps): (usize, usize, usize),
    live: &[usize],
    transpose: bool,
) -> (Vec<f32>, usize) {
    let (rows, cols) = if transpose { (cout, cin) } else { (cin, cout) };
    let cols_pad = cols.div_ceil(CO_TILE) * CO_TILE;
    let nl = live.len();
    let mut out = vec![0.0f32; rows * nl * cols_pad];
    for co in 0..cout {
        for ci in 0..cin {
            for (li, &t) in live.iter().enumerate() {
                let v = w[(co * cin + ci) * taps + t];
                let (r, c) = if transpose { (co, ci) } else { (ci, co) };
                out[(r * nl + li) * cols_pad + c] = v;
            }
        }
    }
    (out, cols_pad)
}

#[inline(always)]
fn madd<const FMA: bool>(a: f32, b: f32, c: f32) -> f32 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn correlate_body<const FMA: bool>(
    input: &[f32],
    cin: usize,
    plen: usize,
    offsets: &[isize],
    wpack: &[f32],
    co_pad: usize,
    cout: usize,
    bias: &[f32],
    (v0, v1): (usize, usize),
    out: &mut [f32],
) {
    let taps = offsets.len();
    for cb in (0..cout).step_by(CO_TILE) {
        let mut v = v0;
        while v < v1 {
            let len = V_TILE.min(v1 - v);
            let mut acc = [[0.0f32; V_TILE]; CO_TILE];
            for ci in 0..cin {
                let xin = &input[ci * plen..(ci + 1) * plen];
                for (t, &o) in offsets.iter().enumerate() {
                    let start = (v as isize + o) as usize;
                    let base = (ci * taps + t) * co_pad + cb;
                    let w: &[f32; CO_TILE] = wpack[base..base + CO_TILE].try_into().expect("tile");
                    if len == V_TILE {
                        let xs: &[f32; V_TILE] = xin[start..start + V_TILE].try_into().expect("tile");
                        for c in 0..CO_TILE {
                            for j in 0..V_TILE {
                                acc[c][j] = madd::<FMA>(w[c], xs[j], acc[c][j]);
                            }
                        }
                    } else {
                        let xs = &xin[start..start + len];
                        for c in 0..CO_TILE {
                            for j in 0..len {
                                acc[c][j] = madd::<FMA>(w[c], xs[j], acc[c][j]);
                            }
                        }
                    }
                }
            }
            for (c, row) in acc.iter().enumerate().take(cout - cb) {
                let co = cb + c;
                let b = bias.get(co).copied().unwrap_or(0.0);
                for (d, a) in out[co * plen + v..co * plen + v + len].iter_mut().zip(row) {
                    *d = a + b;
                }
            }
            v += len;
        }
    }
}

const DW_CO: usize = 4;
const DW_CI: usize = 2;

/// `x` and `dy` are channel-padded to multiples of `DW_CI` and `DW_CO`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn weight_grad_body<const FMA: bool>(
    x: &[f32],
    (cin, cin_pad): (usize, usize),
    dy: &[f32],
    (cout, cout_pad): (usize, usize),
    plen: usize,
    (offsets, tap_ids, taps): (&[isize], &[usize], usize),
    (v0, v1): (usize, usize),
    dw: &mut [f32],
) {
    let mut v = v0;
    while v < v1 {
        let len = DW_TILE.min(v1 - v);
        let full = len / 8 * 8;
        for (t, &o) in offsets.iter().enumerate() {
            let s = (v as isize + o) as usize;
            for cb in (0..cout_pad).step_by(DW_CO) {
                let d: [&[f32]; DW_CO] = std::array::from_fn(|c| &dy[(cb + c) * plen + v..(cb + c) * plen + v + len]);
                for ib in (0..cin_pad).step_by(DW_CI) {
                    let xs: [&[f32]; DW_CI] = std::array::from_fn(|i| &x[(ib + i) * plen + s..(ib + i) * plen + s + len]);
                    let mut acc = [[[0.0f32; 8]; DW_CI]; DW_CO];
                    let mut j0 = 0;
                    while j0 < full {
                        let dv: [&[f32; 8]; DW_CO] = std::array::from_fn(|c| d[c][j0..j0 + 8].try_into().expect("lane"));
                        let xv: [&[f32; 8]; DW_CI] = std::array::from_fn(|i| xs[i][j0..j0 + 8].try_into().expect("lane"));
                        for c in 0..DW_CO {
                            for i in 0..DW_CI {
                                for l in 0..8 {
                                    acc[c][i][l] = madd::<FMA>(dv[c][l], xv[i][l], acc[c][i][l]);
                                }
                            }
                        }
                        j0 += 8;
                    }
                    for c in 0..DW_CO {
                        let co = cb + c;
                        for i in 0..DW_CI {
                            let ci = ib + i;
                            let mut sum = acc[c][i].iter().sum::<f32>();
                            for j in full..len {
                                sum = madd::<FMA>(d[c][j], xs[i][j], sum);
                            }
                            if co < cout && ci < cin {
                                dw[(co * cin + ci) * taps + tap_ids[t]] += sum;
                            }
                        }
                    }
                }
            }
        }
        v += len;
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn correlate(
        input: &[f32],
        cin: usize,
        plen: usize,
        offsets: &[isize],
        wpack: &[f32],
        co_pad: usize,
        cout: usize,
        bias: &[f32],
        span: (usize, usize),
        out: &mut [f32],
    ) {
        super::correlate_body::<true>(input, cin, plen, offsets, wpack, co_pad, cout, bias, span, out)
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn weight_grad(
        x: &[f32],
        cin: (usize, usize),
        dy: &[f32],
        cout: (usize, usize),
        plen: usize,
        taps: (&[isize], &[usize], usize),
        span: (usize, usize),
        dw: &mut [f32],
    ) {
        super::weight_grad_body::<true>(x, cin, dy, cout, plen, taps, span, dw)
    }
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[co][v] = bias[co] + Σ_ci Σ_t w[ci][t][co] · input[ci][v + offsets[t]]`
/// for flat `v` in `span`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate(
    input: &[f32],
    cin: usize,
    geom: &PadGeom,
    offsets: &[isize],
    wpack: &[f32],
    co_pad: usize,
    cout: usize,
    bias: &[f32],
    out: &mut [f32],
) {
    let span = geom.span();
    assert!(input.len() >= cin * geom.len && out.len() >= cout * geom.len);
    assert!(wpack.len() >= cin * offsets.len() * co_pad);
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { x86::correlate(input, cin, geom.len, offsets, wpack, co_pad, cout, bias, span, out) };
        return;
    }
    correlate_body::<false>(input, cin, geom.len, offsets, wpack, co_pad, cout, bias, span, out)
}

fn channel_padded(buf: &[f32], channels: usize, multiple: usize, plen: usize) -> (std::borrow::Cow<'_, [f32]>, usize) {
    let padded = channels.div_ceil(multiple) * multiple;
    if padded == channels {
        (std::borrow::Cow::Borrowed(&buf[..channels * plen]), padded)
    } else {
        let mut v = buf[..channels * plen].to_vec();
        v.resize(padded * plen, 0.0);
        (std::borrow::Cow::Owned(v), padded)
    }
}

/// `dw[co][ci][tap_ids[t]] += Σ_v dy[co][v] · x[ci][v + offsets[t]]` over
/// the interior span; `dy` must be zero outside the interior.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad(
    x: &[f32],
    cin: usize,
    dy: &[f32],
    cout: usize,
    geom: &PadGeom,
    (offsets, tap_ids, taps): (&[isize], &[usize], usize),
    dw: &mut [f32],
) {
    let span = geom.span();
    assert!(x.len() >= cin * geom.len && dy.len() >= cout * geom.len);
    assert!(dw.len() >= cout * cin * taps && tap_ids.iter().all(|&t| t < taps));
    let offsets_taps = (offsets, tap_ids, taps);
    let (x, cin_pad) = channel_padded(x, cin, DW_CI, geom.len);
    let (dy, cout_pad) = channel_padded(dy, cout, DW_CO, geom.len);
    let (ci, co) = ((cin, cin_pad), (cout, cout_pad));
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { x86::weight_grad(&x, ci, &dy, co, geom.len, offsets_taps, span, dw) };
        return;
    }
    weight_grad_body::<false>(&x, ci, &dy, co, geom.len, offsets_taps, span, dw)
}

//! 6-connected component labelling and exact Euclidean distance transforms.

use std::collections::VecDeque;

use crate::volume::{Grid3, Shape3, Spacing};

/// Components of a binary mask under face (6-)connectivity.
#[derive(Debug, Clone)]
pub struct Components {
    /// Component id per voxel (`None` outside the mask). Ids are assigned in
    /// raster order of each component's first voxel.
    pub labels: Grid3<Option<u32>>,
    /// Voxel count per component id.
    pub sizes: Vec<usize>,
    /// Raster index of the first voxel of each component.
    pub seeds: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Id of the largest component; ties go to the component with the
    /// lexicographically smallest `(z, y, x)` seed voxel.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (id, &size) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, id as u32));
            }
        }
        best.map(|(_, id)| id)
    }
}

pub fn connected_components(mask: &Grid3<bool>) -> Components {
    let shape = mask.shape();
    let mut labels: Grid3<Option<u32>> = Grid3::filled(shape, None);
    let mut sizes = Vec::new();
    let mut seeds = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..shape.len() {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        let id = sizes.len() as u32;
        labels[start] = Some(id);
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for n in shape.face_neighbors(i) {
                if mask[n] && labels[n].is_none() {
                    labels[n] = Some(id);
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
        seeds.push(start);
    }
    Components {
        labels,
        sizes,
        seeds,
    }
}

pub fn component_count(mask: &Grid3<bool>) -> usize {
    connected_components(mask).count()
}

/// Mask voxels with at least one face neighbour outside the mask. Voxels on
/// the volume border count as boundary.
pub fn boundary(mask: &Grid3<bool>) -> Grid3<bool> {
    let shape = mask.shape();
    Grid3::from_fn(shape, |z, y, x| {
        let i = shape.index(z, y, x);
        mask[i] && (shape.face_neighbor_count(i) < 6 || shape.face_neighbors(i).any(|n| !mask[n]))
    })
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// voxel of `mask`; `f64::INFINITY` everywhere when the mask is empty.
///
/// Separable lower-envelope-of-parabolas transform, one pass per axis, so the
/// result is exact for any anisotropic spacing.
pub fn squared_edt(mask: &Grid3<bool>, spacing: Spacing) -> Grid3<f64> {
    let shape = mask.shape();
    let mut f: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let [sd, sh, sw] = spacing.0;
    let (d, h, w) = (shape.depth, shape.height, shape.width);
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = EnvelopeScratch::default();

    // x lines
    for z in 0..d {
        for y in 0..h {
            let base = shape.index(z, y, 0);
            line.clear();
            line.extend_from_slice(&f[base..base + w]);
            transform_line(&line, sw, &mut out, &mut scratch);
            f[base..base + w].copy_from_slice(&out);
        }
    }
    // y lines
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| f[shape.index(z, y, x)]));
            transform_line(&line, sh, &mut out, &mut scratch);
            for y in 0..h {
                f[shape.index(z, y, x)] = out[y];
            }
        }
    }
    // z lines
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|z| f[shape.index(z, y, x)]));
            transform_line(&line, sd, &mut out, &mut scratch);
            for z in 0..d {
                f[shape.index(z, y, x)] = out[z];
            }
        }
    }
    Grid3::from_vec(shape, f).expect("shape preserved")
}

#[derive(Default)]
struct EnvelopeScratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

/// 1D squared distance transform: `out[q] = min_p (s·(q − p))² + f[p]`.
fn transform_line(f: &[f64], s: f64, out: &mut Vec<f64>, scratch: &mut EnvelopeScratch) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = s * s;
    let v = &mut scratch.v;
    let z = &mut scratch.z;
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
            continue;
        }
        loop {
            let p = *v.last().unwrap();
            let (qf, pf) = (q as f64, p as f64);
            let sep = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            let k = v.len() - 1;
            if sep <= z[k] {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::INFINITY);
                    break;
                }
            } else {
                v.push(q);
                z[k + 1] = sep;
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = s2 * (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Shape-preserving helper used by tests and callers that need the plain
/// (unsquared) distance in millimetres.
pub fn edt(mask: &Grid3<bool>, spacing: Spacing) -> Grid3<f64> {
    squared_edt(mask, spacing).map(|v| v.sqrt())
}

pub fn count_true(mask: &Grid3<bool>) -> usize {
    mask.as_slice().iter().filter(|&&b| b).count()
}

pub fn empty_mask(shape: Shape3) -> Grid3<bool> {
    Grid3::filled(shape, false)
}

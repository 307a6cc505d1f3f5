//! Independent reference implementations used by the integration tests.
//! Everything here is written directly from the defining formulas with
//! plain loops; none of it calls into the library's numerics.

#![allow(dead_code)]

use std::collections::VecDeque;

use cotrain::nets::{BranchAssignment, BranchId, DualBranchOutput};
use cotrain::volume::{Grid3, LabelMap, PartialLabelMap, Shape3, Spacing, Volume, ZoneLabel};
use rand::Rng;

pub fn random_shape(rng: &mut impl Rng, lo: usize, hi: usize) -> Shape3 {
    Shape3::new(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
}

/// Per-voxel normalised random class probabilities for both branches.
pub fn random_output(rng: &mut impl Rng, shape: Shape3, recon: bool) -> DualBranchOutput {
    let n = shape.len();
    let mut probs: [[Grid3<f64>; 5]; 2] = std::array::from_fn(|_| std::array::from_fn(|_| Grid3::filled(shape, 0.0)));
    for branch in probs.iter_mut() {
        for i in 0..n {
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.0f64)).collect();
            let s: f64 = w.iter().sum();
            for z in 0..5 {
                branch[z][i] = w[z] / s;
            }
        }
    }
    let recon = recon.then(|| std::array::from_fn(|_| Grid3::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0))));
    DualBranchOutput {
        shape,
        spacing: Spacing::ISOTROPIC,
        probs,
        recon,
    }
}

pub fn random_labels(rng: &mut impl Rng, shape: Shape3) -> LabelMap {
    let g = Grid3::from_fn(shape, |_, _, _| ZoneLabel::from_index(rng.gen_range(0..5)).unwrap());
    LabelMap::new(g, Spacing::ISOTROPIC)
}

pub fn random_volume(rng: &mut impl Rng, shape: Shape3) -> Volume {
    Volume::new(Grid3::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0f32)), Spacing::ISOTROPIC)
}

pub fn random_assignment(rng: &mut impl Rng) -> BranchAssignment {
    BranchAssignment::new(std::array::from_fn(|_| if rng.gen_bool(0.5) { BranchId::BranchI } else { BranchId::BranchII }))
}

/// `1 − 2 Σ a b / (Σ a² + Σ b² + eps)` by direct summation.
pub fn dice_term(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    1.0 - 2.0 * ab / (aa + bb + eps)
}

pub fn one_hot_of(labels: &LabelMap, zone: ZoneLabel) -> Vec<f64> {
    labels.labels.as_slice().iter().map(|&l| if l == zone { 1.0 } else { 0.0 }).collect()
}

pub fn masked_dice(out: &DualBranchOutput, y: &LabelMap, assign: &BranchAssignment, eps: f64) -> (f64, [f64; 5]) {
    let mut terms = [0.0; 5];
    for z in ZoneLabel::ALL {
        let b = assign.branch_for(z).index();
        terms[z.index()] = dice_term(out.probs[b][z.index()].as_slice(), &one_hot_of(y, z), eps);
    }
    (terms.iter().sum(), terms)
}

pub fn unsup(out: &DualBranchOutput, eps: f64) -> (f64, [f64; 5]) {
    let mut terms = [0.0; 5];
    for z in 0..5 {
        terms[z] = dice_term(out.probs[0][z].as_slice(), out.probs[1][z].as_slice(), eps);
    }
    (terms.iter().sum(), terms)
}

/// Mean local SSIM with a cubic window of side `window`, clipped at the
/// volume border, population (1/n) moments.
pub fn ssim(a: &Grid3<f64>, b: &Grid3<f64>, window: usize, k1: f64, k2: f64, range: f64) -> f64 {
    let s = a.shape();
    let r = (window / 2) as isize;
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let mut total = 0.0;
    for z in 0..s.depth as isize {
        for y in 0..s.height as isize {
            for x in 0..s.width as isize {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                            if zz < 0
                                || yy < 0
                                || xx < 0
                                || zz >= s.depth as isize
                                || yy >= s.height as isize
                                || xx >= s.width as isize
                            {
                                continue;
                            }
                            xs.push(*a.get(zz as usize, yy as usize, xx as usize));
                            ys.push(*b.get(zz as usize, yy as usize, xx as usize));
                        }
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / s.len() as f64
}

pub fn recon_loss(out: &DualBranchOutput, x: &Volume) -> f64 {
    let target = x.data.map(|&v| v as f64);
    out.recon
        .as_ref()
        .unwrap()
        .iter()
        .map(|r| 1.0 - ssim(r, &target, 7, 0.01, 0.03, 1.0))
        .sum()
}

/// 6-connected components of a mask by breadth-first flood fill.
pub fn flood_fill_count(mask: &Grid3<bool>) -> usize {
    let s = mask.shape();
    let mut seen = vec![false; s.len()];
    let mut count = 0;
    for start in 0..s.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = s.coords(i);
            let mut nbrs = Vec::with_capacity(6);
            if z > 0 {
                nbrs.push(s.index(z - 1, y, x));
            }
            if z + 1 < s.depth {
                nbrs.push(s.index(z + 1, y, x));
            }
            if y > 0 {
                nbrs.push(s.index(z, y - 1, x));
            }
            if y + 1 < s.height {
                nbrs.push(s.index(z, y + 1, x));
            }
            if x > 0 {
                nbrs.push(s.index(z, y, x - 1));
            }
            if x + 1 < s.width {
                nbrs.push(s.index(z, y, x + 1));
            }
            for j in nbrs {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count
}

pub fn sq_dist(s: Shape3, sp: Spacing, i: usize, j: usize) -> f64 {
    let (a, b) = (s.coords(i), s.coords(j));
    let d = [
        (a.0 as f64 - b.0 as f64) * sp.0[0],
        (a.1 as f64 - b.1 as f64) * sp.0[1],
        (a.2 as f64 - b.2 as f64) * sp.0[2],
    ];
    d.iter().map(|v| v * v).sum()
}

/// Every unassigned voxel takes the class of its nearest assigned voxel,
/// ties resolved by class order; exhaustive O(N²) search.
pub fn brute_force_fill(partial: &PartialLabelMap, spacing: Spacing) -> Vec<ZoneLabel> {
    let s = partial.shape();
    (0..s.len())
        .map(|i| {
            if let Some(l) = partial[i] {
                return l;
            }
            let mut best: Option<(f64, ZoneLabel)> = None;
            for z in ZoneLabel::ALL {
                let d = (0..s.len())
                    .filter(|&j| partial[j] == Some(z))
                    .map(|j| sq_dist(s, spacing, i, j))
                    .fold(f64::INFINITY, f64::min);
                if d.is_finite() && best.is_none_or(|(b, _)| d < b) {
                    best = Some((d, z));
                }
            }
            best.unwrap().1
        })
        .collect()
}

/// Voxels of the mask with at least one 6-neighbour outside it (the volume
/// border counts as outside).
pub fn boundary_voxels(mask: &Grid3<bool>) -> Vec<usize> {
    let s = mask.shape();
    (0..s.len())
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let (z, y, x) = s.coords(i);
            let (z, y, x) = (z as isize, y as isize, x as isize);
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                .iter()
                .any(|&(dz, dy, dx)| {
                    let (a, b, c) = (z + dz, y + dy, x + dx);
                    a < 0
                        || b < 0
                        || c < 0
                        || a >= s.depth as isize
                        || b >= s.height as isize
                        || c >= s.width as isize
                        || !mask[s.index(a as usize, b as usize, c as usize)]
                })
        })
        .collect()
}

pub fn mad(pred: &Grid3<bool>, gt: &Grid3<bool>, spacing: Spacing) -> f64 {
    let s = pred.shape();
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    let nearest = |i: usize, set: &[usize]| {
        set.iter().map(|&j| sq_dist(s, spacing, i, j)).fold(f64::INFINITY, f64::min).sqrt()
    };
    let total: f64 = bp.iter().map(|&i| nearest(i, &bg)).sum::<f64>() + bg.iter().map(|&i| nearest(i, &bp)).sum::<f64>();
    total / (bp.len() + bg.len()) as f64
}

pub fn dsc(pred: &Grid3<bool>, gt: &Grid3<bool>) -> f64 {
    let inter = pred.as_slice().iter().zip(gt.as_slice()).filter(|(a, b)| **a && **b).count();
    let total = pred.as_slice().iter().filter(|a| **a).count() + gt.as_slice().iter().filter(|b| **b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Upper tail P(T > t) of Student's t with 3 degrees of freedom by
/// composite Simpson integration of the density
/// `2 / (π √3) · (1 + x²/3)^-2` over [0, t].
pub fn student_t3_upper_tail(t: f64) -> f64 {
    let pdf = |x: f64| 2.0 / (std::f64::consts::PI * 3f64.sqrt()) * (1.0 + x * x / 3.0).powi(-2);
    let n = 20_000;
    let h = t / n as f64;
    let mut acc = pdf(0.0) + pdf(t);
    for k in 1..n {
        acc += pdf(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 - acc * h / 3.0
}

/// Central finite difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

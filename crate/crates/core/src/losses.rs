//! Training objectives over [`DualBranchOutput`]s, in `f64`, each with an
//! analytic gradient with respect to the branch outputs.
//!
//! * masked Dice: every zone is scored on the probability grid of the branch
//!   responsible for it;
//! * SSIM reconstruction: `Σ_b (1 − SSIM(X̂_b, X))`;
//! * unsupervised consistency: soft Dice disagreement between the two
//!   branches over all five classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BranchAssignment, BranchId, DualBranchOutput, OutputGrad};
use crate::volume::{ensure_same_shape, Grid3, LabelMap, Shape3, Volume, ZoneLabel};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Edge length of the cubic window (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn radius(&self) -> usize {
        self.window / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dsc: f64,
    pub recon: f64,
    pub unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dsc: 1.0,
            recon: 1.0,
            unsup: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub ssim: SsimConfig,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            ssim: SsimConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dsc: f64,
    pub recon: f64,
    pub unsup: f64,
    pub supervised_total: f64,
    pub grand_total: f64,
    pub per_zone_dsc_terms: [f64; ZoneLabel::COUNT],
    pub per_zone_unsup_terms: [f64; ZoneLabel::COUNT],
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.dsc, self.recon, self.unsup, self.supervised_total, self.grand_total]
            .iter()
            .chain(&self.per_zone_dsc_terms)
            .chain(&self.per_zone_unsup_terms)
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let n = items.len() as f64;
        let first = items.first()?;
        let mut acc = *first;
        for b in &items[1..] {
            acc.dsc += b.dsc;
            acc.recon += b.recon;
            acc.unsup += b.unsup;
            acc.supervised_total += b.supervised_total;
            acc.grand_total += b.grand_total;
            for z in 0..ZoneLabel::COUNT {
                acc.per_zone_dsc_terms[z] += b.per_zone_dsc_terms[z];
                acc.per_zone_unsup_terms[z] += b.per_zone_unsup_terms[z];
            }
        }
        acc.dsc /= n;
        acc.recon /= n;
        acc.unsup /= n;
        acc.supervised_total /= n;
        acc.grand_total /= n;
        for z in 0..ZoneLabel::COUNT {
            acc.per_zone_dsc_terms[z] /= n;
            acc.per_zone_unsup_terms[z] /= n;
        }
        Some(acc)
    }
}

/// `1 − 2Σab / (Σa² + Σb² + ε)`. The two squared sums are accumulated
/// separately and then added, so the value is symmetric in `a` and `b`
/// bit for bit.
pub fn soft_dice_term(a: &[f64], b: &[f64], epsilon: f64) -> f64 {
    let (num, den) = dice_sums(a, b);
    1.0 - 2.0 * num / (den + epsilon)
}

fn dice_sums(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "soft Dice operands differ in length");
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa + bb)
}

/// Soft Dice term and its gradient with respect to `a`.
pub fn soft_dice_term_grad(a: &[f64], b: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let (num, den) = dice_sums(a, b);
    let d = den + epsilon;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (4.0 * num * x - 2.0 * y * d) / (d * d))
        .collect();
    (1.0 - 2.0 * num / d, grad)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("smoothing epsilon must be positive, got {epsilon}")))
    }
}

fn masked_dice_impl(
    out: &DualBranchOutput,
    y: &LabelMap,
    assign: &BranchAssignment,
    epsilon: f64,
    grad: Option<&mut OutputGrad>,
) -> Result<(f64, [f64; ZoneLabel::COUNT])> {
    check_epsilon(epsilon)?;
    ensure_same_shape(out.shape, y.shape(), "masked Dice labels")?;
    let mut terms = [0.0; ZoneLabel::COUNT];
    let mut grad = grad;
    for zone in ZoneLabel::ALL {
        let branch = assign.branch_for(zone);
        let p = out.prob(branch, zone).as_slice();
        let target: Vec<f64> = y.labels.as_slice().iter().map(|&l| f64::from(u8::from(l == zone))).collect();
        terms[zone.index()] = match grad.as_deref_mut() {
            Some(g) => {
                let (t, d) = soft_dice_term_grad(p, &target, epsilon);
                for (acc, v) in g.probs[branch.index()][zone.index()].iter_mut().zip(d) {
                    *acc += v;
                }
                t
            }
            None => soft_dice_term(p, &target, epsilon),
        };
    }
    Ok((terms.iter().sum(), terms))
}

/// Masked supervised Dice loss: the sum over zones of the soft Dice term of
/// the responsible branch's probabilities against the one-hot labels.
pub fn masked_dice_loss(
    out: &DualBranchOutput,
    y: &LabelMap,
    assign: &BranchAssignment,
    epsilon: f64,
) -> Result<(f64, [f64; ZoneLabel::COUNT])> {
    masked_dice_impl(out, y, assign, epsilon, None)
}

pub fn masked_dice_loss_grad(
    out: &DualBranchOutput,
    y: &LabelMap,
    assign: &BranchAssignment,
    epsilon: f64,
) -> Result<(f64, [f64; ZoneLabel::COUNT], OutputGrad)> {
    let mut g = OutputGrad::zeros(out.shape.len(), out.recon.is_some());
    let (v, t) = masked_dice_impl(out, y, assign, epsilon, Some(&mut g))?;
    Ok((v, t, g))
}

fn unsup_impl(
    out: &DualBranchOutput,
    epsilon: f64,
    grad: Option<&mut OutputGrad>,
) -> Result<(f64, [f64; ZoneLabel::COUNT])> {
    check_epsilon(epsilon)?;
    let mut terms = [0.0; ZoneLabel::COUNT];
    let mut grad = grad;
    for zone in ZoneLabel::ALL {
        let a = out.prob(BranchId::BranchI, zone);
        let b = out.prob(BranchId::BranchII, zone);
        ensure_same_shape(a.shape(), b.shape(), "branch outputs")?;
        let (a, b) = (a.as_slice(), b.as_slice());
        terms[zone.index()] = match grad.as_deref_mut() {
            Some(g) => {
                let (t, da) = soft_dice_term_grad(a, b, epsilon);
                let (_, db) = soft_dice_term_grad(b, a, epsilon);
                for (acc, v) in g.probs[0][zone.index()].iter_mut().zip(da) {
                    *acc += v;
                }
                for (acc, v) in g.probs[1][zone.index()].iter_mut().zip(db) {
                    *acc += v;
                }
                t
            }
            None => soft_dice_term(a, b, epsilon),
        };
    }
    Ok((terms.iter().sum(), terms))
}

/// Unsupervised inter-branch consistency loss over all five classes.
pub fn unsupervised_consistency_loss(out: &DualBranchOutput, epsilon: f64) -> Result<(f64, [f64; ZoneLabel::COUNT])> {
    unsup_impl(out, epsilon, None)
}

pub fn unsupervised_consistency_loss_grad(
    out: &DualBranchOutput,
    epsilon: f64,
) -> Result<(f64, [f64; ZoneLabel::COUNT], OutputGrad)> {
    let mut g = OutputGrad::zeros(out.shape.len(), out.recon.is_some());
    let (v, t) = unsup_impl(out, epsilon, Some(&mut g))?;
    Ok((v, t, g))
}

/// Sum over the clipped cubic window of radius `r` around every voxel.
fn box_sum(shape: Shape3, data: &[f64], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let dims = shape.dims();
    let strides = [shape.height * shape.width, shape.width, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        let mut prefix = vec![0.0; n + 1];
        for start in 0..cur.len() {
            // first element of each line along `axis`
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for i in 0..n {
                prefix[i + 1] = prefix[i] + cur[start + i * stride];
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                next[start + i * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

/// Number of in-bounds voxels in each clipped window.
fn window_counts(shape: Shape3, r: usize) -> Vec<f64> {
    let per_axis = |n: usize, i: usize| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64;
    let mut out = Vec::with_capacity(shape.len());
    for z in 0..shape.depth {
        for y in 0..shape.height {
            for x in 0..shape.width {
                out.push(per_axis(shape.depth, z) * per_axis(shape.height, y) * per_axis(shape.width, x));
            }
        }
    }
    out
}

/// Mean local SSIM over all window centres, with windows clipped to the
/// volume and population (1/n) statistics inside each window. When `grad`
/// is requested it returns `dSSIM/da`.
fn ssim_impl(a: &Grid3<f64>, b: &Grid3<f64>, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    ensure_same_shape(a.shape(), b.shape(), "SSIM operands")?;
    if cfg.window == 0 || cfg.window.is_multiple_of(2) {
        return Err(Error::Config(format!("SSIM window must be odd, got {}", cfg.window)));
    }
    let shape = a.shape();
    let r = cfg.radius();
    let (av, bv) = (a.as_slice(), b.as_slice());
    let n = window_counts(shape, r);
    let sa = box_sum(shape, av, r);
    let sb = box_sum(shape, bv, r);
    let saa = box_sum(shape, &av.iter().map(|v| v * v).collect::<Vec<_>>(), r);
    let sbb = box_sum(shape, &bv.iter().map(|v| v * v).collect::<Vec<_>>(), r);
    let sab = box_sum(shape, &av.iter().zip(bv).map(|(x, y)| x * y).collect::<Vec<_>>(), r);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let total = shape.len() as f64;
    let mut sum = 0.0;
    let mut coef = want_grad.then(|| (vec![0.0; shape.len()], vec![0.0; shape.len()], vec![0.0; shape.len()]));
    for c in 0..shape.len() {
        let k = n[c];
        let (mx, my) = (sa[c] / k, sb[c] / k);
        let vx = saa[c] / k - mx * mx;
        let vy = sbb[c] / k - my * my;
        let cxy = sab[c] / k - mx * my;
        let n1 = 2.0 * mx * my + c1;
        let n2 = 2.0 * cxy + c2;
        let d1 = mx * mx + my * my + c1;
        let d2 = vx + vy + c2;
        let s = n1 * n2 / (d1 * d2);
        sum += s;
        if let Some((ca, cb, ce)) = coef.as_mut() {
            let ds_dmu = s * (2.0 * my / n1 - 2.0 * mx / d1);
            let ds_dcov = 2.0 * s / n2;
            let ds_dvar = -s / d2;
            ca[c] = (ds_dmu - 2.0 * mx * ds_dvar - my * ds_dcov) / k;
            cb[c] = 2.0 * ds_dvar / k;
            ce[c] = ds_dcov / k;
        }
    }
    let grad = coef.map(|(ca, cb, ce)| {
        let (ba, bb, be) = (box_sum(shape, &ca, r), box_sum(shape, &cb, r), box_sum(shape, &ce, r));
        (0..shape.len())
            .map(|i| (ba[i] + av[i] * bb[i] + bv[i] * be[i]) / total)
            .collect()
    });
    Ok((sum / total, grad))
}

/// Mean local SSIM of `a` against `b`.
pub fn ssim(a: &Grid3<f64>, b: &Grid3<f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(a, b, cfg, false)?.0)
}

/// Mean local SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &Grid3<f64>, b: &Grid3<f64>, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(a, b, cfg, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn recon_grids(out: &DualBranchOutput) -> Result<&[Grid3<f64>; 2]> {
    out.recon.as_ref().ok_or_else(|| {
        Error::Precondition(
            "reconstruction heads are absent in this variant; disable the reconstruction loss \
             or use a *_reco variant"
                .into(),
        )
    })
}

fn target_grid(x: &Volume) -> Grid3<f64> {
    x.data.map(|&v| f64::from(v))
}

/// `Σ_b (1 − SSIM(X̂_b, X))`.
pub fn ssim_recon_loss(out: &DualBranchOutput, x: &Volume, cfg: &SsimConfig) -> Result<f64> {
    let recon = recon_grids(out)?;
    let target = target_grid(x);
    let mut loss = 0.0;
    for r in recon {
        loss += 1.0 - ssim(r, &target, cfg)?;
    }
    Ok(loss)
}

pub fn ssim_recon_loss_grad(out: &DualBranchOutput, x: &Volume, cfg: &SsimConfig) -> Result<(f64, OutputGrad)> {
    let recon = recon_grids(out)?;
    let target = target_grid(x);
    let mut g = OutputGrad::zeros(out.shape.len(), true);
    let mut loss = 0.0;
    for (b, r) in recon.iter().enumerate() {
        let (s, d) = ssim_grad(r, &target, cfg)?;
        loss += 1.0 - s;
        g.recon.as_mut().expect("recon gradient")[b] = d.into_iter().map(|v| -v).collect();
    }
    Ok((loss, g))
}

fn total_impl(
    out: &DualBranchOutput,
    y: &LabelMap,
    x: &Volume,
    assign: &BranchAssignment,
    stage: Stage,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<OutputGrad>)> {
    ensure_same_shape(out.shape, x.shape(), "loss input volume")?;
    let n = out.shape.len();
    let w = cfg.weights;
    let mut grad = want_grad.then(|| OutputGrad::zeros(n, out.recon.is_some()));

    let (dsc, dsc_terms) = if want_grad {
        let (v, t, g) = masked_dice_loss_grad(out, y, assign, cfg.epsilon)?;
        grad.as_mut().expect("grad").add_scaled(&g, w.dsc);
        (v, t)
    } else {
        masked_dice_loss(out, y, assign, cfg.epsilon)?
    };

    let recon = match (&out.recon, want_grad) {
        (None, _) => 0.0,
        (Some(_), true) => {
            let (v, g) = ssim_recon_loss_grad(out, x, &cfg.ssim)?;
            grad.as_mut().expect("grad").add_scaled(&g, w.recon);
            v
        }
        (Some(_), false) => ssim_recon_loss(out, x, &cfg.ssim)?,
    };

    let (unsup, unsup_terms) = match (stage, want_grad) {
        (Stage::I, _) => (0.0, [0.0; ZoneLabel::COUNT]),
        (Stage::II, true) => {
            let (v, t, g) = unsupervised_consistency_loss_grad(out, cfg.epsilon)?;
            grad.as_mut().expect("grad").add_scaled(&g, w.unsup);
            (v, t)
        }
        (Stage::II, false) => unsupervised_consistency_loss(out, cfg.epsilon)?,
    };

    let supervised_total = w.dsc * dsc + w.recon * recon;
    let breakdown = LossBreakdown {
        dsc,
        recon,
        unsup,
        supervised_total,
        grand_total: supervised_total + w.unsup * unsup,
        per_zone_dsc_terms: dsc_terms,
        per_zone_unsup_terms: unsup_terms,
    };
    Ok((breakdown, grad))
}

/// Supervised loss (Stage I) or supervised plus consistency loss (Stage II).
pub fn total_loss(
    out: &DualBranchOutput,
    y: &LabelMap,
    x: &Volume,
    assign: &BranchAssignment,
    stage: Stage,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(total_impl(out, y, x, assign, stage, cfg, false)?.0)
}

/// [`total_loss`] together with the gradient of `grand_total`.
pub fn total_loss_grad(
    out: &DualBranchOutput,
    y: &LabelMap,
    x: &Volume,
    assign: &BranchAssignment,
    stage: Stage,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrad)> {
    let (b, g) = total_impl(out, y, x, assign, stage, cfg, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Measures the consistency loss only (used for monitoring in either stage).
pub fn consistency_only(out: &DualBranchOutput, cfg: &LossConfig) -> Result<f64> {
    Ok(unsupervised_consistency_loss(out, cfg.epsilon)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use proptest::prelude::*;

    #[test]
    fn dice_term_worked_examples() {
        // p = (1,1,0,0), y = (1,0,0,0): 1 − 2/(2+1)
        let t = soft_dice_term(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 0.0);
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
        // p′ = (1,0), p″ = (0.5,0.5): 1 − 1/1.5
        let u = soft_dice_term(&[1.0, 0.0], &[0.5, 0.5], 0.0);
        assert!((u - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(soft_dice_term(&[1.0, 0.0], &[0.0, 1.0], 1e-5), 1.0);
    }

    #[test]
    fn box_sum_matches_direct_loops() {
        let s = Shape3::new(3, 4, 5);
        let data: Vec<f64> = (0..s.len()).map(|i| (i * 7 % 11) as f64).collect();
        let fast = box_sum(s, &data, 1);
        for c in 0..s.len() {
            let (z, y, x) = s.coords(c);
            let mut direct = 0.0;
            for i in 0..s.len() {
                let (a, b, d) = s.coords(i);
                if a.abs_diff(z) <= 1 && b.abs_diff(y) <= 1 && d.abs_diff(x) <= 1 {
                    direct += data[i];
                }
            }
            assert!((fast[c] - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let s = Shape3::new(5, 6, 7);
        let g = Grid3::from_fn(s, |z, y, x| ((z * 3 + y * 5 + x) % 7) as f64 / 7.0);
        assert!((ssim(&g, &g, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_requires_heads() {
        let s = Shape3::new(2, 2, 2);
        let out = DualBranchOutput {
            shape: s,
            spacing: Spacing::ISOTROPIC,
            probs: std::array::from_fn(|_| std::array::from_fn(|_| Grid3::filled(s, 0.2))),
            recon: None,
        };
        let x = Volume::new(Grid3::filled(s, 0.5), Spacing::ISOTROPIC);
        let err = ssim_recon_loss(&out, &x, &SsimConfig::default()).unwrap_err().to_string();
        assert!(err.contains("disable"));
    }

    proptest! {
        #[test]
        fn consistency_interpolation_is_monotone(
            a in prop::collection::vec(0.0f64..1.0, 27),
            b in prop::collection::vec(0.0f64..1.0, 27),
        ) {
            let mut last = soft_dice_term(&a, &b, DEFAULT_EPSILON);
            for k in 1..=10 {
                let t = k as f64 / 10.0;
                let p: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect();
                let v = soft_dice_term(&p, &b, DEFAULT_EPSILON);
                prop_assert!(v <= last + 1e-12);
                last = v;
            }
        }

        #[test]
        fn dice_terms_stay_in_unit_interval(
            a in prop::collection::vec(0.0f64..1.0, 1..40),
            seed in any::<u64>(),
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 1) as f64).collect();
            let t = soft_dice_term(&a, &b, DEFAULT_EPSILON);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert_eq!(soft_dice_term(&a, &b, DEFAULT_EPSILON).to_bits(), soft_dice_term(&b, &a, DEFAULT_EPSILON).to_bits());
        }
    }
}

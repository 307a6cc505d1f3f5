//! Turning a dual-branch prediction into a topologically clean label map:
//! branch fusion, hard labelling, largest-component retention per zone and
//! distance-based hole filling.

use crate::error::{Error, Result};
use crate::morphology::{connected_components, squared_edt};
use crate::nets::{BranchAssignment, DualBranchOutput};
use crate::volume::{Grid3, LabelMap, PartialLabelMap, Spacing, ZoneLabel};

/// Per-class probabilities after fusion; each voxel's five values sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub probs: [Grid3<f64>; ZoneLabel::COUNT],
    pub spacing: Spacing,
}

/// Takes each class from its responsible branch and renormalises per voxel.
/// Voxels whose collected values sum to zero become uniform.
pub fn fuse_branches(out: &DualBranchOutput, assign: &BranchAssignment) -> FusedPrediction {
    let mut probs = ZoneLabel::ALL.map(|z| out.prob(assign.branch_for(z), z).clone());
    for i in 0..out.shape.len() {
        let sum: f64 = probs.iter().map(|g| g[i]).sum();
        for g in probs.iter_mut() {
            g[i] = if sum > 0.0 { g[i] / sum } else { 1.0 / ZoneLabel::COUNT as f64 };
        }
    }
    FusedPrediction {
        probs,
        spacing: out.spacing,
    }
}

/// Most probable class per voxel; ties go to the earlier class in
/// Background, PZ, TZ, DPU, AFS order.
pub fn argmax_label(fp: &FusedPrediction) -> LabelMap {
    let shape = fp.probs[0].shape();
    let labels = Grid3::from_vec(
        shape,
        (0..shape.len())
            .map(|i| {
                let mut best = ZoneLabel::Background;
                for z in ZoneLabel::ALL {
                    if fp.probs[z.index()][i] > fp.probs[best.index()][i] {
                        best = z;
                    }
                }
                best
            })
            .collect(),
    )
    .expect("shape of fused grids");
    LabelMap::new(labels, fp.spacing)
}

/// Keeps only the largest 6-connected component of every foreground zone;
/// voxels of the other components become unassigned. Equal sizes are
/// resolved in favour of the component whose first voxel in raster order
/// comes first. Background is left untouched.
pub fn largest_component_filter(lm: &LabelMap) -> PartialLabelMap {
    let mut out = lm.labels.map(|&l| Some(l));
    for zone in ZoneLabel::FOREGROUND {
        let comps = connected_components(&lm.mask(zone));
        let Some(keep) = comps.largest() else { continue };
        for (i, c) in comps.labels.as_slice().iter().enumerate() {
            if matches!(c, Some(id) if *id != keep) {
                out[i] = None;
            }
        }
    }
    out
}

/// Assigns every unassigned voxel the class with the smallest signed
/// distance (negative inside a class region, positive outside, millimetres).
/// An unassigned voxel lies outside every region, so this is the class of
/// the nearest assigned voxel; ties follow the fixed class order.
pub fn edt_hole_fill(partial: &PartialLabelMap, spacing: Spacing) -> Result<LabelMap> {
    let shape = partial.shape();
    if partial.as_slice().iter().all(Option::is_none) {
        return Err(Error::Precondition("hole filling needs at least one assigned voxel".into()));
    }
    if partial.as_slice().iter().all(Option::is_some) {
        return Ok(LabelMap::new(partial.map(|l| l.expect("assigned")), spacing));
    }
    let dist: Vec<Option<Grid3<f64>>> = ZoneLabel::ALL
        .iter()
        .map(|&z| {
            let mask = partial.map(|l| *l == Some(z));
            mask.as_slice().iter().any(|&m| m).then(|| squared_edt(&mask, spacing))
        })
        .collect();
    let labels = Grid3::from_vec(
        shape,
        partial
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.unwrap_or_else(|| {
                    let mut best: Option<(ZoneLabel, f64)> = None;
                    for z in ZoneLabel::ALL {
                        if let Some(d) = &dist[z.index()] {
                            if best.is_none_or(|(_, b)| d[i] < b) {
                                best = Some((z, d[i]));
                            }
                        }
                    }
                    best.expect("some class present").0
                })
            })
            .collect(),
    )?;
    Ok(LabelMap::new(labels, spacing))
}

/// Nearest-class filling on a voxel grid can leave small fragments of a
/// zone cut off from its retained component (digitised Voronoi cells are not
/// always connected). Each such fragment joins the class it shares the most
/// faces with, ties to the earlier class, until every foreground zone is a
/// single component. Every merge lowers the total component count, so the
/// loop terminates.
pub fn merge_stray_fragments(lm: &mut LabelMap) {
    let shape = lm.shape();
    loop {
        let mut changed = false;
        for zone in ZoneLabel::FOREGROUND {
            let comps = connected_components(&lm.mask(zone));
            let Some(keep) = comps.largest() else { continue };
            if comps.count() < 2 {
                continue;
            }
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); comps.count()];
            for (i, c) in comps.labels.as_slice().iter().enumerate() {
                if let Some(id) = c {
                    members[*id as usize].push(i);
                }
            }
            for (id, voxels) in members.iter().enumerate() {
                if id as u32 == keep {
                    continue;
                }
                let mut contacts = [0usize; ZoneLabel::COUNT];
                for &i in voxels {
                    for j in shape.face_neighbors(i) {
                        let l = lm.labels[j];
                        if l != zone {
                            contacts[l.index()] += 1;
                        }
                    }
                }
                let target = ZoneLabel::ALL
                    .into_iter()
                    .filter(|z| *z != zone)
                    .fold(None::<ZoneLabel>, |best, z| match best {
                        Some(b) if contacts[b.index()] >= contacts[z.index()] => Some(b),
                        _ => Some(z),
                    })
                    .expect("four other classes");
                for &i in voxels {
                    lm.labels[i] = target;
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// fuse → argmax → largest component per zone → hole filling → fragment merge.
pub fn postprocess_pipeline(out: &DualBranchOutput, assign: &BranchAssignment) -> Result<LabelMap> {
    clean_labels(&argmax_label(&fuse_branches(out, assign)))
}

/// Same cleanup applied to an existing hard label map.
pub fn clean_labels(lm: &LabelMap) -> Result<LabelMap> {
    let mut out = edt_hole_fill(&largest_component_filter(lm), lm.spacing)?;
    merge_stray_fragments(&mut out);
    Ok(out)
}

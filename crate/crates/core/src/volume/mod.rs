//! Volumetric data types, zone labels, and intensity preprocessing.

mod grid;
pub mod io;
pub(crate) mod split;

pub use grid::{Grid3, Shape3, Spacing};
pub(crate) use grid::ensure_same_shape;
pub use split::DatasetSplit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MRI-like scalar image with its voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Grid3<f32>,
    pub spacing: Spacing,
}

impl Volume {
    pub fn new(data: Grid3<f32>, spacing: Spacing) -> Self {
        Self { data, spacing }
    }

    pub fn shape(&self) -> Shape3 {
        self.data.shape()
    }
}

/// The five mutually exclusive classes. Discriminants double as channel
/// indices and as the on-disk label values; the declaration order is also
/// the tie-break order used wherever two classes score equally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ZoneLabel {
    Background = 0,
    PZ = 1,
    TZ = 2,
    DPU = 3,
    AFS = 4,
}

impl ZoneLabel {
    pub const COUNT: usize = 5;
    pub const ALL: [ZoneLabel; 5] = [
        ZoneLabel::Background,
        ZoneLabel::PZ,
        ZoneLabel::TZ,
        ZoneLabel::DPU,
        ZoneLabel::AFS,
    ];
    pub const FOREGROUND: [ZoneLabel; 4] =
        [ZoneLabel::PZ, ZoneLabel::TZ, ZoneLabel::DPU, ZoneLabel::AFS];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ZoneLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ZoneLabel::Background => "Background",
            ZoneLabel::PZ => "PZ",
            ZoneLabel::TZ => "TZ",
            ZoneLabel::DPU => "DPU",
            ZoneLabel::AFS => "AFS",
        }
    }
}

impl std::fmt::Display for ZoneLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ZoneLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|z| z.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown zone {s:?}")))
    }
}

/// Ground-truth or predicted segmentation: one zone per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub labels: Grid3<ZoneLabel>,
    pub spacing: Spacing,
}

impl LabelMap {
    pub fn new(labels: Grid3<ZoneLabel>, spacing: Spacing) -> Self {
        Self { labels, spacing }
    }

    pub fn shape(&self) -> Shape3 {
        self.labels.shape()
    }

    pub fn count(&self, zone: ZoneLabel) -> usize {
        self.labels.as_slice().iter().filter(|&&z| z == zone).count()
    }

    /// Binary membership grid for one zone.
    pub fn mask(&self, zone: ZoneLabel) -> Grid3<bool> {
        self.labels.map(|&z| z == zone)
    }

    pub fn from_raw(shape: Shape3, raw: &[u8], spacing: Spacing) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|&v| {
                ZoneLabel::from_index(v as usize)
                    .ok_or_else(|| Error::Format(format!("label value {v} outside 0..=4")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(Grid3::from_vec(shape, labels)?, spacing))
    }

    pub fn to_raw(&self) -> Vec<u8> {
        self.labels.as_slice().iter().map(|&z| z as u8).collect()
    }
}

/// Label map in which some voxels may carry no label (after component filtering).
pub type PartialLabelMap = Grid3<Option<ZoneLabel>>;

/// Per-class binary grids `y[z][i] ∈ {0, 1}`, indexed by [`ZoneLabel::index`].
pub fn one_hot(labels: &LabelMap) -> [Grid3<f64>; ZoneLabel::COUNT] {
    ZoneLabel::ALL.map(|zone| labels.labels.map(|&z| if z == zone { 1.0 } else { 0.0 }))
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of an ascending-sorted slice.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let a = sorted[lo] as f64;
    let b = sorted[hi] as f64;
    a + (b - a) * frac
}

/// Result of [`preprocess`]; `degenerate` is set when the 1st and 99th
/// percentiles coincide and the output was forced to zeros.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub volume: Volume,
    pub p1: f64,
    pub p99: f64,
    pub degenerate: bool,
}

/// Clip to the per-volume 1st/99th percentiles and rescale to `[0, 1]`.
pub fn preprocess(v: &Volume) -> Result<Preprocessed> {
    if v.data.is_empty() {
        return Err(Error::Precondition("cannot preprocess an empty volume".into()));
    }
    if v.data.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("volume contains non-finite intensities".into()));
    }
    let mut sorted = v.data.as_slice().to_vec();
    sorted.sort_by(f32::total_cmp);
    let p1 = percentile_sorted(&sorted, 1.0);
    let p99 = percentile_sorted(&sorted, 99.0);
    let range = p99 - p1;
    if !(range > 0.0) {
        log::warn!("degenerate volume: 1st and 99th percentiles are both {p1}; emitting zeros");
        return Ok(Preprocessed {
            volume: Volume::new(Grid3::filled(v.shape(), 0.0), v.spacing),
            p1,
            p99,
            degenerate: true,
        });
    }
    let data = v.data.map(|&x| {
        let c = (x as f64).clamp(p1, p99);
        (((c - p1) / range) as f32).clamp(0.0, 1.0)
    });
    Ok(Preprocessed {
        volume: Volume::new(data, v.spacing),
        p1,
        p99,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(shape: Shape3, data: Vec<f32>) -> Volume {
        Volume::new(Grid3::from_vec(shape, data).unwrap(), Spacing::ISOTROPIC)
    }

    #[test]
    fn constant_volume_maps_to_zeros() {
        let v = vol(Shape3::new(2, 3, 4), vec![5.0; 24]);
        let out = preprocess(&v).unwrap();
        assert!(out.degenerate);
        assert!(out.volume.data.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_span_volume_is_unchanged() {
        // 0 and 1 each fill more than 1% of voxels so p1 = 0 and p99 = 1.
        let mut data = vec![0.0f32; 10];
        data.extend((1..80).map(|i| i as f32 / 80.0));
        data.extend(vec![1.0f32; 11]);
        let v = vol(Shape3::new(1, 10, 10), data.clone());
        let out = preprocess(&v).unwrap();
        assert_eq!(out.p1, 0.0);
        assert_eq!(out.p99, 1.0);
        assert_eq!(out.volume.data.as_slice(), &data[..]);
    }

    #[test]
    fn ramp_clipped_at_sorted_percentiles() {
        let data: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        let v = vol(Shape3::new(10, 10, 10), data.clone());
        let out = preprocess(&v).unwrap();
        // Independent oracle: rank = q/100 * (n - 1) on the sorted sample.
        let oracle = |q: f64| {
            let rank = q / 100.0 * 999.0;
            let lo = rank.floor();
            (lo + 1.0) + (rank - lo)
        };
        let (p1, p99) = (oracle(1.0), oracle(99.0));
        assert!((out.p1 - 10.99).abs() < 1e-9 && (out.p1 - p1).abs() < 1e-9);
        assert!((out.p99 - 990.01).abs() < 1e-9 && (out.p99 - p99).abs() < 1e-9);
        for (raw, got) in data.iter().zip(out.volume.data.as_slice()) {
            let expect = ((*raw as f64).clamp(p1, p99) - p1) / (p99 - p1);
            assert!((*got as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_of_background_and_single_voxel() {
        let shape = Shape3::new(2, 2, 2);
        let mut lm = LabelMap::new(Grid3::filled(shape, ZoneLabel::Background), Spacing::ISOTROPIC);
        let oh = one_hot(&lm);
        assert!(oh[0].as_slice().iter().all(|&v| v == 1.0));
        assert!(oh[1..].iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
        *lm.labels.get_mut(0, 0, 0) = ZoneLabel::PZ;
        let oh = one_hot(&lm);
        assert_eq!(oh[ZoneLabel::PZ.index()].as_slice().iter().sum::<f64>(), 1.0);
        assert_eq!(*oh[ZoneLabel::PZ.index()].get(0, 0, 0), 1.0);
    }

    #[test]
    fn zone_names_parse() {
        for z in ZoneLabel::ALL {
            assert_eq!(z.name().parse::<ZoneLabel>().unwrap(), z);
        }
        assert!("prostate".parse::<ZoneLabel>().is_err());
    }

    fn label_strategy() -> impl Strategy<Value = LabelMap> {
        prop::collection::vec(0u8..5, 64).prop_map(|raw| {
            LabelMap::from_raw(Shape3::new(4, 4, 4), &raw, Spacing::ISOTROPIC).unwrap()
        })
    }

    proptest! {
        #[test]
        fn one_hot_is_a_partition_and_argmax_inverts(lm in label_strategy()) {
            let oh = one_hot(&lm);
            for i in 0..lm.labels.len() {
                let sum: f64 = oh.iter().map(|g| g[i]).sum();
                prop_assert_eq!(sum, 1.0);
                let arg = (0..5).find(|&c| oh[c][i] == 1.0).unwrap();
                prop_assert_eq!(ZoneLabel::from_index(arg).unwrap(), lm.labels[i]);
            }
        }

        #[test]
        fn preprocess_output_in_unit_range(data in prop::collection::vec(-1e6f32..1e6, 27)) {
            let out = preprocess(&vol(Shape3::new(3, 3, 3), data)).unwrap();
            prop_assert!(out.volume.data.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn preprocess_idempotent_when_percentiles_are_unit(inner in prop::collection::vec(100f32..900.0, 190)) {
            // Five copies of each extreme pin the 1st/99th percentiles to min and max.
            let mut data = inner;
            data.extend([0.0f32; 5]);
            data.extend([1000.0f32; 5]);
            let once = preprocess(&vol(Shape3::new(2, 10, 10), data)).unwrap();
            let mut sorted = once.volume.data.as_slice().to_vec();
            sorted.sort_by(f32::total_cmp);
            prop_assert_eq!(percentile_sorted(&sorted, 1.0), 0.0);
            prop_assert_eq!(percentile_sorted(&sorted, 99.0), 1.0);
            let twice = preprocess(&once.volume).unwrap();
            prop_assert_eq!(twice.volume.data.as_slice(), once.volume.data.as_slice());
        }
    }
}

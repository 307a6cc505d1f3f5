//! Deterministic synthetic prostate-like phantoms.
//!
//! Zones are built from nested, angularly perturbed superellipsoids so that
//! the zonal topology holds by construction:
//!
//! * TZ is an anterior superellipsoid, PZ a posterior one with TZ carved out,
//!   leaving a crescent that cups TZ.
//! * DPU is a straight tube along the depth axis, intersected with the
//!   erosion of PZ, so every DPU voxel is surrounded by PZ.
//! * AFS is an anterior slab on the TZ surface that keeps one voxel away
//!   from PZ, so it only touches TZ and background.
//!
//! Each zone's scale is chosen from the sorted per-voxel radial coordinate,
//! which hits the requested volume fraction to within one voxel before the
//! largest-component clean-up.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetDir;
use crate::error::{Error, Result};
use crate::morphology::{boundary, connected_components};
use crate::volume::split::apportion;
use crate::volume::{DatasetSplit, Grid3, LabelMap, Shape3, Spacing, Volume, ZoneLabel};

/// Split ratio for train / validation / test.
pub const SPLIT_RATIO: [usize; 3] = [58, 20, 20];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneFractions {
    pub pz: f64,
    pub tz: f64,
    pub dpu: f64,
    pub afs: f64,
}

impl Default for ZoneFractions {
    fn default() -> Self {
        Self {
            pz: 0.07,
            tz: 0.10,
            dpu: 0.002,
            afs: 0.012,
        }
    }
}

impl ZoneFractions {
    pub fn get(&self, zone: ZoneLabel) -> f64 {
        match zone {
            ZoneLabel::PZ => self.pz,
            ZoneLabel::TZ => self.tz,
            ZoneLabel::DPU => self.dpu,
            ZoneLabel::AFS => self.afs,
            ZoneLabel::Background => 1.0 - self.foreground(),
        }
    }

    pub fn foreground(&self) -> f64 {
        self.pz + self.tz + self.dpu + self.afs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub seed: u64,
    pub zone_fractions: ZoneFractions,
    /// Standard deviation of additive Gaussian noise, relative to the
    /// intensity scale of 1000 units.
    pub noise_level: f64,
    /// Gaussian blur sigma in voxels applied to the piecewise-constant image.
    pub boundary_blur: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: Shape3::new(32, 64, 64),
            seed: 7,
            zone_fractions: ZoneFractions::default(),
            noise_level: 0.04,
            boundary_blur: 0.5,
        }
    }
}

/// Mean raw intensity per zone, indexed by [`ZoneLabel::index`].
pub const ZONE_INTENSITY: [f32; 5] = [120.0, 700.0, 470.0, 920.0, 280.0];
const INTENSITY_SCALE: f64 = 1000.0;
const PERTURBATION: f64 = 0.08;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let f = &self.zone_fractions;
        for zone in ZoneLabel::FOREGROUND {
            let v = f.get(zone);
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Generation(format!("{zone} fraction {v} must lie in (0, 1)")));
            }
        }
        if f.foreground() >= 1.0 {
            return Err(Error::Generation(format!(
                "foreground fractions sum to {} (must be < 1)",
                f.foreground()
            )));
        }
        if !(self.noise_level >= 0.0) || !(self.boundary_blur >= 0.0) {
            return Err(Error::Generation("noise_level and boundary_blur must be >= 0".into()));
        }
        if self.shape.is_empty() {
            return Err(Error::Generation(format!("shape {} has a zero extent", self.shape)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_shape(&self, shape: Shape3) -> Self {
        Self {
            shape,
            ..self.clone()
        }
    }
}

/// Star-shaped superellipsoid with a smooth angular radius perturbation.
struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    exponent: f64,
    harmonics: [(f64, f64); 3],
    polar: (f64, f64),
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, center: [f64; 3], axes: [f64; 3], exponent: f64) -> Self {
        let mut harmonic = |j: f64| (rng.gen_range(-1.0..1.0) / j, rng.gen_range(0.0..std::f64::consts::TAU));
        let harmonics = [harmonic(1.0), harmonic(2.0), harmonic(3.0)];
        let polar = (rng.gen_range(-0.5..0.5), rng.gen_range(0.0..std::f64::consts::TAU));
        Self {
            center,
            axes,
            exponent,
            harmonics,
            polar,
        }
    }

    /// Scale-free radial coordinate; the voxel lies inside the blob scaled by
    /// `s` iff `radius(p) <= s`.
    fn radius(&self, p: [f64; 3]) -> f64 {
        let d: Vec<f64> = (0..3).map(|k| (p[k] - self.center[k]) / self.axes[k]).collect();
        let rho = d.iter().map(|v| v.abs().powf(self.exponent)).sum::<f64>().powf(1.0 / self.exponent);
        if rho == 0.0 {
            return 0.0;
        }
        let azimuth = d[1].atan2(d[2]);
        let elevation = (d[0] / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).asin();
        let mut pert: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(j, (a, phase))| a * ((j as f64 + 1.0) * azimuth + phase).cos())
            .sum();
        pert += self.polar.0 * (2.0 * elevation + self.polar.1).cos();
        rho / (1.0 + PERTURBATION * pert / 2.0)
    }
}

fn voxel_center(shape: Shape3, i: usize) -> [f64; 3] {
    let (z, y, x) = shape.coords(i);
    [z as f64, y as f64, x as f64]
}

/// Marks the `target` eligible voxels with smallest `key` (ties at the
/// threshold are all included). Returns the chosen mask.
fn select_smallest(keys: &[Option<f64>], target: usize) -> Vec<bool> {
    let mut sorted: Vec<f64> = keys.iter().flatten().copied().collect();
    if sorted.is_empty() || target == 0 {
        return vec![false; keys.len()];
    }
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(target - 1).min(sorted.len() - 1)];
    keys.iter().map(|k| matches!(k, Some(v) if *v <= threshold)).collect()
}

fn keep_largest(mask: &mut [bool], shape: Shape3) {
    let grid = Grid3::from_vec(shape, mask.to_vec()).expect("shape");
    let comps = connected_components(&grid);
    if let Some(best) = comps.largest() {
        for (m, l) in mask.iter_mut().zip(comps.labels.as_slice()) {
            *m = *l == Some(best);
        }
    }
}

fn target_count(shape: Shape3, fraction: f64, zone: ZoneLabel) -> Result<usize> {
    let n = (fraction * shape.len() as f64).round() as usize;
    if n == 0 {
        return Err(Error::Generation(format!(
            "{zone} fraction {fraction} rounds to zero voxels at shape {shape}"
        )));
    }
    Ok(n)
}

/// Generates one `(raw intensity volume, label map)` pair. Pure in `spec`.
pub fn generate_case(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let shape = spec.shape;
    let [d, h, w] = shape.dims().map(|v| v as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = |scale: f64| 1.0 + rng.gen_range(-scale..scale);
    let center = [
        (d - 1.0) / 2.0 * jitter(0.04),
        (h - 1.0) / 2.0 * jitter(0.04),
        (w - 1.0) / 2.0 * jitter(0.04),
    ];
    let tz_center = [center[0], center[1] - 0.06 * h, center[2]];
    let tz_axes = [0.30 * d * jitter(0.08), 0.20 * h * jitter(0.08), 0.28 * w * jitter(0.08)];
    let pz_center = [center[0], center[1] + 0.09 * h, center[2]];
    let pz_axes = [0.32 * d * jitter(0.08), 0.24 * h * jitter(0.08), 0.30 * w * jitter(0.08)];
    let afs_axes = [0.22 * d * jitter(0.08), 0.08 * h * jitter(0.08), 0.20 * w * jitter(0.08)];
    let tz_blob = Blob::random(&mut rng, tz_center, tz_axes, 2.5);
    let pz_blob = Blob::random(&mut rng, pz_center, pz_axes, 2.0);

    let n = shape.len();
    let fr = &spec.zone_fractions;
    let mut labels = vec![ZoneLabel::Background; n];

    // TZ
    let keys: Vec<Option<f64>> = (0..n).map(|i| Some(tz_blob.radius(voxel_center(shape, i)))).collect();
    let mut tz = select_smallest(&keys, target_count(shape, fr.tz, ZoneLabel::TZ)?);
    keep_largest(&mut tz, shape);

    // PZ: posterior blob minus TZ
    let keys: Vec<Option<f64>> = (0..n)
        .map(|i| (!tz[i]).then(|| pz_blob.radius(voxel_center(shape, i))))
        .collect();
    let mut pz = select_smallest(&keys, target_count(shape, fr.pz, ZoneLabel::PZ)?);
    keep_largest(&mut pz, shape);

    // DPU: z-aligned tube through the thickest posterior PZ band at the centre column.
    let pz_grid = Grid3::from_vec(shape, pz.clone())?;
    let pz_edge = boundary(&pz_grid);
    let interior: Vec<bool> = (0..n).map(|i| pz[i] && !pz_edge[i]).collect();
    let (cz, cx) = (center[0].round() as usize, center[2].round().min(w - 1.0) as usize);
    let axis_y = posterior_run_midpoint(&pz, shape, cz.min(shape.depth - 1), cx)
        .ok_or_else(|| Error::Generation("DPU placement failed: PZ absent at the central column".into()))?;
    let radius = (0.035 * h.min(w)).max(1.0);
    let keys: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let (z, y, x) = shape.coords(i);
            let r2 = (y as f64 - axis_y).powi(2) + (x as f64 - cx as f64).powi(2);
            (interior[i] && r2 <= radius * radius).then(|| (z as f64 - center[0]).abs())
        })
        .collect();
    let dpu_target = target_count(shape, fr.dpu, ZoneLabel::DPU)?;
    let mut dpu = select_smallest(&keys, dpu_target);
    keep_largest(&mut dpu, shape);

    // AFS: anterior slab on the TZ surface, kept off PZ by one voxel.
    let afs_center = [tz_center[0], tz_center[1] - 0.85 * tz_axes[1], tz_center[2]];
    let afs_blob = Blob::random(&mut rng, afs_center, afs_axes, 2.0);
    let keys: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let near_pz = pz[i] || shape.face_neighbors(i).any(|j| pz[j]);
            (!tz[i] && !near_pz).then(|| afs_blob.radius(voxel_center(shape, i)))
        })
        .collect();
    let mut afs = select_smallest(&keys, target_count(shape, fr.afs, ZoneLabel::AFS)?);
    keep_largest(&mut afs, shape);

    for i in 0..n {
        labels[i] = if dpu[i] {
            ZoneLabel::DPU
        } else if pz[i] {
            ZoneLabel::PZ
        } else if tz[i] {
            ZoneLabel::TZ
        } else if afs[i] {
            ZoneLabel::AFS
        } else {
            ZoneLabel::Background
        };
    }
    let label_map = LabelMap::new(Grid3::from_vec(shape, labels)?, Spacing::ISOTROPIC);

    for zone in ZoneLabel::FOREGROUND {
        let target = fr.get(zone) * n as f64;
        let got = label_map.count(zone) as f64;
        if (got - target).abs() > 0.5 * target {
            return Err(Error::Generation(format!(
                "{zone} fraction {:.5} unachievable at shape {shape}: produced {got} voxels for a target of {target:.0}",
                fr.get(zone)
            )));
        }
    }
    let violations = audit_topology(&label_map);
    if let Some(v) = violations.first() {
        return Err(Error::Generation(format!("topology constraint violated: {v}")));
    }

    let image = render_intensities(&label_map, spec, &mut rng)?;
    Ok((image, label_map))
}

/// Midpoint (in y) of the posterior-most PZ run in column `(z, ·, x)`.
fn posterior_run_midpoint(pz: &[bool], shape: Shape3, z: usize, x: usize) -> Option<f64> {
    let mut end = None;
    for y in (0..shape.height).rev() {
        let inside = pz[shape.index(z, y, x)];
        match (inside, end) {
            (true, None) => end = Some(y),
            (false, Some(e)) => return Some((y + 1 + e) as f64 / 2.0),
            _ => {}
        }
    }
    end.map(|e| e as f64 / 2.0)
}

fn render_intensities(labels: &LabelMap, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let shape = labels.shape();
    let mut data: Vec<f32> = labels
        .labels
        .as_slice()
        .iter()
        .map(|z| ZONE_INTENSITY[z.index()])
        .collect();
    if spec.boundary_blur > 0.0 {
        gaussian_blur(&mut data, shape, spec.boundary_blur);
    }
    if spec.noise_level > 0.0 {
        let noise = Normal::new(0.0, spec.noise_level * INTENSITY_SCALE)
            .map_err(|e| Error::Generation(format!("noise distribution: {e}")))?;
        for v in &mut data {
            *v += noise.sample(rng) as f32;
        }
    }
    Ok(Volume::new(Grid3::from_vec(shape, data)?, labels.spacing))
}

/// Separable Gaussian blur, kernel truncated at 3 sigma, replicate edges.
fn gaussian_blur(data: &mut [f32], shape: Shape3, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let dims = shape.dims();
    let strides = [shape.height * shape.width, shape.width, 1];
    let mut buf = vec![0.0f32; data.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        for (i, out) in buf.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i as isize - pos * strides[axis] as isize;
            let mut acc = 0.0f64;
            for (t, k) in kernel.iter().enumerate() {
                let p = (pos + t as isize - radius).clamp(0, len - 1);
                acc += k * data[(base + p * strides[axis] as isize) as usize] as f64;
            }
            *out = acc as f32;
        }
        data.copy_from_slice(&buf);
    }
}

/// A broken topology rule found by [`audit_topology`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyViolation {
    Touches { zone: ZoneLabel, neighbor: ZoneLabel },
    Fragmented { zone: ZoneLabel, components: usize },
    Missing(ZoneLabel),
}

impl std::fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyViolation::Touches { zone, neighbor } => write!(f, "{zone} is face-adjacent to {neighbor}"),
            TopologyViolation::Fragmented { zone, components } => {
                write!(f, "{zone} has {components} connected components")
            }
            TopologyViolation::Missing(zone) => write!(f, "{zone} is absent"),
        }
    }
}

/// Exhaustive 6-neighbourhood scan: DPU may only touch PZ, AFS only TZ and
/// background; every class present; every foreground zone one component.
pub fn audit_topology(labels: &LabelMap) -> Vec<TopologyViolation> {
    let shape = labels.shape();
    let g = &labels.labels;
    let mut out = Vec::new();
    let allowed = |zone: ZoneLabel, other: ZoneLabel| match zone {
        ZoneLabel::DPU => matches!(other, ZoneLabel::PZ | ZoneLabel::DPU),
        ZoneLabel::AFS => matches!(other, ZoneLabel::AFS | ZoneLabel::TZ | ZoneLabel::Background),
        _ => true,
    };
    for zone in [ZoneLabel::DPU, ZoneLabel::AFS] {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..shape.len() {
            if g[i] != zone {
                continue;
            }
            // DPU must be enclosed, so the volume border counts as background.
            if zone == ZoneLabel::DPU && shape.face_neighbor_count(i) < 6 {
                seen.insert(ZoneLabel::Background);
            }
            for j in shape.face_neighbors(i) {
                if !allowed(zone, g[j]) {
                    seen.insert(g[j]);
                }
            }
        }
        out.extend(seen.into_iter().map(|neighbor| TopologyViolation::Touches { zone, neighbor }));
    }
    for zone in ZoneLabel::ALL {
        let n = labels.count(zone);
        if n == 0 {
            out.push(TopologyViolation::Missing(zone));
        } else if zone != ZoneLabel::Background {
            let c = connected_components(&labels.mask(zone)).count();
            if c != 1 {
                out.push(TopologyViolation::Fragmented { zone, components: c });
            }
        }
    }
    out
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Writes `n_cases` phantoms (case seed = base seed + index) plus `split.json`.
pub fn generate_dataset(n_cases: usize, base_spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetSplit> {
    if n_cases < 5 {
        return Err(Error::Precondition(format!(
            "generate_dataset needs at least 5 cases, got {n_cases}"
        )));
    }
    base_spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = DatasetDir::new(out_dir);
    let ids: Vec<String> = (0..n_cases).map(case_id).collect();
    for (i, id) in ids.iter().enumerate() {
        let spec = base_spec.with_seed(base_spec.seed.wrapping_add(i as u64));
        let (image, labels) = generate_case(&spec)?;
        dataset.write_case(id, &image, &labels)?;
    }
    let counts = apportion(n_cases, &SPLIT_RATIO);
    let split = DatasetSplit::new(
        ids[..counts[0]].to_vec(),
        ids[counts[0]..counts[0] + counts[1]].to_vec(),
        ids[counts[0] + counts[1]..].to_vec(),
    )?;
    split.save(&dataset.split_path())?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: Shape3::new(24, 48, 48),
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_seed_7_passes_adjacency_audit() {
        let (_, labels) = generate_case(&PhantomSpec::default()).unwrap();
        // Independent exhaustive neighbour scan.
        let s = labels.shape();
        for i in 0..s.len() {
            let z = labels.labels[i];
            let (a, b, c) = s.coords(i);
            let offsets = [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
            for (dz, dy, dx) in offsets {
                let (nz, ny, nx) = (a as i64 + dz, b as i64 + dy, c as i64 + dx);
                let inside = nz >= 0 && ny >= 0 && nx >= 0
                    && (nz as usize) < s.depth && (ny as usize) < s.height && (nx as usize) < s.width;
                let n = if inside {
                    *labels.labels.get(nz as usize, ny as usize, nx as usize)
                } else {
                    ZoneLabel::Background
                };
                if z == ZoneLabel::AFS {
                    assert!(matches!(n, ZoneLabel::AFS | ZoneLabel::TZ | ZoneLabel::Background));
                }
                if z == ZoneLabel::DPU {
                    assert!(matches!(n, ZoneLabel::DPU | ZoneLabel::PZ));
                }
            }
        }
        assert!(audit_topology(&labels).is_empty());
    }

    #[test]
    fn deterministic_in_spec() {
        let a = generate_case(&small_spec(3)).unwrap();
        let b = generate_case(&small_spec(3)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_case(&small_spec(4)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn noiseless_phantom_has_one_intensity_per_zone() {
        let spec = PhantomSpec {
            noise_level: 0.0,
            boundary_blur: 0.0,
            ..small_spec(11)
        };
        let (img, labels) = generate_case(&spec).unwrap();
        for (v, z) in img.data.as_slice().iter().zip(labels.labels.as_slice()) {
            assert_eq!(*v, ZONE_INTENSITY[z.index()]);
        }
    }

    #[test]
    fn fractions_within_half_of_target() {
        let spec = PhantomSpec::default();
        let (_, labels) = generate_case(&spec).unwrap();
        let n = spec.shape.len() as f64;
        for zone in ZoneLabel::FOREGROUND {
            let got = labels.count(zone) as f64 / n;
            let want = spec.zone_fractions.get(zone);
            assert!((got - want).abs() <= 0.5 * want, "{zone}: {got} vs {want}");
        }
    }

    #[test]
    fn tiny_shape_reports_unachievable_zone() {
        let spec = PhantomSpec {
            shape: Shape3::new(4, 6, 6),
            ..PhantomSpec::default()
        };
        match generate_case(&spec) {
            Err(Error::Generation(msg)) => assert!(msg.contains("DPU") || msg.contains("AFS"), "{msg}"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut spec = PhantomSpec::default();
        spec.zone_fractions.tz = 0.9;
        spec.zone_fractions.pz = 0.2;
        assert!(matches!(generate_case(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn hundred_seeds_pass_topology_audit() {
        for seed in 0..100 {
            let (_, labels) = generate_case(&small_spec(1000 + seed)).unwrap();
            let v = audit_topology(&labels);
            assert!(v.is_empty(), "seed {seed}: {v:?}");
        }
    }

    #[test]
    fn dataset_of_ten_splits_six_two_two() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_dataset(10, &small_spec(7), dir.path()).unwrap();
        assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (6, 2, 2));
        assert_eq!(DatasetDir::new(dir.path()).load_split().unwrap(), split);
        assert!(matches!(
            generate_dataset(4, &small_spec(7), dir.path()),
            Err(Error::Precondition(_))
        ));
    }
}

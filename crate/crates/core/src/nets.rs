//! Dual-branch 3D U-Net: two independent encoder-decoder branches fed the
//! same volume, each emitting five class probability maps and (optionally) a
//! reconstruction of the input. In the mixed variants Branch-II carries a
//! multi-rate dilated block between its bottleneck and first up-sampling.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu_backward, leaky_relu_inplace, max_pool, max_pool_backward, sigmoid, sigmoid_backward,
    softmax_backward, softmax_channels, Conv3d, ConvTranspose3d, InstanceNorm, NormCache, Param, Parameters,
    PoolCache, Tensor,
};
use crate::volume::{Grid3, Shape3, Spacing, Volume, ZoneLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    BranchI,
    BranchII,
}

impl BranchId {
    pub const ALL: [BranchId; 2] = [BranchId::BranchI, BranchId::BranchII];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> BranchId {
        match self {
            BranchId::BranchI => BranchId::BranchII,
            BranchId::BranchII => BranchId::BranchI,
        }
    }
}

impl std::fmt::Display for BranchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BranchId::BranchI => "Branch-I",
            BranchId::BranchII => "Branch-II",
        })
    }
}

/// Which branch is responsible for each zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchAssignment {
    relevant: [BranchId; ZoneLabel::COUNT],
}

impl Default for BranchAssignment {
    /// PZ, DPU and Background on Branch-I; TZ and AFS on Branch-II.
    fn default() -> Self {
        let mut relevant = [BranchId::BranchI; ZoneLabel::COUNT];
        relevant[ZoneLabel::TZ.index()] = BranchId::BranchII;
        relevant[ZoneLabel::AFS.index()] = BranchId::BranchII;
        Self { relevant }
    }
}

impl BranchAssignment {
    pub fn new(relevant: [BranchId; ZoneLabel::COUNT]) -> Self {
        Self { relevant }
    }

    pub fn branch_for(&self, zone: ZoneLabel) -> BranchId {
        self.relevant[zone.index()]
    }

    pub fn zones_of(&self, branch: BranchId) -> impl Iterator<Item = ZoneLabel> + '_ {
        ZoneLabel::ALL.into_iter().filter(move |z| self.branch_for(*z) == branch)
    }

    /// Short tag written next to saved outputs.
    pub fn tag(&self) -> String {
        if *self == Self::default() {
            return "default".into();
        }
        ZoneLabel::ALL
            .iter()
            .map(|z| format!("{}:{}", z, if self.branch_for(*z) == BranchId::BranchI { "I" } else { "II" }))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        if tag == "default" {
            return Ok(Self::default());
        }
        let mut relevant = [BranchId::BranchI; ZoneLabel::COUNT];
        let mut seen = [false; ZoneLabel::COUNT];
        for part in tag.split(',') {
            let (zone, branch) = part
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad assignment entry {part:?}")))?;
            let zone: ZoneLabel = zone.parse()?;
            relevant[zone.index()] = match branch {
                "I" => BranchId::BranchI,
                "II" => BranchId::BranchII,
                other => return Err(Error::Format(format!("bad branch {other:?}"))),
            };
            seen[zone.index()] = true;
        }
        if seen.iter().all(|s| *s) {
            Ok(Self { relevant })
        } else {
            Err(Error::Format(format!("assignment {tag:?} does not cover every zone")))
        }
    }
}

/// Model variants: identical (`par`) or mixed (`mix`, dilated block in
/// Branch-II) branches, with or without the reconstruction task (`_reco`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Par,
    ParReco,
    Mix,
    MixReco,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Par, Variant::ParReco, Variant::Mix, Variant::MixReco];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Par => "par",
            Variant::ParReco => "par_reco",
            Variant::Mix => "mix",
            Variant::MixReco => "mix_reco",
        }
    }

    pub fn has_reconstruction(self) -> bool {
        matches!(self, Variant::ParReco | Variant::MixReco)
    }

    pub fn has_dilated_block(self, branch: BranchId) -> bool {
        matches!(self, Variant::Mix | Variant::MixReco) && branch == BranchId::BranchII
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?}; valid variants: {}",
                Variant::ALL.map(|v| v.tag()).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_filters: usize,
    /// Number of resolution levels (>= 2).
    pub depth: usize,
    pub dilation_rates: Vec<usize>,
    pub recon_head: bool,
    pub parameter_seed: u64,
    pub instance_norm: bool,
    /// Down-sampling factor per axis between consecutive levels; `None`
    /// means isotropic 2x everywhere.
    #[serde(default)]
    pub pool_factors: Option<Vec<[usize; 3]>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_filters: 8,
            depth: 3,
            dilation_rates: vec![3, 6, 12],
            recon_head: true,
            parameter_seed: 0,
            instance_norm: true,
            pool_factors: None,
        }
    }
}

impl ModelConfig {
    /// Preset with the filter count typical of full-size volumes.
    pub fn clinical() -> Self {
        Self {
            base_filters: 32,
            depth: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive and non-empty".into()));
        }
        if let Some(p) = &self.pool_factors {
            if p.len() != self.depth - 1 {
                return Err(Error::Config(format!(
                    "pool_factors needs {} entries (depth - 1), got {}",
                    self.depth - 1,
                    p.len()
                )));
            }
            if p.iter().flatten().any(|f| *f == 0) {
                return Err(Error::Config("pool factors must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn pools(&self) -> Vec<[usize; 3]> {
        self.pool_factors.clone().unwrap_or_else(|| vec![[2, 2, 2]; self.depth - 1])
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Required divisor of each spatial axis.
    pub fn divisor(&self) -> [usize; 3] {
        let mut d = [1, 1, 1];
        for p in self.pools() {
            for k in 0..3 {
                d[k] *= p[k];
            }
        }
        d
    }

    pub fn check_input_shape(&self, s: Shape3) -> Result<()> {
        let div = self.divisor();
        let dims = s.dims();
        if (0..3).any(|k| !dims[k].is_multiple_of(div[k]) || dims[k] == 0) {
            return Err(Error::Shape(format!(
                "input {s} is not divisible by {div:?} (depth {} with pooling {:?})",
                self.depth,
                self.pools()
            )));
        }
        Ok(())
    }
}

/// Effective extent of a single dilated kernel: `k + (k - 1)(r - 1)`.
pub fn dilated_extent(kernel: usize, rate: usize) -> usize {
    kernel + (kernel - 1) * (rate - 1)
}

/// Convolution, optional instance norm, optional leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: Option<InstanceNorm>,
    pub activate: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    input: Tensor,
    norm: Option<NormCache>,
    output: Tensor,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, kernel: usize, dilation: usize, norm: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv3d::new(cin, cout, kernel, dilation, rng),
            norm: norm.then(|| InstanceNorm::new(cout)),
            activate: true,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvBlockCache) {
        let mut y = self.conv.forward(x);
        let mut norm_cache = None;
        if let Some(norm) = &self.norm {
            let (n, c) = norm.forward(&y);
            y = n;
            norm_cache = Some(c);
        }
        if self.activate {
            leaky_relu_inplace(&mut y);
        }
        let cache = ConvBlockCache {
            input: x.clone(),
            norm: norm_cache,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        if self.activate {
            leaky_relu_backward(&cache.output, &mut dy);
        }
        if let (Some(norm), Some(nc)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            dy = norm.backward(nc, &dy);
        }
        self.conv.backward(&cache.input, &dy, need_dx)
    }
}

impl Parameters for ConvBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit_params(f);
        if let Some(n) = &self.norm {
            n.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(f);
        }
    }
}

/// Parallel dilated 3x3x3 convolutions plus a 1x1x1 path, concatenated and
/// fused by another 1x1x1 convolution.
#[derive(Debug, Clone)]
pub struct DilatedBlock {
    pub paths: Vec<ConvBlock>,
    pub fuse: ConvBlock,
}

#[derive(Debug, Clone)]
pub struct DilatedCache {
    paths: Vec<ConvBlockCache>,
    fuse: ConvBlockCache,
}

impl DilatedBlock {
    pub fn new(channels: usize, rates: &[usize], fused_channels: usize, norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut paths: Vec<ConvBlock> = rates
            .iter()
            .map(|&r| ConvBlock::new(channels, channels, 3, r, norm, rng))
            .collect();
        paths.push(ConvBlock::new(channels, channels, 1, 1, norm, rng));
        let fuse = ConvBlock::new(channels * paths.len(), fused_channels, 1, 1, norm, rng);
        Self { paths, fuse }
    }

    pub fn output_channels(&self) -> usize {
        self.fuse.conv.out_channels
    }

    /// Extent along each axis covered by each parallel path's kernel.
    pub fn path_extents(&self) -> Vec<usize> {
        self.paths.iter().map(|p| dilated_extent(p.conv.kernel, p.conv.dilation)).collect()
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, DilatedCache) {
        let mut outs = Vec::with_capacity(self.paths.len());
        let mut caches = Vec::with_capacity(self.paths.len());
        for p in &self.paths {
            let (y, c) = p.forward(x);
            outs.push(y);
            caches.push(c);
        }
        let n = x.voxels();
        let total: usize = outs.iter().map(|t| t.channels).sum();
        let mut cat = Vec::with_capacity(total * n);
        for o in &outs {
            cat.extend_from_slice(&o.data);
        }
        let cat = Tensor::from_vec(total, x.shape, cat);
        let (y, fuse) = self.fuse.forward(&cat);
        (y, DilatedCache { paths: caches, fuse })
    }

    pub fn backward(&mut self, cache: &DilatedCache, dy: Tensor) -> Tensor {
        let dcat = self.fuse.backward(&cache.fuse, dy, true).expect("dx requested");
        let n = dcat.voxels();
        let shape = dcat.shape;
        let mut dx = Tensor::zeros(self.paths[0].conv.in_channels, shape);
        let mut offset = 0;
        for (p, c) in self.paths.iter_mut().zip(&cache.paths) {
            let ch = p.conv.out_channels;
            let part = Tensor::from_vec(ch, shape, dcat.data[offset * n..(offset + ch) * n].to_vec());
            offset += ch;
            let d = p.backward(c, part, true).expect("dx requested");
            dx.add_assign(&d);
        }
        dx
    }
}

impl Parameters for DilatedBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in &self.paths {
            p.visit_params(f);
        }
        self.fuse.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in &mut self.paths {
            p.visit_params_mut(f);
        }
        self.fuse.visit_params_mut(f);
    }
}

/// One encoder-decoder branch.
#[derive(Debug, Clone)]
pub struct Branch {
    pools: Vec<[usize; 3]>,
    encoder: Vec<[ConvBlock; 2]>,
    pub dilated: Option<DilatedBlock>,
    ups: Vec<ConvTranspose3d>,
    decoder: Vec<[ConvBlock; 2]>,
    seg_head: Conv3d,
    recon_head: Option<Conv3d>,
}

/// Forward results of a single branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Five-channel class probabilities (per-voxel softmax).
    pub probs: Tensor,
    /// One-channel reconstruction in `[0, 1]`.
    pub recon: Option<Tensor>,
    /// Last decoder features, before the output heads.
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    encoder: Vec<[ConvBlockCache; 2]>,
    pools: Vec<PoolCache>,
    dilated: Option<DilatedCache>,
    up_inputs: Vec<Tensor>,
    decoder: Vec<[ConvBlockCache; 2]>,
    features: Tensor,
    probs: Tensor,
    recon: Option<Tensor>,
}

impl Branch {
    /// Builds one branch; parameter initialisation is drawn from `rng`.
    pub fn build(cfg: &ModelConfig, with_dilated_block: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let norm = cfg.instance_norm;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for level in 0..cfg.depth {
            let c = cfg.channels(level);
            encoder.push([
                ConvBlock::new(cin, c, 3, 1, norm, rng),
                ConvBlock::new(c, c, 3, 1, norm, rng),
            ]);
            cin = c;
        }
        let bottom = cfg.channels(cfg.depth - 1);
        let dilated = with_dilated_block.then(|| DilatedBlock::new(bottom, &cfg.dilation_rates, bottom, norm, rng));
        let pools = cfg.pools();
        let mut ups = Vec::with_capacity(cfg.depth - 1);
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for level in 0..cfg.depth - 1 {
            let c = cfg.channels(level);
            ups.push(ConvTranspose3d::new(cfg.channels(level + 1), c, pools[level], rng));
            decoder.push([
                ConvBlock::new(2 * c, c, 3, 1, norm, rng),
                ConvBlock::new(c, c, 3, 1, norm, rng),
            ]);
        }
        let c0 = cfg.channels(0);
        let seg_head = Conv3d::new(c0, ZoneLabel::COUNT, 1, 1, rng);
        let recon_head = cfg.recon_head.then(|| Conv3d::new(c0, 1, 1, 1, rng));
        Ok(Self {
            pools,
            encoder,
            dilated,
            ups,
            decoder,
            seg_head,
            recon_head,
        })
    }

    pub fn has_recon_head(&self) -> bool {
        self.recon_head.is_some()
    }

    pub fn forward(&self, x: &Tensor) -> (BranchOutput, BranchCache) {
        let depth = self.encoder.len();
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pool_caches = Vec::with_capacity(depth - 1);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..depth {
            let (a, ca) = self.encoder[level][0].forward(&h);
            let (b, cb) = self.encoder[level][1].forward(&a);
            enc_caches.push([ca, cb]);
            if level + 1 < depth {
                let (p, pc) = max_pool(&b, self.pools[level]);
                pool_caches.push(pc);
                skips.push(b);
                h = p;
            } else {
                h = b;
            }
        }
        let mut dilated_cache = None;
        if let Some(block) = &self.dilated {
            let (y, c) = block.forward(&h);
            dilated_cache = Some(c);
            h = y;
        }
        let mut up_inputs = vec![Tensor::zeros(0, x.shape); depth - 1];
        let mut dec_caches: Vec<Option<[ConvBlockCache; 2]>> = vec![None; depth - 1];
        for level in (0..depth - 1).rev() {
            let up = self.ups[level].forward(&h);
            up_inputs[level] = std::mem::replace(&mut h, Tensor::zeros(0, x.shape));
            let cat = Tensor::concat(&up, &skips[level]);
            let (a, ca) = self.decoder[level][0].forward(&cat);
            let (b, cb) = self.decoder[level][1].forward(&a);
            dec_caches[level] = Some([ca, cb]);
            h = b;
        }
        let features = h;
        let probs = softmax_channels(&self.seg_head.forward(&features));
        let recon = self.recon_head.as_ref().map(|head| sigmoid(&head.forward(&features)));
        let out = BranchOutput {
            probs: probs.clone(),
            recon: recon.clone(),
            features: features.clone(),
        };
        let cache = BranchCache {
            encoder: enc_caches,
            pools: pool_caches,
            dilated: dilated_cache,
            up_inputs,
            decoder: dec_caches.into_iter().map(|c| c.expect("every level visited")).collect(),
            features,
            probs,
            recon,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients given `dL/dprobs` and `dL/drecon`.
    pub fn backward(&mut self, cache: &BranchCache, dprobs: &Tensor, drecon: Option<&Tensor>) {
        let depth = self.encoder.len();
        let dlogits = softmax_backward(&cache.probs, dprobs);
        let mut dfeat = self.seg_head.backward(&cache.features, &dlogits, true).expect("dx");
        if let (Some(head), Some(recon), Some(dr)) = (self.recon_head.as_mut(), cache.recon.as_ref(), drecon) {
            let dz = sigmoid_backward(recon, dr);
            let d = head.backward(&cache.features, &dz, true).expect("dx");
            dfeat.add_assign(&d);
        }
        let mut dh = dfeat;
        let mut dskips: Vec<Option<Tensor>> = vec![None; depth - 1];
        for level in 0..depth - 1 {
            let [ca, cb] = &cache.decoder[level];
            let da = self.decoder[level][1].backward(cb, dh, true).expect("dx");
            let dcat = self.decoder[level][0].backward(ca, da, true).expect("dx");
            let c = self.ups[level].out_channels;
            let (dup, dskip) = dcat.split(c);
            dskips[level] = Some(dskip);
            dh = self.ups[level].backward(&cache.up_inputs[level], &dup);
        }
        if let (Some(block), Some(dc)) = (self.dilated.as_mut(), cache.dilated.as_ref()) {
            dh = block.backward(dc, dh);
        }
        for level in (0..depth).rev() {
            if level + 1 < depth {
                let mut d = max_pool_backward(&cache.pools[level], &dh);
                d.add_assign(dskips[level].as_ref().expect("skip gradient"));
                dh = d;
            }
            let [ca, cb] = &cache.encoder[level];
            let da = self.encoder[level][1].backward(cb, dh, true).expect("dx");
            let need_dx = level > 0;
            match self.encoder[level][0].backward(ca, da, need_dx) {
                Some(d) => dh = d,
                None => break,
            }
        }
    }
}

impl Parameters for Branch {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for blocks in &self.encoder {
            blocks.iter().for_each(|b| b.visit_params(f));
        }
        if let Some(d) = &self.dilated {
            d.visit_params(f);
        }
        for (up, blocks) in self.ups.iter().zip(&self.decoder) {
            up.visit_params(f);
            blocks.iter().for_each(|b| b.visit_params(f));
        }
        self.seg_head.visit_params(f);
        if let Some(h) = &self.recon_head {
            h.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for blocks in &mut self.encoder {
            blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        if let Some(d) = &mut self.dilated {
            d.visit_params_mut(f);
        }
        for (up, blocks) in self.ups.iter_mut().zip(&mut self.decoder) {
            up.visit_params_mut(f);
            blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        self.seg_head.visit_params_mut(f);
        if let Some(h) = &mut self.recon_head {
            h.visit_params_mut(f);
        }
    }
}

/// Standalone branch builder; parameters come from `cfg.parameter_seed`.
pub fn build_branch(cfg: &ModelConfig, with_dilated_block: bool) -> Result<Branch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.parameter_seed);
    Branch::build(cfg, with_dilated_block, &mut rng)
}

/// Per-branch class probabilities and reconstructions on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchOutput {
    pub shape: Shape3,
    pub spacing: Spacing,
    /// `probs[branch][zone]`
    pub probs: [[Grid3<f64>; ZoneLabel::COUNT]; 2],
    /// `recon[branch]`, present for reconstruction variants.
    pub recon: Option<[Grid3<f64>; 2]>,
}

impl DualBranchOutput {
    pub fn prob(&self, branch: BranchId, zone: ZoneLabel) -> &Grid3<f64> {
        &self.probs[branch.index()][zone.index()]
    }

    pub fn prob_mut(&mut self, branch: BranchId, zone: ZoneLabel) -> &mut Grid3<f64> {
        &mut self.probs[branch.index()][zone.index()]
    }

    /// Output with both branches swapped (Branch-I data becomes Branch-II).
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        out.probs.swap(0, 1);
        if let Some(r) = out.recon.as_mut() {
            r.swap(0, 1);
        }
        out
    }

    fn from_branch_outputs(shape: Shape3, spacing: Spacing, outs: [&BranchOutput; 2]) -> Self {
        let n = shape.len();
        let grid = |t: &Tensor, c: usize| {
            Grid3::from_vec(shape, t.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect())
                .expect("branch output shape")
        };
        let probs = outs.map(|o| std::array::from_fn(|c| grid(&o.probs, c)));
        let recon = match (&outs[0].recon, &outs[1].recon) {
            (Some(a), Some(b)) => Some([grid(a, 0), grid(b, 0)]),
            _ => None,
        };
        Self {
            shape,
            spacing,
            probs,
            recon,
        }
    }

    const MAGIC: &'static [u8; 8] = b"CTDUALO1";

    /// Stores the output as a JSON header (`<stem>.json`) plus a little-endian
    /// `f64` payload (`<stem>.raw`) holding Branch-I classes, Branch-II
    /// classes and then the reconstructions, each in zone order.
    pub fn save(&self, path: &Path, assignment: &BranchAssignment) -> Result<()> {
        let header = DualOutputHeader {
            format: "dual-branch-output".into(),
            version: 1,
            shape: self.shape.dims().to_vec(),
            spacing: self.spacing.0.to_vec(),
            assignment: assignment.tag(),
            has_recon: self.recon.is_some(),
        };
        let payload_path = path.with_extension("raw");
        let header_path = path.with_extension("json");
        let mut bytes = Vec::with_capacity(8 + 12 * self.shape.len() * 8);
        bytes.extend_from_slice(Self::MAGIC);
        for b in &self.probs {
            for g in b {
                g.as_slice().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            }
        }
        if let Some(r) = &self.recon {
            for g in r {
                g.as_slice().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            }
        }
        std::fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
        std::fs::write(&header_path, serde_json::to_string_pretty(&header)? + "\n")
            .map_err(|e| Error::io(&header_path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, BranchAssignment)> {
        let payload_path = path.with_extension("raw");
        let header_path = path.with_extension("json");
        let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: DualOutputHeader = serde_json::from_str(&text)?;
        if header.format != "dual-branch-output" || header.version != 1 {
            return Err(Error::Format(format!(
                "{}: not a version-1 dual-branch output header",
                header_path.display()
            )));
        }
        if header.shape.len() != 3 || header.spacing.len() != 3 {
            return Err(Error::Format("dual-branch output must be 3D".into()));
        }
        let shape = Shape3::new(header.shape[0], header.shape[1], header.shape[2]);
        let spacing = Spacing::new([header.spacing[0], header.spacing[1], header.spacing[2]])?;
        let assignment = BranchAssignment::from_tag(&header.assignment)?;
        let mut bytes = Vec::new();
        std::fs::File::open(&payload_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&payload_path, e))?;
        let grids = if header.has_recon { 12 } else { 10 };
        if bytes.len() != 8 + grids * shape.len() * 8 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Format(format!(
                "{}: payload size or magic does not match header",
                payload_path.display()
            )));
        }
        let n = shape.len();
        let grid = |k: usize| -> Grid3<f64> {
            let start = 8 + k * n * 8;
            let vals = bytes[start..start + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Grid3::from_vec(shape, vals).expect("shape")
        };
        let probs = [
            std::array::from_fn(&grid),
            std::array::from_fn(|c| grid(ZoneLabel::COUNT + c)),
        ];
        let recon = header.has_recon.then(|| [grid(10), grid(11)]);
        Ok((
            Self {
                shape,
                spacing,
                probs,
                recon,
            },
            assignment,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DualOutputHeader {
    format: String,
    version: u32,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    assignment: String,
    has_recon: bool,
}

/// Two independent branches sharing only their input.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub branches: [Branch; 2],
}

/// Forward output plus the caches needed for back-propagation.
pub struct DualForward {
    pub output: DualBranchOutput,
    pub branch_outputs: [BranchOutput; 2],
    caches: [BranchCache; 2],
}

pub fn build_dual(cfg: &ModelConfig, variant: Variant) -> Result<DualModel> {
    let mut cfg = cfg.clone();
    cfg.recon_head = variant.has_reconstruction();
    cfg.validate()?;
    let branches = BranchId::ALL.map(|b| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.parameter_seed);
        rng.set_stream(b.index() as u64 + 1);
        Branch::build(&cfg, variant.has_dilated_block(b), &mut rng)
    });
    let [a, b] = branches;
    Ok(DualModel {
        config: cfg,
        variant,
        branches: [a?, b?],
    })
}

fn volume_tensor(v: &Volume) -> Tensor {
    Tensor::from_vec(1, v.shape(), v.data.as_slice().to_vec())
}

impl DualModel {
    pub fn branch(&self, id: BranchId) -> &Branch {
        &self.branches[id.index()]
    }

    pub fn branch_mut(&mut self, id: BranchId) -> &mut Branch {
        &mut self.branches[id.index()]
    }

    pub fn branch_param_count(&self, id: BranchId) -> usize {
        self.branch(id).param_count()
    }

    pub fn forward_train(&self, v: &Volume) -> Result<DualForward> {
        self.config.check_input_shape(v.shape())?;
        let x = volume_tensor(v);
        let (o1, c1) = self.branches[0].forward(&x);
        let (o2, c2) = self.branches[1].forward(&x);
        let output = DualBranchOutput::from_branch_outputs(v.shape(), v.spacing, [&o1, &o2]);
        Ok(DualForward {
            output,
            branch_outputs: [o1, o2],
            caches: [c1, c2],
        })
    }

    pub fn forward(&self, v: &Volume) -> Result<DualBranchOutput> {
        Ok(self.forward_train(v)?.output)
    }

    /// Back-propagates output gradients into both branches' parameter grads.
    pub fn backward(&mut self, fwd: &DualForward, grad: &OutputGrad) {
        for b in BranchId::ALL {
            let i = b.index();
            let shape = fwd.output.shape;
            let n = shape.len();
            let mut dp = Vec::with_capacity(ZoneLabel::COUNT * n);
            for z in 0..ZoneLabel::COUNT {
                dp.extend(grad.probs[i][z].iter().map(|&g| g as f32));
            }
            let dprobs = Tensor::from_vec(ZoneLabel::COUNT, shape, dp);
            let drecon = grad
                .recon
                .as_ref()
                .map(|r| Tensor::from_vec(1, shape, r[i].iter().map(|&g| g as f32).collect()));
            self.branches[i].backward(&fwd.caches[i], &dprobs, drecon.as_ref());
        }
    }
}

impl Parameters for DualModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.branches[0].visit_params(f);
        self.branches[1].visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.branches[0].visit_params_mut(f);
        self.branches[1].visit_params_mut(f);
    }
}

/// Gradient of a scalar loss with respect to a [`DualBranchOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub probs: [[Vec<f64>; ZoneLabel::COUNT]; 2],
    pub recon: Option<[Vec<f64>; 2]>,
}

impl OutputGrad {
    pub fn zeros(n: usize, recon: bool) -> Self {
        Self {
            probs: std::array::from_fn(|_| std::array::from_fn(|_| vec![0.0; n])),
            recon: recon.then(|| [vec![0.0; n], vec![0.0; n]]),
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrad, scale: f64) {
        for b in 0..2 {
            for z in 0..ZoneLabel::COUNT {
                for (a, o) in self.probs[b][z].iter_mut().zip(&other.probs[b][z]) {
                    *a += scale * o;
                }
            }
        }
        if let (Some(a), Some(o)) = (self.recon.as_mut(), other.recon.as_ref()) {
            for b in 0..2 {
                for (x, y) in a[b].iter_mut().zip(&o[b]) {
                    *x += scale * y;
                }
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTSEGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    variant: Variant,
    config: ModelConfig,
    branch_params: [usize; 2],
}

/// Writes parameters, config and variant tag:
/// magic, `u32` version, `u32` header length, JSON header, LE `f32` values.
pub fn save_checkpoint(model: &DualModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        variant: model.variant,
        config: model.config.clone(),
        branch_params: BranchId::ALL.map(|b| model.branch_param_count(b)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.flat_values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expect` is given the stored config and variant
/// must match it exactly.
pub fn load_checkpoint(path: &Path, expect: Option<(&ModelConfig, Variant)>) -> Result<DualModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(
        bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?,
    )?;
    if let Some((cfg, variant)) = expect {
        let mut want = cfg.clone();
        want.recon_head = variant.has_reconstruction();
        if header.variant != variant {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint variant {} but {} was requested",
                header.variant, variant
            )));
        }
        if header.config != want {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint config {:?} differs from requested {:?}",
                header.config, want
            )));
        }
    }
    let mut model = build_dual(&header.config, header.variant)?;
    let values = crate::volume::io::f32_from_le_bytes(&bytes[16 + hlen..]);
    let counts = BranchId::ALL.map(|b| model.branch_param_count(b));
    if counts != header.branch_params || !model.load_flat(&values) {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} values for branches {:?}; model expects {:?}",
            values.len(),
            header.branch_params,
            counts
        )));
    }
    Ok(model)
}

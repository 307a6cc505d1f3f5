//! Two-stage training with Adam, early stopping on a validation loss and
//! k-fold cross-validation.
//!
//! Stage I minimises the supervised loss and runs to its own early stop.
//! Stage II starts from the best Stage-I parameters with a fresh optimiser
//! and adds the inter-branch consistency loss; its baseline is the
//! validation loss of the warm start itself (epoch 0).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Case, DatasetDir};
use crate::error::{Error, Result};
use crate::losses::{consistency_only, total_loss, total_loss_grad, LossBreakdown, LossConfig, Stage};
use crate::metrics::{build_report, render_table, summarize, DistanceUnits, MetricsReport, Summary};
use crate::nets::{build_dual, save_checkpoint, BranchAssignment, DualModel, ModelConfig, Variant};
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::postprocess::postprocess_pipeline;
use crate::volume::{split::apportion, DatasetSplit, LabelMap, ZoneLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs without strict improvement before stopping.
    pub patience: usize,
    /// Stage I never stops before this epoch.
    pub stage1_min_epochs: usize,
    /// Per-stage epoch cap.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub fold_count: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Ablation: Stage II optimises the supervised loss only.
    pub disable_unsup: bool,
    pub stage1_only: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub assignment: BranchAssignment,
    pub distance_units: DistanceUnits,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            patience: 30,
            stage1_min_epochs: 1,
            max_epochs: 500,
            batch_size: 1,
            fold_count: 4,
            seed: 0,
            variant: Variant::MixReco,
            disable_unsup: false,
            stage1_only: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            assignment: BranchAssignment::default(),
            distance_units: DistanceUnits::Millimetres,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.stage1_min_epochs == 0 {
            return bad("stage1_min_epochs must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.fold_count == 0 {
            return bad("fold_count must be >= 1".into());
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn build_model(&self) -> Result<DualModel> {
        build_dual(&self.model, self.variant)
    }

    /// Stage whose objective is optimised while in `stage`.
    fn objective(&self, stage: Stage) -> Stage {
        if stage == Stage::II && !self.disable_unsup {
            Stage::II
        } else {
            Stage::I
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean over the epoch's training cases.
    pub train: LossBreakdown,
    /// Mean over the validation cases; `grand_total` is the monitored value.
    pub val: LossBreakdown,
    /// Mean validation consistency loss, measured in either stage.
    pub val_consistency: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Last completed epoch (0 before the first).
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    #[serde(skip)]
    pub best_params: Vec<f32>,
    /// Validation losses of the warm start (Stage II only).
    pub warm_start: Option<EpochRecord>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub finished: bool,
}

impl TrainState {
    fn new(stage: Stage, params: Vec<f32>) -> Self {
        Self {
            stage,
            epoch: 0,
            step: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            best_params: params,
            warm_start: None,
            history: Vec::new(),
            steps: Vec::new(),
            finished: false,
        }
    }

    /// Records a validation value; returns whether it strictly improved.
    pub fn observe(&mut self, val_loss: f64, params: impl FnOnce() -> Vec<f32>) -> bool {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            self.best_params = params();
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        let min_epochs = if self.stage == Stage::I { cfg.stage1_min_epochs } else { 1 };
        (self.epochs_since_improvement >= cfg.patience && self.epoch >= min_epochs) || self.epoch >= cfg.max_epochs
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        if self.best_epoch == 0 {
            self.warm_start.as_ref()
        } else {
            self.history.iter().find(|r| r.epoch == self.best_epoch)
        }
    }

    /// Per-step loss log as CSV.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,stage,dsc,recon,unsup,total");
        for z in ZoneLabel::ALL {
            let _ = write!(out, ",dsc_{}", z.name());
        }
        for z in ZoneLabel::ALL {
            let _ = write!(out, ",unsup_{}", z.name());
        }
        out.push('\n');
        for s in &self.steps {
            let l = &s.loss;
            let _ = write!(out, "{},{},{},{},{},{}", s.step, s.stage, l.dsc, l.recon, l.unsup, l.grand_total);
            for v in l.per_zone_dsc_terms.iter().chain(&l.per_zone_unsup_terms) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Per-epoch log as CSV (epoch 0 is the Stage-II warm start).
    pub fn epochs_csv(&self) -> String {
        let mut out =
            String::from("epoch,stage,train_total,val_dsc,val_recon,val_unsup,val_total,val_consistency,improved,best_val\n");
        let mut best = f64::INFINITY;
        for r in self.warm_start.iter().chain(&self.history) {
            if r.improved {
                best = r.val.grand_total;
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.stage,
                if r.epoch == 0 { String::new() } else { r.train.grand_total.to_string() },
                r.val.dsc,
                r.val.recon,
                r.val.unsup,
                r.val.grand_total,
                r.val_consistency,
                u8::from(r.improved),
                best
            );
        }
        out
    }
}

/// Training order of case indices for an epoch: a pure function of the
/// seed and the epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn non_finite(stage: Stage, step: u64, what: &str, loss: &LossBreakdown) -> Error {
    Error::NonFinite {
        context: format!("stage {stage}, step {step}, {what}"),
        detail: format!("{loss:?}"),
    }
}

/// Mean validation losses (objective of `stage`) and mean consistency loss.
pub fn evaluate_losses(model: &DualModel, cases: &[Case], stage: Stage, cfg: &TrainConfig) -> Result<(LossBreakdown, f64)> {
    if cases.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let mut items = Vec::with_capacity(cases.len());
    let mut consistency = 0.0;
    for c in cases {
        let out = model.forward(&c.image)?;
        items.push(total_loss(&out, &c.labels, &c.image, &cfg.assignment, stage, &cfg.loss)?);
        consistency += consistency_only(&out, &cfg.loss)?;
    }
    Ok((LossBreakdown::mean(&items).expect("non-empty"), consistency / cases.len() as f64))
}

/// Resumable state of one training stage.
pub struct Session {
    pub model: DualModel,
    pub adam: Adam,
    pub state: TrainState,
}

const SESSION_MAGIC: &[u8; 8] = b"CTSESS01";

#[derive(Serialize, Deserialize)]
struct SessionHeader {
    config: TrainConfig,
    state: TrainState,
    adam_config: AdamConfig,
    adam_step: u64,
    counts: [usize; 4],
}

impl Session {
    fn new(model: DualModel, stage: Stage, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.param_count();
        let params = model.flat_values();
        Ok(Self {
            adam: Adam::new(cfg.adam(), n),
            state: TrainState::new(stage, params),
            model,
        })
    }

    pub fn stage1(model: DualModel, cfg: &TrainConfig) -> Result<Self> {
        Self::new(model, Stage::I, cfg)
    }

    /// Warm start: the given parameters become epoch 0 and the baseline.
    pub fn stage2(model: DualModel, val: &[Case], cfg: &TrainConfig) -> Result<Self> {
        let mut s = Self::new(model, Stage::II, cfg)?;
        let (val_loss, consistency) = evaluate_losses(&s.model, val, cfg.objective(Stage::II), cfg)?;
        if !val_loss.is_finite() {
            return Err(non_finite(Stage::II, 0, "warm-start validation", &val_loss));
        }
        s.state.best_val_loss = val_loss.grand_total;
        s.state.warm_start = Some(EpochRecord {
            epoch: 0,
            stage: Stage::II,
            train: val_loss,
            val: val_loss,
            val_consistency: consistency,
            improved: true,
        });
        Ok(s)
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn run_epoch(&mut self, train: &[Case], val: &[Case], cfg: &TrainConfig) -> Result<&EpochRecord> {
        if train.is_empty() {
            return Err(Error::Precondition("training set is empty".into()));
        }
        let stage = self.state.stage;
        let objective = cfg.objective(stage);
        let epoch = self.state.epoch + 1;
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut epoch_losses = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            self.model.zero_grad();
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let case = &train[i];
                let fwd = self.model.forward_train(&case.image)?;
                let (loss, grad) = total_loss_grad(&fwd.output, &case.labels, &case.image, &cfg.assignment, objective, &cfg.loss)?;
                if !loss.is_finite() {
                    return Err(non_finite(stage, self.state.step + 1, &format!("case {}", case.id), &loss));
                }
                self.model.backward(&fwd, &grad);
                batch_losses.push(loss);
            }
            self.adam.step(&mut self.model, 1.0 / batch.len() as f32);
            self.state.step += 1;
            let mean = LossBreakdown::mean(&batch_losses).expect("non-empty batch");
            self.state.steps.push(StepRecord {
                step: self.state.step,
                stage,
                epoch,
                loss: mean,
            });
            epoch_losses.extend(batch_losses);
        }
        self.state.epoch = epoch;
        let (val_loss, consistency) = evaluate_losses(&self.model, val, objective, cfg)?;
        if !val_loss.is_finite() {
            return Err(non_finite(stage, self.state.step, "validation", &val_loss));
        }
        let model = &self.model;
        let improved = self.state.observe(val_loss.grand_total, || model.flat_values());
        let record = EpochRecord {
            epoch,
            stage,
            train: LossBreakdown::mean(&epoch_losses).expect("non-empty"),
            val: val_loss,
            val_consistency: consistency,
            improved,
        };
        log::info!(
            "stage {stage} epoch {epoch}: train {:.5} val {:.5} (best {:.5} @ {}){}",
            record.train.grand_total,
            record.val.grand_total,
            self.state.best_val_loss,
            self.state.best_epoch,
            if improved { " *" } else { "" }
        );
        self.state.history.push(record);
        if self.state.should_stop(cfg) {
            self.state.finished = true;
        }
        Ok(self.state.history.last().expect("just pushed"))
    }

    pub fn run(&mut self, train: &[Case], val: &[Case], cfg: &TrainConfig) -> Result<()> {
        while !self.state.finished {
            self.run_epoch(train, val, cfg)?;
        }
        Ok(())
    }

    /// Model with the best parameters restored, and the final state.
    pub fn finish(mut self) -> (DualModel, TrainState) {
        assert!(self.model.load_flat(&self.state.best_params), "snapshot matches model");
        (self.model, self.state)
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let params = self.model.flat_values();
        let header = SessionHeader {
            config: cfg.clone(),
            state: self.state.clone(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            counts: [params.len(), self.state.best_params.len(), self.adam.m.len(), self.adam.v.len()],
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * params.len() * 4);
        out.extend_from_slice(SESSION_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for buf in [&params, &self.state.best_params, &self.adam.m, &self.adam.v] {
            for v in buf.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Restores a session; the stored training config must equal `cfg`.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != SESSION_MAGIC {
            return Err(Error::Format(format!("{}: not a training session file", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated session header".into()))?;
        let header: SessionHeader = serde_json::from_slice(body)?;
        if header.config != *cfg {
            return Err(Error::CheckpointMismatch(
                "session was written with a different training configuration".into(),
            ));
        }
        let floats = crate::volume::io::f32_from_le_bytes(&bytes[16 + hlen..]);
        if floats.len() != header.counts.iter().sum::<usize>() {
            return Err(Error::Format("session payload length does not match header".into()));
        }
        let mut rest = &floats[..];
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let [np, nb, nm, nv] = header.counts;
        let (params, best, m, v) = (take(np), take(nb), take(nm), take(nv));
        let mut model = build_dual(&cfg.model, cfg.variant)?;
        if !model.load_flat(&params) {
            return Err(Error::CheckpointMismatch("session parameters do not fit the model".into()));
        }
        let mut state = header.state;
        state.best_params = best;
        Ok(Self {
            model,
            adam: Adam {
                config: header.adam_config,
                step: header.adam_step,
                m,
                v,
            },
            state,
        })
    }
}

/// Stage I; `model` ends with its best parameters.
pub fn train_stage1(model: &mut DualModel, train: &[Case], val: &[Case], cfg: &TrainConfig) -> Result<TrainState> {
    let mut s = Session::stage1(model.clone(), cfg)?;
    s.run(train, val, cfg)?;
    let (m, state) = s.finish();
    *model = m;
    Ok(state)
}

/// Stage II warm-started from `model`; `model` ends with its best parameters.
pub fn train_stage2(model: &mut DualModel, train: &[Case], val: &[Case], cfg: &TrainConfig) -> Result<TrainState> {
    let mut s = Session::stage2(model.clone(), val, cfg)?;
    s.run(train, val, cfg)?;
    let (m, state) = s.finish();
    *model = m;
    Ok(state)
}

/// Post-processed predictions for a set of cases.
pub fn predict_cases(model: &DualModel, cases: &[Case], assign: &BranchAssignment) -> Result<BTreeMap<String, LabelMap>> {
    cases
        .iter()
        .map(|c| Ok((c.id.clone(), postprocess_pipeline(&model.forward(&c.image)?, assign)?)))
        .collect()
}

pub fn evaluate_cases(model: &DualModel, cases: &[Case], cfg: &TrainConfig) -> Result<MetricsReport> {
    let preds = predict_cases(model, cases, &cfg.assignment)?;
    let gts: BTreeMap<String, LabelMap> = cases.iter().map(|c| (c.id.clone(), c.labels.clone())).collect();
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    build_report(&ids, &preds, &gts, cfg.distance_units)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Shuffles the development cases with `seed` and cuts them into `k`
/// validation folds of near-equal size; each fold trains on the rest.
pub fn make_folds(development: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    if k > development.len() {
        return Err(Error::Config(format!(
            "fold_count {k} exceeds the {} train+validation cases",
            development.len()
        )));
    }
    let mut ids = development.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = apportion(ids.len(), &vec![1; k]);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for (index, size) in sizes.into_iter().enumerate() {
        let validation = ids[start..start + size].to_vec();
        let train = ids[..start].iter().chain(&ids[start + size..]).cloned().collect();
        folds.push(Fold {
            index,
            train,
            validation,
        });
        start += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub stage1: TrainState,
    pub stage2: Option<TrainState>,
    pub report: MetricsReport,
}

/// Stage I, then (unless disabled) Stage II, then evaluation on `test`.
/// Writes checkpoints, loss logs and the report into `out_dir`.
pub fn run_training(
    train: &[Case],
    val: &[Case],
    test: &[Case],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut model = cfg.build_model()?;
    let stage1 = train_stage1(&mut model, train, val, cfg)?;
    save_checkpoint(&model, &out_dir.join("stage1_best.ckpt"))?;
    let stage2 = if cfg.stage1_only {
        None
    } else {
        Some(train_stage2(&mut model, train, val, cfg)?)
    };
    save_checkpoint(&model, &out_dir.join("best.ckpt"))?;
    let mut steps = stage1.clone();
    let mut epochs = stage1.epochs_csv();
    if let Some(s2) = &stage2 {
        steps.steps.extend(s2.steps.iter().cloned());
        epochs.push_str(s2.epochs_csv().split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
    }
    write("train_log.csv", steps.steps_csv())?;
    write("epochs.csv", epochs)?;
    let report = evaluate_cases(&model, test, cfg)?;
    report.save(&out_dir.join("report.json"))?;
    write("report.txt", render_table(&[(cfg.variant.tag().to_string(), &report)]))?;
    Ok(RunOutcome { stage1, stage2, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: Fold,
    pub outcome: RunOutcome,
}

/// Mean ± sample sd across folds of each fold's mean score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub dsc: BTreeMap<String, Summary>,
    pub mad: BTreeMap<String, Option<Summary>>,
}

pub fn summarize_folds(reports: &[&MetricsReport]) -> CvSummary {
    let mut dsc = BTreeMap::new();
    let mut mad = BTreeMap::new();
    let columns = ZoneLabel::FOREGROUND
        .iter()
        .map(|z| (z.name().to_string(), Some(*z)))
        .chain(std::iter::once(("Zones Avg.".to_string(), None)));
    for (name, zone) in columns {
        let agg = |r: &MetricsReport| *zone.map(|z| &r.aggregate[&z]).unwrap_or(&r.zones_avg);
        let d: Vec<f64> = reports.iter().map(|r| agg(r).dsc.mean).collect();
        let m: Vec<f64> = reports.iter().filter_map(|r| agg(r).mad.map(|s| s.mean)).collect();
        dsc.insert(name.clone(), summarize(&d).expect("at least one fold"));
        mad.insert(name, summarize(&m));
    }
    CvSummary { dsc, mad }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub test: Vec<String>,
    pub folds: Vec<FoldOutcome>,
    pub summary: CvSummary,
}

pub fn fold_dir(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join(format!("fold_{index}"))
}

/// k-fold cross-validation over the train+validation cases of `split`; the
/// test cases are held out of every fold and used to evaluate each one.
pub fn run_cross_validation(
    data: &DatasetDir,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out_dir: &Path,
    parallel: bool,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let folds = make_folds(&split.development(), cfg.fold_count, cfg.seed)?;
    let dev = data.load_cases(&split.development())?;
    let test = data.load_cases(&split.test)?;
    let by_id: BTreeMap<&str, &Case> = dev.iter().map(|c| (c.id.as_str(), c)).collect();
    let pick = |ids: &[String]| -> Vec<Case> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };
    let run_fold = |fold: &Fold| -> Result<FoldOutcome> {
        let dir = fold_dir(out_dir, fold.index);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let fp = dir.join("fold.json");
        std::fs::write(&fp, serde_json::to_string_pretty(fold)? + "\n").map_err(|e| Error::io(&fp, e))?;
        log::info!("fold {}: {} train, {} validation", fold.index, fold.train.len(), fold.validation.len());
        let outcome = run_training(&pick(&fold.train), &pick(&fold.validation), &test, cfg, &dir)?;
        Ok(FoldOutcome {
            fold: fold.clone(),
            outcome,
        })
    };
    let results: Vec<FoldOutcome> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = folds.iter().map(|f| s.spawn(|| run_fold(f))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        folds.iter().map(run_fold).collect::<Result<Vec<_>>>()?
    };
    let reports: Vec<&MetricsReport> = results.iter().map(|r| &r.outcome.report).collect();
    let summary = summarize_folds(&reports);
    let outcome = CvOutcome {
        test: split.test.clone(),
        folds: results,
        summary,
    };
    let sp = out_dir.join("summary.json");
    std::fs::write(&sp, serde_json::to_string_pretty(&outcome.summary)? + "\n").map_err(|e| Error::io(&sp, e))?;
    let rows: Vec<(String, &MetricsReport)> = outcome
        .folds
        .iter()
        .map(|f| (format!("{} fold {}", cfg.variant, f.fold.index), &f.outcome.report))
        .collect();
    let tp = out_dir.join("summary.txt");
    let mut text = render_table(&rows);
    text.push_str(&render_cv_summary(&outcome.summary, cfg.variant));
    std::fs::write(&tp, text).map_err(|e| Error::io(&tp, e))?;
    Ok(outcome)
}

pub fn render_cv_summary(s: &CvSummary, variant: Variant) -> String {
    let mut out = format!("\n{variant} across folds (mean ± sd of fold means)\n");
    for (zone, d) in &s.dsc {
        let sd = |x: Option<f64>| x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
        let mad = s.mad.get(zone).copied().flatten();
        let _ = writeln!(
            out,
            "{zone:<11} DSC(%) {:.2}±{}  MAD {}",
            d.mean * 100.0,
            sd(d.sd.map(|v| v * 100.0)),
            mad.map(|m| format!("{:.2}±{}", m.mean, sd(m.sd))).unwrap_or_else(|| "n/a".into())
        );
    }
    out
}

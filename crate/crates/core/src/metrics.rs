//! Evaluation: per-zone Dice and mean absolute symmetric surface distance,
//! mean ± sample sd aggregation, a one-sided paired t-test and the report
//! table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::morphology::{boundary, count_true, squared_edt};
use crate::volume::{ensure_same_shape, Grid3, LabelMap, Spacing, ZoneLabel};

/// `2|P∩G| / (|P|+|G|)`; two empty sets score 1.
pub fn dsc(pred: &Grid3<bool>, gt: &Grid3<bool>) -> Result<f64> {
    ensure_same_shape(pred.shape(), gt.shape(), "dsc")?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    Ok(if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnits {
    #[default]
    Millimetres,
    Voxels,
}

/// Mean absolute symmetric distance between the 6-neighbourhood boundaries
/// of two masks; `None` when either mask is empty.
pub fn mad(pred: &Grid3<bool>, gt: &Grid3<bool>, spacing: Spacing) -> Result<Option<f64>> {
    ensure_same_shape(pred.shape(), gt.shape(), "mad")?;
    if count_true(pred) == 0 || count_true(gt) == 0 {
        return Ok(None);
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (dp, dg) = (squared_edt(&bp, spacing), squared_edt(&bg, spacing));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..bp.len() {
        if bp[i] {
            total += dg[i].sqrt();
            count += 1;
        }
        if bg[i] {
            total += dp[i].sqrt();
            count += 1;
        }
    }
    Ok(Some(total / count as f64))
}

pub fn mad_in(pred: &Grid3<bool>, gt: &Grid3<bool>, spacing: Spacing, units: DistanceUnits) -> Result<Option<f64>> {
    match units {
        DistanceUnits::Millimetres => mad(pred, gt, spacing),
        DistanceUnits::Voxels => mad(pred, gt, Spacing::ISOTROPIC),
    }
}

/// JSON cannot carry infinities; they are written as strings.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    #[serde(with = "lenient_f64")]
    pub t_statistic: f64,
    pub p_value: f64,
    pub dof: usize,
    pub significant: bool,
    pub mean_difference: f64,
    /// Zero variance of the differences; `p_value` follows the fixed rule.
    pub degenerate: bool,
}

/// One-sided paired t-test of `mean(a − b) > 0`.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Precondition(format!("paired t-test needs n >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Precondition(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    let (t, p, degenerate) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 0.5, true)
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0, true)
        } else {
            (f64::NEG_INFINITY, 1.0, true)
        }
    } else {
        let t = mean / (var.sqrt() / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Precondition(e.to_string()))?;
        (t, dist.sf(t), false)
    };
    Ok(TTestResult {
        t_statistic: t,
        p_value: p,
        dof,
        significant: p < alpha,
        mean_difference: mean,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneScore {
    pub dsc: f64,
    /// Absent when either the prediction or the ground truth is empty.
    pub mad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub zones: BTreeMap<ZoneLabel, ZoneScore>,
}

impl CaseScores {
    pub fn score(&self, zone: ZoneLabel) -> &ZoneScore {
        &self.zones[&zone]
    }

    /// Mean over the foreground zones (those with a value, for MAD).
    pub fn zones_avg(&self) -> ZoneScore {
        let fg = ZoneLabel::FOREGROUND;
        let dsc = fg.iter().map(|z| self.zones[z].dsc).sum::<f64>() / fg.len() as f64;
        let mads: Vec<f64> = fg.iter().filter_map(|z| self.zones[z].mad).collect();
        ZoneScore {
            dsc,
            mad: (!mads.is_empty()).then(|| mads.iter().sum::<f64>() / mads.len() as f64),
        }
    }
}

/// Mean and sample standard deviation (`None` below two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(Summary { mean, sd, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneAggregate {
    pub dsc: Summary,
    pub mad: Option<Summary>,
    /// Cases whose MAD was undefined and left out.
    pub mad_absent: usize,
}

fn aggregate(scores: &[ZoneScore]) -> Option<ZoneAggregate> {
    let dsc = summarize(&scores.iter().map(|s| s.dsc).collect::<Vec<_>>())?;
    let mads: Vec<f64> = scores.iter().filter_map(|s| s.mad).collect();
    Some(ZoneAggregate {
        dsc,
        mad: summarize(&mads),
        mad_absent: scores.len() - mads.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub units: DistanceUnits,
    pub per_case: Vec<CaseScores>,
    pub aggregate: BTreeMap<ZoneLabel, ZoneAggregate>,
    /// Per-case mean over the four foreground zones, then aggregated.
    pub zones_avg: ZoneAggregate,
}

impl MetricsReport {
    pub fn from_cases(per_case: Vec<CaseScores>, units: DistanceUnits) -> Result<Self> {
        if per_case.is_empty() {
            return Err(Error::Precondition("a report needs at least one case".into()));
        }
        let mut agg = BTreeMap::new();
        for z in ZoneLabel::ALL {
            let scores: Vec<ZoneScore> = per_case.iter().map(|c| *c.score(z)).collect();
            agg.insert(z, aggregate(&scores).expect("non-empty"));
        }
        let avg: Vec<ZoneScore> = per_case.iter().map(CaseScores::zones_avg).collect();
        Ok(Self {
            units,
            zones_avg: aggregate(&avg).expect("non-empty"),
            aggregate: agg,
            per_case,
        })
    }

    pub fn case(&self, id: &str) -> Option<&CaseScores> {
        self.per_case.iter().find(|c| c.case_id == id)
    }

    pub fn mean_foreground_dsc(&self) -> f64 {
        self.zones_avg.dsc.mean
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn score_case(id: &str, pred: &LabelMap, gt: &LabelMap, units: DistanceUnits) -> Result<CaseScores> {
    ensure_same_shape(pred.shape(), gt.shape(), &format!("case {id}"))?;
    let mut zones = BTreeMap::new();
    for z in ZoneLabel::ALL {
        let (p, g) = (pred.mask(z), gt.mask(z));
        zones.insert(
            z,
            ZoneScore {
                dsc: dsc(&p, &g)?,
                mad: mad_in(&p, &g, gt.spacing, units)?,
            },
        );
    }
    Ok(CaseScores {
        case_id: id.to_string(),
        zones,
    })
}

/// Scores every listed case; all of them must have a prediction and a
/// ground truth. Distances use the ground truth's spacing.
pub fn build_report(
    cases: &[String],
    predictions: &BTreeMap<String, LabelMap>,
    ground_truths: &BTreeMap<String, LabelMap>,
    units: DistanceUnits,
) -> Result<MetricsReport> {
    let missing: Vec<String> = cases
        .iter()
        .filter(|c| !predictions.contains_key(*c) || !ground_truths.contains_key(*c))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCases(missing));
    }
    let per_case = cases
        .iter()
        .map(|c| score_case(c, &predictions[c], &ground_truths[c], units))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(per_case, units)
}

fn fmt_summary(s: Option<&Summary>, scale: f64) -> String {
    match s {
        None => "n/a".into(),
        Some(s) => match s.sd {
            Some(sd) => format!("{:.2}±{:.2}", s.mean * scale, sd * scale),
            None => format!("{:.2}", s.mean * scale),
        },
    }
}

/// Text table with one row per model and, per zone plus the zone average,
/// a DSC (%) and a MAD column.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let cols: Vec<String> = ZoneLabel::FOREGROUND
        .iter()
        .map(|z| z.name().to_string())
        .chain(std::iter::once("Zones Avg.".to_string()))
        .collect();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let cell = 13;
    let unit = rows.first().map(|(_, r)| r.units).unwrap_or_default();
    let mad_head = match unit {
        DistanceUnits::Millimetres => "MAD(mm)",
        DistanceUnits::Voxels => "MAD(vox)",
    };
    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "");
    for c in &cols {
        let _ = write!(out, " | {:^w$}", c, w = 2 * cell + 1);
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "Model");
    for _ in &cols {
        let _ = write!(out, " | {:^cell$} {:^cell$}", "DSC(%)", mad_head);
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + cols.len() * (2 * cell + 4)));
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:name_w$}");
        let aggs = ZoneLabel::FOREGROUND
            .iter()
            .map(|z| &r.aggregate[z])
            .chain(std::iter::once(&r.zones_avg));
        for a in aggs {
            let _ = write!(
                out,
                " | {:^cell$} {:^cell$}",
                fmt_summary(Some(&a.dsc), 100.0),
                fmt_summary(a.mad.as_ref(), 1.0)
            );
        }
        out.push('\n');
    }
    out
}

/// Per-zone comparison of two reports on their shared cases: DSC tests
/// `a > b`, MAD tests `a < b` (lower distance is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cases: Vec<String>,
    pub dsc: BTreeMap<String, TTestResult>,
    pub mad: BTreeMap<String, Option<TTestResult>>,
}

pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, alpha: f64) -> Result<Comparison> {
    let ids: Vec<String> = a.per_case.iter().map(|c| c.case_id.clone()).collect();
    let missing: Vec<String> = ids.iter().filter(|id| b.case(id).is_none()).cloned().collect();
    let extra: Vec<String> = b
        .per_case
        .iter()
        .filter(|c| a.case(&c.case_id).is_none())
        .map(|c| c.case_id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::MissingCases(missing.into_iter().chain(extra).collect()));
    }
    let pairs: Vec<(&CaseScores, &CaseScores)> = ids.iter().map(|id| (a.case(id).expect("a"), b.case(id).expect("b"))).collect();
    let mut dsc_tests = BTreeMap::new();
    let mut mad_tests = BTreeMap::new();
    let mut run = |name: String, get: &dyn Fn(&CaseScores) -> ZoneScore| -> Result<()> {
        let (sa, sb): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(x, y)| (get(x).dsc, get(y).dsc)).unzip();
        dsc_tests.insert(name.clone(), paired_t_test_one_sided(&sa, &sb, alpha)?);
        let mads: Option<(Vec<f64>, Vec<f64>)> = pairs
            .iter()
            .map(|(x, y)| Some((get(x).mad?, get(y).mad?)))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().unzip());
        let mad_test = match mads {
            Some((ma, mb)) if ma.len() >= 2 => Some(paired_t_test_one_sided(&mb, &ma, alpha)?),
            _ => None,
        };
        mad_tests.insert(name, mad_test);
        Ok(())
    };
    for z in ZoneLabel::FOREGROUND {
        run(z.name().to_string(), &|c: &CaseScores| *c.score(z))?;
    }
    run("Zones Avg.".to_string(), &|c: &CaseScores| c.zones_avg())?;
    Ok(Comparison {
        cases: ids,
        dsc: dsc_tests,
        mad: mad_tests,
    })
}

pub fn render_comparison(c: &Comparison, alpha: f64) -> String {
    let mut out = format!("one-sided paired t-tests on {} cases, alpha = {alpha}\n", c.cases.len());
    let _ = writeln!(out, "{:<11} {:>7} {:>9} {:>8} {:>4} {:>5}", "zone/metric", "", "t", "p", "dof", "sig");
    let mut line = |zone: &str, metric: &str, r: Option<&TTestResult>| {
        match r {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{:<11} {:>7} {:>9.4} {:>8.4} {:>4} {:>5}{}",
                    zone,
                    metric,
                    r.t_statistic,
                    r.p_value,
                    r.dof,
                    if r.significant { "yes" } else { "no" },
                    if r.degenerate { " (degenerate)" } else { "" }
                );
            }
            None => {
                let _ = writeln!(out, "{zone:<11} {metric:>7} {:>9}", "n/a");
            }
        }
    };
    for (zone, r) in &c.dsc {
        line(zone, "DSC", Some(r));
        line(zone, "MAD", c.mad.get(zone).and_then(|m| m.as_ref()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    #[test]
    fn dsc_counting_example() {
        let s = Shape3::new(1, 1, 3);
        let p = Grid3::from_vec(s, vec![true, true, false]).unwrap();
        let g = Grid3::from_vec(s, vec![true, false, false]).unwrap();
        assert!((dsc(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let e = Grid3::filled(s, false);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(mad(&e, &g, Spacing::ISOTROPIC).unwrap(), None);
    }

    #[test]
    fn degenerate_t_tests() {
        let r = paired_t_test_one_sided(&[1.0, 2.0], &[1.0, 2.0], 0.05).unwrap();
        assert!(r.degenerate && r.p_value == 0.5 && r.t_statistic == 0.0);
        let r = paired_t_test_one_sided(&[2.0, 3.0], &[1.0, 2.0], 0.05).unwrap();
        assert!(r.degenerate && r.p_value == 0.0 && r.significant);
        let r = paired_t_test_one_sided(&[1.0, 2.0], &[2.0, 3.0], 0.05).unwrap();
        assert!(r.degenerate && r.p_value == 1.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: TTestResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.t_statistic, f64::NEG_INFINITY);
        assert!(paired_t_test_one_sided(&[1.0], &[0.0], 0.05).is_err());
    }

    #[test]
    fn summary_uses_sample_sd() {
        let s = summarize(&[0.5, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.sd.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[1.0]).unwrap().sd, None);
    }
}

//! Subgroup accuracy and fairness metrics over labelled predictions.
//!
//! Everything is computed in percent at full precision; `round2` is for
//! display only.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered tuple of protected attribute values, e.g. `["black", "female"]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubgroupKey(pub Vec<String>);

impl SubgroupKey {
    pub fn new<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        Self(values.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub subgroup: SubgroupKey,
}

/// Standard deviation convention for the degree of bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by `G`.
    #[default]
    Population,
    /// Divide by `G − 1`.
    Sample,
}

impl std::str::FromStr for StdKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(Self::Population),
            "sample" => Ok(Self::Sample),
            other => Err(Error::Config(format!("unknown std kind `{other}`"))),
        }
    }
}

/// One-vs-rest confusion counts for a positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
    /// Exact-label agreement, which differs from `tp + tn` when K > 2.
    pub correct: usize,
}

impl Confusion {
    pub fn add(&mut self, r: &EvalRecord, positive: usize) {
        let (actual, predicted) = (r.true_label == positive, r.predicted_label == positive);
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
        self.correct += usize::from(r.true_label == r.predicted_label);
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| 100.0 * self.correct as f64 / self.total() as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| 100.0 * self.tp as f64 / p as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| 100.0 * self.fp as f64 / n as f64)
    }
}

fn check_records(records: &[EvalRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::EmptyInput("no evaluation records".into()));
    };
    let arity = first.subgroup.0.len();
    let mut problems = Vec::new();
    for r in records {
        if r.subgroup.0.is_empty() {
            problems.push(format!("record `{}` has an empty subgroup", r.id));
        } else if r.subgroup.0.len() != arity {
            problems.push(format!(
                "record `{}` has {} protected values, expected {arity}",
                r.id,
                r.subgroup.0.len()
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

/// Per-subgroup confusion counts, sorted by key.
pub fn confusion_by_group(records: &[EvalRecord], positive: usize) -> Result<BTreeMap<SubgroupKey, Confusion>> {
    check_records(records)?;
    let mut out: BTreeMap<SubgroupKey, Confusion> = BTreeMap::new();
    for r in records {
        out.entry(r.subgroup.clone()).or_default().add(r, positive);
    }
    Ok(out)
}

pub fn overall_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records".into()));
    }
    let correct = records.iter().filter(|r| r.true_label == r.predicted_label).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

pub fn subgroup_accuracy(records: &[EvalRecord]) -> Result<BTreeMap<SubgroupKey, f64>> {
    Ok(confusion_by_group(records, 0)?
        .into_iter()
        .filter_map(|(k, c)| c.accuracy().map(|a| (k, a)))
        .collect())
}

/// Groups without a positive record are left out.
pub fn subgroup_tpr(records: &[EvalRecord], positive: usize) -> Result<BTreeMap<SubgroupKey, f64>> {
    let mut out = BTreeMap::new();
    for (k, c) in confusion_by_group(records, positive)? {
        match c.tpr() {
            Some(t) => {
                out.insert(k, t);
            }
            None => log::warn!("subgroup {k} has no positives; excluded from TPR"),
        }
    }
    Ok(out)
}

/// Standard deviation of subgroup accuracies.
pub fn degree_of_bias(accs: &[f64], kind: StdKind) -> Result<f64> {
    if accs.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "degree of bias needs at least 2 subgroups, got {}",
            accs.len()
        )));
    }
    let g = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / g;
    let ss: f64 = accs.iter().map(|a| (a - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => g,
        StdKind::Sample => g - 1.0,
    };
    Ok((ss / denom).sqrt())
}

/// Best subgroup accuracy over worst.
pub fn max_min_ratio(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::EmptyInput("no subgroup accuracies".into()));
    }
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::DivisionDegenerate(format!(
            "worst subgroup accuracy is {min}; the ratio is undefined"
        )));
    }
    Ok(max / min)
}

/// Absolute gap between two groups' true positive rates.
pub fn tpr_gap(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

fn two_groups(records: &[EvalRecord], positive: usize) -> Result<[(SubgroupKey, Confusion); 2]> {
    let groups = confusion_by_group(records, positive)?;
    if groups.len() != 2 {
        return Err(Error::UnsupportedArity(groups.len()));
    }
    let mut it = groups.into_iter();
    Ok([it.next().expect("two"), it.next().expect("two")])
}

/// Equal-opportunity violation between exactly two protected groups.
pub fn deo(records: &[EvalRecord], positive: usize) -> Result<f64> {
    let [(ka, a), (kb, b)] = two_groups(records, positive)?;
    let tpr = |k: &SubgroupKey, c: &Confusion| {
        c.tpr()
            .ok_or_else(|| Error::UndefinedMetric(format!("subgroup {k} has no positive records")))
    };
    Ok(tpr_gap(tpr(&ka, &a)?, tpr(&kb, &b)?))
}

/// Equalized-odds violation: TPR gap plus FPR gap.
pub fn deodds(records: &[EvalRecord], positive: usize) -> Result<f64> {
    let [(ka, a), (kb, b)] = two_groups(records, positive)?;
    let rates = |k: &SubgroupKey, c: &Confusion| match (c.tpr(), c.fpr()) {
        (Some(t), Some(f)) => Ok((t, f)),
        _ => Err(Error::UndefinedMetric(format!(
            "subgroup {k} lacks positive or negative records"
        ))),
    };
    let (ta, fa) = rates(&ka, &a)?;
    let (tb, fb) = rates(&kb, &b)?;
    Ok((ta - tb).abs() + (fa - fb).abs())
}

/// Two-decimal rounding for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub subgroup: SubgroupKey,
    pub count: usize,
    pub accuracy: f64,
    pub tpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValue {
    pub subgroup: SubgroupKey,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub positive_class: usize,
    pub std_kind: StdKind,
    /// Expected subgroups; any without records are reported as issues.
    pub expected_groups: Option<Vec<SubgroupKey>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub positive_class: usize,
    pub std_kind: StdKind,
    pub records: usize,
    pub groups: Vec<GroupRow>,
    pub overall_accuracy: f64,
    pub overall_tpr: Option<f64>,
    pub dob: Option<f64>,
    pub max_min_ratio: Option<f64>,
    pub deo: Option<f64>,
    pub deodds: Option<f64>,
    pub max_accuracy: Option<GroupValue>,
    pub min_accuracy: Option<GroupValue>,
    pub max_tpr: Option<GroupValue>,
    pub min_tpr: Option<GroupValue>,
    /// Metrics that could not be computed, with the reason.
    pub issues: Vec<String>,
}

fn extreme(rows: impl Iterator<Item = (SubgroupKey, f64)>, max: bool) -> Option<GroupValue> {
    // BTreeMap order makes ties resolve to the first key.
    rows.fold(None, |best: Option<GroupValue>, (k, v)| match best {
        Some(b) if (max && v <= b.value) || (!max && v >= b.value) => Some(b),
        _ => Some(GroupValue { subgroup: k, value: v }),
    })
}

/// Assembles every metric from one record set. Metrics whose preconditions
/// fail are `None` and explained in `issues`.
pub fn build_report(records: &[EvalRecord], opts: &ReportOptions) -> Result<SubgroupReport> {
    let positive = opts.positive_class;
    let groups = confusion_by_group(records, positive)?;
    let mut issues = Vec::new();
    if let Some(expected) = &opts.expected_groups {
        for k in expected.iter().filter(|k| !groups.contains_key(k)) {
            log::warn!("subgroup {k} has no records; excluded");
            issues.push(format!("subgroup {k} has no records and was excluded"));
        }
    }
    let rows: Vec<GroupRow> = groups
        .iter()
        .map(|(k, c)| GroupRow {
            subgroup: k.clone(),
            count: c.total(),
            accuracy: c.accuracy().expect("non-empty group"),
            tpr: c.tpr(),
        })
        .collect();
    for r in rows.iter().filter(|r| r.tpr.is_none()) {
        issues.push(format!("subgroup {} has no positives; excluded from TPR", r.subgroup));
    }
    let mut total = Confusion::default();
    for r in records {
        total.add(r, positive);
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let mut keep = |r: Result<f64>, name: &str| match r {
        Ok(v) => Some(v),
        Err(e) => {
            issues.push(format!("{name}: {e}"));
            None
        }
    };
    let dob = keep(degree_of_bias(&accs, opts.std_kind), "dob");
    let ratio = keep(max_min_ratio(&accs), "max_min_ratio");
    let deo_v = keep(deo(records, positive), "deo");
    let deodds_v = keep(deodds(records, positive), "deodds");
    let acc_iter = || rows.iter().map(|r| (r.subgroup.clone(), r.accuracy));
    let tpr_iter = || rows.iter().filter_map(|r| r.tpr.map(|t| (r.subgroup.clone(), t)));
    Ok(SubgroupReport {
        positive_class: positive,
        std_kind: opts.std_kind,
        records: records.len(),
        overall_accuracy: overall_accuracy(records)?,
        overall_tpr: total.tpr(),
        dob,
        max_min_ratio: ratio,
        deo: deo_v,
        deodds: deodds_v,
        max_accuracy: extreme(acc_iter(), true),
        min_accuracy: extreme(acc_iter(), false),
        max_tpr: extreme(tpr_iter(), true),
        min_tpr: extreme(tpr_iter(), false),
        groups: rows,
        issues,
    })
}

impl SubgroupReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Long-format CSV with header `metric,subgroup,value`, at full precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "subgroup", "value"])?;
        let mut row = |metric: &str, group: String, value: Option<f64>| {
            w.write_record([metric.to_string(), group, value.map(|v| v.to_string()).unwrap_or_default()])
        };
        for g in &self.groups {
            row("count", g.subgroup.to_string(), Some(g.count as f64))?;
            row("accuracy", g.subgroup.to_string(), Some(g.accuracy))?;
            row("tpr", g.subgroup.to_string(), g.tpr)?;
        }
        row("overall_accuracy", String::new(), Some(self.overall_accuracy))?;
        row("overall_tpr", String::new(), self.overall_tpr)?;
        row("dob", String::new(), self.dob)?;
        row("max_min_ratio", String::new(), self.max_min_ratio)?;
        row("deo", String::new(), self.deo)?;
        row("deodds", String::new(), self.deodds)?;
        for (name, gv) in [
            ("max_accuracy", &self.max_accuracy),
            ("min_accuracy", &self.min_accuracy),
            ("max_tpr", &self.max_tpr),
            ("min_tpr", &self.min_tpr),
        ] {
            if let Some(gv) = gv {
                row(name, gv.subgroup.to_string(), Some(gv.value))?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv report>", e))?;
        Ok(())
    }
}

impl fmt::Display for SubgroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|v| format!("{:.2}", round2(v))).unwrap_or_else(|| "n/a".into());
        writeln!(f, "{:<24} {:>8} {:>9} {:>8}", "subgroup", "n", "accuracy", "tpr")?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<24} {:>8} {:>9.2} {:>8}",
                g.subgroup.to_string(),
                g.count,
                round2(g.accuracy),
                opt(g.tpr)
            )?;
        }
        writeln!(f, "overall accuracy {:.2}", round2(self.overall_accuracy))?;
        writeln!(
            f,
            "DoB {}  Max/Min {}  DEO {}  DEOdds {}",
            opt(self.dob),
            self.max_min_ratio.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
            opt(self.deo),
            opt(self.deodds)
        )?;
        for issue in &self.issues {
            writeln!(f, "note: {issue}")?;
        }
        Ok(())
    }
}

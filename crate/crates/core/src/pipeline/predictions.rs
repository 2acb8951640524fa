//! Prediction CSV: `id,true_label,predicted_label,<protected...>,score_<class>...`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fairness::{EvalRecord, SubgroupKey};

use super::manifest::vocabulary;

const SCORE_PREFIX: &str = "score_";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub true_label: String,
    pub predicted_label: String,
    pub protected: Vec<String>,
    /// Fused score per class, in vocabulary order.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub protected: Vec<String>,
    /// Class vocabulary; from the score columns when present.
    pub classes: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "true_label".into(), "predicted_label".into()];
        header.extend(self.protected.iter().cloned());
        let with_scores = self.rows.iter().all(|r| r.scores.len() == self.classes.len());
        if with_scores {
            header.extend(self.classes.iter().map(|c| format!("{SCORE_PREFIX}{c}")));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.true_label.clone(), r.predicted_label.clone()];
            rec.extend(r.protected.iter().cloned());
            if with_scores {
                rec.extend(r.scores.iter().map(f64::to_string));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        super::write_atomic(path, &bytes)
    }

    /// Reads a predictions file, keeping the `protected` columns as the
    /// subgroup key in the given order.
    pub fn read(path: &Path, protected: &[String]) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut missing = Vec::new();
        let mut need = |name: &str| {
            let c = col(name);
            if c.is_none() {
                missing.push(format!("{}: missing column `{name}`", path.display()));
            }
            c.unwrap_or(0)
        };
        let id = need("id");
        let truth = need("true_label");
        let pred = need("predicted_label");
        let prot: Vec<usize> = protected.iter().map(|p| need(p)).collect();
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        let score_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(SCORE_PREFIX).map(|c| (i, c.to_string())))
            .collect();
        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| rec.get(c).unwrap_or("").to_string();
            let scores = score_cols
                .iter()
                .map(|(c, _)| {
                    get(*c).parse::<f64>().map_err(|e| {
                        Error::Validation(vec![format!("line {}: bad score ({e})", line + 2)])
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(PredictionRow {
                id: get(id),
                true_label: get(truth),
                predicted_label: get(pred),
                protected: prot.iter().map(|&c| get(c)).collect(),
                scores,
            });
        }
        let classes = if score_cols.is_empty() {
            vocabulary(rows.iter().flat_map(|r| [r.true_label.as_str(), r.predicted_label.as_str()]))
        } else {
            score_cols.into_iter().map(|(_, c)| c).collect()
        };
        Ok(Self {
            protected: protected.to_vec(),
            classes,
            rows,
        })
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Config(format!("label `{label}` not among classes {:?}", self.classes)))
    }

    pub fn eval_records(&self) -> Result<Vec<EvalRecord>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(EvalRecord {
                    id: r.id.clone(),
                    true_label: self.class_index(&r.true_label)?,
                    predicted_label: self.class_index(&r.predicted_label)?,
                    subgroup: SubgroupKey(r.protected.clone()),
                })
            })
            .collect()
    }
}

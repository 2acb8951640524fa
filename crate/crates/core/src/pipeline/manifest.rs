//! CSV dataset manifests: `path,<target>,<protected...>,split`.
//!
//! Protected attribute values live in a separate structure that training
//! code never receives; [`DatasetManifest::training_samples`] yields images
//! and class indices only.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::SubgroupKey;
use crate::training::TrainSample;

pub const PATH_COLUMN: &str = "path";
pub const SPLIT_COLUMN: &str = "split";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestSchema {
    pub target: String,
    pub protected: Vec<String>,
    /// Fixed class vocabulary; inferred from the file when `None`.
    pub classes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Path exactly as written in the manifest.
    pub id: String,
    pub path: PathBuf,
    pub target: usize,
    pub split: Split,
}

/// Evaluation-only columns, row-aligned with the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectedAttributes {
    pub columns: Vec<String>,
    pub vocabularies: Vec<Vec<String>>,
    values: Vec<Vec<String>>,
}

impl ProtectedAttributes {
    pub fn values(&self, row: usize) -> &[String] {
        &self.values[row]
    }

    pub fn key(&self, row: usize) -> SubgroupKey {
        SubgroupKey(self.values[row].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub classes: Vec<String>,
    protected: ProtectedAttributes,
}

/// Sorted unique values, numerically when every value is an integer.
pub fn vocabulary<'a>(values: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = values.into_iter().collect();
    let mut v: Vec<String> = set.into_iter().map(String::from).collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().expect("checked"));
    }
    v
}

pub fn load_manifest(path: &Path, schema: &ManifestSchema) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut errors = Vec::new();
    let mut find = |name: &str, role: &str| {
        let idx = column(name);
        if idx.is_none() {
            errors.push(format!("missing {role} column `{name}`"));
        }
        idx
    };
    let path_col = find(PATH_COLUMN, "path");
    let target_col = find(&schema.target, "target");
    let split_col = find(SPLIT_COLUMN, "split");
    let protected_cols: Vec<Option<usize>> = schema.protected.iter().map(|p| find(p, "protected")).collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let (path_col, target_col, split_col) = (path_col.unwrap(), target_col.unwrap(), split_col.unwrap());
    let protected_cols: Vec<usize> = protected_cols.into_iter().map(Option::unwrap).collect();

    let base = path.parent().unwrap_or(Path::new("."));
    let mut raw = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let get = |c: usize| record.get(c).unwrap_or("").to_string();
        let id = get(path_col);
        let resolved = base.join(&id);
        if id.is_empty() || !resolved.is_file() {
            errors.push(format!("line {line}: image `{id}` not found"));
        }
        let split = match get(split_col).parse::<Split>() {
            Ok(s) => Some(s),
            Err(e) => {
                errors.push(format!("line {line}: {e}"));
                None
            }
        };
        let protected: Vec<String> = protected_cols.iter().map(|&c| get(c)).collect();
        raw.push((id, resolved, get(target_col), split, protected));
    }
    if raw.is_empty() {
        errors.push(format!("{} has no rows", path.display()));
    }

    let classes = match &schema.classes {
        Some(c) => c.clone(),
        None => vocabulary(raw.iter().map(|r| r.2.as_str())),
    };
    let mut rows = Vec::with_capacity(raw.len());
    let mut values = Vec::with_capacity(raw.len());
    for (i, (id, resolved, label, split, protected)) in raw.into_iter().enumerate() {
        let target = classes.iter().position(|c| *c == label);
        if target.is_none() {
            errors.push(format!("line {}: label `{label}` not in vocabulary {classes:?}", i + 2));
        }
        if let (Some(target), Some(split)) = (target, split) {
            rows.push(ManifestRow {
                id,
                path: resolved,
                target,
                split,
            });
        }
        values.push(protected);
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let vocabularies = (0..schema.protected.len())
        .map(|j| vocabulary(values.iter().map(|v| v[j].as_str())))
        .collect();
    Ok(DatasetManifest {
        rows,
        classes,
        protected: ProtectedAttributes {
            columns: schema.protected.clone(),
            vocabularies,
            values,
        },
    })
}

impl DatasetManifest {
    /// Row indices of one split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    /// Decodes the images of `split`. Only the path and class are read.
    pub fn training_samples(&self, split: Split) -> Result<Vec<TrainSample>> {
        self.split_indices(split)
            .into_iter()
            .map(|i| {
                let row = &self.rows[i];
                Ok(TrainSample {
                    image: load_image(&row.path)?,
                    target: row.target,
                })
            })
            .collect()
    }

    pub fn evaluation_attributes(&self) -> &ProtectedAttributes {
        &self.protected
    }
}

pub fn load_image(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture(csv: &str, images: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for name in images {
            image::RgbImage::new(2, 2).save(dir.path().join(name)).unwrap();
        }
        let mut f = std::fs::File::create(dir.path().join("m.csv")).unwrap();
        f.write_all(csv.as_bytes()).unwrap();
        dir
    }

    fn schema(target: &str, protected: &[&str]) -> ManifestSchema {
        ManifestSchema {
            target: target.into(),
            protected: protected.iter().map(|s| s.to_string()).collect(),
            classes: None,
        }
    }

    #[test]
    fn three_rows_binary_vocabulary() {
        let dir = fixture(
            "path,target,gender,split\na.png,1,f,train\nb.png,0,m,train\nc.png,1,m,test\n",
            &["a.png", "b.png", "c.png"],
        );
        let m = load_manifest(&dir.path().join("m.csv"), &schema("target", &["gender"])).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.classes, vec!["0", "1"]);
        assert_eq!(m.evaluation_attributes().vocabularies[0], vec!["f", "m"]);
        assert_eq!(m.split_indices(Split::Train), vec![0, 1]);
    }

    #[test]
    fn missing_target_column_is_named() {
        let dir = fixture("path,label,split\na.png,1,train\n", &["a.png"]);
        match load_manifest(&dir.path().join("m.csv"), &schema("target", &[])) {
            Err(Error::Validation(items)) => assert!(items.iter().any(|i| i.contains("`target`"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn problems_are_itemised() {
        let dir = fixture(
            "path,target,split\na.png,1,train\nmissing.png,0,train\nb.png,2,holdout\n",
            &["a.png", "b.png"],
        );
        let mut s = schema("target", &[]);
        s.classes = Some(vec!["0".into(), "1".into()]);
        match load_manifest(&dir.path().join("m.csv"), &s) {
            Err(Error::Validation(items)) => assert_eq!(items.len(), 3, "{items:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn celeba_style_file_projects_to_one_target() {
        let attrs: Vec<String> = (0..40).map(|i| format!("attr{i:02}")).collect();
        let mut csv = format!("path,{},split\n", attrs.join(","));
        for (i, name) in ["a.png", "b.png", "c.png", "d.png"].iter().enumerate() {
            let vals: Vec<&str> = (0..40).map(|j| if (i + j) % 3 == 0 { "1" } else { "-1" }).collect();
            csv.push_str(&format!("{name},{},train\n", vals.join(",")));
        }
        let dir = fixture(&csv, &["a.png", "b.png", "c.png", "d.png"]);
        let m = load_manifest(&dir.path().join("m.csv"), &schema("attr05", &["attr20"])).unwrap();
        assert_eq!(m.classes, vec!["-1", "1"]);
        let expected: Vec<usize> = (0..4).map(|i| usize::from((i + 5) % 3 == 0)).collect();
        assert_eq!(m.rows.iter().map(|r| r.target).collect::<Vec<_>>(), expected);
        assert_eq!(m.evaluation_attributes().columns, vec!["attr20"]);
        assert_eq!(m.evaluation_attributes().key(0).0.len(), 1);
    }

    #[test]
    fn numeric_vocabularies_sort_numerically() {
        assert_eq!(vocabulary(["10", "2", "-1"]), vec!["-1", "2", "10"]);
        assert_eq!(vocabulary(["b", "a", "b"]), vec!["a", "b"]);
    }
}

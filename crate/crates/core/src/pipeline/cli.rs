//! `fairsight train | evaluate | metrics | visualize`.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::heatmap::export_heatmaps;
use super::manifest::{load_image, load_manifest, DatasetManifest, ManifestSchema, Split};
use super::predictions::{PredictionRow, PredictionTable};
use super::write_atomic;
use crate::backbone::descriptor_by_name;
use crate::error::{Error, Result};
use crate::fairness::{build_report, ReportOptions, SubgroupReport};
use crate::inference::{predict_images, predict_images_single, HeadSource, InputKind, ScoreSource};
use crate::model::{ExpertModel, ForwardSpec};
use crate::training::{fit, Scheme};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn split_arg() -> Arg {
    Arg::new("split").long("split").default_value("test").help("train, val or test")
}

pub fn command() -> Command {
    let overrides = RunConfig::keys().into_iter().map(|k| {
        Arg::new(k.clone())
            .long(k)
            .value_name("VALUE")
            .global(true)
            .help_heading("Configuration overrides")
    });
    Command::new("fairsight")
        .about("Multi-expert attention classifier with subgroup fairness reporting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(path_arg("config", "TOML run configuration").global(true))
        .args(overrides)
        .subcommand(
            Command::new("train")
                .about("Train on the manifest's train split, early-stopping on val")
                .arg(path_arg("manifest", "dataset manifest CSV").required(true)),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Fused predictions for one split")
                .arg(path_arg("checkpoint", "trained checkpoint").required(true))
                .arg(path_arg("manifest", "dataset manifest CSV").required(true))
                .arg(split_arg())
                .arg(path_arg("predictions", "output CSV [default: <output_dir>/predictions.csv]")),
        )
        .subcommand(
            Command::new("metrics")
                .about("Subgroup accuracy and fairness report from a predictions CSV")
                .arg(path_arg("predictions", "predictions CSV").required(true)),
        )
        .subcommand(
            Command::new("visualize")
                .about("Attention heatmaps for the first images of a split")
                .arg(path_arg("checkpoint", "trained checkpoint").required(true))
                .arg(path_arg("manifest", "dataset manifest CSV").required(true))
                .arg(split_arg())
                .arg(
                    Arg::new("limit")
                        .long("limit")
                        .default_value("8")
                        .value_parser(clap::value_parser!(usize)),
                ),
        )
}

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let path = |k: &str| sub.get_one::<PathBuf>(k).cloned();
    match name {
        "train" => {
            let cfg = resolve(sub, None)?;
            train(&cfg, &path("manifest").expect("required")).map(drop)
        }
        "evaluate" => {
            let ck = load_checkpoint(&path("checkpoint").expect("required"))?;
            let cfg = resolve(sub, Some(ck.config.clone()))?;
            ck.check_compatible(&cfg)?;
            let split: Split = sub.get_one::<String>("split").expect("default").parse()?;
            let out = path("predictions").unwrap_or_else(|| cfg.output_dir.join(PREDICTIONS));
            let manifest = load_manifest(&path("manifest").expect("required"), &eval_schema(&cfg, &ck))?;
            let table = evaluate_split(&ck.model, &cfg, &manifest, split)?;
            prepare_output(&cfg)?;
            table.write(&out)?;
            let correct = table.rows.iter().filter(|r| r.true_label == r.predicted_label).count();
            println!(
                "{} {split} images, accuracy {:.2}%, predictions in {}",
                table.rows.len(),
                100.0 * correct as f64 / table.rows.len().max(1) as f64,
                out.display()
            );
            Ok(())
        }
        "metrics" => {
            let cfg = resolve(sub, None)?;
            let table = PredictionTable::read(&path("predictions").expect("required"), &cfg.protected)?;
            let report = report_from_table(&table, &cfg)?;
            prepare_output(&cfg)?;
            write_atomic(&cfg.output_dir.join(REPORT_JSON), report.to_json()?.as_bytes())?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            write_atomic(&cfg.output_dir.join(REPORT_CSV), &csv)?;
            print!("{report}");
            Ok(())
        }
        "visualize" => {
            let ck = load_checkpoint(&path("checkpoint").expect("required"))?;
            let cfg = resolve(sub, Some(ck.config.clone()))?;
            ck.check_compatible(&cfg)?;
            let split: Split = sub.get_one::<String>("split").expect("default").parse()?;
            let limit = *sub.get_one::<usize>("limit").expect("default");
            let manifest = load_manifest(&path("manifest").expect("required"), &eval_schema(&cfg, &ck))?;
            prepare_output(&cfg)?;
            let files = visualize(&ck.model, &cfg, &manifest, split, limit)?;
            println!("wrote {} heatmaps under {}", files.len(), cfg.output_dir.join("heatmaps").display());
            Ok(())
        }
        other => unreachable!("unknown subcommand {other}"),
    }
}

/// File (or `base`), then the environment, then flags; validated.
pub fn resolve(m: &ArgMatches, base: Option<RunConfig>) -> Result<RunConfig> {
    let cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => base.unwrap_or_default(),
    };
    let keys = RunConfig::keys();
    let overrides: Vec<(&str, &str)> = keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.as_str(), v.as_str())))
        .collect();
    let cfg = cfg.with_env().with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and records the configuration in force.
pub fn prepare_output(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_atomic(&cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())
}

fn eval_schema(cfg: &RunConfig, ck: &Checkpoint) -> ManifestSchema {
    ManifestSchema {
        target: cfg.target.clone(),
        protected: cfg.protected.clone(),
        classes: Some(ck.classes.clone()),
    }
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log_path: PathBuf,
}

/// Trains from a manifest. Protected columns are not even parsed here.
pub fn train(cfg: &RunConfig, manifest_path: &Path) -> Result<TrainRun> {
    let schema = ManifestSchema {
        target: cfg.target.clone(),
        protected: Vec::new(),
        classes: None,
    };
    let manifest = load_manifest(manifest_path, &schema)?;
    let train = manifest.training_samples(Split::Train)?;
    let val = manifest.training_samples(Split::Val)?;
    prepare_output(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let desc = descriptor_by_name(&cfg.backbone, cfg.input_size)?;
    let model = ExpertModel::new(desc, &cfg.model_config(manifest.classes.len()), &mut rng)?;
    log::info!(
        "training {} experts on {} images ({} val), classes {:?}",
        model.expert_count(),
        train.len(),
        val.len(),
        manifest.classes
    );

    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let mut log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let classes = manifest.classes.clone();
    let outcome = fit(model, &train, &val, &cfg.preprocessor(), &cfg.train_config(), |record, model| {
        writeln!(log_file, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&log_path, e))?;
        let last = Checkpoint::new(cfg.clone(), classes.clone(), model.clone());
        save_checkpoint(&cfg.output_dir.join(LAST_CHECKPOINT), &last)
    })?;
    let checkpoint = Checkpoint::new(cfg.clone(), manifest.classes.clone(), outcome.model);
    save_checkpoint(&cfg.output_dir.join(CHECKPOINT), &checkpoint)?;
    println!(
        "best epoch {} of {}; checkpoint in {}",
        outcome.best_epoch + 1,
        outcome.log.len(),
        cfg.output_dir.join(CHECKPOINT).display()
    );
    Ok(TrainRun { checkpoint, log_path })
}

/// Fused predictions over `split` as a predictions table.
pub fn evaluate_split(
    model: &ExpertModel,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<PredictionTable> {
    let indices = manifest.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyInput(format!("manifest has no {split} rows")));
    }
    let attrs = manifest.evaluation_attributes();
    let pre = cfg.preprocessor();
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| load_image(&manifest.rows[i].path))
            .collect::<Result<Vec<_>>>()?;
        let scored: Vec<(usize, Vec<f64>)> = match cfg.scheme {
            Scheme::Mutual => predict_images(model, &pre, &images, cfg.batch_size, cfg.fusion)?
                .into_iter()
                .map(|b| (b.label, b.fused))
                .collect(),
            // a baseline only ever trains its deepest head
            Scheme::Baseline => {
                let source = ScoreSource {
                    head: HeadSource::Expert(model.expert_count() - 1),
                    input: InputKind::Raw,
                };
                predict_images_single(model, &pre, &images, cfg.batch_size, source)?
                    .into_iter()
                    .map(|s| (s.predicted_class(), s.scores))
                    .collect()
            }
        };
        for (&i, (label, scores)) in chunk.iter().zip(scored) {
            let row = &manifest.rows[i];
            rows.push(PredictionRow {
                id: row.id.clone(),
                true_label: manifest.classes[row.target].clone(),
                predicted_label: manifest.classes[label].clone(),
                protected: attrs.values(i).to_vec(),
                scores,
            });
        }
    }
    Ok(PredictionTable {
        protected: attrs.columns.clone(),
        classes: manifest.classes.clone(),
        rows,
    })
}

pub fn report_from_table(table: &PredictionTable, cfg: &RunConfig) -> Result<SubgroupReport> {
    let opts = ReportOptions {
        positive_class: table.class_index(&cfg.positive_label)?,
        std_kind: cfg.std_kind,
        expected_groups: None,
    };
    build_report(&table.eval_records()?, &opts)
}

pub fn visualize(
    model: &ExpertModel,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
    limit: usize,
) -> Result<Vec<PathBuf>> {
    let pre = cfg.preprocessor();
    let dir = cfg.output_dir.join("heatmaps");
    let indices: Vec<usize> = manifest.split_indices(split).into_iter().take(limit).collect();
    let mut files = Vec::new();
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| load_image(&manifest.rows[i].path))
            .collect::<Result<Vec<_>>>()?;
        let batch = pre.batch(&images);
        let pass = model.forward(&batch, &ForwardSpec::eval_all(model.expert_count()))?;
        let regions = model.propose_regions(&pass, &batch, false)?;
        for (j, (&i, img)) in chunk.iter().zip(&images).enumerate() {
            let maps: Vec<_> = regions.expert_maps.iter().map(|m| m[j].clone()).collect();
            let stem = Path::new(&manifest.rows[i].id)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("image{i}"));
            files.extend(export_heatmaps(img, &maps, &regions.overall_maps[j], &dir, &stem, cfg.heatmap_alpha)?);
        }
    }
    Ok(files)
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairsight::pipeline::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fairsight::pipeline::cli::{self, evaluate_split, report_from_table};
use fairsight::pipeline::config::{RunConfig, OUTPUT_ROOT_ENV};
use fairsight::pipeline::manifest::{load_manifest, ManifestSchema, Split};
use fairsight::pipeline::synthetic::{write_dataset, SplitSizes, ToySpec};
use fairsight::Error;

const SMALL: &[&str] = &[
    "--backbone", "toy5", "--input_size", "32", "--descriptor_len", "8", "--epochs", "2",
    "--batch_size", "8", "--learning_rate", "0.02", "--protected", "tint",
];

fn bin(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairsight"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove(OUTPUT_ROOT_ENV);
    if let Some(root) = env_root {
        cmd.env(OUTPUT_ROOT_ENV, root);
    }
    cmd.output().unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let spec = ToySpec {
        size: 32,
        square_min: 6,
        square_max: 9,
        ..ToySpec::default()
    };
    write_dataset(dir, &spec, SplitSizes { train: 48, val: 16, test: 24 }, 7).unwrap()
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_evaluate_metrics_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path());
    let run = data.path().join("run");
    let out = bin(&with_small(&["train", "--manifest", s(&manifest), "--output_dir", s(&run)]), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [cli::RESOLVED_CONFIG, cli::TRAIN_LOG, cli::CHECKPOINT, cli::LAST_CHECKPOINT] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run.join(cli::TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);

    let eval_dir = data.path().join("eval");
    let ck = run.join(cli::CHECKPOINT);
    let out = bin(
        &["evaluate", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--output_dir", s(&eval_dir)],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = eval_dir.join(cli::PREDICTIONS);
    let header = std::fs::read_to_string(&preds).unwrap();
    assert!(header.starts_with("id,true_label,predicted_label,tint,score_0,score_1\n"));

    let metrics_dir = data.path().join("metrics");
    let out = bin(
        &["metrics", "--predictions", s(&preds), "--protected", "tint", "--output_dir", s(&metrics_dir)],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for dir in [&eval_dir, &metrics_dir] {
        assert!(dir.join(cli::RESOLVED_CONFIG).is_file());
    }

    // the same report computed in-process
    let checkpoint = load_checkpoint(&ck).unwrap();
    let schema = ManifestSchema {
        target: "target".into(),
        protected: vec!["tint".into()],
        classes: Some(checkpoint.classes.clone()),
    };
    let m = load_manifest(&manifest, &schema).unwrap();
    let table = evaluate_split(&checkpoint.model, &checkpoint.config, &m, Split::Test).unwrap();
    let in_process = report_from_table(&table, &checkpoint.config).unwrap();
    let from_cli = fairsight::fairness::SubgroupReport::from_json(
        &std::fs::read_to_string(metrics_dir.join(cli::REPORT_JSON)).unwrap(),
    )
    .unwrap();
    assert_eq!(in_process, from_cli);
    assert!(metrics_dir.join(cli::REPORT_CSV).is_file());
}

#[test]
fn poisoned_protected_columns_leave_training_unchanged() {
    let data = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path());
    let text = std::fs::read_to_string(&manifest).unwrap();
    let poisoned: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                return format!("{l}\n");
            }
            let mut cols: Vec<String> = l.split(',').map(String::from).collect();
            cols[2] = format!("junk{}", (i * 7919) % 13);
            format!("{}\n", cols.join(","))
        })
        .collect();
    let poisoned_path = data.path().join("poisoned.csv");
    std::fs::write(&poisoned_path, poisoned).unwrap();

    let logs: Vec<String> = [&manifest, &poisoned_path]
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let run = data.path().join(format!("run{i}"));
            let out = bin(&with_small(&["train", "--manifest", s(m), "--output_dir", s(&run)]), None);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            std::fs::read_to_string(run.join(cli::TRAIN_LOG)).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn invalid_config_lists_every_problem() {
    let data = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path());
    let out = bin(
        &[
            "train", "--manifest", s(&manifest), "--threshold", "3", "--batch_size", "0",
            "--descriptor_len", "5",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["threshold", "batch size", "descriptor_len"] {
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin(&["train", "--colour", "blue"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_root_comes_from_the_environment() {
    let data = tempfile::tempdir().unwrap();
    let preds = data.path().join("p.csv");
    std::fs::write(&preds, "id,true_label,predicted_label,g\na,1,1,x\nb,0,1,y\nc,1,0,y\n").unwrap();
    let root = data.path().join("envroot");
    let out = bin(&["metrics", "--predictions", s(&preds), "--protected", "g"], Some(&root));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join(cli::REPORT_JSON).is_file());
    assert!(root.join(cli::RESOLVED_CONFIG).is_file());
}

fn small_checkpoint(dir: &Path) -> (Checkpoint, PathBuf) {
    let manifest = dataset(dir);
    let cfg = RunConfig::default()
        .with_overrides(SMALL.chunks(2).map(|kv| (kv[0].trim_start_matches("--"), kv[1])))
        .unwrap()
        .with_overrides([("output_dir", s(&dir.join("run")))])
        .unwrap();
    let run = cli::train(&cfg, &manifest).unwrap();
    (run.checkpoint, manifest)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = tempfile::tempdir().unwrap();
    let (ck, manifest) = small_checkpoint(data.path());
    let path = data.path().join("copy.json");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let schema = ManifestSchema {
        target: "target".into(),
        protected: vec!["tint".into()],
        classes: Some(ck.classes.clone()),
    };
    let m = load_manifest(&manifest, &schema).unwrap();
    let a = evaluate_split(&ck.model, &ck.config, &m, Split::Test).unwrap();
    let b = evaluate_split(&back.model, &back.config, &m, Split::Test).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.scores), bits(&y.scores));
    }
    assert_eq!(back.config, ck.config);

    let mut other = ck.config.clone();
    other.expert_stages = vec![4, 5];
    assert!(matches!(back.check_compatible(&other), Err(Error::Incompatible(_))));
}

#[test]
fn foreign_format_version_is_refused() {
    let data = tempfile::tempdir().unwrap();
    let (ck, _) = small_checkpoint(data.path());
    let path = data.path().join("v2.json");
    let text = serde_json::to_string(&ck).unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
}

#[test]
fn visualize_writes_four_overlays_per_image() {
    let data = tempfile::tempdir().unwrap();
    let (ck, manifest) = small_checkpoint(data.path());
    let path = data.path().join("ck.json");
    save_checkpoint(&path, &ck).unwrap();
    let out_dir = data.path().join("viz");
    let out = bin(
        &[
            "visualize", "--checkpoint", s(&path), "--manifest", s(&manifest), "--limit", "2",
            "--output_dir", s(&out_dir),
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = std::fs::read_dir(out_dir.join("heatmaps")).unwrap().count();
    assert_eq!(n, 8);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use quantnet::classic::{cv_predictions, ClassifierConfig};
use quantnet::data::{load_bags, load_dataset, save_dataset, Dataset};
use quantnet::metrics::{EvalSummary, LossKind};
use quantnet::protocols::rng_from_seed;
use quantnet_cli::artifact::{ModelArtifact, TrainedModel};
use quantnet_cli::commands::{cmd_eval, cmd_gen, cmd_report, cmd_train, evaluate_bags, split_bags, write_eval};
use quantnet_cli::config::{ExperimentConfig, GenConfig, QuantifierKind, Setting};
use quantnet_cli::synth::generate;
use quantnet_cli::CliError;
use tempfile::TempDir;

fn small_gen() -> GenConfig {
    GenConfig { classes: 3, dim: 4, separation: 3.0, sigma: 1.0, examples: 600, bags: 20, bag_size: 30, test_bags: 10 }
}

fn experiment(dir: &Path, kind: &str, out: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 5
loss = "ae"
out = "{out}"
[data]
dir = "{data}"
[quantifier]
kind = "{kind}"
fem_hidden = [8]
qm_hidden = [8]
spaces = 2
gaussians = 3
latent_dim = 2
fem_output = 8
[trainer]
max_epochs = 3
lr = 0.01
"#,
        out = dir.join(out).display(),
        data = dir.join("data").display(),
        kind = kind
    );
    let mut cfg = ExperimentConfig::parse(&text, "test").unwrap();
    cfg.gen = small_gen();
    if kind == "gmnet" {
        cfg.quantifier.fem_output = None;
    }
    cfg
}

fn gen_into(dir: &Path) {
    let mut cfg = experiment(dir, "cc", "data");
    cfg.out = Some(dir.join("data"));
    cmd_gen(&cfg).unwrap();
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig { seed: Some(7), ..ExperimentConfig::default() };
    cfg.gen = GenConfig { classes: 3, examples: 3000, bags: 10, test_bags: 5, ..GenConfig::default() };
    for name in ["a", "b"] {
        cfg.out = Some(tmp.path().join(name));
        cmd_gen(&cfg).unwrap();
    }
    let (a, b) = (read_tree(&tmp.path().join("a")), read_tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 19);
    assert_eq!(a, b);
    cfg.seed = Some(8);
    cfg.out = Some(tmp.path().join("c"));
    cmd_gen(&cfg).unwrap();
    assert_ne!(read_tree(&tmp.path().join("c")), a);
}

#[test]
fn generated_prevalences_are_valid() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    let ds = load_dataset(&tmp.path().join("data")).unwrap();
    assert_eq!((ds.examples.len(), ds.bags.len(), ds.classes, ds.feature_dim), (600, 20, 3, 4));
    let test = load_bags(&tmp.path().join("data/test_bags"), Some(3)).unwrap();
    assert_eq!(test.len(), 10);
    for b in ds.bags.iter().chain(&test) {
        let p = b.prevalence.as_ref().unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(b.size(), 30);
    }
}

#[test]
fn zero_separation_gives_chance_accuracy() {
    let cfg = GenConfig { classes: 3, dim: 5, separation: 0.0, examples: 3000, bags: 0, test_bags: 0, ..GenConfig::default() };
    let s = generate(&cfg, 3).unwrap();
    let (x, y) = s.dataset.labeled_matrix().unwrap();
    let cv = cv_predictions(&x, &y, 3, 5, &ClassifierConfig::default(), &mut rng_from_seed(1)).unwrap();
    let acc = cv.hard.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    assert!((acc - 1.0 / 3.0).abs() < 0.05, "accuracy {}", acc);
}

#[test]
fn invalid_gen_specs_are_config_errors() {
    for (classes, examples) in [(1, 100), (3, 2)] {
        let cfg = GenConfig { classes, examples, ..GenConfig::default() };
        let e = generate(&cfg, 0).unwrap_err();
        assert!(matches!(e, CliError::Config(_)), "{}", e);
        assert_eq!(e.exit_code(), 1);
    }
}

#[test]
fn split_is_seeded_seventy_thirty() {
    let s = generate(&small_gen(), 1).unwrap();
    let (a, b) = split_bags(&s.dataset.bags, 9);
    assert_eq!((a.len(), b.len()), (14, 6));
    assert_eq!(split_bags(&s.dataset.bags, 9), (a.clone(), b));
    assert_ne!(split_bags(&s.dataset.bags, 10).0, a);
}

#[test]
fn cc_artifact_holds_only_classifier_weights() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    let cfg = experiment(tmp.path(), "cc", "cc");
    let t = cmd_train(&cfg).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&t.path).unwrap()).unwrap();
    let model = json["model"]["model"].as_object().unwrap();
    let mut keys: Vec<&str> = model.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["classifier", "config", "method", "train_prior"]);
    assert_eq!(json["arch"], "cc");
    match &t.artifact.model {
        TrainedModel::Classic { grid, .. } => assert_eq!(grid.len(), 3),
        _ => panic!("expected a classical model"),
    }
    assert!(tmp.path().join("cc/grid.csv").exists());
}

#[test]
fn dmy_grid_covers_bins() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    let t = cmd_train(&experiment(tmp.path(), "dmy", "dmy")).unwrap();
    match &t.artifact.model {
        TrainedModel::Classic { grid, model } => {
            assert_eq!(grid.len(), 9);
            let best = grid.iter().map(|g| g.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
            let chosen = grid
                .iter()
                .find(|g| g.l2 == model.config.classifier.l2 && g.bins == Some(model.config.dmy_bins))
                .unwrap();
            assert_eq!(chosen.val_loss.unwrap(), best);
        }
        _ => panic!("expected a classical model"),
    }
}

#[test]
fn u_setting_never_generates_app_bags_and_reruns_match() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    let cfg = experiment(tmp.path(), "gmnet", "g1");
    let t = cmd_train(&cfg).unwrap();
    match &t.artifact.model {
        TrainedModel::Deep { history, .. } => {
            assert_eq!(history.app_bags, 0);
            assert_eq!(history.epochs.len(), 3);
        }
        _ => panic!("expected a deep model"),
    }
    let first = fs::read(&t.path).unwrap();
    let t2 = cmd_train(&cfg).unwrap();
    assert_eq!(fs::read(&t2.path).unwrap(), first);

    let mut app = experiment(tmp.path(), "gmnet", "g2");
    app.setting = Setting::UApp;
    match cmd_train(&app).unwrap().artifact.model {
        TrainedModel::Deep { history, .. } => assert!(history.app_bags > 0),
        _ => panic!("expected a deep model"),
    }
}

#[test]
fn u_app_without_example_labels_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let s = generate(&small_gen(), 2).unwrap();
    let ds = Dataset { examples: Vec::new(), ..s.dataset };
    save_dataset(&tmp.path().join("data"), &ds, &[]).unwrap();
    let mut cfg = experiment(tmp.path(), "dqn-avg", "m");
    cfg.setting = Setting::UApp;
    let e = cmd_train(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("U+APP"), "{}", e);
    cfg.setting = Setting::U;
    cmd_train(&cfg).unwrap();
}

#[test]
fn eval_writes_consistent_idempotent_reports() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    cmd_train(&experiment(tmp.path(), "pacc", "m")).unwrap();
    let bags = tmp.path().join("data/test_bags");
    let r1 = cmd_eval(&tmp.path().join("m"), &bags, LossKind::Rae, None, &tmp.path().join("e1")).unwrap();
    cmd_eval(&tmp.path().join("m/model.json"), &bags, LossKind::Rae, None, &tmp.path().join("e2")).unwrap();
    assert_eq!(read_tree(&tmp.path().join("e1")), read_tree(&tmp.path().join("e2")));

    let csv = fs::read_to_string(tmp.path().join("e1/eval.csv")).unwrap();
    let vals: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 10);
    let summary: EvalSummary =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e1/summary.json")).unwrap()).unwrap();
    assert!((summary.mean - vals.iter().sum::<f64>() / 10.0).abs() < 1e-12);
    assert_eq!(summary.method, "pacc");
    assert_eq!(r1.summary(), summary);
}

#[test]
fn oracle_scores_zero() {
    let s = generate(&small_gen(), 4).unwrap();
    for loss in [LossKind::Rae, LossKind::Nmd, LossKind::Ae] {
        let r = evaluate_bags("oracle", loss, &s.test_bags, |b| Ok(b.prevalence.clone().unwrap().into_inner())).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.n, 10);
    }
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    cmd_train(&experiment(tmp.path(), "cc", "m")).unwrap();
    let other = generate(&GenConfig { classes: 4, ..small_gen() }, 1).unwrap();
    save_dataset(&tmp.path().join("four"), &other.dataset, &[]).unwrap();
    let e = cmd_eval(&tmp.path().join("m"), &tmp.path().join("four/bags"), LossKind::Ae, None, &tmp.path().join("e"))
        .unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn tampered_artifact_fails_its_probe_check() {
    let tmp = TempDir::new().unwrap();
    gen_into(tmp.path());
    let t = cmd_train(&experiment(tmp.path(), "dqn-max", "m")).unwrap();
    let loaded = ModelArtifact::load(&t.path).unwrap();
    assert_eq!(loaded, t.artifact);
    let mut bad = t.artifact.clone();
    bad.probe.prediction[0] += 1e-9;
    fs::write(&t.path, bad.to_json().unwrap()).unwrap();
    assert!(ModelArtifact::load(&t.path).is_err());
}

fn summary_dir(root: &Path, name: &str, method: &str, loss: LossKind, losses: Vec<f64>) -> PathBuf {
    let dir = root.join(name);
    let r = quantnet::metrics::EvalReport::new(method, loss, losses);
    write_eval(&r, &dir).unwrap();
    dir
}

#[test]
fn report_tables() {
    let tmp = TempDir::new().unwrap();
    let a = summary_dir(tmp.path(), "a", "zeta", LossKind::Ae, vec![0.5, 0.5]);
    let r = cmd_report(std::slice::from_ref(&a), None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.to_text().lines().count(), 2);

    let b = summary_dir(tmp.path(), "b", "alpha", LossKind::Ae, vec![0.6, 0.8]);
    let r = cmd_report(&[a.clone(), b.clone()], Some(&tmp.path().join("rep"))).unwrap();
    assert_eq!(r.rows[0].method, "alpha");
    assert_eq!(r.rows[r.best].method, "zeta");
    assert_eq!(r.rows[r.best].mean, 0.5);
    let csv = fs::read_to_string(tmp.path().join("rep/report.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[1], row[2], row[4], row[5]), ("alpha", "ae", "0.7", "2", "false"));
    assert!((row[3].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
    assert!(csv.lines().nth(2).unwrap().ends_with(",true"));
    assert_eq!(cmd_report(&[b.clone(), a.clone()], None).unwrap(), r);

    let c = summary_dir(tmp.path(), "c", "beta", LossKind::Rae, vec![0.1]);
    assert!(matches!(cmd_report(&[a, c], None), Err(CliError::Config(_))));
}

#[test]
fn config_parsing_and_overrides() {
    let cfg = ExperimentConfig::parse("seed = 1\nsetting = \"u+app\"\n[quantifier]\nkind = \"dqn-max\"\n", "t").unwrap();
    assert_eq!(cfg.setting, Setting::UApp);
    assert_eq!(cfg.quantifier.kind, QuantifierKind::Deep(quantnet::deep::Architecture::DqnMax));
    assert!(cfg.sampling().unwrap().app_enabled);
    assert!(ExperimentConfig::parse("[quantifier]\nkind = \"nope\"\n", "t").is_err());
    assert!(ExperimentConfig::parse("sed = 1\n", "t").is_err());
    assert!(ExperimentConfig::default().seed().is_err());

    let mc = ExperimentConfig::parse("[quantifier]\nkind = \"gmnet\"\nlatent_dim = 3\n", "t")
        .unwrap()
        .quantifier
        .model_config(quantnet::deep::Architecture::Gmnet, 10, 3);
    assert_eq!((mc.fem.output, mc.gmnet.latent_dim), (3, 3));
    mc.validate().unwrap();
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantnet"))
}

#[test]
fn binary_pipeline_and_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = bin().args(["gen", "--out"]).arg(tmp.path().join("x")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 3\nloss = \"ae\"\n[data]\ndir = \"{}\"\n[gen]\nclasses = 3\ndim = 4\nexamples = 300\nbags = 10\nbag_size = 20\ntest_bags = 5\n[quantifier]\nkind = \"acc\"\n",
            tmp.path().join("data").display()
        ),
    )
    .unwrap();
    let run = |args: &[&str], out: &str| {
        bin().arg("--config").arg(&cfg).args(args).arg("--out").arg(tmp.path().join(out)).output().unwrap()
    };
    assert_eq!(run(&["gen"], "data").status.code(), Some(0));
    let t = run(&["train"], "model");
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(String::from_utf8_lossy(&t.stdout).starts_with("acc:"));
    let model = tmp.path().join("model");
    let bags = tmp.path().join("data/test_bags");
    let e = run(&["eval", "--model", model.to_str().unwrap(), "--bags", bags.to_str().unwrap()], "eval");
    assert_eq!(e.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&e.stdout).starts_with("acc ae:"));
    let q = run(&["--quiet", "report", tmp.path().join("eval").to_str().unwrap()], "rep");
    assert_eq!(q.status.code(), Some(0));
    assert!(q.stdout.is_empty());
    assert!(tmp.path().join("rep/report.txt").exists());

    let bad = bin().args(["--seed", "1", "train", "--out"]).arg(tmp.path().join("y")).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

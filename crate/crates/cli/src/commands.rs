//! The four subcommands as library functions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use quantnet::classic::{ClassicBase, ClassicMethod};
use quantnet::data::{load_bags, load_dataset, save_dataset};
use quantnet::data::{Bag, Dataset};
use quantnet::deep::{train, DeepQuantifier, StopReason};
use quantnet::diffcore::Tensor;
use quantnet::metrics::{EvalReport, EvalSummary, LossKind};
use quantnet::protocols::{stream_rng, LabeledPool, TrainingStream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::{io_err, write, GridPoint, ModelArtifact, TrainedModel, PROBE_ROWS};
use crate::config::{ExperimentConfig, QuantifierKind};
use crate::error::{CliError, Result};
use crate::synth::generate;

pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Share of natural bags used for training; the rest validate.
pub const TRAIN_FRACTION: f64 = 0.7;
pub const L2_GRID: [f64; 3] = [1e-4, 1e-2, 1.0];
pub const DMY_BINS_GRID: [usize; 3] = [4, 8, 16];

const SPLIT_STREAM: u64 = 10;
const INIT_STREAM: u64 = 11;

/// Writes the synthetic dataset described by `cfg.gen` to the output directory.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    let s = generate(&cfg.gen, seed)?;
    save_dataset(out, &s.dataset, &s.test_bags)?;
    Ok(format!(
        "wrote {} examples, {} bags and {} test bags to {}",
        s.dataset.examples.len(),
        s.dataset.bags.len(),
        s.test_bags.len(),
        out.display()
    ))
}

/// Seeded shuffle of the natural bags, then a 70/30 split.
pub fn split_bags(bags: &[Bag], seed: u64) -> (Vec<Bag>, Vec<Bag>) {
    let mut order: Vec<usize> = (0..bags.len()).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let n_train = (TRAIN_FRACTION * bags.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

fn probe_features(val: &[Bag], train: &[Bag], ds: &Dataset) -> Result<Tensor> {
    if let Some(b) = val.first().or(train.first()) {
        let n = b.size().min(PROBE_ROWS);
        return Ok(b.features.select_rows(&(0..n).collect::<Vec<_>>()));
    }
    let rows: Vec<&[f64]> = ds.examples.iter().take(PROBE_ROWS).map(|e| e.features.as_slice()).collect();
    if rows.is_empty() {
        return Err(CliError::Config("dataset has neither bags nor examples".into()));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Result of `train`: the saved artifact and whether training diverged.
#[derive(Debug)]
pub struct TrainOutcome {
    pub artifact: ModelArtifact,
    pub path: PathBuf,
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn message(&self) -> String {
        match &self.artifact.model {
            TrainedModel::Deep { history, .. } => format!(
                "{}: {} epochs, best epoch {:?}, best validation loss {:.6} ({:?}); saved {}",
                self.artifact.arch,
                history.epochs.len(),
                history.best_epoch,
                history.best_val_loss,
                history.stop_reason,
                self.path.display()
            ),
            TrainedModel::Classic { model, .. } => format!(
                "{}: l2 {} bins {}; saved {}",
                self.artifact.arch,
                model.config.classifier.l2,
                model.config.dmy_bins,
                self.path.display()
            ),
        }
    }
}

/// Trains the configured quantifier and writes its artifact.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    let (train_bags, val_bags) = split_bags(&ds.bags, seed);
    let probe = probe_features(&val_bags, &train_bags, &ds)?;

    let (model, diverged) = match cfg.quantifier.kind {
        QuantifierKind::Deep(arch) => {
            if val_bags.is_empty() {
                return Err(CliError::Config(format!(
                    "deep training needs validation bags; {} natural bags are too few",
                    ds.bags.len()
                )));
            }
            let sampling = cfg.sampling()?;
            let pool = if sampling.app_enabled {
                Some(LabeledPool::from_dataset(&ds).ok_or_else(|| {
                    CliError::Config("the U+APP setting needs example-level labels in the dataset".into())
                })?)
            } else {
                None
            };
            let mc = cfg.quantifier.model_config(arch, ds.feature_dim, ds.classes);
            let mut model = DeepQuantifier::new(mc, &mut stream_rng(seed, INIT_STREAM))?;
            let mut stream = TrainingStream::new(train_bags, pool, sampling)?;
            let history = train(&mut model, &mut stream, &val_bags, &cfg.trainer()?)?;
            let diverged = history.stop_reason == StopReason::Diverged;
            (TrainedModel::Deep { model, history }, diverged)
        }
        QuantifierKind::Classic(method) => (fit_classic(cfg, method, &ds, &val_bags)?, false),
    };

    let artifact = ModelArtifact::new(cfg.clone(), model, probe)?;
    let path = artifact.save(out)?;
    Ok(TrainOutcome { artifact, path, diverged })
}

fn mean_loss(loss: LossKind, bags: &[Bag], mut f: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<Option<f64>> {
    if bags.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for b in bags {
        let p = b.prevalence.as_ref().expect("natural bags carry prevalences");
        total += loss.evaluate(p.as_slice(), &f(&b.features)?, b.size());
    }
    Ok(Some(total / bags.len() as f64))
}

/// Fits on example labels; the validation bags pick the grid point.
fn fit_classic(cfg: &ExperimentConfig, method: ClassicMethod, ds: &Dataset, val: &[Bag]) -> Result<TrainedModel> {
    let (x, y) = ds
        .labeled_matrix()
        .ok_or_else(|| CliError::Config("classical quantifiers need example-level labels".into()))?;
    let mut base_cfg = cfg.quantifier.classic.clone();
    base_cfg.seed = cfg.seed()?;
    let bins_grid: Vec<Option<usize>> =
        if method == ClassicMethod::Dmy { DMY_BINS_GRID.iter().map(|&b| Some(b)).collect() } else { vec![None] };

    let mut grid = Vec::new();
    let mut best: Option<(f64, _)> = None;
    for l2 in L2_GRID {
        let mut c = base_cfg.clone();
        c.classifier.l2 = l2;
        let base = ClassicBase::fit(&x, &y, ds.classes, &c, method.needs_cv())?;
        for &bins in &bins_grid {
            if let Some(b) = bins {
                c.dmy_bins = b;
            }
            let q = base.build(method, &c)?;
            let val_loss = mean_loss(cfg.loss, val, |f| Ok(q.quantify(f).into_inner()))?;
            grid.push(GridPoint { l2, bins, val_loss });
            let score = val_loss.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, q));
            }
        }
    }
    let (_, model) = best.expect("grid is non-empty");
    Ok(TrainedModel::Classic { model, grid })
}

/// Scores each bag independently.
pub fn evaluate_bags(
    method: &str,
    loss: LossKind,
    bags: &[Bag],
    mut predict: impl FnMut(&Bag) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut losses = Vec::with_capacity(bags.len());
    for (i, b) in bags.iter().enumerate() {
        let p = b
            .prevalence
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("bag {} has no prevalence label", i)))?;
        losses.push(loss.evaluate(p.as_slice(), &predict(b)?, b.size()));
    }
    Ok(EvalReport::new(method, loss, losses))
}

/// Writes `eval.csv` and `summary.json` into `out`.
pub fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join(EVAL_CSV), &report.to_csv())?;
    let summary = serde_json::to_string_pretty(&report.summary()).map_err(quantnet::Error::from)? + "\n";
    write(&out.join(SUMMARY_FILE), &summary)
}

pub fn cmd_eval(model_path: &Path, bags_dir: &Path, loss: LossKind, name: Option<&str>, out: &Path) -> Result<EvalReport> {
    let artifact = ModelArtifact::load(model_path)?;
    let bags = load_bags(bags_dir, Some(artifact.classes()))?;
    let method = name.unwrap_or(&artifact.arch);
    let report = evaluate_bags(method, loss, &bags, |b| Ok(artifact.quantify(&b.features)?.into_inner()))?;
    write_eval(&report, out)?;
    Ok(report)
}

pub fn summary_line(s: &EvalSummary) -> String {
    format!("{} {}: {:.6} ± {:.6} (n = {})", s.method, s.loss, s.mean, s.std, s.n)
}

/// Comparison table over evaluation summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub loss: LossKind,
    pub rows: Vec<EvalSummary>,
    /// Index into `rows` of the lowest mean.
    pub best: usize,
}

impl Report {
    pub fn new(mut rows: Vec<EvalSummary>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| CliError::Config("report needs at least one summary".into()))?;
        let loss = first.loss;
        if let Some(r) = rows.iter().find(|r| r.loss != loss) {
            return Err(CliError::Config(format!("cannot compare {} with {} ({})", loss, r.loss, r.method)));
        }
        rows.sort_by(|a, b| a.method.cmp(&b.method));
        let best = (0..rows.len()).fold(0, |b, i| if rows[i].mean < rows[b].mean { i } else { b });
        Ok(Report { loss, rows, best })
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
        let mut s = String::new();
        writeln!(s, "{:<width$}  {:>21}  {:>6}", "method", format!("{} (mean ± std)", self.loss), "n").unwrap();
        for (i, r) in self.rows.iter().enumerate() {
            let flag = if i == self.best { " *" } else { "" };
            writeln!(s, "{:<width$}  {:>10.4} ± {:<8.4}  {:>6}{}", r.method, r.mean, r.std, r.n, flag).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,loss,mean,std,n,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(s, "{},{},{},{},{},{}", r.method, r.loss, r.mean, r.std, r.n, i == self.best).unwrap();
        }
        s
    }
}

/// Reads `summary.json` from each input (a directory or the file itself).
pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<Report> {
    let mut rows = Vec::with_capacity(inputs.len());
    for p in inputs {
        let file = if p.is_dir() { p.join(SUMMARY_FILE) } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
        rows.push(serde_json::from_str::<EvalSummary>(&text).map_err(quantnet::Error::from)?);
    }
    let report = Report::new(rows)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        write(&out.join(REPORT_CSV), &report.to_csv())?;
        write(&out.join(REPORT_TXT), &report.to_text())?;
    }
    Ok(report)
}

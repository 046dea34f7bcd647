//! Classifier-based quantifiers: CC, PCC, ACC, PACC, DMy and EMQ.
//!
//! All quantifiers work on the posterior matrix (`m × l`) that a soft
//! classifier produces for a bag. [`ClassicQuantifier`] bundles a trained
//! [`LogisticRegression`] with whatever each method estimates from
//! cross-validated training predictions.

mod calibration;
mod classifier;
mod dmy;
mod solver;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use calibration::Calibration;
pub use classifier::{argmax, cv_predictions, stratified_folds, ClassifierConfig, CvPredictions, LogisticRegression};
pub use dmy::{posterior_histogram, PosteriorHistogramModel, DMY_MAX_ITER, DMY_RESTARTS, DMY_TOL};
pub use solver::{project_simplex, solve_simplex_ls, SimplexLsSolution, SOLVER_MAX_ITER, SOLVER_TOL};

use crate::data::PrevalenceVector;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::protocols::rng_from_seed;

fn to_prevalence(mut v: Vec<f64>) -> PrevalenceVector {
    v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    let s: f64 = v.iter().sum();
    PrevalenceVector::new(v.into_iter().map(|x| (x / s).min(1.0)).collect())
        .expect("quantifier output left the simplex")
}

/// Column sums in a fixed order (sorted values), so that the result does not
/// depend on row order.
fn column_means(posteriors: &Tensor) -> Vec<f64> {
    let (m, l) = (posteriors.rows(), posteriors.cols());
    assert!(m >= 1, "empty posterior matrix");
    (0..l)
        .map(|c| {
            let mut col: Vec<f64> = (0..m).map(|i| posteriors.get2(i, c)).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            col.iter().sum::<f64>() / m as f64
        })
        .collect()
}

/// Classify and count; ties go to the lowest class index.
pub fn cc(posteriors: &Tensor) -> PrevalenceVector {
    let labels: Vec<usize> = (0..posteriors.rows()).map(|i| argmax(posteriors.row(i))).collect();
    PrevalenceVector::from_labels(&labels, posteriors.cols())
}

/// Mean posterior over the bag.
pub fn pcc(posteriors: &Tensor) -> PrevalenceVector {
    to_prevalence(column_means(posteriors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfusionSource {
    Hard,
    Soft,
}

/// `C[i][j]` estimates P(predicted `i` | true `j`); columns sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEstimate {
    pub matrix: Tensor,
    pub source: ConfusionSource,
}

impl ConfusionEstimate {
    pub fn from_hard(predicted: &[usize], labels: &[usize], classes: usize) -> Self {
        let one_hot: Vec<Vec<f64>> = predicted
            .iter()
            .map(|&p| (0..classes).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::build(&Tensor::from_rows(&one_hot), labels, classes, ConfusionSource::Hard)
    }

    pub fn from_soft(posteriors: &Tensor, labels: &[usize], classes: usize) -> Self {
        Self::build(posteriors, labels, classes, ConfusionSource::Soft)
    }

    fn build(scores: &Tensor, labels: &[usize], l: usize, source: ConfusionSource) -> Self {
        assert_eq!(scores.rows(), labels.len(), "confusion: {} labels for {} predictions", labels.len(), scores.rows());
        let mut m = Tensor::zeros([l, l]);
        for j in 0..l {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == j).collect();
            let col = if idx.is_empty() {
                (0..l).map(|i| if i == j { 1.0 } else { 0.0 }).collect()
            } else {
                column_means(&scores.select_rows(&idx))
            };
            for (i, v) in col.into_iter().enumerate() {
                m.data_mut()[i * l + j] = v;
            }
        }
        ConfusionEstimate { matrix: m, source }
    }
}

/// Solves `C p = q` over the simplex.
pub fn adjust(confusion: &ConfusionEstimate, q: &PrevalenceVector) -> PrevalenceVector {
    to_prevalence(solve_simplex_ls(&confusion.matrix, q.as_slice()).p)
}

/// Adjusted classify and count.
pub fn acc(posteriors: &Tensor, confusion: &ConfusionEstimate) -> PrevalenceVector {
    adjust(confusion, &cc(posteriors))
}

/// Probabilistic adjusted classify and count.
pub fn pacc(posteriors: &Tensor, soft_confusion: &ConfusionEstimate) -> PrevalenceVector {
    adjust(soft_confusion, &pcc(posteriors))
}

/// DMy: histogram matching under the Hellinger distance.
pub fn dmy(posteriors: &Tensor, model: &PosteriorHistogramModel, restarts: usize, seed: u64) -> PrevalenceVector {
    let target = posterior_histogram(posteriors, model.bins);
    let mut rng = rng_from_seed(seed);
    to_prevalence(model.estimate(&target, restarts, &mut rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmqResult {
    pub prevalence: PrevalenceVector,
    /// Prior after each M-step.
    pub priors: Vec<Vec<f64>>,
    /// Bag log-likelihood (up to a constant) at the start and after each M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn emq_log_likelihood(posteriors: &Tensor, ratio: &[f64]) -> f64 {
    (0..posteriors.rows())
        .map(|i| posteriors.row(i).iter().zip(ratio).map(|(s, r)| s * r).sum::<f64>().ln())
        .sum()
}

/// EM re-estimation of the class priors under prior probability shift.
pub fn emq(posteriors: &Tensor, train_priors: &[f64], max_iter: usize, tol: f64) -> EmqResult {
    let (m, l) = (posteriors.rows(), posteriors.cols());
    assert_eq!(train_priors.len(), l, "emq: {} training priors for {} classes", train_priors.len(), l);
    assert!(train_priors.iter().all(|&p| p > 0.0), "emq: training priors must be positive");
    let mut prior = train_priors.to_vec();
    let ratio = |p: &[f64]| p.iter().zip(train_priors).map(|(a, b)| a / b).collect::<Vec<_>>();
    let mut log_likelihood = vec![emq_log_likelihood(posteriors, &ratio(&prior))];
    let mut priors = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut w = vec![0.0; m * l];
    while iterations < max_iter {
        iterations += 1;
        let r = ratio(&prior);
        for i in 0..m {
            let row = &mut w[i * l..(i + 1) * l];
            for (c, v) in row.iter_mut().enumerate() {
                *v = posteriors.get2(i, c) * r[c];
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let next = column_means(&Tensor::new([m, l], w.clone()));
        let change = next.iter().zip(&prior).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prior = next;
        log_likelihood.push(emq_log_likelihood(posteriors, &ratio(&prior)));
        priors.push(prior.clone());
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EMQ reached {} iterations without converging", max_iter);
    }
    EmqResult { prevalence: to_prevalence(prior), priors, log_likelihood, iterations, converged }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicMethod {
    Cc,
    Pcc,
    Acc,
    Pacc,
    Dmy,
    Emq,
    EmqPlatt,
}

impl ClassicMethod {
    pub const ALL: [ClassicMethod; 7] = [
        ClassicMethod::Cc,
        ClassicMethod::Pcc,
        ClassicMethod::Acc,
        ClassicMethod::Pacc,
        ClassicMethod::Dmy,
        ClassicMethod::Emq,
        ClassicMethod::EmqPlatt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassicMethod::Cc => "cc",
            ClassicMethod::Pcc => "pcc",
            ClassicMethod::Acc => "acc",
            ClassicMethod::Pacc => "pacc",
            ClassicMethod::Dmy => "dmy",
            ClassicMethod::Emq => "emq",
            ClassicMethod::EmqPlatt => "emq-platt",
        }
    }

    /// Whether fitting needs cross-validated training posteriors.
    pub fn needs_cv(self) -> bool {
        matches!(self, ClassicMethod::Acc | ClassicMethod::Pacc | ClassicMethod::Dmy | ClassicMethod::EmqPlatt)
    }
}

impl FromStr for ClassicMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassicMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown classical quantifier {:?}", s)))
    }
}

impl std::fmt::Display for ClassicMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicConfig {
    pub classifier: ClassifierConfig,
    pub folds: usize,
    pub dmy_bins: usize,
    pub dmy_restarts: usize,
    pub emq_max_iter: usize,
    pub emq_tol: f64,
    pub seed: u64,
}

impl Default for ClassicConfig {
    fn default() -> Self {
        ClassicConfig {
            classifier: ClassifierConfig::default(),
            folds: 10,
            dmy_bins: 8,
            dmy_restarts: DMY_RESTARTS,
            emq_max_iter: 1000,
            emq_tol: 1e-6,
            seed: 0,
        }
    }
}

/// A trained classifier with its cross-validated training posteriors; shared
/// by every method built on it.
#[derive(Clone, Debug)]
pub struct ClassicBase {
    pub classifier: LogisticRegression,
    pub labels: Vec<usize>,
    pub train_prior: Vec<f64>,
    pub cv: Option<CvPredictions>,
}

impl ClassicBase {
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, config: &ClassicConfig, with_cv: bool) -> Result<Self> {
        let classifier = LogisticRegression::fit(x, y, classes, &config.classifier)?;
        let cv = if with_cv {
            let mut rng = rng_from_seed(config.seed);
            Some(cv_predictions(x, y, classes, config.folds, &config.classifier, &mut rng)?)
        } else {
            None
        };
        let train_prior = PrevalenceVector::from_labels(y, classes).into_inner();
        Ok(ClassicBase { classifier, labels: y.to_vec(), train_prior, cv })
    }

    pub fn build(&self, method: ClassicMethod, config: &ClassicConfig) -> Result<ClassicQuantifier> {
        let l = self.classifier.classes;
        let cv = || {
            self.cv
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs cross-validated predictions", method)))
        };
        let mut q = ClassicQuantifier {
            method,
            config: config.clone(),
            classifier: self.classifier.clone(),
            train_prior: self.train_prior.clone(),
            confusion: None,
            histograms: None,
            calibration: None,
        };
        match method {
            ClassicMethod::Cc | ClassicMethod::Pcc | ClassicMethod::Emq => {}
            ClassicMethod::Acc => q.confusion = Some(ConfusionEstimate::from_hard(&cv()?.hard, &self.labels, l)),
            ClassicMethod::Pacc => q.confusion = Some(ConfusionEstimate::from_soft(&cv()?.posteriors, &self.labels, l)),
            ClassicMethod::Dmy => {
                q.histograms =
                    Some(PosteriorHistogramModel::fit(&cv()?.posteriors, &self.labels, l, config.dmy_bins)?)
            }
            ClassicMethod::EmqPlatt => q.calibration = Some(Calibration::fit(&cv()?.posteriors, &self.labels)?),
        }
        Ok(q)
    }
}

fn part<'a, T>(v: &'a Option<T>, method: ClassicMethod, what: &str) -> &'a T {
    v.as_ref().unwrap_or_else(|| panic!("{} quantifier has no {}", method, what))
}

/// A fitted classical quantifier, ready to estimate bag prevalences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicQuantifier {
    pub method: ClassicMethod,
    pub config: ClassicConfig,
    pub classifier: LogisticRegression,
    pub train_prior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histograms: Option<PosteriorHistogramModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

impl ClassicQuantifier {
    pub fn fit(method: ClassicMethod, x: &Tensor, y: &[usize], classes: usize, config: &ClassicConfig) -> Result<Self> {
        ClassicBase::fit(x, y, classes, config, method.needs_cv())?.build(method, config)
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    pub fn quantify(&self, features: &Tensor) -> PrevalenceVector {
        let post = self.classifier.predict_proba(features);
        match self.method {
            ClassicMethod::Cc => cc(&post),
            ClassicMethod::Pcc => pcc(&post),
            ClassicMethod::Acc => acc(&post, part(&self.confusion, self.method, "confusion matrix")),
            ClassicMethod::Pacc => pacc(&post, part(&self.confusion, self.method, "confusion matrix")),
            ClassicMethod::Dmy => dmy(
                &post,
                part(&self.histograms, self.method, "histograms"),
                self.config.dmy_restarts,
                self.config.seed,
            ),
            ClassicMethod::Emq => emq(&post, &self.train_prior, self.config.emq_max_iter, self.config.emq_tol).prevalence,
            ClassicMethod::EmqPlatt => {
                let cal = part(&self.calibration, self.method, "calibration");
                emq(&cal.apply(&post), &self.train_prior, self.config.emq_max_iter, self.config.emq_tol).prevalence
            }
        }
    }
}

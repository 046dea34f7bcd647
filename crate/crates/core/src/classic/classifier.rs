//! Multinomial logistic regression and stratified cross-validation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    /// Step size; `None` picks `1/L` from a bound on the loss curvature.
    pub lr: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 500, l2: 1e-4, lr: None }
    }
}

/// Soft classifier `x ↦ softmax(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub classes: usize,
    pub dim: usize,
    /// `classes × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: ClassifierConfig,
}

fn softmax_in_place(z: &mut [f64]) {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl LogisticRegression {
    /// Full-batch accelerated gradient descent on mean cross-entropy + L2,
    /// in standardized feature coordinates. Starts from zero, so it is deterministic.
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, config: &ClassifierConfig) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(Error::Validation(format!("{} labels for feature matrix {:?}", y.len(), x.shape())));
        }
        if classes < 2 {
            return Err(Error::Validation("classifier needs at least two classes".into()));
        }
        let (n, d, l) = (x.rows(), x.cols(), classes);
        let mut counts = vec![0usize; l];
        for &c in y {
            if c >= l {
                return Err(Error::Validation(format!("label {} out of range for {} classes", c, l)));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Validation(format!("class {} has no training examples", c)));
        }

        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (k, v) in x.row(i).iter().enumerate() {
                mean[k] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for (k, v) in x.row(i).iter().enumerate() {
                scale[k] += (v - mean[k]).powi(2);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let z: Vec<f64> = (0..n)
            .flat_map(|i| x.row(i).iter().enumerate().map(|(k, v)| (v - mean[k]) / scale[k]).collect::<Vec<_>>())
            .collect();

        // parameters: l rows of (d weights, 1 bias)
        let w = d + 1;
        let lr = config.lr.unwrap_or(1.0 / (0.5 * (d as f64 + 1.0) + config.l2));
        let mut theta = vec![0.0; l * w];
        let mut prev = theta.clone();
        let mut t = 1.0f64;
        let mut grad = vec![0.0; l * w];
        let mut probs = vec![0.0; l];
        for _ in 0..config.epochs {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            let look: Vec<f64> = theta.iter().zip(&prev).map(|(a, b)| a + beta * (a - b)).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in 0..n {
                let zi = &z[i * d..(i + 1) * d];
                for c in 0..l {
                    let row = &look[c * w..(c + 1) * w];
                    probs[c] = row[d] + row[..d].iter().zip(zi).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(&mut probs);
                for c in 0..l {
                    let r = probs[c] - if y[i] == c { 1.0 } else { 0.0 };
                    let g = &mut grad[c * w..(c + 1) * w];
                    for k in 0..d {
                        g[k] += r * zi[k];
                    }
                    g[d] += r;
                }
            }
            for c in 0..l {
                for k in 0..w {
                    let idx = c * w + k;
                    grad[idx] /= n as f64;
                    if k < d {
                        grad[idx] += config.l2 * look[idx];
                    }
                }
            }
            let next: Vec<f64> = look.iter().zip(&grad).map(|(a, g)| a - lr * g).collect();
            // gradient-based momentum restart
            let restart = grad.iter().zip(next.iter().zip(&theta)).map(|(g, (a, b))| g * (a - b)).sum::<f64>() > 0.0;
            prev = std::mem::replace(&mut theta, next);
            t = if restart { 1.0 } else { t_next };
        }

        let mut weights = vec![0.0; l * d];
        let mut bias = vec![0.0; l];
        for c in 0..l {
            let row = &theta[c * w..(c + 1) * w];
            let mut b = row[d];
            for k in 0..d {
                weights[c * d + k] = row[k] / scale[k];
                b -= row[k] * mean[k] / scale[k];
            }
            bias[c] = b;
        }
        Ok(LogisticRegression { classes: l, dim: d, weights, bias, config: config.clone() })
    }

    /// Posterior matrix `m × l`; rows sum to 1.
    pub fn predict_proba(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.dim, "classifier expects {} features, got {:?}", self.dim, x.shape());
        let (m, d, l) = (x.rows(), self.dim, self.classes);
        let mut out = vec![0.0; m * l];
        for i in 0..m {
            let xi = x.row(i);
            let row = &mut out[i * l..(i + 1) * l];
            for (c, r) in row.iter_mut().enumerate() {
                *r = self.bias[c] + self.weights[c * d..(c + 1) * d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(row);
        }
        Tensor::new([m, l], out)
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let p = self.predict_proba(x);
        (0..p.rows()).map(|i| argmax(p.row(i))).collect()
    }
}

/// Stratified fold index for each example.
pub fn stratified_folds<R: Rng + ?Sized>(labels: &[usize], classes: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Fold(format!("need at least 2 folds, got {}", k)));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Fold(format!(
                "class {} has {} examples, fewer than the {} folds requested; use a smaller k",
                c,
                members.len(),
                k
            )));
        }
    }
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for members in by_class.iter_mut() {
        members.shuffle(rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Out-of-fold posteriors: each example is scored by a model that never saw it.
#[derive(Clone, Debug, PartialEq)]
pub struct CvPredictions {
    pub posteriors: Tensor,
    pub hard: Vec<usize>,
    pub folds: Vec<usize>,
}

pub fn cv_predictions<R: Rng + ?Sized>(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    k: usize,
    config: &ClassifierConfig,
    rng: &mut R,
) -> Result<CvPredictions> {
    let folds = stratified_folds(y, classes, k, rng)?;
    let n = y.len();
    let mut post = vec![0.0; n * classes];
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = LogisticRegression::fit(&x.select_rows(&train), &ty, classes, config)?;
        let p = model.predict_proba(&x.select_rows(&test));
        for (r, &i) in test.iter().enumerate() {
            post[i * classes..(i + 1) * classes].copy_from_slice(p.row(r));
        }
    }
    let posteriors = Tensor::new([n, classes], post);
    let hard = (0..n).map(|i| argmax(posteriors.row(i))).collect();
    Ok(CvPredictions { posteriors, hard, folds })
}

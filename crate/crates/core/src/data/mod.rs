//! Quantification data types: prevalence vectors, examples, bags, datasets.

mod io;

pub use io::{
    load_bags, load_dataset, load_examples_csv, save_bags, save_dataset, save_examples_csv, ExampleFile,
    Manifest, BAGS_DIR, EXAMPLES_FILE, MANIFEST_FILE, PREVALENCES_FILE, TEST_BAGS_DIR,
};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Tolerance on the unit sum of a prevalence vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex over `l` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PrevalenceVector(Vec<f64>);

impl PrevalenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("empty prevalence vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("prevalence value {} outside [0, 1]", v)));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("prevalences sum to {}, not 1", s)));
        }
        Ok(PrevalenceVector(values))
    }

    /// Accepts vectors summing to 1 within `tol`, then divides by the sum.
    pub fn renormalized(values: Vec<f64>, tol: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("invalid prevalence row {:?}", values)));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Validation(format!("prevalences {:?} sum to {}, not 1", values, s)));
        }
        PrevalenceVector::new(values.into_iter().map(|v| (v / s).min(1.0)).collect())
    }

    pub fn uniform(l: usize) -> Self {
        PrevalenceVector(vec![1.0 / l as f64; l])
    }

    pub fn one_hot(l: usize, class: usize) -> Self {
        let mut v = vec![0.0; l];
        v[class] = 1.0;
        PrevalenceVector(v)
    }

    /// Class proportions of `labels`; counts over `m`.
    pub fn from_labels(labels: &[usize], l: usize) -> Self {
        assert!(!labels.is_empty(), "prevalence of an empty label list");
        let mut counts = vec![0usize; l];
        for &y in labels {
            assert!(y < l, "label {} out of range for {} classes", y, l);
            counts[y] += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let m: usize = counts.iter().sum();
        assert!(m > 0, "prevalence of zero counts");
        PrevalenceVector(counts.iter().map(|&c| c as f64 / m as f64).collect())
    }

    /// Mean of two simplex points.
    pub fn midpoint(&self, other: &PrevalenceVector) -> Self {
        assert_eq!(self.len(), other.len(), "midpoint of vectors with {} and {} classes", self.len(), other.len());
        PrevalenceVector(self.0.iter().zip(&other.0).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for PrevalenceVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        PrevalenceVector::new(v)
    }
}

impl From<PrevalenceVector> for Vec<f64> {
    fn from(p: PrevalenceVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for PrevalenceVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Single feature vector with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

/// A multiset of feature vectors, optionally labeled by prevalence.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `m × d_in` feature matrix.
    pub features: Tensor,
    pub prevalence: Option<PrevalenceVector>,
    pub labels: Option<Vec<usize>>,
}

impl Bag {
    pub fn new(features: Tensor, prevalence: Option<PrevalenceVector>) -> Result<Self> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::Validation(format!("bag needs m >= 1 rows, got shape {:?}", features.shape())));
        }
        Ok(Bag { features, prevalence, labels: None })
    }

    /// Bag whose prevalence label is derived from its member labels.
    pub fn labeled(features: Tensor, labels: Vec<usize>, l: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Validation(format!(
                "{} labels for a bag of {} examples",
                labels.len(),
                features.rows()
            )));
        }
        let p = PrevalenceVector::from_labels(&labels, l);
        let mut bag = Bag::new(features, Some(p))?;
        bag.labels = Some(labels);
        Ok(bag)
    }

    pub fn size(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks that label counts agree with the prevalence label.
    pub fn is_consistent(&self) -> bool {
        match (&self.labels, &self.prevalence) {
            (Some(y), Some(p)) => {
                let q = PrevalenceVector::from_labels(y, p.len());
                q.as_slice().iter().zip(p.as_slice()).all(|(a, b)| (a - b).abs() <= SIMPLEX_TOL)
            }
            _ => true,
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Bag {
        Bag {
            features: self.features.select_rows(order),
            prevalence: self.prevalence.clone(),
            labels: self.labels.as_ref().map(|y| order.iter().map(|&i| y[i]).collect()),
        }
    }
}

/// Example-labeled and/or bag-labeled data sharing one feature space.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub classes: usize,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Validation("dataset declares zero classes".into()));
        }
        for (i, e) in self.examples.iter().enumerate() {
            if e.features.len() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "example {} has {} features, expected {}",
                    i,
                    e.features.len(),
                    self.feature_dim
                )));
            }
            if let Some(y) = e.label {
                if y >= self.classes {
                    return Err(Error::Validation(format!("example {} label {} >= {}", i, y, self.classes)));
                }
            }
        }
        for (i, b) in self.bags.iter().enumerate() {
            if b.dim() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "bag {} has dimension {}, expected {}",
                    i,
                    b.dim(),
                    self.feature_dim
                )));
            }
            if let Some(p) = &b.prevalence {
                if p.len() != self.classes {
                    return Err(Error::Validation(format!("bag {} has {} prevalences for {} classes", i, p.len(), self.classes)));
                }
            }
        }
        Ok(())
    }

    /// True when every example carries a label.
    pub fn is_example_labeled(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.label.is_some())
    }

    /// Feature matrix and labels of the labeled examples.
    pub fn labeled_matrix(&self) -> Option<(Tensor, Vec<usize>)> {
        if !self.is_example_labeled() {
            return None;
        }
        let rows: Vec<&[f64]> = self.examples.iter().map(|e| e.features.as_slice()).collect();
        let labels = self.examples.iter().map(|e| e.label.unwrap()).collect();
        Some((Tensor::from_rows(&rows), labels))
    }

    /// Training-set class proportions.
    pub fn class_prior(&self) -> Option<PrevalenceVector> {
        let (_, labels) = self.labeled_matrix()?;
        Some(PrevalenceVector::from_labels(&labels, self.classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prevalence_from_labels_examples() {
        let p = PrevalenceVector::from_labels(&[0, 0, 1], 2);
        assert_eq!(p.as_slice(), &[2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(PrevalenceVector::from_labels(&[2], 3).as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(PrevalenceVector::from_labels(&[0, 1, 2, 3], 4).as_slice(), &[0.25; 4]);
    }

    #[test]
    #[should_panic(expected = "empty label list")]
    fn prevalence_of_nothing_panics() {
        PrevalenceVector::from_labels(&[], 2);
    }

    #[test]
    fn rejects_off_simplex() {
        assert!(PrevalenceVector::new(vec![0.6, 0.5]).is_err());
        assert!(PrevalenceVector::new(vec![1.2, -0.2]).is_err());
        assert!(PrevalenceVector::renormalized(vec![0.3333333, 0.3333333, 0.3333334], 1e-6).is_ok());
    }

    #[test]
    fn labeled_bag_is_consistent() {
        let f = Tensor::from_rows(&[[0.0], [1.0], [2.0]]);
        let b = Bag::labeled(f, vec![1, 0, 1], 2).unwrap();
        assert!(b.is_consistent());
        assert_eq!(b.prevalence.as_ref().unwrap().as_slice(), &[1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn empty_bag_rejected() {
        assert!(Bag::new(Tensor::zeros([0, 3]), None).is_err());
    }
}

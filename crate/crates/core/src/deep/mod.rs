//! Deep symmetric quantifiers: feature extraction (FEM), bag representation
//! (BRM) and quantification (QM) modules.
//!
//! GMNet represents a bag by the mean likelihood of its latent projections
//! under a bank of learnable Gaussians, once per latent space, and
//! concatenates the spaces. The DQN baselines pool a single latent space
//! with avg, max or median.
//!
//! Covariances are stored as Cholesky factors `Σ = L Lᵀ` whose diagonal is
//! the exponential of an unconstrained parameter, so every `Σ` stays
//! positive definite whatever the optimizer does.

mod train;

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use train::{train, validation_loss, EpochRecord, StopReason, TrainerConfig, TrainingHistory};

use crate::data::PrevalenceVector;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::protocols::rng_from_seed;

/// The nearest-neighbour variance rule needs two centers; a lone Gaussian gets this.
pub const SINGLE_GAUSSIAN_VARIANCE: f64 = 0.0625;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "gmnet")]
    Gmnet,
    #[serde(rename = "dqn-avg")]
    DqnAvg,
    #[serde(rename = "dqn-max")]
    DqnMax,
    #[serde(rename = "dqn-med")]
    DqnMed,
}

impl Architecture {
    pub const ALL: [Architecture; 4] =
        [Architecture::Gmnet, Architecture::DqnAvg, Architecture::DqnMax, Architecture::DqnMed];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gmnet => "gmnet",
            Architecture::DqnAvg => "dqn-avg",
            Architecture::DqnMax => "dqn-max",
            Architecture::DqnMed => "dqn-med",
        }
    }

    pub fn pooling(self) -> Option<Pooling> {
        match self {
            Architecture::Gmnet => None,
            Architecture::DqnAvg => Some(Pooling::Avg),
            Architecture::DqnMax => Some(Pooling::Max),
            Architecture::DqnMed => Some(Pooling::Med),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown architecture {:?}", s)))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Avg,
    Max,
    Med,
}

/// Per-example MLP: hidden ReLU layers with dropout, then a sigmoid layer of
/// width `output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FemConfig {
    pub hidden: Vec<usize>,
    pub output: usize,
    pub dropout: f64,
}

impl Default for FemConfig {
    fn default() -> Self {
        FemConfig { hidden: vec![128], output: 512, dropout: 0.1 }
    }
}

/// MLP from the bag representation to class logits, followed by softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QmConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for QmConfig {
    fn default() -> Self {
        QmConfig { hidden: vec![128], dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmnetConfig {
    /// Number of latent spaces `L`.
    pub spaces: usize,
    /// Gaussians per space `K`.
    pub gaussians: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    pub cka_lambda: f64,
    /// Divide each example's likelihood row by its sum before averaging.
    pub normalize_likelihoods: bool,
}

impl Default for GmnetConfig {
    fn default() -> Self {
        GmnetConfig { spaces: 9, gaussians: 100, latent_dim: 5, cka_lambda: 0.01, normalize_likelihoods: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub input_dim: usize,
    pub classes: usize,
    pub fem: FemConfig,
    pub qm: QmConfig,
    #[serde(default)]
    pub gmnet: GmnetConfig,
}

impl ModelConfig {
    /// Defaults per architecture: GMNet replicates a FEM whose last hidden
    /// layer has 50 units per latent space; the baselines use one FEM with a
    /// 512-wide output.
    pub fn new(arch: Architecture, input_dim: usize, classes: usize) -> Self {
        let gmnet = GmnetConfig::default();
        let fem = match arch {
            Architecture::Gmnet => FemConfig { hidden: vec![128, 50], output: gmnet.latent_dim, dropout: 0.1 },
            _ => FemConfig::default(),
        };
        ModelConfig { arch, input_dim, classes, fem, qm: QmConfig::default(), gmnet }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.classes < 2 {
            return bad(format!("need input_dim >= 1 and classes >= 2, got {} and {}", self.input_dim, self.classes));
        }
        if self.fem.output == 0 || self.fem.hidden.contains(&0) || self.qm.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        for (name, r) in [("fem", self.fem.dropout), ("qm", self.qm.dropout)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{} dropout {} outside [0, 1)", name, r));
            }
        }
        if self.arch == Architecture::Gmnet {
            let g = &self.gmnet;
            if g.spaces == 0 || g.gaussians == 0 || g.latent_dim == 0 {
                return bad("gmnet needs L, K, d >= 1".into());
            }
            if g.cka_lambda.is_nan() || g.cka_lambda < 0.0 {
                return bad(format!("cka_lambda must be >= 0, got {}", g.cka_lambda));
            }
            if self.fem.output != g.latent_dim {
                return bad(format!(
                    "gmnet FEM output ({}) must equal the latent dimension ({})",
                    self.fem.output, g.latent_dim
                ));
            }
        }
        Ok(())
    }

    fn spaces(&self) -> usize {
        match self.arch {
            Architecture::Gmnet => self.gmnet.spaces,
            _ => 1,
        }
    }

    fn representation_dim(&self) -> usize {
        match self.arch {
            Architecture::Gmnet => self.gmnet.spaces * self.gmnet.gaussians,
            _ => self.fem.output,
        }
    }
}

/// Linear layer with PyTorch's default initialization, `U(−1/√fan_in, 1/√fan_in)`.
pub fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    (Tensor::new([fan_in, fan_out], w), Tensor::vector(b))
}

/// Shared initial variance: (mean nearest-neighbour distance between centers / 2)².
pub fn initial_variance(mu: &Tensor) -> f64 {
    let (k, d) = (mu.rows(), mu.cols());
    if k < 2 {
        return SINGLE_GAUSSIAN_VARIANCE;
    }
    let mean_min = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (0..d).map(|c| (mu.get2(i, c) - mu.get2(j, c)).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / k as f64;
    (mean_min / 2.0).powi(2)
}

/// Gaussians of one latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBank {
    /// Centers, `K × d`.
    pub mu: Tensor,
    /// Unconstrained Cholesky factors, `K × d × d`: strict lower triangle as
    /// is, diagonal stored as a log.
    pub chol: Tensor,
}

impl GaussianBank {
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Self {
        assert!(k >= 1 && d >= 1, "gaussian bank needs K, d >= 1");
        let mu = Tensor::new([k, d], (0..k * d).map(|_| rng.random::<f64>()).collect());
        Self::with_centers(mu)
    }

    /// Diagonal covariances with the shared variance of [`initial_variance`].
    pub fn with_centers(mu: Tensor) -> Self {
        let (k, d) = (mu.rows(), mu.cols());
        let log_sigma = initial_variance(&mu).sqrt().ln();
        let mut chol = Tensor::zeros([k, d, d]);
        for g in 0..k {
            for i in 0..d {
                chol.data_mut()[g * d * d + i * d + i] = log_sigma;
            }
        }
        GaussianBank { mu, chol }
    }

    /// `Σ_k = L_k L_kᵀ` for every Gaussian.
    pub fn covariances(&self) -> Vec<Tensor> {
        covariances(&self.chol)
    }
}

/// Dense covariances from raw Cholesky parameters `K × d × d`.
pub fn covariances(chol: &Tensor) -> Vec<Tensor> {
    let s = chol.shape();
    let (k, d) = (s[0], s[1]);
    (0..k)
        .map(|g| {
            let raw = &chol.data()[g * d * d..(g + 1) * d * d];
            let l = |i: usize, j: usize| match i.cmp(&j) {
                std::cmp::Ordering::Greater => raw[i * d + j],
                std::cmp::Ordering::Equal => raw[i * d + i].exp(),
                std::cmp::Ordering::Less => 0.0,
            };
            let mut out = Tensor::zeros([d, d]);
            for i in 0..d {
                for j in 0..d {
                    out.data_mut()[i * d + j] = (0..d).map(|t| l(i, t) * l(j, t)).sum();
                }
            }
            out
        })
        .collect()
}

/// Per-example MLP ending in a sigmoid. `layers` holds `(W, b)` pairs.
pub fn fem_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    x: NodeId,
    layers: &[(NodeId, NodeId)],
    dropout: f64,
    rng: &mut R,
) -> NodeId {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.affine(h, w, b);
        if i + 1 < layers.len() {
            h = g.relu(h);
            h = g.dropout(h, dropout, rng);
        }
    }
    g.sigmoid(h)
}

/// `m × K` matrix of `log p(z_i | k)`, via triangular solves against the
/// Cholesky factors.
pub fn gaussian_log_likelihood(g: &mut Graph, z: NodeId, mu: NodeId, chol: NodeId) -> NodeId {
    let (m, d) = (g.shape(z)[0], g.shape(z)[1]);
    let k = g.shape(mu)[0];
    assert_eq!(g.shape(mu), [k, d], "gaussian centers {:?} do not match latent dim {}", g.shape(mu), d);
    let zr = g.reshape(z, [1, m, d]);
    let mr = g.reshape(mu, [k, 1, d]);
    let diff = g.sub(zr, mr);
    let l = g.tril_exp_diag(chol);
    let u = g.tri_solve(l, diff);
    let u2 = g.square(u);
    let quad = g.sum_axis(u2, 2);
    // log|Σ|/2 is the sum of the raw (log) Cholesky diagonal
    let raw_diag = g.diagonal(chol);
    let half_logdet = g.sum_axis(raw_diag, 1);
    let half_logdet = g.reshape(half_logdet, [k, 1]);
    let hq = g.mul_scalar(quad, -0.5);
    let ll = g.sub(hq, half_logdet);
    let ll = g.add_scalar(ll, -0.5 * d as f64 * (2.0 * PI).ln());
    g.transpose(ll)
}

/// `m × K` likelihood matrix; fails with the first non-finite Gaussian.
pub fn gaussian_likelihood(g: &mut Graph, z: NodeId, mu: NodeId, chol: NodeId, space: usize) -> Result<NodeId> {
    let ll = gaussian_log_likelihood(g, z, mu, chol);
    let lik = g.exp(ll);
    check_likelihood(g, lik, space)?;
    Ok(lik)
}

fn check_likelihood(g: &Graph, lik: NodeId, space: usize) -> Result<()> {
    let v = g.value(lik);
    let k = v.cols();
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLikelihood { space, gaussian: i % k });
    }
    Ok(())
}

/// Bag representation of one space: mean likelihood per Gaussian. Takes the
/// log-likelihood matrix so that the normalized variant can use a stable
/// softmax over Gaussians.
pub fn brm_gaussian(g: &mut Graph, log_lik: NodeId, normalize: bool, space: usize) -> Result<NodeId> {
    let rows = if normalize { g.softmax(log_lik) } else { g.exp(log_lik) };
    check_likelihood(g, rows, space)?;
    Ok(g.mean_axis(rows, 0))
}

pub fn brm_pooling(g: &mut Graph, z: NodeId, kind: Pooling) -> NodeId {
    match kind {
        Pooling::Avg => g.mean_axis(z, 0),
        Pooling::Max => g.max_axis(z, 0),
        Pooling::Med => g.median_axis(z, 0),
    }
}

/// Space-major concatenation of per-space representations.
pub fn concat_representation(g: &mut Graph, parts: &[NodeId]) -> NodeId {
    if parts.len() == 1 {
        return parts[0];
    }
    g.concat(parts, 0)
}

/// MLP over the bag representation with a final softmax; returns `[l]`.
pub fn qm_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    r: NodeId,
    layers: &[(NodeId, NodeId)],
    dropout: f64,
    rng: &mut R,
) -> NodeId {
    let n = g.value(r).len();
    let mut h = g.reshape(r, [1, n]);
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.affine(h, w, b);
        if i + 1 < layers.len() {
            h = g.relu(h);
            h = g.dropout(h, dropout, rng);
        }
    }
    let l = g.shape(h)[1];
    let p = g.softmax(h);
    g.reshape(p, [l])
}

/// Mean over pairs `i < j` of `‖Z_iᵀZ_j‖²_F / (‖Z_iᵀZ_i‖_F ‖Z_jᵀZ_j‖_F)`.
pub fn cka(g: &mut Graph, zs: &[NodeId]) -> NodeId {
    assert!(zs.len() >= 2, "cka needs at least two latent spaces, got {}", zs.len());
    let n = g.shape(zs[0])[0];
    for &z in zs {
        assert_eq!(g.shape(z)[0], n, "cka: latent spaces have different row counts");
    }
    let t: Vec<NodeId> = zs.iter().map(|&z| g.transpose(z)).collect();
    let self_norm: Vec<NodeId> = zs
        .iter()
        .zip(&t)
        .map(|(&z, &zt)| {
            let gram = g.matmul(zt, z);
            g.frobenius_norm(gram)
        })
        .collect();
    let mut terms = Vec::new();
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            let cross = g.matmul(t[i], zs[j]);
            let num = g.frobenius_norm(cross);
            let num = g.square(num);
            let den = g.mul(self_norm[i], self_norm[j]);
            terms.push(g.div(num, den));
        }
    }
    let pairs = terms.len();
    let mut s = terms[0];
    for &t in &terms[1..] {
        s = g.add(s, t);
    }
    g.mul_scalar(s, 1.0 / pairs as f64)
}

/// `L_original + λ·CKA`; with `λ = 0` or no CKA term the loss is returned unchanged.
pub fn total_loss(g: &mut Graph, quant_loss: NodeId, cka_term: Option<NodeId>, lambda: f64) -> NodeId {
    match cka_term {
        Some(c) if lambda != 0.0 => {
            let reg = g.mul_scalar(c, lambda);
            g.add(quant_loss, reg)
        }
        _ => quant_loss,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub prevalence: NodeId,
    pub representation: NodeId,
    /// Latent projection of each space (`m × d`).
    pub latents: Vec<NodeId>,
    /// Parameter nodes, in [`DeepQuantifier::params`] order.
    pub params: Vec<NodeId>,
}

/// A deep quantifier: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepQuantifier {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl DeepQuantifier {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut push = |name: String, tensor: Tensor| params.push(NamedTensor { name, tensor });
        for s in 0..config.spaces() {
            let mut fan_in = config.input_dim;
            let widths: Vec<usize> = config.fem.hidden.iter().copied().chain([config.fem.output]).collect();
            for (i, &w) in widths.iter().enumerate() {
                let (wt, b) = linear_init(fan_in, w, rng);
                push(format!("fem{}.w{}", s, i), wt);
                push(format!("fem{}.b{}", s, i), b);
                fan_in = w;
            }
            if config.arch == Architecture::Gmnet {
                let bank = GaussianBank::init(config.gmnet.gaussians, config.gmnet.latent_dim, rng);
                push(format!("bank{}.mu", s), bank.mu);
                push(format!("bank{}.chol", s), bank.chol);
            }
        }
        let mut fan_in = config.representation_dim();
        let widths: Vec<usize> = config.qm.hidden.iter().copied().chain([config.classes]).collect();
        for (i, &w) in widths.iter().enumerate() {
            let (wt, b) = linear_init(fan_in, w, rng);
            push(format!("qm.w{}", i), wt);
            push(format!("qm.b{}", i), b);
            fan_in = w;
        }
        Ok(DeepQuantifier { config, params })
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Gaussian bank of latent space `space` (GMNet only).
    pub fn bank(&self, space: usize) -> Option<GaussianBank> {
        Some(GaussianBank {
            mu: self.param(&format!("bank{}.mu", space))?.clone(),
            chol: self.param(&format!("bank{}.chol", space))?.clone(),
        })
    }

    /// True when every covariance factor has a finite, hence positive, diagonal.
    pub fn covariances_are_pd(&self) -> bool {
        (0..self.config.spaces()).filter_map(|s| self.bank(s)).all(|b| {
            let s = b.chol.shape();
            let (k, d) = (s[0], s[1]);
            (0..k).all(|g| (0..d).all(|i| b.chol.data()[g * d * d + i * d + i].exp() > 0.0))
                && b.covariances().iter().all(Tensor::is_finite)
        })
    }

    /// Builds the forward pass for one bag on `g`. Dropout is active only
    /// when `g` is a training graph.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, features: &Tensor, rng: &mut R) -> Result<Forward> {
        let cfg = &self.config;
        if features.rank() != 2 || features.cols() != cfg.input_dim || features.rows() == 0 {
            return Err(Error::Validation(format!(
                "model expects bags of shape [m >= 1, {}], got {:?}",
                cfg.input_dim,
                features.shape()
            )));
        }
        let ids: Vec<NodeId> = self.params.iter().map(|p| g.param(p.tensor.clone())).collect();
        let mut next = ids.iter().copied();
        let mut take_layers = |n: usize| -> Vec<(NodeId, NodeId)> {
            (0..n).map(|_| (next.next().unwrap(), next.next().unwrap())).collect()
        };
        let x = g.constant(features.clone());
        let fem_layers = cfg.fem.hidden.len() + 1;
        let mut latents = Vec::new();
        let mut reps = Vec::new();
        match cfg.arch.pooling() {
            None => {
                for s in 0..cfg.gmnet.spaces {
                    let layers = take_layers(fem_layers);
                    let z = fem_forward(g, x, &layers, cfg.fem.dropout, rng);
                    let bank = take_layers(1)[0];
                    let ll = gaussian_log_likelihood(g, z, bank.0, bank.1);
                    reps.push(brm_gaussian(g, ll, cfg.gmnet.normalize_likelihoods, s)?);
                    latents.push(z);
                }
            }
            Some(kind) => {
                let layers = take_layers(fem_layers);
                let z = fem_forward(g, x, &layers, cfg.fem.dropout, rng);
                reps.push(brm_pooling(g, z, kind));
                latents.push(z);
            }
        }
        let r = concat_representation(g, &reps);
        let qm_layers = take_layers(cfg.qm.hidden.len() + 1);
        let prevalence = qm_forward(g, r, &qm_layers, cfg.qm.dropout, rng);
        Ok(Forward { prevalence, representation: r, latents, params: ids })
    }

    /// Bag representation vector `r` in eval mode.
    pub fn represent(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, features, &mut rng_from_seed(0))?;
        Ok(g.value(f.representation).clone())
    }

    /// Eval-mode prevalence estimate.
    pub fn quantify(&self, features: &Tensor) -> Result<PrevalenceVector> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, features, &mut rng_from_seed(0))?;
        g.check_finite()?;
        PrevalenceVector::renormalized(g.value(f.prevalence).data().to_vec(), 1e-9)
    }
}

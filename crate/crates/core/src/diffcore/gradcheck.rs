//! Central finite-difference oracle for gradient checks.
//!
//! Only [`Graph::forward`] is used to compute numeric derivatives, so the
//! check stays independent of the reverse sweep it validates.

use rand::{Rng, SeedableRng};

use super::{Graph, NodeId, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst per-parameter relative error `max|a−n| / max(max|a|, max|n|, floor)`.
    pub max_rel_error: f64,
    /// Parameter node that produced the worst error.
    pub worst_param: Option<NodeId>,
    pub checked: usize,
}

/// Numeric gradient of the scalar `root` with respect to `param`.
pub fn numeric_gradient(graph: &mut Graph, root: NodeId, param: NodeId, step: f64) -> Tensor {
    let base = graph.value(param).clone();
    let mut out = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        graph.set_value(param, plus);
        graph.forward().expect("finite forward during gradient check");
        let fp = graph.value(root).item();

        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        graph.set_value(param, minus);
        graph.forward().expect("finite forward during gradient check");
        let fm = graph.value(root).item();

        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    graph.set_value(param, base);
    graph.forward().expect("finite forward during gradient check");
    out
}

/// Compares the reverse sweep against central differences for every
/// parameter leaf of `graph`.
pub fn check_gradients(graph: &mut Graph, root: NodeId, step: f64) -> GradCheck {
    let analytic = graph.backward(root);
    let mut report = GradCheck { max_rel_error: 0.0, worst_param: None, checked: 0 };
    let params: Vec<NodeId> = graph.params().to_vec();
    for p in params {
        let numeric = numeric_gradient(graph, root, p, step);
        let a = &analytic[&p];
        let rel = relative_error(a, &numeric);
        report.checked += a.len();
        if rel > report.max_rel_error || report.worst_param.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_param = Some(p);
        }
    }
    report
}

pub fn relative_error(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.max_abs_diff(n);
    let scale = a
        .data()
        .iter()
        .chain(n.data())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-8);
    diff / scale
}

/// Builder for one catalog op: records random parameter leaves, applies the
/// op and returns its (non-scalar) output.
pub type CaseBuilder = fn(&mut Graph, &mut dyn FnMut() -> f64) -> NodeId;

fn rand_tensor(shape: &[usize], u: &mut dyn FnMut() -> f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| u()).collect())
}

fn positive(g: &mut Graph, shape: &[usize], u: &mut dyn FnMut() -> f64) -> NodeId {
    // |x| + 0.5 keeps log/sqrt/div/pow away from their singularities
    let t = rand_tensor(shape, u).map(|x| x.abs() + 0.5);
    g.param(t)
}

/// One case per differentiable op of the engine. Parameters are drawn from
/// the supplied uniform source (tests use `[-2, 2]`).
pub fn catalog_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("affine", |g, u| {
            let x = g.param(rand_tensor(&[4, 3], u));
            let w = g.param(rand_tensor(&[3, 2], u));
            let b = g.param(rand_tensor(&[2], u));
            g.affine(x, w, b)
        }),
        ("sigmoid", |g, u| {
            let x = g.param(rand_tensor(&[3, 3], u));
            g.sigmoid(x)
        }),
        ("relu", |g, u| {
            let x = g.param(rand_tensor(&[3, 4], u));
            g.relu(x)
        }),
        ("softmax", |g, u| {
            let x = g.param(rand_tensor(&[3, 4], u));
            g.softmax(x)
        }),
        ("add", |g, u| {
            let a = g.param(rand_tensor(&[2, 3], u));
            let b = g.param(rand_tensor(&[2, 3], u));
            g.add(a, b)
        }),
        ("add_broadcast", |g, u| {
            let a = g.param(rand_tensor(&[2, 1, 3], u));
            let b = g.param(rand_tensor(&[4, 3], u));
            g.add(a, b)
        }),
        ("sub_broadcast", |g, u| {
            let a = g.param(rand_tensor(&[1, 4, 2], u));
            let b = g.param(rand_tensor(&[3, 1, 2], u));
            g.sub(a, b)
        }),
        ("mul", |g, u| {
            let a = g.param(rand_tensor(&[3, 2], u));
            let b = g.param(rand_tensor(&[3, 2], u));
            g.mul(a, b)
        }),
        ("mul_broadcast", |g, u| {
            let a = g.param(rand_tensor(&[3, 2], u));
            let b = g.param(rand_tensor(&[3, 1], u));
            g.mul(a, b)
        }),
        ("div", |g, u| {
            let a = g.param(rand_tensor(&[2, 3], u));
            let b = positive(g, &[2, 3], u);
            g.div(a, b)
        }),
        ("div_broadcast", |g, u| {
            let a = g.param(rand_tensor(&[2, 3], u));
            let b = positive(g, &[2, 1], u);
            g.div(a, b)
        }),
        ("add_scalar", |g, u| {
            let a = g.param(rand_tensor(&[4], u));
            g.add_scalar(a, 0.7)
        }),
        ("mul_scalar", |g, u| {
            let a = g.param(rand_tensor(&[4], u));
            g.mul_scalar(a, -1.3)
        }),
        ("exp", |g, u| {
            let a = g.param(rand_tensor(&[2, 2], u));
            g.exp(a)
        }),
        ("log", |g, u| {
            let a = positive(g, &[5], u);
            g.log(a)
        }),
        ("sqrt", |g, u| {
            let a = positive(g, &[5], u);
            g.sqrt(a)
        }),
        ("pow", |g, u| {
            let a = positive(g, &[5], u);
            g.powf(a, 2.5)
        }),
        ("abs", |g, u| {
            let a = g.param(rand_tensor(&[6], u));
            g.abs(a)
        }),
        ("sum_axis0", |g, u| {
            let a = g.param(rand_tensor(&[3, 4], u));
            g.sum_axis(a, 0)
        }),
        ("sum_axis1", |g, u| {
            let a = g.param(rand_tensor(&[2, 3, 4], u));
            g.sum_axis(a, 1)
        }),
        ("mean_axis", |g, u| {
            let a = g.param(rand_tensor(&[3, 4], u));
            g.mean_axis(a, 0)
        }),
        ("mean_all", |g, u| {
            let a = g.param(rand_tensor(&[3, 4], u));
            let m = g.mean(a);
            g.reshape(m, [1])
        }),
        ("max_axis", |g, u| {
            let a = g.param(rand_tensor(&[5, 3], u));
            g.max_axis(a, 0)
        }),
        ("median_axis_odd", |g, u| {
            let a = g.param(rand_tensor(&[5, 3], u));
            g.median_axis(a, 0)
        }),
        ("median_axis_even", |g, u| {
            let a = g.param(rand_tensor(&[3, 4], u));
            g.median_axis(a, 1)
        }),
        ("concat", |g, u| {
            let a = g.param(rand_tensor(&[2, 3], u));
            let b = g.param(rand_tensor(&[2, 2], u));
            g.concat(&[a, b], 1)
        }),
        ("dropout", |g, u| {
            let a = g.param(rand_tensor(&[4, 4], u));
            // fixed mask; rng only decides which entries survive
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64((u() * 1e6).abs() as u64);
            g.dropout(a, 0.3, &mut rng)
        }),
        ("frobenius_norm", |g, u| {
            let a = g.param(rand_tensor(&[3, 2], u));
            let n = g.frobenius_norm(a);
            g.reshape(n, [1])
        }),
        ("transpose", |g, u| {
            let a = g.param(rand_tensor(&[2, 3], u));
            g.transpose(a)
        }),
        ("matmul", |g, u| {
            let a = g.param(rand_tensor(&[3, 4], u));
            let b = g.param(rand_tensor(&[4, 2], u));
            g.matmul(a, b)
        }),
        ("quad_form", |g, u| {
            let x = g.param(rand_tensor(&[4, 3], u));
            let m = g.param(rand_tensor(&[3, 3], u));
            g.quad_form(x, m)
        }),
        ("tri_solve", |g, u| {
            let raw = g.param(rand_tensor(&[2, 3, 3], u).map(|x| 0.4 * x));
            let l = g.tril_exp_diag(raw);
            let b = g.param(rand_tensor(&[2, 4, 3], u));
            g.tri_solve(l, b)
        }),
        ("diagonal", |g, u| {
            let a = g.param(rand_tensor(&[2, 3, 3], u));
            g.diagonal(a)
        }),
    ]
}

/// Builds `case`, reduces its output to a scalar with fixed random weights
/// and runs the finite-difference comparison.
pub fn check_case(case: CaseBuilder, seed: u64, step: f64) -> GradCheck {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u = move || rng.random_range(-2.0..2.0);
    let mut g = Graph::training();
    let out = case(&mut g, &mut u);
    let w = rand_tensor(g.shape(out), &mut u);
    let w = g.constant(w);
    let weighted = g.mul(out, w);
    let root = g.sum(weighted);
    check_gradients(&mut g, root, step)
}

//! Central finite-difference checker for reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::KNOWLEDGE_SLOTS;
use crate::error::{Error, Result};
use crate::losses::{diagnosis_weights, inverse_temperature, total_loss_graph, EmbeddingBatch, EmbeddingNodes, LossConfig, DEFAULT_LAMBDA};
use crate::tensor::{Scalar, Tensor};

/// Coordinates probed per tensor (all of them when the tensor is smaller).
pub const COORDS_PER_TENSOR: usize = 32;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error observed for each parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub coordinates_checked: usize,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p+eps) − f(p−eps)) / 2eps`, with relative error
/// `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` receives the graph and one parameter leaf per entry of `params` and
/// must return a one-element node. Coordinates are sampled with `seed`.
pub fn grad_check<T: Scalar, F>(f: F, params: &[Tensor<T>], eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= COORDS_PER_TENSOR {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + T::of(eps);
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - T::of(eps);
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[c].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            checked += 1;
        }
        max_rel_error.push(worst);
    }
    let pass = max_rel_error.iter().all(|&e| e <= tol);
    Ok(GradCheckReport { max_rel_error, coordinates_checked: checked, eps, tol, pass })
}

/// Batch geometry for the toy loss check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShape {
    pub n: usize,
    pub k_max: usize,
    pub dim: usize,
    pub hw: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self { n: 4, k_max: 2, dim: 8, hw: 4 }
    }
}

/// Random unnormalized leaves `[visual, patches, texts]` and a mask with the
/// knowledge slots valid and each subtext slot valid with probability 3/4.
pub fn toy_leaves<T: Scalar>(shape: ToyShape, seed: u64) -> (Vec<Tensor<T>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = shape.k_max + KNOWLEDGE_SLOTS;
    let mut draw = |rows: usize| {
        let data = (0..rows * shape.dim).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
        Tensor::from_vec(&[rows, shape.dim], data).expect("sized")
    };
    let leaves = vec![draw(shape.n), draw(shape.n * shape.hw), draw(shape.n * slots)];
    let mask = (0..shape.n * slots).map(|k| k % slots < KNOWLEDGE_SLOTS || rng.gen_bool(0.75)).collect();
    (leaves, mask)
}

/// Builds normalized embedding nodes from raw leaves; masked text rows are zeroed.
pub fn toy_nodes<T: Scalar>(g: &mut Graph<T>, leaves: &[Var], mask: &[bool], shape: ToyShape) -> Result<EmbeddingNodes> {
    let visual = g.l2_normalize_rows(leaves[0]);
    let texts = g.l2_normalize_rows(leaves[2]);
    let keep: Vec<T> = mask.iter().flat_map(|&m| std::iter::repeat(if m { T::one() } else { T::zero() }).take(shape.dim)).collect();
    let texts = g.mul_const(texts, Tensor::from_vec(&[mask.len(), shape.dim], keep)?)?;
    Ok(EmbeddingNodes { visual, patches: leaves[1], texts, mask: mask.to_vec(), n: shape.n, slots: shape.k_max + KNOWLEDGE_SLOTS, hw: shape.hw })
}

/// Gradient check of the full objective (all components on, diagnosis
/// weights frozen at their initial values) with respect to the raw
/// embeddings and the log-temperature.
pub fn check_total_loss<T: Scalar>(shape: ToyShape, tau: f64, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    if shape.n == 0 || shape.dim == 0 || shape.hw == 0 {
        return Err(Error::InvalidConfig("toy shape needs n, dim and hw of at least 1".into()));
    }
    let (mut leaves, mask) = toy_leaves::<T>(shape, seed);
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
        let nodes = toy_nodes(&mut g, &vars, &mask, shape)?;
        diagnosis_weights(&EmbeddingBatch::from_graph(&g, &nodes)?)
    };
    leaves.push(Tensor::scalar(T::of(tau.ln())));
    let cfg = LossConfig::full();
    grad_check(
        |g, p| {
            let nodes = toy_nodes(g, &p[..3], &mask, shape)?;
            let inv_tau = inverse_temperature(g, p[3]);
            Ok(total_loss_graph(g, &nodes, &weights, inv_tau, DEFAULT_LAMBDA, &cfg)?.total)
        },
        &leaves,
        eps,
        tol,
        seed,
    )
}

//! Multinomial logistic regression used as the mixture's gating function.
//!
//! Labels are 0-based cluster indices throughout the library.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-4,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// Softmax over `K` linear scores. Row `k` of `coefficients` holds the
/// feature weights of cluster `k` followed by its intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GateDoc", try_from = "GateDoc")]
pub struct SoftmaxGate {
    coefficients: Array2<f64>,
    l2_penalty: f64,
}

#[derive(Serialize, Deserialize)]
struct GateDoc {
    n_features: usize,
    l2_penalty: f64,
    coefficients: Vec<Vec<f64>>,
}

impl From<SoftmaxGate> for GateDoc {
    fn from(g: SoftmaxGate) -> Self {
        Self {
            n_features: g.n_features(),
            l2_penalty: g.l2_penalty,
            coefficients: g.coefficients.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<GateDoc> for SoftmaxGate {
    type Error = Error;

    fn try_from(doc: GateDoc) -> Result<Self> {
        let k = doc.coefficients.len();
        let width = doc.n_features + 1;
        if let Some(row) = doc.coefficients.iter().find(|r| r.len() != width) {
            return Err(Error::Dimension {
                expected: width,
                got: row.len(),
            });
        }
        let flat = doc.coefficients.into_iter().flatten().collect();
        let coefficients = Array2::from_shape_vec((k, width), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::from_coefficients(coefficients, doc.l2_penalty)
    }
}

impl SoftmaxGate {
    pub fn from_coefficients(coefficients: Array2<f64>, l2_penalty: f64) -> Result<Self> {
        if coefficients.nrows() == 0 || coefficients.ncols() == 0 {
            return Err(Error::Empty("gate needs at least one row and an intercept column"));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("gate coefficients must be finite".into()));
        }
        Ok(Self {
            coefficients,
            l2_penalty,
        })
    }

    /// All-zero gate: uniform proportions everywhere.
    pub fn uniform(k: usize, n_features: usize) -> Self {
        Self {
            coefficients: Array2::zeros((k, n_features + 1)),
            l2_penalty: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.ncols() - 1
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        &self.coefficients
    }

    pub fn l2_penalty(&self) -> f64 {
        self.l2_penalty
    }

    /// Mixing proportions at `x`, a point on the K-simplex.
    pub fn predict_proportions(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        if x.len() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        let m = self.n_features();
        let mut scores: Vec<f64> = self
            .coefficients
            .rows()
            .into_iter()
            .map(|row| row.slice(ndarray::s![..m]).dot(&x) + row[m])
            .collect();
        softmax_in_place(&mut scores);
        Ok(scores)
    }

    /// Proportions for every row of `features`, as an `n × K` matrix.
    pub fn predict_proportions_batch(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: features.ncols(),
            });
        }
        let mut scores = linear_scores(features, &self.coefficients);
        for mut row in scores.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok(scores)
    }
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// `n × K` matrix of `β_k · x_i + b_k`.
fn linear_scores(features: ArrayView2<f64>, coefficients: &Array2<f64>) -> Array2<f64> {
    let m = features.ncols();
    let weights = coefficients.slice(ndarray::s![.., ..m]);
    let intercepts = coefficients.column(m);
    let mut scores = features.dot(&weights.t());
    scores += &intercepts.insert_axis(Axis(0));
    scores
}

/// Mean multinomial cross-entropy plus `(λ/2)·‖β‖²` over the non-intercept
/// weights, and its gradient with respect to the coefficient matrix.
pub fn gate_objective(
    features: ArrayView2<f64>,
    labels: &[usize],
    coefficients: &Array2<f64>,
    l2_penalty: f64,
) -> (f64, Array2<f64>) {
    let n = features.nrows();
    let m = features.ncols();
    let mut probs = linear_scores(features, coefficients);
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        let s = row.as_slice_mut().expect("standard layout");
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - s[y];
        for v in s.iter_mut() {
            *v = (*v - lse).exp();
        }
        s[y] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;

    // probs now holds P - Y.
    let k = coefficients.nrows();
    let mut grad = Array2::<f64>::zeros((k, m + 1));
    grad.slice_mut(ndarray::s![.., ..m])
        .assign(&(probs.t().dot(&features) * inv_n));
    grad.column_mut(m).assign(&(probs.sum_axis(Axis(0)) * inv_n));

    let weights = coefficients.slice(ndarray::s![.., ..m]);
    loss += 0.5 * l2_penalty * weights.iter().map(|w| w * w).sum::<f64>();
    grad.slice_mut(ndarray::s![.., ..m])
        .scaled_add(l2_penalty, &weights);
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct GateFit {
    pub gate: SoftmaxGate,
    /// Objective value at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits the gate from zero with L-BFGS directions. Every step backtracks
/// until the Armijo condition holds, so the objective never increases.
pub fn fit_gate(
    features: ArrayView2<f64>,
    labels: &[usize],
    k: usize,
    config: &GateConfig,
) -> Result<GateFit> {
    fit_gate_from(features, labels, k, config, None)
}

/// As [`fit_gate`], starting from `init` when given.
pub fn fit_gate_from(
    features: ArrayView2<f64>,
    labels: &[usize],
    k: usize,
    config: &GateConfig,
    init: Option<&Array2<f64>>,
) -> Result<GateFit> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "need at least k={k} rows to fit the gate, got {n}"
        )));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for k={k}")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }

    let m = features.ncols();
    let lambda = config.l2_penalty;
    let mut beta = match init {
        Some(b) if b.dim() == (k, m + 1) => b.clone(),
        Some(b) => {
            return Err(Error::Dimension {
                expected: k * (m + 1),
                got: b.len(),
            })
        }
        None => Array2::<f64>::zeros((k, m + 1)),
    };
    let (mut loss, mut grad) = gate_objective(features, labels, &beta, lambda);
    let mut trace = vec![loss];
    let mut history: VecDeque<(Array2<f64>, Array2<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        if max_abs(&grad) < config.tol {
            converged = true;
            break;
        }
        let mut direction = lbfgs_direction(&grad, &history);
        let mut slope: f64 = dot(&grad, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = -&grad;
            slope = -dot(&grad, &grad);
        }
        // The first step has no curvature information to scale it.
        let mut alpha = if history.is_empty() { 1.0 / max_abs(&grad).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &beta + &(&direction * alpha);
            let (trial_loss, trial_grad) = gate_objective(features, labels, &trial, lambda);
            if trial_loss <= loss + 1e-4 * alpha * slope {
                accepted = Some((trial, trial_loss, trial_grad));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, next_loss, next_grad)) = accepted else {
            // No descent is representable at this precision.
            break;
        };
        let step = &next - &beta;
        let change = &next_grad - &grad;
        let sy = dot(&step, &change);
        if sy > 1e-12 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((step, change, 1.0 / sy));
        }
        beta = next;
        loss = next_loss;
        grad = next_grad;
        trace.push(loss);
        iterations += 1;
    }
    if !converged {
        converged = max_abs(&grad) < config.tol;
    }

    Ok(GateFit {
        gate: SoftmaxGate {
            coefficients: beta,
            l2_penalty: lambda,
        },
        loss_trace: trace,
        iterations,
        converged,
    })
}

const LBFGS_MEMORY: usize = 8;

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// L-BFGS two-loop recursion: `-H·g` for the inverse-Hessian approximation
/// built from the stored `(s, y, 1/sᵀy)` pairs.
fn lbfgs_direction(grad: &Array2<f64>, history: &VecDeque<(Array2<f64>, Array2<f64>, f64)>) -> Array2<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= dot(s, y) / dot(y, y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.scaled_add(a - b, s);
    }
    -q
}

/// Index of the largest proportion; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

//! Mixture of Kaplan-Meier experts with a softmax gate, trained by
//! hard-assignment EM.
//!
//! Each cluster `k` owns a survival step function `S_k` and a smoothed event
//! density `f_k`. A point `(x, t, d)` scores `τ_k(x) · f_k(t)` when the event
//! was observed and `τ_k(x) · S_k(t)` when it was censored. The E-step gives
//! each point to its best-scoring cluster; the M-step refits every expert on
//! its members and refits the gate on the new labels. Iteration stops once
//! fewer than `churn_tol · n` points change cluster.
//!
//! All scores are handled in log space; the argmax and the normalized
//! posteriors are unchanged by that.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, fit_gate_from, GateConfig, SoftmaxGate};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::nonparam::{
    kaplan_meier, plugin_bandwidth, SmoothedDensity, StepSurvivalFunction, DEFAULT_DENSITY_FLOOR,
};
use crate::predictor::SurvivalPredictor;
use crate::seeds;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Initial labelings are redrawn at most this many times before missing
/// clusters are patched in.
const INIT_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterExpert {
    survival: StepSurvivalFunction,
    density: SmoothedDensity,
    member_count: usize,
}

impl ClusterExpert {
    pub fn fit(times: &[f64], events: &[bool], bandwidth: f64, floor: f64) -> Result<Self> {
        let survival = kaplan_meier(times, events)?;
        Self::from_survival(survival, bandwidth, floor, times.len())
    }

    pub fn from_survival(
        survival: StepSurvivalFunction,
        bandwidth: f64,
        floor: f64,
        member_count: usize,
    ) -> Result<Self> {
        let density = SmoothedDensity::new(&survival, bandwidth, floor)?;
        Ok(Self {
            survival,
            density,
            member_count,
        })
    }

    pub fn survival(&self) -> &StepSurvivalFunction {
        &self.survival
    }

    pub fn density(&self) -> &SmoothedDensity {
        &self.density
    }

    pub fn member_count(&self) -> usize {
        self.member_count
    }

    /// `f(t)` for an observed event, `S(t)` floored at the density floor for
    /// a censored one.
    pub fn point_likelihood(&self, t: f64, event: bool) -> f64 {
        if event {
            self.density.evaluate(t)
        } else {
            self.survival.survival_at(t).max(self.density.floor())
        }
    }
}

pub fn point_likelihood(expert: &ClusterExpert, t: f64, event: bool) -> f64 {
    expert.point_likelihood(t, event)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k: usize,
    pub max_iters: usize,
    pub churn_tol: f64,
    pub seed: u64,
    pub n_restarts: usize,
    pub gate: GateConfig,
    pub density_floor: f64,
    /// Defaults to `max(5, n / (10 k))` when unset.
    pub min_cluster_size: Option<usize>,
    /// Defaults to the plug-in bandwidth of the uncensored training times.
    pub bandwidth: Option<f64>,
    pub outlier_weight: f64,
    /// Length of the time axis used by the outlier component; defaults to
    /// `max(t) - min(t)` of the training data.
    pub region_volume: Option<f64>,
}

impl FitConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            churn_tol: 0.001,
            seed: 0,
            n_restarts: 5,
            gate: GateConfig::default(),
            density_floor: DEFAULT_DENSITY_FLOOR,
            min_cluster_size: None,
            bandwidth: None,
            outlier_weight: 0.0,
            region_volume: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_restarts(mut self, n_restarts: usize) -> Self {
        self.n_restarts = n_restarts;
        self
    }

    pub fn min_cluster_size_for(&self, n: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| 5.max(n / (10 * self.k.max(1))))
    }

    fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidArgument("need at least one restart".into()));
        }
        if !(self.churn_tol >= 0.0) {
            return Err(Error::InvalidArgument("churn_tol must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::InvalidArgument(format!(
                "outlier weight must lie in [0, 1), got {}",
                self.outlier_weight
            )));
        }
        if !(self.density_floor > 0.0) {
            return Err(Error::InvalidArgument("density floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Points whose label changed in this iteration.
    pub churn: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub seed: u64,
    pub initial_log_likelihood: Option<f64>,
    pub final_log_likelihood: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub selected_restart: usize,
    /// Observed log-likelihood of the model fitted on the initial random labels.
    pub initial_log_likelihood: f64,
    pub trace: Vec<IterationRecord>,
    pub restarts: Vec<RestartSummary>,
}

/// Choices in this implementation that go beyond the bare mixture equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub gate_intercept: bool,
    pub gate_l2_penalty: f64,
    pub density_estimator: String,
    pub hard_assignment: bool,
    pub small_cluster_repair: bool,
}

impl ModelFlags {
    fn current(gate: &GateConfig) -> Self {
        Self {
            gate_intercept: true,
            gate_l2_penalty: gate.l2_penalty,
            density_estimator: "gaussian_kernel_over_km_masses".to_string(),
            hard_assignment: true,
            small_cluster_repair: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDoc", try_from = "ModelDoc")]
pub struct SurvMixModel {
    experts: Vec<ClusterExpert>,
    gate: SoftmaxGate,
    bandwidth: f64,
    density_floor: f64,
    outlier_weight: f64,
    region_volume: f64,
    flags: ModelFlags,
    diagnostics: Diagnostics,
}

impl SurvMixModel {
    /// Assembles a model from already fitted parts.
    pub fn from_parts(
        experts: Vec<ClusterExpert>,
        gate: SoftmaxGate,
        bandwidth: f64,
        density_floor: f64,
    ) -> Result<Self> {
        if experts.is_empty() || experts.len() != gate.k() {
            return Err(Error::Dimension {
                expected: gate.k(),
                got: experts.len(),
            });
        }
        Ok(Self {
            flags: ModelFlags::current(&GateConfig {
                l2_penalty: gate.l2_penalty(),
                ..GateConfig::default()
            }),
            experts,
            gate,
            bandwidth,
            density_floor,
            outlier_weight: 0.0,
            region_volume: 1.0,
            diagnostics: Diagnostics::default(),
        })
    }

    /// Enables the uniform outlier component with weight `tau0` over a time
    /// axis of length `volume`.
    pub fn with_outlier(mut self, tau0: f64, volume: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau0) {
            return Err(Error::InvalidArgument(format!("outlier weight {tau0} not in [0, 1)")));
        }
        if !(volume > 0.0 && volume.is_finite()) {
            return Err(Error::InvalidArgument(format!("region volume {volume} must be positive")));
        }
        self.outlier_weight = tau0;
        self.region_volume = volume;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[ClusterExpert] {
        &self.experts
    }

    pub fn gate(&self) -> &SoftmaxGate {
        &self.gate
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density_floor(&self) -> f64 {
        self.density_floor
    }

    pub fn outlier_weight(&self) -> f64 {
        self.outlier_weight
    }

    pub fn region_volume(&self) -> f64 {
        self.region_volume
    }

    pub fn flags(&self) -> &ModelFlags {
        &self.flags
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// `n × K` matrix of `log τ_k(x_n) + log likelihood_k(t_n, d_n)`.
    pub fn log_scores(&self, data: &SurvivalDataset) -> Result<Array2<f64>> {
        let props = self.gate.predict_proportions_batch(data.features.view())?;
        let k = self.k();
        let flat: Vec<f64> = (0..data.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let (t, d) = (data.times[i], data.events[i]);
                let props = &props;
                self.experts
                    .iter()
                    .enumerate()
                    .map(move |(c, e)| props[[i, c]].ln() + e.point_likelihood(t, d).ln())
            })
            .collect();
        let scores = Array2::from_shape_vec((data.len(), k), flat).expect("n × k scores");
        Ok(scores)
    }

    /// Outlier component's contribution for one observation.
    fn outlier_likelihood(&self, t: f64, event: bool) -> f64 {
        if event {
            1.0 / self.region_volume
        } else {
            (1.0 - t / self.region_volume).max(0.0).max(self.density_floor)
        }
    }

    /// Mixture survival at every grid time for features `x`.
    ///
    /// Accumulated as `1 - Σ w·F` so S is exactly 1 wherever every expert is
    /// still at 1, and monotone since each term is.
    pub fn predict_survival(&self, x: ArrayView1<f64>, grid: &[f64]) -> Result<Vec<f64>> {
        let tau = self.gate.predict_proportions(x)?;
        let w0 = self.outlier_weight;
        Ok(grid
            .iter()
            .map(|&t| {
                let mix: f64 = tau
                    .iter()
                    .zip(&self.experts)
                    .map(|(w, e)| w * (1.0 - e.survival.survival_at(t)))
                    .sum();
                let cdf = if w0 > 0.0 {
                    w0 * (t / self.region_volume).clamp(0.0, 1.0) + (1.0 - w0) * mix
                } else {
                    mix
                };
                (1.0 - cdf).clamp(0.0, 1.0)
            })
            .collect())
    }

    pub fn predict_cluster(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(classifier::argmax(&self.gate.predict_proportions(x)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl SurvivalPredictor for SurvMixModel {
    fn n_clusters(&self) -> usize {
        self.k()
    }

    fn predict_survival(&self, x: ArrayView1<f64>, grid: &[f64]) -> Result<Vec<f64>> {
        SurvMixModel::predict_survival(self, x, grid)
    }

    fn predict_cluster(&self, x: ArrayView1<f64>) -> Result<usize> {
        SurvMixModel::predict_cluster(self, x)
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertDoc {
    times: Vec<f64>,
    values: Vec<f64>,
    member_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    k: usize,
    bandwidth: f64,
    density_floor: f64,
    outlier_weight: f64,
    region_volume: f64,
    gate: SoftmaxGate,
    experts: Vec<ExpertDoc>,
    flags: ModelFlags,
    diagnostics: Diagnostics,
}

impl From<SurvMixModel> for ModelDoc {
    fn from(m: SurvMixModel) -> Self {
        Self {
            version: MODEL_FORMAT_VERSION,
            k: m.k(),
            bandwidth: m.bandwidth,
            density_floor: m.density_floor,
            outlier_weight: m.outlier_weight,
            region_volume: m.region_volume,
            gate: m.gate,
            experts: m
                .experts
                .iter()
                .map(|e| ExpertDoc {
                    times: e.survival.jump_times().to_vec(),
                    values: e.survival.values().to_vec(),
                    member_count: e.member_count,
                })
                .collect(),
            flags: m.flags,
            diagnostics: m.diagnostics,
        }
    }
}

impl TryFrom<ModelDoc> for SurvMixModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format version {}",
                doc.version
            )));
        }
        if doc.k != doc.experts.len() || doc.k != doc.gate.k() {
            return Err(Error::Dimension {
                expected: doc.k,
                got: doc.experts.len(),
            });
        }
        let experts = doc
            .experts
            .into_iter()
            .map(|e| {
                let sf = StepSurvivalFunction::new(e.times, e.values)?;
                ClusterExpert::from_survival(sf, doc.bandwidth, doc.density_floor, e.member_count)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SurvMixModel {
            experts,
            gate: doc.gate,
            bandwidth: doc.bandwidth,
            density_floor: doc.density_floor,
            outlier_weight: 0.0,
            region_volume: 1.0,
            flags: doc.flags,
            diagnostics: doc.diagnostics,
        };
        model.with_outlier(doc.outlier_weight, doc.region_volume)
    }
}

/// Uniform random labels in `0..k` in which every label occurs at least once.
pub fn init_assignments(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(Error::Infeasible { n, k, min_size: 1 });
    }
    let mut rng = seeds::rng(seed);
    let mut labels = vec![0; n];
    for _ in 0..INIT_REDRAWS {
        labels.iter_mut().for_each(|l| *l = rng.random_range(0..k));
        if label_counts(&labels, k).iter().all(|&c| c > 0) {
            return Ok(labels);
        }
    }
    // Patch each missing label onto the first point whose cluster can spare it.
    let mut counts = label_counts(&labels, k);
    for missing in 0..k {
        if counts[missing] > 0 {
            continue;
        }
        let i = (0..n)
            .find(|&i| counts[labels[i]] > 1)
            .expect("n >= k leaves a cluster with a spare point");
        counts[labels[i]] -= 1;
        labels[i] = missing;
        counts[missing] = 1;
    }
    Ok(labels)
}

fn label_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Hard E-step: each point goes to its highest-scoring cluster (lowest index
/// on ties).
pub fn e_step(model: &SurvMixModel, data: &SurvivalDataset) -> Result<Vec<usize>> {
    Ok(e_step_with_margins(model, data)?.0)
}

/// Labels plus each point's log-score margin between its best and
/// second-best cluster.
pub fn e_step_with_margins(
    model: &SurvMixModel,
    data: &SurvivalDataset,
) -> Result<(Vec<usize>, Vec<f64>)> {
    Ok(assign_from_scores(&model.log_scores(data)?))
}

fn assign_from_scores(scores: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let row = row.as_slice().expect("standard layout");
            let best = classifier::argmax(row);
            let second = row
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != best)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            (best, row[best] - second)
        })
        .unzip()
}

/// Refits every expert on its members (shared fixed bandwidth) and the gate
/// on the labels.
pub fn m_step(
    data: &SurvivalDataset,
    labels: &[usize],
    k: usize,
    bandwidth: f64,
    density_floor: f64,
    gate_config: &GateConfig,
) -> Result<SurvMixModel> {
    m_step_from(data, labels, k, bandwidth, density_floor, gate_config, None)
}

/// [`m_step`] with the gate optimizer started from `previous`'s coefficients.
fn m_step_from(
    data: &SurvivalDataset,
    labels: &[usize],
    k: usize,
    bandwidth: f64,
    density_floor: f64,
    gate_config: &GateConfig,
    previous: Option<&SoftmaxGate>,
) -> Result<SurvMixModel> {
    if labels.len() != data.len() {
        return Err(Error::Dimension {
            expected: data.len(),
            got: labels.len(),
        });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range for k={k}")));
        }
        members[l].push(i);
    }
    let experts = members
        .iter()
        .enumerate()
        .map(|(c, rows)| {
            if rows.is_empty() {
                return Err(Error::EmptyClass(c));
            }
            let times: Vec<f64> = rows.iter().map(|&i| data.times[i]).collect();
            let events: Vec<bool> = rows.iter().map(|&i| data.events[i]).collect();
            ClusterExpert::fit(&times, &events, bandwidth, density_floor)
        })
        .collect::<Result<Vec<_>>>()?;
    let init = previous.map(SoftmaxGate::coefficients);
    let gate = fit_gate_from(data.features.view(), labels, k, gate_config, init)?.gate;
    let mut model = SurvMixModel::from_parts(experts, gate, bandwidth, density_floor)?;
    model.flags = ModelFlags::current(gate_config);
    Ok(model)
}

/// Tops up every cluster with fewer than `min_size` members by moving in the
/// lowest-margin points of whichever cluster is currently largest. Without
/// margins every point counts as margin 0 and the seed alone orders them.
pub fn repair_clusters(
    labels: &[usize],
    margins: Option<&[f64]>,
    k: usize,
    min_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = labels.len();
    if k == 0 || n < k * min_size {
        return Err(Error::Infeasible { n, k, min_size });
    }
    if let Some(m) = margins {
        if m.len() != n {
            return Err(Error::Dimension { expected: n, got: m.len() });
        }
    }
    let mut counts = label_counts(labels, k);
    if counts.iter().all(|&c| c >= min_size) {
        return Ok(labels.to_vec());
    }

    let mut tiebreak: Vec<usize> = (0..n).collect();
    tiebreak.shuffle(&mut seeds::rng(seed));
    let mut rank = vec![0; n];
    for (r, &i) in tiebreak.iter().enumerate() {
        rank[i] = r;
    }
    let margin = |i: usize| margins.map_or(0.0, |m| m[i]);
    // Per-cluster queues, lowest margin last so `pop` yields it.
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        queues[labels[i]].push(i);
    }
    for q in &mut queues {
        q.sort_by(|&a, &b| {
            margin(b)
                .total_cmp(&margin(a))
                .then(rank[b].cmp(&rank[a]))
        });
    }

    let mut out = labels.to_vec();
    for target in 0..k {
        while counts[target] < min_size {
            let donor = classifier::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
            let i = queues[donor].pop().expect("largest cluster is above the floor");
            out[i] = target;
            counts[donor] -= 1;
            counts[target] += 1;
        }
    }
    Ok(out)
}

/// `Σ_n log Σ_k τ_k(x_n) · likelihood_k(t_n, d_n)`, with the outlier term
/// mixed in when enabled.
pub fn observed_log_likelihood(model: &SurvMixModel, data: &SurvivalDataset) -> Result<f64> {
    Ok(log_likelihood_from_scores(model, data, &model.log_scores(data)?))
}

fn log_likelihood_from_scores(model: &SurvMixModel, data: &SurvivalDataset, scores: &Array2<f64>) -> f64 {
    let w0 = model.outlier_weight;
    scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
            if w0 > 0.0 {
                let out = model.outlier_likelihood(data.times[i], data.events[i]);
                (w0 * out + (1.0 - w0) * max.exp() * sum).ln()
            } else {
                max + sum.ln()
            }
        })
        .sum()
}

/// Soft posteriors, `n × K`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    matrix: Array2<f64>,
}

impl Responsibilities {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.matrix
            .rows()
            .into_iter()
            .map(|r| classifier::argmax(r.as_slice().expect("standard layout")))
            .collect()
    }

    /// `1 - max_k r_nk` per point.
    pub fn uncertainty(&self) -> Vec<f64> {
        self.matrix
            .rows()
            .into_iter()
            .map(|r| 1.0 - r.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

pub fn responsibilities(model: &SurvMixModel, data: &SurvivalDataset) -> Result<Responsibilities> {
    let mut matrix = model.log_scores(data)?;
    for mut row in matrix.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(Responsibilities { matrix })
}

pub fn cluster_uncertainty(model: &SurvMixModel, data: &SurvivalDataset) -> Result<Vec<f64>> {
    Ok(responsibilities(model, data)?.uncertainty())
}

struct RunOutcome {
    model: SurvMixModel,
    initial_ll: f64,
    final_ll: f64,
    trace: Vec<IterationRecord>,
    converged: bool,
}

fn run_em(
    data: &SurvivalDataset,
    config: &FitConfig,
    bandwidth: f64,
    min_size: usize,
    seed: u64,
) -> Result<RunOutcome> {
    let n = data.len();
    let k = config.k;
    let fit = |labels: &[usize], previous: Option<&SoftmaxGate>| {
        m_step_from(data, labels, k, bandwidth, config.density_floor, &config.gate, previous)
    };

    let labels = init_assignments(n, k, seeds::child_seed(seed, 0))?;
    let mut labels = repair_clusters(&labels, None, k, min_size, seeds::child_seed(seed, 1))?;
    let mut model = fit(&labels, None)?;
    // Scores of the current model serve both its likelihood and the next E-step.
    let mut scores = model.log_scores(data)?;
    let initial_ll = log_likelihood_from_scores(&model, data, &scores);
    let mut final_ll = initial_ll;
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let (proposed, margins) = assign_from_scores(&scores);
        let repaired = repair_clusters(
            &proposed,
            Some(&margins),
            k,
            min_size,
            seeds::child_seed(seed, iteration as u64 + 1),
        )?;
        let churn = repaired.iter().zip(&labels).filter(|(a, b)| a != b).count();
        labels = repaired;
        if churn > 0 {
            model = fit(&labels, Some(model.gate()))?;
            scores = model.log_scores(data)?;
            final_ll = log_likelihood_from_scores(&model, data, &scores);
        }
        trace.push(IterationRecord {
            iteration,
            churn,
            log_likelihood: final_ll,
        });
        if (churn as f64) < config.churn_tol * n as f64 || churn == 0 {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        model,
        initial_ll,
        final_ll,
        trace,
        converged,
    })
}

/// Fits the mixture with `config.n_restarts` independent EM runs and keeps
/// the run with the highest observed log-likelihood.
pub fn fit(data: &SurvivalDataset, config: &FitConfig) -> Result<SurvMixModel> {
    config.validate()?;
    let n = data.len();
    let k = config.k;
    let min_size = config.min_cluster_size_for(n);
    if n < k * min_size {
        return Err(Error::Infeasible { n, k, min_size });
    }
    let bandwidth = match config.bandwidth {
        Some(h) => h,
        None => {
            let uncensored: Vec<f64> = data
                .times
                .iter()
                .zip(&data.events)
                .filter(|(_, &e)| e)
                .map(|(&t, _)| t)
                .collect();
            plugin_bandwidth(&uncensored)?
        }
    };
    let volume = config.region_volume.unwrap_or_else(|| {
        let lo = data.times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.max_time();
        if hi > lo { hi - lo } else { 1.0 }
    });

    let restart_seeds: Vec<u64> = (0..config.n_restarts)
        .map(|r| seeds::child_seed(config.seed, r as u64))
        .collect();
    let outcomes: Vec<Result<RunOutcome>> = restart_seeds
        .par_iter()
        .map(|&s| run_em(data, config, bandwidth, min_size, s))
        .collect();

    let mut summaries = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, RunOutcome)> = None;
    for (r, (outcome, &seed)) in outcomes.into_iter().zip(&restart_seeds).enumerate() {
        match outcome {
            Ok(run) => {
                summaries.push(RestartSummary {
                    restart: r,
                    seed,
                    initial_log_likelihood: Some(run.initial_ll),
                    final_log_likelihood: Some(run.final_ll),
                    iterations: run.trace.len(),
                    converged: run.converged,
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| run.final_ll > b.final_ll) {
                    best = Some((r, run));
                }
            }
            Err(e) => summaries.push(RestartSummary {
                restart: r,
                seed,
                initial_log_likelihood: None,
                final_log_likelihood: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((selected, run)) = best else {
        let causes: Vec<String> = summaries
            .iter()
            .map(|s| format!("restart {}: {}", s.restart, s.error.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::AllRestartsFailed(causes.join("; ")));
    };

    let mut model = run.model.with_outlier(config.outlier_weight, volume)?;
    model.diagnostics = Diagnostics {
        selected_restart: selected,
        initial_log_likelihood: run.initial_ll,
        trace: run.trace,
        restarts: summaries,
    };
    if config.outlier_weight > 0.0 {
        // Recompute so the recorded value includes the outlier component.
        let ll = observed_log_likelihood(&model, data)?;
        if let Some(s) = model.diagnostics.restarts.get_mut(selected) {
            s.final_log_likelihood = Some(ll);
        }
    }
    Ok(model)
}

/// One validation score from k selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub k: usize,
    pub fold: usize,
    pub c_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub best_k: usize,
    /// One row per (k, fold).
    pub rows: Vec<CvRow>,
    /// Mean validation C-index per k, in grid order.
    pub mean_c_index: Vec<(usize, f64)>,
}

pub const CV_FOLDS: usize = 3;

/// Stratified 3-fold CV over `k_grid`; picks the k with the highest mean
/// validation td-C-index (first in grid order on ties). `fit_one` receives
/// the training fold, k and a seed.
pub fn cross_validate_k<M, F>(
    data: &SurvivalDataset,
    k_grid: &[usize],
    seed: u64,
    fit_one: F,
) -> Result<KSelection>
where
    M: SurvivalPredictor,
    F: Fn(&SurvivalDataset, usize, u64) -> Result<M> + Sync,
{
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("k grid is empty".into()));
    }
    let folds = crate::data::stratified_folds(data, CV_FOLDS, seeds::child_seed(seed, 0))?;
    let jobs: Vec<(usize, usize)> = k_grid
        .iter()
        .flat_map(|&k| (0..CV_FOLDS).map(move |f| (k, f)))
        .collect();
    let rows = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(k, fold))| {
            let train_rows: Vec<usize> = (0..CV_FOLDS)
                .filter(|&f| f != fold)
                .flat_map(|f| folds[f].iter().copied())
                .collect();
            let mut train_rows = train_rows;
            train_rows.sort_unstable();
            let train = data.subset(&train_rows);
            let valid = data.subset(&folds[fold]);
            let model = fit_one(&train, k, seeds::child_seed(seed, j as u64 + 1))?;
            let grid = crate::metrics::evaluation_grid(&valid.times);
            let curves = model.predict_curves(valid.features.view(), &grid)?;
            let c_index = crate::metrics::td_c_index(&curves, &valid.times, &valid.events)?;
            Ok(CvRow { k, fold, c_index })
        })
        .collect::<Result<Vec<_>>>()?;

    let mean_c_index: Vec<(usize, f64)> = k_grid
        .iter()
        .map(|&k| {
            let scores: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.c_index).collect();
            (k, scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect();
    let mut best = mean_c_index[0];
    for &(k, c) in &mean_c_index[1..] {
        if c > best.1 {
            best = (k, c);
        }
    }
    Ok(KSelection {
        best_k: best.0,
        rows,
        mean_c_index,
    })
}

/// Chooses k by cross-validated td-C-index and refits on all of `data`.
pub fn select_k(
    data: &SurvivalDataset,
    k_grid: &[usize],
    config: &FitConfig,
) -> Result<(SurvMixModel, KSelection)> {
    let largest = k_grid.iter().copied().max().unwrap_or(0);
    let smallest_train = data.len() - data.len().div_ceil(CV_FOLDS);
    let probe = FitConfig { k: largest, ..*config };
    let min_size = probe.min_cluster_size_for(smallest_train);
    if largest > 0 && smallest_train < largest * min_size {
        return Err(Error::Infeasible {
            n: smallest_train,
            k: largest,
            min_size,
        });
    }
    let selection = cross_validate_k(data, k_grid, config.seed, |train, k, seed| {
        fit(train, &FitConfig { k, seed, ..*config })
    })?;
    let model = fit(data, &FitConfig { k: selection.best_k, ..*config })?;
    Ok((model, selection))
}

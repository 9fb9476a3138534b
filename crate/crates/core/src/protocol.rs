//! Evaluation reports and the repeated-resplit benchmark.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::kmeans_survival_fit;
use crate::data::{apply_preprocess, fit_preprocess, stratified_split, RawTable, SurvivalDataset};
use crate::error::Result;
use crate::metrics::{evaluation_grid, logrank_test, td_c_index, LogrankResult};
use crate::mixture::{self, cross_validate_k, FitConfig};
use crate::predictor::SurvivalPredictor;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub c_index: f64,
    pub logrank: Option<LogrankResult>,
    /// Why the log-rank test was skipped, when it was.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logrank_note: Option<String>,
    /// Subjects per predicted cluster, index 0 = cluster 1.
    pub cluster_sizes: Vec<usize>,
}

/// td-C-index of the predicted curves on `{0} ∪ observed times`, plus a
/// log-rank test across the feature-only cluster assignments.
pub fn evaluate<M: SurvivalPredictor + ?Sized>(model: &M, data: &SurvivalDataset) -> Result<Evaluation> {
    let grid = evaluation_grid(&data.times);
    let curves = model.predict_curves(data.features.view(), &grid)?;
    let c_index = td_c_index(&curves, &data.times, &data.events)?;
    let clusters = model.predict_clusters(data.features.view())?;
    let mut cluster_sizes = vec![0; model.n_clusters()];
    for &c in &clusters {
        cluster_sizes[c] += 1;
    }
    let occupied = cluster_sizes.iter().filter(|&&c| c > 0).count();
    let (logrank, logrank_note) = if occupied < 2 {
        (None, Some(format!("log-rank needs at least 2 occupied clusters, found {occupied}")))
    } else {
        match logrank_test(&clusters, &data.times, &data.events) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(Evaluation {
        n: data.len(),
        c_index,
        logrank,
        logrank_note,
        cluster_sizes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SurvMixClust,
    KMeansSurvival,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SurvMixClust => "survmixclust",
            Self::KMeansSurvival => "kmeans_survival",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub n_splits: usize,
    pub fractions: (f64, f64, f64),
    pub k_grid: Vec<usize>,
    pub seed: u64,
    /// Template for mixture fits; `k` and `seed` are overwritten per fit.
    pub fit: FitConfig,
}

impl BenchmarkConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_splits: 20,
            fractions: (0.6, 0.2, 0.2),
            k_grid: (2..=7).collect(),
            seed,
            fit: FitConfig::new(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub split: usize,
    pub model: String,
    pub k: usize,
    pub c_index: f64,
    pub logrank_statistic: Option<f64>,
    pub logrank_df: Option<usize>,
    pub logrank_p: Option<f64>,
}

impl BenchmarkRow {
    fn new(split: usize, kind: ModelKind, k: usize, eval: &Evaluation) -> Self {
        Self {
            split,
            model: kind.name().to_string(),
            k,
            c_index: eval.c_index,
            logrank_statistic: eval.logrank.as_ref().map(|r| r.statistic),
            logrank_df: eval.logrank.as_ref().map(|r| r.df),
            logrank_p: eval.logrank.as_ref().map(|r| r.p_value),
        }
    }
}

/// One resplit: preprocessing is fitted on train+validation only; both
/// models then pick k by 3-fold CV there, refit, and are scored on the
/// held-out test part.
pub fn run_split(table: &RawTable, config: &BenchmarkConfig, split: usize) -> Result<Vec<BenchmarkRow>> {
    let split_seed = seeds::child_seed(config.seed, split as u64);
    let parts = stratified_split(&table.labels()?, config.fractions, seeds::child_seed(split_seed, 0))?;
    let mut pool_rows: Vec<usize> = parts.train.ids.iter().chain(&parts.validation.ids).copied().collect();
    pool_rows.sort_unstable();
    let pool_table = table.subset(&pool_rows);
    let recipe = fit_preprocess(&pool_table)?;
    let pool = apply_preprocess(&pool_table, &recipe)?;
    let test = apply_preprocess(&table.subset(&parts.test.ids), &recipe)?;

    let fit = FitConfig {
        seed: seeds::child_seed(split_seed, 1),
        ..config.fit
    };
    let (mix, sel) = mixture::select_k(&pool, &config.k_grid, &fit)?;
    let mix_eval = evaluate(&mix, &test)?;

    let km_seed = seeds::child_seed(split_seed, 2);
    let km_sel = cross_validate_k(&pool, &config.k_grid, km_seed, |train, k, s| {
        kmeans_survival_fit(train, k, s)
    })?;
    let km = kmeans_survival_fit(&pool, km_sel.best_k, km_seed)?;
    let km_eval = evaluate(&km, &test)?;

    Ok(vec![
        BenchmarkRow::new(split, ModelKind::SurvMixClust, sel.best_k, &mix_eval),
        BenchmarkRow::new(split, ModelKind::KMeansSurvival, km_sel.best_k, &km_eval),
    ])
}

/// Runs every resplit in parallel; rows come back ordered by split, then
/// model.
pub fn benchmark(table: &RawTable, config: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let per_split = (0..config.n_splits)
        .into_par_iter()
        .map(|s| run_split(table, config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_split.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::KMeansSurvivalModel;
    use crate::nonparam::kaplan_meier;
    use ndarray::array;

    #[test]
    fn single_cluster_skips_logrank() {
        let data = SurvivalDataset::new(
            array![[0.0], [1.0], [2.0]],
            vec![1.0, 2.0, 3.0],
            vec![true, true, false],
            vec!["x".into()],
        )
        .unwrap();
        let km = kaplan_meier(&data.times, &data.events).unwrap();
        let model = KMeansSurvivalModel::new(array![[1.0]], vec![km]).unwrap();
        let e = evaluate(&model, &data).unwrap();
        assert!(e.logrank.is_none());
        assert!(e.logrank_note.is_some());
        assert_eq!(e.cluster_sizes, vec![3]);
        assert_eq!(e.c_index, 0.5);
    }

    #[test]
    fn benchmark_rows_per_split() {
        use crate::synth::*;
        let spec = SynthSpec {
            n: 240,
            seed: 5,
            weights: vec![0.5, 0.5],
            clusters: vec![
                ClusterSpec {
                    center: vec![-2.0],
                    spread: 1.0,
                    time: TimeDistribution::Exponential { rate: 0.2 },
                },
                ClusterSpec {
                    center: vec![2.0],
                    spread: 1.0,
                    time: TimeDistribution::Exponential { rate: 2.0 },
                },
            ],
            censoring: Censoring::Exponential { rate: 0.15 },
        };
        let d = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &d.dataset, None).unwrap();
        let table = crate::data::read_csv(buf.as_slice(), &schema_for(1)).unwrap();
        let mut config = BenchmarkConfig::new(3);
        config.n_splits = 3;
        config.k_grid = vec![2, 3];
        config.fit.n_restarts = 1;
        let rows = benchmark(&table, &config).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].model, "survmixclust");
        assert_eq!(rows[1].model, "kmeans_survival");
        assert_eq!(rows[5].split, 2);
        assert_eq!(rows, benchmark(&table, &config).unwrap());
    }
}

use ndarray::{ArrayView1, ArrayView2};

use crate::error::Result;
use crate::metrics::CurvePredictions;

/// Anything that yields a survival curve and a cluster for a feature vector.
pub trait SurvivalPredictor {
    fn n_clusters(&self) -> usize;

    /// Survival probabilities at each point of `grid`.
    fn predict_survival(&self, x: ArrayView1<f64>, grid: &[f64]) -> Result<Vec<f64>>;

    /// 0-based cluster index assigned from the features alone.
    fn predict_cluster(&self, x: ArrayView1<f64>) -> Result<usize>;

    fn predict_curves(&self, features: ArrayView2<f64>, grid: &[f64]) -> Result<CurvePredictions> {
        let rows = features
            .rows()
            .into_iter()
            .map(|x| self.predict_survival(x, grid))
            .collect::<Result<Vec<_>>>()?;
        CurvePredictions::new(grid.to_vec(), rows)
    }

    fn predict_clusters(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        features
            .rows()
            .into_iter()
            .map(|x| self.predict_cluster(x))
            .collect()
    }
}

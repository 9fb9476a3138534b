//! K-means Survival: K-means on the features, then one Kaplan-Meier curve per
//! cluster. Survival labels play no part in forming the clusters.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::nonparam::{kaplan_meier, StepSurvivalFunction};
use crate::predictor::SurvivalPredictor;
use crate::seeds;

pub const DEFAULT_KMEANS_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each assign/update round.
    pub wcss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, later ones drawn with probability
/// proportional to squared distance from the nearest chosen centre.
fn seed_centroids(features: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = features.nrows();
    let mut centroids = Array2::zeros((k, features.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, features.row(first)))
        .collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a centre.
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for (i, x) in features.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, features.row(pick)));
        }
    }
    centroids
}

fn wcss(features: ArrayView2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    features
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, centroids.row(l)))
        .sum()
}

/// Lloyd's algorithm from k-means++ seeds. A cluster left empty after an
/// assignment takes the point farthest from its current centroid.
pub fn kmeans_fit(features: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let n = features.nrows();
    if k == 0 || n < k {
        return Err(Error::Infeasible { n, k, min_size: 1 });
    }
    let mut rng = seeds::rng(seed);
    let mut centroids = seed_centroids(features, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut wcss_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<usize> = features
            .rows()
            .into_iter()
            .map(|x| nearest_centroid(centroids.view(), x).0)
            .collect();
        let mut counts = vec![0usize; k];
        for &l in &next {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point among those whose cluster can spare one.
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(features.row(a), centroids.row(next[a]));
                    let db = sq_dist(features.row(b), centroids.row(next[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n >= k leaves a cluster with a spare point");
            counts[next[far]] -= 1;
            next[far] = c;
            counts[c] = 1;
        }

        let stable = next == labels;
        labels = next;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for (x, &l) in features.rows().into_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &x;
        }
        for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
            row /= counts[c] as f64;
        }
        centroids = sums;
        wcss_trace.push(wcss(features, &centroids, &labels));
        if stable {
            converged = true;
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        labels,
        wcss_trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "KMeansDoc", try_from = "KMeansDoc")]
pub struct KMeansSurvivalModel {
    centroids: Array2<f64>,
    curves: Vec<StepSurvivalFunction>,
}

impl KMeansSurvivalModel {
    pub fn new(centroids: Array2<f64>, curves: Vec<StepSurvivalFunction>) -> Result<Self> {
        if centroids.nrows() != curves.len() || curves.is_empty() {
            return Err(Error::Dimension {
                expected: centroids.nrows(),
                got: curves.len(),
            });
        }
        Ok(Self { centroids, curves })
    }

    pub fn k(&self) -> usize {
        self.curves.len()
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn curves(&self) -> &[StepSurvivalFunction] {
        &self.curves
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const KMEANS_TAG: &str = "kmeans_survival";

#[derive(Serialize, Deserialize)]
struct KMeansDoc {
    model: String,
    centroids: Vec<Vec<f64>>,
    curves: Vec<StepSurvivalFunction>,
}

impl From<KMeansSurvivalModel> for KMeansDoc {
    fn from(m: KMeansSurvivalModel) -> Self {
        Self {
            model: KMEANS_TAG.to_string(),
            centroids: m.centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
            curves: m.curves,
        }
    }
}

impl TryFrom<KMeansDoc> for KMeansSurvivalModel {
    type Error = Error;

    fn try_from(doc: KMeansDoc) -> Result<Self> {
        if doc.model != KMEANS_TAG {
            return Err(Error::InvalidArgument(format!("not a k-means model: {}", doc.model)));
        }
        let m = doc.centroids.first().map_or(0, Vec::len);
        if doc.centroids.iter().any(|r| r.len() != m) {
            return Err(Error::Schema("ragged centroid rows".into()));
        }
        let flat: Vec<f64> = doc.centroids.iter().flatten().copied().collect();
        let centroids = Array2::from_shape_vec((doc.centroids.len(), m), flat)
            .map_err(|e| Error::Schema(e.to_string()))?;
        // The derived deserializer skips the constructor's checks.
        let curves = doc
            .curves
            .iter()
            .map(|c| StepSurvivalFunction::new(c.jump_times().to_vec(), c.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(centroids, curves)
    }
}

impl SurvivalPredictor for KMeansSurvivalModel {
    fn n_clusters(&self) -> usize {
        self.k()
    }

    fn predict_survival(&self, x: ArrayView1<f64>, grid: &[f64]) -> Result<Vec<f64>> {
        let c = self.predict_cluster(x)?;
        Ok(grid.iter().map(|&t| self.curves[c].survival_at(t)).collect())
    }

    fn predict_cluster(&self, x: ArrayView1<f64>) -> Result<usize> {
        if x.len() != self.centroids.ncols() {
            return Err(Error::Dimension {
                expected: self.centroids.ncols(),
                got: x.len(),
            });
        }
        Ok(nearest_centroid(self.centroids.view(), x).0)
    }
}

pub fn kmeans_survival_fit(data: &SurvivalDataset, k: usize, seed: u64) -> Result<KMeansSurvivalModel> {
    let km = kmeans_fit(data.features.view(), k, seed, DEFAULT_KMEANS_ITERS)?;
    let curves = (0..k)
        .map(|c| {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| km.labels[i] == c).collect();
            let times: Vec<f64> = rows.iter().map(|&i| data.times[i]).collect();
            let events: Vec<bool> = rows.iter().map(|&i| data.events[i]).collect();
            kaplan_meier(&times, &events).map_err(|_| Error::EmptyClass(c))
        })
        .collect::<Result<Vec<_>>>()?;
    KMeansSurvivalModel::new(km.centroids, curves)
}

pub fn kmeans_survival_predict(
    model: &KMeansSurvivalModel,
    x: ArrayView1<f64>,
    grid: &[f64],
) -> Result<Vec<f64>> {
    model.predict_survival(x, grid)
}

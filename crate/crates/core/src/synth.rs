//! Synthetic right-censored data with a known cluster structure.
//!
//! Each point draws a cluster from the mixing weights, Gaussian features
//! around that cluster's centre, an event time from the cluster's
//! distribution and an independent censoring time. The record keeps
//! `t = min(T, C)` and `d = 1(T <= C)`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::{Exp, Normal, Weibull};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnSchema, FeatureColumn, SurvivalDataset};
use crate::error::{Error, Result};
use crate::seeds;

pub const TRUTH_COLUMN: &str = "truth";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimeDistribution {
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl TimeDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Exponential { rate } => 1.0 / rate,
            Self::Weibull { shape, scale } => scale * statrs::function::gamma::gamma(1.0 + 1.0 / shape),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Self::Weibull { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad event-time distribution {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Censoring {
    None,
    Exponential { rate: f64 },
    Cutoff { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub center: Vec<f64>,
    pub spread: f64,
    pub time: TimeDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub clusters: Vec<ClusterSpec>,
    pub censoring: Censoring,
}

impl SynthSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_features(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.center.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        if self.weights.len() != self.clusters.len() {
            return bad(format!(
                "{} weights for {} clusters",
                self.weights.len(),
                self.clusters.len()
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("weights {:?} are not on the simplex", self.weights));
        }
        let m = self.n_features();
        for (i, c) in self.clusters.iter().enumerate() {
            if c.center.len() != m {
                return bad(format!("cluster {i} centre has {} features, expected {m}", c.center.len()));
            }
            if !(c.spread >= 0.0 && c.spread.is_finite()) {
                return bad(format!("cluster {i} spread {} must be non-negative", c.spread));
            }
            c.time.validate()?;
        }
        match self.censoring {
            Censoring::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("censoring rate {rate} must be positive"))
            }
            Censoring::Cutoff { time } if !(time >= 0.0 && time.is_finite()) => {
                bad(format!("censoring cutoff {time} must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: SurvivalDataset,
    /// 0-based true cluster per row.
    pub labels: Vec<usize>,
}

pub fn feature_names(m: usize) -> Vec<String> {
    (1..=m).map(|j| format!("x{j}")).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let m = spec.n_features();
    let mut rng = seeds::rng(spec.seed);
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let censor_exp = match spec.censoring {
        Censoring::Exponential { rate } => Some(Exp::new(rate).expect("validated rate")),
        _ => None,
    };

    let mut features = Array2::<f64>::zeros((spec.n, m));
    let mut times = Vec::with_capacity(spec.n);
    let mut events = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let k = pick.sample(&mut rng);
        let c = &spec.clusters[k];
        for j in 0..m {
            features[[i, j]] = c.center[j] + c.spread * std_normal.sample(&mut rng);
        }
        let t_event = match c.time {
            TimeDistribution::Exponential { rate } => Exp::new(rate).expect("validated").sample(&mut rng),
            TimeDistribution::Weibull { shape, scale } => {
                Weibull::new(scale, shape).expect("validated").sample(&mut rng)
            }
        };
        let t_censor = match spec.censoring {
            Censoring::None => f64::INFINITY,
            Censoring::Exponential { .. } => censor_exp.as_ref().expect("set above").sample(&mut rng),
            Censoring::Cutoff { time } => time,
        };
        times.push(t_event.min(t_censor));
        events.push(t_event <= t_censor);
        labels.push(k);
    }
    let dataset = SurvivalDataset::new(features, times, events, feature_names(m))?;
    Ok(SynthData { dataset, labels })
}

/// Schema matching [`write_csv`] output: `time`, `event`, continuous `x1..xm`.
pub fn schema_for(m: usize) -> ColumnSchema {
    ColumnSchema {
        time: "time".to_string(),
        event: "event".to_string(),
        features: feature_names(m)
            .into_iter()
            .map(|name| FeatureColumn {
                name,
                kind: ColumnKind::Continuous,
            })
            .collect(),
    }
}

/// Writes `time,event,x1..xm[,truth]`; truth labels are written 1-based.
pub fn write_csv<W: Write>(writer: W, data: &SurvivalDataset, truth: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_string(), "event".to_string()];
    header.extend(data.feature_names.iter().cloned());
    if truth.is_some() {
        header.push(TRUTH_COLUMN.to_string());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![data.times[i].to_string(), u8::from(data.events[i]).to_string()];
        rec.extend(data.features.row(i).iter().map(f64::to_string));
        if let Some(t) = truth {
            rec.push((t[i] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv output>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, data: &SurvivalDataset, truth: Option<&[usize]>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_csv(std::io::BufWriter::new(file), data, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(weights: Vec<f64>, censoring: Censoring, n: usize) -> SynthSpec {
        SynthSpec {
            n,
            seed: 11,
            weights,
            clusters: vec![
                ClusterSpec {
                    center: vec![-2.0, 0.0],
                    spread: 1.0,
                    time: TimeDistribution::Exponential { rate: 0.5 },
                },
                ClusterSpec {
                    center: vec![2.0, 0.0],
                    spread: 1.0,
                    time: TimeDistribution::Weibull { shape: 2.0, scale: 3.0 },
                },
            ],
            censoring,
        }
    }

    #[test]
    fn degenerate_weights_and_cutoff() {
        let d = generate(&spec(vec![1.0, 0.0], Censoring::None, 500)).unwrap();
        assert!(d.labels.iter().all(|&l| l == 0));
        assert!(d.dataset.events.iter().all(|&e| e));

        let d = generate(&spec(vec![0.5, 0.5], Censoring::Cutoff { time: 0.0 }, 200)).unwrap();
        assert!(d.dataset.events.iter().all(|&e| !e));
    }

    #[test]
    fn deterministic() {
        let s = spec(vec![0.3, 0.7], Censoring::Exponential { rate: 0.2 }, 300);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.dataset.times, b.dataset.times);
        assert_eq!(a.dataset.features, b.dataset.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&spec(vec![0.5, 0.6], Censoring::None, 10)).is_err());
        assert!(generate(&spec(vec![0.5, 0.5], Censoring::Exponential { rate: 0.0 }, 10)).is_err());
        let mut s = spec(vec![0.5, 0.5], Censoring::None, 10);
        s.clusters[1].center.push(1.0);
        assert!(generate(&s).is_err());
        assert!(SynthSpec::from_json_str("{\"n\": 3").is_err());
    }

    #[test]
    fn json_shape() {
        let text = r#"{"n": 4, "seed": 1, "weights": [1.0],
            "clusters": [{"center": [0.0], "spread": 1.0, "time": {"kind": "weibull", "shape": 1.5, "scale": 2.0}}],
            "censoring": {"kind": "cutoff", "time": 3.0}}"#;
        let s = SynthSpec::from_json_str(text).unwrap();
        assert_eq!(s.censoring, Censoring::Cutoff { time: 3.0 });
        assert_eq!(generate(&s).unwrap().dataset.len(), 4);
    }

    #[test]
    fn csv_round_trips_through_loader() {
        let d = generate(&spec(vec![0.5, 0.5], Censoring::Exponential { rate: 0.3 }, 50)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &d.dataset, Some(&d.labels)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,event,x1,x2,truth\n"));
        let table = crate::data::read_csv(text.as_bytes(), &schema_for(2)).unwrap();
        assert_eq!(table.times, d.dataset.times);
        assert_eq!(table.events, d.dataset.events);
    }
}

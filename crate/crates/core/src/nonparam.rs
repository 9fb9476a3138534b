//! Nonparametric estimators for a single cluster's event-time distribution.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default additive floor for density evaluations.
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-12;

/// Kernel contributions further than this many bandwidths away are below
/// `exp(-72)` relative to the peak and are skipped.
const KERNEL_CUTOFF: f64 = 12.0;

/// Right-continuous, non-increasing step function starting at 1.
///
/// `values[j]` is the survival probability on `[jump_times[j], jump_times[j+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvivalFunction {
    #[serde(rename = "times")]
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepSurvivalFunction {
    pub fn new(jump_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if jump_times.len() != values.len() {
            return Err(Error::Dimension {
                expected: jump_times.len(),
                got: values.len(),
            });
        }
        if jump_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "jump times must be strictly increasing".into(),
            ));
        }
        let mut prev = 1.0;
        for &v in &values {
            if !(0.0..=prev).contains(&v) {
                return Err(Error::InvalidArgument(
                    "survival values must be non-increasing within [0, 1]".into(),
                ));
            }
            prev = v;
        }
        Ok(Self { jump_times, values })
    }

    /// The constant function 1.
    pub fn flat() -> Self {
        Self {
            jump_times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// S(t). Before the first jump this is 1; past the last jump the last
    /// value is carried forward.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&u| u <= t);
        if idx == 0 {
            1.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(1.0)
    }

    /// First time at which S drops to 0.5 or below.
    pub fn median(&self) -> Option<f64> {
        self.jump_times
            .iter()
            .zip(&self.values)
            .find(|(_, &v)| v <= 0.5)
            .map(|(&t, _)| t)
    }

    /// Probability mass at each jump: `S(t_j-) - S(t_j)`.
    pub fn km_mass(&self) -> Vec<(f64, f64)> {
        let mut prev = 1.0;
        self.jump_times
            .iter()
            .zip(&self.values)
            .map(|(&t, &v)| {
                let m = prev - v;
                prev = v;
                (t, m)
            })
            .collect()
    }
}

/// Product-limit estimate over the distinct event times.
///
/// An observation censored at the same time as an event is still at risk for
/// that event.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepSurvivalFunction> {
    if times.is_empty() {
        return Err(Error::Empty("kaplan_meier needs at least one observation"));
    }
    if times.len() != events.len() {
        return Err(Error::Dimension {
            expected: times.len(),
            got: events.len(),
        });
    }
    if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::InvalidArgument(format!("invalid time {t}")));
    }

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let u = times[order[i]];
        let mut deaths = 0;
        let mut leaving = 0;
        while i < order.len() && times[order[i]] == u {
            if events[order[i]] {
                deaths += 1;
            }
            leaving += 1;
            i += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            jump_times.push(u);
            values.push(surv);
        }
        at_risk -= leaving;
    }
    Ok(StepSurvivalFunction { jump_times, values })
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Normal-reference plug-in bandwidth `1.06 · min(sd, IQR/1.34) · n^(-1/5)`.
///
/// When the interquartile range collapses to zero (heavy ties) the standard
/// deviation alone is used.
pub fn plugin_bandwidth(uncensored_times: &[f64]) -> Result<f64> {
    let mut sorted = uncensored_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::Bandwidth);
    }
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(1.06 * spread * n.powf(-0.2))
}

/// Gaussian-kernel smoothing of Kaplan-Meier probability masses, plus a
/// positive floor so that every evaluation is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedDensity {
    times: Vec<f64>,
    masses: Vec<f64>,
    bandwidth: f64,
    floor: f64,
}

impl SmoothedDensity {
    pub fn new(sf: &StepSurvivalFunction, bandwidth: f64, floor: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "density floor must be positive, got {floor}"
            )));
        }
        let (times, masses) = sf.km_mass().into_iter().unzip();
        Ok(Self {
            times,
            masses,
            bandwidth,
            floor,
        })
    }

    pub fn mass_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.masses.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.times.partition_point(|&u| u < t - KERNEL_CUTOFF * h);
        let hi = self.times.partition_point(|&u| u <= t + KERNEL_CUTOFF * h);
        let norm = 1.0 / (h * (2.0 * PI).sqrt());
        let sum: f64 = self.times[lo..hi]
            .iter()
            .zip(&self.masses[lo..hi])
            .map(|(&u, &m)| {
                let z = (t - u) / h;
                m * (-0.5 * z * z).exp()
            })
            .sum();
        self.floor + norm * sum
    }
}

pub fn smoothed_density(
    sf: &StepSurvivalFunction,
    bandwidth: f64,
    floor: f64,
) -> Result<SmoothedDensity> {
    SmoothedDensity::new(sf, bandwidth, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gauss(z: f64, h: f64) -> f64 {
        (-0.5 * (z / h).powi(2)).exp() / (h * (2.0 * PI).sqrt())
    }

    #[test]
    fn hand_product_limit() {
        // n=3: at t=1 one death of 3 at risk -> 2/3; t=2 censored; t=3 one
        // death of 1 at risk -> 0.
        let sf = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(sf.jump_times(), &[1.0, 3.0]);
        assert_relative_eq!(sf.survival_at(1.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(sf.survival_at(2.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(sf.survival_at(3.0), 0.0);
    }

    #[test]
    fn all_censored_is_flat() {
        let sf = kaplan_meier(&[1.0, 4.0, 2.0], &[false; 3]).unwrap();
        assert!(sf.jump_times().is_empty());
        assert_eq!(sf.survival_at(100.0), 1.0);
        assert!(sf.km_mass().is_empty());
    }

    #[test]
    fn events_before_censorings_on_ties() {
        // At t=2: one event, one censoring, 3 at risk -> 2/3 after the event.
        let sf = kaplan_meier(&[2.0, 2.0, 5.0], &[false, true, true]).unwrap();
        assert_relative_eq!(sf.survival_at(2.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(sf.survival_at(5.0), 0.0);
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(kaplan_meier(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn evaluation_rules() {
        let sf = StepSurvivalFunction::new(vec![1.0, 3.0], vec![0.7, 0.4]).unwrap();
        assert_eq!(sf.survival_at(0.0), 1.0);
        assert_eq!(sf.survival_at(1.0), 0.7);
        assert_eq!(sf.survival_at(2.999), 0.7);
        assert_eq!(sf.survival_at(50.0), 0.4);
        assert!(StepSurvivalFunction::new(vec![1.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(StepSurvivalFunction::new(vec![1.0, 2.0], vec![0.4, 0.5]).is_err());
    }

    #[test]
    fn masses_from_hand_km() {
        let sf = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let m = sf.km_mass();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].0, 1.0);
        assert_relative_eq!(m[0].1, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(m[1].0, 3.0);
        assert_relative_eq!(m[1].1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn uncensored_masses_are_uniform() {
        let times: Vec<f64> = (1..=8).map(|i| i as f64 * 0.5).collect();
        let sf = kaplan_meier(&times, &[true; 8]).unwrap();
        for (_, m) in sf.km_mass() {
            assert_relative_eq!(m, 1.0 / 8.0, epsilon = 1e-12);
        }
    }

    fn probit(p: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        n.inverse_cdf(p)
    }

    #[test]
    fn bandwidth_reference_value() {
        let raw: Vec<f64> = (0..100).map(|i| probit((i as f64 + 0.5) / 100.0)).collect();
        let mean = raw.iter().sum::<f64>() / 100.0;
        let sd = (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let xs: Vec<f64> = raw.iter().map(|x| 10.0 + x / sd).collect();
        let h = plugin_bandwidth(&xs).unwrap();
        assert_relative_eq!(h, 1.06 * 100f64.powf(-0.2), max_relative = 0.01);
        assert_relative_eq!(h, 0.422, epsilon = 0.005);
    }

    #[test]
    fn bandwidth_errors_and_scaling() {
        assert!(matches!(plugin_bandwidth(&[3.0, 3.0]), Err(Error::Bandwidth)));
        assert!(plugin_bandwidth(&[3.0]).is_err());
        let xs = [0.3, 1.2, 2.2, 2.9, 4.4, 5.0, 7.5];
        let h = plugin_bandwidth(&xs).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| x * 3.5).collect();
        assert_relative_eq!(plugin_bandwidth(&scaled).unwrap(), 3.5 * h, max_relative = 1e-12);
    }

    #[test]
    fn kernel_peak_value() {
        let sf = StepSurvivalFunction::new(vec![5.0], vec![0.0]).unwrap();
        let d = smoothed_density(&sf, 0.8, 1e-12).unwrap();
        assert_relative_eq!(d.evaluate(5.0), 1e-12 + 1.0 / (0.8 * (2.0 * PI).sqrt()), max_relative = 1e-14);
    }

    #[test]
    fn empty_masses_give_floor() {
        let d = smoothed_density(&StepSurvivalFunction::flat(), 1.0, 1e-6).unwrap();
        assert_eq!(d.evaluate(0.0), 1e-6);
        assert_eq!(d.evaluate(37.0), 1e-6);
    }

    #[test]
    fn direct_kernel_sum() {
        let sf = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let floor = 1e-12;
        let d = smoothed_density(&sf, 0.5, floor).unwrap();
        let expected = floor + gauss(0.0, 0.5) / 3.0 + 2.0 * gauss(2.0, 0.5) / 3.0;
        assert_relative_eq!(d.evaluate(1.0), expected, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_parameters() {
        let sf = StepSurvivalFunction::flat();
        assert!(smoothed_density(&sf, 0.0, 1e-12).is_err());
        assert!(smoothed_density(&sf, 1.0, 0.0).is_err());
    }
}

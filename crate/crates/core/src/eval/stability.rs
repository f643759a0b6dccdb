use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub metrics: Vec<MetricSummary>,
    pub per_seed: Vec<(u64, BTreeMap<String, f64>)>,
    /// Seeds whose run failed, with the error text.
    pub failed: Vec<(u64, String)>,
}

impl StabilityReport {
    pub fn partial(&self) -> bool {
        !self.failed.is_empty()
    }

    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    /// `metric,mean,std,n_seeds` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "mean", "std", "n_seeds"]).expect("in-memory write");
        for m in &self.metrics {
            w.write_record([m.metric.clone(), m.mean.to_string(), m.std.to_string(), m.n_seeds.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Runs `run` once per seed and summarizes every metric it returns. A failing
/// seed is recorded and the rest still count.
pub fn stability_report<E: std::fmt::Display>(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> std::result::Result<BTreeMap<String, f64>, E>,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(EvalError::Config(format!("{} seeds given, need at least 2", seeds.len())));
    }
    let mut per_seed = Vec::new();
    let mut failed = Vec::new();
    for &s in seeds {
        match run(s) {
            Ok(m) => per_seed.push((s, m)),
            Err(e) => failed.push((s, e.to_string())),
        }
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (_, m) in &per_seed {
        for (k, v) in m {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    let metrics = values
        .into_iter()
        .map(|(metric, v)| {
            let n = v.len();
            if v.iter().all(|&x| x == v[0]) {
                return MetricSummary { metric, mean: v[0], std: 0.0, n_seeds: n };
            }
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            MetricSummary { metric, mean, std, n_seeds: n }
        })
        .collect();
    Ok(StabilityReport {
        metrics,
        per_seed,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_runs_have_zero_std() {
        let r = stability_report(&[1, 2, 3], |_| Ok::<_, String>(BTreeMap::from([("acc".to_string(), 0.7)]))).unwrap();
        let m = r.get("acc").unwrap();
        assert_eq!((m.mean, m.std, m.n_seeds), (0.7, 0.0, 3));
        assert_eq!(r.to_csv(), "metric,mean,std,n_seeds\nacc,0.7,0,3\n");
    }

    #[test]
    fn sample_std_and_partial_flag() {
        let r = stability_report(&[1, 2, 3], |s| {
            if s == 3 {
                Err("diverged".to_string())
            } else {
                Ok(BTreeMap::from([("x".to_string(), s as f64)]))
            }
        })
        .unwrap();
        assert!(r.partial());
        let m = r.get("x").unwrap();
        assert_eq!(m.mean, 1.5);
        assert!((m.std - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn one_seed_rejected() {
        assert!(stability_report(&[1], |_| Ok::<_, String>(BTreeMap::new())).is_err());
    }
}

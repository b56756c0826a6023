//! Synthetic sire-model pedigrees and survival data with known truth.
//!
//! Every random quantity is drawn from its own ChaCha stream keyed by
//! `(component, individual)`, so output does not depend on scheduling.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::{Episode, RecordSet, SurvivalRecord, TimeType};
use crate::par;
use crate::pedigree::{inbreeding, Pedigree};

const STREAM_GENETIC: u64 = 1;
const STREAM_HERD_EFFECT: u64 = 2;
const STREAM_HERD_ASSIGN: u64 = 3;
const STREAM_COVARIATE: u64 = 4;
const STREAM_SURVIVAL: u64 = 5;
const STREAM_CENSOR: u64 = 6;

/// Generator for one `(component, index)` pair.
pub fn stream(seed: u64, component: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((component << 48) | index);
    rng
}

/// Unrelated sires `s1…`, each with daughters `s{i}_d{j}` of unknown dams.
pub fn simulate_pedigree(n_sires: usize, daughters_per_sire: usize) -> Result<Pedigree> {
    let mut rows: Vec<(String, Option<String>, Option<String>)> = Vec::new();
    for s in 1..=n_sires {
        rows.push((format!("s{s}"), None, None));
    }
    for s in 1..=n_sires {
        for d in 1..=daughters_per_sire {
            rows.push((format!("s{s}_d{d}"), Some(format!("s{s}")), None));
        }
    }
    Pedigree::from_rows(rows)
}

/// Generative model: per-cause baselines, fixed effects and the two
/// covariance blocks on the log-hazard scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub time_type: TimeType,
    /// Per cause: rates per interval (continuous) or probabilities per period.
    pub baseline: Vec<Vec<f64>>,
    /// Interval boundaries for continuous time.
    #[serde(default)]
    pub cuts: Vec<f64>,
    /// Per cause, one coefficient per standard-normal covariate `x1…`.
    #[serde(default)]
    pub beta: Vec<Vec<f64>>,
    /// Sire covariance across causes, row-major.
    pub sire_covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub herd_covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub n_herds: usize,
    /// Exponential rate (continuous) or per-period probability (discrete).
    #[serde(default)]
    pub censoring: f64,
    /// Continuous time only: stratum `p` covers `((p−1)·L, p·L]`, giving
    /// parity-like progression on the record.
    #[serde(default)]
    pub stratum_length: Option<f64>,
}

impl SimulationSpec {
    pub fn n_causes(&self) -> usize {
        self.baseline.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    fn has_herds(&self) -> bool {
        !self.herd_covariance.is_empty() && self.n_herds > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let j = self.n_causes();
        if j == 0 || j > 2 {
            return bad("one or two causes required");
        }
        let k = self.baseline[0].len();
        if k == 0 || self.baseline.iter().any(|b| b.len() != k) {
            return bad("every cause needs the same number of baseline pieces");
        }
        if self.baseline.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return bad("baseline values must be finite and non-negative");
        }
        if self.time_type == TimeType::Continuous {
            if self.cuts.len() != k + 1 || self.cuts[0] != 0.0 {
                return bad("continuous truth needs cuts 0 = t0 < … with one more boundary than pieces");
            }
            if self.cuts.windows(2).any(|w| w[1] <= w[0]) {
                return bad("cuts must increase");
            }
        }
        if !self.beta.is_empty() && (self.beta.len() != j || self.beta.iter().any(|b| b.len() != self.n_covariates())) {
            return bad("beta needs one row per cause of equal length");
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == j && m.iter().all(|r| r.len() == j);
        if !square(&self.sire_covariance) {
            return bad("sire covariance must be causes × causes");
        }
        if !self.herd_covariance.is_empty() && !square(&self.herd_covariance) {
            return bad("herd covariance must be causes × causes");
        }
        if !(0.0..1.0).contains(&self.censoring) && self.time_type == TimeType::Discrete {
            return bad("discrete censoring probability must lie in [0, 1)");
        }
        if self.stratum_length.is_some_and(|l| !(l > 0.0)) {
            return bad("stratum length must be positive");
        }
        if self.censoring < 0.0 {
            return bad("censoring rate must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub level: String,
    pub values: Vec<f64>,
}

/// Truth sidecar: the generating spec plus realized random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub seed: u64,
    pub spec: SimulationSpec,
    pub sire_effects: Vec<Effect>,
    pub herd_effects: Vec<Effect>,
}

impl SimulationTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Lower Cholesky factor of a PSD matrix; zero columns where singular.
fn psd_factor(m: &[Vec<f64>]) -> DMatrix<f64> {
    let n = m.len();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let d = m[j][j] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 1e-14 * m[j][j].abs().max(1.0) {
            continue;
        }
        l[(j, j)] = d.sqrt();
        for i in j + 1..n {
            let s = m[i][j] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / l[(j, j)];
        }
    }
    l
}

fn correlated_normal(rng: &mut ChaCha8Rng, l: &DMatrix<f64>) -> Vec<f64> {
    let z: Vec<f64> = (0..l.nrows()).map(|_| StandardNormal.sample(rng)).collect();
    (0..l.nrows())
        .map(|i| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
        .collect()
}

/// Effects with covariance `Σ ⊗ A` by Mendelian sampling down the pedigree.
fn genetic_effects(ped: &Pedigree, sigma: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
    let l = psd_factor(sigma);
    let f = inbreeding(ped);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(ped.len());
    for (i, ind) in ped.individuals().iter().enumerate() {
        let fs = ind.sire.map(|s| f[s]);
        let fd = ind.dam.map(|d| f[d]);
        let b = match (fs, fd) {
            (Some(fs), Some(fd)) => 0.5 - 0.25 * (fs + fd),
            (Some(x), None) | (None, Some(x)) => 0.75 - 0.25 * x,
            (None, None) => 1.0,
        };
        let m = correlated_normal(&mut stream(seed, STREAM_GENETIC, i as u64), &l);
        let ui = (0..sigma.len())
            .map(|t| {
                let parent = |p: Option<usize>| p.map_or(0.0, |p| u[p][t]);
                0.5 * (parent(ind.sire) + parent(ind.dam)) + b.sqrt() * m[t]
            })
            .collect();
        u.push(ui);
    }
    u
}

/// Forward simulation of survival for every individual with a recorded
/// sire and no progeny of its own.
pub fn simulate_survival(
    ped: &Pedigree,
    spec: &SimulationSpec,
    seed: u64,
) -> Result<(RecordSet, SimulationTruth)> {
    spec.validate()?;
    let u = genetic_effects(ped, &spec.sire_covariance, seed);
    let mut has_progeny = vec![false; ped.len()];
    for ind in ped.individuals() {
        for p in [ind.sire, ind.dam].into_iter().flatten() {
            has_progeny[p] = true;
        }
    }
    let subjects: Vec<usize> = (0..ped.len())
        .filter(|&i| !has_progeny[i] && ped.get(i).sire.is_some())
        .collect();

    let herd_l = if spec.has_herds() {
        Some(psd_factor(&spec.herd_covariance))
    } else {
        None
    };
    let herds: Vec<Vec<f64>> = match &herd_l {
        Some(l) => (0..spec.n_herds)
            .map(|h| correlated_normal(&mut stream(seed, STREAM_HERD_EFFECT, h as u64), l))
            .collect(),
        None => Vec::new(),
    };

    let n_causes = spec.n_causes();
    let n_cov = spec.n_covariates();
    let records = par::map_indexed(subjects.len(), |n| {
        let i = subjects[n];
        let ind = ped.get(i);
        let sire = ind.sire.expect("subject has a sire");
        let herd = herd_l.as_ref().map(|_| {
            stream(seed, STREAM_HERD_ASSIGN, i as u64).random_range(0..spec.n_herds)
        });
        let mut cov_rng = stream(seed, STREAM_COVARIATE, i as u64);
        let x: Vec<f64> = (0..n_cov).map(|_| StandardNormal.sample(&mut cov_rng)).collect();
        let lin: Vec<f64> = (0..n_causes)
            .map(|j| {
                let xb: f64 = spec.beta.get(j).map_or(0.0, |b| b.iter().zip(&x).map(|(b, x)| b * x).sum());
                xb + u[sire][j] + herd.map_or(0.0, |h| herds[h][j])
            })
            .collect();
        let mut surv = stream(seed, STREAM_SURVIVAL, i as u64);
        let mut cens = stream(seed, STREAM_CENSOR, i as u64);
        let (time, cause) = match spec.time_type {
            TimeType::Continuous => continuous_time(spec, &lin, &mut surv, &mut cens),
            TimeType::Discrete => discrete_time(spec, &lin, &mut surv, &mut cens, i)?,
        };
        let mut clusters = vec![ped.get(sire).id.clone()];
        if let Some(h) = herd {
            clusters.push(format!("h{}", h + 1));
        }
        Ok(SurvivalRecord {
            id: ind.id.clone(),
            time_type: spec.time_type,
            episodes: episodes(time, spec.stratum_length, x),
            cause,
            clusters,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut cluster_names = vec!["sire".to_string()];
    if spec.has_herds() {
        cluster_names.push("herd".into());
    }
    let mut sires: Vec<usize> = subjects.iter().filter_map(|&i| ped.get(i).sire).collect();
    sires.sort_unstable();
    sires.dedup();
    let truth = SimulationTruth {
        seed,
        spec: spec.clone(),
        sire_effects: sires
            .into_iter()
            .map(|s| Effect {
                level: ped.get(s).id.clone(),
                values: u[s].clone(),
            })
            .collect(),
        herd_effects: herds
            .into_iter()
            .enumerate()
            .map(|(h, values)| Effect {
                level: format!("h{}", h + 1),
                values,
            })
            .collect(),
    };
    Ok((
        RecordSet {
            covariate_names: (1..=n_cov).map(|k| format!("x{k}")).collect(),
            cluster_names,
            records,
        },
        truth,
    ))
}

fn episodes(time: f64, stratum_length: Option<f64>, x: Vec<f64>) -> Vec<Episode> {
    let Some(l) = stratum_length else {
        return vec![Episode {
            t_start: 0.0,
            t_stop: time,
            stratum: 1,
            covariates: x,
        }];
    };
    let mut out = Vec::new();
    let mut p = 1u32;
    let mut start = 0.0;
    loop {
        let stop = (p as f64 * l).min(time);
        out.push(Episode {
            t_start: start,
            t_stop: stop,
            stratum: p,
            covariates: x.clone(),
        });
        if stop >= time {
            return out;
        }
        start = stop;
        p += 1;
    }
}

/// Latent time per cause by inversion of its piecewise-linear cumulative
/// hazard; the earliest wins. Administrative censoring at the last cut.
fn continuous_time(
    spec: &SimulationSpec,
    lin: &[f64],
    surv: &mut ChaCha8Rng,
    cens: &mut ChaCha8Rng,
) -> (f64, u8) {
    let end = *spec.cuts.last().expect("validated cuts");
    let mut best = (f64::INFINITY, 0u8);
    for (j, base) in spec.baseline.iter().enumerate() {
        let target = -(1.0 - surv.random::<f64>()).ln();
        let scale = lin[j].exp();
        let mut acc = 0.0;
        for (k, &rate) in base.iter().enumerate() {
            let (a, b) = (spec.cuts[k], spec.cuts[k + 1]);
            let h = rate * scale;
            let piece = h * (b - a);
            if acc + piece >= target && h > 0.0 {
                let t = a + (target - acc) / h;
                if t < best.0 {
                    best = (t, j as u8 + 1);
                }
                break;
            }
            acc += piece;
        }
    }
    let c = if spec.censoring > 0.0 {
        -(1.0 - cens.random::<f64>()).ln() / spec.censoring
    } else {
        f64::INFINITY
    };
    let limit = c.min(end);
    if best.0 <= limit {
        best
    } else {
        (limit, 0)
    }
}

/// Sequential Bernoulli draws per period, causes in order; censoring is
/// checked after an event-free period.
fn discrete_time(
    spec: &SimulationSpec,
    lin: &[f64],
    surv: &mut ChaCha8Rng,
    cens: &mut ChaCha8Rng,
    individual: usize,
) -> Result<(f64, u8)> {
    let periods = spec.baseline[0].len();
    for p in 0..periods {
        for (j, base) in spec.baseline.iter().enumerate() {
            let prob = base[p] * lin[j].exp();
            if !(prob < 1.0) {
                return Err(Error::InvalidTruthProbability { individual, prob });
            }
            if surv.random::<f64>() < prob {
                return Ok(((p + 1) as f64, j as u8 + 1));
            }
        }
        if spec.censoring > 0.0 && cens.random::<f64>() < spec.censoring {
            return Ok(((p + 1) as f64, 0));
        }
    }
    Ok((periods as f64, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pedigree::additive_relationship;

    fn discrete(p: f64, periods: usize) -> SimulationSpec {
        SimulationSpec {
            time_type: TimeType::Discrete,
            baseline: vec![vec![p; periods]],
            cuts: vec![],
            beta: vec![],
            sire_covariance: vec![vec![0.0]],
            herd_covariance: vec![],
            n_herds: 0,
            censoring: 0.0,
            stratum_length: None,
        }
    }

    #[test]
    fn pedigree_shapes() {
        let ped = simulate_pedigree(2, 3).unwrap();
        assert_eq!(ped.len(), 8);
        let a = additive_relationship(&ped);
        let (d1, d2) = (ped.position("s1_d1").unwrap(), ped.position("s1_d2").unwrap());
        assert_eq!(a.get(d1, d2), 0.25);
        let trio = simulate_pedigree(1, 1).unwrap();
        assert_eq!(trio.len(), 2);
        assert_eq!(additive_relationship(&trio).get(0, 1), 0.5);
    }

    #[test]
    fn same_seed_same_records() {
        let ped = simulate_pedigree(20, 10).unwrap();
        let mut spec = discrete(0.1, 5);
        spec.sire_covariance = vec![vec![0.1]];
        let a = simulate_survival(&ped, &spec, 9).unwrap();
        let b = par::with_threads(3, || simulate_survival(&ped, &spec, 9).unwrap());
        assert_eq!(a, b);
        let c = simulate_survival(&ped, &spec, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn exponential_mean_lifetime() {
        let ped = simulate_pedigree(100, 100).unwrap();
        let spec = SimulationSpec {
            time_type: TimeType::Continuous,
            baseline: vec![vec![0.01]],
            cuts: vec![0.0, 1e6],
            ..discrete(0.0, 1)
        };
        let (rs, _) = simulate_survival(&ped, &spec, 3).unwrap();
        let n = rs.records.len() as f64;
        let mean = rs.records.iter().map(|r| r.exit_time()).sum::<f64>() / n;
        assert!(rs.records.iter().all(|r| r.cause == 1));
        assert!((mean - 100.0).abs() < 3.0 * 100.0 / n.sqrt(), "{mean}");
    }

    #[test]
    fn stratum_progression_splits_episodes() {
        let e = episodes(2.5, Some(1.0), vec![]);
        let spans: Vec<_> = e.iter().map(|e| (e.t_start, e.t_stop, e.stratum)).collect();
        assert_eq!(spans, vec![(0.0, 1.0, 1), (1.0, 2.0, 2), (2.0, 2.5, 3)]);
        assert_eq!(episodes(2.0, Some(1.0), vec![]).len(), 2);
    }

    #[test]
    fn invalid_probability_is_reported() {
        let ped = simulate_pedigree(2, 2).unwrap();
        let spec = discrete(1.2, 3);
        let err = simulate_survival(&ped, &spec, 1).unwrap_err();
        assert!(err.to_string().contains("truth yields invalid probability"));
    }

    #[test]
    fn perfectly_correlated_causes_rank_agree() {
        let ped = simulate_pedigree(50, 1).unwrap();
        let mut spec = discrete(0.05, 3);
        spec.baseline.push(vec![0.05; 3]);
        spec.sire_covariance = vec![vec![0.04, 0.06], vec![0.06, 0.09]];
        let (_, truth) = simulate_survival(&ped, &spec, 5).unwrap();
        for e in &truth.sire_effects {
            assert!((e.values[1] - 1.5 * e.values[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn sire_effect_variance() {
        let ped = simulate_pedigree(10_000, 1).unwrap();
        let mut spec = discrete(0.05, 1);
        spec.sire_covariance = vec![vec![0.2]];
        let (_, truth) = simulate_survival(&ped, &spec, 17).unwrap();
        let v: Vec<f64> = truth.sire_effects.iter().map(|e| e.values[0]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((var - 0.2).abs() < 0.05 * 0.2, "{var}");
    }
}

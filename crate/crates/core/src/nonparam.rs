//! Kaplan–Meier, Nelson–Aalen and Aalen–Johansen estimators.
//!
//! At tied times events are processed before censorings: an individual
//! censored at `t` is still at risk for events at `t`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expand::RecordSet;
use crate::report::format_sig;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    /// 0 for censored.
    pub cause: u8,
}

/// All-cause observations, or cause-specific ones with other causes
/// treated as censored.
pub fn observations(records: &RecordSet, cause: Option<u8>) -> Vec<Observation> {
    records
        .records
        .iter()
        .map(|r| Observation {
            time: r.exit_time(),
            cause: match cause {
                Some(c) if r.cause != c => 0,
                Some(_) => 1,
                None => r.cause,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StepCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl StepCurve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Right-continuous value at `t`; `before` if `t` precedes the first jump.
    pub fn value_at(&self, t: f64, before: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => before,
            i => self.values[i - 1],
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "value", "lower", "upper"])?;
        let bound = |b: &Option<Vec<f64>>, i: usize| {
            b.as_ref().map_or_else(String::new, |v| format_sig(v[i]))
        };
        for i in 0..self.len() {
            w.write_record([
                format_sig(self.times[i]),
                format_sig(self.values[i]),
                bound(&self.lower, i),
                bound(&self.upper, i),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per distinct time: (time, events by cause, at risk).
fn risk_table(obs: &[Observation]) -> Vec<(f64, BTreeMap<u8, usize>, usize)> {
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out = Vec::new();
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut events = BTreeMap::new();
        let mut leaving = 0;
        while i < sorted.len() && sorted[i].time == t {
            if sorted[i].cause != 0 {
                *events.entry(sorted[i].cause).or_insert(0) += 1;
            }
            leaving += 1;
            i += 1;
        }
        if !events.is_empty() {
            out.push((t, events, at_risk));
        }
        at_risk -= leaving;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KaplanMeier {
    pub curve: StepCurve,
    pub median: Option<f64>,
    pub median_lower: Option<f64>,
    pub median_upper: Option<f64>,
}

fn first_at_or_below(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    values.iter().position(|&v| v <= level).map(|i| times[i])
}

/// Product-limit estimator with Greenwood variance and log–log bounds.
pub fn kaplan_meier(obs: &[Observation]) -> KaplanMeier {
    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut curve = StepCurve {
        lower: Some(Vec::new()),
        upper: Some(Vec::new()),
        ..Default::default()
    };
    for (t, events, n) in risk_table(obs) {
        let d: usize = events.values().sum();
        let (d, n) = (d as f64, n as f64);
        s *= 1.0 - d / n;
        greenwood += if n > d { d / (n * (n - d)) } else { f64::INFINITY };
        let (lo, hi) = log_log_bounds(s, greenwood);
        curve.times.push(t);
        curve.values.push(s);
        curve.lower.as_mut().unwrap().push(lo);
        curve.upper.as_mut().unwrap().push(hi);
    }
    let median = first_at_or_below(&curve.times, &curve.values, 0.5);
    let median_lower = first_at_or_below(&curve.times, curve.lower.as_ref().unwrap(), 0.5);
    let median_upper = first_at_or_below(&curve.times, curve.upper.as_ref().unwrap(), 0.5);
    KaplanMeier {
        curve,
        median,
        median_lower,
        median_upper,
    }
}

fn log_log_bounds(s: f64, greenwood: f64) -> (f64, f64) {
    if s <= 0.0 || !greenwood.is_finite() {
        return (0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 1.0);
    }
    let se = greenwood.sqrt() / s.ln().abs();
    (s.powf((Z95 * se).exp()), s.powf((-Z95 * se).exp()))
}

/// Nelson–Aalen estimate with log-scale 95% bounds.
pub fn nelson_aalen(obs: &[Observation]) -> StepCurve {
    let mut h = 0.0;
    let mut var = 0.0;
    let mut curve = StepCurve {
        lower: Some(Vec::new()),
        upper: Some(Vec::new()),
        ..Default::default()
    };
    for (t, events, n) in risk_table(obs) {
        let d: usize = events.values().sum();
        let (d, n) = (d as f64, n as f64);
        h += d / n;
        var += d / (n * n);
        let f = (Z95 * var.sqrt() / h).exp();
        curve.times.push(t);
        curve.values.push(h);
        curve.lower.as_mut().unwrap().push(h / f);
        curve.upper.as_mut().unwrap().push(h * f);
    }
    curve
}

/// Log Nelson–Aalen curves per stratum, each on its own clock starting
/// at stratum entry. Only events in the exit stratum count.
pub fn log_cumhaz_stratified(records: &RecordSet) -> BTreeMap<u32, StepCurve> {
    let mut per_stratum: BTreeMap<u32, Vec<Observation>> = BTreeMap::new();
    for r in &records.records {
        let entries = r.stratum_entries();
        for (i, &(stratum, entry)) in entries.iter().enumerate() {
            let last = i + 1 == entries.len();
            let exit = if last {
                r.exit_time()
            } else {
                entries[i + 1].1
            };
            per_stratum.entry(stratum).or_default().push(Observation {
                time: exit - entry,
                cause: if last { r.cause.min(1) } else { 0 },
            });
        }
    }
    per_stratum
        .into_iter()
        .map(|(stratum, obs)| {
            let na = nelson_aalen(&obs);
            let log = |v: &Vec<f64>| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
            (
                stratum,
                StepCurve {
                    values: log(&na.values),
                    lower: na.lower.as_ref().map(log),
                    upper: na.upper.as_ref().map(log),
                    times: na.times,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulativeIncidence {
    /// Per cause, evaluated at every all-cause event time.
    pub curves: BTreeMap<u8, StepCurve>,
    /// All-cause Kaplan–Meier at the same times.
    pub survival: StepCurve,
}

/// Aalen–Johansen cumulative incidence for each cause present.
pub fn cumulative_incidence(obs: &[Observation]) -> CumulativeIncidence {
    let table = risk_table(obs);
    let causes: Vec<u8> = {
        let mut c: Vec<u8> = table.iter().flat_map(|(_, e, _)| e.keys().copied()).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut curves: BTreeMap<u8, StepCurve> =
        causes.iter().map(|&c| (c, StepCurve::default())).collect();
    let mut survival = StepCurve::default();
    let mut cif: BTreeMap<u8, f64> = causes.iter().map(|&c| (c, 0.0)).collect();
    let mut s = 1.0;
    for (t, events, n) in table {
        let n = n as f64;
        let d: usize = events.values().sum();
        for (&c, v) in cif.iter_mut() {
            let dj = events.get(&c).copied().unwrap_or(0) as f64;
            *v += s * dj / n;
            let curve = curves.get_mut(&c).unwrap();
            curve.times.push(t);
            curve.values.push(*v);
        }
        s *= 1.0 - d as f64 / n;
        survival.times.push(t);
        survival.values.push(s);
    }
    CumulativeIncidence { curves, survival }
}

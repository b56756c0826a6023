//! Marginal baseline hazards and heritability on the hazard and
//! cumulative-hazard scales.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expand::{CutPoints, PseudoTable, RecordSet, TimeType};
use crate::model::{Family, ModelSpec, VarianceComponents};
use crate::nonparam::{kaplan_meier, observations};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarInterval {
    pub trait_index: usize,
    pub stratum: u32,
    /// 1-based interval or period.
    pub k: u32,
    pub start: f64,
    /// Δ for continuous intervals, 1 for periods.
    pub length: f64,
    pub at_risk: usize,
    pub eta_bar: Option<f64>,
    pub lambda: Option<f64>,
}

/// λ̃* per trait, stratum and interval, ordered by that key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineStar {
    /// Time type of each trait.
    pub time_types: Vec<TimeType>,
    pub intervals: Vec<StarInterval>,
}

/// `exp` of the mean fitted linear predictor (without offset) over each
/// risk set. `cuts[t]` is required for continuous trait `t`; intervals
/// without rows carry no value.
pub fn baseline_star(
    eta: &[f64],
    table: &PseudoTable,
    cuts: &[Option<CutPoints>],
) -> Result<BaselineStar> {
    if eta.len() != table.len() {
        return Err(Error::InvalidSpec(format!(
            "{} fitted values for {} rows",
            eta.len(),
            table.len()
        )));
    }
    let mut time_types: Vec<Option<TimeType>> = vec![None; table.n_traits()];
    let mut sums: BTreeMap<(usize, u32, u32), (f64, usize)> = BTreeMap::new();
    for r in 0..table.len() {
        let t = table.trait_idx[r] as usize;
        time_types[t] = Some(table.time_type[r]);
        let e = sums.entry((t, table.stratum[r], table.k[r])).or_insert((0.0, 0));
        e.0 += eta[r];
        e.1 += 1;
    }
    let time_types: Vec<TimeType> = time_types
        .into_iter()
        .map(|t| t.unwrap_or(TimeType::Discrete))
        .collect();
    let mut keys: BTreeMap<(usize, u32, u32), (f64, f64)> = BTreeMap::new();
    let strata: Vec<(usize, u32)> = {
        let mut v: Vec<_> = sums.keys().map(|&(t, p, _)| (t, p)).collect();
        v.dedup();
        v
    };
    for &(t, p) in &strata {
        match time_types[t] {
            TimeType::Continuous => {
                let cuts = cuts.get(t).and_then(Option::as_ref).ok_or_else(|| {
                    Error::InvalidSpec("continuous baseline needs cut points".into())
                })?;
                let b = cuts.for_stratum(p);
                for k in 1..b.len() {
                    keys.insert((t, p, k as u32), (b[k - 1], b[k] - b[k - 1]));
                }
            }
            TimeType::Discrete => {
                let max_k = sums.range((t, p, 0)..=(t, p, u32::MAX)).map(|(k, _)| k.2).max();
                for k in 1..=max_k.unwrap_or(0) {
                    keys.insert((t, p, k), ((k - 1) as f64, 1.0));
                }
            }
        }
    }
    let mut intervals = Vec::with_capacity(keys.len());
    for ((t, p, k), (start, length)) in keys {
        let (eta_bar, at_risk) = match sums.get(&(t, p, k)) {
            Some(&(s, n)) => (Some(s / n as f64), n),
            None => (None, 0),
        };
        intervals.push(StarInterval {
            trait_index: t,
            stratum: p,
            k,
            start,
            length,
            at_risk,
            eta_bar,
            lambda: eta_bar.map(f64::exp),
        });
    }
    Ok(BaselineStar {
        time_types,
        intervals,
    })
}

impl BaselineStar {
    pub fn curve(&self, trait_index: usize, stratum: u32) -> impl Iterator<Item = &StarInterval> {
        self.intervals
            .iter()
            .filter(move |i| i.trait_index == trait_index && i.stratum == stratum)
    }

    /// λ̃* at `t`: the interval `(t_k, t_{k+1}]` holding `t` (continuous) or
    /// the zero-based period `t` (discrete).
    pub fn lambda_at(&self, trait_index: usize, stratum: u32, t: f64) -> Result<f64> {
        let found = match self.time_types[trait_index] {
            TimeType::Continuous => self.curve(trait_index, stratum).find(|i| {
                t <= i.start + i.length && (t > i.start || (i.k == 1 && t >= 0.0))
            }),
            TimeType::Discrete => {
                let k = discrete_index(t)? + 1;
                self.curve(trait_index, stratum).find(|i| i.k as usize == k)
            }
        };
        found.and_then(|i| i.lambda).ok_or(Error::TimeOutOfRange(t))
    }

    /// Λ̃*(t) for one trait and stratum.
    pub fn cumulative_star(&self, trait_index: usize, stratum: u32, t: f64) -> Result<f64> {
        self.accumulate(trait_index, stratum, t, |l| l)
    }

    /// γ(t) = Σ_{s≤t} λ̃*(s)(1 − λ̃*(s)).
    pub fn gamma(&self, trait_index: usize, stratum: u32, t: f64) -> Result<f64> {
        if self.time_types[trait_index] != TimeType::Discrete {
            return Err(Error::InvalidSpec("γ is defined for discrete time only".into()));
        }
        self.accumulate(trait_index, stratum, t, |l| l * (1.0 - l))
    }

    fn accumulate(
        &self,
        trait_index: usize,
        stratum: u32,
        t: f64,
        f: impl Fn(f64) -> f64,
    ) -> Result<f64> {
        let curve: Vec<&StarInterval> = self.curve(trait_index, stratum).collect();
        match self.time_types[trait_index] {
            TimeType::Continuous => {
                let end = curve.last().map_or(0.0, |i| i.start + i.length);
                if !(t >= 0.0 && t <= end) {
                    return Err(Error::TimeOutOfRange(t));
                }
                let mut total = 0.0;
                for i in curve {
                    if t <= i.start {
                        break;
                    }
                    let lambda = i.lambda.ok_or(Error::TimeOutOfRange(t))?;
                    total += (t.min(i.start + i.length) - i.start) * f(lambda);
                }
                Ok(total)
            }
            TimeType::Discrete => {
                let last = discrete_index(t)?;
                if last >= curve.len() {
                    return Err(Error::TimeOutOfRange(t));
                }
                curve[..=last]
                    .iter()
                    .map(|i| i.lambda.map(&f).ok_or(Error::TimeOutOfRange(t)))
                    .sum()
            }
        }
    }
}

fn discrete_index(t: f64) -> Result<usize> {
    if t >= 0.0 && t.fract() == 0.0 {
        Ok(t as usize)
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

/// Variance components entering one trait's decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraitVariances {
    /// σ²_g, already multiplied by the genetic scale.
    pub genetic: f64,
    pub environmental: f64,
    pub phi: f64,
}

impl TraitVariances {
    pub fn new(genetic: f64, environmental: f64, phi: f64) -> Self {
        TraitVariances {
            genetic,
            environmental,
            phi,
        }
    }

    /// Genetic components are scaled by their genetic scale; all other
    /// components sum into σ²_e.
    pub fn from_fit(vc: &VarianceComponents, spec: &ModelSpec, trait_index: usize) -> Self {
        let mut out = TraitVariances::new(0.0, 0.0, vc.phi[trait_index]);
        for (c, rc) in spec.random.iter().enumerate() {
            let v = vc.get(c, trait_index, trait_index);
            if rc.is_genetic() {
                out.genetic += rc.genetic_scale() * v;
            } else {
                out.environmental += v;
            }
        }
        out
    }
}

/// Which scale a decomposition refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Hazard(f64),
    /// Λ*, with γ for the discrete-time form.
    Cumulative { value: f64, gamma: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Parcels {
    pub genetic: f64,
    pub environmental: f64,
    pub dispersion: f64,
}

impl Parcels {
    pub fn total(&self) -> f64 {
        self.genetic + self.environmental + self.dispersion
    }

    pub fn heritability(&self) -> f64 {
        let total = self.total();
        if total > 0.0 {
            self.genetic / total
        } else {
            0.0
        }
    }
}

fn check_hazard(lambda: f64, family: Family) -> Result<()> {
    let discrete = family == Family::Bernoulli;
    if !(lambda > 0.0 && lambda.is_finite()) || (discrete && lambda >= 1.0) {
        return Err(Error::InvalidHazard(lambda));
    }
    Ok(())
}

/// Denominator term carried by φ, relative to the squared scale.
fn dispersion_term(phi: f64, scale: Scale, family: Family) -> Result<f64> {
    let discrete = family == Family::Bernoulli;
    match scale {
        Scale::Hazard(l) => {
            check_hazard(l, family)?;
            Ok(if discrete { phi * (1.0 - l) / l } else { phi / l })
        }
        Scale::Cumulative { value, gamma } => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidCumulativeHazard(value));
            }
            if discrete {
                let g = gamma.filter(|g| *g >= 0.0).ok_or(Error::InvalidCumulativeHazard(value))?;
                Ok(phi * g / (value * value))
            } else {
                Ok(phi / value)
            }
        }
    }
}

fn ratio(v: &TraitVariances, extra: f64) -> f64 {
    let total = v.genetic + v.environmental + extra;
    if total > 0.0 {
        v.genetic / total
    } else {
        0.0
    }
}

pub fn h2_hazard(v: &TraitVariances, lambda: f64, family: Family) -> Result<f64> {
    Ok(ratio(v, dispersion_term(v.phi, Scale::Hazard(lambda), family)?))
}

pub fn h2_cumulative(
    v: &TraitVariances,
    cumulative: f64,
    gamma: Option<f64>,
    family: Family,
) -> Result<f64> {
    let scale = Scale::Cumulative {
        value: cumulative,
        gamma,
    };
    Ok(ratio(v, dispersion_term(v.phi, scale, family)?))
}

/// Additive parcels of the phenotypic variance; all zero when not at risk.
pub fn variance_decomposition(
    v: &TraitVariances,
    scale: Scale,
    family: Family,
    at_risk: bool,
) -> Result<Parcels> {
    dispersion_term(v.phi, scale, family)?;
    let discrete = family == Family::Bernoulli;
    let y = if at_risk { 1.0 } else { 0.0 };
    let (m, dispersion) = match scale {
        Scale::Hazard(l) => (l, if discrete { v.phi * l * (1.0 - l) } else { v.phi * l }),
        Scale::Cumulative { value, gamma } => (
            value,
            if discrete {
                v.phi * gamma.unwrap_or(0.0)
            } else {
                v.phi * value
            },
        ),
    };
    if matches!(scale, Scale::Cumulative { .. }) {
        return Ok(Parcels {
            genetic: m * m * v.genetic,
            environmental: m * m * v.environmental,
            dispersion,
        });
    }
    Ok(Parcels {
        genetic: y * m * m * v.genetic,
        environmental: y * m * m * v.environmental,
        dispersion: y * dispersion,
    })
}

/// ρ between traits `a` and `b` of a covariance block.
pub fn genetic_correlation(sigma: &DMatrix<f64>, a: usize, b: usize) -> Result<f64> {
    let d = sigma[(a, a)] * sigma[(b, b)];
    if !(d > 0.0) {
        return Err(Error::CorrelationUndefined);
    }
    Ok(sigma[(a, b)] / d.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSummary {
    pub parcels: Parcels,
    pub phenotypic_variance: f64,
    pub h2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraitHeritability {
    pub trait_index: usize,
    pub name: String,
    pub family: Family,
    pub t_m: f64,
    pub lambda_star: f64,
    #[serde(rename = "Lambda_star")]
    pub cumulative_star: f64,
    pub gamma: Option<f64>,
    pub variances: TraitVariances,
    pub genetic_scale: Option<f64>,
    pub hazard: ScaleSummary,
    pub cumulative: ScaleSummary,
    pub h2_hazard: f64,
    pub h2_cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneticCorrelation {
    pub component: String,
    pub traits: (usize, usize),
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeritabilityReport {
    pub traits: Vec<TraitHeritability>,
    pub genetic_correlations: Vec<GeneticCorrelation>,
    pub baseline_star: BaselineStar,
}

/// Median entry time of each stratum among records that entered it,
/// ordered by that time.
fn stratum_trajectory(records: &RecordSet) -> Vec<(u32, f64)> {
    let mut entries: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in &records.records {
        for (s, t) in r.stratum_entries() {
            entries.entry(s).or_default().push(t);
        }
    }
    let mut out: Vec<(u32, f64)> = entries
        .into_iter()
        .map(|(s, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let m = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (s, m)
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// λ̃*, Λ̃* and γ at global time `t`, following strata through their
/// median entry times when stratified.
fn evaluate_at(
    bs: &BaselineStar,
    trait_index: usize,
    trajectory: &[(u32, f64)],
    t: f64,
) -> Result<(f64, f64, Option<f64>)> {
    let discrete = bs.time_types[trait_index] == TimeType::Discrete;
    // Local time t ↦ zero-based period for the discrete sums.
    let local = |stratum: u32, dur: f64, f: &dyn Fn(u32, f64) -> Result<f64>| -> Result<f64> {
        if discrete {
            if dur < 1.0 {
                Ok(0.0)
            } else {
                f(stratum, dur - 1.0)
            }
        } else {
            f(stratum, dur)
        }
    };
    let cum = |s: u32, x: f64| bs.cumulative_star(trait_index, s, x);
    let gam = |s: u32, x: f64| bs.gamma(trait_index, s, x);

    let current = trajectory
        .iter()
        .rposition(|&(_, e)| e < t || (e == 0.0 && t == 0.0))
        .unwrap_or(0);
    let mut big = 0.0;
    let mut gamma = 0.0;
    for w in 0..current {
        let (s, e) = trajectory[w];
        let dur = trajectory[w + 1].1 - e;
        big += local(s, dur, &cum)?;
        if discrete {
            gamma += local(s, dur, &gam)?;
        }
    }
    let (s, e) = trajectory[current];
    let dur = t - e;
    big += local(s, dur, &cum)?;
    if discrete {
        gamma += local(s, dur, &gam)?;
    }
    let lambda = if discrete {
        bs.lambda_at(trait_index, s, dur - 1.0)?
    } else {
        bs.lambda_at(trait_index, s, dur)?
    };
    Ok((lambda, big, discrete.then_some(gamma)))
}

/// Heritabilities at the median survival time of each trait.
///
/// `eta` holds the fitted linear predictor per table row; `records[t]`
/// and `cuts[t]` are the data and cut points behind trait `t`. `t_m`
/// overrides the Kaplan–Meier median of every trait.
#[allow(clippy::too_many_arguments)]
pub fn heritability_report(
    eta: &[f64],
    vc: &VarianceComponents,
    spec: &ModelSpec,
    trait_names: &[String],
    table: &PseudoTable,
    records: &[&RecordSet],
    cuts: &[Option<CutPoints>],
    t_m: Option<f64>,
) -> Result<HeritabilityReport> {
    let bs = baseline_star(eta, table, cuts)?;
    let mut traits = Vec::with_capacity(spec.traits.len());
    for (ti, tr) in spec.traits.iter().enumerate() {
        let recs = records[ti];
        let t_m = match t_m {
            Some(t) => t,
            None => kaplan_meier(&observations(recs, None))
                .median
                .ok_or(Error::MedianUndefined)?,
        };
        let trajectory = if tr.stratified && tr.time_type == TimeType::Continuous {
            stratum_trajectory(recs)
        } else {
            vec![(crate::expand::POOLED_STRATUM, 0.0)]
        };
        let (lambda, big, gamma) = evaluate_at(&bs, ti, &trajectory, t_m)?;
        let v = TraitVariances::from_fit(vc, spec, ti);
        let hz = variance_decomposition(&v, Scale::Hazard(lambda), tr.family, true)?;
        let cm = variance_decomposition(
            &v,
            Scale::Cumulative { value: big, gamma },
            tr.family,
            true,
        )?;
        let h2_hz = h2_hazard(&v, lambda, tr.family)?;
        let h2_cm = h2_cumulative(&v, big, gamma, tr.family)?;
        traits.push(TraitHeritability {
            trait_index: ti,
            name: trait_names.get(ti).cloned().unwrap_or_default(),
            family: tr.family,
            t_m,
            lambda_star: lambda,
            cumulative_star: big,
            gamma,
            variances: v,
            genetic_scale: spec.random.iter().find(|r| r.is_genetic()).map(|r| r.genetic_scale()),
            hazard: ScaleSummary {
                parcels: hz,
                phenotypic_variance: hz.total(),
                h2: h2_hz,
            },
            cumulative: ScaleSummary {
                parcels: cm,
                phenotypic_variance: cm.total(),
                h2: h2_cm,
            },
            h2_hazard: h2_hz,
            h2_cumulative: h2_cm,
        });
    }
    let mut genetic_correlations = Vec::new();
    for (c, rc) in spec.random.iter().enumerate().filter(|(_, r)| r.is_genetic()) {
        let block = vc.block(c);
        for a in 0..block.nrows() {
            for b in a + 1..block.nrows() {
                if let Ok(value) = genetic_correlation(&block, a, b) {
                    genetic_correlations.push(GeneticCorrelation {
                        component: rc.name.clone(),
                        traits: (a, b),
                        value,
                    });
                }
            }
        }
    }
    Ok(HeritabilityReport {
        traits,
        genetic_correlations,
        baseline_star: bs,
    })
}

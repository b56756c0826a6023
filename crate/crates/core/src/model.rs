//! Model declaration, linear predictors and log-likelihoods.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::{CutPoints, PseudoTable, RecordSet, TimeType, MISSING_LEVEL, POOLED_STRATUM};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Continuous time, piecewise-constant rates with log-exposure offset.
    PoissonPieces,
    /// Discrete time, log link on the hazard probability.
    Bernoulli,
    /// Discrete time rows treated as Poisson counts.
    PoissonApprox,
}

impl Family {
    pub fn time_type(self) -> TimeType {
        match self {
            Family::PoissonPieces => TimeType::Continuous,
            Family::Bernoulli | Family::PoissonApprox => TimeType::Discrete,
        }
    }

    pub fn is_poisson(self) -> bool {
        !matches!(self, Family::Bernoulli)
    }

    /// Conditional variance function V(μ).
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Bernoulli => mu * (1.0 - mu),
            _ => mu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    Fixed(f64),
    /// `{"free": false}` is read as fixed at 1.
    Free(bool),
}

impl Default for Dispersion {
    fn default() -> Self {
        Dispersion::Free(true)
    }
}

impl Dispersion {
    pub fn is_free(self) -> bool {
        matches!(self, Dispersion::Free(true))
    }

    pub fn initial(self) -> f64 {
        match self {
            Dispersion::Fixed(v) => v,
            Dispersion::Free(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSpec {
    #[serde(default)]
    pub name: String,
    pub cause: u8,
    pub time_type: TimeType,
    pub family: Family,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub dispersion: Dispersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Pedigree,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomComponent {
    pub name: String,
    pub structure: Structure,
    pub column: String,
    /// Multiplier turning the component variance into additive genetic
    /// variance; defaults to 4 (sire model) for pedigree components.
    #[serde(default)]
    pub genetic_scale: Option<f64>,
}

impl RandomComponent {
    /// Pedigree components, and any component with an explicit scale,
    /// count as genetic in heritability decompositions.
    pub fn is_genetic(&self) -> bool {
        self.structure == Structure::Pedigree || self.genetic_scale.is_some()
    }

    pub fn genetic_scale(&self) -> f64 {
        self.genetic_scale.unwrap_or(match self.structure {
            Structure::Pedigree => 4.0,
            Structure::Iid => 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub traits: Vec<TraitSpec>,
    #[serde(default, alias = "random_components")]
    pub random: Vec<RandomComponent>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.traits.is_empty() || self.traits.len() > 2 {
            return Err(Error::InvalidSpec(format!(
                "expected 1 or 2 traits, got {}",
                self.traits.len()
            )));
        }
        for (t, tr) in self.traits.iter().enumerate() {
            if tr.family.time_type() != tr.time_type {
                return Err(Error::InvalidSpec(format!(
                    "trait {t}: family {:?} does not fit {:?} time",
                    tr.family, tr.time_type
                )));
            }
            if !(1..=2).contains(&tr.cause) {
                return Err(Error::InvalidSpec(format!("trait {t}: cause must be 1 or 2")));
            }
            if let Dispersion::Fixed(v) = tr.dispersion {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "trait {t}: fixed dispersion must be positive"
                    )));
                }
            }
            if tr.stratified && tr.time_type == TimeType::Discrete {
                return Err(Error::InvalidSpec(format!(
                    "trait {t}: stratification applies to continuous time only"
                )));
            }
        }
        let mut names: Vec<&str> = self.random.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSpec("duplicate random component name".into()));
        }
        Ok(())
    }

    pub fn n_traits(&self) -> usize {
        self.traits.len()
    }

    /// All covariate names used by any trait, first-use order.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for tr in &self.traits {
            for c in &tr.covariates {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    pub fn cluster_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for rc in &self.random {
            if !out.contains(&rc.column) {
                out.push(rc.column.clone());
            }
        }
        out
    }
}

/// Fixed effects and realized random effects, keyed by label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    /// Per trait: `(stratum, k) → log rate`.
    pub log_baseline: Vec<BTreeMap<(u32, u32), f64>>,
    /// Per trait, aligned with that trait's covariate list.
    pub beta: Vec<Vec<f64>>,
    /// Per component, per trait: level → effect.
    pub effects: Vec<Vec<BTreeMap<String, f64>>>,
}

impl ModelParams {
    /// All-zero effects with baselines for the given keys.
    pub fn zeros(spec: &ModelSpec, baseline_keys: &[Vec<(u32, u32)>]) -> Self {
        ModelParams {
            log_baseline: baseline_keys
                .iter()
                .map(|keys| keys.iter().map(|&k| (k, 0.0)).collect())
                .collect(),
            beta: spec.traits.iter().map(|t| vec![0.0; t.covariates.len()]).collect(),
            effects: spec
                .random
                .iter()
                .map(|_| vec![BTreeMap::new(); spec.n_traits()])
                .collect(),
        }
    }

    fn baseline(&self, trait_idx: usize, stratum: u32, k: u32) -> Result<f64> {
        self.log_baseline
            .get(trait_idx)
            .and_then(|m| m.get(&(stratum, k)))
            .copied()
            .ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "no baseline for trait {trait_idx}, stratum {stratum}, interval {k}"
                ))
            })
    }

    fn effect(&self, spec: &ModelSpec, c: usize, trait_idx: usize, level: &str) -> Result<f64> {
        self.effects
            .get(c)
            .and_then(|per_trait| per_trait.get(trait_idx))
            .and_then(|m| m.get(level))
            .copied()
            .ok_or_else(|| Error::UnseenClusterLevel {
                component: spec.random[c].name.clone(),
                level: level.to_string(),
            })
    }
}

/// Column positions of a spec's covariates and clusters in a table.
#[derive(Debug, Clone)]
pub struct Layout {
    pub covariates: Vec<Vec<usize>>,
    pub clusters: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &ModelSpec, table: &PseudoTable) -> Result<Self> {
        let covariates = spec
            .traits
            .iter()
            .map(|tr| {
                tr.covariates
                    .iter()
                    .map(|c| {
                        table
                            .covariate_index(c)
                            .ok_or_else(|| Error::ColumnNotFound(c.clone()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let clusters = spec
            .random
            .iter()
            .map(|rc| {
                table
                    .cluster_index(&rc.column)
                    .ok_or_else(|| Error::ColumnNotFound(rc.column.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            covariates,
            clusters,
        })
    }
}

/// η = log-baseline(k, stratum) + X'β + Σ_c (random effect of c), without
/// the exposure offset.
pub fn linear_predictor(
    spec: &ModelSpec,
    layout: &Layout,
    table: &PseudoTable,
    row: usize,
    params: &ModelParams,
) -> Result<f64> {
    let t = table.trait_idx[row] as usize;
    let mut eta = params.baseline(t, table.stratum[row], table.k[row])?;
    for (j, &col) in layout.covariates[t].iter().enumerate() {
        let x = table.covariate(row, col);
        if x.is_nan() {
            return Err(Error::ColumnNotFound(spec.traits[t].covariates[j].clone()));
        }
        eta += params.beta[t][j] * x;
    }
    for (c, &col) in layout.clusters.iter().enumerate() {
        let code = table.cluster_code(row, col);
        if code == MISSING_LEVEL {
            return Err(Error::ColumnNotFound(spec.random[c].column.clone()));
        }
        let level = &table.cluster_levels[col][code as usize];
        eta += params.effect(spec, c, t, level)?;
    }
    Ok(eta)
}

/// exp(η); a rate for Poisson families, a probability for Bernoulli.
pub fn conditional_hazard(eta: f64, family: Family) -> Result<f64> {
    let h = eta.exp();
    if family == Family::Bernoulli && !(h < 1.0) {
        return Err(Error::HazardProbabilityAtLeastOne { eta });
    }
    Ok(h)
}

/// Log-likelihood contribution of one row given η (without offset).
pub fn row_loglik(family: Family, y: f64, eta: f64, offset: Option<f64>) -> Result<f64> {
    match family {
        Family::Bernoulli => {
            let p = conditional_hazard(eta, family)?;
            Ok(y * eta + (1.0 - y) * (-p).ln_1p())
        }
        _ => {
            let (off, exposure) = offset.map_or((0.0, 1.0), |o| (o, o.exp()));
            Ok(y * off + y * eta - exposure * eta.exp())
        }
    }
}

/// Σ over rows of the family log-likelihood; y! terms dropped.
pub fn conditional_loglik(table: &PseudoTable, spec: &ModelSpec, params: &ModelParams) -> Result<f64> {
    if table.is_empty() {
        return Ok(0.0);
    }
    let layout = Layout::new(spec, table)?;
    let terms = par::map_indexed(table.len(), |r| {
        let eta = linear_predictor(spec, &layout, table, r, params)?;
        let family = spec.traits[table.trait_idx[r] as usize].family;
        row_loglik(family, table.y[r], eta, table.offset(r))
    });
    let terms = terms.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(par::sum_indexed(terms.len(), |i| terms[i]))
}

/// Survival log-likelihood Σ_i [d_i log λ(t_i) − Λ(t_i)] for one
/// continuous trait, computed from the records without expansion.
pub fn exact_survival_loglik(
    records: &RecordSet,
    cuts: &CutPoints,
    spec: &ModelSpec,
    trait_idx: usize,
    params: &ModelParams,
) -> Result<f64> {
    let tr = spec
        .traits
        .get(trait_idx)
        .ok_or_else(|| Error::InvalidSpec(format!("no trait {trait_idx}")))?;
    if tr.time_type != TimeType::Continuous {
        return Err(Error::InvalidSpec("exact likelihood needs continuous time".into()));
    }
    let cov_cols = tr
        .covariates
        .iter()
        .map(|c| {
            records
                .covariate_names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::ColumnNotFound(c.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cl_cols = spec
        .random
        .iter()
        .map(|rc| {
            records
                .cluster_names
                .iter()
                .position(|n| *n == rc.column)
                .ok_or_else(|| Error::ColumnNotFound(rc.column.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    // Cumulative baseline H₀(t) on a stratum's clock.
    let cum_baseline = |stratum: u32, t: f64| -> Result<f64> {
        let b = cuts.for_stratum(stratum);
        let mut h = 0.0;
        for k in 0..b.len() - 1 {
            if t <= b[k] {
                break;
            }
            let rate = params.baseline(trait_idx, stratum, (k + 1) as u32)?.exp();
            h += rate * (t.min(b[k + 1]) - b[k]);
        }
        Ok(h)
    };

    let terms = par::map_indexed(records.records.len(), |i| -> Result<f64> {
        let rec = &records.records[i];
        let mut frailty = 0.0;
        for (c, &col) in cl_cols.iter().enumerate() {
            frailty += params.effect(spec, c, trait_idx, &rec.clusters[col])?;
        }
        let entries = rec.stratum_entries();
        let mut cum = 0.0;
        let mut log_hazard_at_exit = 0.0;
        for e in &rec.episodes {
            let (stratum, origin) = if tr.stratified {
                let origin = entries.iter().find(|s| s.0 == e.stratum).map_or(0.0, |s| s.1);
                (e.stratum, origin)
            } else {
                (POOLED_STRATUM, 0.0)
            };
            let (a, b) = (e.t_start - origin, e.t_stop - origin);
            if b > *cuts.for_stratum(stratum).last().unwrap() {
                return Err(Error::TimeExceedsCutPoints {
                    id: rec.id.clone(),
                    time: e.t_stop,
                });
            }
            let xb: f64 = cov_cols
                .iter()
                .zip(&params.beta[trait_idx])
                .map(|(&c, &beta)| beta * e.covariates[c])
                .sum();
            let rel = (xb + frailty).exp();
            cum += rel * (cum_baseline(stratum, b)? - cum_baseline(stratum, a)?);
            let k = cuts.interval_of(stratum, b).expect("checked against cut points");
            log_hazard_at_exit = params.baseline(trait_idx, stratum, (k + 1) as u32)? + xb + frailty;
        }
        let d = if rec.cause == tr.cause { 1.0 } else { 0.0 };
        Ok(d * log_hazard_at_exit - cum)
    });
    let terms = terms.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(par::sum_indexed(terms.len(), |i| terms[i]))
}

/// Per-component T×T covariance blocks and per-trait dispersions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub names: Vec<String>,
    /// Row-major T×T blocks, one per random component.
    pub sigma: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

impl VarianceComponents {
    pub fn n_traits(&self) -> usize {
        self.phi.len()
    }

    pub fn get(&self, c: usize, a: usize, b: usize) -> f64 {
        self.sigma[c][a * self.n_traits() + b]
    }

    pub fn block(&self, c: usize) -> nalgebra::DMatrix<f64> {
        let t = self.n_traits();
        nalgebra::DMatrix::from_row_slice(t, t, &self.sigma[c])
    }

    pub fn set_block(&mut self, c: usize, m: &nalgebra::DMatrix<f64>) {
        let t = self.n_traits();
        for a in 0..t {
            for b in 0..t {
                self.sigma[c][a * t + b] = m[(a, b)];
            }
        }
    }

    pub fn component(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::{expand_continuous, Episode, SurvivalRecord};

    fn spec1(family: Family, covariates: Vec<&str>, random: Vec<&str>) -> ModelSpec {
        ModelSpec {
            traits: vec![TraitSpec {
                name: "t".into(),
                cause: 1,
                time_type: family.time_type(),
                family,
                covariates: covariates.into_iter().map(String::from).collect(),
                stratified: false,
                dispersion: Dispersion::Fixed(1.0),
            }],
            random: random
                .into_iter()
                .map(|r| RandomComponent {
                    name: r.into(),
                    structure: Structure::Iid,
                    column: r.into(),
                    genetic_scale: None,
                })
                .collect(),
        }
    }

    fn one_row_table(y: f64, exposure: f64, continuous: bool) -> PseudoTable {
        PseudoTable {
            ids: vec!["a".into()],
            covariate_names: vec!["x".into()],
            cluster_names: vec!["sire".into(), "hy".into()],
            cluster_levels: vec![vec!["s1".into()], vec!["h1".into()]],
            id: vec![0],
            trait_idx: vec![0],
            cause: vec![1],
            time_type: vec![if continuous { TimeType::Continuous } else { TimeType::Discrete }],
            k: vec![1],
            stratum: vec![POOLED_STRATUM],
            y: vec![y],
            exposure: vec![exposure],
            covariates: vec![1.0],
            clusters: vec![0, 0],
        }
    }

    fn params(lb: f64, beta: f64, u: f64, v: f64) -> ModelParams {
        ModelParams {
            log_baseline: vec![[((POOLED_STRATUM, 1), lb)].into_iter().collect()],
            beta: vec![vec![beta]],
            effects: vec![
                vec![[("s1".to_string(), u)].into_iter().collect()],
                vec![[("h1".to_string(), v)].into_iter().collect()],
            ],
        }
    }

    #[test]
    fn linear_predictor_sums_terms() {
        let spec = spec1(Family::PoissonPieces, vec!["x"], vec!["sire", "hy"]);
        let table = one_row_table(0.0, 1.0, true);
        let layout = Layout::new(&spec, &table).unwrap();
        let eta = linear_predictor(&spec, &layout, &table, 0, &params(-2.0, 0.5, 0.1, -0.3)).unwrap();
        assert!((eta + 1.7).abs() < 1e-15);
        let zero = linear_predictor(&spec, &layout, &table, 0, &params(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(zero, 0.0);
        let mut p = params(0.0, 0.0, 0.0, 0.0);
        p.effects[0][0].clear();
        let err = linear_predictor(&spec, &layout, &table, 0, &p).unwrap_err();
        assert!(err.to_string().contains("unseen cluster level"));
    }

    #[test]
    fn hazards() {
        assert_eq!(conditional_hazard(0.0, Family::PoissonPieces).unwrap(), 1.0);
        let h = conditional_hazard(-1.2039, Family::Bernoulli).unwrap();
        assert_eq!(h, (-1.2039f64).exp());
        assert!((h - 0.3).abs() < 1e-4);
        let err = conditional_hazard(0.1, Family::Bernoulli).unwrap_err();
        assert!(err.to_string().contains("hazard probability ≥ 1"));
    }

    #[test]
    fn single_row_logliks() {
        let spec = spec1(Family::PoissonPieces, vec!["x"], vec!["sire", "hy"]);
        let l = conditional_loglik(&one_row_table(0.0, 1.0, true), &spec, &params(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((l + 1.0).abs() < 1e-15);
        let l = conditional_loglik(&one_row_table(1.0, 2.0, true), &spec, &params(-1.0, 0.0, 0.0, 0.0)).unwrap();
        let oracle = (2f64.ln() - 1.0) - 2.0 * (-1f64).exp();
        assert!((l - oracle).abs() < 1e-14);
        let empty = PseudoTable::default();
        assert_eq!(conditional_loglik(&empty, &spec, &ModelParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn bernoulli_row() {
        let spec = spec1(Family::Bernoulli, vec!["x"], vec!["sire", "hy"]);
        let p = params(0.3f64.ln(), 0.0, 0.0, 0.0);
        let l0 = conditional_loglik(&one_row_table(0.0, 1.0, false), &spec, &p).unwrap();
        assert!((l0 - 0.7f64.ln()).abs() < 1e-14);
        let l1 = conditional_loglik(&one_row_table(1.0, 1.0, false), &spec, &p).unwrap();
        assert!((l1 - 0.3f64.ln()).abs() < 1e-14);
    }

    fn rec(t: f64, cause: u8) -> RecordSet {
        RecordSet {
            records: vec![SurvivalRecord {
                id: "a".into(),
                time_type: TimeType::Continuous,
                episodes: vec![Episode { t_start: 0.0, t_stop: t, stratum: 1, covariates: vec![] }],
                cause,
                clusters: vec![],
            }],
            ..Default::default()
        }
    }

    #[test]
    fn exact_closed_forms() {
        let spec = spec1(Family::PoissonPieces, vec![], vec![]);
        let cuts = CutPoints::new(vec![0.0, 2.0]).unwrap();
        let mut p = ModelParams::zeros(&spec, &[vec![(POOLED_STRATUM, 1)]]);
        assert!((exact_survival_loglik(&rec(1.0, 0), &cuts, &spec, 0, &p).unwrap() + 1.0).abs() < 1e-15);
        p.log_baseline[0].insert((POOLED_STRATUM, 1), 0.5f64.ln());
        let l = exact_survival_loglik(&rec(1.0, 1), &cuts, &spec, 0, &p).unwrap();
        assert!((l - (0.5f64.ln() - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn exact_equals_pseudo_minus_log_exposure() {
        let spec = spec1(Family::PoissonPieces, vec![], vec![]);
        let cuts = CutPoints::new(vec![0.0, 50.0, 150.0]).unwrap();
        let data = rec(100.0, 1);
        let mut p = ModelParams::zeros(&spec, &[vec![(0, 1), (0, 2)]]);
        p.log_baseline[0].insert((0, 1), -4.0);
        p.log_baseline[0].insert((0, 2), -3.0);
        let table = expand_continuous(&data, &cuts, false, &[1]).unwrap();
        let exact = exact_survival_loglik(&data, &cuts, &spec, 0, &p).unwrap();
        let pseudo = conditional_loglik(&table, &spec, &p).unwrap();
        // The pseudo rows carry y·log Δ, so the exact value sits below them.
        assert!((exact - (pseudo - 50f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn spec_json_roundtrip() {
        let text = r#"{
            "traits": [{"cause": 1, "time_type": "discrete", "family": "bernoulli",
                        "dispersion": {"free": true}}],
            "random": [{"name": "sire", "structure": "pedigree", "column": "sire"},
                       {"name": "hy", "structure": "iid", "column": "hy"}]
        }"#;
        let spec = ModelSpec::from_json(text).unwrap();
        assert_eq!(spec.random[0].genetic_scale(), 4.0);
        assert!(spec.traits[0].dispersion.is_free());
        let bad = text.replace("\"discrete\"", "\"continuous\"");
        assert!(ModelSpec::from_json(&bad).is_err());
        let fixed = text.replace("{\"free\": true}", "{\"fixed\": 1.0}");
        let spec = ModelSpec::from_json(&fixed).unwrap();
        assert_eq!(spec.traits[0].dispersion, Dispersion::Fixed(1.0));
    }
}

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use longhaz::cli::RunConfig;
use longhaz::expand::{expand_discrete, PseudoTable, RecordSet, TimeType};
use longhaz::inference::{fit_pql, FitOptions, FitResult};
use longhaz::model::{Family, ModelSpec};
use longhaz::pedigree::Pedigree;
use longhaz::simulate::{simulate_pedigree, simulate_survival, SimulationSpec};
use rand::Rng;

pub type Row = (String, Option<String>, Option<String>);

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture_config(name: &str) -> RunConfig {
    let path = fixture(name).join("config.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Rows in birth order. Without `inbred`, mates are chosen unrelated.
pub fn random_pedigree(rng: &mut impl Rng, n: usize, inbred: bool) -> Vec<Row> {
    let mut rows: Vec<Row> = Vec::with_capacity(n);
    let mut kin = Kinship::default();
    for i in 0..n {
        let pick = |rng: &mut dyn rand::RngCore, rows: &[Row]| -> Option<usize> {
            if rows.is_empty() || rng.random_bool(0.3) {
                None
            } else {
                Some(rng.random_range(0..rows.len()))
            }
        };
        let mut s = pick(rng, &rows);
        let mut d = pick(rng, &rows);
        if s == d {
            d = None;
        }
        if let (Some(a), Some(b)) = (s, d) {
            if !inbred && kin.get(&rows, a, b) != 0.0 {
                if rng.random_bool(0.5) {
                    s = None;
                } else {
                    d = None;
                }
            }
        }
        rows.push((
            format!("i{i}"),
            s.map(|k| rows[k].0.clone()),
            d.map(|k| rows[k].0.clone()),
        ));
    }
    rows
}

/// Kinship coefficients from their recursive definition, on row indices.
#[derive(Default)]
pub struct Kinship {
    memo: HashMap<(usize, usize), f64>,
}

impl Kinship {
    fn parents(rows: &[Row], i: usize) -> [Option<usize>; 2] {
        let find = |p: &Option<String>| p.as_ref().and_then(|id| rows.iter().position(|r| &r.0 == id));
        [find(&rows[i].1), find(&rows[i].2)]
    }

    pub fn get(&mut self, rows: &[Row], i: usize, j: usize) -> f64 {
        let key = (i.max(j), i.min(j));
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let (young, old) = key;
        let [s, d] = Self::parents(rows, young);
        let v = if young == old {
            match (s, d) {
                (Some(s), Some(d)) => 0.5 * (1.0 + self.get(rows, s, d)),
                _ => 0.5,
            }
        } else {
            let fs = s.map_or(0.0, |s| self.get(rows, s, old));
            let fd = d.map_or(0.0, |d| self.get(rows, d, old));
            0.5 * (fs + fd)
        };
        self.memo.insert(key, v);
        v
    }
}

/// Paths from `i` up through its ancestors, as node lists starting at `i`.
fn upward_paths(rows: &[Row], i: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![i]];
    for p in Kinship::parents(rows, i).into_iter().flatten() {
        for mut path in upward_paths(rows, p) {
            path.insert(0, i);
            out.push(path);
        }
    }
    out
}

/// Σ (1/2)^r over pairs of node-disjoint paths meeting at a common
/// ancestor; valid for non-inbred pedigrees.
pub fn path_relationship(rows: &[Row], i: usize, j: usize) -> f64 {
    if i == j {
        return 1.0;
    }
    let pi = upward_paths(rows, i);
    let pj = upward_paths(rows, j);
    let mut a = 0.0;
    for p in &pi {
        for q in &pj {
            let top = *p.last().unwrap();
            if top != *q.last().unwrap() {
                continue;
            }
            let shared = p[..p.len() - 1].iter().any(|x| q.contains(x))
                || q[..q.len() - 1].iter().any(|x| p.contains(x));
            if !shared {
                a += 0.5f64.powi((p.len() + q.len() - 2) as i32);
            }
        }
    }
    a
}

pub fn pedigree_from(rows: &[Row]) -> Pedigree {
    Pedigree::from_rows(rows.iter().cloned()).unwrap()
}

/// Single-cause discrete sire model: sires × daughters, herds,
/// per-period probabilities.
pub fn discrete_sire_data(
    seed: u64,
    n_sires: usize,
    daughters: usize,
    baseline: Vec<f64>,
    sire_var: f64,
    herd_var: f64,
    n_herds: usize,
) -> (Pedigree, RecordSet) {
    let spec = SimulationSpec {
        time_type: TimeType::Discrete,
        baseline: vec![baseline],
        cuts: vec![],
        beta: vec![],
        sire_covariance: vec![vec![sire_var]],
        herd_covariance: vec![vec![herd_var]],
        n_herds,
        censoring: 0.0,
        stratum_length: None,
    };
    let ped = simulate_pedigree(n_sires, daughters).unwrap();
    let (records, _) = simulate_survival(&ped, &spec, seed).unwrap();
    (ped, records)
}

pub fn sire_herd_spec(family: Family, time_type: TimeType) -> ModelSpec {
    let text = format!(
        r#"{{
            "traits": [{{"name": "longevity", "cause": 1, "time_type": "{}", "family": "{}"}}],
            "random": [{{"name": "sire", "structure": "pedigree", "column": "sire"}},
                       {{"name": "herd", "structure": "iid", "column": "herd"}}]
        }}"#,
        match time_type {
            TimeType::Continuous => "continuous",
            TimeType::Discrete => "discrete",
        },
        match family {
            Family::PoissonPieces => "poisson_pieces",
            Family::Bernoulli => "bernoulli",
            Family::PoissonApprox => "poisson_approx",
        }
    );
    ModelSpec::from_json(&text).unwrap()
}

pub fn discrete_table(records: &RecordSet) -> PseudoTable {
    expand_discrete(records, &[1]).unwrap().select_cause(1, 0)
}

pub fn fit_discrete(
    ped: &Pedigree,
    records: &RecordSet,
    family: Family,
    opts: &FitOptions,
) -> longhaz::Result<FitResult> {
    let spec = sire_herd_spec(family, TimeType::Discrete);
    fit_pql(&discrete_table(records), &spec, Some(ped), opts)
}

pub fn component(fit: &FitResult, name: &str) -> f64 {
    let c = fit.variance.component(name).unwrap();
    fit.variance.get(c, 0, 0)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_longhaz")
}

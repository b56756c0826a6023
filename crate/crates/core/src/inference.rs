//! Penalized quasi-likelihood fitting on sparse mixed-model equations.
//!
//! The inner loop is Fisher scoring on the penalized quasi-likelihood
//! for fixed covariance parameters; each step solves the mixed-model
//! equations `C θ = Wᵀ R⁻¹ z`. The outer loop updates the covariance
//! blocks by average-information steps on the working linear mixed
//! model (EM steps during burn-in and as fallback) and the dispersions
//! by Pearson's statistic.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::{PseudoTable, MISSING_LEVEL};
use crate::model::{Family, Layout, ModelSpec, Structure, VarianceComponents};
use crate::par;
use crate::report::format_sig;
use crate::pedigree::{a_inverse, log_det_a, Pedigree};
use crate::sparse::{Ldl, SymCsc, SymbolicLdl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
    /// Overrides every trait's dispersion with a fixed value.
    pub fix_dispersion: Option<f64>,
    pub initial_variance: f64,
    pub em_steps: usize,
    pub inner_max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 200,
            variance_floor: 1e-10,
            fix_dispersion: None,
            initial_variance: 0.1,
            em_steps: 3,
            inner_max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedLabel {
    pub trait_index: usize,
    pub label: String,
}

/// One random component laid out in the MME: columns
/// `start + trait·L + level`.
#[derive(Debug, Clone)]
pub struct ComponentDesign {
    pub name: String,
    pub structure: Structure,
    pub levels: Vec<String>,
    pub k_inv: SymCsc,
    pub log_det_k: f64,
    pub genetic_scale: f64,
    pub start: usize,
}

impl ComponentDesign {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn col(&self, trait_idx: usize, level: usize) -> usize {
        self.start + trait_idx * self.n_levels() + level
    }
}

/// Incidence structure of a pseudo-table under a model.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_traits: usize,
    pub families: Vec<Family>,
    pub fixed: Vec<FixedLabel>,
    pub fixed_per_trait: Vec<usize>,
    pub baseline_cols: Vec<BTreeMap<(u32, u32), usize>>,
    pub components: Vec<ComponentDesign>,
    pub dim: usize,
    row_trait: Vec<u8>,
    y: Vec<f64>,
    offset: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// Row-major level per (row, component).
    levels: Vec<u32>,
}

impl Design {
    pub fn new(table: &PseudoTable, spec: &ModelSpec, pedigree: Option<&Pedigree>) -> Result<Self> {
        spec.validate()?;
        if table.is_empty() {
            return Err(Error::InvalidSpec("empty pseudo-table".into()));
        }
        let n_traits = spec.n_traits();
        let layout = Layout::new(spec, table)?;
        for r in 0..table.len() {
            let t = table.trait_idx[r] as usize;
            if t >= n_traits {
                return Err(Error::InvalidSpec(format!("row {r} refers to trait {t}")));
            }
            if table.time_type[r] != spec.traits[t].time_type {
                return Err(Error::InvalidSpec(format!(
                    "trait {t} declares {:?} time but the table holds {:?} rows",
                    spec.traits[t].time_type, table.time_type[r]
                )));
            }
        }

        let mut keys: Vec<BTreeMap<(u32, u32), usize>> = vec![BTreeMap::new(); n_traits];
        for r in 0..table.len() {
            keys[table.trait_idx[r] as usize].insert((table.stratum[r], table.k[r]), 0);
        }
        let mut fixed = Vec::new();
        let mut fixed_per_trait = Vec::new();
        let mut baseline_cols = Vec::with_capacity(n_traits);
        let mut cov_start = Vec::with_capacity(n_traits);
        for (t, mut map) in keys.into_iter().enumerate() {
            let before = fixed.len();
            for (&(p, k), col) in map.iter_mut() {
                *col = fixed.len();
                fixed.push(FixedLabel {
                    trait_index: t,
                    label: format!("baseline[stratum={p},k={k}]"),
                });
            }
            baseline_cols.push(map);
            cov_start.push(fixed.len());
            for c in &spec.traits[t].covariates {
                fixed.push(FixedLabel {
                    trait_index: t,
                    label: c.clone(),
                });
            }
            fixed_per_trait.push(fixed.len() - before);
        }
        let n_fixed = fixed.len();

        let mut components = Vec::with_capacity(spec.random.len());
        let mut level_maps: Vec<Vec<u32>> = Vec::with_capacity(spec.random.len());
        let mut start = n_fixed;
        for (c, rc) in spec.random.iter().enumerate() {
            let col = layout.clusters[c];
            let table_levels = &table.cluster_levels[col];
            let (levels, map, k_inv, log_det_k) = match rc.structure {
                Structure::Iid => (
                    table_levels.clone(),
                    (0..table_levels.len() as u32).collect::<Vec<_>>(),
                    SymCsc::identity(table_levels.len()),
                    0.0,
                ),
                Structure::Pedigree => {
                    let ped = pedigree.ok_or_else(|| {
                        Error::InvalidSpec(format!(
                            "component `{}` needs a pedigree",
                            rc.name
                        ))
                    })?;
                    let sub = ped.ancestral_subset(table_levels.iter().map(String::as_str))?;
                    let map = table_levels
                        .iter()
                        .map(|l| sub.position(l).expect("subset holds its seeds") as u32)
                        .collect();
                    let levels = sub.ids().map(String::from).collect();
                    (levels, map, a_inverse(&sub).as_sparse().clone(), log_det_a(&sub))
                }
            };
            let comp = ComponentDesign {
                name: rc.name.clone(),
                structure: rc.structure,
                levels,
                k_inv,
                log_det_k,
                genetic_scale: rc.genetic_scale(),
                start,
            };
            start += comp.n_levels() * n_traits;
            components.push(comp);
            level_maps.push(map);
        }
        let dim = start;

        let n = table.len();
        let n_comp = components.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut levels = Vec::with_capacity(n * n_comp);
        row_ptr.push(0);
        for r in 0..n {
            let t = table.trait_idx[r] as usize;
            cols.push(baseline_cols[t][&(table.stratum[r], table.k[r])] as u32);
            vals.push(1.0);
            for (j, &col) in layout.covariates[t].iter().enumerate() {
                let x = table.covariate(r, col);
                if x.is_nan() {
                    return Err(Error::ColumnNotFound(spec.traits[t].covariates[j].clone()));
                }
                cols.push((cov_start[t] + j) as u32);
                vals.push(x);
            }
            for (c, comp) in components.iter().enumerate() {
                let code = table.cluster_code(r, layout.clusters[c]);
                if code == MISSING_LEVEL {
                    return Err(Error::ColumnNotFound(spec.random[c].column.clone()));
                }
                let level = level_maps[c][code as usize];
                levels.push(level);
                cols.push(comp.col(t, level as usize) as u32);
                vals.push(1.0);
            }
            row_ptr.push(cols.len());
        }

        Ok(Design {
            n_traits,
            families: spec.traits.iter().map(|t| t.family).collect(),
            fixed,
            fixed_per_trait,
            baseline_cols,
            components,
            dim,
            row_trait: table.trait_idx.clone(),
            y: table.y.clone(),
            offset: (0..n).map(|r| table.offset(r).unwrap_or(0.0)).collect(),
            row_ptr,
            cols,
            vals,
            levels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    fn row_eta(&self, r: usize, theta: &[f64]) -> f64 {
        let (c, v) = self.row(r);
        c.iter().zip(v).map(|(&c, &v)| v * theta[c as usize]).sum()
    }

    /// Linear predictor of every row, without the exposure offset.
    pub fn eta(&self, theta: &[f64]) -> Vec<f64> {
        par::map_indexed(self.n_rows(), |r| self.row_eta(r, theta))
    }

    fn family(&self, r: usize) -> Family {
        self.families[self.row_trait[r] as usize]
    }

    /// Start values: baseline columns at the crude rates.
    pub fn initial_theta(&self) -> Result<Vec<f64>> {
        let n_fixed = self.n_fixed();
        let mut events = vec![0.0; n_fixed];
        let mut exposure = vec![0.0; n_fixed];
        for r in 0..self.n_rows() {
            let b = self.row(r).0[0] as usize;
            events[b] += self.y[r];
            exposure[b] += self.offset[r].exp();
        }
        let mut theta = vec![0.0; self.dim];
        for map in &self.baseline_cols {
            for (&(p, k), &col) in map {
                if events[col] <= 0.0 {
                    return Err(Error::EmptyBaselineLevel(format!(
                        "trait {}, stratum {p}, interval {k}",
                        self.fixed[col].trait_index
                    )));
                }
                let rate = events[col] / exposure[col];
                theta[col] = if self.families[self.fixed[col].trait_index] == Family::Bernoulli {
                    rate.min(0.5).ln()
                } else {
                    rate.ln()
                };
            }
        }
        Ok(theta)
    }
}

/// Per-row quantities of the working model.
#[derive(Debug, Clone, Copy, Default)]
struct RowVals {
    eta: f64,
    mu: f64,
    w: f64,
    s: f64,
    ll: f64,
}

fn row_vals(family: Family, y: f64, eta: f64, offset: f64) -> Option<RowVals> {
    match family {
        Family::Bernoulli => {
            let p = eta.exp();
            if !(p < 1.0) {
                return None;
            }
            let q = 1.0 - p;
            Some(RowVals {
                eta,
                mu: p,
                w: p / q,
                s: (y - p) / q,
                ll: y * eta + (1.0 - y) * (-p).ln_1p(),
            })
        }
        _ => {
            let lin = eta + offset;
            let mu = lin.exp();
            Some(RowVals {
                eta,
                mu,
                w: mu,
                s: y - mu,
                ll: y * lin - mu,
            })
        }
    }
}

struct RowState {
    rows: Vec<RowVals>,
    /// Σ ℓ/φ.
    ql: f64,
}

impl RowState {
    fn new(design: &Design, theta: &[f64], phi: &[f64]) -> Option<Self> {
        let rows = par::map_indexed(design.n_rows(), |r| {
            row_vals(
                design.family(r),
                design.y[r],
                design.row_eta(r, theta),
                design.offset[r],
            )
        });
        let rows: Vec<RowVals> = rows.into_iter().collect::<Option<_>>()?;
        let ql = par::sum_indexed(rows.len(), |r| rows[r].ll / phi[design.row_trait[r] as usize]);
        Some(RowState { rows, ql })
    }

    fn rinv(&self, design: &Design, r: usize, phi: &[f64]) -> f64 {
        self.rows[r].w / phi[design.row_trait[r] as usize]
    }
}

/// Mixed-model equation pattern, analysed once per design.
struct Mme {
    pattern: SymCsc,
    symbolic: Arc<SymbolicLdl>,
    row_pos_ptr: Vec<usize>,
    row_pos: Vec<u32>,
    /// `(position, component, trait a, trait b, K⁻¹ value)`.
    penalty: Vec<(usize, usize, usize, usize, f64)>,
}

impl Mme {
    fn new(design: &Design) -> Self {
        let mut triplets = Vec::new();
        for r in 0..design.n_rows() {
            let (c, _) = design.row(r);
            for i in 0..c.len() {
                for j in 0..=i {
                    triplets.push((c[i] as usize, c[j] as usize, 0.0));
                }
            }
        }
        let t = design.n_traits;
        for comp in &design.components {
            for col in 0..comp.n_levels() {
                for (row, _) in comp.k_inv.column(col) {
                    for a in 0..t {
                        for b in 0..t {
                            triplets.push((comp.col(a, row), comp.col(b, col), 0.0));
                        }
                    }
                }
            }
        }
        for i in 0..design.dim {
            triplets.push((i, i, 0.0));
        }
        let pattern = SymCsc::from_triplets(design.dim, &triplets);
        drop(triplets);
        let symbolic = Arc::new(SymbolicLdl::analyze(&pattern));

        let mut row_pos_ptr = Vec::with_capacity(design.n_rows() + 1);
        let mut row_pos = Vec::new();
        row_pos_ptr.push(0);
        for r in 0..design.n_rows() {
            let (c, _) = design.row(r);
            for i in 0..c.len() {
                for j in 0..=i {
                    let (ci, cj) = (c[i] as usize, c[j] as usize);
                    row_pos.push(pattern.position(ci, cj).expect("row pair in pattern") as u32);
                    if i != j {
                        row_pos.push(pattern.position(cj, ci).expect("row pair in pattern") as u32);
                    }
                }
            }
            row_pos_ptr.push(row_pos.len());
        }

        let mut penalty = Vec::new();
        for (ci, comp) in design.components.iter().enumerate() {
            for col in 0..comp.n_levels() {
                for (row, v) in comp.k_inv.column(col) {
                    for a in 0..t {
                        for b in 0..t {
                            let pos = pattern
                                .position(comp.col(a, row), comp.col(b, col))
                                .expect("penalty in pattern");
                            penalty.push((pos, ci, a, b, v));
                        }
                    }
                }
            }
        }
        Mme {
            pattern,
            symbolic,
            row_pos_ptr,
            row_pos,
            penalty,
        }
    }

    /// `Wᵀ R⁻¹ W` on the pattern.
    fn data_values(&self, design: &Design, rinv: &[f64]) -> Vec<f64> {
        let nnz = self.pattern.nnz();
        let partials = par::map_chunks(design.n_rows(), par::ROW_CHUNK, |range| {
            let mut acc = vec![0.0; nnz];
            for r in range {
                let (c, v) = design.row(r);
                let pos = &self.row_pos[self.row_pos_ptr[r]..self.row_pos_ptr[r + 1]];
                let mut p = 0;
                for i in 0..c.len() {
                    for j in 0..=i {
                        let x = v[i] * v[j] * rinv[r];
                        acc[pos[p] as usize] += x;
                        p += 1;
                        if i != j {
                            acc[pos[p] as usize] += x;
                            p += 1;
                        }
                    }
                }
            }
            acc
        });
        let mut total = vec![0.0; nnz];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }

    fn matrix(&self, data: &[f64], sigma_inv: &[DMatrix<f64>]) -> SymCsc {
        let mut c = self.pattern.clone();
        c.values_mut().copy_from_slice(data);
        let vals = c.values_mut();
        for &(pos, comp, a, b, v) in &self.penalty {
            vals[pos] += sigma_inv[comp][(a, b)] * v;
        }
        c
    }
}

/// `Wᵀ v` with fixed chunking.
fn wt_times(design: &Design, v: &[f64]) -> Vec<f64> {
    let dim = design.dim;
    let partials = par::map_chunks(design.n_rows(), par::ROW_CHUNK, |range| {
        let mut acc = vec![0.0; dim];
        for r in range {
            let (c, x) = design.row(r);
            for (&c, &x) in c.iter().zip(x) {
                acc[c as usize] += x * v[r];
            }
        }
        acc
    });
    let mut total = vec![0.0; dim];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

fn sym_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })
}

fn log_det_sym(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Eigenvalue clipping to `floor`; returns whether any value was clipped.
pub fn project_psd(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return if v < floor || v.is_nan() {
            (DMatrix::from_element(1, 1, floor), true)
        } else {
            (sym, false)
        };
    }
    let eig = sym.clone().symmetric_eigen();
    let mut clipped = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor || v.is_nan() {
            clipped = true;
            floor
        } else {
            v
        }
    });
    if !clipped {
        return (sym, false);
    }
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

/// Penalty `½ Σ_c Σ_ab (Σ_c⁻¹)_ab u_aᵀ K⁻¹ u_b` and the per-component
/// quadratic forms `Q_ab = u_aᵀ K⁻¹ u_b`.
fn quadratic_forms(design: &Design, theta: &[f64]) -> Vec<DMatrix<f64>> {
    let t = design.n_traits;
    design
        .components
        .iter()
        .map(|comp| {
            let l = comp.n_levels();
            let u: Vec<&[f64]> = (0..t)
                .map(|a| &theta[comp.col(a, 0)..comp.col(a, 0) + l])
                .collect();
            let ku: Vec<Vec<f64>> = u.iter().map(|ua| comp.k_inv.mul_vec(ua)).collect();
            DMatrix::from_fn(t, t, |a, b| {
                u[a].iter().zip(&ku[b]).map(|(x, y)| x * y).sum()
            })
        })
        .collect()
}

fn penalty_value(design: &Design, theta: &[f64], sigma_inv: &[DMatrix<f64>]) -> f64 {
    quadratic_forms(design, theta)
        .iter()
        .zip(sigma_inv)
        .map(|(q, si)| 0.5 * q.component_mul(si).sum())
        .sum()
}

struct Inner {
    theta: Vec<f64>,
    state: RowState,
    data: Vec<f64>,
    rhs: Vec<f64>,
    factor: Ldl,
    objective: f64,
    iterations: usize,
}

fn working_rhs(design: &Design, state: &RowState, phi: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = (0..design.n_rows())
        .map(|r| {
            let rv = &state.rows[r];
            (rv.w * rv.eta + rv.s) / phi[design.row_trait[r] as usize]
        })
        .collect();
    wt_times(design, &v)
}

/// Fisher scoring on the penalized quasi-likelihood for fixed Σ and φ.
fn inner_irls(
    design: &Design,
    mme: &Mme,
    sigma_inv: &[DMatrix<f64>],
    phi: &[f64],
    theta0: Vec<f64>,
    opts: &FitOptions,
) -> Result<Inner> {
    let mut theta = theta0;
    let mut state = RowState::new(design, &theta, phi).ok_or_else(|| {
        Error::HazardProbabilityAtLeastOne {
            eta: design.eta(&theta).into_iter().fold(f64::MIN, f64::max),
        }
    })?;
    let mut objective = state.ql - penalty_value(design, &theta, sigma_inv);
    let mut iterations = 0;
    for _ in 0..opts.inner_max_iter {
        iterations += 1;
        let rinv: Vec<f64> = (0..design.n_rows()).map(|r| state.rinv(design, r, phi)).collect();
        let data = mme.data_values(design, &rinv);
        let rhs = working_rhs(design, &state, phi);
        let c = mme.matrix(&data, sigma_inv);
        let factor = Ldl::factor(Arc::clone(&mme.symbolic), &c)?;
        let target = factor.solve(&rhs);
        let delta: Vec<f64> = target.iter().zip(&theta).map(|(a, b)| a - b).collect();

        let mut accepted = None;
        let mut any_valid = false;
        let mut step = 1.0;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + step * d).collect();
            if let Some(st) = RowState::new(design, &trial, phi) {
                any_valid = true;
                let obj = st.ql - penalty_value(design, &trial, sigma_inv);
                if obj >= objective - 1e-12 * (1.0 + objective.abs()) {
                    accepted = Some((trial, st, obj));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, st, obj)) = accepted else {
            if !any_valid {
                return Err(Error::HazardProbabilityAtLeastOne {
                    eta: design.eta(&theta).into_iter().fold(f64::MIN, f64::max),
                });
            }
            break;
        };
        let max_delta = trial
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = 1.0 + trial.iter().map(|v| v.abs()).fold(0.0, f64::max);
        theta = trial;
        state = st;
        objective = obj;
        if max_delta <= 1e-10 * scale {
            break;
        }
    }
    let rinv: Vec<f64> = (0..design.n_rows()).map(|r| state.rinv(design, r, phi)).collect();
    let data = mme.data_values(design, &rinv);
    let rhs = working_rhs(design, &state, phi);
    let factor = Ldl::factor(Arc::clone(&mme.symbolic), &mme.matrix(&data, sigma_inv))?;
    Ok(Inner {
        theta,
        state,
        data,
        rhs,
        factor,
        objective,
        iterations,
    })
}

/// Pearson dispersion per trait: Σ (y−μ)²/V(μ) over `n_t − p_t`.
pub fn estimate_dispersion(
    families: &[Family],
    row_trait: &[u8],
    y: &[f64],
    mu: &[f64],
    fixed_per_trait: &[usize],
) -> Result<Vec<f64>> {
    let t = families.len();
    let mut x2 = vec![0.0; t];
    let mut n = vec![0usize; t];
    for r in 0..y.len() {
        let tr = row_trait[r] as usize;
        let v = families[tr].variance(mu[r]);
        x2[tr] += (y[r] - mu[r]).powi(2) / v;
        n[tr] += 1;
    }
    (0..t)
        .map(|tr| {
            let df = n[tr] as i64 - fixed_per_trait[tr] as i64;
            if df <= 0 {
                return Err(Error::InsufficientDf(tr));
            }
            let phi = x2[tr] / df as f64;
            if phi <= 0.0 {
                log::warn!("trait {tr}: Pearson dispersion is 0 (perfect fit)");
            }
            Ok(phi)
        })
        .collect()
}

/// Sparse solve of a symmetric positive definite system with one step
/// of iterative refinement.
pub fn solve_mme(c: &SymCsc, rhs: &[f64]) -> Result<Vec<f64>> {
    let symbolic = Arc::new(SymbolicLdl::analyze(c));
    let factor = Ldl::factor(symbolic, c)?;
    let mut x = factor.solve(rhs);
    for _ in 0..2 {
        let cx = c.mul_vec(&x);
        let resid: Vec<f64> = rhs.iter().zip(&cx).map(|(b, v)| b - v).collect();
        let corr = factor.solve(&resid);
        x.iter_mut().zip(&corr).for_each(|(a, d)| *a += d);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
enum Param {
    Sigma { comp: usize, a: usize, b: usize },
    Phi { trait_index: usize },
}

/// Working-model quantities at the current mode.
struct WorkingModel<'a> {
    design: &'a Design,
    inner: &'a Inner,
    phi: &'a [f64],
    /// z − Wθ̂ = s/w per row.
    resid: Vec<f64>,
    rinv: Vec<f64>,
}

impl<'a> WorkingModel<'a> {
    fn new(design: &'a Design, inner: &'a Inner, phi: &'a [f64]) -> Self {
        let rows = &inner.state.rows;
        WorkingModel {
            design,
            inner,
            phi,
            resid: rows.iter().map(|r| r.s / r.w).collect(),
            rinv: (0..design.n_rows()).map(|r| inner.state.rinv(design, r, phi)).collect(),
        }
    }

    /// `S_c = T_c + Q_c`, with `T_ab = tr(K⁻¹ C^{uu}_{ab})`.
    fn s_matrices(&self) -> Vec<DMatrix<f64>> {
        let design = self.design;
        let t = design.n_traits;
        let sel = self.inner.factor.selected_inverse();
        let q = quadratic_forms(design, &self.inner.theta);
        design
            .components
            .iter()
            .zip(q)
            .map(|(comp, qc)| {
                let mut tm = DMatrix::zeros(t, t);
                for a in 0..t {
                    for b in 0..t {
                        let mut acc = par::NeumaierSum::default();
                        for col in 0..comp.n_levels() {
                            for (row, v) in comp.k_inv.column(col) {
                                let cinv = sel
                                    .get(comp.col(a, row), comp.col(b, col))
                                    .expect("penalty pattern lies in the factor pattern");
                                acc.add(v * cinv);
                            }
                        }
                        tm[(a, b)] = acc.value();
                    }
                }
                tm + qc
            })
            .collect()
    }

    /// `q_k = ∂V/∂θ_k · P z` evaluated per row.
    fn q_vector(&self, p: Param, sigma_inv: &[DMatrix<f64>]) -> Vec<f64> {
        let design = self.design;
        let t = design.n_traits;
        let n_comp = design.components.len();
        let theta = &self.inner.theta;
        match p {
            Param::Sigma { comp, a, b } => {
                let mut e = DMatrix::zeros(t, t);
                e[(a, b)] = 1.0;
                e[(b, a)] = 1.0;
                let m = e * &sigma_inv[comp];
                let cd = &design.components[comp];
                (0..design.n_rows())
                    .map(|r| {
                        let tr = design.row_trait[r] as usize;
                        let level = design.levels[r * n_comp + comp] as usize;
                        (0..t).map(|k| m[(tr, k)] * theta[cd.col(k, level)]).sum()
                    })
                    .collect()
            }
            Param::Phi { trait_index } => (0..design.n_rows())
                .map(|r| {
                    if design.row_trait[r] as usize == trait_index {
                        self.resid[r] / self.phi[trait_index]
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    /// `AI_kl = ½ q_kᵀ P q_l`.
    fn average_information(&self, params: &[Param], sigma_inv: &[DMatrix<f64>]) -> DMatrix<f64> {
        let qs: Vec<Vec<f64>> = params.iter().map(|&p| self.q_vector(p, sigma_inv)).collect();
        let rq: Vec<Vec<f64>> = qs
            .iter()
            .map(|q| q.iter().zip(&self.rinv).map(|(a, b)| a * b).collect())
            .collect();
        let bs: Vec<Vec<f64>> = rq.iter().map(|v| wt_times(self.design, v)).collect();
        let ss: Vec<Vec<f64>> = bs.iter().map(|b| self.inner.factor.solve(b)).collect();
        let n = params.len();
        let mut ai = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in 0..=k {
                let a = par::sum_indexed(qs[k].len(), |r| rq[k][r] * qs[l][r]);
                let b: f64 = bs[k].iter().zip(&ss[l]).map(|(x, y)| x * y).sum();
                ai[(k, l)] = 0.5 * (a - b);
                ai[(l, k)] = ai[(k, l)];
            }
        }
        ai
    }
}

/// Working REML log-likelihood for Σ with z, W and R held fixed.
fn working_reml(
    design: &Design,
    mme: &Mme,
    wm: &WorkingModel,
    sigma: &[DMatrix<f64>],
) -> Result<f64> {
    let sigma_inv = sigma.iter().map(sym_inverse).collect::<Result<Vec<_>>>()?;
    let c = mme.matrix(&wm.inner.data, &sigma_inv);
    let factor = Ldl::factor(Arc::clone(&mme.symbolic), &c)?;
    let theta = factor.solve(&wm.inner.rhs);
    let rows = &wm.inner.state.rows;
    let e_r_e = par::sum_indexed(design.n_rows(), |r| {
        let z = rows[r].eta + wm.resid[r];
        let e = z - design.row_eta(r, &theta);
        wm.rinv[r] * e * e
    });
    let u_g_u = 2.0 * penalty_value(design, &theta, &sigma_inv);
    let log_det_sigma: f64 = design
        .components
        .iter()
        .zip(sigma)
        .map(|(comp, s)| comp.n_levels() as f64 * log_det_sym(s))
        .sum();
    Ok(-0.5 * (log_det_sigma + factor.log_det() + e_r_e + u_g_u))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub step: String,
    pub inner_iterations: usize,
    pub objective: f64,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub final_change: f64,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedEstimate {
    pub trait_index: usize,
    pub label: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Blup {
    pub component: String,
    pub level: String,
    pub trait_index: usize,
    pub blup: f64,
    pub pev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub component: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub traits: Vec<String>,
    pub fixed_effects: Vec<FixedEstimate>,
    pub variance: VarianceComponents,
    /// Covariance parameters and free dispersions with AI standard errors.
    pub parameters: Vec<Estimate>,
    pub correlations: Vec<Correlation>,
    pub dispersion_fixed: Vec<bool>,
    pub genetic_scale: Vec<f64>,
    pub pinned_at_floor: Vec<String>,
    pub log_quasi_likelihood: f64,
    pub convergence: Convergence,
    #[serde(skip)]
    pub blups: Vec<Blup>,
    /// Linear predictor per table row, without offset.
    #[serde(skip)]
    pub eta: Vec<f64>,
    #[serde(skip)]
    pub theta: Vec<f64>,
}

impl FitResult {
    pub fn write_blups(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["component", "level", "trait", "blup", "pev"])?;
        for b in &self.blups {
            w.write_record([
                b.component.clone(),
                b.level.clone(),
                b.trait_index.to_string(),
                format_sig(b.blup),
                format_sig(b.pev),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn param_name(design: &Design, p: Param) -> String {
    match p {
        Param::Sigma { comp, a, b } => {
            let name = &design.components[comp].name;
            if design.n_traits == 1 {
                name.clone()
            } else {
                format!("{name}[{a},{b}]")
            }
        }
        Param::Phi { trait_index } => format!("phi[{trait_index}]"),
    }
}

fn sigma_params(design: &Design) -> Vec<Param> {
    let mut out = Vec::new();
    for comp in 0..design.components.len() {
        for a in 0..design.n_traits {
            for b in a..design.n_traits {
                out.push(Param::Sigma { comp, a, b });
            }
        }
    }
    out
}

/// Fit the model to a pseudo-table.
pub fn fit_pql(
    table: &PseudoTable,
    spec: &ModelSpec,
    pedigree: Option<&Pedigree>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let design = Design::new(table, spec, pedigree)?;
    fit_design(&design, spec, opts)
}

pub fn fit_design(design: &Design, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let t = design.n_traits;
    let free_phi: Vec<bool> = spec
        .traits
        .iter()
        .map(|tr| opts.fix_dispersion.is_none() && tr.dispersion.is_free())
        .collect();
    let mut phi: Vec<f64> = spec
        .traits
        .iter()
        .map(|tr| opts.fix_dispersion.unwrap_or(tr.dispersion.initial()))
        .collect();
    let mut sigma: Vec<DMatrix<f64>> = design
        .components
        .iter()
        .map(|_| DMatrix::identity(t, t) * opts.initial_variance)
        .collect();
    let mme = Mme::new(design);
    let mut theta = design.initial_theta()?;
    let mut log = Vec::new();
    let mut converged = false;
    let mut change = f64::INFINITY;
    let mut pinned = vec![false; sigma.len()];
    let params = sigma_params(design);

    let mut iteration = 0;
    while iteration < opts.max_iter {
        iteration += 1;
        let sigma_inv = sigma.iter().map(sym_inverse).collect::<Result<Vec<_>>>()?;
        let inner = inner_irls(design, &mme, &sigma_inv, &phi, theta, opts)?;
        theta = inner.theta.clone();

        let mu: Vec<f64> = inner.state.rows.iter().map(|r| r.mu).collect();
        let pearson = estimate_dispersion(
            &design.families,
            &design.row_trait,
            &design.y,
            &mu,
            &design.fixed_per_trait,
        )?;
        let new_phi: Vec<f64> = (0..t)
            .map(|k| if free_phi[k] { pearson[k].max(opts.variance_floor) } else { phi[k] })
            .collect();

        let (new_sigma, step) = if sigma.is_empty() {
            (Vec::new(), "none")
        } else {
            let wm = WorkingModel::new(design, &inner, &phi);
            let s = wm.s_matrices();
            let em: Vec<DMatrix<f64>> = s
                .iter()
                .zip(&design.components)
                .map(|(s, comp)| s / comp.n_levels() as f64)
                .collect();
            let mut chosen = None;
            if iteration > opts.em_steps {
                chosen = ai_step(design, &mme, &wm, &sigma, &sigma_inv, &s, &params, opts);
            }
            match chosen {
                Some(next) => (next, "ai"),
                None => (em, "em"),
            }
        };
        let mut projected = Vec::with_capacity(new_sigma.len());
        for (c, m) in new_sigma.iter().enumerate() {
            let (p, clipped) = project_psd(m, opts.variance_floor);
            pinned[c] = clipped;
            projected.push(p);
        }

        change = 0.0;
        for (old, new) in sigma.iter().zip(&projected) {
            for (o, n) in old.iter().zip(new.iter()) {
                change = f64::max(change, (n - o).abs() / o.abs().max(1e-6));
            }
        }
        for (o, n) in phi.iter().zip(&new_phi) {
            change = change.max((n - o).abs() / o.abs().max(1e-6));
        }
        log::debug!(
            "iteration {iteration}: {step} step, objective {:.10}, change {change:.3e}",
            inner.objective
        );
        log.push(IterationLog {
            iteration,
            step: step.to_string(),
            inner_iterations: inner.iterations,
            objective: inner.objective,
            change,
        });
        sigma = projected;
        phi = new_phi;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let sigma_inv = sigma.iter().map(sym_inverse).collect::<Result<Vec<_>>>()?;
    let inner = inner_irls(design, &mme, &sigma_inv, &phi, theta, opts)?;
    let result = build_result(design, spec, &inner, &sigma, &phi, &free_phi, &pinned, Convergence {
        converged,
        iterations: iteration,
        final_change: change,
        log,
    });
    for (c, &p) in pinned.iter().enumerate() {
        if p {
            log::warn!(
                "component `{}` pinned at the variance floor",
                design.components[c].name
            );
        }
    }
    if converged {
        Ok(result)
    } else {
        Err(Error::DidNotConverge(Box::new(result)))
    }
}

#[allow(clippy::too_many_arguments)]
fn ai_step(
    design: &Design,
    mme: &Mme,
    wm: &WorkingModel,
    sigma: &[DMatrix<f64>],
    sigma_inv: &[DMatrix<f64>],
    s: &[DMatrix<f64>],
    params: &[Param],
    opts: &FitOptions,
) -> Option<Vec<DMatrix<f64>>> {
    let score: Vec<f64> = params
        .iter()
        .map(|&p| match p {
            Param::Sigma { comp, a, b } => {
                let l = design.components[comp].n_levels() as f64;
                let si = &sigma_inv[comp];
                let g = si * l - si * &s[comp] * si;
                let v = if a == b { g[(a, a)] } else { g[(a, b)] + g[(b, a)] };
                -0.5 * v
            }
            Param::Phi { .. } => 0.0,
        })
        .collect();
    let ai = wm.average_information(params, sigma_inv);
    let delta = ai.clone().cholesky()?.solve(&DVector::from_vec(score));
    let l0 = working_reml(design, mme, wm, sigma).ok()?;
    let mut step = 1.0;
    for _ in 0..12 {
        let mut next: Vec<DMatrix<f64>> = sigma.to_vec();
        for (k, &p) in params.iter().enumerate() {
            if let Param::Sigma { comp, a, b } = p {
                next[comp][(a, b)] += step * delta[k];
                if a != b {
                    next[comp][(b, a)] += step * delta[k];
                }
            }
        }
        let next: Vec<DMatrix<f64>> = next
            .iter()
            .map(|m| project_psd(m, opts.variance_floor).0)
            .collect();
        if let Ok(l) = working_reml(design, mme, wm, &next) {
            if l >= l0 - 1e-10 * (1.0 + l0.abs()) {
                return Some(next);
            }
        }
        step *= 0.5;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn build_result(
    design: &Design,
    spec: &ModelSpec,
    inner: &Inner,
    sigma: &[DMatrix<f64>],
    phi: &[f64],
    free_phi: &[bool],
    pinned: &[bool],
    convergence: Convergence,
) -> FitResult {
    let t = design.n_traits;
    let theta = &inner.theta;
    let sel = inner.factor.selected_inverse();
    let sigma_inv: Vec<DMatrix<f64>> = sigma
        .iter()
        .map(|m| sym_inverse(m).unwrap_or_else(|_| DMatrix::identity(t, t) / 1e-10))
        .collect();

    let mut params = sigma_params(design);
    for (k, &free) in free_phi.iter().enumerate() {
        if free {
            params.push(Param::Phi { trait_index: k });
        }
    }
    let wm = WorkingModel::new(design, inner, phi);
    let ai = wm.average_information(&params, &sigma_inv);
    let ai_inv = ai.clone().try_inverse();
    let estimates = params
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let estimate = match p {
                Param::Sigma { comp, a, b } => sigma[comp][(a, b)],
                Param::Phi { trait_index } => phi[trait_index],
            };
            let se = ai_inv
                .as_ref()
                .map(|m| m[(k, k)])
                .filter(|v| *v > 0.0)
                .map_or(f64::NAN, f64::sqrt);
            Estimate {
                name: param_name(design, p),
                estimate,
                se,
            }
        })
        .collect();

    let fixed_effects = design
        .fixed
        .iter()
        .enumerate()
        .map(|(col, f)| FixedEstimate {
            trait_index: f.trait_index,
            label: f.label.clone(),
            estimate: theta[col],
            se: sel.diag(col).max(0.0).sqrt(),
        })
        .collect();

    let mut blups = Vec::new();
    for comp in &design.components {
        for a in 0..t {
            for (level, name) in comp.levels.iter().enumerate() {
                let col = comp.col(a, level);
                blups.push(Blup {
                    component: comp.name.clone(),
                    level: name.clone(),
                    trait_index: a,
                    blup: theta[col],
                    pev: sel.diag(col),
                });
            }
        }
    }

    let correlations = if t == 2 {
        design
            .components
            .iter()
            .zip(sigma)
            .map(|(comp, m)| {
                let d = m[(0, 0)] * m[(1, 1)];
                Correlation {
                    component: comp.name.clone(),
                    value: (d > 0.0).then(|| m[(0, 1)] / d.sqrt()),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    FitResult {
        traits: spec
            .traits
            .iter()
            .enumerate()
            .map(|(k, tr)| if tr.name.is_empty() { format!("trait{k}") } else { tr.name.clone() })
            .collect(),
        fixed_effects,
        variance: VarianceComponents {
            names: design.components.iter().map(|c| c.name.clone()).collect(),
            sigma: sigma
                .iter()
                .map(|m| {
                    let mut v = Vec::with_capacity(t * t);
                    for a in 0..t {
                        for b in 0..t {
                            v.push(m[(a, b)]);
                        }
                    }
                    v
                })
                .collect(),
            phi: phi.to_vec(),
        },
        parameters: estimates,
        correlations,
        dispersion_fixed: free_phi.iter().map(|f| !f).collect(),
        genetic_scale: design.components.iter().map(|c| c.genetic_scale).collect(),
        pinned_at_floor: design
            .components
            .iter()
            .zip(pinned)
            .filter(|(_, p)| **p)
            .map(|(c, _)| c.name.clone())
            .collect(),
        log_quasi_likelihood: inner.state.ql,
        convergence,
        blups,
        eta: inner.state.rows.iter().map(|r| r.eta).collect(),
        theta: theta.clone(),
    }
}

/// Laplace approximation to the log quasi-likelihood with β profiled
/// out, for given covariance blocks and dispersions.
pub fn laplace_objective(
    design: &Design,
    sigma: &[DMatrix<f64>],
    phi: &[f64],
    theta0: Vec<f64>,
    opts: &FitOptions,
) -> Result<f64> {
    let sigma_inv = sigma.iter().map(sym_inverse).collect::<Result<Vec<_>>>()?;
    let mme = Mme::new(design);
    let inner = inner_irls(design, &mme, &sigma_inv, phi, theta0, opts)?;
    let log_det_sigma: f64 = design
        .components
        .iter()
        .zip(sigma)
        .map(|(comp, s)| comp.n_levels() as f64 * log_det_sym(s))
        .sum();
    Ok(inner.objective - 0.5 * log_det_sigma - 0.5 * inner.factor.log_det())
}

/// Central second difference of `f` at `(1 ± rel_step)·x`.
pub fn second_difference(
    mut f: impl FnMut(f64) -> Result<f64>,
    x: f64,
    rel_step: f64,
) -> Result<f64> {
    if !(rel_step > 0.0 && rel_step < 0.5) {
        return Err(Error::CurvatureNotEvaluable(format!(
            "relative step {rel_step} outside (0, 0.5)"
        )));
    }
    let h = rel_step * x;
    if !(h.abs() > 0.0) {
        return Err(Error::CurvatureNotEvaluable("estimate is zero".into()));
    }
    let eval = |f: &mut dyn FnMut(f64) -> Result<f64>, v: f64| {
        f(v).map_err(|e| Error::CurvatureNotEvaluable(format!("at {v}: {e}")))
    };
    let lo = eval(&mut f, x - h)?;
    let mid = eval(&mut f, x)?;
    let hi = eval(&mut f, x + h)?;
    Ok((hi - 2.0 * mid + lo) / (h * h))
}

/// Curvature of the Laplace log quasi-likelihood in one covariance
/// parameter (`name` or `name[a,b]`), other parameters held at the fit.
pub fn profile_curvature(
    design: &Design,
    fit: &FitResult,
    param: &str,
    rel_step: f64,
    opts: &FitOptions,
) -> Result<f64> {
    let (name, a, b) = match param.split_once('[') {
        Some((n, rest)) => {
            let idx: Vec<usize> = rest
                .trim_end_matches(']')
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::CurvatureNotEvaluable(format!("bad parameter `{param}`")))?;
            match idx[..] {
                [a, b] => (n, a, b),
                _ => return Err(Error::CurvatureNotEvaluable(format!("bad parameter `{param}`"))),
            }
        }
        None => (param, 0, 0),
    };
    let c = fit
        .variance
        .component(name)
        .ok_or_else(|| Error::CurvatureNotEvaluable(format!("no component `{name}`")))?;
    let t = fit.variance.n_traits();
    if a >= t || b >= t {
        return Err(Error::CurvatureNotEvaluable(format!("bad parameter `{param}`")));
    }
    let x = fit.variance.get(c, a, b);
    if a == b && x <= 10.0 * opts.variance_floor {
        return Err(Error::CurvatureNotEvaluable(format!(
            "`{param}` is at the variance floor"
        )));
    }
    let base: Vec<DMatrix<f64>> = (0..fit.variance.sigma.len()).map(|k| fit.variance.block(k)).collect();
    second_difference(
        |v| {
            let mut s = base.clone();
            s[c][(a, b)] = v;
            s[c][(b, a)] = v;
            laplace_objective(design, &s, &fit.variance.phi, fit.theta.clone(), opts)
        },
        x,
        rel_step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::{expand_continuous, expand_discrete, CutPoints, Episode, RecordSet, SurvivalRecord, TimeType};
    use crate::model::{Dispersion, RandomComponent, TraitSpec};

    fn spec(family: Family, random: Vec<(&str, Structure)>, dispersion: Dispersion) -> ModelSpec {
        ModelSpec {
            traits: vec![TraitSpec {
                name: String::new(),
                cause: 1,
                time_type: family.time_type(),
                family,
                covariates: vec![],
                stratified: false,
                dispersion,
            }],
            random: random
                .into_iter()
                .map(|(n, s)| RandomComponent {
                    name: n.into(),
                    structure: s,
                    column: n.into(),
                    genetic_scale: None,
                })
                .collect(),
        }
    }

    #[test]
    fn intercept_only_poisson_is_crude_rate() {
        let times = [3.0, 5.0, 7.5, 2.0, 9.0, 4.0];
        let causes = [1, 0, 1, 1, 0, 1];
        let records = RecordSet {
            records: times
                .iter()
                .zip(causes)
                .enumerate()
                .map(|(i, (&t, c))| SurvivalRecord {
                    id: i.to_string(),
                    time_type: TimeType::Continuous,
                    episodes: vec![Episode { t_start: 0.0, t_stop: t, stratum: 1, covariates: vec![] }],
                    cause: c,
                    clusters: vec![],
                })
                .collect(),
            ..Default::default()
        };
        let cuts = CutPoints::new(vec![0.0, 10.0]).unwrap();
        let table = expand_continuous(&records, &cuts, false, &[1]).unwrap();
        let fit = fit_pql(&table, &spec(Family::PoissonPieces, vec![], Dispersion::Fixed(1.0)), None, &FitOptions::default()).unwrap();
        let d = 4.0;
        let e: f64 = times.iter().sum();
        assert!((fit.fixed_effects[0].estimate - (d / e).ln()).abs() < 1e-10);
    }

    #[test]
    fn solve_mme_examples() {
        let id = SymCsc::identity(4);
        assert_eq!(solve_mme(&id, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let c = SymCsc::from_triplets(3, &[(0, 0, 4.0), (1, 0, 1.0), (1, 1, 3.0), (2, 1, 0.5), (2, 2, 2.0)]);
        let rhs = [1.0, 2.0, 3.0];
        let x = solve_mme(&c, &rhs).unwrap();
        let dense = c.to_dense().lu().solve(&DVector::from_row_slice(&rhs)).unwrap();
        for (a, b) in x.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = SymCsc::from_triplets(2, &[(0, 0, 1.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let err = solve_mme(&bad, &[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("MME not positive definite"));
    }

    #[test]
    fn dispersion_zero_for_perfect_fit() {
        let phi = estimate_dispersion(&[Family::PoissonApprox], &[0, 0, 0], &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &[1]);
        // μ = 0 on a y = 0 row gives 0/0; use strictly positive means.
        assert!(phi.is_err() || phi.unwrap()[0].is_nan());
        let phi = estimate_dispersion(&[Family::PoissonApprox], &[0, 0, 0], &[0.5, 0.25, 1.0], &[0.5, 0.25, 1.0], &[1]).unwrap();
        assert_eq!(phi[0], 0.0);
        let err = estimate_dispersion(&[Family::PoissonApprox], &[0], &[1.0], &[1.0], &[1]).unwrap_err();
        assert!(err.to_string().contains("insufficient residual degrees of freedom"));
    }

    #[test]
    fn quadratic_second_difference() {
        let c = second_difference(|x| Ok(-(x - 1.0) * (x - 1.0)), 1.0, 0.1).unwrap();
        assert!((c + 2.0).abs() < 1e-6);
        let err = second_difference(|x| Ok(x), 1.0, 0.6).unwrap_err();
        assert!(err.to_string().contains("curvature not evaluable"));
    }

    #[test]
    fn psd_projection_clips() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (p, clipped) = project_psd(&m, 1e-10);
        assert!(clipped);
        let eig = p.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= 1e-10 * 0.999));
    }

    fn grouped_discrete(n_groups: usize, per_group: usize, seed: u64) -> RecordSet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for g in 0..n_groups {
            let u: f64 = 0.4 * (rng.random::<f64>() - 0.5);
            for i in 0..per_group {
                let p = (0.15f64.ln() + u).exp();
                let mut t = 0;
                let mut cause = 0;
                while t < 5 {
                    t += 1;
                    if rng.random::<f64>() < p {
                        cause = 1;
                        break;
                    }
                }
                records.push(SurvivalRecord {
                    id: format!("{g}_{i}"),
                    time_type: TimeType::Discrete,
                    episodes: vec![Episode { t_start: 0.0, t_stop: t as f64, stratum: 1, covariates: vec![] }],
                    cause,
                    clusters: vec![format!("g{g}")],
                });
            }
        }
        RecordSet { cluster_names: vec!["g".into()], records, ..Default::default() }
    }

    #[test]
    fn iid_component_fit_converges() {
        let records = grouped_discrete(40, 30, 7);
        let table = expand_discrete(&records, &[1]).unwrap();
        for family in [Family::Bernoulli, Family::PoissonApprox] {
            let s = spec(family, vec![("g", Structure::Iid)], Dispersion::Fixed(1.0));
            let fit = fit_pql(&table, &s, None, &FitOptions::default()).unwrap();
            assert!(fit.convergence.converged);
            let v = fit.variance.get(0, 0, 0);
            assert!(v > 0.0 && v < 0.2, "{family:?}: {v}");
            assert!(fit.parameters[0].se > 0.0);
        }
    }

    #[test]
    fn ai_step_reaches_reml_stationary_point() {
        // At convergence the EM map is a fixed point: Σ = S/L.
        let records = grouped_discrete(30, 25, 3);
        let table = expand_discrete(&records, &[1]).unwrap();
        let s = spec(Family::PoissonApprox, vec![("g", Structure::Iid)], Dispersion::Fixed(1.0));
        let design = Design::new(&table, &s, None).unwrap();
        let fit = fit_design(&design, &s, &FitOptions::default()).unwrap();
        let sigma = vec![fit.variance.block(0)];
        let sigma_inv: Vec<_> = sigma.iter().map(|m| sym_inverse(m).unwrap()).collect();
        let mme = Mme::new(&design);
        let inner = inner_irls(&design, &mme, &sigma_inv, &fit.variance.phi, fit.theta.clone(), &FitOptions::default()).unwrap();
        let wm = WorkingModel::new(&design, &inner, &fit.variance.phi);
        let em = wm.s_matrices()[0][(0, 0)] / design.components[0].n_levels() as f64;
        assert!((em - sigma[0][(0, 0)]).abs() < 1e-6 * sigma[0][(0, 0)]);
    }

    #[test]
    fn thread_count_does_not_change_fit() {
        let records = grouped_discrete(40, 30, 11);
        let table = expand_discrete(&records, &[1]).unwrap();
        let s = spec(Family::Bernoulli, vec![("g", Structure::Iid)], Dispersion::Free(true));
        let a = par::with_threads(1, || fit_pql(&table, &s, None, &FitOptions::default()).unwrap());
        let b = par::with_threads(4, || fit_pql(&table, &s, None, &FitOptions::default()).unwrap());
        assert_eq!(a, b);
    }
}

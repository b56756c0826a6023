//! Command-line pipeline: config loading, subcommands and exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::{
    check_poisson_conditions, expand_continuous, expand_discrete, make_cutpoints, CutPoints,
    CutStrategy, Episode, ExpansionSummary, PoissonDiagnostics, PseudoTable, RecordSet,
    SurvivalRecord, TimeType,
};
use crate::genetics::heritability_report;
use crate::inference::{fit_design, profile_curvature, Design, FitOptions, FitResult};
use crate::model::{Dispersion, Family, ModelSpec, Structure, TraitSpec, VarianceComponents};
use crate::nonparam::{cumulative_incidence, kaplan_meier, log_cumhaz_stratified, observations};
use crate::par;
use crate::pedigree::{load_pedigree, Pedigree};
use crate::report::to_json;
use crate::simulate::{simulate_pedigree, simulate_survival, SimulationSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Expand,
    Fit,
    H2,
    Km,
    Cif,
    Diag,
    Simulate,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "longhaz", version, about = "Mixed survival models for longevity genetics")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pedigree: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub fix_dispersion: Option<f64>,
}

/// One data file for all traits, or one per trait name.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Single(PathBuf),
    PerTrait(BTreeMap<String, PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H2Config {
    /// Evaluation time; defaults to the Kaplan–Meier median.
    pub t_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagConfig {
    /// Component name, or `name[a,b]`; defaults to the first genetic one.
    #[serde(default)]
    pub parameter: Option<String>,
    #[serde(default = "default_rel_step")]
    pub rel_step: f64,
    /// Period length turning continuous times into discrete periods.
    pub period_length: f64,
    #[serde(default = "default_discrete_family")]
    pub discrete_family: Family,
    /// Estimate φ in both fits instead of comparing likelihoods at φ = 1.
    #[serde(default)]
    pub free_dispersion: bool,
}

fn default_rel_step() -> f64 {
    0.1
}

fn default_discrete_family() -> Family {
    Family::PoissonApprox
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_sires: usize,
    pub daughters_per_sire: usize,
    pub truth: SimulationSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub pedigree: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub cuts: CutStrategy,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub h2: H2Config,
    #[serde(default)]
    pub diag: Option<DiagConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_seed() -> u64 {
    1
}

/// A config with paths resolved against its directory and CLI overrides
/// applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn load(args: &Args) -> Result<Self> {
        let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        let base = args.config.parent().unwrap_or(Path::new("")).to_path_buf();
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        config.data = match (args.data.clone(), config.data.take()) {
            (Some(p), _) => Some(DataSource::Single(p)),
            (None, Some(DataSource::Single(p))) => Some(DataSource::Single(resolve(p))),
            (None, Some(DataSource::PerTrait(m))) => Some(DataSource::PerTrait(
                m.into_iter().map(|(k, p)| (k, resolve(p))).collect(),
            )),
            (None, None) => None,
        };
        config.pedigree = args.pedigree.clone().or(config.pedigree.take().map(resolve));
        let out = args
            .out
            .clone()
            .or(config.out.take().map(resolve))
            .unwrap_or_else(|| base.join("out"));
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(phi) = args.fix_dispersion {
            config.fit.fix_dispersion = Some(phi);
        }
        if let Some(m) = &config.model {
            m.validate()?;
        }
        Ok(Run { config, out })
    }

    pub fn model(&self) -> Result<&ModelSpec> {
        self.config
            .model
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("config has no `model`".into()))
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn data_path(&self, trait_name: &str) -> Result<PathBuf> {
        match &self.config.data {
            Some(DataSource::Single(p)) => Ok(p.clone()),
            Some(DataSource::PerTrait(m)) => m.get(trait_name).cloned().ok_or_else(|| {
                Error::InvalidSpec(format!("no data file for trait `{trait_name}`"))
            }),
            None => Err(Error::InvalidSpec("config has no `data`".into())),
        }
    }

    fn pedigree(&self, spec: &ModelSpec) -> Result<Option<Pedigree>> {
        if !spec.random.iter().any(|r| r.structure == Structure::Pedigree) {
            return Ok(None);
        }
        let path = self.config.pedigree.as_ref().ok_or_else(|| {
            Error::InvalidSpec("a pedigree component needs `pedigree`".into())
        })?;
        load_pedigree(path).map(Some)
    }
}

fn trait_name(spec: &TraitSpec, index: usize) -> String {
    if spec.name.is_empty() {
        format!("trait{index}")
    } else {
        spec.name.clone()
    }
}

/// Data, cut points and the stacked pseudo-table for every trait.
pub struct Loaded {
    pub sources: Vec<(PathBuf, RecordSet)>,
    /// Index into `sources` per trait.
    pub source_of: Vec<usize>,
    pub cuts: Vec<Option<CutPoints>>,
    pub table: PseudoTable,
}

impl Loaded {
    pub fn records(&self, trait_index: usize) -> &RecordSet {
        &self.sources[self.source_of[trait_index]].1
    }
}

fn read_records(path: &Path, time_type: TimeType, covariates: &[String], clusters: &[String]) -> Result<RecordSet> {
    match time_type {
        TimeType::Continuous => RecordSet::read_continuous(path, covariates, clusters),
        TimeType::Discrete => RecordSet::read_discrete(path, covariates, clusters),
    }
}

pub fn load_data(run: &Run, spec: &ModelSpec) -> Result<Loaded> {
    let clusters = spec.cluster_names();
    let mut keys: Vec<(PathBuf, TimeType)> = Vec::new();
    let mut source_of = Vec::new();
    let mut covs: Vec<Vec<String>> = Vec::new();
    for (t, tr) in spec.traits.iter().enumerate() {
        let key = (run.data_path(&trait_name(tr, t))?, tr.time_type);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                covs.push(Vec::new());
                keys.len() - 1
            }
        };
        for c in &tr.covariates {
            if !covs[idx].contains(c) {
                covs[idx].push(c.clone());
            }
        }
        source_of.push(idx);
    }
    let sources = keys
        .into_iter()
        .zip(&covs)
        .map(|((path, tt), cov)| read_records(&path, tt, cov, &clusters).map(|r| (path, r)))
        .collect::<Result<Vec<_>>>()?;

    let mut cuts = Vec::with_capacity(spec.traits.len());
    let mut parts = Vec::with_capacity(spec.traits.len());
    for (t, tr) in spec.traits.iter().enumerate() {
        let records = &sources[source_of[t]].1;
        let part = match tr.time_type {
            TimeType::Continuous => {
                let c = make_cutpoints(records, &run.config.cuts, tr.stratified)?;
                let table = expand_continuous(records, &c, tr.stratified, &[tr.cause])?;
                cuts.push(Some(c));
                table
            }
            TimeType::Discrete => {
                cuts.push(None);
                expand_discrete(records, &[tr.cause])?
            }
        };
        parts.push(part.select_cause(tr.cause, t as u8));
    }
    Ok(Loaded {
        sources,
        source_of,
        cuts,
        table: PseudoTable::stack(parts),
    })
}

/// Crude hazard probability of each row's risk set.
fn crude_probabilities(table: &PseudoTable) -> Vec<f64> {
    let mut groups: BTreeMap<(u8, u32, u32), (f64, f64)> = BTreeMap::new();
    for r in 0..table.len() {
        let g = groups
            .entry((table.trait_idx[r], table.stratum[r], table.k[r]))
            .or_insert((0.0, 0.0));
        g.0 += table.y[r];
        g.1 += 1.0;
    }
    (0..table.len())
        .map(|r| {
            let g = groups[&(table.trait_idx[r], table.stratum[r], table.k[r])];
            g.0 / g.1
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ExpansionReport<'a> {
    summary: ExpansionSummary,
    cut_points: &'a [Option<CutPoints>],
    poisson_conditions: Option<PoissonDiagnostics>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_expand(run: &Run) -> Result<()> {
    let spec = run.model()?;
    let loaded = load_data(run, spec)?;
    loaded.table.write_csv(run.out_path("pseudo.csv")?)?;
    let approx = spec.traits.iter().any(|t| t.family == Family::PoissonApprox);
    let report = ExpansionReport {
        summary: loaded.table.summary(),
        cut_points: &loaded.cuts,
        poisson_conditions: approx
            .then(|| check_poisson_conditions(&loaded.table, &crude_probabilities(&loaded.table))),
    };
    write_text(&run.out_path("expansion.json")?, &to_json(&report)?)?;
    let intervals: Vec<String> = loaded
        .cuts
        .iter()
        .map(|c| c.as_ref().map_or("periods".into(), |c| (c.default.len() - 1).to_string()))
        .collect();
    let events: Vec<String> = report
        .summary
        .events_per_cause
        .iter()
        .map(|(c, n)| format!("cause {c}: {n}"))
        .collect();
    println!(
        "expanded {} individuals into {} rows in {} risk sets; events {}; intervals per trait: {}",
        report.summary.individuals,
        report.summary.rows,
        report.summary.risk_sets.len(),
        events.join(", "),
        intervals.join(", ")
    );
    Ok(())
}

/// Full-precision fit state consumed by `h2`.
#[derive(Debug, Serialize, Deserialize)]
struct FitState {
    theta: Vec<f64>,
    variance: VarianceComponents,
    traits: Vec<String>,
}

const FIT_STATE: &str = "fit_state.json";

/// Writes the report, BLUPs and state; non-convergence still writes them.
pub fn cmd_fit(run: &Run) -> Result<FitResult> {
    let spec = run.model()?;
    let loaded = load_data(run, spec)?;
    let ped = run.pedigree(spec)?;
    let design = Design::new(&loaded.table, spec, ped.as_ref())?;
    let (fit, converged) = match fit_design(&design, spec, &run.config.fit) {
        Ok(f) => (f, true),
        Err(Error::DidNotConverge(f)) => (*f, false),
        Err(e) => return Err(e),
    };
    write_text(&run.out_path("fit.json")?, &to_json(&fit)?)?;
    fit.write_blups(run.out_path("blups.csv")?)?;
    let state = FitState {
        theta: fit.theta.clone(),
        variance: fit.variance.clone(),
        traits: fit.traits.clone(),
    };
    let mut text = serde_json::to_string(&state)?;
    text.push('\n');
    write_text(&run.out_path(FIT_STATE)?, &text)?;
    for (t, name) in fit.traits.iter().enumerate() {
        println!("trait {name}: phi = {}", crate::report::format_sig(fit.variance.phi[t]));
    }
    for p in &fit.parameters {
        println!(
            "{} = {} (se {})",
            p.name,
            crate::report::format_sig(p.estimate),
            crate::report::format_sig(p.se)
        );
    }
    if converged {
        Ok(fit)
    } else {
        Err(Error::DidNotConverge(Box::new(fit)))
    }
}

pub fn cmd_h2(run: &Run) -> Result<()> {
    let spec = run.model()?;
    let state_path = run.out.join(FIT_STATE);
    if !state_path.exists() {
        return Err(Error::MissingPrerequisite {
            path: state_path,
            hint: "run `longhaz fit` with this config first".into(),
        });
    }
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: FitState = serde_json::from_str(&text)?;
    let loaded = load_data(run, spec)?;
    let ped = run.pedigree(spec)?;
    let design = Design::new(&loaded.table, spec, ped.as_ref())?;
    if state.theta.len() != design.dim {
        return Err(Error::MissingPrerequisite {
            path: state_path,
            hint: "fit state does not match the data; rerun `longhaz fit`".into(),
        });
    }
    let eta = design.eta(&state.theta);
    let records: Vec<&RecordSet> = (0..spec.traits.len()).map(|t| loaded.records(t)).collect();
    let report = heritability_report(
        &eta,
        &state.variance,
        spec,
        &state.traits,
        &loaded.table,
        &records,
        &loaded.cuts,
        run.config.h2.t_m,
    )?;
    write_text(&run.out_path("h2.json")?, &to_json(&report)?)?;
    for t in &report.traits {
        println!(
            "trait {}: t_m = {}, h2 hazard = {}, h2 cumulative = {}",
            t.name,
            crate::report::format_sig(t.t_m),
            crate::report::format_sig(t.h2_hazard),
            crate::report::format_sig(t.h2_cumulative)
        );
    }
    Ok(())
}

/// Raw data sources named by file stem, for the descriptive commands.
fn descriptive_sources(run: &Run) -> Result<Vec<(String, RecordSet)>> {
    let spec = run.model()?;
    let loaded = load_data(run, spec)?;
    let single = loaded.sources.len() == 1;
    Ok(loaded
        .sources
        .into_iter()
        .map(|(path, rs)| {
            let label = if single {
                String::new()
            } else {
                format!(
                    "_{}",
                    path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned())
                )
            };
            (label, rs)
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct KmSummary {
    source: String,
    individuals: usize,
    events: usize,
    median: Option<f64>,
    median_lower: Option<f64>,
    median_upper: Option<f64>,
}

pub fn cmd_km(run: &Run) -> Result<()> {
    let mut summaries = Vec::new();
    for (label, rs) in descriptive_sources(run)? {
        let obs = observations(&rs, None);
        let km = kaplan_meier(&obs);
        km.curve.write_csv(run.out_path(&format!("km{label}.csv"))?)?;
        if rs.time_type() == Some(TimeType::Continuous) {
            for (stratum, curve) in log_cumhaz_stratified(&rs) {
                curve.write_csv(run.out_path(&format!("log_cumhaz{label}_stratum{stratum}.csv"))?)?;
            }
        }
        let fmt = |v: Option<f64>| v.map_or("NA".into(), crate::report::format_sig);
        println!(
            "median{label}: {} (95% CI {}; {})",
            fmt(km.median),
            fmt(km.median_lower),
            fmt(km.median_upper)
        );
        summaries.push(KmSummary {
            source: label.trim_start_matches('_').to_string(),
            individuals: obs.len(),
            events: obs.iter().filter(|o| o.cause != 0).count(),
            median: km.median,
            median_lower: km.median_lower,
            median_upper: km.median_upper,
        });
    }
    write_text(&run.out_path("km.json")?, &to_json(&summaries)?)
}

#[derive(Debug, Serialize)]
struct CifSummary {
    source: String,
    /// Final value per cause.
    final_incidence: BTreeMap<String, f64>,
    final_survival: f64,
}

pub fn cmd_cif(run: &Run) -> Result<()> {
    let mut summaries = Vec::new();
    for (label, rs) in descriptive_sources(run)? {
        let cif = cumulative_incidence(&observations(&rs, None));
        let mut finals = BTreeMap::new();
        for (cause, curve) in &cif.curves {
            curve.write_csv(run.out_path(&format!("cif{label}_cause{cause}.csv"))?)?;
            finals.insert(cause.to_string(), curve.values.last().copied().unwrap_or(0.0));
            println!(
                "cause {cause}{label}: final incidence {}",
                crate::report::format_sig(curve.values.last().copied().unwrap_or(0.0))
            );
        }
        summaries.push(CifSummary {
            source: label.trim_start_matches('_').to_string(),
            final_incidence: finals,
            final_survival: cif.survival.values.last().copied().unwrap_or(1.0),
        });
    }
    write_text(&run.out_path("cif.json")?, &to_json(&summaries)?)
}

/// Continuous records mapped to discrete periods of length `period`:
/// events fall in period `⌈T/L⌉`, censored records keep `⌊T/L⌋` whole
/// periods.
pub fn discretize(records: &RecordSet, period: f64) -> Result<RecordSet> {
    if !(period > 0.0) {
        return Err(Error::InvalidSpec("period length must be positive".into()));
    }
    let out = records
        .records
        .iter()
        .map(|r| {
            let t = r.exit_time() / period;
            let periods = if r.is_event() { t.ceil() } else { t.floor() };
            SurvivalRecord {
                id: r.id.clone(),
                time_type: TimeType::Discrete,
                episodes: vec![Episode {
                    t_start: 0.0,
                    t_stop: periods,
                    stratum: 1,
                    covariates: r.episodes[0].covariates.clone(),
                }],
                cause: r.cause,
                clusters: r.clusters.clone(),
            }
        })
        .collect();
    Ok(RecordSet {
        covariate_names: records.covariate_names.clone(),
        cluster_names: records.cluster_names.clone(),
        records: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvatureSide {
    pub family: Family,
    pub estimate: f64,
    pub phi: f64,
    pub curvature: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvatureComparison {
    pub parameter: String,
    pub rel_step: f64,
    pub censored_fraction: f64,
    pub continuous: CurvatureSide,
    pub discrete: CurvatureSide,
    /// |discrete| / |continuous|.
    pub ratio: f64,
}

fn fit_and_curvature(
    table: &PseudoTable,
    spec: &ModelSpec,
    ped: Option<&Pedigree>,
    parameter: &str,
    rel_step: f64,
    opts: &FitOptions,
) -> Result<CurvatureSide> {
    let design = Design::new(table, spec, ped)?;
    let (fit, converged) = match fit_design(&design, spec, opts) {
        Ok(f) => (f, true),
        Err(Error::DidNotConverge(f)) => (*f, false),
        Err(e) => return Err(e),
    };
    let c = fit
        .variance
        .component(parameter.split('[').next().unwrap_or(parameter))
        .ok_or_else(|| Error::CurvatureNotEvaluable(format!("no component `{parameter}`")))?;
    Ok(CurvatureSide {
        family: spec.traits[0].family,
        estimate: fit.variance.get(c, 0, 0),
        phi: fit.variance.phi[0],
        curvature: profile_curvature(&design, &fit, parameter, rel_step, opts)?,
        converged,
    })
}

/// Curvature of the support in one variance parameter under the
/// continuous model of `records` and its discretized counterpart.
pub fn compare_curvature(
    records: &RecordSet,
    trait_spec: &TraitSpec,
    spec: &ModelSpec,
    ped: Option<&Pedigree>,
    cuts: &CutStrategy,
    diag: &DiagConfig,
    opts: &FitOptions,
) -> Result<CurvatureComparison> {
    if trait_spec.time_type != TimeType::Continuous {
        return Err(Error::InvalidSpec("diag needs a continuous first trait".into()));
    }
    let parameter = match &diag.parameter {
        Some(p) => p.clone(),
        None => spec
            .random
            .iter()
            .find(|r| r.is_genetic())
            .or(spec.random.first())
            .map(|r| r.name.clone())
            .ok_or_else(|| Error::CurvatureNotEvaluable("model has no random component".into()))?,
    };
    let dispersion = if diag.free_dispersion {
        trait_spec.dispersion
    } else {
        Dispersion::Fixed(1.0)
    };
    let ctm_spec = ModelSpec {
        traits: vec![TraitSpec {
            dispersion,
            ..trait_spec.clone()
        }],
        random: spec.random.clone(),
    };
    let c = make_cutpoints(records, cuts, trait_spec.stratified)?;
    let ctm_table = expand_continuous(records, &c, trait_spec.stratified, &[trait_spec.cause])?
        .select_cause(trait_spec.cause, 0);
    let continuous = fit_and_curvature(&ctm_table, &ctm_spec, ped, &parameter, diag.rel_step, opts)?;

    let discrete_records = discretize(records, diag.period_length)?;
    let dtm_spec = ModelSpec {
        traits: vec![TraitSpec {
            time_type: TimeType::Discrete,
            family: diag.discrete_family,
            stratified: false,
            dispersion,
            ..trait_spec.clone()
        }],
        random: spec.random.clone(),
    };
    let dtm_table = expand_discrete(&discrete_records, &[trait_spec.cause])?
        .select_cause(trait_spec.cause, 0);
    let discrete = fit_and_curvature(&dtm_table, &dtm_spec, ped, &parameter, diag.rel_step, opts)?;

    let censored = records.records.iter().filter(|r| !r.is_event()).count();
    Ok(CurvatureComparison {
        ratio: discrete.curvature.abs() / continuous.curvature.abs(),
        parameter,
        rel_step: diag.rel_step,
        censored_fraction: censored as f64 / records.records.len().max(1) as f64,
        continuous,
        discrete,
    })
}

pub fn cmd_diag(run: &Run) -> Result<()> {
    let spec = run.model()?;
    let diag = run
        .config
        .diag
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("config has no `diag` section".into()))?;
    let tr = &spec.traits[0];
    let path = run.data_path(&trait_name(tr, 0))?;
    let mut covariates = tr.covariates.clone();
    covariates.dedup();
    let records = read_records(&path, tr.time_type, &covariates, &spec.cluster_names())?;
    let ped = run.pedigree(spec)?;
    let cmp = compare_curvature(&records, tr, spec, ped.as_ref(), &run.config.cuts, diag, &run.config.fit)?;
    write_text(&run.out_path("diag.json")?, &to_json(&cmp)?)?;
    println!(
        "censored fraction {}; curvature continuous {}, discrete {}; curvature ratio |DTM|/|CTM| = {}",
        crate::report::format_sig(cmp.censored_fraction),
        crate::report::format_sig(cmp.continuous.curvature),
        crate::report::format_sig(cmp.discrete.curvature),
        crate::report::format_sig(cmp.ratio)
    );
    Ok(())
}

pub fn cmd_simulate(run: &Run) -> Result<()> {
    let sim = run
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("config has no `simulate` section".into()))?;
    if sim.n_sires == 0 || sim.daughters_per_sire == 0 {
        return Err(Error::InvalidSpec("sire and daughter counts must be at least 1".into()));
    }
    let ped = simulate_pedigree(sim.n_sires, sim.daughters_per_sire)?;
    let (records, truth) = simulate_survival(&ped, &sim.truth, run.config.seed)?;
    ped.write_csv(run.out_path("pedigree.csv")?)?;
    records.write_csv(run.out_path("data.csv")?)?;
    truth.write_json(run.out_path("truth.json")?)?;
    let events = records.records.iter().filter(|r| r.is_event()).count();
    println!(
        "simulated {} records ({} events) under {} sires, seed {}",
        records.records.len(),
        events,
        sim.n_sires,
        run.config.seed
    );
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DidNotConverge(_) => EXIT_NOT_CONVERGED,
        Error::MissingPrerequisite { .. } => EXIT_MISSING,
        _ => EXIT_INPUT,
    }
}

pub fn dispatch(command: Command, run: &Run) -> Result<()> {
    match command {
        Command::Expand => cmd_expand(run),
        Command::Fit => cmd_fit(run).map(|_| ()),
        Command::H2 => cmd_h2(run),
        Command::Km => cmd_km(run),
        Command::Cif => cmd_cif(run),
        Command::Diag => cmd_diag(run),
        Command::Simulate => cmd_simulate(run),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(args: &Args) -> i32 {
    let result = Run::load(args).and_then(|run| match args.threads {
        Some(n) => par::with_threads(n, || dispatch(args.command, &run)),
        None => dispatch(args.command, &run),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

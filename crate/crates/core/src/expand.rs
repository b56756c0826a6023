//! Survival records and their expansion into pseudo-observation tables.
//!
//! Continuous records become one Poisson row per (stratum, interval)
//! overlapped while at risk, carrying the log exposure as offset.
//! Discrete records become one Bernoulli row per survived period.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Marks the stratum of rows produced without stratification.
pub const POOLED_STRATUM: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeType {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub t_start: f64,
    pub t_stop: f64,
    pub stratum: u32,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub id: String,
    pub time_type: TimeType,
    pub episodes: Vec<Episode>,
    /// 0 = censored.
    pub cause: u8,
    pub clusters: Vec<String>,
}

impl SurvivalRecord {
    pub fn exit_time(&self) -> f64 {
        self.episodes.last().map_or(0.0, |e| e.t_stop)
    }

    pub fn is_event(&self) -> bool {
        self.cause != 0
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidRecord {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .episodes
            .first()
            .ok_or_else(|| self.invalid("no episodes"))?;
        if first.t_start != 0.0 {
            return Err(self.invalid("first episode must start at 0"));
        }
        let mut prev_stop = 0.0;
        let mut seen_strata: Vec<u32> = Vec::new();
        for e in &self.episodes {
            if !(e.t_start.is_finite() && e.t_stop.is_finite()) {
                return Err(self.invalid("non-finite time"));
            }
            if e.t_start != prev_stop {
                return Err(self.invalid("episodes are not contiguous"));
            }
            if e.t_stop < e.t_start {
                return Err(self.invalid("episode ends before it starts"));
            }
            if self.time_type == TimeType::Discrete && e.t_stop.fract() != 0.0 {
                return Err(self.invalid("discrete time must be an integer"));
            }
            if seen_strata.last() != Some(&e.stratum) {
                if seen_strata.contains(&e.stratum) {
                    return Err(self.invalid("stratum re-entered"));
                }
                seen_strata.push(e.stratum);
            }
            prev_stop = e.t_stop;
        }
        if self.is_event() && self.exit_time() <= 0.0 {
            return Err(Error::EventAtTimeZero(self.id.clone()));
        }
        Ok(())
    }

    /// `(stratum, entry time)` for each stratum visited, in order.
    pub fn stratum_entries(&self) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = Vec::new();
        for e in &self.episodes {
            if out.last().map(|s| s.0) != Some(e.stratum) {
                out.push((e.stratum, e.t_start));
            }
        }
        out
    }

    /// Exit time on the clock of the last stratum entered.
    pub fn local_exit(&self, stratified: bool) -> (u32, f64) {
        let last = self.episodes.last().expect("validated record");
        if !stratified {
            return (POOLED_STRATUM, last.t_stop);
        }
        let entry = self
            .stratum_entries()
            .last()
            .map_or(0.0, |&(_, t)| t);
        (last.stratum, last.t_stop - entry)
    }
}

/// Records sharing covariate and cluster column layouts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordSet {
    pub covariate_names: Vec<String>,
    pub cluster_names: Vec<String>,
    pub records: Vec<SurvivalRecord>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::ColumnNotFound(name.to_string()))
}

fn parse_f64(id: &str, field: &str, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::InvalidRecord {
        id: id.to_string(),
        reason: format!("cannot parse {what} `{field}`"),
    })
}

fn parse_cause(id: &str, field: &str) -> Result<u8> {
    match field.trim() {
        "0" | "" => Ok(0),
        "1" => Ok(1),
        "2" => Ok(2),
        other => Err(Error::InvalidRecord {
            id: id.to_string(),
            reason: format!("cause must be 0, 1 or 2, got `{other}`"),
        }),
    }
}

struct Columns {
    covariates: Vec<usize>,
    clusters: Vec<usize>,
}

fn extra_columns(
    headers: &csv::StringRecord,
    covariates: &[String],
    clusters: &[String],
) -> Result<Columns> {
    Ok(Columns {
        covariates: covariates
            .iter()
            .map(|c| column(headers, c))
            .collect::<Result<_>>()?,
        clusters: clusters
            .iter()
            .map(|c| column(headers, c))
            .collect::<Result<_>>()?,
    })
}

impl RecordSet {
    /// Episode-format CSV: `id,tstart,tstop,stratum,cause,...`.
    pub fn read_continuous(
        path: impl AsRef<Path>,
        covariates: &[String],
        clusters: &[String],
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let id_col = column(&headers, "id")?;
        let start_col = column(&headers, "tstart")?;
        let stop_col = column(&headers, "tstop")?;
        let stratum_col = column(&headers, "stratum")?;
        let cause_col = column(&headers, "cause")?;
        let cols = extra_columns(&headers, covariates, clusters)?;

        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<(Episode, u8, Vec<String>)>> = HashMap::new();
        for row in reader.records() {
            let row = row?;
            let id = row[id_col].to_string();
            let stratum = row[stratum_col].trim();
            let stratum = if stratum.is_empty() {
                1
            } else {
                stratum.parse::<u32>().map_err(|_| Error::InvalidRecord {
                    id: id.clone(),
                    reason: format!("cannot parse stratum `{stratum}`"),
                })?
            };
            let episode = Episode {
                t_start: parse_f64(&id, &row[start_col], "tstart")?,
                t_stop: parse_f64(&id, &row[stop_col], "tstop")?,
                stratum,
                covariates: cols
                    .covariates
                    .iter()
                    .map(|&c| parse_f64(&id, &row[c], "covariate"))
                    .collect::<Result<_>>()?,
            };
            let cause = parse_cause(&id, &row[cause_col])?;
            let cl = cols.clusters.iter().map(|&c| row[c].to_string()).collect();
            grouped
                .entry(id.clone())
                .or_insert_with(|| {
                    order.push(id.clone());
                    Vec::new()
                })
                .push((episode, cause, cl));
        }

        let mut records = Vec::with_capacity(order.len());
        for id in order {
            let mut eps = grouped.remove(&id).expect("grouped id");
            eps.sort_by(|a, b| a.0.t_start.total_cmp(&b.0.t_start));
            let n = eps.len();
            let clusters = eps[0].2.clone();
            let mut cause = 0;
            for (k, (_, c, cl)) in eps.iter().enumerate() {
                if *cl != clusters {
                    return Err(Error::InvalidRecord {
                        id,
                        reason: "cluster membership changes between episodes".into(),
                    });
                }
                if k + 1 < n && *c != 0 {
                    return Err(Error::InvalidRecord {
                        id,
                        reason: "event cause on a non-final episode".into(),
                    });
                }
                cause = *c;
            }
            let rec = SurvivalRecord {
                id,
                time_type: TimeType::Continuous,
                episodes: eps.into_iter().map(|e| e.0).collect(),
                cause,
                clusters,
            };
            rec.validate()?;
            records.push(rec);
        }
        Ok(RecordSet {
            covariate_names: covariates.to_vec(),
            cluster_names: clusters.to_vec(),
            records,
        })
    }

    /// One row per individual: `id,time,cause,...`.
    pub fn read_discrete(
        path: impl AsRef<Path>,
        covariates: &[String],
        clusters: &[String],
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let id_col = column(&headers, "id")?;
        let time_col = column(&headers, "time")?;
        let cause_col = column(&headers, "cause")?;
        let cols = extra_columns(&headers, covariates, clusters)?;
        let mut seen = std::collections::HashSet::new();
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let id = row[id_col].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateIndividual(id));
            }
            let time = parse_f64(&id, &row[time_col], "time")?;
            let rec = SurvivalRecord {
                time_type: TimeType::Discrete,
                episodes: vec![Episode {
                    t_start: 0.0,
                    t_stop: time,
                    stratum: 1,
                    covariates: cols
                        .covariates
                        .iter()
                        .map(|&c| parse_f64(&id, &row[c], "covariate"))
                        .collect::<Result<_>>()?,
                }],
                cause: parse_cause(&id, &row[cause_col])?,
                clusters: cols.clusters.iter().map(|&c| row[c].to_string()).collect(),
                id,
            };
            rec.validate()?;
            records.push(rec);
        }
        Ok(RecordSet {
            covariate_names: covariates.to_vec(),
            cluster_names: clusters.to_vec(),
            records,
        })
    }

    pub fn time_type(&self) -> Option<TimeType> {
        self.records.first().map(|r| r.time_type)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let discrete = self.time_type() == Some(TimeType::Discrete);
        let mut header: Vec<String> = if discrete {
            vec!["id".into(), "time".into(), "cause".into()]
        } else {
            ["id", "tstart", "tstop", "stratum", "cause"]
                .map(String::from)
                .to_vec()
        };
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.cluster_names.iter().cloned());
        w.write_record(&header)?;
        for rec in &self.records {
            let n = rec.episodes.len();
            for (k, e) in rec.episodes.iter().enumerate() {
                let cause = if k + 1 == n { rec.cause } else { 0 };
                let mut fields: Vec<String> = if discrete {
                    vec![rec.id.clone(), fmt_num(e.t_stop), cause.to_string()]
                } else {
                    vec![
                        rec.id.clone(),
                        fmt_num(e.t_start),
                        fmt_num(e.t_stop),
                        e.stratum.to_string(),
                        cause.to_string(),
                    ]
                };
                fields.extend(e.covariates.iter().map(|&v| fmt_num(v)));
                fields.extend(rec.clusters.iter().cloned());
                w.write_record(&fields)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Interval boundaries `0 = t₀ < … < τ`, optionally one set per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPoints {
    pub default: Vec<f64>,
    #[serde(default)]
    pub by_stratum: BTreeMap<u32, Vec<f64>>,
}

fn validate_boundaries(b: &[f64]) -> Result<()> {
    if b.len() < 2 {
        return Err(Error::InvalidCutPoints("need at least two boundaries".into()));
    }
    if b[0] != 0.0 {
        return Err(Error::InvalidCutPoints("first boundary must be 0".into()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCutPoints("non-finite boundary".into()));
    }
    if b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidCutPoints(format!(
            "boundaries must be strictly increasing: {b:?}"
        )));
    }
    Ok(())
}

impl CutPoints {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        validate_boundaries(&boundaries)?;
        Ok(CutPoints {
            default: boundaries,
            by_stratum: BTreeMap::new(),
        })
    }

    pub fn with_stratum(mut self, stratum: u32, boundaries: Vec<f64>) -> Result<Self> {
        validate_boundaries(&boundaries)?;
        self.by_stratum.insert(stratum, boundaries);
        Ok(self)
    }

    pub fn for_stratum(&self, stratum: u32) -> &[f64] {
        self.by_stratum.get(&stratum).unwrap_or(&self.default)
    }

    pub fn validate(&self) -> Result<()> {
        validate_boundaries(&self.default)?;
        self.by_stratum.values().try_for_each(|b| validate_boundaries(b))
    }

    pub fn n_intervals(&self, stratum: u32) -> usize {
        self.for_stratum(stratum).len() - 1
    }

    /// 0-based interval holding `t` under the `(t_k, t_{k+1}]` rule used
    /// for event times; `t = 0` maps to the first interval.
    pub fn interval_of(&self, stratum: u32, t: f64) -> Option<usize> {
        let b = self.for_stratum(stratum);
        if t < 0.0 || t > *b.last()? {
            return None;
        }
        let k = b.partition_point(|&c| c < t);
        Some(k.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutStrategy {
    Quantile { k: usize },
    Explicit(Vec<f64>),
}

impl Default for CutStrategy {
    fn default() -> Self {
        CutStrategy::Quantile { k: 10 }
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn quantile_boundaries(events: &mut [f64], k: usize, max_time: f64) -> Result<Vec<f64>> {
    if events.is_empty() {
        return Err(Error::NoEventsForQuantile);
    }
    events.sort_by(f64::total_cmp);
    let mut b = vec![0.0];
    for j in 1..=k {
        let q = quantile_sorted(events, j as f64 / k as f64);
        if q > *b.last().unwrap() {
            b.push(q);
        }
    }
    if b.len() == 1 {
        b.push(max_time.max(f64::MIN_POSITIVE));
    }
    let last = b.last_mut().unwrap();
    if *last < max_time {
        *last = max_time;
    }
    Ok(b)
}

/// Cut points from event-time quantiles or a validated explicit list.
///
/// With `stratified`, quantiles are computed per stratum on the
/// stratum-local clock; the default set pools all strata.
pub fn make_cutpoints(
    records: &RecordSet,
    strategy: &CutStrategy,
    stratified: bool,
) -> Result<CutPoints> {
    let mut events: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut max_time: BTreeMap<u32, f64> = BTreeMap::new();
    for rec in &records.records {
        if stratified {
            for (p, entry, exit) in stratum_spans(rec) {
                let m = max_time.entry(p).or_insert(0.0);
                *m = m.max(exit - entry);
            }
        } else {
            let m = max_time.entry(POOLED_STRATUM).or_insert(0.0);
            *m = m.max(rec.exit_time());
        }
        if rec.is_event() {
            let (p, t) = rec.local_exit(stratified);
            events.entry(p).or_default().push(t);
        }
    }
    let overall_max = max_time.values().copied().fold(0.0, f64::max);
    match strategy {
        CutStrategy::Explicit(list) => {
            validate_boundaries(list)?;
            if *list.last().unwrap() < overall_max {
                return Err(Error::InvalidCutPoints(format!(
                    "final boundary {} is below the largest observed time {}",
                    list.last().unwrap(),
                    overall_max
                )));
            }
            CutPoints::new(list.clone())
        }
        CutStrategy::Quantile { k } => {
            if *k == 0 {
                return Err(Error::InvalidCutPoints("K must be at least 1".into()));
            }
            let mut pooled: Vec<f64> = events.values().flatten().copied().collect();
            let mut cuts = CutPoints::new(quantile_boundaries(&mut pooled, *k, overall_max)?)?;
            if stratified {
                for (p, max_p) in &max_time {
                    match events.get_mut(p) {
                        Some(ev) => {
                            let b = quantile_boundaries(ev, *k, *max_p)?;
                            cuts = cuts.with_stratum(*p, b)?;
                        }
                        None => log::warn!("stratum {p} has no events; using pooled cut points"),
                    }
                }
            }
            Ok(cuts)
        }
    }
}

/// `(stratum, entry, exit)` spans on the global clock.
fn stratum_spans(rec: &SurvivalRecord) -> Vec<(u32, f64, f64)> {
    let mut out: Vec<(u32, f64, f64)> = Vec::new();
    for e in &rec.episodes {
        match out.last_mut() {
            Some(last) if last.0 == e.stratum => last.2 = e.t_stop,
            _ => out.push((e.stratum, e.t_start, e.t_stop)),
        }
    }
    out
}

/// Columnar pseudo-observation table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoTable {
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub cluster_names: Vec<String>,
    pub cluster_levels: Vec<Vec<String>>,
    pub id: Vec<u32>,
    pub trait_idx: Vec<u8>,
    pub cause: Vec<u8>,
    pub time_type: Vec<TimeType>,
    /// 1-based interval or period.
    pub k: Vec<u32>,
    pub stratum: Vec<u32>,
    pub y: Vec<f64>,
    /// Δ for continuous rows; 1 for discrete rows.
    pub exposure: Vec<f64>,
    /// Row-major, `covariate_names.len()` per row; NaN when absent.
    pub covariates: Vec<f64>,
    /// Row-major level codes, `cluster_names.len()` per row.
    pub clusters: Vec<u32>,
}

/// Code of a cluster value absent from a row's source data.
pub const MISSING_LEVEL: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct RowBuf {
    cause: u8,
    k: u32,
    stratum: u32,
    y: f64,
    exposure: f64,
    episode: usize,
}

impl PseudoTable {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_names.len()
    }

    pub fn covariate(&self, row: usize, col: usize) -> f64 {
        self.covariates[row * self.n_covariates() + col]
    }

    pub fn cluster_code(&self, row: usize, col: usize) -> u32 {
        self.clusters[row * self.n_clusters() + col]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn cluster_index(&self, name: &str) -> Option<usize> {
        self.cluster_names.iter().position(|c| c == name)
    }

    /// Offset `log Δ` for continuous rows, `None` for discrete rows.
    pub fn offset(&self, row: usize) -> Option<f64> {
        match self.time_type[row] {
            TimeType::Continuous => Some(self.exposure[row].ln()),
            TimeType::Discrete => None,
        }
    }

    pub fn n_traits(&self) -> usize {
        self.trait_idx.iter().map(|&t| t as usize + 1).max().unwrap_or(0)
    }

    fn from_records(records: &RecordSet, rows: Vec<Vec<RowBuf>>, time_type: TimeType) -> Self {
        let n_clusters = records.cluster_names.len();
        let mut cluster_levels: Vec<Vec<String>> = vec![Vec::new(); n_clusters];
        let mut lookup: Vec<HashMap<&str, u32>> = vec![HashMap::new(); n_clusters];
        let mut record_codes: Vec<Vec<u32>> = Vec::with_capacity(records.records.len());
        for rec in &records.records {
            let codes = rec
                .clusters
                .iter()
                .enumerate()
                .map(|(c, level)| {
                    *lookup[c].entry(level.as_str()).or_insert_with(|| {
                        cluster_levels[c].push(level.clone());
                        (cluster_levels[c].len() - 1) as u32
                    })
                })
                .collect();
            record_codes.push(codes);
        }

        let total: usize = rows.iter().map(Vec::len).sum();
        let mut t = PseudoTable {
            ids: records.records.iter().map(|r| r.id.clone()).collect(),
            covariate_names: records.covariate_names.clone(),
            cluster_names: records.cluster_names.clone(),
            cluster_levels,
            ..Default::default()
        };
        t.reserve(total);
        for (i, (rec_rows, rec)) in rows.into_iter().zip(&records.records).enumerate() {
            for r in rec_rows {
                t.id.push(i as u32);
                t.trait_idx.push(0);
                t.cause.push(r.cause);
                t.time_type.push(time_type);
                t.k.push(r.k);
                t.stratum.push(r.stratum);
                t.y.push(r.y);
                t.exposure.push(r.exposure);
                t.covariates
                    .extend_from_slice(&rec.episodes[r.episode].covariates);
                t.clusters.extend_from_slice(&record_codes[i]);
            }
        }
        t
    }

    fn reserve(&mut self, n: usize) {
        self.id.reserve(n);
        self.trait_idx.reserve(n);
        self.cause.reserve(n);
        self.time_type.reserve(n);
        self.k.reserve(n);
        self.stratum.reserve(n);
        self.y.reserve(n);
        self.exposure.reserve(n);
        self.covariates.reserve(n * self.n_covariates());
        self.clusters.reserve(n * self.n_clusters());
    }

    /// Rows of one cause, relabelled as trait `trait_idx`.
    pub fn select_cause(&self, cause: u8, trait_idx: u8) -> PseudoTable {
        let keep: Vec<usize> = (0..self.len()).filter(|&r| self.cause[r] == cause).collect();
        let mut t = PseudoTable {
            ids: self.ids.clone(),
            covariate_names: self.covariate_names.clone(),
            cluster_names: self.cluster_names.clone(),
            cluster_levels: self.cluster_levels.clone(),
            ..Default::default()
        };
        t.reserve(keep.len());
        let (p, q) = (self.n_covariates(), self.n_clusters());
        for r in keep {
            t.id.push(self.id[r]);
            t.trait_idx.push(trait_idx);
            t.cause.push(cause);
            t.time_type.push(self.time_type[r]);
            t.k.push(self.k[r]);
            t.stratum.push(self.stratum[r]);
            t.y.push(self.y[r]);
            t.exposure.push(self.exposure[r]);
            t.covariates.extend_from_slice(&self.covariates[r * p..(r + 1) * p]);
            t.clusters.extend_from_slice(&self.clusters[r * q..(r + 1) * q]);
        }
        t
    }

    /// Concatenate trait tables. Covariate and cluster columns are
    /// unioned by name; individuals and cluster levels are matched by
    /// label.
    pub fn stack(parts: Vec<PseudoTable>) -> PseudoTable {
        let mut out = PseudoTable::default();
        for part in &parts {
            for c in &part.covariate_names {
                if !out.covariate_names.contains(c) {
                    out.covariate_names.push(c.clone());
                }
            }
            for c in &part.cluster_names {
                if !out.cluster_names.contains(c) {
                    out.cluster_names.push(c.clone());
                    out.cluster_levels.push(Vec::new());
                }
            }
        }
        let mut id_lookup: HashMap<String, u32> = HashMap::new();
        let mut level_lookup: Vec<HashMap<String, u32>> = vec![HashMap::new(); out.n_clusters()];
        let total: usize = parts.iter().map(PseudoTable::len).sum();
        out.reserve(total);
        for part in parts {
            let cov_map: Vec<Option<usize>> = out
                .covariate_names
                .iter()
                .map(|c| part.covariate_index(c))
                .collect();
            let cl_map: Vec<Option<usize>> = out
                .cluster_names
                .iter()
                .map(|c| part.cluster_index(c))
                .collect();
            let id_codes: Vec<u32> = part
                .ids
                .iter()
                .map(|id| {
                    *id_lookup.entry(id.clone()).or_insert_with(|| {
                        out.ids.push(id.clone());
                        (out.ids.len() - 1) as u32
                    })
                })
                .collect();
            let level_codes: Vec<Vec<u32>> = cl_map
                .iter()
                .enumerate()
                .map(|(c, src)| match src {
                    Some(s) => part.cluster_levels[*s]
                        .iter()
                        .map(|level| {
                            *level_lookup[c].entry(level.clone()).or_insert_with(|| {
                                out.cluster_levels[c].push(level.clone());
                                (out.cluster_levels[c].len() - 1) as u32
                            })
                        })
                        .collect(),
                    None => Vec::new(),
                })
                .collect();
            for r in 0..part.len() {
                out.id.push(id_codes[part.id[r] as usize]);
                out.trait_idx.push(part.trait_idx[r]);
                out.cause.push(part.cause[r]);
                out.time_type.push(part.time_type[r]);
                out.k.push(part.k[r]);
                out.stratum.push(part.stratum[r]);
                out.y.push(part.y[r]);
                out.exposure.push(part.exposure[r]);
                for src in &cov_map {
                    out.covariates
                        .push(src.map_or(f64::NAN, |s| part.covariate(r, s)));
                }
                for (c, src) in cl_map.iter().enumerate() {
                    out.clusters.push(match src {
                        Some(s) => level_codes[c][part.cluster_code(r, *s) as usize],
                        None => MISSING_LEVEL,
                    });
                }
            }
        }
        out
    }

    /// `id,cause,k,stratum,y,offset,<covariates>,<clusters>`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["id", "cause", "k", "stratum", "y", "offset"]
            .map(String::from)
            .to_vec();
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.cluster_names.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut fields = vec![
                self.ids[self.id[r] as usize].clone(),
                self.cause[r].to_string(),
                self.k[r].to_string(),
                self.stratum[r].to_string(),
                fmt_num(self.y[r]),
                self.offset(r).map(fmt_num).unwrap_or_default(),
            ];
            for c in 0..self.n_covariates() {
                let v = self.covariate(r, c);
                fields.push(if v.is_nan() { String::new() } else { fmt_num(v) });
            }
            for c in 0..self.n_clusters() {
                let code = self.cluster_code(r, c);
                fields.push(if code == MISSING_LEVEL {
                    String::new()
                } else {
                    self.cluster_levels[c][code as usize].clone()
                });
            }
            w.write_record(&fields)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Read an exported table back; all rows are assigned trait 0.
    pub fn read_csv(
        path: impl AsRef<Path>,
        covariates: &[String],
        clusters: &[String],
    ) -> Result<PseudoTable> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let base: Vec<usize> = ["id", "cause", "k", "stratum", "y", "offset"]
            .iter()
            .map(|c| column(&headers, c))
            .collect::<Result<_>>()?;
        let cols = extra_columns(&headers, covariates, clusters)?;
        let mut t = PseudoTable {
            covariate_names: covariates.to_vec(),
            cluster_names: clusters.to_vec(),
            cluster_levels: vec![Vec::new(); clusters.len()],
            ..Default::default()
        };
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut levels: Vec<HashMap<String, u32>> = vec![HashMap::new(); clusters.len()];
        for row in reader.records() {
            let row = row?;
            let id = row[base[0]].to_string();
            let code = *ids.entry(id.clone()).or_insert_with(|| {
                t.ids.push(id.clone());
                (t.ids.len() - 1) as u32
            });
            let bad = |what: &str| Error::InvalidRecord {
                id: id.clone(),
                reason: format!("cannot parse {what}"),
            };
            t.id.push(code);
            t.trait_idx.push(0);
            t.cause.push(parse_cause(&id, &row[base[1]])?);
            t.k.push(row[base[2]].parse().map_err(|_| bad("k"))?);
            t.stratum.push(row[base[3]].parse().map_err(|_| bad("stratum"))?);
            t.y.push(parse_f64(&id, &row[base[4]], "y")?);
            let off = row[base[5]].trim();
            if off.is_empty() {
                t.time_type.push(TimeType::Discrete);
                t.exposure.push(1.0);
            } else {
                t.time_type.push(TimeType::Continuous);
                t.exposure.push(parse_f64(&id, off, "offset")?.exp());
            }
            for &c in &cols.covariates {
                t.covariates.push(parse_f64(&id, &row[c], "covariate")?);
            }
            for (j, &c) in cols.clusters.iter().enumerate() {
                let level = row[c].to_string();
                let code = *levels[j].entry(level.clone()).or_insert_with(|| {
                    t.cluster_levels[j].push(level);
                    (t.cluster_levels[j].len() - 1) as u32
                });
                t.clusters.push(code);
            }
        }
        Ok(t)
    }

    /// Event counts per cause and risk-set sizes per (trait, stratum, k).
    pub fn summary(&self) -> ExpansionSummary {
        let mut events: BTreeMap<u8, usize> = BTreeMap::new();
        let mut risk: BTreeMap<(u8, u32, u32), usize> = BTreeMap::new();
        for r in 0..self.len() {
            if self.y[r] > 0.0 {
                *events.entry(self.cause[r]).or_default() += 1;
            }
            *risk
                .entry((self.trait_idx[r], self.stratum[r], self.k[r]))
                .or_default() += 1;
        }
        ExpansionSummary {
            rows: self.len(),
            individuals: self.ids.len(),
            events_per_cause: events.into_iter().map(|(c, n)| (c.to_string(), n)).collect(),
            risk_sets: risk
                .into_iter()
                .map(|((t, p, k), n)| RiskSet {
                    trait_index: t,
                    stratum: p,
                    k,
                    at_risk: n,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSet {
    pub trait_index: u8,
    pub stratum: u32,
    pub k: u32,
    pub at_risk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionSummary {
    pub rows: usize,
    pub individuals: usize,
    pub events_per_cause: BTreeMap<String, usize>,
    pub risk_sets: Vec<RiskSet>,
}

/// Causes with at least one event, or `[1]` when there are none.
pub fn observed_causes(records: &RecordSet) -> Vec<u8> {
    let mut causes: Vec<u8> = records
        .records
        .iter()
        .filter(|r| r.is_event())
        .map(|r| r.cause)
        .collect();
    causes.sort_unstable();
    causes.dedup();
    if causes.is_empty() {
        causes.push(1);
    }
    causes
}

fn expand_one_continuous(
    rec: &SurvivalRecord,
    cuts: &CutPoints,
    stratified: bool,
    causes: &[u8],
) -> Result<Vec<RowBuf>> {
    if rec.time_type != TimeType::Continuous {
        return Err(rec.invalid("expected a continuous-time record"));
    }
    let entries = rec.stratum_entries();
    let entry_of = |p: u32| {
        entries
            .iter()
            .find(|e| e.0 == p)
            .map_or(0.0, |e| e.1)
    };
    let mut base: Vec<RowBuf> = Vec::new();
    for (ei, e) in rec.episodes.iter().enumerate() {
        let (stratum, origin) = if stratified {
            (e.stratum, entry_of(e.stratum))
        } else {
            (POOLED_STRATUM, 0.0)
        };
        let b = cuts.for_stratum(stratum);
        let (lo, hi) = (e.t_start - origin, e.t_stop - origin);
        if hi > *b.last().unwrap() {
            return Err(Error::TimeExceedsCutPoints {
                id: rec.id.clone(),
                time: e.t_stop,
            });
        }
        for k in 0..b.len() - 1 {
            let a = lo.max(b[k]);
            let z = hi.min(b[k + 1]);
            if z > a {
                base.push(RowBuf {
                    cause: 0,
                    k: (k + 1) as u32,
                    stratum,
                    y: 0.0,
                    exposure: z - a,
                    episode: ei,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(base.len() * causes.len());
    for &c in causes {
        let start = out.len();
        out.extend(base.iter().map(|r| RowBuf { cause: c, ..*r }));
        if rec.cause == c && out.len() > start {
            out.last_mut().unwrap().y = 1.0;
        }
    }
    Ok(out)
}

/// Interval-split expansion of continuous records.
///
/// Events on an interior boundary `t_{k+1}` are attributed to interval
/// `k` (the interval that ends there), so every event row has positive
/// exposure.
pub fn expand_continuous(
    records: &RecordSet,
    cuts: &CutPoints,
    stratified: bool,
    causes: &[u8],
) -> Result<PseudoTable> {
    cuts.validate()?;
    let rows = par::map_indexed(records.records.len(), |i| {
        expand_one_continuous(&records.records[i], cuts, stratified, causes)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PseudoTable::from_records(records, rows, TimeType::Continuous))
}

/// One Bernoulli row per period `1..=T` survived or failed in.
pub fn expand_discrete(records: &RecordSet, causes: &[u8]) -> Result<PseudoTable> {
    let rows = par::map_indexed(records.records.len(), |i| {
        let rec = &records.records[i];
        if rec.time_type != TimeType::Discrete {
            return Err(rec.invalid("expected a discrete-time record"));
        }
        let t = rec.exit_time();
        if t == 0.0 && rec.is_event() {
            return Err(Error::EventAtTimeZero(rec.id.clone()));
        }
        let t = t as u32;
        let mut out = Vec::with_capacity(t as usize * causes.len());
        for &c in causes {
            for period in 1..=t {
                out.push(RowBuf {
                    cause: c,
                    k: period,
                    stratum: POOLED_STRATUM,
                    y: if period == t && rec.cause == c { 1.0 } else { 0.0 },
                    exposure: 1.0,
                    episode: 0,
                });
            }
        }
        Ok(out)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PseudoTable::from_records(records, rows, TimeType::Discrete))
}

pub const POISSON_MAX_PROB: f64 = 0.2;
pub const POISSON_MIN_RISK_SET: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonDiagnostics {
    pub max_probability: f64,
    pub min_risk_set: usize,
    pub pass: bool,
    pub warnings: Vec<String>,
}

/// Checks the regime in which per-period Bernoulli rows are well
/// approximated by Poisson rows.
pub fn check_poisson_conditions(table: &PseudoTable, probs: &[f64]) -> PoissonDiagnostics {
    assert_eq!(table.len(), probs.len(), "one probability per row");
    let mut groups: BTreeMap<(u8, u32, u32), (usize, f64)> = BTreeMap::new();
    for r in 0..table.len() {
        let g = groups
            .entry((table.trait_idx[r], table.stratum[r], table.k[r]))
            .or_insert((0, 0.0));
        g.0 += 1;
        g.1 = g.1.max(probs[r]);
    }
    let max_probability = groups.values().map(|g| g.1).fold(0.0, f64::max);
    let min_risk_set = groups.values().map(|g| g.0).min().unwrap_or(0);
    let mut warnings = Vec::new();
    if max_probability > POISSON_MAX_PROB {
        warnings.push(format!(
            "hazard probability large: max {max_probability:.4} > {POISSON_MAX_PROB}"
        ));
    }
    if min_risk_set < POISSON_MIN_RISK_SET {
        warnings.push(format!(
            "small risk set: min {min_risk_set} < {POISSON_MIN_RISK_SET}"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    PoissonDiagnostics {
        max_probability,
        min_risk_set,
        pass: warnings.is_empty(),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cont(id: &str, spans: &[(f64, f64, u32)], cause: u8) -> SurvivalRecord {
        SurvivalRecord {
            id: id.into(),
            time_type: TimeType::Continuous,
            episodes: spans
                .iter()
                .map(|&(a, b, p)| Episode {
                    t_start: a,
                    t_stop: b,
                    stratum: p,
                    covariates: vec![],
                })
                .collect(),
            cause,
            clusters: vec![],
        }
    }

    fn disc(id: &str, t: f64, cause: u8) -> SurvivalRecord {
        SurvivalRecord {
            id: id.into(),
            time_type: TimeType::Discrete,
            episodes: vec![Episode {
                t_start: 0.0,
                t_stop: t,
                stratum: 1,
                covariates: vec![],
            }],
            cause,
            clusters: vec![],
        }
    }

    fn set(records: Vec<SurvivalRecord>) -> RecordSet {
        RecordSet {
            records,
            ..Default::default()
        }
    }

    #[test]
    fn quantile_cuts_on_four_events() {
        let rs = set([10.0, 20.0, 30.0, 40.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| cont(&i.to_string(), &[(0.0, t, 1)], 1))
            .collect());
        let cuts = make_cutpoints(&rs, &CutStrategy::Quantile { k: 2 }, false).unwrap();
        assert_eq!(cuts.default, vec![0.0, 25.0, 40.0]);
        let one = make_cutpoints(&rs, &CutStrategy::Quantile { k: 1 }, false).unwrap();
        assert_eq!(one.default, vec![0.0, 40.0]);
    }

    #[test]
    fn explicit_cuts_validated() {
        let rs = set(vec![cont("a", &[(0.0, 10.0, 1)], 1)]);
        let err = make_cutpoints(&rs, &CutStrategy::Explicit(vec![0.0, 50.0, 30.0]), false)
            .unwrap_err();
        assert!(err.to_string().contains("invalid cut points"));
        let err = make_cutpoints(&set(vec![cont("a", &[(0.0, 10.0, 1)], 0)]),
            &CutStrategy::Quantile { k: 3 }, false).unwrap_err();
        assert!(err.to_string().contains("no events for quantile cut points"));
    }

    #[test]
    fn death_at_100_splits_in_two() {
        let rs = set(vec![cont("a", &[(0.0, 100.0, 1)], 1)]);
        let cuts = CutPoints::new(vec![0.0, 50.0, 150.0]).unwrap();
        let t = expand_continuous(&rs, &cuts, false, &[1]).unwrap();
        assert_eq!(t.k, vec![1, 2]);
        assert_eq!(t.exposure, vec![50.0, 50.0]);
        assert_eq!(t.y, vec![0.0, 1.0]);
    }

    #[test]
    fn censored_on_boundary_gives_one_row() {
        let rs = set(vec![cont("a", &[(0.0, 50.0, 1)], 0)]);
        let cuts = CutPoints::new(vec![0.0, 50.0, 150.0]).unwrap();
        let t = expand_continuous(&rs, &cuts, false, &[1]).unwrap();
        assert_eq!(t.k, vec![1]);
        assert_eq!(t.exposure, vec![50.0]);
    }

    #[test]
    fn event_on_boundary_keeps_positive_exposure() {
        let rs = set(vec![cont("a", &[(0.0, 50.0, 1)], 1)]);
        let cuts = CutPoints::new(vec![0.0, 50.0, 150.0]).unwrap();
        let t = expand_continuous(&rs, &cuts, false, &[1]).unwrap();
        assert_eq!((t.k.clone(), t.exposure.clone(), t.y.clone()), (vec![1], vec![50.0], vec![1.0]));
    }

    #[test]
    fn stratified_clock_restarts() {
        let rs = set(vec![cont("a", &[(0.0, 160.0, 1), (160.0, 200.0, 2)], 1)]);
        let cuts = CutPoints::new(vec![0.0, 150.0, 365.0]).unwrap();
        let t = expand_continuous(&rs, &cuts, true, &[1]).unwrap();
        assert_eq!(t.stratum, vec![1, 1, 2]);
        assert_eq!(t.k, vec![1, 2, 1]);
        assert_eq!(t.exposure, vec![150.0, 10.0, 40.0]);
        assert_eq!(t.y, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn time_beyond_cuts_rejected() {
        let rs = set(vec![cont("a", &[(0.0, 200.0, 1)], 1)]);
        let cuts = CutPoints::new(vec![0.0, 50.0, 150.0]).unwrap();
        let err = expand_continuous(&rs, &cuts, false, &[1]).unwrap_err();
        assert!(err.to_string().contains("time exceeds cut points"));
    }

    #[test]
    fn discrete_rows() {
        let t = expand_discrete(&set(vec![disc("a", 3.0, 1)]), &[1]).unwrap();
        assert_eq!(t.y, vec![0.0, 0.0, 1.0]);
        let t = expand_discrete(&set(vec![disc("a", 2.0, 0)]), &[1]).unwrap();
        assert_eq!(t.y, vec![0.0, 0.0]);
        let t = expand_discrete(&set(vec![disc("a", 2.0, 2)]), &[1, 2]).unwrap();
        assert_eq!(t.select_cause(1, 0).y, vec![0.0, 0.0]);
        assert_eq!(t.select_cause(2, 1).y, vec![0.0, 1.0]);
        let err = expand_discrete(&set(vec![disc("a", 0.0, 1)]), &[1]).unwrap_err();
        assert!(err.to_string().contains("event at time zero"));
    }

    #[test]
    fn poisson_conditions() {
        let rs = set((0..1000).map(|i| disc(&i.to_string(), 2.0, 0)).collect());
        let t = expand_discrete(&rs, &[1]).unwrap();
        let d = check_poisson_conditions(&t, &vec![0.01; t.len()]);
        assert!(d.pass);
        let mut p = vec![0.01; t.len()];
        p[3] = 0.6;
        let d = check_poisson_conditions(&t, &p);
        assert!(d.warnings[0].contains("hazard probability large"));
        let small = expand_discrete(&set((0..5).map(|i| disc(&i.to_string(), 1.0, 0)).collect()), &[1]).unwrap();
        let d = check_poisson_conditions(&small, &vec![0.01; 5]);
        assert!(d.warnings[0].contains("small risk set"));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(
            &path,
            "id,tstart,tstop,stratum,cause,x,sire\nb,160,200,2,1,0.5,s1\nb,0,160,1,0,0.5,s1\na,0,30,1,0,1.5,s2\n",
        )
        .unwrap();
        let rs = RecordSet::read_continuous(&path, &["x".into()], &["sire".into()]).unwrap();
        assert_eq!(rs.records.len(), 2);
        assert_eq!(rs.records[0].episodes.len(), 2);
        assert_eq!(rs.records[0].cause, 1);
        let out = dir.path().join("r2.csv");
        rs.write_csv(&out).unwrap();
        let again = RecordSet::read_continuous(&out, &["x".into()], &["sire".into()]).unwrap();
        assert_eq!(rs, again);

        let cuts = CutPoints::new(vec![0.0, 100.0, 365.0]).unwrap();
        let t = expand_continuous(&rs, &cuts, true, &[1]).unwrap();
        let pseudo = dir.path().join("p.csv");
        t.write_csv(&pseudo).unwrap();
        let back = PseudoTable::read_csv(&pseudo, &["x".into()], &["sire".into()]).unwrap();
        assert_eq!(back.y, t.y);
        assert_eq!(back.k, t.k);
        for (a, b) in back.exposure.iter().zip(&t.exposure) {
            assert!((a - b).abs() < 1e-12 * b);
        }

        let err = RecordSet::read_continuous(&path, &["missing".into()], &[]).unwrap_err();
        assert!(err.to_string().contains("column not found"));
    }

    #[test]
    fn stack_matches_levels_by_label() {
        let mut a = cont("x", &[(0.0, 5.0, 1)], 1);
        a.clusters = vec!["s1".into()];
        let mut b = disc("x", 2.0, 1);
        b.clusters = vec!["s1".into()];
        let rc = RecordSet { cluster_names: vec!["sire".into()], records: vec![a], ..Default::default() };
        let rd = RecordSet { cluster_names: vec!["sire".into()], records: vec![b], ..Default::default() };
        let cuts = CutPoints::new(vec![0.0, 10.0]).unwrap();
        let tc = expand_continuous(&rc, &cuts, false, &[1]).unwrap().select_cause(1, 0);
        let td = expand_discrete(&rd, &[1]).unwrap().select_cause(1, 1);
        let s = PseudoTable::stack(vec![tc, td]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.ids, vec!["x".to_string()]);
        assert_eq!(s.cluster_levels[0], vec!["s1".to_string()]);
        assert_eq!(s.trait_idx, vec![0, 1, 1]);
        assert_eq!(s.n_traits(), 2);
    }
}

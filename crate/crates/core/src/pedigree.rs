//! Pedigrees, the additive relationship matrix and its sparse inverse.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::sparse::SymCsc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Individual {
    pub id: String,
    pub sire: Option<usize>,
    pub dam: Option<usize>,
}

/// Individuals ordered so that parents always precede their offspring.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pedigree {
    individuals: Vec<Individual>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Deserialize)]
struct PedigreeRow {
    id: String,
    sire: Option<String>,
    dam: Option<String>,
}

fn parent_field(v: Option<String>) -> Option<String> {
    v.map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && s != "0")
}

/// Read a `id,sire,dam` CSV; rows may come in any order.
pub fn load_pedigree(path: impl AsRef<Path>) -> Result<Pedigree> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    for col in ["id", "sire", "dam"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::ColumnNotFound(col.to_string()));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let row: PedigreeRow = rec?;
        rows.push((row.id, parent_field(row.sire), parent_field(row.dam)));
    }
    Pedigree::from_rows(rows)
}

impl Pedigree {
    /// Build from `(id, sire, dam)` rows in arbitrary order.
    pub fn from_rows<I, S>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Option<S>, Option<S>)>,
        S: Into<String>,
    {
        let rows: Vec<(String, Option<String>, Option<String>)> = rows
            .into_iter()
            .map(|(i, s, d)| (i.into(), s.map(Into::into), d.map(Into::into)))
            .collect();
        let mut position: HashMap<&str, usize> = HashMap::with_capacity(rows.len());
        for (k, (id, _, _)) in rows.iter().enumerate() {
            if position.insert(id.as_str(), k).is_some() {
                return Err(Error::DuplicateIndividual(id.clone()));
            }
        }
        let mut parents: Vec<[Option<usize>; 2]> = Vec::with_capacity(rows.len());
        for (id, sire, dam) in &rows {
            let mut pair = [None, None];
            for (slot, parent) in pair.iter_mut().zip([sire, dam]) {
                if let Some(p) = parent {
                    let k = *position.get(p.as_str()).ok_or_else(|| Error::UnknownParent {
                        child: id.clone(),
                        parent: p.clone(),
                    })?;
                    *slot = Some(k);
                }
            }
            parents.push(pair);
        }

        // Depth-first emission of parents before children; input order is
        // kept wherever the constraint allows it.
        const UNSEEN: u8 = 0;
        const OPEN: u8 = 1;
        const DONE: u8 = 2;
        let n = rows.len();
        let mut state = vec![UNSEEN; n];
        let mut order = Vec::with_capacity(n);
        for root in 0..n {
            if state[root] != UNSEEN {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            state[root] = OPEN;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < 2 {
                    let slot = *next;
                    *next += 1;
                    if let Some(p) = parents[node][slot] {
                        match state[p] {
                            UNSEEN => {
                                state[p] = OPEN;
                                stack.push((p, 0));
                            }
                            OPEN => {
                                return Err(Error::CyclicPedigree(format!(
                                    "`{}` is its own ancestor",
                                    rows[p].0
                                )))
                            }
                            _ => {}
                        }
                    }
                } else {
                    state[node] = DONE;
                    order.push(node);
                    stack.pop();
                }
            }
        }

        let mut new_index = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let individuals: Vec<Individual> = order
            .iter()
            .map(|&old| Individual {
                id: rows[old].0.clone(),
                sire: parents[old][0].map(|p| new_index[p]),
                dam: parents[old][1].map(|p| new_index[p]),
            })
            .collect();
        let index = individuals
            .iter()
            .enumerate()
            .map(|(k, ind)| (ind.id.clone(), k))
            .collect();
        Ok(Pedigree { individuals, index })
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn get(&self, k: usize) -> &Individual {
        &self.individuals[k]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.individuals.iter().map(|i| i.id.as_str())
    }

    /// The given individuals together with all their ancestors, in
    /// pedigree order. Used to relate sires through the full pedigree
    /// without carrying unrelated branches into the model.
    pub fn ancestral_subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Pedigree> {
        let mut keep = vec![false; self.len()];
        let mut stack = Vec::new();
        for id in ids {
            let k = self.position(id).ok_or_else(|| Error::UnseenClusterLevel {
                component: "pedigree".into(),
                level: id.to_string(),
            })?;
            stack.push(k);
        }
        while let Some(k) = stack.pop() {
            if keep[k] {
                continue;
            }
            keep[k] = true;
            let ind = &self.individuals[k];
            stack.extend(ind.sire);
            stack.extend(ind.dam);
        }
        let rows = self
            .individuals
            .iter()
            .enumerate()
            .filter(|(k, _)| keep[*k])
            .map(|(_, ind)| {
                (
                    ind.id.clone(),
                    ind.sire.map(|p| self.individuals[p].id.clone()),
                    ind.dam.map(|p| self.individuals[p].id.clone()),
                )
            });
        Pedigree::from_rows(rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "sire", "dam"])?;
        for ind in &self.individuals {
            let sire = ind.sire.map_or("0", |p| self.individuals[p].id.as_str());
            let dam = ind.dam.map_or("0", |p| self.individuals[p].id.as_str());
            w.write_record([ind.id.as_str(), sire, dam])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Symmetric relationship coefficients indexed by pedigree position.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipMatrix {
    matrix: SymCsc,
}

impl RelationshipMatrix {
    pub fn from_sparse(matrix: SymCsc) -> Self {
        RelationshipMatrix { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn as_sparse(&self) -> &SymCsc {
        &self.matrix
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        self.matrix.to_dense()
    }

    /// Coordinate-format export: `i j value`, 1-based, lower triangle.
    pub fn write_coordinate(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (r, c, v) in self.matrix.lower_entries() {
            writeln!(w, "{} {} {}", r + 1, c + 1, v).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Packed lower-triangular dense storage used by the tabular method.
struct Packed {
    data: Vec<f64>,
}

impl Packed {
    fn new(n: usize) -> Self {
        Packed {
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    fn idx(i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[Self::idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[Self::idx(i, j)] = v;
    }
}

/// Additive relationship matrix by the recursive tabular method.
///
/// Dense in time and memory (O(n²)); intended for pedigrees up to a few
/// thousand members. Model fitting only ever needs [`a_inverse`].
pub fn additive_relationship(ped: &Pedigree) -> RelationshipMatrix {
    let n = ped.len();
    let mut a = Packed::new(n);
    for i in 0..n {
        let ind = ped.get(i);
        for j in 0..i {
            let from_sire = ind.sire.map_or(0.0, |s| a.get(j, s));
            let from_dam = ind.dam.map_or(0.0, |d| a.get(j, d));
            a.set(i, j, 0.5 * (from_sire + from_dam));
        }
        let parents = match (ind.sire, ind.dam) {
            (Some(s), Some(d)) => a.get(s, d),
            _ => 0.0,
        };
        a.set(i, i, 1.0 + 0.5 * parents);
    }
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            let v = a.get(i, j);
            if v != 0.0 {
                triplets.push((i, j, v));
            }
        }
    }
    RelationshipMatrix::from_sparse(SymCsc::from_triplets(n, &triplets))
}

/// Inbreeding coefficients by the Meuwissen–Luo algorithm.
pub fn inbreeding(ped: &Pedigree) -> Vec<f64> {
    let n = ped.len();
    let mut f = vec![0.0; n];
    let parent_f = |f: &[f64], p: Option<usize>| p.map_or(-1.0, |k| f[k]);
    let mut d = vec![0.0; n];
    let mut l = vec![0.0; n];
    for i in 0..n {
        let ind = ped.get(i);
        d[i] = 0.5 - 0.25 * (parent_f(&f, ind.sire) + parent_f(&f, ind.dam));
        if ind.sire.is_none() && ind.dam.is_none() {
            f[i] = 0.0;
            continue;
        }
        if i > 0 {
            let prev = ped.get(i - 1);
            if prev.sire == ind.sire && prev.dam == ind.dam {
                f[i] = f[i - 1];
                continue;
            }
        }
        let mut fi = -1.0;
        let mut pending = BTreeSet::new();
        l[i] = 1.0;
        pending.insert(i);
        while let Some(j) = pending.pop_last() {
            let anc = ped.get(j);
            if let Some(s) = anc.sire {
                pending.insert(s);
                l[s] += 0.5 * l[j];
            }
            if let Some(dm) = anc.dam {
                pending.insert(dm);
                l[dm] += 0.5 * l[j];
            }
            fi += l[j] * l[j] * d[j];
            l[j] = 0.0;
        }
        f[i] = fi;
    }
    f
}

/// Sparse `A⁻¹` assembled directly from parent triplets (Henderson's
/// rules, with Mendelian sampling variances adjusted for inbreeding).
pub fn a_inverse(ped: &Pedigree) -> RelationshipMatrix {
    let n = ped.len();
    let f = inbreeding(ped);
    let mut triplets = Vec::with_capacity(n * 6);
    for i in 0..n {
        let ind = ped.get(i);
        let fs = ind.sire.map_or(-1.0, |s| f[s]);
        let fd = ind.dam.map_or(-1.0, |d| f[d]);
        let alpha = 1.0 / (0.5 - 0.25 * (fs + fd));
        triplets.push((i, i, alpha));
        let parents: Vec<usize> = ind.sire.into_iter().chain(ind.dam).collect();
        for &p in &parents {
            triplets.push((i, p, -alpha / 2.0));
            triplets.push((p, p, alpha / 4.0));
        }
        if let [s, d] = parents[..] {
            triplets.push((s, d, alpha / 4.0));
        }
    }
    RelationshipMatrix::from_sparse(SymCsc::from_triplets(n, &triplets))
}

/// `log det A` from the Mendelian sampling variances.
pub fn log_det_a(ped: &Pedigree) -> f64 {
    let f = inbreeding(ped);
    ped.individuals()
        .iter()
        .map(|ind| {
            let fs = ind.sire.map_or(-1.0, |s| f[s]);
            let fd = ind.dam.map_or(-1.0, |d| f[d]);
            (0.5 - 0.25 * (fs + fd)).ln()
        })
        .sum()
}

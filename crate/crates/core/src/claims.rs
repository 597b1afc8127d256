//! Chunk-level classifier scores, the entity × category claims matrix, and
//! inter-method agreement statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::describe::{pearson, percentile_interval, spearman};
use crate::error::{Error, Result};
use crate::io::{read_labeled_matrix, write_labeled_matrix};
use crate::rng;

pub const DEFAULT_MIN_CHUNKS: usize = 10;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub description: String,
}

/// Ordered category list. Order matters: it breaks ties in argmax and top-3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    categories: Vec<Category>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let cats = [
            ("store_of_value", "Digital gold, inflation hedge, wealth preservation"),
            ("medium_of_exchange", "Payment system, transactions, currency"),
            ("smart_contracts", "Programmable contracts, automation, trustless execution"),
            ("defi", "Lending, borrowing, yield, liquidity provision"),
            ("governance", "Voting, DAOs, community decision-making"),
            ("scalability", "High throughput, low latency, Layer 2 solutions"),
            ("privacy", "Anonymous transactions, zero-knowledge proofs"),
            ("interoperability", "Cross-chain communication, bridges, multi-chain"),
            ("data_storage", "Decentralized storage, file systems, permanence"),
            ("oracle", "External data feeds, real-world information"),
        ];
        Self {
            categories: cats
                .iter()
                .map(|(n, d)| Category {
                    name: n.to_string(),
                    description: d.to_string(),
                })
                .collect(),
        }
    }
}

impl Taxonomy {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::invalid("taxonomy", "need at least two categories"));
        }
        let mut seen = BTreeSet::new();
        for c in &categories {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::invalid("taxonomy", format!("duplicate category `{}`", c.name)));
            }
        }
        Ok(Self { categories })
    }

    /// Taxonomy from bare names, with empty descriptions.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| Category {
                    name: n.as_ref().to_string(),
                    description: String::new(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Taxonomy without category `k`.
    pub fn without(&self, k: usize) -> Result<Self> {
        let mut cats = self.categories.clone();
        cats.remove(k);
        Self::new(cats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkScores {
    pub entity: String,
    pub chunk_id: u64,
    pub method: String,
    pub scores: Vec<f64>,
}

impl ChunkScores {
    pub fn validate(&self, k: usize) -> std::result::Result<(), String> {
        if self.scores.len() != k {
            return Err(format!("{} scores for {k} categories", self.scores.len()));
        }
        if let Some(s) = self.scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(format!("score {s} is negative or not finite"));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(format!("scores sum to {sum}, not 1"));
        }
        Ok(())
    }

    /// Highest-scoring category; ties go to the earliest category.
    pub fn argmax(&self) -> usize {
        top_k(&self.scores, 1)[0]
    }

    pub fn key(&self) -> (String, u64) {
        (self.entity.clone(), self.chunk_id)
    }
}

/// Indices of the `k` largest scores, ties broken by category order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Read a scores file (`entity,chunk_id,method,<categories…>`). Category
/// columns may appear in any order but must match the taxonomy exactly.
pub fn read_chunk_scores(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Vec<ChunkScores>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_chunk_scores(file, taxonomy)
}

pub fn parse_chunk_scores<R: std::io::Read>(reader: R, taxonomy: &Taxonomy) -> Result<Vec<ChunkScores>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let head: Vec<&str> = headers.iter().collect();
    if head.len() < 3 || head[..3] != ["entity", "chunk_id", "method"] {
        return Err(Error::Record {
            row: 0,
            reason: "header must start with `entity,chunk_id,method`".into(),
        });
    }
    let cats = &head[3..];
    let names = taxonomy.names();
    let cat_set: BTreeSet<&str> = cats.iter().copied().collect();
    let tax_set: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    if cat_set != tax_set || cats.len() != names.len() {
        return Err(Error::Record {
            row: 0,
            reason: format!("category columns {cats:?} do not match taxonomy {names:?}"),
        });
    }
    let pos: Vec<usize> = cats.iter().map(|c| taxonomy.index_of(c).unwrap()).collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let bad = |reason: String| Error::Record { row, reason };
        if rec.len() != head.len() {
            return Err(bad(format!("{} fields, expected {}", rec.len(), head.len())));
        }
        let chunk_id = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("chunk_id `{}` is not a non-negative integer", &rec[1])))?;
        let mut scores = vec![0.0; names.len()];
        for (j, field) in rec.iter().skip(3).enumerate() {
            scores[pos[j]] = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("column `{}`: cannot parse `{field}`", cats[j])))?;
        }
        let c = ChunkScores {
            entity: rec[0].to_string(),
            chunk_id,
            method: rec[2].to_string(),
            scores,
        };
        c.validate(names.len()).map_err(bad)?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_chunk_scores(path: impl AsRef<Path>, chunks: &[ChunkScores], taxonomy: &Taxonomy) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["entity".to_string(), "chunk_id".into(), "method".into()];
    header.extend(taxonomy.names());
    w.write_record(&header)?;
    for c in chunks {
        let mut rec = vec![c.entity.clone(), c.chunk_id.to_string(), c.method.clone()];
        rec.extend(c.scores.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Group a mixed scores file by classifier name.
pub fn split_by_method(chunks: Vec<ChunkScores>) -> BTreeMap<String, Vec<ChunkScores>> {
    let mut out: BTreeMap<String, Vec<ChunkScores>> = BTreeMap::new();
    for c in chunks {
        out.entry(c.method.clone()).or_default().push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimsMatrix {
    pub values: DMatrix<f64>,
    pub entity_labels: Vec<String>,
    pub taxonomy: Taxonomy,
    /// Chunks behind each row; empty when loaded from a claims CSV.
    pub chunk_counts: Vec<usize>,
    /// Entities with fewer than the minimum chunk count. Kept in the matrix.
    pub low_data: Vec<String>,
    /// Requested entities that had no chunks at all.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AggregateOptions {
    pub min_chunks: usize,
    /// Entities expected in the output; those without chunks are excluded
    /// with a warning. `None` takes every entity present.
    pub entities: Option<Vec<String>>,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            min_chunks: DEFAULT_MIN_CHUNKS,
            entities: None,
        }
    }
}

/// `c_nk` = mean of `P(l_k | t)` over entity `n`'s chunks; rows sorted by entity.
pub fn aggregate_claims(
    chunks: &[ChunkScores],
    taxonomy: &Taxonomy,
    opts: &AggregateOptions,
) -> Result<ClaimsMatrix> {
    let k = taxonomy.len();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, c) in chunks.iter().enumerate() {
        c.validate(k).map_err(|reason| Error::Record { row: i + 1, reason })?;
        let e = sums.entry(&c.entity).or_insert_with(|| (vec![0.0; k], 0));
        for (s, v) in e.0.iter_mut().zip(&c.scores) {
            *s += v;
        }
        e.1 += 1;
    }
    let mut excluded = Vec::new();
    if let Some(wanted) = &opts.entities {
        let wanted: BTreeSet<&str> = wanted.iter().map(String::as_str).collect();
        for w in &wanted {
            if !sums.contains_key(w) {
                log::warn!("entity {w} has no chunks; excluded");
                excluded.push(w.to_string());
            }
        }
        sums.retain(|e, _| wanted.contains(e));
    }
    if sums.is_empty() {
        return Err(Error::invalid("chunks", "no entity has any chunk"));
    }
    let n = sums.len();
    let mut values = DMatrix::zeros(n, k);
    let mut entity_labels = Vec::with_capacity(n);
    let mut chunk_counts = Vec::with_capacity(n);
    let mut low_data = Vec::new();
    for (i, (entity, (s, count))) in sums.into_iter().enumerate() {
        for j in 0..k {
            values[(i, j)] = s[j] / count as f64;
        }
        if count < opts.min_chunks {
            low_data.push(entity.to_string());
        }
        entity_labels.push(entity.to_string());
        chunk_counts.push(count);
    }
    Ok(ClaimsMatrix {
        values,
        entity_labels,
        taxonomy: taxonomy.clone(),
        chunk_counts,
        low_data,
        excluded,
    })
}

impl ClaimsMatrix {
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let m = read_labeled_matrix(path)?;
        let taxonomy = Taxonomy::from_names(&m.col_labels)?;
        for i in 0..m.values.nrows() {
            let row = m.values.row(i);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Record {
                    row: i + 1,
                    reason: format!("claims row for {} is not on the simplex", m.row_labels[i]),
                });
            }
        }
        Ok(Self {
            values: m.values,
            entity_labels: m.row_labels,
            taxonomy,
            chunk_counts: Vec::new(),
            low_data: Vec::new(),
            excluded: Vec::new(),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_labeled_matrix(path, "entity", &self.entity_labels, &self.taxonomy.names(), &self.values)
    }

    /// Rows for `entities`, in that order.
    pub fn select(&self, entities: &[String]) -> Result<ClaimsMatrix> {
        let missing: Vec<String> = entities
            .iter()
            .filter(|e| !self.entity_labels.contains(e))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::KeyMismatch(missing));
        }
        let idx: Vec<usize> = entities
            .iter()
            .map(|e| self.entity_labels.iter().position(|l| l == e).unwrap())
            .collect();
        let counts = if self.chunk_counts.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| self.chunk_counts[i]).collect()
        };
        Ok(ClaimsMatrix {
            values: crate::linalg::select_rows(&self.values, &idx),
            entity_labels: entities.to_vec(),
            taxonomy: self.taxonomy.clone(),
            chunk_counts: counts,
            low_data: self.low_data.iter().filter(|e| entities.contains(e)).cloned().collect(),
            excluded: self.excluded.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub exact_top1: f64,
    /// Share of chunks whose second-method argmax is in the first method's top 3.
    pub relaxed_top3: f64,
    pub cohen_kappa: f64,
    pub n_chunks: usize,
}

fn index_by_key(set: &[ChunkScores]) -> HashMap<(String, u64), &ChunkScores> {
    set.iter().map(|c| (c.key(), c)).collect()
}

/// Agreement between a primary method `a` and a second method `b`.
pub fn agreement_stats(a: &[ChunkScores], b: &[ChunkScores]) -> Result<Agreement> {
    let ia = index_by_key(a);
    let ib = index_by_key(b);
    let mut missing: Vec<String> = ia
        .keys()
        .filter(|k| !ib.contains_key(*k))
        .map(|(e, c)| format!("{e}#{c} missing from second set"))
        .chain(
            ib.keys()
                .filter(|k| !ia.contains_key(*k))
                .map(|(e, c)| format!("{e}#{c} missing from first set")),
        )
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::KeyMismatch(missing));
    }
    if a.is_empty() {
        return Err(Error::invalid("a", "no chunks"));
    }
    let k = a[0].scores.len();
    let n = a.len();
    let (mut exact, mut relaxed) = (0usize, 0usize);
    let mut la = Vec::with_capacity(n);
    let mut lb = Vec::with_capacity(n);
    for ca in a {
        let cb = ib[&ca.key()];
        if cb.scores.len() != k {
            return Err(Error::Shape("score vectors differ in length".into()));
        }
        let (xa, xb) = (ca.argmax(), cb.argmax());
        exact += usize::from(xa == xb);
        relaxed += usize::from(top_k(&ca.scores, 3).contains(&xb));
        la.push(xa);
        lb.push(xb);
    }
    Ok(Agreement {
        exact_top1: exact as f64 / n as f64,
        relaxed_top3: relaxed as f64 / n as f64,
        cohen_kappa: cohen_kappa(&la, &lb, k),
        n_chunks: n,
    })
}

/// `κ = (p_o − p_e) / (1 − p_e)`. When chance agreement is already 1 (both
/// raters use a single identical label) κ is taken as 1.
pub fn cohen_kappa(a: &[usize], b: &[usize], k: usize) -> f64 {
    let n = a.len() as f64;
    let mut ma = vec![0.0; k];
    let mut mb = vec![0.0; k];
    let mut po = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1.0;
        mb[y] += 1.0;
        if x == y {
            po += 1.0;
        }
    }
    po /= n;
    let pe: f64 = ma.iter().zip(&mb).map(|(p, q)| p * q).sum::<f64>() / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Fleiss' κ over discretized labels; `labels[m][i]` is method `m`'s label
/// for chunk `i`.
pub fn fleiss_kappa(labels: &[Vec<usize>], k: usize) -> Result<f64> {
    if labels.len() < 2 {
        return Err(Error::invalid("labels", "need at least two methods"));
    }
    let n_items = labels[0].len();
    if n_items == 0 || labels.iter().any(|l| l.len() != n_items) {
        return Err(Error::Shape("every method must label the same nonempty chunk set".into()));
    }
    if labels.iter().flatten().any(|&l| l >= k) {
        return Err(Error::invalid("labels", format!("label outside 0..{k}")));
    }
    let raters = labels.len() as f64;
    let mut totals = vec![0.0; k];
    let mut p_bar = 0.0;
    for i in 0..n_items {
        let mut counts = vec![0.0; k];
        for l in labels {
            counts[l[i]] += 1.0;
        }
        let agree: f64 = counts.iter().map(|c| c * c).sum::<f64>() - raters;
        p_bar += agree / (raters * (raters - 1.0));
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
    }
    p_bar /= n_items as f64;
    let denom = n_items as f64 * raters;
    let p_e: f64 = totals.iter().map(|t| (t / denom).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if p_bar >= 1.0 - 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Argmax label sequences for each method, over chunks common to all and
/// ordered by `(entity, chunk_id)`.
pub fn aligned_labels(sets: &[&[ChunkScores]]) -> Result<Vec<Vec<usize>>> {
    let maps: Vec<_> = sets.iter().map(|s| index_by_key(s)).collect();
    let mut keys: Vec<(String, u64)> = maps
        .first()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    let missing: Vec<String> = maps
        .iter()
        .flat_map(|m| m.keys())
        .filter(|k| !maps.iter().all(|m| m.contains_key(*k)))
        .map(|(e, c)| format!("{e}#{c}"))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::KeyMismatch(missing));
    }
    keys.sort();
    Ok(maps
        .iter()
        .map(|m| keys.iter().map(|k| m[k].argmax()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodCorrelations {
    pub methods: Vec<String>,
    /// Symmetric, over flattened entity × category cells.
    pub pearson: Vec<Vec<f64>>,
    pub spearman: Vec<Vec<f64>>,
    pub mean_pearson: f64,
    pub mean_spearman: f64,
    /// Per category: mean over method pairs of the across-entity Pearson r.
    pub per_category: Vec<(String, Option<f64>)>,
}

pub fn method_correlations(matrices: &[(String, ClaimsMatrix)]) -> Result<MethodCorrelations> {
    if matrices.len() < 2 {
        return Err(Error::invalid("matrices", "need at least two methods"));
    }
    let first = &matrices[0].1;
    for (name, m) in &matrices[1..] {
        if m.entity_labels != first.entity_labels || m.taxonomy.names() != first.taxonomy.names() {
            return Err(Error::Shape(format!(
                "claims matrix `{name}` differs in entities or categories from `{}`",
                matrices[0].0
            )));
        }
    }
    let q = matrices.len();
    let flat: Vec<Vec<f64>> = matrices
        .iter()
        .map(|(_, m)| m.values.transpose().as_slice().to_vec())
        .collect();
    let mut pr = vec![vec![1.0; q]; q];
    let mut sr = vec![vec![1.0; q]; q];
    let (mut sum_p, mut sum_s, mut pairs) = (0.0, 0.0, 0.0);
    for i in 0..q {
        for j in i + 1..q {
            let p = pearson(&flat[i], &flat[j]).unwrap_or(f64::NAN);
            let s = spearman(&flat[i], &flat[j]).unwrap_or(f64::NAN);
            pr[i][j] = p;
            pr[j][i] = p;
            sr[i][j] = s;
            sr[j][i] = s;
            sum_p += p;
            sum_s += s;
            pairs += 1.0;
        }
    }
    let per_category = first
        .taxonomy
        .names()
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let cols: Vec<Vec<f64>> = matrices
                .iter()
                .map(|(_, m)| m.values.column(k).iter().copied().collect())
                .collect();
            let rs: Vec<f64> = (0..q)
                .flat_map(|i| (i + 1..q).map(move |j| (i, j)))
                .filter_map(|(i, j)| pearson(&cols[i], &cols[j]))
                .collect();
            let r = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);
            (name, r)
        })
        .collect();
    Ok(MethodCorrelations {
        methods: matrices.iter().map(|(n, _)| n.clone()).collect(),
        pearson: pr,
        spearman: sr,
        mean_pearson: sum_p / pairs,
        mean_spearman: sum_s / pairs,
        per_category,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryCi {
    pub category: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile intervals on each category's mean chunk score, resampling
/// chunks with replacement. Resample `b` draws from stream `(seed, b)`.
pub fn bootstrap_category_ci(
    chunks: &[ChunkScores],
    taxonomy: &Taxonomy,
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<Vec<CategoryCi>> {
    use rand::Rng;
    if resamples < 100 {
        return Err(Error::invalid("resamples", "must be at least 100"));
    }
    if chunks.is_empty() {
        return Err(Error::invalid("chunks", "empty"));
    }
    let k = taxonomy.len();
    for (i, c) in chunks.iter().enumerate() {
        c.validate(k).map_err(|reason| Error::Record { row: i + 1, reason })?;
    }
    let n = chunks.len();
    let means: Vec<Vec<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b);
            let mut acc = vec![0.0; k];
            for _ in 0..n {
                let c = &chunks[r.random_range(0..n)];
                for (a, s) in acc.iter_mut().zip(&c.scores) {
                    *a += s;
                }
            }
            acc.iter().map(|a| a / n as f64).collect()
        })
        .collect();
    Ok(taxonomy
        .names()
        .into_iter()
        .enumerate()
        .map(|(j, category)| {
            let col: Vec<f64> = means.iter().map(|m| m[j]).collect();
            let (lo, hi) = percentile_interval(&col, level);
            CategoryCi {
                category,
                mean: chunks.iter().map(|c| c.scores[j]).sum::<f64>() / n as f64,
                lo,
                hi,
            }
        })
        .collect())
}

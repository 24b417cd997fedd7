//! Cue discovery by cross-resolution seeding: build a prototype dictionary
//! from coarse tokens, then prune and merge it until it stops shrinking.

use std::collections::HashMap;

use crate::agg::{group_matrix, pool_attention};
use crate::error::{Error, Result};
use crate::tensors::{cosine_sim, AttentionMap, FeatureMap, Matrix};
use crate::union_find::UnionFind;

/// Default cosine threshold for merging prototypes inside an attention group.
pub const DEFAULT_MERGE_TAU: f64 = 0.97;

/// `K×C` dictionary of prototype vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDict {
    channels: usize,
    vectors: Vec<f32>,
}

impl PrototypeDict {
    pub fn new(channels: usize, vectors: Vec<f32>) -> Result<Self> {
        if channels == 0 || vectors.is_empty() {
            return Err(Error::Empty("prototype dictionary"));
        }
        if !vectors.len().is_multiple_of(channels) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form {channels}-d prototypes",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype dictionary"));
        }
        Ok(Self { channels, vectors })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("ragged prototype rows".into()));
        }
        Self::new(c, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.channels..(k + 1) * self.channels]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.channels)
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::new(self.len(), self.channels, self.vectors.clone()).expect("consistent dict")
    }
}

pub(crate) fn unit_f64(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|&x| x as f64 / norm).collect()
    }
}

/// Cosine similarities of one row against every prototype. Quantization and
/// cost-based assignment both go through this routine so that they agree
/// bit for bit.
pub(crate) struct SimilarityTable {
    units: Vec<Vec<f64>>,
}

impl SimilarityTable {
    pub(crate) fn new(dict: &PrototypeDict) -> Self {
        Self {
            units: dict.iter().map(unit_f64).collect(),
        }
    }

    pub(crate) fn similarities(&self, row: &[f32], out: &mut [f64]) {
        let x = unit_f64(row);
        for (o, p) in out.iter_mut().zip(&self.units) {
            *o = x.iter().zip(p).map(|(a, b)| a * b).sum();
        }
    }
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Nearest prototype per row under cosine similarity; ties go to the lowest index.
pub fn quantize_features(rows: &Matrix, dict: &PrototypeDict) -> Result<Vec<usize>> {
    if dict.is_empty() {
        return Err(Error::Empty("prototype dictionary"));
    }
    if rows.cols() != dict.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{}-d rows vs {}-d prototypes",
            rows.cols(),
            dict.channels()
        )));
    }
    let table = SimilarityTable::new(dict);
    let mut sims = vec![0.0; dict.len()];
    Ok(rows
        .row_iter()
        .map(|row| {
            table.similarities(row, &mut sims);
            argmax(&sims)
        })
        .collect())
}

/// Per-pixel quantization of a feature map (raster order).
pub fn quantize_feature_map(fm: &FeatureMap, dict: &PrototypeDict) -> Result<Vec<usize>> {
    quantize_features(&fm.to_tokens(), dict)
}

/// Argmax per row of a precomputed score matrix (e.g. pooled attention).
pub fn quantize_scores(scores: &Matrix) -> Result<Vec<usize>> {
    if scores.cols() == 0 {
        return Err(Error::Empty("prototype dictionary"));
    }
    Ok(scores
        .row_iter()
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            argmax(&row)
        })
        .collect())
}

/// Seeds one prototype per coarse token: the high-resolution pixel with the
/// highest cosine similarity to that token.
pub fn seed_dictionary(f_lr: &FeatureMap, f_hr: &FeatureMap) -> Result<PrototypeDict> {
    if f_lr.channels() != f_hr.channels() {
        return Err(Error::ShapeMismatch(format!(
            "coarse map has {} channels, fine map {}",
            f_lr.channels(),
            f_hr.channels()
        )));
    }
    let hr_tokens = f_hr.to_tokens();
    let hr_units: Vec<Vec<f64>> = hr_tokens.row_iter().map(unit_f64).collect();
    let mut vectors = Vec::with_capacity(f_lr.num_pixels() * f_lr.channels());
    for token in f_lr.to_tokens().row_iter() {
        let t = unit_f64(token);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, u) in hr_units.iter().enumerate() {
            let s: f64 = t.iter().zip(u).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (i, s);
            }
        }
        vectors.extend_from_slice(hr_tokens.row(best.0));
    }
    PrototypeDict::new(f_lr.channels(), vectors)
}

/// Most frequent value; ties go to the smaller value.
fn mode(values: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

/// Cross-tabulates semantic clusters `s` against attention clusters `r`
/// (both per-pixel prototype indices):
///
/// 1. prototypes with no pixel under `s` are dropped;
/// 2. each survivor joins its dominant attention group (mode of `r` over its pixels);
/// 3. within a group, prototypes with pairwise cosine `> tau` are merged
///    transitively and replaced by the unweighted mean of the members.
///
/// Output prototypes are ordered by their smallest member index.
pub fn merge_prototypes(
    s: &[usize],
    r: &[usize],
    dict: &PrototypeDict,
    tau: f64,
) -> Result<PrototypeDict> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("merge threshold {tau} outside (0,1]")));
    }
    if s.len() != r.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} semantic labels vs {} attention labels",
            s.len(),
            r.len()
        )));
    }
    let k = dict.len();
    if let Some(bad) = s.iter().chain(r).find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} out of range for {k} prototypes"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (px, &l) in s.iter().enumerate() {
        members[l].push(px);
    }
    let alive: Vec<usize> = (0..k).filter(|&p| !members[p].is_empty()).collect();
    if alive.is_empty() {
        return Err(Error::Empty("semantic clusters"));
    }
    let group: Vec<usize> = alive
        .iter()
        .map(|&p| mode(members[p].iter().map(|&px| r[px])).expect("non-empty"))
        .collect();

    let mut uf = UnionFind::new(alive.len());
    for a in 0..alive.len() {
        for b in a + 1..alive.len() {
            if group[a] == group[b]
                && cosine_sim(dict.vector(alive[a]), dict.vector(alive[b])) > tau
            {
                uf.union(a, b);
            }
        }
    }
    let (ids, count) = uf.groups();
    let c = dict.channels();
    let mut sums = vec![vec![0.0f64; c]; count];
    let mut sizes = vec![0usize; count];
    for (a, &g) in ids.iter().enumerate() {
        sizes[g] += 1;
        for (s, &v) in sums[g].iter_mut().zip(dict.vector(alive[a])) {
            *s += v as f64;
        }
    }
    let vectors = sums
        .into_iter()
        .zip(sizes)
        .flat_map(|(sum, n)| sum.into_iter().map(move |v| (v / n as f64) as f32))
        .collect();
    PrototypeDict::new(c, vectors)
}

/// Result of iterative refinement.
#[derive(Debug, Clone)]
pub struct CrsOutcome {
    pub dict: PrototypeDict,
    /// Number of merge rounds evaluated, including the final non-shrinking one.
    pub iterations: usize,
    /// Dictionary size before each round, then the final size.
    pub sizes: Vec<usize>,
}

/// Attention clusters for the current dictionary: tokens are grouped by
/// nearest prototype and each pixel takes the group with the most attention mass.
pub fn attention_clusters(
    f_lr: &FeatureMap,
    a: &AttentionMap,
    dict: &PrototypeDict,
) -> Result<Vec<usize>> {
    let g = group_matrix(&f_lr.to_tokens(), dict)?;
    quantize_scores(&pool_attention(a, &g)?)
}

/// Seeds a dictionary and refines it until a round no longer shrinks it.
/// `max_rounds` caps the number of shrinking rounds accepted.
pub fn crs_refine(
    f_lr: &FeatureMap,
    f_hr: &FeatureMap,
    a: &AttentionMap,
    tau: f64,
    max_rounds: Option<usize>,
) -> Result<CrsOutcome> {
    if a.n_lr() != f_lr.num_pixels() || a.n_hr() != f_hr.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "attention {}x{} vs {} fine pixels and {} tokens",
            a.n_hr(),
            a.n_lr(),
            f_hr.num_pixels(),
            f_lr.num_pixels()
        )));
    }
    let mut dict = seed_dictionary(f_lr, f_hr)?;
    let hr_tokens = f_hr.to_tokens();
    let mut sizes = vec![dict.len()];
    let mut iterations = 0;
    loop {
        if max_rounds.is_some_and(|cap| iterations >= cap) {
            break;
        }
        iterations += 1;
        let r = attention_clusters(f_lr, a, &dict)?;
        let s = quantize_features(&hr_tokens, &dict)?;
        let next = merge_prototypes(&s, &r, &dict, tau)?;
        if next.len() >= dict.len() {
            break;
        }
        dict = next;
        sizes.push(dict.len());
    }
    Ok(CrsOutcome {
        dict,
        iterations,
        sizes,
    })
}

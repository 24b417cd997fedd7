//! Hierarchical merging: a descending threshold sweep over a region
//! adjacency graph with boundary-gated similarity, level scoring from merge
//! costs and the Calinski–Harabasz index, top-N retention, per-level global
//! merging and granularity scores.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensors::{cosine_sim, l2_normalize, spatial_gradient, FeatureMap, LabelMap};
use crate::union_find::UnionFind;

/// Persistence-gap bonus added to a level's score.
pub const GAP_BONUS: f64 = 0.2;
/// Weight of the normalized CH term in the level score.
pub const DEFAULT_LAMBDA: f64 = 0.25;
/// A level is a persistence gap when its cost exceeds this multiple of the
/// running mean of preceding costs.
pub const GAP_FACTOR: f64 = 3.0;

/// Which quantity is compared against the running average to flag a
/// persistence gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapCost {
    /// The producing threshold itself. Thresholds only fall during the sweep,
    /// so this never flags a level.
    Threshold,
    /// `1 − threshold`, which grows as the sweep coarsens.
    Dissimilarity,
}

/// Which segment pairs the per-level global merge may join.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeScope {
    /// Only pairs that do not share a border; adjacent pairs were already
    /// judged by the gated sweep.
    NonAdjacent,
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmConfig {
    pub theta_hi: f64,
    pub theta_lo: f64,
    pub step: f64,
    pub beta_bnd: f64,
    pub min_size: usize,
    pub top_n: usize,
    pub lambda: f64,
    pub gap_cost: GapCost,
    pub global_scope: MergeScope,
}

impl Default for HmConfig {
    fn default() -> Self {
        Self {
            theta_hi: 0.99,
            theta_lo: 0.30,
            step: 0.001,
            beta_bnd: 0.0,
            min_size: 50,
            top_n: 40,
            lambda: DEFAULT_LAMBDA,
            gap_cost: GapCost::Threshold,
            global_scope: MergeScope::NonAdjacent,
        }
    }
}

impl HmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.theta_lo < self.theta_hi) {
            return bad(format!(
                "sweep bounds need theta_lo < theta_hi, got {} / {}",
                self.theta_lo, self.theta_hi
            ));
        }
        if !(self.step > 0.0) {
            return bad(format!("sweep step {} must be positive", self.step));
        }
        if self.min_size == 0 || self.top_n == 0 {
            return bad("min_size and top_n must be at least 1".into());
        }
        if !(self.beta_bnd >= 0.0 && self.beta_bnd.is_finite()) {
            return bad(format!("boundary penalty {} must be >= 0", self.beta_bnd));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0,1]", self.lambda));
        }
        Ok(())
    }

    /// Thresholds visited by the sweep, `theta_hi` down to `theta_lo`.
    pub fn thresholds(&self) -> Vec<f64> {
        let n = ((self.theta_hi - self.theta_lo) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| ((self.theta_hi - k as f64 * self.step) * 1e12).round() / 1e12)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct EdgeStat {
    strength_sum: f64,
    pairs: usize,
}

/// Region adjacency graph over a compact label map. Segment ids are the
/// labels `1..=K`.
#[derive(Debug, Clone)]
pub struct SegmentGraph {
    prototypes: Vec<Vec<f64>>,
    areas: Vec<usize>,
    edges: BTreeMap<(usize, usize), EdgeStat>,
    grad_max: f64,
}

impl SegmentGraph {
    pub fn num_segments(&self) -> usize {
        self.areas.len()
    }

    fn index(&self, id: usize) -> Result<usize> {
        if id == 0 || id > self.areas.len() {
            return Err(Error::InvalidArgument(format!(
                "segment id {id} not in 1..={}",
                self.areas.len()
            )));
        }
        Ok(id - 1)
    }

    /// Mean feature vector of segment `id`.
    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id - 1]
    }

    pub fn area(&self, id: usize) -> usize {
        self.areas[id - 1]
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    /// Normalized boundary strength in `[0,1]`; 0 for non-adjacent pairs.
    pub fn boundary(&self, i: usize, j: usize) -> f64 {
        self.edges
            .get(&(i.min(j), i.max(j)))
            .map_or(0.0, |e| bhat(e, self.grad_max))
    }

    /// Adjacent pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.keys().copied()
    }
}

fn bhat(e: &EdgeStat, grad_max: f64) -> f64 {
    if grad_max <= 0.0 || e.pairs == 0 {
        0.0
    } else {
        (e.strength_sum / e.pairs as f64 / grad_max).clamp(0.0, 1.0)
    }
}

fn check_compact(l: &LabelMap) -> Result<usize> {
    let max = l.labels().iter().copied().max().unwrap_or(0) as usize;
    let k = l.num_segments();
    if max != k {
        return Err(Error::InvalidArgument(format!(
            "label map is not compact: max id {max}, {k} segments"
        )));
    }
    Ok(k)
}

/// Visits each 4-connected pixel pair once as `(a, b)` raster indices.
fn for_each_neighbor_pair(h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                f(i, i + 1);
            }
            if y + 1 < h {
                f(i, i + w);
            }
        }
    }
}

/// Builds the adjacency graph. Boundary strength of a pair of segments is the
/// mean, over 4-connected border pixel pairs, of the larger gradient
/// magnitude of the two pixels, divided by the image-wide maximum.
pub fn build_graph(l: &LabelMap, f: &FeatureMap, grad: &FeatureMap) -> Result<SegmentGraph> {
    if !l.matches(f) || !l.matches(grad) || grad.channels() != 1 {
        return Err(Error::ShapeMismatch(
            "labels, features and gradient must share H x W".into(),
        ));
    }
    let k = check_compact(l)?;
    if k == 0 {
        return Err(Error::Empty("foreground"));
    }
    let c = f.channels();
    let mut sums = vec![vec![0.0f64; c]; k];
    let mut areas = vec![0usize; k];
    let mut px = vec![0.0f32; c];
    for (i, &lab) in l.labels().iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let s = lab as usize - 1;
        areas[s] += 1;
        f.pixel_into(i, &mut px);
        for (a, &v) in sums[s].iter_mut().zip(&px) {
            *a += v as f64;
        }
    }
    let prototypes = sums
        .into_iter()
        .zip(&areas)
        .map(|(s, &a)| s.into_iter().map(|v| v / a as f64).collect())
        .collect();
    let g = grad.data();
    let grad_max = g.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    let labels = l.labels();
    let mut edges: BTreeMap<(usize, usize), EdgeStat> = BTreeMap::new();
    for_each_neighbor_pair(l.height(), l.width(), |a, b| {
        let (la, lb) = (labels[a] as usize, labels[b] as usize);
        if la != 0 && lb != 0 && la != lb {
            let e = edges.entry((la.min(lb), la.max(lb))).or_default();
            e.strength_sum += g[a].max(g[b]) as f64;
            e.pairs += 1;
        }
    });
    Ok(SegmentGraph {
        prototypes,
        areas,
        edges,
        grad_max,
    })
}

/// `[cos(p_i, p_j) − β_bnd·B̂(i,j)]·A(i,j)`.
pub fn effective_similarity(g: &SegmentGraph, i: usize, j: usize, beta_bnd: f64) -> Result<f64> {
    g.index(i)?;
    g.index(j)?;
    if !g.adjacent(i, j) {
        return Ok(0.0);
    }
    Ok(cosine_sim(g.prototype(i), g.prototype(j)) - beta_bnd * g.boundary(i, j))
}

/// One recorded partition from the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySnapshot {
    pub labels: LabelMap,
    /// Sweep threshold at which this partition appeared.
    pub tau: f64,
    pub num_segments: usize,
    /// Smallest effective similarity among the batch merges of the producing
    /// step; equals `tau` when the step only absorbed small segments.
    pub tau_floor: f64,
    pub gap: bool,
}

#[derive(Debug, Clone)]
struct Seg {
    sum: Vec<f64>,
    area: usize,
    /// Smallest initial segment index in the group; canonical id.
    first: usize,
    dirty: bool,
}

#[derive(Debug, Clone, Copy)]
struct LiveEdge {
    stat: EdgeStat,
    cos: f64,
}

/// Mutable sweep state keyed by union-find roots over the initial segments.
struct Sweep {
    uf: UnionFind,
    segs: BTreeMap<usize, Seg>,
    edges: BTreeMap<(usize, usize), LiveEdge>,
    grad_max: f64,
}

impl Sweep {
    fn new(g: &SegmentGraph) -> Self {
        let k = g.num_segments();
        let segs = (0..k)
            .map(|s| {
                let sum = g.prototypes[s].iter().map(|v| v * g.areas[s] as f64).collect();
                (
                    s,
                    Seg {
                        sum,
                        area: g.areas[s],
                        first: s,
                        dirty: false,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>();
        let edges = g
            .edges
            .iter()
            .map(|(&(i, j), &stat)| {
                let (a, b) = (i - 1, j - 1);
                let cos = cosine_sim(&segs[&a].sum, &segs[&b].sum);
                ((a, b), LiveEdge { stat, cos })
            })
            .collect();
        Self {
            uf: UnionFind::new(k),
            segs,
            edges,
            grad_max: g.grad_max,
        }
    }

    /// Re-keys segments and edges by current roots after unions.
    fn rebuild(&mut self) {
        let mut segs: BTreeMap<usize, Seg> = BTreeMap::new();
        for (r, s) in std::mem::take(&mut self.segs) {
            let root = self.uf.find(r);
            match segs.get_mut(&root) {
                Some(acc) => {
                    for (a, v) in acc.sum.iter_mut().zip(&s.sum) {
                        *a += v;
                    }
                    acc.area += s.area;
                    acc.first = acc.first.min(s.first);
                    acc.dirty = true;
                }
                None => {
                    let moved = root != r;
                    segs.insert(
                        root,
                        Seg {
                            dirty: moved,
                            ..s
                        },
                    );
                }
            }
        }
        let mut edges: BTreeMap<(usize, usize), LiveEdge> = BTreeMap::new();
        for ((a, b), e) in std::mem::take(&mut self.edges) {
            let (ra, rb) = (self.uf.find(a), self.uf.find(b));
            if ra == rb {
                continue;
            }
            let key = (ra.min(rb), ra.max(rb));
            let entry = edges.entry(key).or_insert(LiveEdge {
                stat: EdgeStat::default(),
                cos: e.cos,
            });
            entry.stat.strength_sum += e.stat.strength_sum;
            entry.stat.pairs += e.stat.pairs;
        }
        for (&(a, b), e) in edges.iter_mut() {
            if segs[&a].dirty || segs[&b].dirty {
                e.cos = cosine_sim(&segs[&a].sum, &segs[&b].sum);
            }
        }
        for s in segs.values_mut() {
            s.dirty = false;
        }
        self.segs = segs;
        self.edges = edges;
    }

    fn effective(&self, e: &LiveEdge, beta_bnd: f64) -> f64 {
        e.cos - beta_bnd * bhat(&e.stat, self.grad_max)
    }

    /// Unions every edge meeting the threshold; returns the smallest merged
    /// similarity, if any merge happened.
    fn batch_merge(&mut self, tau: f64, beta_bnd: f64) -> Option<f64> {
        let merges: Vec<(usize, usize, f64)> = self
            .edges
            .iter()
            .filter_map(|(&(a, b), e)| {
                let s = self.effective(e, beta_bnd);
                (s >= tau).then_some((a, b, s))
            })
            .collect();
        if merges.is_empty() {
            return None;
        }
        let mut floor = f64::INFINITY;
        for (a, b, s) in merges {
            self.uf.union(a, b);
            floor = floor.min(s);
        }
        self.rebuild();
        Some(floor)
    }

    fn neighbors(&self, r: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == r {
                    Some(b)
                } else if b == r {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Absorbs segments smaller than `min_size`, smallest first, each into
    /// its most similar neighbour (raw cosine; ties to the larger area, then
    /// the smaller canonical id). Returns whether anything changed.
    fn absorb_small(&mut self, min_size: usize) -> bool {
        let mut changed = false;
        while self.segs.len() > 1 {
            let candidate = self
                .segs
                .iter()
                .filter(|(_, s)| s.area < min_size)
                .map(|(&r, s)| (s.area, s.first, r))
                .filter(|&(_, _, r)| !self.neighbors(r).is_empty())
                .min();
            let Some((_, _, small)) = candidate else {
                break;
            };
            let target = self
                .neighbors(small)
                .into_iter()
                .map(|n| {
                    let key = (small.min(n), small.max(n));
                    (n, self.edges[&key].cos)
                })
                .max_by(|&(n1, c1), &(n2, c2)| {
                    let (s1, s2) = (&self.segs[&n1], &self.segs[&n2]);
                    c1.total_cmp(&c2)
                        .then(s1.area.cmp(&s2.area))
                        .then(s2.first.cmp(&s1.first))
                })
                .map(|(n, _)| n)
                .expect("has neighbours");
            self.uf.union(small, target);
            self.rebuild();
            changed = true;
        }
        changed
    }

    fn snapshot_labels(&mut self, initial: &LabelMap) -> LabelMap {
        let mut first_of_initial = vec![0u32; self.uf.len()];
        for (s, slot) in first_of_initial.iter_mut().enumerate() {
            let r = self.uf.find(s);
            *slot = self.segs[&r].first as u32 + 1;
        }
        let labels = initial
            .labels()
            .iter()
            .map(|&l| if l == 0 { 0 } else { first_of_initial[l as usize - 1] })
            .collect();
        LabelMap::new(initial.height(), initial.width(), labels)
            .expect("same dims")
            .compact()
            .0
    }
}

/// Running-average persistence-gap test over recorded level costs.
pub fn is_gap(previous_costs: &[f64], cost: f64) -> bool {
    if previous_costs.is_empty() {
        return false;
    }
    let mean = previous_costs.iter().sum::<f64>() / previous_costs.len() as f64;
    cost > GAP_FACTOR * mean
}

fn gap_cost(kind: GapCost, tau: f64) -> f64 {
    match kind {
        GapCost::Threshold => tau,
        GapCost::Dissimilarity => 1.0 - tau,
    }
}

/// Sweep with an explicit gradient map (used for the boundary term only).
pub fn sweep_merge_with_gradient(
    l0: &LabelMap,
    f: &FeatureMap,
    grad: &FeatureMap,
    cfg: &HmConfig,
) -> Result<Vec<HierarchySnapshot>> {
    cfg.validate()?;
    let (initial, k0) = l0.compact();
    if k0 <= 1 {
        return Ok(Vec::new());
    }
    let graph = build_graph(&initial, f, grad)?;
    let mut sweep = Sweep::new(&graph);
    let mut history: Vec<HierarchySnapshot> = Vec::new();
    let mut costs: Vec<f64> = Vec::new();
    let mut current_k = k0;
    for tau in cfg.thresholds() {
        let floor = sweep.batch_merge(tau, cfg.beta_bnd);
        sweep.absorb_small(cfg.min_size);
        let k = sweep.segs.len();
        if k != current_k {
            let cost = gap_cost(cfg.gap_cost, tau);
            let gap = is_gap(&costs, cost);
            costs.push(cost);
            history.push(HierarchySnapshot {
                labels: sweep.snapshot_labels(&initial),
                tau,
                num_segments: k,
                tau_floor: floor.unwrap_or(tau),
                gap,
            });
            current_k = k;
        }
        if k <= 1 || sweep.edges.is_empty() {
            break;
        }
    }
    Ok(history)
}

/// Descending-threshold sweep; records a snapshot whenever the segment
/// count changes (fine to coarse).
pub fn sweep_merge(l0: &LabelMap, f: &FeatureMap, cfg: &HmConfig) -> Result<Vec<HierarchySnapshot>> {
    sweep_merge_with_gradient(l0, f, &spatial_gradient(f), cfg)
}

/// Calinski–Harabasz index over foreground pixels of `f_normed`.
/// Returns `+inf` when the within-cluster dispersion is zero.
pub fn ch_index(l: &LabelMap, f_normed: &FeatureMap) -> Result<f64> {
    if !l.matches(f_normed) {
        return Err(Error::ShapeMismatch("labels and features differ in H x W".into()));
    }
    let mut ids: BTreeMap<u32, usize> = BTreeMap::new();
    for &lab in l.labels().iter().filter(|&&v| v != 0) {
        let next = ids.len();
        ids.entry(lab).or_insert(next);
    }
    let k = ids.len();
    let n = l.foreground_count();
    if k < 2 || k >= n {
        return Err(Error::Undefined { k, n });
    }
    let c = f_normed.channels();
    let mut sums = vec![vec![0.0f64; c]; k];
    let mut counts = vec![0usize; k];
    let mut px = vec![0.0f32; c];
    for (i, &lab) in l.labels().iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let s = ids[&lab];
        counts[s] += 1;
        f_normed.pixel_into(i, &mut px);
        for (a, &v) in sums[s].iter_mut().zip(&px) {
            *a += v as f64;
        }
    }
    let mut global = vec![0.0f64; c];
    for s in &sums {
        for (g, v) in global.iter_mut().zip(s) {
            *g += v;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &m)| s.iter().map(|v| v / m as f64).collect())
        .collect();
    let between: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(ck, &m)| m as f64 * ck.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let mut within = 0.0f64;
    for (i, &lab) in l.labels().iter().enumerate() {
        if lab == 0 {
            continue;
        }
        f_normed.pixel_into(i, &mut px);
        let ck = &centroids[ids[&lab]];
        within += px.iter().zip(ck).map(|(&x, m)| (x as f64 - m).powi(2)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Raw next-merge cost per level: `1 − τ` of the following level, and the
/// largest such cost for the coarsest level. Input thresholds are in sweep
/// order (descending).
pub fn next_merge_costs(taus: &[f64]) -> Vec<f64> {
    let m = taus.len();
    if m == 1 {
        return vec![1.0];
    }
    let mut costs: Vec<f64> = (0..m - 1).map(|i| 1.0 - taus[i + 1]).collect();
    let max = costs.iter().copied().fold(0.0, f64::max);
    costs.push(max);
    costs
}

fn normalize_by_max(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    values
        .iter()
        .map(|&v| {
            if max == f64::INFINITY {
                if v == f64::INFINITY {
                    1.0
                } else {
                    0.0
                }
            } else if max > 0.0 {
                v / max
            } else {
                0.0
            }
        })
        .collect()
}

/// `G_scale`, `G_sem` for one partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Granularity {
    pub scale: f64,
    pub sem: f64,
}

/// A scored hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    pub snapshot: HierarchySnapshot,
    /// Partition after the per-level global merge (equal to the snapshot
    /// labels until [`hierarchical_merge`] applies it).
    pub labels: LabelMap,
    pub score: f64,
    pub cost_norm: f64,
    pub ch: f64,
    pub ch_norm: f64,
    pub bonus: f64,
    pub granularity: Option<Granularity>,
}

impl HierarchyLevel {
    pub fn num_segments(&self) -> usize {
        self.labels.num_segments()
    }
}

/// `s_i = (1−λ)ĉ_i + λ·ĈH_i + γ_i` for every snapshot.
pub fn score_levels(
    history: &[HierarchySnapshot],
    f: &FeatureMap,
    lambda: f64,
) -> Result<Vec<HierarchyLevel>> {
    if history.is_empty() {
        return Err(Error::Empty("hierarchy history"));
    }
    let normed = l2_normalize(f);
    let ch: Vec<f64> = history
        .iter()
        .map(|s| match ch_index(&s.labels, &normed) {
            Ok(v) => Ok(v),
            Err(Error::Undefined { .. }) => Ok(0.0),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let ch_norm = normalize_by_max(&ch);
    let taus: Vec<f64> = history.iter().map(|s| s.tau).collect();
    let cost_norm = normalize_by_max(&next_merge_costs(&taus));
    Ok(history
        .iter()
        .enumerate()
        .map(|(i, snap)| {
            let bonus = if snap.gap { GAP_BONUS } else { 0.0 };
            HierarchyLevel {
                snapshot: snap.clone(),
                labels: snap.labels.clone(),
                score: (1.0 - lambda) * cost_norm[i] + lambda * ch_norm[i] + bonus,
                cost_norm: cost_norm[i],
                ch: ch[i],
                ch_norm: ch_norm[i],
                bonus,
                granularity: None,
            }
        })
        .collect())
}

/// Keeps the `n` best levels by score, descending; ties favour finer levels.
pub fn select_top_n(mut levels: Vec<HierarchyLevel>, n: usize) -> Vec<HierarchyLevel> {
    levels.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.snapshot.num_segments.cmp(&a.snapshot.num_segments))
            .then(b.snapshot.tau.total_cmp(&a.snapshot.tau))
    });
    levels.truncate(n);
    levels
}

fn segment_means(l: &LabelMap, f: &FeatureMap) -> (Vec<u32>, Vec<Vec<f64>>) {
    let ids: Vec<u32> = l
        .labels()
        .iter()
        .copied()
        .filter(|&v| v != 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let c = f.channels();
    let mut sums = vec![vec![0.0f64; c]; ids.len()];
    let mut counts = vec![0usize; ids.len()];
    let mut px = vec![0.0f32; c];
    for (i, &lab) in l.labels().iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let s = ids.binary_search(&lab).expect("collected above");
        counts[s] += 1;
        f.pixel_into(i, &mut px);
        for (a, &v) in sums[s].iter_mut().zip(&px) {
            *a += v as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    (ids, sums)
}

/// 4-connected adjacency between the segment indices of `ids`.
fn adjacency(l: &LabelMap, ids: &[u32]) -> BTreeSet<(usize, usize)> {
    let labels = l.labels();
    let mut out = BTreeSet::new();
    for_each_neighbor_pair(l.height(), l.width(), |a, b| {
        let (la, lb) = (labels[a], labels[b]);
        if la != 0 && lb != 0 && la != lb {
            let i = ids.binary_search(&la).expect("present");
            let j = ids.binary_search(&lb).expect("present");
            out.insert((i.min(j), i.max(j)));
        }
    });
    out
}

/// Unifies segment pairs within `scope` whose mean features have cosine
/// `≥ tau_floor`, transitively; the result is compacted.
pub fn global_merge(
    l: &LabelMap,
    f: &FeatureMap,
    tau_floor: f64,
    scope: MergeScope,
) -> Result<LabelMap> {
    if !l.matches(f) {
        return Err(Error::ShapeMismatch("labels and features differ in H x W".into()));
    }
    let (ids, means) = segment_means(l, f);
    let adjacent = match scope {
        MergeScope::NonAdjacent => adjacency(l, &ids),
        MergeScope::AllPairs => BTreeSet::new(),
    };
    let mut uf = UnionFind::new(ids.len());
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            if !adjacent.contains(&(a, b)) && cosine_sim(&means[a], &means[b]) >= tau_floor {
                uf.union(a, b);
            }
        }
    }
    let (groups, _) = uf.groups();
    let labels = l
        .labels()
        .iter()
        .map(|&lab| {
            if lab == 0 {
                0
            } else {
                groups[ids.binary_search(&lab).expect("present")] as u32 + 1
            }
        })
        .collect();
    Ok(LabelMap::new(l.height(), l.width(), labels)?.compact().0)
}

/// Mean area share and mean capped feature-range ratio over segments.
/// Defined only for `K > 2`.
pub fn granularity_scores(l: &LabelMap, f: &FeatureMap) -> Result<Granularity> {
    if !l.matches(f) {
        return Err(Error::ShapeMismatch("labels and features differ in H x W".into()));
    }
    let ids: Vec<u32> = l
        .labels()
        .iter()
        .copied()
        .filter(|&v| v != 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = ids.len();
    if k <= 2 {
        return Err(Error::NotComputed(k));
    }
    let c = f.channels();
    let mut lo = vec![vec![f32::INFINITY; c]; k];
    let mut hi = vec![vec![f32::NEG_INFINITY; c]; k];
    let mut areas = vec![0usize; k];
    let mut px = vec![0.0f32; c];
    for (i, &lab) in l.labels().iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let s = ids.binary_search(&lab).expect("present");
        areas[s] += 1;
        f.pixel_into(i, &mut px);
        for ch in 0..c {
            lo[s][ch] = lo[s][ch].min(px[ch]);
            hi[s][ch] = hi[s][ch].max(px[ch]);
        }
    }
    let psi = |lo: &[f32], hi: &[f32]| {
        lo.iter().zip(hi).map(|(&a, &b)| b as f64 - a as f64).sum::<f64>() / c as f64
    };
    let mut fg_lo = vec![f32::INFINITY; c];
    let mut fg_hi = vec![f32::NEG_INFINITY; c];
    for s in 0..k {
        for ch in 0..c {
            fg_lo[ch] = fg_lo[ch].min(lo[s][ch]);
            fg_hi[ch] = fg_hi[ch].max(hi[s][ch]);
        }
    }
    let psi_fg = psi(&fg_lo, &fg_hi);
    let total: usize = areas.iter().sum();
    let scale = areas.iter().sum::<usize>() as f64 / (total * k) as f64;
    let sem = if psi_fg == 0.0 {
        0.0
    } else {
        (0..k)
            .map(|s| (psi(&lo[s], &hi[s]) / psi_fg).min(1.0))
            .sum::<f64>()
            / k as f64
    };
    Ok(Granularity { scale, sem })
}

/// Output of the full merging stage.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// Retained levels in score order; index 0 is the best level.
    pub levels: Vec<HierarchyLevel>,
    /// Full sweep history before scoring and retention.
    pub history: Vec<HierarchySnapshot>,
}

/// Sweep, score, keep the top N, globally merge each kept level and attach
/// granularity scores where `K > 2`.
pub fn hierarchical_merge(l0: &LabelMap, f: &FeatureMap, cfg: &HmConfig) -> Result<Hierarchy> {
    let history = sweep_merge(l0, f, cfg)?;
    if history.is_empty() {
        return Ok(Hierarchy {
            levels: Vec::new(),
            history,
        });
    }
    let mut levels = select_top_n(score_levels(&history, f, cfg.lambda)?, cfg.top_n);
    for level in &mut levels {
        level.labels = global_merge(
            &level.snapshot.labels,
            f,
            level.snapshot.tau_floor,
            cfg.global_scope,
        )?;
        level.granularity = granularity_scores(&level.labels, f).ok();
    }
    Ok(Hierarchy { levels, history })
}

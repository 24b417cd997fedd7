//! Independent reference implementations and random instance generators
//! shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ease_core::crs::PrototypeDict;
use ease_core::evalx::ConfusionMatrix;
use ease_core::hmerge::{build_graph, effective_similarity, HierarchySnapshot, HmConfig};
use ease_core::sauce::SeWeights;
use ease_core::{AttentionMap, FeatureMap, LabelMap, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Matrix {
    Matrix::new(rows, cols, rand_vec(r, rows * cols, lo, hi)).unwrap()
}

pub fn rand_features(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, rand_vec(r, c * h * w, -1.0, 1.0)).unwrap()
}

/// Scalar squeeze-and-excitation: straight loops over raw arrays.
pub fn se_scalar(f: &FeatureMap, w: &SeWeights) -> Vec<f64> {
    let (c, n) = (f.channels(), f.num_pixels());
    let hid = w.w1.rows();
    let mut z = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += f.data()[ch * n + i] as f64;
        }
        z[ch] = s / n as f64;
    }
    let mut h = vec![0.0f64; hid];
    for j in 0..hid {
        let mut s = w.b1[j] as f64;
        for ch in 0..c {
            s += w.w1.get(j, ch) as f64 * z[ch];
        }
        h[j] = s / (1.0 + (-s).exp());
    }
    let mut out = vec![0.0f64; c * n];
    for ch in 0..c {
        let mut s = w.b2[ch] as f64;
        for j in 0..hid {
            s += w.w2.get(ch, j) as f64 * h[j];
        }
        let g = 1.0 / (1.0 + (-s).exp());
        for i in 0..n {
            out[ch * n + i] = f.data()[ch * n + i] as f64 * g;
        }
    }
    out
}

/// Random compact label map with at most `k` segments (raster-order
/// Voronoi), optionally with background holes.
pub fn rand_labels(r: &mut ChaCha8Rng, h: usize, w: usize, k: usize, holes: bool) -> LabelMap {
    let seeds: Vec<(usize, usize)> = (0..k).map(|_| (r.random_range(0..h), r.random_range(0..w))).collect();
    let mut labels = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let best = (0..k)
                .min_by_key(|&s| {
                    let (sy, sx) = seeds[s];
                    (sy as i64 - y as i64).pow(2) + (sx as i64 - x as i64).pow(2)
                })
                .unwrap();
            labels[y * w + x] = best as u32 + 1;
        }
    }
    if holes {
        for v in labels.iter_mut() {
            if r.random_bool(0.08) {
                *v = 0;
            }
        }
    }
    LabelMap::new(h, w, labels).unwrap().compact().0
}

/// Features drawn around a per-segment mean, chosen so that segment
/// similarities spread over the sweep range.
pub fn rand_segment_features(r: &mut ChaCha8Rng, l: &LabelMap, c: usize, spread: f32, noise: f32) -> FeatureMap {
    let k = l.labels().iter().copied().max().unwrap_or(0) as usize;
    let base = rand_vec(r, c, 0.5, 1.0);
    let means: Vec<Vec<f32>> = (0..=k)
        .map(|_| base.iter().map(|b| b + r.random_range(-spread..spread)).collect())
        .collect();
    let n = l.len();
    let mut data = vec![0.0f32; c * n];
    for (i, &lab) in l.labels().iter().enumerate() {
        for ch in 0..c {
            data[ch * n + i] = means[lab as usize][ch] + r.random_range(-noise..=noise);
        }
    }
    FeatureMap::new(c, l.height(), l.width(), data).unwrap()
}

/// Segment id → (area, mean vector, smallest initial label covered).
fn seg_stats(cur: &LabelMap, initial: &LabelMap, f: &FeatureMap) -> BTreeMap<u32, (usize, Vec<f64>, u32)> {
    let mut out: BTreeMap<u32, (usize, Vec<f64>, u32)> = BTreeMap::new();
    for (i, (&l, &l0)) in cur.labels().iter().zip(initial.labels()).enumerate() {
        if l == 0 {
            continue;
        }
        let e = out.entry(l).or_insert((0, vec![0.0; f.channels()], u32::MAX));
        e.0 += 1;
        for ch in 0..f.channels() {
            e.1[ch] += f.get(ch, i / f.width(), i % f.width()) as f64;
        }
        e.2 = e.2.min(l0);
    }
    for e in out.values_mut() {
        let a = e.0 as f64;
        e.1.iter_mut().for_each(|v| *v /= a);
    }
    out
}

fn neighbours(cur: &LabelMap) -> BTreeMap<u32, Vec<u32>> {
    let (h, w) = (cur.height(), cur.width());
    let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut link = |a: u32, b: u32| {
        if a != 0 && b != 0 && a != b {
            let e = adj.entry(a).or_default();
            if !e.contains(&b) {
                e.push(b);
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let v = cur.get(y, x);
            if x + 1 < w {
                link(v, cur.get(y, x + 1));
                link(cur.get(y, x + 1), v);
            }
            if y + 1 < h {
                link(v, cur.get(y + 1, x));
                link(cur.get(y + 1, x), v);
            }
        }
    }
    adj
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (d / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Relabels pixels so that every segment carries its smallest initial label,
/// then compacts.
fn canonical(cur: &LabelMap, initial: &LabelMap, f: &FeatureMap) -> LabelMap {
    let stats = seg_stats(cur, initial, f);
    let labels = cur.labels().iter().map(|&l| if l == 0 { 0 } else { stats[&l].2 }).collect();
    LabelMap::new(cur.height(), cur.width(), labels).unwrap().compact().0
}

/// Naive sweep: each threshold rebuilds the graph from pixels, evaluates
/// every pair, merges by repeated relabeling, then absorbs small segments
/// one at a time with full recomputation.
pub fn naive_sweep(l0: &LabelMap, f: &FeatureMap, grad: &FeatureMap, cfg: &HmConfig) -> Vec<HierarchySnapshot> {
    let (initial, k0) = l0.compact();
    let mut out = Vec::new();
    if k0 <= 1 {
        return out;
    }
    let mut cur = initial.clone();
    let mut k_prev = k0;
    let mut costs: Vec<f64> = Vec::new();
    for tau in cfg.thresholds() {
        let g = build_graph(&cur, f, grad).unwrap();
        let k = g.num_segments();
        let mut group: Vec<usize> = (0..=k).collect();
        let mut floor: Option<f64> = None;
        let mut pairs = Vec::new();
        for i in 1..=k {
            for j in i + 1..=k {
                if !g.adjacent(i, j) {
                    continue;
                }
                let s = effective_similarity(&g, i, j, cfg.beta_bnd).unwrap();
                if s >= tau {
                    pairs.push((i, j));
                    floor = Some(floor.map_or(s, |m: f64| m.min(s)));
                }
            }
        }
        loop {
            let mut changed = false;
            for &(i, j) in &pairs {
                let (gi, gj) = (group[i], group[j]);
                if gi != gj {
                    for v in group.iter_mut() {
                        if *v == gj {
                            *v = gi;
                        }
                    }
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let merged: Vec<u32> = cur.labels().iter().map(|&l| if l == 0 { 0 } else { group[l as usize] as u32 }).collect();
        cur = canonical(&LabelMap::new(cur.height(), cur.width(), merged).unwrap(), &initial, f);
        loop {
            let stats = seg_stats(&cur, &initial, f);
            if stats.len() <= 1 {
                break;
            }
            let adj = neighbours(&cur);
            let small = stats
                .iter()
                .filter(|(l, s)| s.0 < cfg.min_size && adj.get(l).is_some_and(|n| !n.is_empty()))
                .min_by_key(|(_, s)| (s.0, s.2))
                .map(|(&l, _)| l);
            let Some(small) = small else { break };
            let ps = &stats[&small].1;
            let target = adj[&small]
                .iter()
                .copied()
                .max_by(|a, b| {
                    let (sa, sb) = (&stats[a], &stats[b]);
                    cos64(ps, &sa.1)
                        .total_cmp(&cos64(ps, &sb.1))
                        .then(sa.0.cmp(&sb.0))
                        .then(sb.2.cmp(&sa.2))
                })
                .unwrap();
            let merged: Vec<u32> = cur.labels().iter().map(|&l| if l == small { target } else { l }).collect();
            cur = canonical(&LabelMap::new(cur.height(), cur.width(), merged).unwrap(), &initial, f);
        }
        let k_now = cur.num_segments();
        if k_now != k_prev {
            let cost = match cfg.gap_cost {
                ease_core::hmerge::GapCost::Threshold => tau,
                ease_core::hmerge::GapCost::Dissimilarity => 1.0 - tau,
            };
            let gap = !costs.is_empty() && cost > 3.0 * costs.iter().sum::<f64>() / costs.len() as f64;
            costs.push(cost);
            out.push(HierarchySnapshot {
                labels: cur.clone(),
                tau,
                num_segments: k_now,
                tau_floor: floor.unwrap_or(tau),
                gap,
            });
            k_prev = k_now;
        }
        if k_now <= 1 {
            break;
        }
    }
    out
}

/// True when every segment of `fine` lies inside one segment of `coarse`.
pub fn is_coarsening(fine: &LabelMap, coarse: &LabelMap) -> bool {
    let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
    for (&a, &b) in fine.labels().iter().zip(coarse.labels()) {
        if (a == 0) != (b == 0) {
            return false;
        }
        if a == 0 {
            continue;
        }
        if *owner.entry(a).or_insert(b) != b {
            return false;
        }
    }
    true
}

/// Calinski–Harabasz by the textbook formula, clusters keyed by label.
pub fn ch_oracle(l: &LabelMap, f: &FeatureMap) -> Option<f64> {
    let c = f.channels();
    let w = f.width();
    let pts: Vec<(u32, Vec<f64>)> = l
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, &v)| (v, (0..c).map(|ch| f.get(ch, i / w, i % w) as f64).collect()))
        .collect();
    let n = pts.len();
    let mut clusters: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
    for (lab, p) in &pts {
        clusters.entry(*lab).or_default().push(p);
    }
    let k = clusters.len();
    if k < 2 || k >= n {
        return None;
    }
    let mean = |ps: &[&Vec<f64>]| -> Vec<f64> {
        (0..c).map(|ch| ps.iter().map(|p| p[ch]).sum::<f64>() / ps.len() as f64).collect()
    };
    let all: Vec<&Vec<f64>> = pts.iter().map(|(_, p)| p).collect();
    let gm = mean(&all);
    let mut b = 0.0;
    let mut wsum = 0.0;
    for ps in clusters.values() {
        let cm = mean(ps);
        b += ps.len() as f64 * cm.iter().zip(&gm).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        for p in ps {
            wsum += p.iter().zip(&cm).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    if wsum == 0.0 {
        return Some(f64::INFINITY);
    }
    Some((b / (k - 1) as f64) / (wsum / (n - k) as f64))
}

/// Random confusion matrix with small counts (ties likely).
pub fn rand_confusion(r: &mut ChaCha8Rng, p: usize, g: usize) -> ConfusionMatrix {
    let max = r.random_range(1..12u64);
    let counts = (0..p * g).map(|_| r.random_range(0..=max)).collect();
    ConfusionMatrix::from_counts((1..=p as u32).collect(), (1..=g as u32).collect(), counts).unwrap()
}

/// Scores a row→column mapping from scratch: unmatched rows join the
/// background column, IoU per present class, unweighted mean.
pub fn miou_oracle(cm: &ConfusionMatrix, mapping: &[Option<usize>], bg: Option<usize>) -> f64 {
    let (p_n, g_n) = (cm.num_pred(), cm.num_gt());
    let mut sum = 0.0;
    let mut present = 0;
    for g in 0..g_n {
        let col: u64 = (0..p_n).map(|p| cm.get(p, g)).sum();
        if col == 0 {
            continue;
        }
        let rows: Vec<usize> = (0..p_n).filter(|&p| mapping[p].or(bg) == Some(g)).collect();
        let tp: u64 = rows.iter().map(|&p| cm.get(p, g)).sum();
        let pred: u64 = rows.iter().map(|&p| (0..g_n).map(|gg| cm.get(p, gg)).sum::<u64>()).sum();
        sum += tp as f64 / (pred + col - tp) as f64;
        present += 1;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// All injective maps from rows to columns when `P ≤ G`, or from columns to
/// rows otherwise, expressed as row→column mappings.
pub fn all_matchings(p: usize, g: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(i: usize, n: usize, m: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(i + 1, n, m, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let (n, m) = (p.min(g), p.max(g));
    let mut raw = Vec::new();
    rec(0, n, m, &mut vec![false; m], &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|inj| {
            let mut map = vec![None; p];
            for (i, &j) in inj.iter().enumerate() {
                if p <= g {
                    map[i] = Some(j);
                } else {
                    map[j] = Some(i);
                }
            }
            map
        })
        .collect()
}

/// Best matched intersection and the mIoU values of all matchings that
/// achieve it with the largest summed pair IoU (within 1e-12).
pub fn hungarian_oracle(cm: &ConfusionMatrix, bg: Option<usize>) -> (u64, Vec<f64>) {
    let (p_n, g_n) = (cm.num_pred(), cm.num_gt());
    let row: Vec<u64> = (0..p_n).map(|p| (0..g_n).map(|g| cm.get(p, g)).sum()).collect();
    let col: Vec<u64> = (0..g_n).map(|g| (0..p_n).map(|p| cm.get(p, g)).sum()).collect();
    let pair_iou = |p: usize, g: usize| {
        let i = cm.get(p, g);
        let u = row[p] + col[g] - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    };
    let scored: Vec<(u64, f64, Vec<Option<usize>>)> = all_matchings(p_n, g_n)
        .into_iter()
        .map(|m| {
            let inter = m.iter().enumerate().filter_map(|(p, g)| g.map(|g| cm.get(p, g))).sum();
            let tie = m.iter().enumerate().filter_map(|(p, g)| g.map(|g| pair_iou(p, g))).sum();
            (inter, tie, m)
        })
        .collect();
    let best = scored.iter().map(|s| s.0).max().unwrap();
    let best_tie = scored.iter().filter(|s| s.0 == best).map(|s| s.1).fold(f64::MIN, f64::max);
    let mious = scored
        .iter()
        .filter(|s| s.0 == best && s.1 >= best_tie - 1e-12)
        .map(|s| miou_oracle(cm, &s.2, bg))
        .collect();
    (best, mious)
}

/// Confusion counts by scalar loops.
pub fn confusion_oracle(pred: &LabelMap, gt: &LabelMap) -> BTreeMap<(u32, u32), u64> {
    let mut m = BTreeMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        *m.entry((p, g)).or_insert(0) += 1;
    }
    m
}

/// Random valid attention rows.
pub fn rand_attention(r: &mut ChaCha8Rng, n_hr: usize, n_lr: usize) -> AttentionMap {
    let mut rows = Vec::with_capacity(n_hr * n_lr);
    for _ in 0..n_hr {
        let raw: Vec<f64> = (0..n_lr).map(|_| r.random_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum::<f64>().max(1e-12);
        rows.extend(raw.iter().map(|v| (v / s) as f32));
    }
    AttentionMap::new(n_hr, n_lr, rows).unwrap()
}

pub fn rand_dict(r: &mut ChaCha8Rng, k: usize, c: usize) -> PrototypeDict {
    PrototypeDict::new(c, rand_vec(r, k * c, -1.0, 1.0)).unwrap()
}

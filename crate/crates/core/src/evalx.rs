//! Segmentation metrics: Hungarian-matched mIoU with many-to-one background
//! matching, pixel accuracy and centerline IoU.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensors::LabelMap;

/// Default dilation tolerance for centerline IoU, in pixels.
pub const CL_TOLERANCE: usize = 4;

/// Pixel counts of predicted cluster (row) against ground-truth class
/// (column). Row and column ids are the sorted distinct labels seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pred_ids: Vec<u32>,
    gt_ids: Vec<u32>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Builds a matrix directly from counts, rows are predictions.
    pub fn from_counts(pred_ids: Vec<u32>, gt_ids: Vec<u32>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != pred_ids.len() * gt_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for a {}x{} matrix",
                counts.len(),
                pred_ids.len(),
                gt_ids.len()
            )));
        }
        Ok(Self {
            pred_ids,
            gt_ids,
            counts,
        })
    }

    pub fn num_pred(&self) -> usize {
        self.pred_ids.len()
    }

    pub fn num_gt(&self) -> usize {
        self.gt_ids.len()
    }

    pub fn pred_ids(&self) -> &[u32] {
        &self.pred_ids
    }

    pub fn gt_ids(&self) -> &[u32] {
        &self.gt_ids
    }

    pub fn get(&self, p: usize, g: usize) -> u64 {
        self.counts[p * self.gt_ids.len() + g]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, p: usize) -> u64 {
        (0..self.num_gt()).map(|g| self.get(p, g)).sum()
    }

    pub fn col_sum(&self, g: usize) -> u64 {
        (0..self.num_pred()).map(|p| self.get(p, g)).sum()
    }

    /// Column index of a ground-truth label.
    pub fn gt_index(&self, label: u32) -> Option<usize> {
        self.gt_ids.binary_search(&label).ok()
    }

    /// Rows reordered by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let g = self.num_gt();
        let mut counts = Vec::with_capacity(self.counts.len());
        for &p in perm {
            counts.extend_from_slice(&self.counts[p * g..(p + 1) * g]);
        }
        Self {
            pred_ids: perm.iter().map(|&p| self.pred_ids[p]).collect(),
            gt_ids: self.gt_ids.clone(),
            counts,
        }
    }
}

/// Counts over pixels whose ground-truth label is not in `ignore`.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, ignore: &[u32]) -> Result<ConfusionMatrix> {
    if !pred.same_dims(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let keep = |g: u32| !ignore.contains(&g);
    let pairs = pred.labels().iter().zip(gt.labels()).filter(|(_, &g)| keep(g));
    let pred_ids: Vec<u32> = pairs.clone().map(|(&p, _)| p).collect::<BTreeSet<_>>().into_iter().collect();
    let gt_ids: Vec<u32> = pairs.clone().map(|(_, &g)| g).collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts = vec![0u64; pred_ids.len() * gt_ids.len()];
    for (&p, &g) in pairs {
        let r = pred_ids.binary_search(&p).expect("collected");
        let c = gt_ids.binary_search(&g).expect("collected");
        counts[r * gt_ids.len() + c] += 1;
    }
    Ok(ConfusionMatrix {
        pred_ids,
        gt_ids,
        counts,
    })
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column per row.
fn hungarian_min(cost: &[Vec<i128>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Fixed-point scale of the pair-IoU tie-break term.
const TIE_SCALE: i128 = 1 << 32;

/// Matching weight of a (prediction, class) pair: intersection first, then
/// pairwise IoU to break ties. The tie-break term summed over any matching
/// stays below one intersection unit.
pub fn match_weight(cm: &ConfusionMatrix, p: usize, g: usize) -> i128 {
    let k = cm.num_pred().min(cm.num_gt()) as i128;
    let inter = cm.get(p, g) as i128;
    let union = cm.row_sum(p) as i128 + cm.col_sum(g) as i128 - inter;
    let tie = if union == 0 { 0 } else { inter * TIE_SCALE / union };
    inter * (k + 1) * TIE_SCALE + tie
}

/// Result of Hungarian matching.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched class column per predicted row, before background remap.
    pub mapping: Vec<Option<usize>>,
    /// IoU per ground-truth column; `None` for classes absent from the GT.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Sum of intersections over matched pairs.
    pub matched_intersection: u64,
    /// Fraction of evaluated pixels whose (remapped) prediction is correct.
    pub pixel_accuracy: f64,
}

/// Per-class IoU and mIoU for a fixed row→column mapping. Unmatched rows go
/// to `background` when given.
pub fn score_mapping(
    cm: &ConfusionMatrix,
    mapping: &[Option<usize>],
    background: Option<usize>,
) -> (Vec<Option<f64>>, f64, f64) {
    let g_n = cm.num_gt();
    let target: Vec<Option<usize>> = mapping.iter().map(|m| m.or(background)).collect();
    let mut tp = vec![0u64; g_n];
    let mut predicted = vec![0u64; g_n];
    for (p, t) in target.iter().enumerate() {
        if let Some(g) = *t {
            tp[g] += cm.get(p, g);
            predicted[g] += cm.row_sum(p);
        }
    }
    let mut per_class = vec![None; g_n];
    let mut sum = 0.0;
    let mut present = 0usize;
    for g in 0..g_n {
        let col = cm.col_sum(g);
        if col == 0 {
            continue;
        }
        let fp = predicted[g] - tp[g];
        let fn_ = col - tp[g];
        let iou = tp[g] as f64 / (tp[g] + fp + fn_) as f64;
        per_class[g] = Some(iou);
        sum += iou;
        present += 1;
    }
    let miou = if present == 0 { 0.0 } else { sum / present as f64 };
    let total = cm.total();
    let acc = if total == 0 {
        0.0
    } else {
        tp.iter().sum::<u64>() as f64 / total as f64
    };
    (per_class, miou, acc)
}

/// Optimal one-to-one matching maximizing total intersection, then IoU with
/// unmatched predictions remapped to `background` when one is declared.
pub fn hungarian_miou(cm: &ConfusionMatrix, background: Option<usize>) -> Result<MatchResult> {
    let (p_n, g_n) = (cm.num_pred(), cm.num_gt());
    if p_n == 0 || g_n == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    if let Some(b) = background {
        if b >= g_n {
            return Err(Error::InvalidArgument(format!(
                "background column {b} outside {g_n} classes"
            )));
        }
    }
    // Rows are solved in count-vector order so equal-weight ties resolve the
    // same way whatever order the predictions arrive in.
    let mut order: Vec<usize> = (0..p_n).collect();
    order.sort_by(|&a, &b| {
        (0..g_n)
            .map(|g| cm.get(a, g))
            .cmp((0..g_n).map(|g| cm.get(b, g)))
    });
    let mut mapping = vec![None; p_n];
    if p_n <= g_n {
        let cost: Vec<Vec<i128>> = order
            .iter()
            .map(|&p| (0..g_n).map(|g| -match_weight(cm, p, g)).collect())
            .collect();
        for (i, g) in hungarian_min(&cost).into_iter().enumerate() {
            mapping[order[i]] = Some(g);
        }
    } else {
        let cost: Vec<Vec<i128>> = (0..g_n)
            .map(|g| order.iter().map(|&p| -match_weight(cm, p, g)).collect())
            .collect();
        for (g, i) in hungarian_min(&cost).into_iter().enumerate() {
            mapping[order[i]] = Some(g);
        }
    }
    let matched_intersection = mapping
        .iter()
        .enumerate()
        .filter_map(|(p, m)| m.map(|g| cm.get(p, g)))
        .sum();
    let (per_class, miou, pixel_accuracy) = score_mapping(cm, &mapping, background);
    Ok(MatchResult {
        mapping,
        per_class,
        miou,
        matched_intersection,
        pixel_accuracy,
    })
}

/// Mean of per-image results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub images: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub cl_iou: Option<f64>,
}

impl EvalSummary {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images={}", self.images).unwrap();
        writeln!(s, "miou={}", self.miou).unwrap();
        writeln!(s, "pixel_accuracy={}", self.pixel_accuracy).unwrap();
        if let Some(c) = self.cl_iou {
            writeln!(s, "cl_iou={c}").unwrap();
        }
        s
    }
}

/// `class,iou` rows for classes present in the GT.
pub fn per_class_csv(cm: &ConfusionMatrix, result: &MatchResult) -> String {
    let mut s = String::from("class,iou\n");
    for (g, iou) in result.per_class.iter().enumerate() {
        if let Some(v) = iou {
            writeln!(s, "{},{v}", cm.gt_ids()[g]).unwrap();
        }
    }
    s
}

/// Binary mask on an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Pixels whose label is in `labels`.
    pub fn from_labels(l: &LabelMap, labels: &[u32]) -> Self {
        Self {
            height: l.height(),
            width: l.width(),
            bits: l.labels().iter().map(|v| labels.contains(v)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.get(y as usize, x as usize)
    }
}

/// Zhang–Suen thinning; pixels outside the grid count as background.
pub fn zhang_suen(mask: &BinaryMask) -> BinaryMask {
    let mut img = mask.clone();
    let (h, w) = (mask.height as isize, mask.width as isize);
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !img.at(y, x) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        img.at(y - 1, x),
                        img.at(y - 1, x + 1),
                        img.at(y, x + 1),
                        img.at(y + 1, x + 1),
                        img.at(y + 1, x),
                        img.at(y + 1, x - 1),
                        img.at(y, x - 1),
                        img.at(y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let keep = if step == 0 {
                        (p2 && p4 && p6) || (p4 && p6 && p8)
                    } else {
                        (p2 && p4 && p8) || (p2 && p6 && p8)
                    };
                    if !keep {
                        remove.push((y as usize, x as usize));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                img.set(y, x, false);
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Dilation with a `(2r+1)`-square (Chebyshev radius `r`) structuring element.
pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    // separable: rows then columns
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w.saturating_sub(1));
            rows[y * w + x] = (lo..=hi).any(|xx| mask.bits[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h.saturating_sub(1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    BinaryMask {
        height: h,
        width: w,
        bits: out,
    }
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x && y).count()
}

/// Centerline IoU:
/// `(|skel(P) ∩ dil(G)| + |skel(G) ∩ dil(skel(P))|) / (|skel(P)| + |skel(G)|)`.
pub fn cl_iou(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch("binary masks differ in size".into()));
    }
    let sp = zhang_suen(pred);
    let sg = zhang_suen(gt);
    let (np, ng) = (sp.count(), sg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let hits = overlap(&sp, &dilate(gt, tolerance)) + overlap(&sg, &dilate(&sp, tolerance));
    Ok(hits as f64 / (np + ng) as f64)
}

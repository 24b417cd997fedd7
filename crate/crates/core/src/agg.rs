//! Dense per-pixel assignment by blended feature/attention cost, followed by
//! edge-aware majority smoothing.

use crate::crs::{argmax, quantize_features, PrototypeDict, SimilarityTable};
use crate::error::{Error, Result};
use crate::tensors::{spatial_gradient, AttentionMap, FeatureMap, LabelMap, Matrix};

pub const DEFAULT_ALPHA: f64 = 0.75;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_MAJORITY: f64 = 5.0 / 8.0;
pub const DEFAULT_GRADIENT_PERCENTILE: f64 = 75.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    Off,
    /// One synchronous pass: every decision reads the input map.
    SinglePass,
    /// Repeat synchronous passes until nothing changes or the cap is hit.
    Fixpoint { max_passes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggConfig {
    pub alpha: f64,
    pub beta: f64,
    pub smoothing: Smoothing,
    /// Fraction of the in-bounds 8-neighbourhood a single label must reach.
    pub majority: f64,
    /// Pixels whose gradient exceeds this percentile of the image are kept.
    pub gradient_percentile: f64,
}

impl Default for AggConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            smoothing: Smoothing::SinglePass,
            majority: DEFAULT_MAJORITY,
            gradient_percentile: DEFAULT_GRADIENT_PERCENTILE,
        }
    }
}

impl AggConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost weights alpha={} beta={} must be non-negative with a positive sum",
                self.alpha, self.beta
            )));
        }
        if !(self.majority > 0.5 && self.majority <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "majority fraction {} must lie in (0.5, 1]",
                self.majority
            )));
        }
        if !(0.0..=100.0).contains(&self.gradient_percentile) {
            return Err(Error::InvalidArgument(format!(
                "gradient percentile {} outside [0,100]",
                self.gradient_percentile
            )));
        }
        Ok(())
    }
}

/// One-hot token-to-prototype grouping, stored as the hot index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMatrix {
    groups: usize,
    assignment: Vec<usize>,
}

impl GroupMatrix {
    pub fn new(groups: usize, assignment: Vec<usize>) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Empty("group matrix"));
        }
        if assignment.iter().any(|&g| g >= groups) {
            return Err(Error::ShapeMismatch("group index out of range".into()));
        }
        Ok(Self { groups, assignment })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.assignment.len(), self.groups);
        for (r, &g) in self.assignment.iter().enumerate() {
            m.row_mut(r)[g] = 1.0;
        }
        m
    }
}

/// Assigns each coarse token to its nearest prototype.
pub fn group_matrix(tokens: &Matrix, dict: &PrototypeDict) -> Result<GroupMatrix> {
    GroupMatrix::new(dict.len(), quantize_features(tokens, dict)?)
}

/// `A · G`: total attention each pixel pays to each prototype's tokens.
pub fn pool_attention(a: &AttentionMap, g: &GroupMatrix) -> Result<Matrix> {
    if a.n_lr() != g.assignment.len() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {} keys, grouping covers {} tokens",
            a.n_lr(),
            g.assignment.len()
        )));
    }
    let mut out = Matrix::zeros(a.n_hr(), g.groups);
    let mut acc = vec![0.0f64; g.groups];
    for (i, row) in a.row_iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (&w, &grp) in row.iter().zip(&g.assignment) {
            acc[grp] += w as f64;
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// `y_i = argmin_k α(1 − cos(f_i, d_k)) + β(1 − A^m[i,k])`, ties to the
/// lowest `k`. Output labels are `k + 1`; 0 stays reserved for background.
pub fn assign_labels(
    f_hr: &FeatureMap,
    dict: &PrototypeDict,
    a_m: &Matrix,
    cfg: &AggConfig,
) -> Result<LabelMap> {
    cfg.validate()?;
    if dict.channels() != f_hr.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{}-d pixels vs {}-d prototypes",
            f_hr.channels(),
            dict.channels()
        )));
    }
    if a_m.rows() != f_hr.num_pixels() || a_m.cols() != dict.len() {
        return Err(Error::ShapeMismatch(format!(
            "affinity {}x{} vs {} pixels and {} prototypes",
            a_m.rows(),
            a_m.cols(),
            f_hr.num_pixels(),
            dict.len()
        )));
    }
    let table = SimilarityTable::new(dict);
    let mut sims = vec![0.0; dict.len()];
    let labels = f_hr
        .to_tokens()
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            table.similarities(row, &mut sims);
            if cfg.beta == 0.0 {
                // pure feature cost: identical decisions to quantization
                return argmax(&sims) as u32 + 1;
            }
            let mut best = (0usize, f64::INFINITY);
            for (k, (&s, &aff)) in sims.iter().zip(a_m.row(i)).enumerate() {
                let cost = cfg.alpha * (1.0 - s) + cfg.beta * (1.0 - aff as f64);
                if cost < best.1 {
                    best = (k, cost);
                }
            }
            best.0 as u32 + 1
        })
        .collect();
    LabelMap::new(f_hr.height(), f_hr.width(), labels)
}

/// Linear-interpolated percentile (`p` in `[0,100]`) of the values.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn smooth_pass(y: &LabelMap, grad: &[f32], cutoff: f64, majority: f64) -> LabelMap {
    let (h, w) = (y.height(), y.width());
    let src = y.labels();
    let mut out = src.to_vec();
    let mut counts: Vec<(u32, usize)> = Vec::with_capacity(8);
    for yy in 0..h {
        for xx in 0..w {
            let i = yy * w + xx;
            let own = src[i];
            if own == 0 || grad[i] as f64 > cutoff {
                continue;
            }
            counts.clear();
            let mut total = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (yy as i64 + dy, xx as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    total += 1;
                    let l = src[ny as usize * w + nx as usize];
                    match counts.iter_mut().find(|(lab, _)| *lab == l) {
                        Some(entry) => entry.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            if let Some(&(l, _)) = counts
                .iter()
                .find(|&&(l, n)| l != own && l != 0 && n as f64 >= majority * total as f64)
            {
                out[i] = l;
            }
        }
    }
    LabelMap::new(h, w, out).expect("same dims")
}

/// Edge-aware smoothing against a precomputed gradient magnitude map.
pub fn edge_smooth_with_gradient(
    y: &LabelMap,
    grad: &FeatureMap,
    cfg: &AggConfig,
) -> Result<LabelMap> {
    if !y.matches(grad) || grad.channels() != 1 {
        return Err(Error::ShapeMismatch(
            "gradient map must be 1xHxW matching the label map".into(),
        ));
    }
    let cutoff = percentile(grad.data(), cfg.gradient_percentile);
    let g = grad.data();
    Ok(match cfg.smoothing {
        Smoothing::Off => y.clone(),
        Smoothing::SinglePass => smooth_pass(y, g, cutoff, cfg.majority),
        Smoothing::Fixpoint { max_passes } => {
            let mut cur = y.clone();
            for _ in 0..max_passes {
                let next = smooth_pass(&cur, g, cutoff, cfg.majority);
                if next == cur {
                    break;
                }
                cur = next;
            }
            cur
        }
    })
}

/// Reassigns a pixel to a label holding at least `majority` of its
/// neighbours, unless the pixel sits on a strong feature gradient.
pub fn edge_smooth(y: &LabelMap, f_hr: &FeatureMap, cfg: &AggConfig) -> Result<LabelMap> {
    if !y.matches(f_hr) {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{} vs features {}x{}",
            y.height(),
            y.width(),
            f_hr.height(),
            f_hr.width()
        )));
    }
    edge_smooth_with_gradient(y, &spatial_gradient(f_hr), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_matrix_examples() {
        let d = PrototypeDict::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let t = Matrix::new(1, 2, vec![2.0, 2.0]).unwrap();
        let g = group_matrix(&t, &d).unwrap();
        assert_eq!(g.assignment(), &[2]);
        assert_eq!(g.to_dense().row(0), &[0.0, 0.0, 1.0]);

        let single = PrototypeDict::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let t = Matrix::new(3, 2, vec![0.0, 1.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(group_matrix(&t, &single).unwrap().assignment(), &[0, 0, 0]);
    }

    #[test]
    fn pooling_identity_and_single_group() {
        let a = AttentionMap::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.4, 0.0]).unwrap();
        let id = GroupMatrix::new(3, vec![0, 1, 2]).unwrap();
        assert_eq!(pool_attention(&a, &id).unwrap().data(), a.data());
        let one = GroupMatrix::new(1, vec![0, 0, 0]).unwrap();
        let pooled = pool_attention(&a, &one).unwrap();
        assert!(pooled.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn attention_only_cost_follows_groups() {
        let f = FeatureMap::new(2, 1, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let d = PrototypeDict::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let am = Matrix::new(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = AggConfig {
            alpha: 0.0,
            beta: 1.0,
            ..Default::default()
        };
        assert_eq!(assign_labels(&f, &d, &am, &cfg).unwrap().labels(), &[2, 1, 2]);
    }

    #[test]
    fn invalid_weights_rejected() {
        let cfg = AggConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uniform_map_unchanged() {
        let y = LabelMap::filled(4, 4, 3);
        let f = FeatureMap::zeros(2, 4, 4);
        assert_eq!(edge_smooth(&y, &f, &AggConfig::default()).unwrap(), y);
    }

    #[test]
    fn speck_in_flat_region_absorbed() {
        let mut labels = vec![1u32; 25];
        labels[12] = 2;
        let y = LabelMap::new(5, 5, labels).unwrap();
        let f = FeatureMap::zeros(2, 5, 5);
        let out = edge_smooth(&y, &f, &AggConfig::default()).unwrap();
        assert!(out.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn speck_on_strong_edge_preserved() {
        // step edge between columns 2 and 3 of a 6x6 map; only column 2 has
        // non-zero gradient, so the 75th percentile is 0
        let (h, w) = (6, 6);
        let data: Vec<f32> = (0..h * w).map(|i| if i % w >= 3 { 1.0 } else { 0.0 }).collect();
        let f = FeatureMap::new(1, h, w, data).unwrap();
        let grad = spatial_gradient(&f);
        assert_eq!(grad.get(0, 2, 2), 1.0);
        assert_eq!(percentile(grad.data(), 75.0), 0.0);
        let mut labels = vec![1u32; h * w];
        labels[2 * w + 2] = 2;
        let y = LabelMap::new(h, w, labels).unwrap();
        let out = edge_smooth(&y, &f, &AggConfig::default()).unwrap();
        assert_eq!(out.get(2, 2), 2);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0, 20.0, 30.0, 40.0], 75.0), 30.0);
        assert_eq!(percentile(&[0.0, 10.0], 75.0), 7.5);
    }

    #[test]
    fn fixpoint_erodes_further_than_single_pass() {
        // 3x3 block of label 2 in a 7x7 field of label 1
        let mut labels = vec![1u32; 49];
        for y in 2..5 {
            for x in 2..5 {
                labels[y * 7 + x] = 2;
            }
        }
        let y = LabelMap::new(7, 7, labels).unwrap();
        let f = FeatureMap::zeros(1, 7, 7);
        let single = edge_smooth(&y, &f, &AggConfig::default()).unwrap();
        // only the block corners see 5 outside neighbours
        let twos: Vec<usize> = (0..49).filter(|&i| single.labels()[i] == 2).collect();
        assert_eq!(twos, vec![17, 23, 24, 25, 31]);
        let fix = edge_smooth(
            &y,
            &f,
            &AggConfig {
                smoothing: Smoothing::Fixpoint { max_passes: 10 },
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fix.labels().iter().all(|&l| l == 1));
    }
}

//! Granularity calibration, level selection and the boundary-penalty sweep.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hmerge::{granularity_scores, Granularity, HierarchyLevel};
use crate::tensors::{FeatureMap, LabelMap};

/// Boundary penalties tried by default.
pub const DEFAULT_BETAS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GranularityTarget {
    pub g_scale: f64,
    pub g_sem: f64,
    /// Images that contributed (those with more than two GT segments).
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    #[default]
    Mean,
    Median,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Target granularity from ground-truth maps scored with each image's
/// features. Images whose GT has `K ≤ 2` are skipped.
pub fn calibrate_target(
    gt_maps: &[LabelMap],
    features: &[FeatureMap],
    aggregate: Aggregate,
) -> Result<GranularityTarget> {
    if gt_maps.len() != features.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth maps for {} feature maps",
            gt_maps.len(),
            features.len()
        )));
    }
    let mut scores: Vec<Granularity> = Vec::new();
    for (gt, f) in gt_maps.iter().zip(features) {
        match granularity_scores(gt, f) {
            Ok(g) => scores.push(g),
            Err(Error::NotComputed(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(Error::CalibrationFailed(
            "no calibration image has more than two segments".into(),
        ));
    }
    let n = scores.len();
    let (g_scale, g_sem) = match aggregate {
        Aggregate::Mean => (
            scores.iter().map(|g| g.scale).sum::<f64>() / n as f64,
            scores.iter().map(|g| g.sem).sum::<f64>() / n as f64,
        ),
        Aggregate::Median => (
            median(scores.iter().map(|g| g.scale).collect()),
            median(scores.iter().map(|g| g.sem).collect()),
        ),
    };
    Ok(GranularityTarget {
        g_scale,
        g_sem,
        samples: n,
    })
}

/// Relative weights of the two axes in the selection distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectWeights {
    pub scale: f64,
    pub sem: f64,
}

impl Default for SelectWeights {
    fn default() -> Self {
        Self { scale: 1.0, sem: 1.0 }
    }
}

/// Weighted Euclidean distance between a level's scores and the target.
pub fn target_distance(g: &Granularity, t: &GranularityTarget, w: SelectWeights) -> f64 {
    (w.scale * (g.scale - t.g_scale).powi(2) + w.sem * (g.sem - t.g_sem).powi(2)).sqrt()
}

fn finer_first(a: &HierarchyLevel, b: &HierarchyLevel) -> std::cmp::Ordering {
    b.num_segments()
        .cmp(&a.num_segments())
        .then(b.snapshot.tau.total_cmp(&a.snapshot.tau))
}

/// Index of the level closest to the target. Levels without granularity
/// scores are skipped; if none has scores the finest level is returned.
/// Ties go to the finer level.
pub fn select_level(
    levels: &[HierarchyLevel],
    target: &GranularityTarget,
    weights: SelectWeights,
) -> Result<usize> {
    if levels.is_empty() {
        return Err(Error::Empty("hierarchy"));
    }
    let scored = levels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.granularity.map(|g| (i, target_distance(&g, target, weights))))
        .min_by(|&(i, d1), &(j, d2)| d1.total_cmp(&d2).then(finer_first(&levels[i], &levels[j])));
    if let Some((i, _)) = scored {
        return Ok(i);
    }
    Ok((0..levels.len())
        .min_by(|&i, &j| finer_first(&levels[i], &levels[j]))
        .expect("nonempty"))
}

/// Outcome of one boundary-penalty setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub beta: f64,
    pub miou: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub best_beta: f64,
    pub best_miou: f64,
    pub log: Vec<SweepEntry>,
}

/// Evaluates every `beta` in parallel and returns the best mIoU; ties go to
/// the smaller beta. Failed settings are logged and skipped.
pub fn beta_sweep<F>(betas: &[f64], eval: F) -> Result<SweepReport>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let log: Vec<SweepEntry> = std::thread::scope(|s| {
        let handles: Vec<_> = betas
            .iter()
            .map(|&beta| {
                let eval = &eval;
                s.spawn(move || SweepEntry {
                    beta,
                    miou: eval(beta).map_err(|e| e.to_string()),
                })
            })
            .collect();
        handles
            .into_iter()
            .zip(betas)
            .map(|(h, &beta)| {
                h.join().unwrap_or_else(|_| SweepEntry {
                    beta,
                    miou: Err("evaluation panicked".into()),
                })
            })
            .collect()
    });
    let best = log
        .iter()
        .filter_map(|e| e.miou.as_ref().ok().map(|&m| (e.beta, m)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
    let (best_beta, best_miou) = best.ok_or(Error::SweepFailed)?;
    Ok(SweepReport {
        best_beta,
        best_miou,
        log,
    })
}

/// Key=value calibration report.
pub fn report_text(target: &GranularityTarget, sweep: Option<&SweepReport>) -> String {
    let mut s = String::new();
    writeln!(s, "target.g_scale={}", target.g_scale).unwrap();
    writeln!(s, "target.g_sem={}", target.g_sem).unwrap();
    writeln!(s, "target.samples={}", target.samples).unwrap();
    if let Some(r) = sweep {
        for e in &r.log {
            match &e.miou {
                Ok(m) => writeln!(s, "beta.{}.miou={m}", e.beta).unwrap(),
                Err(msg) => writeln!(s, "beta.{}.error={msg}", e.beta).unwrap(),
            }
        }
        writeln!(s, "best.beta_bnd={}", r.best_beta).unwrap();
        writeln!(s, "best.miou={}", r.best_miou).unwrap();
    }
    s
}

//! Synthetic scenes with known partitions: Voronoi blob scenes and a
//! two-material scene crossed by a thin, high-contrast crack.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`, and normals
//! from `rand_distr::StandardNormal`, so a seed fixes every output byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sauce::avg_pool;
use crate::tensors::{cosine_sim, write_tensor, AttentionMap, FeatureMap, LabelMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineSpec {
    pub width: usize,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Side of one coarse token in fine pixels.
    pub patch: usize,
    pub channels: usize,
    pub regions: usize,
    /// Region means satisfy `cos ≤ 1 − margin` pairwise.
    pub margin: f64,
    /// Expected norm of the per-pixel Gaussian noise vector.
    pub noise: f64,
    /// Softmax temperature of the synthetic attention.
    pub temperature: f64,
    /// Explicit region means; drawn at random when `None`.
    pub means: Option<Vec<Vec<f32>>>,
    pub line: Option<LineSpec>,
    /// Feature norm of crack pixels relative to the unit-norm materials.
    pub crack_magnitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            patch: 8,
            channels: 32,
            regions: 3,
            margin: 0.3,
            noise: 0.05,
            temperature: 0.1,
            means: None,
            line: Some(LineSpec {
                width: 2,
                orientation: Orientation::Horizontal,
            }),
            crack_magnitude: 5.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.patch == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "{}x{} grid is not a multiple of patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.regions == 0 || self.regions > self.height * self.width {
            return bad(format!("cannot place {} regions", self.regions));
        }
        if !(0.0..=2.0).contains(&self.margin) {
            return bad(format!("margin {} outside [0,2]", self.margin));
        }
        if !(self.noise >= 0.0 && self.temperature > 0.0) {
            return bad("noise must be >= 0 and temperature > 0".into());
        }
        if let Some(m) = &self.means {
            if m.len() != self.regions || m.iter().any(|v| v.len() != self.channels) {
                return bad("explicit means must be regions x channels".into());
            }
        }
        if let Some(l) = self.line {
            if l.width == 0 {
                return bad("line width must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn lr_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn lr_width(&self) -> usize {
        self.width / self.patch
    }
}

/// One synthetic image: coarse tokens, fine features, attention and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub f_lr: FeatureMap,
    pub f_hr: FeatureMap,
    pub attention: AttentionMap,
    pub gt: LabelMap,
}

impl SynthScene {
    /// Writes `f_lr.tns`, `f_hr.tns` and `attention.tns` into `bundle_dir`
    /// and the labels to `gt_path`.
    pub fn write(&self, bundle_dir: &Path, gt_path: &Path) -> Result<()> {
        std::fs::create_dir_all(bundle_dir).map_err(|e| Error::io(bundle_dir, e))?;
        if let Some(parent) = gt_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_tensor(bundle_dir.join("f_lr.tns"), &Tensor::from(&self.f_lr))?;
        write_tensor(bundle_dir.join("f_hr.tns"), &Tensor::from(&self.f_hr))?;
        write_tensor(bundle_dir.join("attention.tns"), &Tensor::from(&self.attention))?;
        write_tensor(gt_path, &Tensor::from(&self.gt))
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Random unit vectors with pairwise cosine at most `1 − margin`.
pub fn separated_means(
    rng: &mut ChaCha8Rng,
    count: usize,
    channels: usize,
    margin: f64,
) -> Result<Vec<Vec<f64>>> {
    const ATTEMPTS: usize = 10_000;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} means with margin {margin} in {channels} dims"
            )));
        }
        let v = unit(&gaussian_vec(rng, channels));
        if out.iter().all(|m| cosine_sim(m, &v) <= 1.0 - margin) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Nearest-seed labels, relabeled by first appearance.
fn voronoi(rng: &mut ChaCha8Rng, h: usize, w: usize, regions: usize) -> LabelMap {
    let min_area = (h * w / (4 * regions)).max(1);
    let mut best: Option<(usize, LabelMap)> = None;
    for _ in 0..64 {
        let seeds: Vec<(f64, f64)> = (0..regions)
            .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64))
            .collect();
        let mut labels = vec![0u32; h * w];
        let mut areas = vec![0usize; regions];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let k = (0..regions)
                    .min_by(|&a, &b| {
                        let da = (seeds[a].0 - py).powi(2) + (seeds[a].1 - px).powi(2);
                        let db = (seeds[b].0 - py).powi(2) + (seeds[b].1 - px).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("regions > 0");
                labels[y * w + x] = k as u32 + 1;
                areas[k] += 1;
            }
        }
        let smallest = areas.iter().copied().min().unwrap_or(0);
        let map = LabelMap::new(h, w, labels).expect("sized");
        if smallest >= min_area {
            return map.compact().0;
        }
        if best.as_ref().is_none_or(|(s, _)| smallest > *s) {
            best = Some((smallest, map));
        }
    }
    best.expect("at least one attempt").1.compact().0
}

/// Fine features from per-pixel means plus isotropic noise.
fn render(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    channels: usize,
    noise: f64,
    mean_of: impl Fn(usize) -> Vec<f64>,
) -> FeatureMap {
    let n = h * w;
    let sigma = noise / (channels as f64).sqrt();
    let mut data = vec![0.0f32; channels * n];
    for i in 0..n {
        let m = mean_of(i);
        for c in 0..channels {
            let eps = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            data[c * n + i] = (m[c] + eps) as f32;
        }
    }
    FeatureMap::new(channels, h, w, data).expect("sized")
}

/// Row-wise softmax of cosine similarity between fine pixels and coarse
/// tokens at the given temperature.
pub fn cosine_attention(f_hr: &FeatureMap, f_lr: &FeatureMap, temperature: f64) -> Result<AttentionMap> {
    if f_hr.channels() != f_lr.channels() {
        return Err(Error::ShapeMismatch("fine and coarse channels differ".into()));
    }
    let q = f_hr.to_tokens();
    let k = f_lr.to_tokens();
    let (n_hr, n_lr) = (q.rows(), k.rows());
    let mut rows = vec![0.0f32; n_hr * n_lr];
    let mut logits = vec![0.0f64; n_lr];
    for i in 0..n_hr {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = cosine_sim(q.row(i), k.row(j)) / temperature;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            rows[i * n_lr + j] = ((l - max).exp() / sum) as f32;
        }
    }
    AttentionMap::new(n_hr, n_lr, rows)
}

fn finish(spec: &SynthSpec, f_hr: FeatureMap, gt: LabelMap) -> Result<SynthScene> {
    let f_lr = avg_pool(&f_hr, spec.lr_height(), spec.lr_width())?;
    let attention = cosine_attention(&f_hr, &f_lr, spec.temperature)?;
    Ok(SynthScene {
        f_lr,
        f_hr,
        attention,
        gt,
    })
}

/// Voronoi regions with cosine-separated means plus Gaussian noise.
pub fn gen_blob_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = match &spec.means {
        Some(m) => m.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect(),
        None => separated_means(&mut rng, spec.regions, spec.channels, spec.margin)?,
    };
    let gt = voronoi(&mut rng, spec.height, spec.width, spec.regions);
    let labels = gt.labels().to_vec();
    let f_hr = render(&mut rng, spec.height, spec.width, spec.channels, spec.noise, |i| {
        means[labels[i] as usize - 1].clone()
    });
    finish(spec, f_hr, gt)
}

/// Ground-truth labels of the crack scene.
pub const CRACK_LEFT: u32 = 1;
pub const CRACK_RIGHT: u32 = 2;
pub const CRACK_LABEL: u32 = 3;

/// Pixels covered by the crack of a `h x w` scene.
pub fn crack_mask(h: usize, w: usize, line: Option<LineSpec>) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let Some(line) = line else {
        return mask;
    };
    let (x0, x1) = (w / 8, w - w / 8);
    let (y0, y1) = (h / 8, h - h / 8);
    for t in 0..line.width {
        match line.orientation {
            Orientation::Horizontal => {
                let y = (h * 5 / 16 + t).min(h - 1);
                (x0..x1).for_each(|x| mask[y * w + x] = true);
            }
            Orientation::Vertical => {
                let x = (w * 5 / 16 + t).min(w - 1);
                (y0..y1).for_each(|y| mask[y * w + x] = true);
            }
            Orientation::Diagonal => {
                for s in 0..(y1 - y0).min(x1 - x0) {
                    let (y, x) = (y0 + s, (x0 + s + t).min(w - 1));
                    mask[y * w + x] = true;
                }
            }
        }
    }
    mask
}

/// Two materials (left and right halves, each with a slightly different top
/// and bottom shade) crossed by a thin crack whose features are a strong,
/// bright blend of both materials. Labels: left 1, right 2, crack 3.
pub fn gen_crack_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    if spec.channels < 4 {
        return Err(Error::InvalidArgument("crack scene needs at least 4 channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // orthonormal basis e0..e3
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 4 {
        let mut v = gaussian_vec(&mut rng, spec.channels);
        for e in &basis {
            let d: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    let comb = |terms: &[(f64, usize)]| -> Vec<f64> {
        let mut v = vec![0.0; spec.channels];
        for &(s, e) in terms {
            v.iter_mut().zip(&basis[e]).for_each(|(a, b)| *a += s * b);
        }
        v
    };
    // cos(a, b) = 0.6, cos(top, bottom) = 0.8 within a material
    let t = 1.0 / 3.0;
    let a_top = unit(&comb(&[(1.0, 0), (t, 2)]));
    let a_bot = unit(&comb(&[(1.0, 0), (-t, 2)]));
    let b_top = unit(&comb(&[(0.6, 0), (0.8, 1), (t, 3)]));
    let b_bot = unit(&comb(&[(0.6, 0), (0.8, 1), (-t, 3)]));
    let crack: Vec<f64> = unit(&comb(&[(1.6, 0), (0.8, 1)]))
        .into_iter()
        .map(|v| v * spec.crack_magnitude)
        .collect();
    let (h, w) = (spec.height, spec.width);
    let mask = crack_mask(h, w, spec.line);
    let labels: Vec<u32> = (0..h * w)
        .map(|i| {
            if mask[i] {
                CRACK_LABEL
            } else if i % w < w / 2 {
                CRACK_LEFT
            } else {
                CRACK_RIGHT
            }
        })
        .collect();
    let f_hr = render(&mut rng, h, w, spec.channels, spec.noise, |i| {
        let (y, x) = (i / w, i % w);
        if mask[i] {
            crack.clone()
        } else {
            match (x < w / 2, y < h / 2) {
                (true, true) => a_top.clone(),
                (true, false) => a_bot.clone(),
                (false, true) => b_top.clone(),
                (false, false) => b_bot.clone(),
            }
        }
    });
    let gt = LabelMap::new(h, w, labels)?;
    finish(spec, f_hr, gt)
}

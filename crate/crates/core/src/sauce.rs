//! Forward path of the attention upsampler: channel excitation, key
//! modulation, rotary positions and single-head cross-attention.
//!
//! The image encoder that produces query/key source features is not part of
//! this crate; callers supply those grids (or already projected embeddings).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensors::{
    cosine_sim, read_matrix, write_tensor, AttentionMap, FeatureMap, Matrix, Tensor,
};

/// Default query/key projection width.
pub const DEFAULT_D_QK: usize = 128;
/// Default excitation bottleneck reduction.
pub const DEFAULT_REDUCTION: usize = 2;
/// Rotary frequency base for normalized image coordinates.
pub const ROPE_BASE: f64 = 100.0;

/// Two-layer excitation bottleneck: `C → C/r → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeWeights {
    /// `C/r × C`
    pub w1: Matrix,
    pub b1: Vec<f32>,
    /// `C × C/r`
    pub w2: Matrix,
    pub b2: Vec<f32>,
    reduction: usize,
}

impl SeWeights {
    pub fn new(w1: Matrix, b1: Vec<f32>, w2: Matrix, b2: Vec<f32>) -> Result<Self> {
        let (hidden, c) = (w1.rows(), w1.cols());
        if hidden == 0 || c == 0 || c % hidden != 0 {
            return Err(Error::ShapeMismatch(format!(
                "SE bottleneck {hidden} must divide channel count {c}"
            )));
        }
        if w2.rows() != c || w2.cols() != hidden || b1.len() != hidden || b2.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "SE weights inconsistent: w1 {hidden}x{c}, b1 {}, w2 {}x{}, b2 {}",
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        if !w1.is_finite() || !w2.is_finite() || b1.iter().chain(&b2).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SE weights"));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            reduction: c / hidden,
        })
    }

    /// Uniform `[-0.1, 0.1]` weights from a seeded ChaCha8 stream.
    /// Without bias the biases are exactly zero.
    pub fn seeded(channels: usize, reduction: usize, seed: u64, with_bias: bool) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "reduction {reduction} must divide {channels}"
            )));
        }
        let hidden = channels / reduction;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform_matrix(&mut rng, hidden, channels);
        let w2 = uniform_matrix(&mut rng, channels, hidden);
        let (b1, b2) = if with_bias {
            (
                uniform_vec(&mut rng, hidden),
                uniform_vec(&mut rng, channels),
            )
        } else {
            (vec![0.0; hidden], vec![0.0; channels])
        };
        Self::new(w1, b1, w2, b2)
    }

    pub fn channels(&self) -> usize {
        self.w1.cols()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }
}

/// Projection and key-modulation weights for the cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    /// `d_qk × d_img`
    pub wq: Matrix,
    /// `d_qk × d_img`
    pub wk: Matrix,
    /// `d_img × C`
    pub sft_scale: Matrix,
    /// `d_img × C`
    pub sft_shift: Matrix,
}

impl AttnWeights {
    pub fn new(wq: Matrix, wk: Matrix, sft_scale: Matrix, sft_shift: Matrix) -> Result<Self> {
        let d_img = wq.cols();
        if wq.rows() == 0 || wq.rows() != wk.rows() || wk.cols() != d_img {
            return Err(Error::ShapeMismatch(format!(
                "query/key projections {}x{} and {}x{} disagree",
                wq.rows(),
                wq.cols(),
                wk.rows(),
                wk.cols()
            )));
        }
        if sft_scale.rows() != d_img
            || sft_shift.rows() != d_img
            || sft_scale.cols() != sft_shift.cols()
        {
            return Err(Error::ShapeMismatch(
                "SFT scale/shift must both be d_img x C".into(),
            ));
        }
        if ![&wq, &wk, &sft_scale, &sft_shift].iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite("attention weights"));
        }
        Ok(Self {
            wq,
            wk,
            sft_scale,
            sft_shift,
        })
    }

    pub fn seeded(channels: usize, d_img: usize, d_qk: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(
            uniform_matrix(&mut rng, d_qk, d_img),
            uniform_matrix(&mut rng, d_qk, d_img),
            uniform_matrix(&mut rng, d_img, channels),
            uniform_matrix(&mut rng, d_img, channels),
        )
    }

    pub fn d_qk(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_img(&self) -> usize {
        self.wq.cols()
    }

    pub fn channels(&self) -> usize {
        self.sft_scale.cols()
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, uniform_vec(rng, rows * cols)).expect("sized by construction")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-0.1f32..=0.1)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Per-channel excitation gate in `(0, 1)`.
pub fn se_gate(f_lr: &FeatureMap, w: &SeWeights) -> Result<Vec<f64>> {
    if f_lr.channels() != w.channels() {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {} channels, SE weights expect {}",
            f_lr.channels(),
            w.channels()
        )));
    }
    let n = f_lr.num_pixels() as f64;
    let pooled: Vec<f64> = (0..f_lr.channels())
        .map(|c| f_lr.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect();
    let hidden: Vec<f64> = w
        .w1
        .row_iter()
        .zip(&w.b1)
        .map(|(row, &b)| {
            let z: f64 = row.iter().zip(&pooled).map(|(&a, &p)| a as f64 * p).sum();
            silu(z + b as f64)
        })
        .collect();
    Ok(w
        .w2
        .row_iter()
        .zip(&w.b2)
        .map(|(row, &b)| {
            let z: f64 = row.iter().zip(&hidden).map(|(&a, &h)| a as f64 * h).sum();
            sigmoid(z + b as f64)
        })
        .collect())
}

/// Recalibrates channels: `f ⊙ sigmoid(W2·SiLU(W1·GAP(f) + b1) + b2)`.
pub fn se_excite(f_lr: &FeatureMap, w: &SeWeights) -> Result<FeatureMap> {
    let gate = se_gate(f_lr, w)?;
    let n = f_lr.num_pixels();
    let mut data = f_lr.data().to_vec();
    for (c, g) in gate.iter().enumerate() {
        for v in &mut data[c * n..(c + 1) * n] {
            *v = (*v as f64 * g) as f32;
        }
    }
    FeatureMap::new(f_lr.channels(), f_lr.height(), f_lr.width(), data)
}

/// `keys ⊙ (1 + scale(excited)) + shift(excited)` at every patch position.
pub fn sft_modulate(keys: &Matrix, excited: &FeatureMap, w: &AttnWeights) -> Result<Matrix> {
    if keys.rows() != excited.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "{} key positions vs {} excited positions",
            keys.rows(),
            excited.num_pixels()
        )));
    }
    if keys.cols() != w.d_img() || excited.channels() != w.channels() {
        return Err(Error::ShapeMismatch(format!(
            "keys {}-d / features {}-d do not match SFT {}x{}",
            keys.cols(),
            excited.channels(),
            w.d_img(),
            w.channels()
        )));
    }
    let mut out = keys.clone();
    let mut feat = vec![0.0f32; excited.channels()];
    for i in 0..keys.rows() {
        excited.pixel_into(i, &mut feat);
        let scale = w.sft_scale.matvec(&feat);
        let shift = w.sft_shift.matvec(&feat);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v as f64 * (1.0 + scale[j]) + shift[j]) as f32;
        }
    }
    Ok(out)
}

/// Pixel-centre coordinates normalized to `[-1, 1]`, raster order, `(y, x)`.
pub fn grid_positions(height: usize, width: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push((
                (y as f64 + 0.5) / height as f64 * 2.0 - 1.0,
                (x as f64 + 0.5) / width as f64 * 2.0 - 1.0,
            ));
        }
    }
    out
}

/// Rotation angle per feature pair at a position. Pairs alternate between
/// the y and x axes; within an axis the frequency decays geometrically.
pub fn rope_angles(dim: usize, pos: (f64, f64)) -> Vec<f64> {
    let pairs = dim / 2;
    let per_axis = [pairs.div_ceil(2), pairs / 2];
    (0..pairs)
        .map(|p| {
            let axis = p % 2;
            let k = (p / 2) as f64;
            let coord = if axis == 0 { pos.0 } else { pos.1 };
            let freq = ROPE_BASE.powf(-k / per_axis[axis].max(1) as f64);
            std::f64::consts::TAU * coord * freq
        })
        .collect()
}

/// Applies 2D rotary position embedding to each row of `grid`.
pub fn rope_embed(grid: &Matrix, positions: &[(f64, f64)]) -> Result<Matrix> {
    let d = grid.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary embedding needs an even feature dim, got {d}"
        )));
    }
    if positions.len() != grid.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            grid.rows()
        )));
    }
    let mut out = grid.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let angles = rope_angles(d, pos);
        let row = out.row_mut(i);
        for (p, theta) in angles.iter().enumerate() {
            let (s, c) = theta.sin_cos();
            let (a, b) = (row[2 * p] as f64, row[2 * p + 1] as f64);
            row[2 * p] = (a * c - b * s) as f32;
            row[2 * p + 1] = (a * s + b * c) as f32;
        }
    }
    Ok(out)
}

/// Single-head cross-attention: `A = softmax(Q·Kᵀ/√d)` row-wise, and each
/// output pixel is `Σ_k A[i,k]·values[k]`.
pub fn cross_attention_upsample(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    hr_height: usize,
    hr_width: usize,
) -> Result<(FeatureMap, AttentionMap)> {
    let (n_hr, n_lr, d) = (queries.rows(), keys.rows(), queries.cols());
    if n_hr != hr_height * hr_width {
        return Err(Error::ShapeMismatch(format!(
            "{n_hr} queries for a {hr_height}x{hr_width} output"
        )));
    }
    if keys.cols() != d || values.rows() != n_lr || n_lr == 0 || d == 0 {
        return Err(Error::ShapeMismatch(format!(
            "queries {n_hr}x{d}, keys {n_lr}x{}, values {}x{}",
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if !queries.is_finite() {
        return Err(Error::NonFinite("queries"));
    }
    if !keys.is_finite() {
        return Err(Error::NonFinite("keys"));
    }
    if !values.is_finite() {
        return Err(Error::NonFinite("values"));
    }
    let c = values.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0f32; n_hr * n_lr];
    let mut out = vec![0.0f32; n_hr * c];
    let mut logits = vec![0.0f64; n_lr];
    let mut acc = vec![0.0f64; c];
    for i in 0..n_hr {
        let q = queries.row(i);
        for (k, l) in logits.iter_mut().enumerate() {
            *l = q
                .iter()
                .zip(keys.row(k))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, l) in logits.iter_mut().enumerate() {
            *l /= total;
            attn[i * n_lr + k] = *l as f32;
            for (a, &v) in acc.iter_mut().zip(values.row(k)) {
                *a += *l * v as f64;
            }
        }
        for (o, a) in out[i * c..(i + 1) * c].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    let tokens = Matrix::new(n_hr, c, out)?;
    Ok((
        FeatureMap::from_tokens(&tokens, hr_height, hr_width)?,
        AttentionMap::new(n_hr, n_lr, attn)?,
    ))
}

/// Mean over pixels of `1 − cos` plus the mean squared element error.
pub fn reconstruction_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            target.channels(),
            target.height(),
            target.width()
        )));
    }
    let n = pred.num_pixels();
    let mut a = vec![0.0f32; pred.channels()];
    let mut b = vec![0.0f32; pred.channels()];
    let mut cos_term = 0.0;
    for i in 0..n {
        pred.pixel_into(i, &mut a);
        target.pixel_into(i, &mut b);
        cos_term += 1.0 - cosine_sim(&a, &b);
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / pred.data().len() as f64;
    Ok(cos_term / n as f64 + mse)
}

/// Adaptive average pooling to `out_h × out_w`; cell `i` covers source rows
/// `floor(i·H/out_h) .. ceil((i+1)·H/out_h)`.
pub fn avg_pool(fm: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("pool target must be non-empty".into()));
    }
    let (h, w) = (fm.height(), fm.width());
    let span = |i: usize, len: usize, out: usize| (i * len / out, ((i + 1) * len).div_ceil(out));
    let mut data = Vec::with_capacity(fm.channels() * out_h * out_w);
    for c in 0..fm.channels() {
        let p = fm.plane(c);
        for oy in 0..out_h {
            let (y0, y1) = span(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = span(ox, w, out_w);
                let mut s = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += p[y * w + x] as f64;
                    }
                }
                data.push((s / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    FeatureMap::new(fm.channels(), out_h, out_w, data)
}

/// `m · wᵀ`: maps `N×d_in` rows through a `d_out×d_in` projection.
pub fn project(m: &Matrix, w: &Matrix) -> Result<Matrix> {
    if m.cols() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "cannot project {}-d rows with a {}x{} matrix",
            m.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let mut data = Vec::with_capacity(m.rows() * w.rows());
    for row in m.row_iter() {
        data.extend(w.matvec(row).into_iter().map(|v| v as f32));
    }
    Matrix::new(m.rows(), w.rows(), data)
}

/// Full upsampler weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SauceWeights {
    pub se: SeWeights,
    pub attn: AttnWeights,
}

/// Outputs of one upsampler forward pass.
#[derive(Debug, Clone)]
pub struct SauceOutput {
    pub excited: FeatureMap,
    pub f_hr: FeatureMap,
    pub attention: AttentionMap,
}

const BUNDLE_MANIFEST: &str = "manifest.txt";

impl SauceWeights {
    pub fn seeded(channels: usize, d_img: usize, d_qk: usize, reduction: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            se: SeWeights::seeded(channels, reduction, seed, true)?,
            attn: AttnWeights::seeded(channels, d_img, d_qk, seed.wrapping_add(1))?,
        })
    }

    fn named(&self) -> Vec<(&'static str, Matrix)> {
        let row = |v: &[f32]| Matrix::new(1, v.len(), v.to_vec()).expect("row vector");
        vec![
            ("se.w1", self.se.w1.clone()),
            ("se.b1", row(&self.se.b1)),
            ("se.w2", self.se.w2.clone()),
            ("se.b2", row(&self.se.b2)),
            ("attn.wq", self.attn.wq.clone()),
            ("attn.wk", self.attn.wk.clone()),
            ("attn.sft_scale", self.attn.sft_scale.clone()),
            ("attn.sft_shift", self.attn.sft_shift.clone()),
        ]
    }

    /// Writes one tensor file per matrix plus `manifest.txt` lines of the
    /// form `name=file:ROWSxCOLS`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, m) in self.named() {
            let file = format!("{}.tns", name.replace('.', "_"));
            write_tensor(dir.join(&file), &Tensor::from(&m))?;
            manifest.push_str(&format!("{name}={file}:{}x{}\n", m.rows(), m.cols()));
        }
        let path = dir.join(BUNDLE_MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(BUNDLE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut mats = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (name, rest) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad manifest line {line:?}")))?;
            let (file, shape) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("missing shape in {line:?}")))?;
            let m = read_matrix(dir.join(file.trim()))?;
            if format!("{}x{}", m.rows(), m.cols()) != shape.trim() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: manifest says {shape}, file holds {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            mats.insert(name.trim().to_string(), m);
        }
        let mut take = |name: &str| {
            mats.remove(name)
                .ok_or_else(|| Error::Config(format!("weight bundle lacks {name}")))
        };
        let se = SeWeights::new(
            take("se.w1")?,
            take("se.b1")?.data().to_vec(),
            take("se.w2")?,
            take("se.b2")?.data().to_vec(),
        )?;
        let attn = AttnWeights::new(
            take("attn.wq")?,
            take("attn.wk")?,
            take("attn.sft_scale")?,
            take("attn.sft_shift")?,
        )?;
        Ok(Self { se, attn })
    }
}

/// Runs the upsampler on coarse backbone tokens and encoder features.
///
/// `query_src` is average-pooled to the output grid, `key_src` to the token
/// grid of `f_lr`. Both carry `d_img` channels.
pub fn sauce_forward(
    f_lr: &FeatureMap,
    query_src: &FeatureMap,
    key_src: &FeatureMap,
    hr_height: usize,
    hr_width: usize,
    weights: &SauceWeights,
) -> Result<SauceOutput> {
    let excited = se_excite(f_lr, &weights.se)?;
    let q_grid = avg_pool(query_src, hr_height, hr_width)?.to_tokens();
    let k_grid = avg_pool(key_src, f_lr.height(), f_lr.width())?.to_tokens();
    let k_mod = sft_modulate(&k_grid, &excited, &weights.attn)?;
    let q = rope_embed(
        &project(&q_grid, &weights.attn.wq)?,
        &grid_positions(hr_height, hr_width),
    )?;
    let k = rope_embed(
        &project(&k_mod, &weights.attn.wk)?,
        &grid_positions(f_lr.height(), f_lr.width()),
    )?;
    let (f_hr, attention) =
        cross_attention_upsample(&q, &k, &excited.to_tokens(), hr_height, hr_width)?;
    Ok(SauceOutput {
        excited,
        f_hr,
        attention,
    })
}

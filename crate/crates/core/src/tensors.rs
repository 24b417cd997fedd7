//! Dense tensor types, per-pixel vector helpers and the `EASETNSR` binary format.
//!
//! Feature maps are stored channel-major (`C×H×W`), so each channel plane is
//! contiguous and a pixel vector is a strided gather. All pixel gathers go
//! through [`FeatureMap::pixel_into`].
//!
//! File format (little-endian):
//! - magic: 8 bytes `EASETNSR`
//! - version: u32 (= 1)
//! - dtype: u32 (0 = f32, 1 = u32)
//! - ndim: u32
//! - dims: ndim × u64
//! - payload: row-major values

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EASETNSR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_FIXED: usize = 8 + 4 + 4 + 4;

/// Dense `C×H×W` real-valued feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a map from token-major rows (`N×C`, `N = height·width`).
    pub fn from_tokens(tokens: &Matrix, height: usize, width: usize) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens cannot fill a {height}x{width} grid",
                tokens.rows()
            )));
        }
        let c = tokens.cols();
        let n = height * width;
        let mut data = vec![0.0f32; c * n];
        for (i, row) in tokens.row_iter().enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                data[ch * n + i] = v;
            }
        }
        Self::new(c, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Contiguous plane of one channel.
    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.num_pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Copies the feature vector of raster pixel `idx` into `out`.
    pub fn pixel_into(&self, idx: usize, out: &mut [f32]) {
        let n = self.num_pixels();
        for (c, slot) in out.iter_mut().enumerate().take(self.channels) {
            *slot = self.data[c * n + idx];
        }
    }

    pub fn pixel(&self, idx: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.channels];
        self.pixel_into(idx, &mut v);
        v
    }

    /// Token-major copy (`N×C`), one row per pixel.
    pub fn to_tokens(&self) -> Matrix {
        let n = self.num_pixels();
        let c = self.channels;
        let mut data = vec![0.0f32; n * c];
        for ch in 0..c {
            let plane = self.plane(ch);
            for (i, &v) in plane.iter().enumerate() {
                data[i * c + ch] = v;
            }
        }
        Matrix {
            rows: n,
            cols: c,
            data,
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Row-major `rows×cols` f32 matrix, used for token sets, embeddings and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero; a 0-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · vᵀ` for a single vector, accumulated in f64.
    pub fn matvec(&self, v: &[f32]) -> Vec<f64> {
        self.row_iter()
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect()
    }
}

/// Row-stochastic `n_hr×n_lr` cross-attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    n_hr: usize,
    n_lr: usize,
    rows: Vec<f32>,
}

/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

impl AttentionMap {
    /// Validates shape, entry range and row sums.
    pub fn new(n_hr: usize, n_lr: usize, rows: Vec<f32>) -> Result<Self> {
        if n_hr == 0 || n_lr == 0 {
            return Err(Error::Empty("attention map"));
        }
        if rows.len() != n_hr * n_lr {
            return Err(Error::ShapeMismatch(format!(
                "attention {n_hr}x{n_lr} needs {} values, got {}",
                n_hr * n_lr,
                rows.len()
            )));
        }
        for (i, row) in rows.chunks_exact(n_lr).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "attention row {i} has entries outside [0,1]"
                )));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "attention row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { n_hr, n_lr, rows })
    }

    pub fn n_hr(&self) -> usize {
        self.n_hr
    }

    pub fn n_lr(&self) -> usize {
        self.n_lr
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.n_lr..(i + 1) * self.n_lr]
    }

    pub fn data(&self) -> &[f32] {
        &self.rows
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.n_lr)
    }
}

/// `H×W` segment assignment. Label 0 is background / ignore.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "label map dims must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches(&self, fm: &FeatureMap) -> bool {
        self.height == fm.height() && self.width == fm.width()
    }

    /// Relabels foreground ids to `1..=K` in raster order of first appearance.
    /// Background stays 0. Returns the compact map and `K`.
    pub fn compact(&self) -> (LabelMap, usize) {
        let mut remap = std::collections::HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = remap.len() as u32 + 1;
                    *remap.entry(l).or_insert(next)
                }
            })
            .collect();
        (
            LabelMap {
                height: self.height,
                width: self.width,
                labels,
            },
            remap.len(),
        )
    }

    /// Number of distinct non-zero labels.
    pub fn num_segments(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Cosine similarity accumulated in f64; a zero-norm operand gives 0.
pub fn cosine_sim<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Scales each f32 vector to unit L2 norm in place; zero vectors stay zero.
pub fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Unit-normalizes every pixel vector; zero pixels are left as zero.
pub fn l2_normalize(fm: &FeatureMap) -> FeatureMap {
    let n = fm.num_pixels();
    let c = fm.channels();
    let mut norms = vec![0.0f64; n];
    for ch in 0..c {
        for (acc, &v) in norms.iter_mut().zip(fm.plane(ch)) {
            *acc += v as f64 * v as f64;
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let mut data = fm.data().to_vec();
    for ch in 0..c {
        for (i, v) in data[ch * n..(ch + 1) * n].iter_mut().enumerate() {
            if norms[i] > 0.0 {
                *v = (*v as f64 / norms[i]) as f32;
            }
        }
    }
    FeatureMap {
        channels: c,
        height: fm.height(),
        width: fm.width(),
        data,
    }
}

/// Per-pixel boundary strength `1×H×W`: the mean over channels of
/// `sqrt(dx² + dy²)` with forward differences. The last row/column uses the
/// backward difference; an axis of length 1 contributes zero.
pub fn spatial_gradient(fm: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let mut acc = vec![0.0f64; h * w];
    for ch in 0..c {
        let p = fm.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dx = if w < 2 {
                    0.0
                } else if x + 1 < w {
                    p[i + 1] as f64 - p[i] as f64
                } else {
                    p[i] as f64 - p[i - 1] as f64
                };
                let dy = if h < 2 {
                    0.0
                } else if y + 1 < h {
                    p[i + w] as f64 - p[i] as f64
                } else {
                    p[i] as f64 - p[i - w] as f64
                };
                acc[i] += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    let data = acc.into_iter().map(|v| (v / c as f64) as f32).collect();
    FeatureMap {
        channels: 1,
        height: h,
        width: w,
        data,
    }
}

/// Raw contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32 { dims: Vec<u64>, data: Vec<f32> },
    U32 { dims: Vec<u64>, data: Vec<u32> },
}

impl Tensor {
    pub fn dims(&self) -> &[u64] {
        match self {
            Tensor::F32 { dims, .. } | Tensor::U32 { dims, .. } => dims,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            Tensor::F32 { .. } => "f32",
            Tensor::U32 { .. } => "u32",
        }
    }

    fn dtype_code(&self) -> u32 {
        match self {
            Tensor::F32 { .. } => 0,
            Tensor::U32 { .. } => 1,
        }
    }

    fn dims_usize(&self) -> Vec<usize> {
        self.dims().iter().map(|&d| d as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let dims = self.dims();
        let count: u64 = dims.iter().product();
        let mut out = Vec::with_capacity(HEADER_FIXED + dims.len() * 8 + count as usize * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype_code().to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            Tensor::F32 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::U32 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedHeader);
        }
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&bytes[..8]);
        if &magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_FIXED {
            return Err(Error::TruncatedHeader);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = u32_at(12);
        if dtype > 1 {
            return Err(Error::UnknownDtype(dtype));
        }
        let ndim = u32_at(16) as usize;
        let dims_end = HEADER_FIXED + ndim * 8;
        if bytes.len() < dims_end {
            return Err(Error::TruncatedHeader);
        }
        let dims: Vec<u64> = bytes[HEADER_FIXED..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let available = (bytes.len() - dims_end) as u64;
        let expected = dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .unwrap_or(u64::MAX);
        if available < expected {
            return Err(Error::TruncatedPayload {
                expected,
                available,
            });
        }
        if available > expected {
            return Err(Error::TrailingBytes(available - expected));
        }
        let payload = &bytes[dims_end..];
        Ok(match dtype {
            0 => Tensor::F32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
            _ => Tensor::U32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
        })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

impl From<&FeatureMap> for Tensor {
    fn from(fm: &FeatureMap) -> Self {
        Tensor::F32 {
            dims: vec![fm.channels as u64, fm.height as u64, fm.width as u64],
            data: fm.data.clone(),
        }
    }
}

impl From<&LabelMap> for Tensor {
    fn from(lm: &LabelMap) -> Self {
        Tensor::U32 {
            dims: vec![lm.height as u64, lm.width as u64],
            data: lm.labels.clone(),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor::F32 {
            dims: vec![m.rows as u64, m.cols as u64],
            data: m.data.clone(),
        }
    }
}

impl From<&AttentionMap> for Tensor {
    fn from(a: &AttentionMap) -> Self {
        Tensor::F32 {
            dims: vec![a.n_hr as u64, a.n_lr as u64],
            data: a.rows.clone(),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let dims = t.dims_usize();
        match t {
            Tensor::F32 { data, .. } if dims.len() == 3 => {
                FeatureMap::new(dims[0], dims[1], dims[2], data)
            }
            Tensor::F32 { .. } => Err(Error::ShapeMismatch(format!(
                "feature map needs 3 dims, file has {}",
                dims.len()
            ))),
            other => Err(Error::DtypeMismatch {
                expected: "f32",
                found: other.dtype_name(),
            }),
        }
    }
}

impl TryFrom<Tensor> for LabelMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let dims = t.dims_usize();
        match t {
            Tensor::U32 { data, .. } if dims.len() == 2 => LabelMap::new(dims[0], dims[1], data),
            Tensor::U32 { .. } => Err(Error::ShapeMismatch(format!(
                "label map needs 2 dims, file has {}",
                dims.len()
            ))),
            other => Err(Error::DtypeMismatch {
                expected: "u32",
                found: other.dtype_name(),
            }),
        }
    }
}

impl TryFrom<Tensor> for Matrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let dims = t.dims_usize();
        match t {
            Tensor::F32 { data, .. } if dims.len() == 2 => Matrix::new(dims[0], dims[1], data),
            Tensor::F32 { data, .. } if dims.len() == 1 => Matrix::new(1, dims[0], data),
            Tensor::F32 { .. } => Err(Error::ShapeMismatch(format!(
                "matrix needs 1 or 2 dims, file has {}",
                dims.len()
            ))),
            other => Err(Error::DtypeMismatch {
                expected: "f32",
                found: other.dtype_name(),
            }),
        }
    }
}

impl TryFrom<Tensor> for AttentionMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let m = Matrix::try_from(t)?;
        AttentionMap::new(m.rows, m.cols, m.data)
    }
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureMap::try_from(read_tensor(path)?)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::try_from(read_tensor(path)?)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    Matrix::try_from(read_tensor(path)?)
}

pub fn read_attention(path: impl AsRef<Path>) -> Result<AttentionMap> {
    AttentionMap::try_from(read_tensor(path)?)
}

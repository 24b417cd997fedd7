//! Batch driver: configuration, per-image bundle loading, the three-stage
//! run, hierarchy serialization, calibration, evaluation and colorizing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agg::{assign_labels, edge_smooth, group_matrix, pool_attention, AggConfig, Smoothing};
use crate::calib::{
    beta_sweep, calibrate_target, report_text, select_level, Aggregate, GranularityTarget,
    SelectWeights, SweepReport, DEFAULT_BETAS,
};
use crate::crs::{crs_refine, CrsOutcome, DEFAULT_MERGE_TAU};
use crate::error::{Error, Result};
use crate::evalx::{cl_iou, confusion, hungarian_miou, BinaryMask, EvalSummary, CL_TOLERANCE};
use crate::hmerge::{
    hierarchical_merge, score_levels, GapCost, Hierarchy, HierarchyLevel, HierarchySnapshot,
    HmConfig, MergeScope,
};
use crate::sauce::{cross_attention_upsample, sauce_forward, SauceWeights};
use crate::tensors::{
    read_attention, read_feature_map, read_label_map, write_tensor, AttentionMap, FeatureMap,
    LabelMap, Tensor,
};

/// Every tunable of a run. Paths may also come from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub crs_tau: f64,
    /// Cap on accepted refinement rounds; 0 leaves refinement uncapped.
    pub crs_max_rounds: usize,
    pub agg: AggConfig,
    pub hm: HmConfig,
    pub seed: u64,
    /// Longest image side used by the exporter when resizing; tensors
    /// arriving here are already sized.
    pub resize_longest: usize,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub target_scale: Option<f64>,
    pub target_sem: Option<f64>,
    pub betas: Vec<f64>,
    pub calib_aggregate: Aggregate,
    pub calib_max_images: usize,
    pub calib_fraction: f64,
    pub select_weights: SelectWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crs_tau: DEFAULT_MERGE_TAU,
            crs_max_rounds: 5,
            agg: AggConfig::default(),
            hm: HmConfig::default(),
            seed: 0,
            resize_longest: 640,
            features: None,
            out: None,
            gt: None,
            weights: None,
            target_scale: None,
            target_sem: None,
            betas: DEFAULT_BETAS.to_vec(),
            calib_aggregate: Aggregate::Mean,
            calib_max_images: 200,
            calib_fraction: 0.1,
            select_weights: SelectWeights::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crs_tau > 0.0 && self.crs_tau <= 1.0) {
            return Err(Error::Config(format!("crs_tau {} outside (0,1]", self.crs_tau)));
        }
        if self.betas.is_empty() || self.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("betas must be a non-empty list of values >= 0".into()));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction <= 1.0) || self.calib_max_images == 0 {
            return Err(Error::Config("calibration subset must be non-empty".into()));
        }
        if self.resize_longest == 0 {
            return Err(Error::Config("resize_longest must be positive".into()));
        }
        if self.target_scale.is_some() != self.target_sem.is_some() {
            return Err(Error::Config("target_scale and target_sem go together".into()));
        }
        for t in [self.target_scale, self.target_sem].into_iter().flatten() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target {t} outside [0,1]")));
            }
        }
        self.agg.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.hm.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut fix_passes = None;
        let mut smoothing = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let v = value;
            match key {
                "crs_tau" => cfg.crs_tau = parse_num(key, v)?,
                "crs_max_rounds" => cfg.crs_max_rounds = parse_num(key, v)?,
                "alpha" => cfg.agg.alpha = parse_num(key, v)?,
                "beta" => cfg.agg.beta = parse_num(key, v)?,
                "smoothing" => smoothing = Some(v.to_string()),
                "smoothing_max_passes" => fix_passes = Some(parse_num::<usize>(key, v)?),
                "majority" => cfg.agg.majority = parse_num(key, v)?,
                "gradient_percentile" => cfg.agg.gradient_percentile = parse_num(key, v)?,
                "theta_hi" => cfg.hm.theta_hi = parse_num(key, v)?,
                "theta_lo" => cfg.hm.theta_lo = parse_num(key, v)?,
                "step" => cfg.hm.step = parse_num(key, v)?,
                "beta_bnd" => cfg.hm.beta_bnd = parse_num(key, v)?,
                "min_size" => cfg.hm.min_size = parse_num(key, v)?,
                "top_n" => cfg.hm.top_n = parse_num(key, v)?,
                "lambda" => cfg.hm.lambda = parse_num(key, v)?,
                "gap_cost" => {
                    cfg.hm.gap_cost = match v {
                        "threshold" => GapCost::Threshold,
                        "dissimilarity" => GapCost::Dissimilarity,
                        _ => return Err(Error::Config(format!("gap_cost: unknown mode {v:?}"))),
                    }
                }
                "global_scope" => {
                    cfg.hm.global_scope = match v {
                        "non_adjacent" => MergeScope::NonAdjacent,
                        "all_pairs" => MergeScope::AllPairs,
                        _ => return Err(Error::Config(format!("global_scope: unknown mode {v:?}"))),
                    }
                }
                "seed" => cfg.seed = parse_num(key, v)?,
                "resize_longest" => cfg.resize_longest = parse_num(key, v)?,
                "features" => cfg.features = Some(PathBuf::from(v)),
                "out" => cfg.out = Some(PathBuf::from(v)),
                "gt" => cfg.gt = Some(PathBuf::from(v)),
                "weights" => cfg.weights = Some(PathBuf::from(v)),
                "target_scale" => cfg.target_scale = Some(parse_num(key, v)?),
                "target_sem" => cfg.target_sem = Some(parse_num(key, v)?),
                "betas" => {
                    cfg.betas = v
                        .split(',')
                        .map(|b| parse_num(key, b.trim()))
                        .collect::<Result<_>>()?
                }
                "calib_aggregate" => {
                    cfg.calib_aggregate = match v {
                        "mean" => Aggregate::Mean,
                        "median" => Aggregate::Median,
                        _ => return Err(Error::Config(format!("calib_aggregate: unknown {v:?}"))),
                    }
                }
                "calib_max_images" => cfg.calib_max_images = parse_num(key, v)?,
                "calib_fraction" => cfg.calib_fraction = parse_num(key, v)?,
                "select_weight_scale" => cfg.select_weights.scale = parse_num(key, v)?,
                "select_weight_sem" => cfg.select_weights.sem = parse_num(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", lineno + 1))),
            }
        }
        if let Some(mode) = smoothing {
            cfg.agg.smoothing = match mode.as_str() {
                "off" => Smoothing::Off,
                "single" => Smoothing::SinglePass,
                "fixpoint" => Smoothing::Fixpoint {
                    max_passes: fix_passes.unwrap_or(10),
                },
                _ => return Err(Error::Config(format!("smoothing: unknown mode {mode:?}"))),
            };
        } else if fix_passes.is_some() {
            return Err(Error::Config("smoothing_max_passes needs smoothing=fixpoint".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Text form accepted by [`PipelineConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("crs_tau", self.crs_tau.to_string());
        kv("crs_max_rounds", self.crs_max_rounds.to_string());
        kv("alpha", self.agg.alpha.to_string());
        kv("beta", self.agg.beta.to_string());
        match self.agg.smoothing {
            Smoothing::Off => kv("smoothing", "off".into()),
            Smoothing::SinglePass => kv("smoothing", "single".into()),
            Smoothing::Fixpoint { max_passes } => {
                kv("smoothing", "fixpoint".into());
                kv("smoothing_max_passes", max_passes.to_string());
            }
        }
        kv("majority", self.agg.majority.to_string());
        kv("gradient_percentile", self.agg.gradient_percentile.to_string());
        kv("theta_hi", self.hm.theta_hi.to_string());
        kv("theta_lo", self.hm.theta_lo.to_string());
        kv("step", self.hm.step.to_string());
        kv("beta_bnd", self.hm.beta_bnd.to_string());
        kv("min_size", self.hm.min_size.to_string());
        kv("top_n", self.hm.top_n.to_string());
        kv("lambda", self.hm.lambda.to_string());
        kv(
            "gap_cost",
            match self.hm.gap_cost {
                GapCost::Threshold => "threshold",
                GapCost::Dissimilarity => "dissimilarity",
            }
            .into(),
        );
        kv(
            "global_scope",
            match self.hm.global_scope {
                MergeScope::NonAdjacent => "non_adjacent",
                MergeScope::AllPairs => "all_pairs",
            }
            .into(),
        );
        kv("seed", self.seed.to_string());
        kv("resize_longest", self.resize_longest.to_string());
        for (k, p) in [
            ("features", &self.features),
            ("out", &self.out),
            ("gt", &self.gt),
            ("weights", &self.weights),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        if let (Some(a), Some(b)) = (self.target_scale, self.target_sem) {
            kv("target_scale", a.to_string());
            kv("target_sem", b.to_string());
        }
        kv(
            "betas",
            self.betas.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        );
        kv(
            "calib_aggregate",
            match self.calib_aggregate {
                Aggregate::Mean => "mean",
                Aggregate::Median => "median",
            }
            .into(),
        );
        kv("calib_max_images", self.calib_max_images.to_string());
        kv("calib_fraction", self.calib_fraction.to_string());
        kv("select_weight_scale", self.select_weights.scale.to_string());
        kv("select_weight_sem", self.select_weights.sem.to_string());
        s
    }

    /// Calibrated target when both components are configured.
    pub fn target(&self) -> Option<GranularityTarget> {
        Some(GranularityTarget {
            g_scale: self.target_scale?,
            g_sem: self.target_sem?,
            samples: 0,
        })
    }

    fn crs_cap(&self) -> Option<usize> {
        (self.crs_max_rounds > 0).then_some(self.crs_max_rounds)
    }
}

/// Inputs of one image.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub f_lr: FeatureMap,
    pub f_hr: FeatureMap,
    pub attention: AttentionMap,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing tensor"),
        ))
    }
}

/// Loads `f_lr.tns` plus either `f_hr.tns` + `attention.tns`, or
/// `queries.tns` + `keys.tns` (attention computed here), or `query_src.tns`
/// + `key_src.tns` run through the upsampler with `weights`.
pub fn load_bundle(dir: &Path, weights: Option<&Path>) -> Result<Bundle> {
    let f_lr = read_feature_map(require(dir, "f_lr.tns")?)?;
    let has = |n: &str| dir.join(n).is_file();
    let (f_hr, attention) = if has("f_hr.tns") || has("attention.tns") {
        (
            read_feature_map(require(dir, "f_hr.tns")?)?,
            read_attention(require(dir, "attention.tns")?)?,
        )
    } else if has("queries.tns") || has("keys.tns") {
        let q = read_feature_map(require(dir, "queries.tns")?)?;
        let k = read_feature_map(require(dir, "keys.tns")?)?;
        if (k.height(), k.width()) != (f_lr.height(), f_lr.width()) {
            return Err(Error::ShapeMismatch(format!(
                "{}: keys grid {}x{} vs tokens {}x{}",
                dir.display(),
                k.height(),
                k.width(),
                f_lr.height(),
                f_lr.width()
            )));
        }
        cross_attention_upsample(&q.to_tokens(), &k.to_tokens(), &f_lr.to_tokens(), q.height(), q.width())?
    } else if has("query_src.tns") || has("key_src.tns") {
        let qs = read_feature_map(require(dir, "query_src.tns")?)?;
        let ks = read_feature_map(require(dir, "key_src.tns")?)?;
        let w = weights.ok_or_else(|| {
            Error::Config(format!("{}: upsampler inputs need a weights bundle", dir.display()))
        })?;
        let out = sauce_forward(&f_lr, &qs, &ks, qs.height(), qs.width(), &SauceWeights::load(w)?)?;
        (out.f_hr, out.attention)
    } else {
        return Err(Error::io(
            dir.join("f_hr.tns"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no fine features or embeddings"),
        ));
    };
    if f_hr.channels() != f_lr.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{}: f_hr has {} channels, f_lr {}",
            dir.display(),
            f_hr.channels(),
            f_lr.channels()
        )));
    }
    if attention.n_hr() != f_hr.num_pixels() || attention.n_lr() != f_lr.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "{}: attention {}x{} vs {} pixels and {} tokens",
            dir.display(),
            attention.n_hr(),
            attention.n_lr(),
            f_hr.num_pixels(),
            f_lr.num_pixels()
        )));
    }
    Ok(Bundle {
        f_lr,
        f_hr,
        attention,
    })
}

/// Stages 1 and 2: refined prototypes and the smoothed dense label map.
pub fn stage_two(b: &Bundle, cfg: &PipelineConfig) -> Result<(CrsOutcome, LabelMap)> {
    let crs = crs_refine(&b.f_lr, &b.f_hr, &b.attention, cfg.crs_tau, cfg.crs_cap())?;
    let g = group_matrix(&b.f_lr.to_tokens(), &crs.dict)?;
    let a_m = pool_attention(&b.attention, &g)?;
    let y = assign_labels(&b.f_hr, &crs.dict, &a_m, &cfg.agg)?;
    let y = edge_smooth(&y, &b.f_hr, &cfg.agg)?;
    Ok((crs, y.compact().0))
}

/// Hierarchy over a stage-2 map. An input the sweep cannot coarsen yields a
/// single level holding the stage-2 map itself.
pub fn hierarchy_levels(stage2: &LabelMap, f_hr: &FeatureMap, hm: &HmConfig) -> Result<Hierarchy> {
    let mut h = hierarchical_merge(stage2, f_hr, hm)?;
    if h.levels.is_empty() {
        let labels = stage2.compact().0;
        let snap = HierarchySnapshot {
            num_segments: labels.num_segments(),
            labels,
            tau: hm.theta_hi,
            tau_floor: hm.theta_hi,
            gap: false,
        };
        h.levels = score_levels(&[snap], f_hr, hm.lambda)?;
        for l in &mut h.levels {
            l.granularity = crate::hmerge::granularity_scores(&l.labels, f_hr).ok();
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub crs: CrsOutcome,
    pub stage2: LabelMap,
    pub hierarchy: Hierarchy,
    /// Level chosen by the configured granularity target, if any.
    pub selected: Option<usize>,
}

pub fn segment_bundle(b: &Bundle, cfg: &PipelineConfig) -> Result<SegmentOutput> {
    let (crs, stage2) = stage_two(b, cfg)?;
    let hierarchy = hierarchy_levels(&stage2, &b.f_hr, &cfg.hm)?;
    let selected = match cfg.target() {
        Some(t) => Some(select_level(&hierarchy.levels, &t, cfg.select_weights)?),
        None => None,
    };
    Ok(SegmentOutput {
        crs,
        stage2,
        hierarchy,
        selected,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Key=value manifest describing the written levels.
pub fn manifest_text(out: &SegmentOutput) -> String {
    let mut s = String::new();
    writeln!(s, "levels={}", out.hierarchy.levels.len()).unwrap();
    writeln!(s, "history={}", out.hierarchy.history.len()).unwrap();
    writeln!(s, "stage2_segments={}", out.stage2.num_segments()).unwrap();
    writeln!(s, "prototypes={}", out.crs.dict.len()).unwrap();
    if let Some(i) = out.selected {
        writeln!(s, "selected={i}").unwrap();
    }
    for (i, l) in out.hierarchy.levels.iter().enumerate() {
        let g = l.granularity;
        writeln!(s, "level.{i}.file={}", level_file(i)).unwrap();
        writeln!(s, "level.{i}.tau={}", l.snapshot.tau).unwrap();
        writeln!(s, "level.{i}.k={}", l.num_segments()).unwrap();
        writeln!(s, "level.{i}.score={}", l.score).unwrap();
        writeln!(s, "level.{i}.tau_floor={}", l.snapshot.tau_floor).unwrap();
        writeln!(s, "level.{i}.g_scale={}", opt(g.map(|g| g.scale))).unwrap();
        writeln!(s, "level.{i}.g_sem={}", opt(g.map(|g| g.sem))).unwrap();
        writeln!(s, "level.{i}.gap={}", u8::from(l.snapshot.gap)).unwrap();
    }
    s
}

pub fn level_file(i: usize) -> String {
    format!("level_{i:03}.tns")
}

/// Writes `stage2.tns`, `level_NNN.tns`, optional `selected.tns` and
/// `manifest.txt` into `dir`.
pub fn write_output(dir: &Path, out: &SegmentOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(dir.join("stage2.tns"), &Tensor::from(&out.stage2))?;
    for (i, l) in out.hierarchy.levels.iter().enumerate() {
        write_tensor(dir.join(level_file(i)), &Tensor::from(&l.labels))?;
    }
    if let Some(i) = out.selected {
        write_tensor(dir.join("selected.tns"), &Tensor::from(&out.hierarchy.levels[i].labels))?;
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest_text(out)).map_err(|e| Error::io(path, e))
}

/// Image ids: sorted subdirectory names of the feature root.
pub fn list_images(features: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(features).map_err(|e| Error::io(features, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(features, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Full per-image run from `<features>/<id>` into `<out>/<id>`.
pub fn segment_image(cfg: &PipelineConfig, features: &Path, out: &Path, id: &str) -> Result<SegmentOutput> {
    let b = load_bundle(&features.join(id), cfg.weights.as_deref())?;
    let result = segment_bundle(&b, cfg)?;
    write_output(&out.join(id), &result)?;
    Ok(result)
}

/// Calibration subset size: `min(max_images, max(1, ⌊fraction·n⌋))`.
pub fn subset_size(n: usize, max_images: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    (((n as f64) * fraction).floor() as usize).max(1).min(max_images).min(n)
}

/// Seeded choice of calibration images among those with ground truth.
pub fn calibration_subset(cfg: &PipelineConfig, features: &Path, gt: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = list_images(features)?
        .into_iter()
        .filter(|id| gt.join(format!("{id}.tns")).is_file())
        .collect();
    let k = subset_size(ids.len(), cfg.calib_max_images, cfg.calib_fraction);
    if k == 0 {
        return Err(Error::CalibrationFailed(format!(
            "no image in {} has ground truth in {}",
            features.display(),
            gt.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort();
    Ok(ids)
}

/// Prepared calibration image: stage-2 map, features and ground truth.
#[derive(Debug, Clone)]
pub struct CalibImage {
    pub id: String,
    pub stage2: LabelMap,
    pub f_hr: FeatureMap,
    pub gt: LabelMap,
}

/// Mean per-image mIoU of the level each image selects for `target`.
pub fn subset_miou(
    images: &[CalibImage],
    hm: &HmConfig,
    target: &GranularityTarget,
    weights: SelectWeights,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("calibration subset"));
    }
    let mut total = 0.0;
    for im in images {
        let h = hierarchy_levels(&im.stage2, &im.f_hr, hm)?;
        let lvl: &HierarchyLevel = &h.levels[select_level(&h.levels, target, weights)?];
        let cm = confusion(&lvl.labels, &im.gt, &[0])?;
        total += hungarian_miou(&cm, None)?.miou;
    }
    Ok(total / images.len() as f64)
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub images: Vec<String>,
    pub target: GranularityTarget,
    pub sweep: SweepReport,
}

impl CalibrationResult {
    pub fn report(&self) -> String {
        let mut s = format!("images={}\n", self.images.join(","));
        s.push_str(&report_text(&self.target, Some(&self.sweep)));
        s
    }
}

/// Fits the granularity target on the subset (unless configured) and sweeps
/// the boundary penalty.
pub fn calibrate(cfg: &PipelineConfig, features: &Path, gt: &Path) -> Result<CalibrationResult> {
    let ids = calibration_subset(cfg, features, gt)?;
    let mut images = Vec::with_capacity(ids.len());
    for id in &ids {
        let b = load_bundle(&features.join(id), cfg.weights.as_deref())?;
        let gt_map = read_label_map(gt.join(format!("{id}.tns")))?;
        if !gt_map.matches(&b.f_hr) {
            return Err(Error::ShapeMismatch(format!(
                "{id}: ground truth {}x{} vs features {}x{}",
                gt_map.height(),
                gt_map.width(),
                b.f_hr.height(),
                b.f_hr.width()
            )));
        }
        let (_, stage2) = stage_two(&b, cfg)?;
        images.push(CalibImage {
            id: id.clone(),
            stage2,
            f_hr: b.f_hr,
            gt: gt_map,
        });
    }
    let target = match cfg.target() {
        Some(t) => t,
        None => {
            let gts: Vec<LabelMap> = images.iter().map(|i| i.gt.clone()).collect();
            let fs: Vec<FeatureMap> = images.iter().map(|i| i.f_hr.clone()).collect();
            calibrate_target(&gts, &fs, cfg.calib_aggregate)?
        }
    };
    let sweep = beta_sweep(&cfg.betas, |beta| {
        let hm = HmConfig {
            beta_bnd: beta,
            ..cfg.hm
        };
        subset_miou(&images, &hm, &target, cfg.select_weights)
    })?;
    Ok(CalibrationResult {
        images: ids,
        target,
        sweep,
    })
}

/// Prediction file for image `id`: `<pred>/<id>.tns`, else
/// `<pred>/<id>/selected.tns`, else `<pred>/<id>/level_000.tns`.
pub fn prediction_path(pred: &Path, id: &str) -> Option<PathBuf> {
    [
        pred.join(format!("{id}.tns")),
        pred.join(id).join("selected.tns"),
        pred.join(id).join(level_file(0)),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Ground-truth label receiving unmatched clusters.
    pub background: Option<u32>,
    pub cl_iou: bool,
}

/// Per-image metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub cl_iou: Option<f64>,
    /// `(gt label, IoU)` for classes present.
    pub per_class: Vec<(u32, f64)>,
}

pub fn evaluate_pair(id: &str, pred: &LabelMap, gt: &LabelMap, opts: EvalOptions) -> Result<ImageEval> {
    if opts.cl_iou && opts.background.is_none() {
        return Err(Error::InvalidArgument(
            "centerline IoU needs a background class".into(),
        ));
    }
    let cm = confusion(pred, gt, &[])?;
    let bg = match opts.background {
        Some(label) => Some(cm.gt_index(label).ok_or_else(|| {
            Error::InvalidArgument(format!("{id}: background label {label} absent from ground truth"))
        })?),
        None => None,
    };
    let r = hungarian_miou(&cm, bg)?;
    let cl = if opts.cl_iou {
        let bg_label = opts.background.expect("checked");
        let to_gt: BTreeMap<u32, Option<u32>> = cm
            .pred_ids()
            .iter()
            .zip(&r.mapping)
            .map(|(&p, m)| (p, m.or(bg).map(|g| cm.gt_ids()[g])))
            .collect();
        let pm = BinaryMask::new(
            pred.height(),
            pred.width(),
            pred.labels()
                .iter()
                .map(|p| to_gt[p].is_some_and(|g| g != bg_label))
                .collect(),
        )?;
        let gm = BinaryMask::new(
            gt.height(),
            gt.width(),
            gt.labels().iter().map(|&g| g != bg_label).collect(),
        )?;
        Some(cl_iou(&pm, &gm, CL_TOLERANCE)?)
    } else {
        None
    };
    Ok(ImageEval {
        id: id.to_string(),
        miou: r.miou,
        pixel_accuracy: r.pixel_accuracy,
        cl_iou: cl,
        per_class: r
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(g, v)| v.map(|v| (cm.gt_ids()[g], v)))
            .collect(),
    })
}

/// Evaluates every ground-truth image with a prediction. Per-image scores
/// are averaged in sorted id order.
pub fn evaluate_dirs(pred: &Path, gt: &Path, opts: EvalOptions) -> Result<(EvalSummary, Vec<ImageEval>)> {
    let rd = std::fs::read_dir(gt).map_err(|e| Error::io(gt, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(gt, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".tns") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut evals = Vec::new();
    for id in &ids {
        let p = prediction_path(pred, id).ok_or_else(|| {
            Error::io(
                pred.join(id),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no prediction for image"),
            )
        })?;
        let pm = read_label_map(&p)?;
        let gm = read_label_map(gt.join(format!("{id}.tns")))?;
        evals.push(evaluate_pair(id, &pm, &gm, opts)?);
    }
    if evals.is_empty() {
        return Err(Error::Empty("ground-truth directory"));
    }
    let n = evals.len() as f64;
    let summary = EvalSummary {
        images: evals.len(),
        miou: evals.iter().map(|e| e.miou).sum::<f64>() / n,
        pixel_accuracy: evals.iter().map(|e| e.pixel_accuracy).sum::<f64>() / n,
        cl_iou: opts
            .cl_iou
            .then(|| evals.iter().filter_map(|e| e.cl_iou).sum::<f64>() / n),
    };
    Ok((summary, evals))
}

/// `class,iou` rows: mean IoU of each class over the images containing it.
pub fn class_csv(evals: &[ImageEval]) -> String {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for e in evals {
        for &(c, v) in &e.per_class {
            let a = acc.entry(c).or_default();
            a.0 += v;
            a.1 += 1;
        }
    }
    let mut s = String::from("class,iou\n");
    for (c, (sum, n)) in acc {
        writeln!(s, "{c},{}", sum / n as f64).unwrap();
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Palette colour of a label; 0 is black and no other label is.
pub fn label_color(label: u32, seed: u64) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    let h = splitmix64(seed ^ (label as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let rgb = [(h >> 16) as u8, (h >> 8) as u8, h as u8];
    if rgb == [0, 0, 0] {
        [1, 1, 1]
    } else {
        rgb
    }
}

/// Binary PPM (P6) rendering of a label map.
pub fn colorize(l: &LabelMap, seed: u64) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", l.width(), l.height()).into_bytes();
    out.reserve(l.len() * 3);
    for &v in l.labels() {
        out.extend_from_slice(&label_color(v, seed));
    }
    out
}

//! Scan-level dataset splits, affine augmentation, optimizers and the three
//! training loops (segmentation, detection, categorization).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, IndexOp, Tensor, Var};
use candle_nn::VarMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf_model::Classifier;
use crate::error::{Error, Result};
use crate::metrics::{self, LabelCounts, LobeDice};
use crate::nn;
use crate::seg_model::{SegModel, SEG_CLASSES};

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub positive: bool,
}

impl ScanEntry {
    pub fn new(scan_id: impl Into<String>, positive: bool) -> Self {
        Self {
            scan_id: scan_id.into(),
            positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRequest {
    /// Exact per-label counts for train, validation and test.
    Counts {
        train: LabelSplit,
        val: LabelSplit,
        test: LabelSplit,
    },
    /// Fractions of the whole set; label proportions are preserved as far as rounding allows.
    Ratios { train: f64, val: f64, test: f64 },
}

impl SplitRequest {
    /// 95 training (36 positive, 59 negative), 9 validation (5, 4) and 62 test (31, 31) scans.
    pub fn reference_counts() -> Self {
        SplitRequest::Counts {
            train: LabelSplit {
                positive: 36,
                negative: 59,
            },
            val: LabelSplit {
                positive: 5,
                negative: 4,
            },
            test: LabelSplit {
                positive: 31,
                negative: 31,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<ScanEntry>,
    pub val: Vec<ScanEntry>,
    pub test: Vec<ScanEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl SplitManifest {
    pub fn role_of(&self, scan_id: &str) -> Option<SplitRole> {
        [(SplitRole::Train, &self.train), (SplitRole::Val, &self.val), (SplitRole::Test, &self.test)]
            .into_iter()
            .find(|(_, list)| list.iter().any(|e| e.scan_id == scan_id))
            .map(|(r, _)| r)
    }

    pub fn ids(list: &[ScanEntry]) -> Vec<&str> {
        list.iter().map(|e| e.scan_id.as_str()).collect()
    }

    /// Checks pairwise disjointness and no duplicate ids within a list.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(e.scan_id.as_str()) {
                return Err(Error::invalid(format!("scan {} appears twice in the split", e.scan_id)));
            }
        }
        Ok(())
    }
}

fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out = [0usize; 3];
    for i in 0..3 {
        out[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Assigns whole scans to train/val/test. Deterministic in `seed`.
pub fn split_scans(scans: &[ScanEntry], request: &SplitRequest, seed: u64) -> Result<SplitManifest> {
    let mut ids = HashSet::new();
    if let Some(dup) = scans.iter().find(|s| !ids.insert(s.scan_id.as_str())) {
        return Err(Error::invalid(format!("duplicate scan id {}", dup.scan_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<ScanEntry> = scans.iter().filter(|s| s.positive).cloned().collect();
    let mut neg: Vec<ScanEntry> = scans.iter().filter(|s| !s.positive).cloned().collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    match *request {
        SplitRequest::Counts { train, val, test } => {
            let need_pos = train.positive + val.positive + test.positive;
            let need_neg = train.negative + val.negative + test.negative;
            if need_pos != pos.len() || need_neg != neg.len() {
                return Err(Error::invalid(format!(
                    "requested {need_pos} positive / {need_neg} negative scans, available {} / {}",
                    pos.len(),
                    neg.len()
                )));
            }
            let mut take = |p: usize, n: usize| -> Vec<ScanEntry> {
                let mut out: Vec<ScanEntry> = pos.drain(..p).collect();
                out.extend(neg.drain(..n));
                out
            };
            Ok(SplitManifest {
                train: take(train.positive, train.negative),
                val: take(val.positive, val.negative),
                test: take(test.positive, test.negative),
            })
        }
        SplitRequest::Ratios { train, val, test } => {
            let r = [train, val, test];
            if r.iter().any(|v| !(*v >= 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("split ratios must be non-negative and sum to 1"));
            }
            if scans.is_empty() {
                return Err(Error::invalid("no scans to split"));
            }
            // Interleave the two labels by relative rank so every prefix is stratified.
            let mut keyed: Vec<(f64, ScanEntry)> = Vec::with_capacity(scans.len());
            for list in [&pos, &neg] {
                let n = list.len() as f64;
                keyed.extend(list.iter().enumerate().map(|(i, e)| ((i as f64 + 0.5) / n, e.clone())));
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.positive.cmp(&a.1.positive)));
            let sizes = largest_remainder(scans.len(), r);
            let mut it = keyed.into_iter().map(|(_, e)| e);
            let train = it.by_ref().take(sizes[0]).collect();
            let val = it.by_ref().take(sizes[1]).collect();
            let test = it.collect();
            Ok(SplitManifest { train, val, test })
        }
    }
}

// ---------------------------------------------------------------- augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the image side.
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute shear in degrees.
    pub shear_deg: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translate_frac: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 5.0,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            shear_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translate_frac >= 0.0
            && self.shear_deg >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && [self.rotation_deg, self.translate_frac, self.scale_max, self.shear_deg]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

/// Forward affine map about the image centre: `p' = M (p - c) + c + t`, in (row, col).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// Counter-clockwise rotation as displayed (rows grow downwards).
    pub fn rotation(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self {
            m: [[c, -s], [s, c]],
            t: [0.0, 0.0],
        }
    }

    pub fn compose(rotation_deg: f64, shear_deg: f64, scale: f64, translate: [f64; 2]) -> Self {
        let rot = Self::rotation(rotation_deg).m;
        let sh = shear_deg.to_radians().tan();
        // shear along columns, then rotate, then scale
        let shear = [[1.0, 0.0], [sh, 1.0]];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = scale * (rot[i][0] * shear[0][j] + rot[i][1] * shear[1][j]);
            }
        }
        Self { m, t: translate }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn inverse(&self) -> Option<[[f64; 2]; 2]> {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        Some([[d / det, -b / det], [-c / det, a / det]])
    }

    /// Source coordinates of output pixel `(r, c)` for an image of `dims`.
    fn source(&self, inv: &[[f64; 2]; 2], dims: (usize, usize), r: usize, c: usize) -> (f64, f64) {
        let (cy, cx) = ((dims.0 as f64 - 1.0) / 2.0, (dims.1 as f64 - 1.0) / 2.0);
        let (y, x) = (r as f64 - cy - self.t[0], c as f64 - cx - self.t[1]);
        (inv[0][0] * y + inv[0][1] * x + cy, inv[1][0] * y + inv[1][1] * x + cx)
    }

    pub fn sample(params: &AugmentParams, size: (usize, usize), rng: &mut impl Rng) -> Self {
        fn sym<R: Rng + ?Sized>(rng: &mut R, m: f64) -> f64 {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        }
        let rot = sym(rng, params.rotation_deg);
        let shear = sym(rng, params.shear_deg);
        let scale = if params.scale_max > params.scale_min {
            rng.random_range(params.scale_min..=params.scale_max)
        } else {
            params.scale_min
        };
        let ty = sym(rng, params.translate_frac) * size.0 as f64;
        let tx = sym(rng, params.translate_frac) * size.1 as f64;
        Self::compose(rot, shear, scale, [ty, tx])
    }
}

/// Bilinear warp with zero fill outside the canvas.
pub fn warp_bilinear(img: &Array2<f32>, a: &Affine) -> Array2<f32> {
    if a.is_identity() {
        return img.clone();
    }
    let Some(inv) = a.inverse() else {
        return Array2::zeros(img.dim());
    };
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            img[[r as usize, c as usize]] as f64
        }
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = a.source(&inv, (h, w), r, c);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        v as f32
    })
}

/// Nearest-neighbour warp with background 0 outside the canvas.
pub fn warp_nearest(mask: &Array2<u8>, a: &Affine) -> Array2<u8> {
    if a.is_identity() {
        return mask.clone();
    }
    let Some(inv) = a.inverse() else {
        return Array2::zeros(mask.dim());
    };
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = a.source(&inv, (h, w), r, c);
        let (y, x) = (sy.round(), sx.round());
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0
        } else {
            mask[[y as usize, x as usize]]
        }
    })
}

/// Applies one randomly drawn transform to an image and, identically, to its mask.
pub fn augment_affine(
    image: &Array2<f32>,
    mask: Option<&Array2<u8>>,
    params: &AugmentParams,
    seed: u64,
) -> Result<(Array2<f32>, Option<Array2<u8>>)> {
    params.validate()?;
    if let Some(m) = mask {
        if m.dim() != image.dim() {
            return Err(Error::DimensionMismatch(format!("mask {:?} vs image {:?}", m.dim(), image.dim())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Affine::sample(params, image.dim(), &mut rng);
    Ok((warp_bilinear(image, &a), mask.map(|m| warp_nearest(m, &a))))
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Detection,
    Categorization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Rmsprop {
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerConfig::Rmsprop { weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub voting_threshold: f64,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentParams>,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Segmentation => Self {
                task,
                batch_size: 2,
                learning_rate: 1e-4,
                optimizer: OptimizerConfig::rmsprop(),
                epochs: 50,
                voting_threshold: 0.10,
                seed: 0,
                augmentation: Some(AugmentParams::default()),
            },
            Task::Detection | Task::Categorization => Self {
                task,
                batch_size: 12,
                learning_rate: 1e-4,
                optimizer: OptimizerConfig::adam(),
                epochs: 20,
                voting_threshold: 0.10,
                seed: 0,
                augmentation: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be >= 1"));
        }
        if !(self.voting_threshold > 0.0 && self.voting_threshold < 1.0) {
            return Err(Error::invalid(format!("voting_threshold must lie in (0, 1), got {}", self.voting_threshold)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    /// Sets one flat key such as `learning_rate`, `optimizer.beta1` or `augmentation.shear_deg`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("{key}: expected a number, got {v:?}")))
        };
        let int = |v: &str| -> Result<u64> {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "task" => {
                self.task = serde_json::from_value(serde_json::Value::String(value.to_string()))
                    .map_err(|_| Error::invalid(format!("unknown task {value:?}")))?
            }
            "batch_size" => self.batch_size = int(value)? as usize,
            "learning_rate" => self.learning_rate = num(value)?,
            "epochs" => self.epochs = int(value)? as usize,
            "voting_threshold" => self.voting_threshold = num(value)?,
            "seed" => self.seed = int(value)?,
            "optimizer" | "optimizer.kind" => {
                self.optimizer = match value {
                    "adam" => OptimizerConfig::adam(),
                    "rmsprop" => OptimizerConfig::rmsprop(),
                    _ => return Err(Error::invalid(format!("unknown optimizer {value:?}"))),
                }
            }
            "optimizer.beta1" | "optimizer.beta2" | "optimizer.eps" => match &mut self.optimizer {
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    let slot = match key {
                        "optimizer.beta1" => beta1,
                        "optimizer.beta2" => beta2,
                        _ => eps,
                    };
                    *slot = num(value)?;
                }
                OptimizerConfig::Rmsprop { .. } => return Err(Error::invalid(format!("{key} applies to adam only"))),
            },
            "optimizer.weight_decay" => match &mut self.optimizer {
                OptimizerConfig::Adam { weight_decay, .. } | OptimizerConfig::Rmsprop { weight_decay } => *weight_decay = num(value)?,
            },
            "augmentation" => {
                self.augmentation = match value {
                    "off" | "none" | "false" | "null" => None,
                    "on" | "default" | "true" => Some(AugmentParams::default()),
                    _ => return Err(Error::invalid(format!("augmentation: expected on/off, got {value:?}"))),
                }
            }
            k if k.starts_with("augmentation.") => {
                let a = self.augmentation.get_or_insert_with(AugmentParams::none);
                let v = num(value)?;
                match &k["augmentation.".len()..] {
                    "rotation_deg" => a.rotation_deg = v,
                    "translate_frac" => a.translate_frac = v,
                    "scale_min" => a.scale_min = v,
                    "scale_max" => a.scale_max = v,
                    "shear_deg" => a.shear_deg = v,
                    _ => return Err(Error::invalid(format!("unknown key {k}"))),
                }
            }
            _ => return Err(Error::invalid(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Parses JSON (nested or dotted keys) or `key = value` lines on top of the task defaults.
    pub fn parse(text: &str, default_task: Task) -> Result<Self> {
        let pairs = if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(text)?;
            let mut pairs = Vec::new();
            flatten_json("", &value, &mut pairs)?;
            pairs
        } else {
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.split_once('=')
                        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| Error::invalid(format!("expected key = value, got {l:?}")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let task = match pairs.iter().find(|(k, _)| k == "task") {
            Some((_, v)) => {
                let mut probe = Self::for_task(default_task);
                probe.set("task", v)?;
                probe.task
            }
            None => default_task,
        };
        let mut config = Self::for_task(task);
        // the optimizer kind resets its parameters, so it goes first
        for (k, v) in pairs.iter().filter(|(k, _)| k == "optimizer" || k == "optimizer.kind" || k == "augmentation") {
            config.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| !matches!(k.as_str(), "task" | "optimizer" | "optimizer.kind" | "augmentation")) {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, default_task: Task) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, default_task)
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out)?;
            }
        }
        Value::Null => out.push((prefix.to_string(), "off".into())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::Array(_) => return Err(Error::invalid(format!("{prefix}: arrays are not supported"))),
    }
    Ok(())
}

// ---------------------------------------------------------------- optimizers

/// Adam or RMSProp with L2 penalty added to the gradient (PyTorch semantics).
pub struct Optimizer {
    config: OptimizerConfig,
    vars: Vec<Var>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: Vec<i32>,
}

const RMSPROP_ALPHA: f64 = 0.99;
const RMSPROP_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: OptimizerConfig, vars: Vec<Var>) -> Self {
        let n = vars.len();
        Self {
            config,
            vars,
            first: vec![None; n],
            second: vec![None; n],
            steps: vec![0; n],
        }
    }

    pub fn for_varmap(config: OptimizerConfig, varmap: &VarMap) -> Self {
        Self::new(config, nn::trainable_vars(varmap).into_iter().map(|(_, v)| v).collect())
    }

    /// Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor();
            self.steps[i] += 1;
            let update = match self.config {
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let g = if weight_decay != 0.0 { (g + theta.affine(weight_decay, 0.0)?)? } else { g.clone() };
                    let m = match &self.first[i] {
                        Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                        None => (&g * (1.0 - beta1))?,
                    };
                    let v = match &self.second[i] {
                        Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                        None => (g.sqr()? * (1.0 - beta2))?,
                    };
                    let t = self.steps[i];
                    let mhat = (&m / (1.0 - beta1.powi(t)))?;
                    let vhat = (&v / (1.0 - beta2.powi(t)))?;
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                    (mhat / (vhat.sqrt()? + eps)?)?
                }
                OptimizerConfig::Rmsprop { weight_decay } => {
                    let g = if weight_decay != 0.0 { (g + theta.affine(weight_decay, 0.0)?)? } else { g.clone() };
                    let v = match &self.second[i] {
                        Some(v) => ((v * RMSPROP_ALPHA)? + (g.sqr()? * (1.0 - RMSPROP_ALPHA))?)?,
                        None => (g.sqr()? * (1.0 - RMSPROP_ALPHA))?,
                    };
                    let out = (&g / (v.sqrt()? + RMSPROP_EPS)?)?;
                    self.second[i] = Some(v);
                    out
                }
            };
            var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- generic loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation set was supplied.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["epoch", "train_loss", "val_metric"]).map_err(csv_err)?;
        for r in &self.records {
            let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), val]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mini-batch training with per-epoch shuffling. After every epoch `validate`
/// is called with the 1-based epoch; the parameters (and buffers) of the epoch
/// with the highest metric are restored at the end, earliest epoch on ties.
pub fn fit<S>(
    varmap: &VarMap,
    samples: &[S],
    config: &TrainConfig,
    mut batch_loss: impl FnMut(&[&S], &mut ChaCha8Rng) -> Result<Tensor>,
    mut validate: impl FnMut(usize) -> Result<Option<f64>>,
) -> Result<History> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::for_varmap(config.optimizer, varmap);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&S> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = batch_loss(&batch, &mut rng)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {value} at batch {}", b + 1),
                });
            }
            opt.step(&loss.backward()?, config.learning_rate)?;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = total / count as f64;
        let val_metric = validate(epoch)?;
        if let Some(v) = val_metric {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("validation metric {v}"),
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, nn::snapshot(varmap)?));
            }
        }
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val {val_metric:?}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
    }
    let best_epoch = match best {
        Some((_, epoch, snap)) => {
            nn::restore(varmap, &snap)?;
            epoch
        }
        None => config.epochs,
    };
    Ok(History { records, best_epoch })
}

// ---------------------------------------------------------------- task loops

/// A prepared classifier input (`input_size`² after masking) with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub image: Array2<f32>,
    /// 0/1 for detection, category index for categorization.
    pub label: usize,
    /// Extra multiplier on the class weight (2 for feedback samples).
    pub weight: f64,
    pub scan_id: String,
    pub slice_index: usize,
}

/// Three consecutive preprocessed slices and their lobe label grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub images: [Array2<f32>; 3],
    pub labels: [Array2<u8>; 3],
    pub scan_id: String,
    pub center_index: usize,
}

fn image_batch(images: &[&Array2<f32>]) -> Result<Tensor> {
    let (h, w) = images[0].dim();
    let data: Vec<f32> = images.iter().flat_map(|i| i.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?)
}

fn classes_for(task: Task) -> Result<usize> {
    match task {
        Task::Detection => Ok(2),
        Task::Categorization => Ok(4),
        Task::Segmentation => Err(Error::invalid("segmentation config passed to a classifier loop")),
    }
}

/// Label counts of the training split; these and only these set the loss weights.
pub fn training_counts(train: &[ClassSample], task: Task) -> Result<LabelCounts> {
    LabelCounts::from_labels(train.iter().map(|s| s.label), classes_for(task)?)
}

/// Per-sample loss weights: class weight from `counts` times the sample's own multiplier.
pub fn sample_weights(batch: &[&ClassSample], task: Task, counts: &LabelCounts) -> Result<Vec<f64>> {
    match task {
        Task::Detection => batch
            .iter()
            .map(|s| Ok(metrics::binary_weight(s.label == 1, counts)? * s.weight))
            .collect(),
        _ => {
            let w = metrics::class_weights(counts)?;
            Ok(batch.iter().map(|s| w[s.label] * s.weight).collect())
        }
    }
}

/// Weighted loss of one batch; BN runs in training mode only when `bn_train`.
pub fn classifier_loss(
    model: &Classifier,
    batch: &[&ClassSample],
    task: Task,
    counts: &LabelCounts,
    augment: Option<(&AugmentParams, &mut ChaCha8Rng)>,
    bn_train: bool,
) -> Result<Tensor> {
    let classes = classes_for(task)?;
    if model.head_outputs() != classes {
        return Err(Error::invalid(format!("{task:?} needs {classes} outputs, model has {}", model.head_outputs())));
    }
    let images: Vec<Array2<f32>> = match augment {
        Some((p, rng)) => batch
            .iter()
            .map(|s| warp_bilinear(&s.image, &Affine::sample(p, s.image.dim(), rng)))
            .collect(),
        None => batch.iter().map(|s| s.image.clone()).collect(),
    };
    let x = image_batch(&images.iter().collect::<Vec<_>>())?;
    let logits = model.forward_t(&x, bn_train)?;
    let probs = metrics::softmax_rows(&logits)?;
    let weights = sample_weights(batch, task, counts)?;
    match task {
        Task::Detection => {
            let targets: Vec<bool> = batch.iter().map(|s| s.label == 1).collect();
            metrics::wbce_loss(&probs.i((.., 1))?, &targets, &weights)
        }
        _ => {
            let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
            metrics::wce_loss(&probs, &targets, &weights)
        }
    }
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn classifier_accuracy(model: &Classifier, samples: &[ClassSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut correct = 0;
    for chunk in samples.chunks(16) {
        let x = image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        for (p, s) in model.probabilities(&x)?.iter().zip(chunk) {
            let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            correct += usize::from(best == s.label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains a detector (WBCE) or categorizer (WCE); selection by validation accuracy.
pub fn train_classifier(model: &Classifier, train: &[ClassSample], val: &[ClassSample], config: &TrainConfig) -> Result<History> {
    let task = config.task;
    let counts = training_counts(train, task)?;
    let aug = config.augmentation;
    fit(
        &model.varmap,
        train,
        config,
        |batch, rng| classifier_loss(model, batch, task, &counts, aug.as_ref().map(|p| (p, rng)), true),
        |_| {
            if val.is_empty() {
                Ok(None)
            } else {
                classifier_accuracy(model, val).map(Some)
            }
        },
    )
}

/// Continues training on the original samples plus feedback samples at double
/// weight. Batch-norm statistics stay frozen; the model version increments.
pub fn finetune_from_feedback(
    model: &mut Classifier,
    original: &[ClassSample],
    feedback: &[ClassSample],
    config: &TrainConfig,
) -> Result<History> {
    if feedback.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one feedback sample"));
    }
    let task = config.task;
    let counts = if original.is_empty() {
        training_counts(feedback, task)?
    } else {
        training_counts(original, task)?
    };
    let mut all: Vec<ClassSample> = original.to_vec();
    all.extend(feedback.iter().cloned().map(|mut s| {
        s.weight *= 2.0;
        s
    }));
    let aug = config.augmentation;
    let history = {
        let m = &*model;
        fit(
            &m.varmap,
            &all,
            config,
            |batch, rng| classifier_loss(m, batch, task, &counts, aug.as_ref().map(|p| (p, rng)), false),
            |_| Ok(None),
        )?
    };
    model.version += 1;
    Ok(history)
}

fn seg_batch(batch: &[&SegSample], augment: Option<(&AugmentParams, &mut ChaCha8Rng)>) -> Result<(Tensor, Tensor)> {
    let (h, w) = batch[0].images[0].dim();
    let mut x = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut y = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut aug = augment;
    for s in batch {
        let a = match aug.as_mut() {
            Some((p, rng)) => Affine::sample(p, (h, w), &mut **rng),
            None => Affine::identity(),
        };
        for k in 0..3 {
            x.extend(warp_bilinear(&s.images[k], &a).iter().copied());
            y.extend(warp_nearest(&s.labels[k], &a).iter().map(|&v| v as u32));
        }
    }
    let n = batch.len();
    Ok((
        Tensor::from_vec(x, (n, 3, 1, h, w), &Device::Cpu)?,
        Tensor::from_vec(y, (n * 3, h, w), &Device::Cpu)?,
    ))
}

/// Per-pixel cross-entropy over all three frames of each triplet.
pub fn segmentation_loss(model: &SegModel, batch: &[&SegSample], augment: Option<(&AugmentParams, &mut ChaCha8Rng)>) -> Result<Tensor> {
    let (x, y) = seg_batch(batch, augment)?;
    let logits = model.net.forward_t(&x.to_dtype(model.dtype)?, true)?;
    let (n, t, k, h, w) = logits.dims5()?;
    debug_assert_eq!(k, SEG_CLASSES);
    metrics::pixel_cross_entropy(&logits.reshape((n * t, k, h, w))?, &y)
}

/// Mean lobe dice of the centre-slice predictions.
pub fn segmentation_dice(model: &SegModel, samples: &[SegSample]) -> Result<f64> {
    let mut tally = LobeDice::default();
    for chunk in samples.chunks(4) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, _) = seg_batch(&refs, None)?;
        let logits = model.net.forward_t(&x.to_dtype(model.dtype)?, false)?;
        let pred = logits.i((.., 1))?.argmax(1)?.to_dtype(DType::U32)?;
        let (h, w) = chunk[0].labels[1].dim();
        let mut preds = Vec::with_capacity(chunk.len());
        for b in 0..chunk.len() {
            let v = pred.i(b)?.flatten_all()?.to_vec1::<u32>()?;
            preds.push(Array2::from_shape_vec((h, w), v.into_iter().map(|x| x as u8).collect()).map_err(|e| Error::Shape(e.to_string()))?);
        }
        let truths: Vec<Array2<u8>> = chunk.iter().map(|s| s.labels[1].clone()).collect();
        tally.add(&preds, &truths)?;
    }
    Ok(tally.mean())
}

/// Trains the segmenter with multiclass cross-entropy; selection by mean lobe dice.
pub fn train_segmenter(model: &SegModel, train: &[SegSample], val: &[SegSample], config: &TrainConfig) -> Result<History> {
    if config.task != Task::Segmentation {
        return Err(Error::invalid("train_segmenter needs a segmentation config"));
    }
    let aug = config.augmentation;
    fit(
        &model.varmap,
        train,
        config,
        |batch, rng| segmentation_loss(model, batch, aug.as_ref().map(|p| (p, rng))),
        |_| {
            if val.is_empty() {
                Ok(None)
            } else {
                segmentation_dice(model, val).map(Some)
            }
        },
    )
}

//! Lung/lobe segmentation: a Tiramisu-style dense encoder/decoder with optional
//! residual squeeze-and-excitation and a convolutional LSTM bottleneck that
//! runs across the three slices of each input triplet.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Tensor};
use candle_nn::{BatchNorm, Linear, VarBuilder, VarMap};
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::nn::{self, layers};
use crate::nn::layers::{bn_relu, Conv2d, ConvSpec, ConvTranspose2d};
use crate::volume_io::{apply_window, make_triplets, resized_slices, CTVolume, NormStats, WindowSpec};

/// Output channels: 0 is non-lung, 1..=5 are lobes.
pub const SEG_CLASSES: usize = 6;
pub const NUM_STAGES: usize = 5;
/// Crops covering less than this fraction of the slice are discarded.
pub const MIN_CROP_FRACTION: f64 = 0.01;

const CHECKPOINT_KIND: &str = "lungscope.seg";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub use_res_se: bool,
    pub use_clstm: bool,
    pub clstm_bidirectional: bool,
    pub growth_rate: usize,
    /// Layers per encoder dense block; the decoder mirrors them.
    pub layers_per_dense_block: Vec<usize>,
    pub bottleneck_layers: usize,
    pub initial_features: usize,
    pub input_size: usize,
    pub se_reduction: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            use_res_se: false,
            use_clstm: false,
            clstm_bidirectional: false,
            growth_rate: 12,
            layers_per_dense_block: vec![4; NUM_STAGES],
            bottleneck_layers: 4,
            initial_features: 48,
            input_size: 224,
            se_reduction: 8,
        }
    }
}

impl SegConfig {
    /// The four ablation variants in order: baseline, Res-SE, C-LSTM, Res-SE + C-LSTM.
    pub fn variants(base: &SegConfig) -> [SegConfig; 4] {
        let with = |se: bool, lstm: bool| SegConfig {
            use_res_se: se,
            use_clstm: lstm,
            clstm_bidirectional: false,
            ..base.clone()
        };
        [with(false, false), with(true, false), with(false, true), with(true, true)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers_per_dense_block.len() != NUM_STAGES {
            return Err(Error::invalid(format!(
                "exactly {NUM_STAGES} encoder stages required, got {}",
                self.layers_per_dense_block.len()
            )));
        }
        if self.growth_rate == 0
            || self.initial_features == 0
            || self.bottleneck_layers == 0
            || self.se_reduction == 0
            || self.layers_per_dense_block.contains(&0)
        {
            return Err(Error::invalid("growth rate, feature counts and block depths must be >= 1"));
        }
        if self.clstm_bidirectional && !self.use_clstm {
            return Err(Error::invalid("clstm_bidirectional requires use_clstm"));
        }
        let stride = 1 << NUM_STAGES;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::invalid(format!("input_size must be a positive multiple of {stride}")));
        }
        Ok(())
    }
}

/// Squeeze-and-excitation: per-channel gates from globally pooled features.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
    residual: bool,
    gate_override: Option<f64>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction: usize, residual: bool, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc1: layers::linear(channels, hidden, vb.pp("fc1"))?,
            fc2: layers::linear(hidden, channels, vb.pp("fc2"))?,
            residual,
            gate_override: None,
        })
    }

    /// Test hook: replaces every computed gate with a constant.
    #[doc(hidden)]
    pub fn set_gate_override(&mut self, gate: Option<f64>) {
        self.gate_override = gate;
    }

    /// Per-channel spatial mean, `[n, c]`.
    pub fn pooled(x: &Tensor) -> Result<Tensor> {
        Ok(x.mean((2, 3))?)
    }

    /// Gates in (0, 1), `[n, c]`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(g) = self.gate_override {
            let (n, c, _, _) = x.dims4()?;
            return Ok(Tensor::full(g, (n, c), x.device())?.to_dtype(x.dtype())?);
        }
        let z = self.fc1.forward(&Self::pooled(x)?)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.fc2.forward(&z)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gates(x)?.unsqueeze(2)?.unsqueeze(3)?;
        let scaled = x.broadcast_mul(&g)?;
        Ok(if self.residual { (scaled + x)? } else { scaled })
    }
}

/// Convolutional LSTM cell; one 3×3 convolution over `[x, h]` yields the i, f, g, o gates.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    conv: Conv2d,
    in_channels: usize,
    hidden: usize,
}

impl ConvLstmCell {
    pub fn new(in_channels: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(in_channels + hidden, 4 * hidden, ConvSpec::k(3), vb.pp("conv"))?,
            in_channels,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, n: usize, h: usize, w: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
        let z = Tensor::zeros((n, self.hidden, h, w), dtype, &Device::Cpu)?;
        Ok((z.clone(), z))
    }

    /// One recurrence step; returns `(output, hidden, cell)` where output equals the new hidden state.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, cx, hh, ww) = x.dims4()?;
        if cx != self.in_channels {
            return Err(Error::Shape(format!("input has {cx} channels, cell expects {}", self.in_channels)));
        }
        let expect = [n, self.hidden, hh, ww];
        if h.dims() != expect || c.dims() != expect {
            return Err(Error::Shape(format!(
                "state dims {:?}/{:?} do not match input-derived {:?}",
                h.dims(),
                c.dims(),
                expect
            )));
        }
        let z = self.conv.forward(&Tensor::cat(&[x, h], 1)?)?;
        let k = self.hidden;
        let i = candle_nn::ops::sigmoid(&z.narrow(1, 0, k)?)?;
        let f = candle_nn::ops::sigmoid(&z.narrow(1, k, k)?)?;
        let g = z.narrow(1, 2 * k, k)?.tanh()?;
        let o = candle_nn::ops::sigmoid(&z.narrow(1, 3 * k, k)?)?;
        let c_new = ((f * c)? + (i * g)?)?;
        let h_new = (o * c_new.tanh()?)?;
        Ok((h_new.clone(), h_new, c_new))
    }

    /// Runs over `xs` in order (or reversed) from zero states; outputs are in input order.
    pub fn run(&self, xs: &[Tensor], reverse: bool) -> Result<Vec<Tensor>> {
        let Some(first) = xs.first() else {
            return Ok(Vec::new());
        };
        let (n, _, hh, ww) = first.dims4()?;
        let (mut h, mut c) = self.zero_state(n, hh, ww, first.dtype())?;
        let mut out = vec![None; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let (o, h2, c2) = self.step(&xs[t], &h, &c)?;
            out[t] = Some(o);
            h = h2;
            c = c2;
        }
        Ok(out.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}

/// Convenience wrapper matching the single-step contract.
pub fn conv_lstm_step(cell: &ConvLstmCell, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    cell.step(x, h, c)
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(in_c: usize, n_layers: usize, growth: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|j| {
                let c = in_c + j * growth;
                let vb = vb.pp(format!("layer{j}"));
                Ok(DenseLayer {
                    bn: layers::batch_norm(c, vb.pp("bn"))?,
                    conv: Conv2d::new(c, growth, ConvSpec::k(3), vb.pp("conv"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Returns `(input ++ new features, new features only)`.
    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let mut all = vec![x.clone()];
        let mut new = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let inp = Tensor::cat(&all, 1)?;
            let y = l.conv.forward(&bn_relu(&l.bn, &inp, train)?)?;
            all.push(y.clone());
            new.push(y);
        }
        Ok((Tensor::cat(&all, 1)?, Tensor::cat(&new, 1)?))
    }
}

#[derive(Debug, Clone)]
struct TransitionDown {
    bn: BatchNorm,
    conv: Conv2d,
}

impl TransitionDown {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.conv.forward(&bn_relu(&self.bn, x, train)?)?.max_pool2d(2)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    block: DenseBlock,
    se: Option<SqueezeExcite>,
}

impl Stage {
    fn se(&self, x: Tensor) -> Result<Tensor> {
        match &self.se {
            Some(se) => se.forward(&x),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    stage: Stage,
    fwd: Option<ConvLstmCell>,
    bwd: Option<ConvLstmCell>,
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct Tiramisu {
    config: SegConfig,
    conv0: Conv2d,
    down: Vec<(Stage, TransitionDown)>,
    bottleneck: Bottleneck,
    up: Vec<(ConvTranspose2d, Stage)>,
    head: Conv2d,
}

impl Tiramisu {
    pub fn new(config: &SegConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let g = config.growth_rate;
        let se = |c: usize, vb: VarBuilder| -> Result<Option<SqueezeExcite>> {
            if config.use_res_se {
                Ok(Some(SqueezeExcite::new(c, config.se_reduction, true, vb)?))
            } else {
                Ok(None)
            }
        };
        let conv0 = Conv2d::new(1, config.initial_features, ConvSpec::k(3), vb.pp("conv0"))?;
        let mut m = config.initial_features;
        let mut skips = Vec::with_capacity(NUM_STAGES);
        let mut down = Vec::with_capacity(NUM_STAGES);
        for (i, &n) in config.layers_per_dense_block.iter().enumerate() {
            let vb = vb.pp(format!("down{i}"));
            let block = DenseBlock::new(m, n, g, vb.pp("block"))?;
            m += n * g;
            let stage = Stage {
                block,
                se: se(m, vb.pp("se"))?,
            };
            skips.push(m);
            let td = TransitionDown {
                bn: layers::batch_norm(m, vb.pp("td.bn"))?,
                conv: Conv2d::new(m, m, ConvSpec::k(1), vb.pp("td.conv"))?,
            };
            down.push((stage, td));
        }

        let vbb = vb.pp("bottleneck");
        let block = DenseBlock::new(m, config.bottleneck_layers, g, vbb.pp("block"))?;
        let mut c_up = config.bottleneck_layers * g;
        let stage = Stage {
            block,
            se: se(c_up, vbb.pp("se"))?,
        };
        let (fwd, bwd) = if config.use_clstm {
            let fwd = ConvLstmCell::new(c_up, c_up, vbb.pp("clstm_fwd"))?;
            let bwd = if config.clstm_bidirectional {
                Some(ConvLstmCell::new(c_up, c_up, vbb.pp("clstm_bwd"))?)
            } else {
                None
            };
            (Some(fwd), bwd)
        } else {
            (None, None)
        };
        if bwd.is_some() {
            c_up *= 2;
        }
        let bottleneck = Bottleneck { stage, fwd, bwd };

        let mut up = Vec::with_capacity(NUM_STAGES);
        let mut out_c = 0;
        for j in 0..NUM_STAGES {
            let i = NUM_STAGES - 1 - j;
            let vb = vb.pp(format!("up{j}"));
            let tu = ConvTranspose2d::new(c_up, c_up, 2, 2, vb.pp("tu"))?;
            let in_c = c_up + skips[i];
            let n = config.layers_per_dense_block[i];
            let block = DenseBlock::new(in_c, n, g, vb.pp("block"))?;
            let last = j == NUM_STAGES - 1;
            out_c = if last { in_c + n * g } else { n * g };
            up.push((
                tu,
                Stage {
                    block,
                    se: se(out_c, vb.pp("se"))?,
                },
            ));
            c_up = out_c;
        }
        let head = Conv2d::new(out_c, SEG_CLASSES, ConvSpec::k(1), vb.pp("head"))?;
        Ok(Self {
            config: config.clone(),
            conv0,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    /// `x`: `[n, 3, 1, s, s]` triplets → logits `[n, 3, 6, s, s]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, t, c, h, w) = x.dims5()?;
        let s = self.config.input_size;
        if t != 3 || c != 1 || h != s || w != s {
            return Err(Error::Shape(format!("expected [n, 3, 1, {s}, {s}], got {:?}", x.dims())));
        }
        let mut x = self.conv0.forward(&x.reshape((n * t, 1, h, w))?)?;
        let mut skips = Vec::with_capacity(NUM_STAGES);
        for (stage, td) in &self.down {
            let (full, _) = stage.block.forward(&x, train)?;
            let full = stage.se(full)?;
            x = td.forward(&full, train)?;
            skips.push(full);
        }
        let (_, new) = self.bottleneck.stage.block.forward(&x, train)?;
        x = self.bottleneck.stage.se(new)?;
        if let Some(fwd) = &self.bottleneck.fwd {
            x = self.recurrent(fwd, self.bottleneck.bwd.as_ref(), &x, n, t)?;
        }
        for (j, (tu, stage)) in self.up.iter().enumerate() {
            let skip = &skips[NUM_STAGES - 1 - j];
            let y = Tensor::cat(&[&tu.forward(&x)?, skip], 1)?;
            let (full, new) = stage.block.forward(&y, train)?;
            x = stage.se(if j == NUM_STAGES - 1 { full } else { new })?;
        }
        let logits = self.head.forward(&x)?;
        Ok(logits.reshape((n, t, SEG_CLASSES, h, w))?)
    }

    fn recurrent(&self, fwd: &ConvLstmCell, bwd: Option<&ConvLstmCell>, x: &Tensor, n: usize, t: usize) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let seq = x.reshape((n, t, c, h, w))?;
        let steps: Vec<Tensor> = (0..t).map(|i| seq.i((.., i))).collect::<candle_core::Result<_>>()?;
        let mut outs = fwd.run(&steps, false)?;
        if let Some(bwd) = bwd {
            let back = bwd.run(&steps, true)?;
            outs = outs
                .iter()
                .zip(&back)
                .map(|(a, b)| Tensor::cat(&[a, b], 1))
                .collect::<candle_core::Result<_>>()?;
        }
        let cc = outs[0].dim(1)?;
        Ok(Tensor::stack(&outs, 1)?.reshape((n * t, cc, h, w))?)
    }

    /// Test hook: forces every squeeze-and-excitation gate to a constant.
    #[doc(hidden)]
    pub fn set_se_gate_override(&mut self, gate: Option<f64>) {
        let stages = self
            .down
            .iter_mut()
            .map(|(s, _)| s)
            .chain(std::iter::once(&mut self.bottleneck.stage))
            .chain(self.up.iter_mut().map(|(_, s)| s));
        for s in stages {
            if let Some(se) = &mut s.se {
                se.set_gate_override(gate);
            }
        }
    }
}

/// Anything that maps `[n, 3, 1, s, s]` triplets to `[n, 3, 6, s, s]` logits.
pub trait TripletSegmenter {
    fn input_size(&self) -> usize;
    fn triplet_logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// Per-slice labels in `0..=5`, 0 = non-lung.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub labels: Array2<u8>,
}

impl SegMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v as usize >= SEG_CLASSES) {
            return Err(Error::invalid("segmentation labels must lie in 0..=5"));
        }
        Ok(Self { labels })
    }

    /// All lobes merged.
    pub fn lung(&self) -> Array2<bool> {
        self.labels.mapv(|v| v > 0)
    }

    pub fn has_lung(&self) -> bool {
        self.labels.iter().any(|&v| v > 0)
    }
}

/// Trained (or freshly initialized) segmentation model with its preprocessing.
pub struct SegModel {
    pub net: Tiramisu,
    pub varmap: VarMap,
    pub window: WindowSpec,
    pub norm: NormStats,
    pub dtype: DType,
    pub version: u32,
}

impl SegModel {
    pub fn new(config: &SegConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let net = Tiramisu::new(config, nn::seeded_builder(&varmap, seed, dtype))?;
        Ok(Self {
            net,
            varmap,
            window: WindowSpec::default(),
            norm: NormStats::identity(),
            dtype,
            version: 0,
        })
    }

    pub fn config(&self) -> &SegConfig {
        self.net.config()
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.varmap, None)
    }

    /// Window, resize to the model input and standardize every slice.
    pub fn preprocess(&self, volume: &CTVolume) -> Result<Vec<Array2<f32>>> {
        let windowed = apply_window(volume, &self.window)?;
        let size = self.config().input_size;
        Ok(resized_slices(&windowed, size)
            .into_iter()
            .map(|s| s.mapv(|v| self.norm.apply(v)))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), CHECKPOINT_KIND.to_string()),
            ("format".to_string(), FORMAT_VERSION.to_string()),
            ("config".to_string(), serde_json::to_string(self.config())?),
            ("window".to_string(), serde_json::to_string(&self.window)?),
            ("norm".to_string(), serde_json::to_string(&self.norm)?),
            ("version".to_string(), self.version.to_string()),
        ]);
        nn::save_checkpoint(path, &self.varmap, meta)
    }

    /// Loads a checkpoint; the embedded config is validated before any weights are read.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = nn::read_file(path)?;
        let meta = nn::read_checkpoint_metadata(&bytes)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks metadata key {k}", path.display())))
        };
        if get("kind")? != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("{} is not a segmentation checkpoint", path.display())));
        }
        if get("format")? != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", get("format")?)));
        }
        let config: SegConfig = serde_json::from_str(get("config")?)?;
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("incompatible config: {e}")))?;
        let mut model = Self::new(&config, 0, DType::F32)?;
        model.window = serde_json::from_str(get("window")?)?;
        model.norm = serde_json::from_str(get("norm")?)?;
        model.version = get("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("version is not an integer".into()))?;
        nn::load_tensors_into(&model.varmap, &bytes, DType::F32)?;
        Ok(model)
    }
}

impl TripletSegmenter for SegModel {
    fn input_size(&self) -> usize {
        self.config().input_size
    }

    fn triplet_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward_t(&x.to_dtype(self.dtype)?, false)
    }
}

const SEG_BATCH: usize = 4;

/// Stacks triplets into `[n, 3, 1, s, s]`.
pub fn triplet_tensor(triplets: &[crate::volume_io::SliceTriplet]) -> Result<Tensor> {
    let Some(first) = triplets.first() else {
        return Err(Error::invalid("no triplets"));
    };
    let (h, w) = first.images[0].dim();
    let mut data = Vec::with_capacity(triplets.len() * 3 * h * w);
    for t in triplets {
        for img in &t.images {
            data.extend(img.iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (triplets.len(), 3, 1, h, w), &Device::Cpu)?)
}

/// Per-class probabilities `(classes, s, s)` for slices already preprocessed to the model
/// input size. Each slice takes its prediction from the triplet in which it is the center.
pub fn slice_probabilities<M: TripletSegmenter + ?Sized>(model: &M, slices: &[Array2<f32>]) -> Result<Vec<Array3<f32>>> {
    let s = model.input_size();
    if let Some(bad) = slices.iter().find(|x| x.dim() != (s, s)) {
        return Err(Error::Shape(format!("slice dims {:?} do not match model input {s}x{s}", bad.dim())));
    }
    let triplets = make_triplets(slices)?;
    let mut out = Vec::with_capacity(slices.len());
    for chunk in triplets.chunks(SEG_BATCH) {
        let logits = model.triplet_logits(&triplet_tensor(chunk)?)?;
        let probs = candle_nn::ops::softmax(&logits.i((.., 1))?, 1)?;
        for b in 0..chunk.len() {
            let v = probs.i(b)?.flatten_all()?.to_vec1::<f32>()?;
            out.push(Array3::from_shape_vec((SEG_CLASSES, s, s), v).map_err(|e| Error::Shape(e.to_string()))?);
        }
    }
    Ok(out)
}

fn argmax_mask(probs: &Array3<f32>) -> Result<SegMask> {
    let (_, h, w) = probs.dim();
    let grid = Array2::from_shape_fn((h, w), |(r, c)| {
        let mut best = 0;
        for k in 1..SEG_CLASSES {
            if probs[[k, r, c]] > probs[[best, r, c]] {
                best = k;
            }
        }
        best as u8
    });
    SegMask::new(grid)
}

/// Labels slices already preprocessed to the model input size.
pub fn segment_slices<M: TripletSegmenter + ?Sized>(model: &M, slices: &[Array2<f32>]) -> Result<Vec<SegMask>> {
    slice_probabilities(model, slices)?.iter().map(argmax_mask).collect()
}

/// Full-volume segmentation at the volume's own in-plane resolution. Class probabilities
/// are resized bilinearly before the argmax, which keeps lobe boundaries smooth.
pub fn segment_volume(model: &SegModel, volume: &CTVolume) -> Result<Vec<SegMask>> {
    let (_, rows, cols) = volume.dims();
    let slices = model.preprocess(volume)?;
    slice_probabilities(model, &slices)?
        .iter()
        .map(|p| {
            let mut up = Array3::zeros((SEG_CLASSES, rows, cols));
            for (k, plane) in p.outer_iter().enumerate() {
                up.index_axis_mut(Axis(0), k)
                    .assign(&imageops::resize_bilinear(&plane.to_owned(), rows, cols));
            }
            argmax_mask(&up)
        })
        .collect()
}

/// One lobe's bounding-box crop of a slice; pixels outside the lobe are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LobeCrop {
    pub image: Array2<f32>,
    pub mask: Array2<bool>,
    pub lobe_index: u8,
    pub scan_id: String,
    pub slice_index: usize,
    pub area_fraction: f64,
    /// `[row0, col0, height, width]` in slice coordinates.
    pub bbox: [usize; 4],
}

pub fn extract_lobe_crops(slice: &Array2<f32>, mask: &SegMask, scan_id: &str, slice_index: usize) -> Result<Vec<LobeCrop>> {
    if slice.dim() != mask.labels.dim() {
        return Err(Error::DimensionMismatch(format!(
            "slice {:?} vs mask {:?}",
            slice.dim(),
            mask.labels.dim()
        )));
    }
    let total = slice.len() as f64;
    let mut crops = Vec::new();
    for lobe in 1..SEG_CLASSES as u8 {
        let (mut r0, mut c0, mut r1, mut c1, mut count) = (usize::MAX, usize::MAX, 0, 0, 0usize);
        for ((r, c), &v) in mask.labels.indexed_iter() {
            if v == lobe {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let area_fraction = count as f64 / total;
        if area_fraction < MIN_CROP_FRACTION {
            continue;
        }
        let inside = mask.labels.slice(s![r0..=r1, c0..=c1]).mapv(|v| v == lobe);
        let mut image = slice.slice(s![r0..=r1, c0..=c1]).to_owned();
        ndarray::Zip::from(&mut image).and(&inside).for_each(|p, &m| {
            if !m {
                *p = 0.0
            }
        });
        crops.push(LobeCrop {
            image,
            mask: inside,
            lobe_index: lobe,
            scan_id: scan_id.to_string(),
            slice_index,
            area_fraction,
            bbox: [r0, c0, r1 - r0 + 1, c1 - c0 + 1],
        });
    }
    Ok(crops)
}

/// Softmax over the class axis of `[.., 6, h, w]` logits.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, logits.rank() - 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(input: usize) -> SegConfig {
        SegConfig {
            growth_rate: 2,
            layers_per_dense_block: vec![1; 5],
            bottleneck_layers: 1,
            initial_features: 4,
            input_size: input,
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SegConfig::default().validate().is_ok());
        let bad = SegConfig {
            clstm_bidirectional: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SegConfig {
            layers_per_dense_block: vec![4; 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SegModel::new(&tiny(48), 0, DType::F32).is_err());
    }

    #[test]
    fn baseline_forward_shape_and_softmax() {
        let m = SegModel::new(&tiny(32), 1, DType::F32).unwrap();
        let x = random(&[2, 3, 1, 32, 32], 2, DType::F32);
        let y = m.triplet_logits(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 6, 32, 32]);
        let p = class_probabilities(&y).unwrap();
        let sums = p.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let cfg = SegConfig {
            use_res_se: true,
            use_clstm: true,
            clstm_bidirectional: true,
            ..tiny(32)
        };
        let m = SegModel::new(&cfg, 3, DType::F32).unwrap();
        let x = random(&[1, 3, 1, 32, 32], 4, DType::F32);
        let a = m.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variant_parameter_counts_increase() {
        let counts: Vec<usize> = SegConfig::variants(&SegConfig::default())
            .iter()
            .map(|c| SegModel::new(c, 0, DType::F32).unwrap().param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        let bidi = SegConfig {
            use_clstm: true,
            clstm_bidirectional: true,
            ..Default::default()
        };
        assert!(SegModel::new(&bidi, 0, DType::F32).unwrap().param_count() > counts[2]);
    }

    #[test]
    fn squeeze_excite_examples() {
        let vm = VarMap::new();
        let vb = nn::seeded_builder(&vm, 5, DType::F64);
        let mut plain = SqueezeExcite::new(6, 8, false, vb.pp("a")).unwrap();
        let mut res = SqueezeExcite::new(6, 8, true, vb.pp("b")).unwrap();
        let zero = Tensor::zeros((1, 6, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let out = res.forward(&zero).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(out, 0.0);

        let x = random(&[2, 6, 5, 7], 6, DType::F64);
        let g = res.gates(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));

        plain.set_gate_override(Some(1.0));
        res.set_gate_override(Some(1.0));
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(plain.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), xv);
        let doubled: Vec<f64> = xv.iter().map(|v| 2.0 * v).collect();
        assert_eq!(res.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), doubled);

        let pooled = SqueezeExcite::pooled(&x).unwrap().to_vec2::<f64>().unwrap();
        for n in 0..2 {
            for c in 0..6 {
                let mut sum = 0.0;
                for i in 0..5 {
                    for j in 0..7 {
                        sum += xv[((n * 6 + c) * 5 + i) * 7 + j];
                    }
                }
                assert_abs_diff_eq!(pooled[n][c], sum / 35.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn residual_se_with_closed_gates_reduces_to_baseline() {
        let cfg = SegConfig {
            use_res_se: true,
            ..tiny(32)
        };
        let mut se = SegModel::new(&cfg, 9, DType::F64).unwrap();
        let base = SegModel::new(&tiny(32), 10, DType::F64).unwrap();
        let shared = nn::named_vars(&se.varmap);
        for (name, var) in nn::named_vars(&base.varmap) {
            let (_, dst) = shared.iter().find(|(n, _)| *n == name).unwrap();
            dst.set(var.as_tensor()).unwrap();
        }
        se.net.set_se_gate_override(Some(0.0));
        let x = random(&[1, 3, 1, 32, 32], 11, DType::F64);
        let a = se.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = base.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_lstm_zero_weights_closed_form() {
        let vm = VarMap::new();
        let vb = nn::seeded_builder(&vm, 0, DType::F64);
        let cell = ConvLstmCell::new(2, 3, vb).unwrap();
        for (_, v) in nn::named_vars(&vm) {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = random(&[1, 2, 4, 4], 1, DType::F64);
        let (h, c) = cell.zero_state(1, 4, 4, DType::F64).unwrap();
        let (o, h1, c1) = cell.step(&x, &h, &c).unwrap();
        for t in [o, h1, c1] {
            assert_eq!(t.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn conv_lstm_null_input_and_recurrence() {
        let vm = VarMap::new();
        let vb = nn::seeded_builder(&vm, 11, DType::F64);
        let cell = ConvLstmCell::new(2, 3, vb).unwrap();
        for (name, v) in nn::named_vars(&vm) {
            if name.ends_with("bias") {
                v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let zero = Tensor::zeros((1, 2, 5, 5), DType::F64, &Device::Cpu).unwrap();
        let (h, c) = cell.zero_state(1, 5, 5, DType::F64).unwrap();
        let (o, _, _) = cell.step(&zero, &h, &c).unwrap();
        assert_eq!(o.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);

        let x = random(&[1, 2, 5, 5], 12, DType::F64);
        let outs = cell.run(&[x.clone(), x.clone(), x], false).unwrap();
        let a = outs[0].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = outs[1].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(a, b);

        let bad = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(cell.step(&zero, &bad, &bad).is_err());
    }

    struct ConstLogits {
        size: usize,
        favored: usize,
    }

    impl TripletSegmenter for ConstLogits {
        fn input_size(&self) -> usize {
            self.size
        }
        fn triplet_logits(&self, x: &Tensor) -> Result<Tensor> {
            let n = x.dim(0)?;
            let mut v = vec![0f32; SEG_CLASSES];
            v[self.favored] = 5.0;
            let t = Tensor::from_vec(v, (1, 1, SEG_CLASSES, 1, 1), &Device::Cpu)?;
            Ok(t.broadcast_as((n, 3, SEG_CLASSES, self.size, self.size))?.contiguous()?)
        }
    }

    #[test]
    fn constant_stub_segments_to_background() {
        let stub = ConstLogits { size: 8, favored: 0 };
        let slices = vec![Array2::<f32>::ones((8, 8)); 5];
        let masks = segment_slices(&stub, &slices).unwrap();
        assert_eq!(masks.len(), 5);
        assert!(masks.iter().all(|m| m.labels.iter().all(|&v| v == 0)));
        assert_eq!(segment_slices(&stub, &slices[..1]).unwrap().len(), 1);
        assert!(segment_slices(&stub, &[Array2::zeros((9, 9))]).is_err());
    }

    #[test]
    fn segment_volume_restores_resolution() {
        let m = SegModel::new(&tiny(32), 0, DType::F32).unwrap();
        let vol = CTVolume::new(Array3::from_elem((3, 40, 24), -800), [1.0; 3], "v").unwrap();
        let masks = segment_volume(&m, &vol).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks.iter().all(|m| m.labels.dim() == (40, 24)));
    }

    #[test]
    fn lobe_crop_examples() {
        let slice = Array2::from_elem((224, 224), 0.5f32);
        let empty = SegMask::new(Array2::zeros((224, 224))).unwrap();
        assert!(extract_lobe_crops(&slice, &empty, "s", 0).unwrap().is_empty());

        let mut labels = Array2::zeros((224, 224));
        labels.slice_mut(s![10..70, 100..160]).fill(3);
        let crops = extract_lobe_crops(&slice, &SegMask::new(labels).unwrap(), "s", 4).unwrap();
        assert_eq!(crops.len(), 1);
        let c = &crops[0];
        assert_eq!((c.lobe_index, c.slice_index), (3, 4));
        assert_eq!(c.image.dim(), (60, 60));
        assert_eq!(c.bbox, [10, 100, 60, 60]);
        assert_eq!(c.area_fraction, 3600.0 / 50176.0);

        let mut labels = Array2::zeros((224, 224));
        for j in 0..5 {
            labels[[50, 50 + j]] = 2;
        }
        assert!(extract_lobe_crops(&slice, &SegMask::new(labels).unwrap(), "s", 0).unwrap().is_empty());
    }

    #[test]
    fn crops_zero_exactly_the_non_lobe_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slice = Array2::from_shape_fn((40, 40), |_| rng.random_range(0.1f32..1.0));
        let labels = Array2::from_shape_fn((40, 40), |(r, c)| ((r / 10 + c / 13) % 6) as u8);
        let mask = SegMask::new(labels.clone()).unwrap();
        for crop in extract_lobe_crops(&slice, &mask, "s", 0).unwrap() {
            let [r0, c0, h, w] = crop.bbox;
            for i in 0..h {
                for j in 0..w {
                    let lobe = labels[[r0 + i, c0 + j]] == crop.lobe_index;
                    assert_eq!(crop.mask[[i, j]], lobe);
                    if lobe {
                        assert_eq!(crop.image[[i, j]], slice[[r0 + i, c0 + j]]);
                    } else {
                        assert_eq!(crop.image[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.safetensors");
        let cfg = SegConfig {
            use_clstm: true,
            ..tiny(32)
        };
        let mut m = SegModel::new(&cfg, 21, DType::F32).unwrap();
        m.norm = NormStats { mean: 0.3, std: 0.2 };
        m.version = 4;
        m.save(&path).unwrap();
        let back = SegModel::load(&path).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!((back.norm, back.version), (m.norm, 4));
        let x = random(&[1, 3, 1, 32, 32], 22, DType::F32);
        let a = m.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.triplet_logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}

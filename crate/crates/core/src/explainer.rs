//! GradCAM saliency, VarGrad noise-ensemble aggregation and heat-map overlays.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, Var};
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clf_model::Classifier;
use crate::error::{Error, Result};
use crate::imageops;

pub const OVERLAY_ALPHA: f64 = 0.4;

/// A model that can be split at a named layer into activations and a score head.
pub trait Attributable {
    /// Activations `[1, k, h, w]` of `layer` for input `[1, 1, H, W]`.
    fn activations(&self, x: &Tensor, layer: &str) -> Result<Tensor>;
    /// Logits `[1, classes]` from activations of `layer`.
    fn logits_from(&self, a: &Tensor, layer: &str) -> Result<Tensor>;
    fn default_layer(&self) -> String;
}

impl Attributable for Classifier {
    fn activations(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        Classifier::activations(self, x, layer)
    }

    fn logits_from(&self, a: &Tensor, layer: &str) -> Result<Tensor> {
        Classifier::logits_from(self, a, layer)
    }

    fn default_layer(&self) -> String {
        Classifier::default_layer(self).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarGradConfig {
    pub n_samples: usize,
    /// Noise standard deviation as a fraction of the input's standard deviation.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for VarGradConfig {
    fn default() -> Self {
        Self {
            n_samples: 15,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl VarGradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid(format!("vargrad needs n_samples >= 2, got {}", self.n_samples)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Non-negative, at input resolution.
    pub values: Array2<f32>,
    pub target_category: usize,
    pub layer_name: String,
    pub vargrad: Option<VarGradConfig>,
}

impl SaliencyMap {
    pub fn range(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Min-max normalized copy; an all-zero map stays zero and a constant non-zero map becomes ones.
    pub fn normalized(&self) -> Array2<f32> {
        let (lo, hi) = self.range();
        if hi <= 0.0 {
            return Array2::zeros(self.values.dim());
        }
        if hi == lo {
            return Array2::ones(self.values.dim());
        }
        self.values.mapv(|v| (v - lo) / (hi - lo))
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f32::NEG_INFINITY);
        for (idx, &v) in self.values.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }
}

/// Channel weights (spatial mean of the target-score gradient) and the activations they weigh.
pub struct GradCamParts {
    pub weights: Vec<f64>,
    pub activations: Array3<f64>,
}

fn input_tensor(x: &Array2<f32>) -> Result<Tensor> {
    let (h, w) = x.dim();
    Ok(Tensor::from_iter(x.iter().copied(), &Device::Cpu)?.reshape((1, 1, h, w))?)
}

pub fn gradcam_parts<M: Attributable + ?Sized>(model: &M, x: &Array2<f32>, target: usize, layer: &str) -> Result<GradCamParts> {
    let a = model.activations(&input_tensor(x)?, layer)?;
    if a.rank() != 4 || a.dim(0)? != 1 {
        return Err(Error::Shape(format!("layer {layer:?} is not spatial: activations {:?}", a.dims())));
    }
    let var = Var::from_tensor(&a.detach())?;
    let logits = model.logits_from(var.as_tensor(), layer)?;
    let classes = logits.dim(1)?;
    if target >= classes {
        return Err(Error::invalid(format!("target category {target} out of range for {classes} outputs")));
    }
    let score = logits.i((0, target))?;
    let grads = score.backward()?;
    let (_, k, h, w) = a.dims4()?;
    let weights = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.mean((2, 3))?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; k],
    };
    let flat = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let activations = Array3::from_shape_vec((k, h, w), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(GradCamParts { weights, activations })
}

/// ReLU of the gradient-weighted activation sum, bilinearly upsampled to the input size.
pub fn gradcam<M: Attributable + ?Sized>(model: &M, x: &Array2<f32>, target: usize, layer: Option<&str>) -> Result<SaliencyMap> {
    let layer = layer.map(str::to_string).unwrap_or_else(|| model.default_layer());
    let parts = gradcam_parts(model, x, target, &layer)?;
    let (_, h, w) = parts.activations.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for (wk, ak) in parts.weights.iter().zip(parts.activations.outer_iter()) {
        cam.scaled_add(*wk, &ak);
    }
    let cam = cam.mapv(|v| v.max(0.0) as f32);
    let (oh, ow) = x.dim();
    let values = if (h, w) == (oh, ow) {
        cam
    } else {
        imageops::resize_bilinear(&cam, oh, ow).mapv(|v| v.max(0.0))
    };
    Ok(SaliencyMap {
        values,
        target_category: target,
        layer_name: layer,
        vargrad: None,
    })
}

fn population_std(x: &Array2<f32>) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-pixel population variance of GradCAM maps over noise-perturbed copies of the input.
pub fn vargrad<M: Attributable + ?Sized>(
    model: &M,
    x: &Array2<f32>,
    target: usize,
    layer: Option<&str>,
    config: &VarGradConfig,
) -> Result<SaliencyMap> {
    config.validate()?;
    let sigma = config.noise_std * population_std(x);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut maps = Vec::with_capacity(config.n_samples);
    let mut layer_name = String::new();
    for _ in 0..config.n_samples {
        let noisy = x.mapv(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v as f64 + sigma * z) as f32
        });
        let m = gradcam(model, &noisy, target, layer)?;
        layer_name = m.layer_name;
        maps.push(m.values.mapv(|v| v as f64));
    }
    let n = config.n_samples as f64;
    let mean = maps.iter().fold(Array2::<f64>::zeros(x.dim()), |acc, m| acc + m) / n;
    let values = maps
        .iter()
        .fold(Array2::<f64>::zeros(x.dim()), |acc, m| acc + (m - &mean).mapv(|d| d * d))
        .mapv(|v| (v / n) as f32);
    Ok(SaliencyMap {
        values,
        target_category: target,
        layer_name,
        vargrad: Some(*config),
    })
}

fn gray_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders a windowed slice (values in [0, 1]) as an 8-bit grayscale RGB image.
pub fn grayscale(slice: &Array2<f32>) -> RgbImage {
    let (h, w) = slice.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let g = gray_level(slice[[r as usize, c as usize]]);
        Rgb([g, g, g])
    })
}

/// Jet colormap, components in [0, 1].
pub fn jet(t: f64) -> [f64; 3] {
    let f = |x: f64| (1.5 - x.abs()).clamp(0.0, 1.0);
    [f(4.0 * t - 3.0), f(4.0 * t - 2.0), f(4.0 * t - 1.0)]
}

/// Blends the normalized map over the grayscale slice; per-pixel opacity is
/// `OVERLAY_ALPHA` times the normalized saliency.
pub fn render_overlay(map: &SaliencyMap, slice: &Array2<f32>) -> Result<RgbImage> {
    if map.values.dim() != slice.dim() {
        return Err(Error::DimensionMismatch(format!(
            "saliency {:?} vs slice {:?}",
            map.values.dim(),
            slice.dim()
        )));
    }
    let norm = map.normalized();
    let mut img = grayscale(slice);
    for (c, r, px) in img.enumerate_pixels_mut() {
        let t = norm[[r as usize, c as usize]] as f64;
        if t == 0.0 {
            continue;
        }
        let a = OVERLAY_ALPHA * t;
        let heat = jet(t);
        for ch in 0..3 {
            let g = px.0[ch] as f64;
            px.0[ch] = ((1.0 - a) * g + a * 255.0 * heat[ch]).round() as u8;
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub target_category: usize,
    pub layer: String,
    pub vargrad: Option<VarGradConfig>,
    /// Raw `[min, max]` before normalization.
    pub range: [f32; 2],
}

/// Writes the overlay PNG and a JSON sidecar next to it (same stem, `.json`).
pub fn export_saliency(map: &SaliencyMap, slice: &Array2<f32>, png_path: &Path) -> Result<()> {
    let png = encode_png(&render_overlay(map, slice)?)?;
    std::fs::write(png_path, png).map_err(|e| Error::io(png_path, e))?;
    let (lo, hi) = map.range();
    let sidecar = SaliencySidecar {
        target_category: map.target_category,
        layer: map.layer_name.clone(),
        vargrad: map.vargrad,
        range: [lo, hi],
    };
    let json_path = png_path.with_extension("json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Small differentiable models with closed-form saliency, shared with the integration tests.
#[doc(hidden)]
pub mod toy {
    use super::*;

    /// Activations `[x, x²]`; score 0 is `p·ΣA¹ + q·ΣA²`, score 1 is constant zero.
    pub struct TwoMap {
        pub p: f64,
        pub q: f64,
    }

    impl Attributable for TwoMap {
        fn activations(&self, x: &Tensor, _layer: &str) -> Result<Tensor> {
            let x = x.to_dtype(DType::F64)?;
            Ok(Tensor::cat(&[x.clone(), x.sqr()?], 1)?)
        }

        fn logits_from(&self, a: &Tensor, _layer: &str) -> Result<Tensor> {
            let s1 = a.i((.., 0))?.sum_all()?;
            let s2 = a.i((.., 1))?.sum_all()?;
            let y = ((s1 * self.p)? + (s2 * self.q)?)?;
            Ok(Tensor::stack(&[y, Tensor::new(0f64, &Device::Cpu)?], 0)?.unsqueeze(0)?)
        }

        fn default_layer(&self) -> String {
            "maps".into()
        }
    }

    /// Single map `A = x`; score `g·ΣA`, so the GradCAM map is `ReLU(g·x)`.
    pub struct Linear {
        pub g: f64,
    }

    impl Attributable for Linear {
        fn activations(&self, x: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok(x.to_dtype(DType::F64)?)
        }

        fn logits_from(&self, a: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok((a.sum_all()? * self.g)?.reshape((1, 1))?)
        }

        fn default_layer(&self) -> String {
            "identity".into()
        }
    }

    /// Score independent of the activations.
    pub struct Detached;

    impl Attributable for Detached {
        fn activations(&self, x: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok(x.to_dtype(DType::F64)?)
        }

        fn logits_from(&self, _a: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok(Tensor::new(&[[1.5f64, -0.5]], &Device::Cpu)?)
        }

        fn default_layer(&self) -> String {
            "identity".into()
        }
    }

    /// Flattened activations, for the non-spatial error path.
    pub struct Flat;

    impl Attributable for Flat {
        fn activations(&self, x: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok(x.flatten_all()?.to_dtype(DType::F64)?)
        }

        fn logits_from(&self, a: &Tensor, _layer: &str) -> Result<Tensor> {
            Ok(a.sum_all()?.reshape((1, 1))?)
        }

        fn default_layer(&self) -> String {
            "flat".into()
        }
    }
}

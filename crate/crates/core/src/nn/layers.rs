use candle_core::{Module, ModuleT, Result, Tensor};
use candle_nn::{BatchNorm, BatchNormConfig, Init, VarBuilder};

use super::conv::{self, ConvGeom};

/// 2D convolution backed by the im2col kernels; grouped convolutions run one kernel per group.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub groups: usize,
}

impl ConvSpec {
    pub fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

fn kaiming(fan_in: usize) -> Init {
    Init::Randn {
        mean: 0.0,
        stdev: (2.0 / fan_in as f64).sqrt(),
    }
}

fn bias_init(fan_in: usize) -> Init {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform { lo: -bound, up: bound }
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, spec: ConvSpec, vb: VarBuilder) -> Result<Self> {
        let fan_in = in_c / spec.groups * spec.kernel * spec.kernel;
        let weight = vb.get_with_hints(
            (out_c, in_c / spec.groups, spec.kernel, spec.kernel),
            "weight",
            kaiming(fan_in),
        )?;
        let bias = if spec.bias {
            Some(vb.get_with_hints(out_c, "bias", bias_init(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: ConvGeom::new(spec.kernel, spec.stride, spec.padding),
            groups: spec.groups,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.groups == 1 {
            conv::conv2d(x, &self.weight, self.geom)?
        } else {
            let g = self.groups;
            let cin = x.dim(1)? / g;
            let cout = self.weight.dim(0)? / g;
            let parts = (0..g)
                .map(|i| conv::conv2d(&x.narrow(1, i * cin, cin)?, &self.weight.narrow(0, i * cout, cout)?, self.geom))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&parts, 1)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution, weights `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let fan_in = in_c * kernel * kernel / (stride * stride).max(1);
        let weight = vb.get_with_hints((in_c, out_c, kernel, kernel), "weight", kaiming(fan_in.max(1)))?;
        let bias = Some(vb.get_with_hints(out_c, "bias", bias_init(fan_in.max(1)))?);
        Ok(Self {
            weight,
            bias,
            geom: ConvGeom::new(kernel, stride, 0),
        })
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv_transpose2d(x, &self.weight, self.geom, None)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

pub fn batch_norm(channels: usize, vb: VarBuilder) -> Result<BatchNorm> {
    candle_nn::batch_norm(
        channels,
        BatchNormConfig {
            eps: 1e-5,
            remove_mean: true,
            affine: true,
            momentum: 0.1,
        },
        vb,
    )
}

pub fn linear(in_f: usize, out_f: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    let weight = vb.get_with_hints((out_f, in_f), "weight", kaiming(in_f))?;
    let bias = vb.get_with_hints(out_f, "bias", bias_init(in_f))?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

/// Linear layer with all-zero weights and bias.
pub fn zero_linear(in_f: usize, out_f: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    let weight = vb.get_with_hints((out_f, in_f), "weight", Init::Const(0.0))?;
    let bias = vb.get_with_hints(out_f, "bias", Init::Const(0.0))?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

/// Max pooling with implicit zero padding, valid for non-negative (post-ReLU) inputs.
/// `ceil` emulates ceil-mode output sizing by padding the trailing edge.
pub fn max_pool_padded(x: &Tensor, kernel: usize, stride: usize, pad: usize, ceil: bool) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let extra = |len: usize| -> usize {
        if !ceil {
            return 0;
        }
        let span = len + 2 * pad;
        let rem = (span.saturating_sub(kernel)) % stride;
        if rem == 0 {
            0
        } else {
            stride - rem
        }
    };
    let (eh, ew) = (extra(h), extra(w));
    let x = if pad > 0 || eh > 0 || ew > 0 {
        x.pad_with_zeros(2, pad, pad + eh)?.pad_with_zeros(3, pad, pad + ew)?
    } else {
        x.clone()
    };
    x.max_pool2d_with_stride(kernel, stride)
}

/// Global average pooling to `[b, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean((2, 3))
}

/// Adaptive average pooling to `out`×`out` using PyTorch's bin boundaries.
pub fn adaptive_avg_pool(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out && w == out {
        return Ok(x.clone());
    }
    let bins = |len: usize| -> Vec<(usize, usize)> {
        (0..out)
            .map(|i| {
                let start = i * len / out;
                let end = ((i + 1) * len).div_ceil(out);
                (start, end - start)
            })
            .collect()
    };
    let (rb, cb) = (bins(h), bins(w));
    let mut rows = Vec::with_capacity(out);
    for &(r0, rl) in &rb {
        let band = x.narrow(2, r0, rl)?;
        let mut cells = Vec::with_capacity(out);
        for &(c0, cl) in &cb {
            cells.push(band.narrow(3, c0, cl)?.mean_keepdim((2, 3))?);
        }
        rows.push(Tensor::cat(&cells, 3)?);
    }
    Tensor::cat(&rows, 2)
}

/// BN → ReLU helper.
pub fn bn_relu(bn: &BatchNorm, x: &Tensor, train: bool) -> Result<Tensor> {
    bn.forward_t(x, train)?.relu()
}

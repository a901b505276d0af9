//! im2col/GEMM convolution kernels registered as candle custom ops.
//!
//! Three CPU primitives cover the forward and backward passes of both the
//! convolution and its transpose:
//!
//! * `conv_forward`: `Y = W · im2col(X)`
//! * `convt_forward`: `Y = col2im(Wᵀ · X)`
//! * `kernel_grad`: `dW = Σ_b G_b · im2col(I_b)ᵀ`
//!
//! The input gradient of a convolution is the transposed convolution of the
//! output gradient with the same weights, and vice versa.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output length of a convolution over an input of length `len`.
    pub fn grid_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output length of a transposed convolution over an input of length `len`.
    pub fn transposed_len(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

trait Elem: Copy + Default + AddAssign + Send + Sync + 'static {
    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta_one: bool,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn slice<'a>(s: &'a CpuStorage) -> Option<&'a [Self]>;
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

impl Elem for f32 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize, a: *const f32, rsa: isize, csa: isize, b: *const f32, rsb: isize,
        csb: isize, beta_one: bool, c: *mut f32, rsc: isize, csc: isize,
    ) {
        let beta = if beta_one { 1.0 } else { 0.0 };
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn slice<'a>(s: &'a CpuStorage) -> Option<&'a [f32]> {
        match s {
            CpuStorage::F32(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<f32>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Elem for f64 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize, a: *const f64, rsa: isize, csa: isize, b: *const f64, rsb: isize,
        csb: isize, beta_one: bool, c: *mut f64, rsc: isize, csc: isize,
    ) {
        let beta = if beta_one { 1.0 } else { 0.0 };
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn slice<'a>(s: &'a CpuStorage) -> Option<&'a [f64]> {
        match s {
            CpuStorage::F64(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<f64>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

fn contiguous<'a, T: Elem>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        bail!("conv kernels require contiguous inputs")
    };
    match T::slice(s) {
        Some(v) => Ok(&v[start..end]),
        None => bail!("conv kernels support f32 and f64 only, got {:?}", s.dtype()),
    }
}

/// Image `[c, ih, iw]` -> columns `[c·k·k, gh·gw]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(img: &[T], c: usize, ih: usize, iw: usize, g: ConvGeom, gh: usize, gw: usize, cols: &mut [T]) {
    let k = g.kernel;
    let n = gh * gw;
    for ci in 0..c {
        let plane = &img[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..gh {
                    let d = &mut dst[oy * gw..(oy + 1) * gw];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= ih as isize {
                        d.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= iw as isize { T::default() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Elem>(cols: &[T], c: usize, ih: usize, iw: usize, g: ConvGeom, gh: usize, gw: usize, img: &mut [T]) {
    let k = g.kernel;
    let n = gh * gw;
    for ci in 0..c {
        let plane = &mut img[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..gh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for ox in 0..gw {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < iw as isize {
                            dst[ix as usize] += src[oy * gw + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [b, ci, ih, iw]`, `w: [co, ci, k, k]` -> `[b, co, gh, gw]`
fn conv_forward<T: Elem>(x: &[T], xd: [usize; 4], w: &[T], co: usize, g: ConvGeom, gh: usize, gw: usize) -> Vec<T> {
    let [b, ci, ih, iw] = xd;
    let kk = ci * g.kernel * g.kernel;
    let n = gh * gw;
    let mut cols = vec![T::default(); kk * n];
    let mut out = vec![T::default(); b * co * n];
    for bi in 0..b {
        im2col(&x[bi * ci * ih * iw..(bi + 1) * ci * ih * iw], ci, ih, iw, g, gh, gw, &mut cols);
        let dst = &mut out[bi * co * n..(bi + 1) * co * n];
        unsafe {
            T::gemm(co, kk, n, w.as_ptr(), kk as isize, 1, cols.as_ptr(), n as isize, 1, false, dst.as_mut_ptr(), n as isize, 1);
        }
    }
    out
}

/// `x: [b, ci, gh, gw]`, `w: [ci, co, k, k]` -> `[b, co, oh, ow]`
fn convt_forward<T: Elem>(x: &[T], xd: [usize; 4], w: &[T], co: usize, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let [b, ci, gh, gw] = xd;
    let ckk = co * g.kernel * g.kernel;
    let n = gh * gw;
    let mut cols = vec![T::default(); ckk * n];
    let mut out = vec![T::default(); b * co * oh * ow];
    for bi in 0..b {
        let src = &x[bi * ci * n..(bi + 1) * ci * n];
        unsafe {
            // cols[ckk, n] = Wᵀ[ckk, ci] · X[ci, n]
            T::gemm(ckk, ci, n, w.as_ptr(), 1, ckk as isize, src.as_ptr(), n as isize, 1, false, cols.as_mut_ptr(), n as isize, 1);
        }
        col2im(&cols, co, oh, ow, g, gh, gw, &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow]);
    }
    out
}

/// `img: [b, ci, ih, iw]`, `grad: [b, cg, gh, gw]` -> `[cg, ci, k, k]`
fn kernel_grad<T: Elem>(img: &[T], id: [usize; 4], grad: &[T], cg: usize, g: ConvGeom, gh: usize, gw: usize) -> Vec<T> {
    let [b, ci, ih, iw] = id;
    let kk = ci * g.kernel * g.kernel;
    let n = gh * gw;
    let mut cols = vec![T::default(); kk * n];
    let mut out = vec![T::default(); cg * kk];
    for bi in 0..b {
        im2col(&img[bi * ci * ih * iw..(bi + 1) * ci * ih * iw], ci, ih, iw, g, gh, gw, &mut cols);
        let gsrc = &grad[bi * cg * n..(bi + 1) * cg * n];
        unsafe {
            // out[cg, kk] += G[cg, n] · colsᵀ[n, kk]
            T::gemm(cg, n, kk, gsrc.as_ptr(), n as isize, 1, cols.as_ptr(), 1, n as isize, true, out.as_mut_ptr(), kk as isize, 1);
        }
    }
    out
}

fn dims4(l: &Layout, what: &str) -> Result<[usize; 4]> {
    match l.shape().dims() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => bail!("{what} must be rank 4, got {other:?}"),
    }
}

/// Convolution `x ⋆ w`, weights `[co, ci, k, k]`.
#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    geom: ConvGeom,
}

impl Conv2dOp {
    fn run<T: Elem>(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let xd = dims4(l1, "conv input")?;
        let [co, wci, k, k2] = dims4(l2, "conv weight")?;
        if wci != xd[1] || k != self.geom.kernel || k2 != k {
            bail!("conv weight {:?} incompatible with input {:?}", l2.shape().dims(), xd)
        }
        let (Some(gh), Some(gw)) = (self.geom.grid_len(xd[2]), self.geom.grid_len(xd[3])) else {
            bail!("conv input {:?} smaller than kernel {}", xd, k)
        };
        let out = conv_forward(contiguous::<T>(s1, l1)?, xd, contiguous::<T>(s2, l2)?, co, self.geom, gh, gw);
        Ok((T::wrap(out), Shape::from((xd[0], co, gh, gw))))
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => bail!("conv2d supports f32 and f64 only"),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, ih, iw) = x.dims4()?;
        let dx = grad.apply_op2_no_bwd(w, &ConvTranspose2dOp { geom: self.geom, out_hw: (ih, iw) })?;
        let dw = x.apply_op2_no_bwd(&grad, &KernelGradOp { geom: self.geom })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Transposed convolution, weights `[ci, co, k, k]`.
#[derive(Debug, Clone, Copy)]
struct ConvTranspose2dOp {
    geom: ConvGeom,
    out_hw: (usize, usize),
}

impl ConvTranspose2dOp {
    fn run<T: Elem>(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let xd = dims4(l1, "conv-transpose input")?;
        let [wci, co, k, k2] = dims4(l2, "conv-transpose weight")?;
        if wci != xd[1] || k != self.geom.kernel || k2 != k {
            bail!("conv-transpose weight {:?} incompatible with input {:?}", l2.shape().dims(), xd)
        }
        let (oh, ow) = self.out_hw;
        if self.geom.grid_len(oh) != Some(xd[2]) || self.geom.grid_len(ow) != Some(xd[3]) {
            bail!("conv-transpose output {:?} inconsistent with input {:?}", self.out_hw, xd)
        }
        let out = convt_forward(contiguous::<T>(s1, l1)?, xd, contiguous::<T>(s2, l2)?, co, self.geom, oh, ow);
        Ok((T::wrap(out), Shape::from((xd[0], co, oh, ow))))
    }
}

impl CustomOp2 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "col2im-conv-transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => bail!("conv_transpose2d supports f32 and f64 only"),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &Conv2dOp { geom: self.geom })?;
        let dw = grad.apply_op2_no_bwd(x, &KernelGradOp { geom: self.geom })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// `(img, grad)` -> kernel gradient `[cg, ci, k, k]`.
#[derive(Debug, Clone, Copy)]
struct KernelGradOp {
    geom: ConvGeom,
}

impl KernelGradOp {
    fn run<T: Elem>(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let id = dims4(l1, "kernel-grad image")?;
        let [gb, cg, gh, gw] = dims4(l2, "kernel-grad gradient")?;
        if gb != id[0] || self.geom.grid_len(id[2]) != Some(gh) || self.geom.grid_len(id[3]) != Some(gw) {
            bail!("kernel-grad shapes inconsistent: image {:?}, gradient {:?}", id, [gb, cg, gh, gw])
        }
        let out = kernel_grad(contiguous::<T>(s1, l1)?, id, contiguous::<T>(s2, l2)?, cg, self.geom, gh, gw);
        let k = self.geom.kernel;
        Ok((T::wrap(out), Shape::from((cg, id[1], k, k))))
    }
}

impl CustomOp2 for KernelGradOp {
    fn name(&self) -> &'static str {
        "conv-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.run::<f64>(s1, l1, s2, l2),
            _ => bail!("kernel gradient supports f32 and f64 only"),
        }
    }
}

/// Differentiable convolution (groups = 1). `w: [co, ci, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { geom })
}

/// Differentiable transposed convolution. `w: [ci, co, k, k]`; output size
/// defaults to `(h - 1)·stride + k - 2·padding`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, geom: ConvGeom, out_hw: Option<(usize, usize)>) -> Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let out_hw = match out_hw {
        Some(hw) => hw,
        None => match (geom.transposed_len(h), geom.transposed_len(wd)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => bail!("conv-transpose padding too large for input {h}x{wd}"),
        },
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvTranspose2dOp { geom, out_hw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let v: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn forward_matches_candle_reference() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (2, 2, 0)] {
            let x = rand(&[2, 3, 9, 11], 1);
            let w = rand(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &w, ConvGeom::new(k, s, p)).unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn transpose_matches_candle_reference() {
        for &(k, s, p) in &[(2, 2, 0), (3, 2, 1), (3, 1, 1)] {
            let x = rand(&[2, 3, 5, 4], 3);
            let w = rand(&[3, 2, k, k], 4);
            let ours = conv_transpose2d(&x, &w, ConvGeom::new(k, s, p), None).unwrap();
            let reference = x.conv_transpose2d(&w, p, 0, s, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_candle_autograd() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Var::from_tensor(&rand(&[2, 3, 7, 7], 5)).unwrap();
            let w = Var::from_tensor(&rand(&[4, 3, k, k], 6)).unwrap();
            let probe = rand(&[2, 4, 7, 7], 7);
            let g = ConvGeom::new(k, s, p);
            let ours = conv2d(&x, &w, g).unwrap();
            let probe = probe.narrow(2, 0, ours.dim(2).unwrap()).unwrap().narrow(3, 0, ours.dim(3).unwrap()).unwrap();
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_abs(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-12);
            assert!(max_abs(ga.get(&w).unwrap(), gb.get(&w).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let x = Var::from_tensor(&rand(&[1, 2, 3, 3], 8)).unwrap();
        let w = Var::from_tensor(&rand(&[2, 3, 2, 2], 9)).unwrap();
        let g = ConvGeom::new(2, 2, 0);
        let probe = rand(&[1, 3, 6, 6], 10);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            (conv_transpose2d(x, w, g, None).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let grads = (conv_transpose2d(&x, &w, g, None).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for (var, is_x) in [(&x, true), (&w, false)] {
            let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().shape().clone();
            for i in 0..base.len() {
                let bump = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()
                };
                let h = 1e-6;
                let (plus, minus) = if is_x {
                    (loss(&bump(h), &w), loss(&bump(-h), &w))
                } else {
                    (loss(&x, &bump(h)), loss(&x, &bump(-h)))
                };
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6, "{i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn f32_path_runs() {
        let x = rand(&[1, 2, 4, 4], 11).to_dtype(DType::F32).unwrap();
        let w = rand(&[3, 2, 3, 3], 12).to_dtype(DType::F32).unwrap();
        let y = conv2d(&x, &w, ConvGeom::new(3, 1, 1)).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        assert_eq!(y.dtype(), DType::F32);
    }
}

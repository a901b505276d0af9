//! 2D raster helpers shared by preprocessing, cropping and saliency upsampling.
//!
//! All resamplers use pixel-centre alignment: output pixel `i` maps to source
//! coordinate `(i + 0.5) * in / out - 0.5`.

use ndarray::Array2;

fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Bilinear resize for intensity images. Same-size input is returned unchanged.
pub fn resize_bilinear(img: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let s = source_coord(i, len, out).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize; used for label grids so labels never mix.
pub fn resize_nearest<T: Copy>(grid: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = grid.dim();
    if (h, w) == (out_h, out_w) {
        return grid.clone();
    }
    let pick = |i: usize, len: usize, out: usize| -> usize {
        let s = ((i as f64 + 0.5) * len as f64 / out as f64).floor() as usize;
        s.min(len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        grid[[pick(y, h, out_h), pick(x, w, out_w)]]
    })
}

/// Zero-pads an image to a centred square canvas.
pub fn pad_to_square(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let side = h.max(w);
    let mut out = Array2::zeros((side, side));
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    out.slice_mut(ndarray::s![oy..oy + h, ox..ox + w]).assign(img);
    out
}

/// Pads to square, then bilinearly resizes to `size`×`size`.
pub fn fit_square(img: &Array2<f32>, size: usize) -> Array2<f32> {
    resize_bilinear(&pad_to_square(img), size, size)
}

//! Stateless tensor ops with explicit backward passes.

use super::Feat;
use crate::scalar::Scalar;

pub fn relu<S: Scalar>(x: &Feat<S>) -> Feat<S> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(x: &Feat<S>, gy: &Feat<S>) -> Feat<S> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        if v <= S::zero() {
            *g = S::zero();
        }
    });
    gx
}

pub fn upsample_nearest<S: Scalar>(x: &Feat<S>, factor: usize) -> Feat<S> {
    let (c, h, w) = x.dim();
    Feat::from_shape_fn((c, h * factor, w * factor), |(ci, i, j)| {
        x[(ci, i / factor, j / factor)]
    })
}

pub fn upsample_nearest_backward<S: Scalar>(gy: &Feat<S>, factor: usize) -> Feat<S> {
    let (c, oh, ow) = gy.dim();
    let mut gx = Feat::<S>::zeros((c, oh / factor, ow / factor));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                gx[(ci, i / factor, j / factor)] += gy[(ci, i, j)];
            }
        }
    }
    gx
}

/// Mean over the spatial extent, one value per channel.
pub fn global_avg_pool<S: Scalar>(x: &Feat<S>) -> Vec<S> {
    let (c, h, w) = x.dim();
    let m = S::from_usize(h * w);
    (0..c)
        .map(|ci| x.index_axis(ndarray::Axis(0), ci).sum() / m)
        .collect()
}

pub fn global_avg_pool_backward<S: Scalar>(gy: &[S], shape: (usize, usize, usize)) -> Feat<S> {
    let (c, h, w) = shape;
    let m = S::from_usize(h * w);
    Feat::from_shape_fn((c, h, w), |(ci, _, _)| gy[ci] / m)
}

pub fn max_pool_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn max_pool<S: Scalar>(x: &Feat<S>, k: usize, stride: usize, pad: usize) -> Feat<S> {
    let (c, h, w) = x.dim();
    let oh = max_pool_out_size(h, k, stride, pad);
    let ow = max_pool_out_size(w, k, stride, pad);
    let mut y = Feat::<S>::zeros((c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                y[(ci, i, j)] = pool_window(x, ci, i, j, k, stride, pad, h, w).0;
            }
        }
    }
    y
}

pub fn max_pool_backward<S: Scalar>(
    x: &Feat<S>,
    gy: &Feat<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Feat<S> {
    let (c, h, w) = x.dim();
    let (_, oh, ow) = gy.dim();
    let mut gx = Feat::<S>::zeros(x.dim());
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                if let (_, Some((mi, mj))) = pool_window(x, ci, i, j, k, stride, pad, h, w) {
                    gx[(ci, mi, mj)] += gy[(ci, i, j)];
                }
            }
        }
    }
    gx
}

/// Max and its position over one pooling window; first max wins on ties.
/// Padding contributes nothing (as if negative infinity).
#[allow(clippy::too_many_arguments)]
fn pool_window<S: Scalar>(
    x: &Feat<S>,
    ci: usize,
    i: usize,
    j: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> (S, Option<(usize, usize)>) {
    let mut best: Option<(S, (usize, usize))> = None;
    for di in 0..k {
        for dj in 0..k {
            let yi = (i * stride + di) as isize - pad as isize;
            let xj = (j * stride + dj) as isize - pad as isize;
            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                continue;
            }
            let v = x[(ci, yi as usize, xj as usize)];
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, (yi as usize, xj as usize)));
            }
        }
    }
    match best {
        Some((v, pos)) => (v, Some(pos)),
        None => (S::zero(), None),
    }
}

/// Bilinear resample with half-pixel centers. Used for input-space resizing;
/// no backward pass because augmentation sits outside the trained graph.
pub fn resize_bilinear<S: Scalar>(x: &Feat<S>, out_h: usize, out_w: usize) -> Feat<S> {
    let (c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Feat::from_shape_fn((c, out_h, out_w), |(ci, i, j)| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = S::from_f64(fy - y0 as f64);
        let wx = S::from_f64(fx - x0 as f64);
        let one = S::one();
        x[(ci, y0, x0)] * (one - wy) * (one - wx)
            + x[(ci, y0, x1)] * (one - wy) * wx
            + x[(ci, y1, x0)] * wy * (one - wx)
            + x[(ci, y1, x1)] * wy * wx
    })
}

/// Nearest-neighbour resample for label masks: never blends class ids.
pub fn resize_nearest_mask(mask: &ndarray::Array2<u8>, out_h: usize, out_w: usize) -> ndarray::Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    ndarray::Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let yi = (((i as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let xj = (((j as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        mask[(yi, xj)]
    })
}

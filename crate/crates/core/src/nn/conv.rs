//! 2-D convolution via im2col + GEMM, with the matching col2im backward.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::params::{GradBuf, InitKind, LayerKind, ParamId, ParamReg, ParamSet};
use super::Feat;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        reg: &mut ParamReg<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = reg.params.register(
            &format!("{name}.w"),
            &[out_ch, in_ch, k, k],
            InitKind::HeUniform { fan_in },
            reg.rng,
        );
        let b = bias.then(|| {
            reg.params
                .register(&format!("{name}.b"), &[out_ch], InitKind::Constant(0.0), reg.rng)
        });
        reg.note_layer(name, LayerKind::Conv);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Feat<S>) -> Feat<S> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let wmat = ArrayView2::from_shape(
            (self.out_ch, self.in_ch * self.k * self.k),
            ps.slice(self.w),
        )
        .unwrap();
        let mut y = wmat.dot(&cols); // (out_ch, ho*wo)
        if let Some(b) = self.b {
            let bias = ps.slice(b);
            for (mut row, &bv) in y.rows_mut().into_iter().zip(bias) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        y.into_shape_with_order((self.out_ch, ho, wo)).unwrap()
    }

    /// Backward pass: accumulates weight/bias gradients and returns the
    /// gradient with respect to the input.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Feat<S>,
        gy: &Feat<S>,
        grads: &mut GradBuf<S>,
    ) -> Feat<S> {
        let (_, h, w) = x.dim();
        let (co, ho, wo) = gy.dim();
        assert_eq!(co, self.out_ch);
        let gy_flat = gy.view().into_shape_with_order((co, ho * wo)).unwrap();

        let cols = im2col(x, self.k, self.stride, self.pad);
        // dW = dY · colsᵀ
        let gw = gy_flat.dot(&cols.t());
        for (dst, src) in grads.slice_mut(ps, self.w).iter_mut().zip(gw.iter()) {
            *dst += *src;
        }
        if let Some(b) = self.b {
            let gb = grads.slice_mut(ps, b);
            for (i, row) in gy_flat.rows().into_iter().enumerate() {
                gb[i] += row.sum();
            }
        }
        // dX = col2im(Wᵀ · dY)
        let wmat = ArrayView2::from_shape(
            (self.out_ch, self.in_ch * self.k * self.k),
            ps.slice(self.w),
        )
        .unwrap();
        let gcols = wmat.t().dot(&gy_flat);
        col2im(
            &gcols,
            (self.in_ch, h, w),
            self.k,
            self.stride,
            self.pad,
            (ho, wo),
        )
    }
}

/// Unfold `(C, H, W)` into `(C·k·k, Ho·Wo)` patch columns.
pub fn im2col<S: Scalar>(x: &Feat<S>, k: usize, stride: usize, pad: usize) -> Array2<S> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<S>::zeros((c * k * k, ho * wo));
    let xs = x.as_slice().expect("contiguous feature map");
    {
        let cs = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            let xplane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut out[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch columns back into `(C, H, W)`, summing overlaps. Inverse-adjoint
/// of [`im2col`].
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Feat<S> {
    let (c, h, w) = shape;
    let (ho, wo) = out_hw;
    let mut x = Feat::<S>::zeros(shape);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("contiguous cols");
    for ci in 0..c {
        let xplane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut xplane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Matrix view of a conv weight, `(out_ch, in_ch·k·k)`.
pub fn weight_matrix<'a, S: Scalar>(ps: &'a ParamSet<S>, conv: &Conv2d) -> ArrayView2<'a, S> {
    ArrayView2::from_shape(
        (conv.out_ch, conv.in_ch * conv.k * conv.k),
        ps.slice(conv.w),
    )
    .unwrap()
}

#[allow(dead_code)]
pub fn weight_matrix_mut<'a, S: Scalar>(
    ps: &'a mut ParamSet<S>,
    conv: &Conv2d,
) -> ArrayViewMut2<'a, S> {
    let shape = (conv.out_ch, conv.in_ch * conv.k * conv.k);
    ArrayViewMut2::from_shape(shape, ps.slice_mut(conv.w)).unwrap()
}

//! Convolution kernels (im2col + GEMM). Layouts are NCHW; conv kernels are
//! `[F, C, kH, kW]`, transposed-conv kernels are `[C_in, C_out, kH, kW]`.

use crate::error::{dim_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride/padding geometry for a 2-d convolution. Padding is symmetric zero
/// padding; `output_padding` only applies to transposed convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            output_padding: (0, 0),
        }
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_output_padding(mut self, oh: usize, ow: usize) -> Self {
        self.output_padding = (oh, ow);
        self
    }

    /// Output size of a forward convolution along both spatial axes.
    pub fn conv_out(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be at least 1".into(),
            });
        }
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if kh > ph {
            return Err(dim_err("conv2d", "height (kernel larger than padded input)", ph, kh));
        }
        if kw > pw {
            return Err(dim_err("conv2d", "width (kernel larger than padded input)", pw, kw));
        }
        Ok(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }

    /// Output size of a transposed convolution:
    /// `(H - 1)·stride - 2·padding + k + output_padding`.
    pub fn transpose_out(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let oh = (h as isize - 1) * self.stride.0 as isize - 2 * self.padding.0 as isize
            + kh as isize
            + self.output_padding.0 as isize;
        let ow = (w as isize - 1) * self.stride.1 as isize - 2 * self.padding.1 as isize
            + kw as isize
            + self.output_padding.1 as isize;
        if oh <= 0 || ow <= 0 {
            return Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: format!("non-positive output size {oh}x{ow}"),
            });
        }
        if self.output_padding.0 >= self.stride.0 || self.output_padding.1 >= self.stride.1 {
            return Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: "output padding must be smaller than stride".into(),
            });
        }
        Ok((oh as usize, ow as usize))
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl Geometry {
    #[inline]
    fn source(&self, oh: usize, ow: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oh * self.spec.stride.0 + i) as isize - self.spec.padding.0 as isize;
        let x = (ow * self.spec.stride.1 + j) as isize - self.spec.padding.1 as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// `img [C, H, W]` → `col [C·kh·kw, OH·OW]`.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match g.source(oh, ow, i, j) {
                            Some((y, x)) => img[(c * g.in_h + y) * g.in_w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-accumulate columns back into `img`.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((y, x)) = g.source(oh, ow, i, j) {
                            img[(c * g.in_h + y) * g.in_w + x] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    t.expect_rank(op, 4)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("conv2d", x)?;
    let [f, kc, kh, kw] = check4("conv2d", k)?;
    if kc != c {
        return Err(dim_err("conv2d", "1 (input channels)", kc, c));
    }
    let (oh, ow) = spec.conv_out(h, w, kh, kw)?;
    let g = Geometry {
        channels: c,
        in_h: h,
        in_w: w,
        kh,
        kw,
        out_h: oh,
        out_w: ow,
        spec,
    };
    let ckk = c * kh * kw;
    let p = oh * ow;
    let mut out = vec![T::zero(); n * f * p];
    let mut col = vec![T::zero(); ckk * p];
    for b in 0..n {
        im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &g, &mut col);
        let dst = &mut out[b * f * p..(b + 1) * f * p];
        T::gemm(
            f,
            ckk,
            p,
            k.data(),
            ckk as isize,
            1,
            &col,
            p as isize,
            1,
            T::zero(),
            dst,
            p as isize,
            1,
        );
    }
    Tensor::new(&[n, f, oh, ow], out)
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gout: &Tensor<T>,
    spec: ConvSpec,
) -> (Tensor<T>, Tensor<T>) {
    let (s, ks, gs) = (x.shape(), k.shape(), gout.shape());
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = (gs[2], gs[3]);
    let g = Geometry {
        channels: c,
        in_h: h,
        in_w: w,
        kh,
        kw,
        out_h: oh,
        out_w: ow,
        spec,
    };
    let ckk = c * kh * kw;
    let p = oh * ow;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut col = vec![T::zero(); ckk * p];
    let mut gcol = vec![T::zero(); ckk * p];
    for b in 0..n {
        im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &g, &mut col);
        let go = &gout.data()[b * f * p..(b + 1) * f * p];
        // gk[F, CKK] += go[F, P] · colᵀ
        T::gemm(
            f,
            p,
            ckk,
            go,
            p as isize,
            1,
            &col,
            1,
            p as isize,
            T::one(),
            &mut gk,
            ckk as isize,
            1,
        );
        // gcol[CKK, P] = kᵀ · go
        T::gemm(
            ckk,
            f,
            p,
            k.data(),
            1,
            ckk as isize,
            go,
            p as isize,
            1,
            T::zero(),
            &mut gcol,
            p as isize,
            1,
        );
        col2im(&gcol, &g, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
    }
    (Tensor::new(s, gx).expect("shape"), Tensor::new(ks, gk).expect("shape"))
}

pub(crate) fn conv_transpose_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("conv2d_transpose", x)?;
    let [kc, o, kh, kw] = check4("conv2d_transpose", k)?;
    if kc != c {
        return Err(dim_err("conv2d_transpose", "1 (input channels)", kc, c));
    }
    let (oh, ow) = spec.transpose_out(h, w, kh, kw)?;
    // The transposed conv is the adjoint of a conv over the [O, OH, OW] output.
    let g = Geometry {
        channels: o,
        in_h: oh,
        in_w: ow,
        kh,
        kw,
        out_h: h,
        out_w: w,
        spec,
    };
    let okk = o * kh * kw;
    let p = h * w;
    let mut out = vec![T::zero(); n * o * oh * ow];
    let mut col = vec![T::zero(); okk * p];
    for b in 0..n {
        let xb = &x.data()[b * c * p..(b + 1) * c * p];
        // col[OKK, P] = kᵀ[OKK, C] · x[C, P]
        T::gemm(
            okk,
            c,
            p,
            k.data(),
            1,
            okk as isize,
            xb,
            p as isize,
            1,
            T::zero(),
            &mut col,
            p as isize,
            1,
        );
        col2im(&col, &g, &mut out[b * o * oh * ow..(b + 1) * o * oh * ow]);
    }
    Tensor::new(&[n, o, oh, ow], out)
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gout: &Tensor<T>,
    spec: ConvSpec,
) -> (Tensor<T>, Tensor<T>) {
    let (s, ks, gs) = (x.shape(), k.shape(), gout.shape());
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (o, kh, kw) = (ks[1], ks[2], ks[3]);
    let (oh, ow) = (gs[2], gs[3]);
    let g = Geometry {
        channels: o,
        in_h: oh,
        in_w: ow,
        kh,
        kw,
        out_h: h,
        out_w: w,
        spec,
    };
    let okk = o * kh * kw;
    let p = h * w;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gcol = vec![T::zero(); okk * p];
    for b in 0..n {
        im2col(&gout.data()[b * o * oh * ow..(b + 1) * o * oh * ow], &g, &mut gcol);
        let xb = &x.data()[b * c * p..(b + 1) * c * p];
        // gx[C, P] = k[C, OKK] · gcol[OKK, P]
        T::gemm(
            c,
            okk,
            p,
            k.data(),
            okk as isize,
            1,
            &gcol,
            p as isize,
            1,
            T::zero(),
            &mut gx[b * c * p..(b + 1) * c * p],
            p as isize,
            1,
        );
        // gk[C, OKK] += x[C, P] · gcolᵀ
        T::gemm(
            c,
            p,
            okk,
            xb,
            p as isize,
            1,
            &gcol,
            1,
            p as isize,
            T::one(),
            &mut gk,
            okk as isize,
            1,
        );
    }
    (Tensor::new(s, gx).expect("shape"), Tensor::new(ks, gk).expect("shape"))
}

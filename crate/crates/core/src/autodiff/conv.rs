//! Convolution kernels shared by the forward pass and both backward passes.
//!
//! Layout conventions, all row-major:
//!   activations  [n, c, h, w]
//!   conv weights [cout, cin, kh, kw]
//!   column buffer [cin*kh*kw, oh*ow]   (one image at a time)
//!
//! Each image is lowered with im2col and multiplied with the weight matrix in
//! one GEMM call, so the inner loop runs inside `matrixmultiply`'s packed
//! kernels. Images are processed sequentially in index order, which keeps
//! results bit-identical between runs.

use super::scalar::{gemm_rm, Scalar};

/// Static shape of a conv layer application. Padding is fixed to "same" for
/// odd kernels: `ph = kh / 2`, `pw = kw / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }

    /// Output spatial size for same-padding strided convolution.
    pub fn out_hw(&self) -> (usize, usize) {
        let (ph, pw) = self.pad();
        let oh = (self.h + 2 * ph - self.kh) / self.stride + 1;
        let ow = (self.w + 2 * pw - self.kw) / self.stride + 1;
        (oh, ow)
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Lower one image (`cin * h * w` slice) into the column buffer.
/// `cols[(ic*kh + ki)*kw + kj][oy*ow + ox] = x[ic][oy*s - ph + ki][ox*s - pw + kj]`
/// with zeros outside the image.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, cols: &mut [T]) {
    let (ph, pw) = s.pad();
    let (oh, ow) = s.out_hw();
    debug_assert_eq!(x.len(), s.cin * s.h * s.w);
    debug_assert_eq!(cols.len(), s.k() * oh * ow);
    let mut row = 0usize;
    for ic in 0..s.cin {
        let plane = &x[ic * s.h * s.w..(ic + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ki) as isize - ph as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kj) as isize - pw as isize;
                        *d = if ix < 0 || ix >= s.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column-buffer gradient of one image back onto the input
/// gradient (`dx` slice for that image). Exact adjoint of `im2col`.
fn col2im_add<T: Scalar>(dcols: &[T], s: &ConvShape, dx: &mut [T]) {
    let (ph, pw) = s.pad();
    let (oh, ow) = s.out_hw();
    debug_assert_eq!(dx.len(), s.cin * s.h * s.w);
    let mut row = 0usize;
    for ic in 0..s.cin {
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let src = &dcols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ki) as isize - ph as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = ic * s.h * s.w + iy as usize * s.w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kj) as isize - pw as isize;
                        if ix >= 0 && ix < s.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = T::from_f64(d.as_f64() + src[oy * ow + ox].as_f64());
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution: returns `[n, cout, oh, ow]` buffer.
pub fn forward<T: Scalar>(x: &[T], wgt: &[T], bias: &[T], s: &ConvShape) -> Vec<T> {
    let (oh, ow) = s.out_hw();
    let k = s.k();
    let img = s.cin * s.h * s.w;
    let out_img = s.cout * oh * ow;
    let mut out = vec![T::ZERO; s.n * out_img];
    let mut cols = vec![T::ZERO; k * oh * ow];
    for ni in 0..s.n {
        im2col(&x[ni * img..(ni + 1) * img], s, &mut cols);
        gemm_rm(
            s.cout,
            k,
            oh * ow,
            T::ONE,
            wgt,
            false,
            &cols,
            false,
            T::ZERO,
            &mut out[ni * out_img..(ni + 1) * out_img],
        );
    }
    for ni in 0..s.n {
        for oc in 0..s.cout {
            let b = bias[oc];
            let off = ni * out_img + oc * oh * ow;
            for v in &mut out[off..off + oh * ow] {
                *v = T::from_f64(v.as_f64() + b.as_f64());
            }
        }
    }
    out
}

/// Backward convolution. Accumulates into `dx` / `dw` / `db`; any of them may
/// be `None` when that input does not require gradients.
pub fn backward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    dout: &[T],
    s: &ConvShape,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = s.out_hw();
    let k = s.k();
    let img = s.cin * s.h * s.w;
    let out_img = s.cout * oh * ow;

    if let Some(db) = db {
        debug_assert_eq!(db.len(), s.cout);
        for ni in 0..s.n {
            for oc in 0..s.cout {
                let off = ni * out_img + oc * oh * ow;
                let mut acc = 0.0f64;
                for v in &dout[off..off + oh * ow] {
                    acc += v.as_f64();
                }
                db[oc] = T::from_f64(db[oc].as_f64() + acc);
            }
        }
    }

    let mut cols = if dw.is_some() {
        vec![T::ZERO; k * oh * ow]
    } else {
        Vec::new()
    };
    let mut dcols = if dx.is_some() {
        vec![T::ZERO; k * oh * ow]
    } else {
        Vec::new()
    };

    for ni in 0..s.n {
        let dout_n = &dout[ni * out_img..(ni + 1) * out_img];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[ni * img..(ni + 1) * img], s, &mut cols);
            // dW += dOut_n (cout x ohow) * cols_n^T (ohow x k)
            gemm_rm(s.cout, oh * ow, k, T::ONE, dout_n, false, &cols, true, T::ONE, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = W^T (k x cout) * dOut_n (cout x ohow)
            gemm_rm(k, s.cout, oh * ow, T::ONE, wgt, true, dout_n, false, T::ZERO, &mut dcols);
            col2im_add(&dcols, s, &mut dx[ni * img..(ni + 1) * img]);
        }
    }
}

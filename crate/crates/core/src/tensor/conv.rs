use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Padding for [`conv2d`]. `Same` carries one fill value per input channel;
/// out-of-bounds input pixels read that value instead of zero.
#[derive(Debug, Clone, Copy)]
pub enum Padding<'a, T> {
    Valid,
    Same(&'a [T]),
}

/// Output extent and leading pad for one spatial axis.
///
/// `same` gives `ceil(input / stride)` outputs with the total pad split as
/// `total / 2` before and the remainder after.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, same: bool) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    if same {
        let out = input.div_ceil(stride);
        let total = ((out - 1) * stride + kernel).saturating_sub(input);
        Ok((out, total / 2))
    } else {
        if input < kernel {
            return Err(Error::shape(format!(
                "valid convolution of extent {input} with kernel {kernel} has no output"
            )));
        }
        Ok(((input - kernel) / stride + 1, 0))
    }
}

/// Everything needed to unfold a batch of NHWC images for a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub k1: usize,
    pub k2: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        (h, w, channels): (usize, usize, usize),
        (k1, k2): (usize, usize),
        stride: usize,
        same: bool,
    ) -> Result<Self> {
        let (out_h, pad_top) = conv_output_extent(h, k1, stride, same)?;
        let (out_w, pad_left) = conv_output_extent(w, k2, stride, same)?;
        Ok(Self {
            batch,
            h,
            w,
            channels,
            k1,
            k2,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Rows of the unfolded matrix: one per output pixel.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the unfolded matrix, ordered (ky, kx, channel) to match
    /// the k1×k2×m×n kernel layout.
    pub fn patch_len(&self) -> usize {
        self.k1 * self.k2 * self.channels
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds NHWC `input` into a `patches × patch_len` matrix.
pub fn im2col<T: Scalar>(input: &[T], geo: &ConvGeometry, pad: Option<&[T]>, col: &mut [T]) {
    let m = geo.channels;
    let k = geo.patch_len();
    debug_assert_eq!(input.len(), geo.batch * geo.h * geo.w * m);
    debug_assert_eq!(col.len(), geo.patches() * k);
    let mut row = 0;
    for b in 0..geo.batch {
        let img = &input[b * geo.h * geo.w * m..(b + 1) * geo.h * geo.w * m];
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let dst = &mut col[row * k..(row + 1) * k];
                let mut off = 0;
                for ky in 0..geo.k1 {
                    for kx in 0..geo.k2 {
                        let seg = &mut dst[off..off + m];
                        match geo.source(oy, ky, ox, kx) {
                            Some((y, x)) => seg.copy_from_slice(&img[(y * geo.w + x) * m..(y * geo.w + x + 1) * m]),
                            None => match pad {
                                Some(values) => seg.copy_from_slice(values),
                                None => seg.iter_mut().for_each(|v| *v = T::zero()),
                            },
                        }
                        off += m;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds an unfolded gradient back onto NHWC `dx`. Padding
/// positions are dropped.
pub fn col2im<T: Scalar>(dcol: &[T], geo: &ConvGeometry, dx: &mut [T]) {
    let m = geo.channels;
    let k = geo.patch_len();
    let mut row = 0;
    for b in 0..geo.batch {
        let img = &mut dx[b * geo.h * geo.w * m..(b + 1) * geo.h * geo.w * m];
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let src = &dcol[row * k..(row + 1) * k];
                let mut off = 0;
                for ky in 0..geo.k1 {
                    for kx in 0..geo.k2 {
                        if let Some((y, x)) = geo.source(oy, ky, ox, kx) {
                            let dst = &mut img[(y * geo.w + x) * m..(y * geo.w + x + 1) * m];
                            for (d, &s) in dst.iter_mut().zip(&src[off..off + m]) {
                                *d += s;
                            }
                        }
                        off += m;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_kernel<T: Scalar>(m: usize, kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match kernel.shape() {
        &[k1, k2, km, n] if km == m => Ok((k1, k2, n)),
        &[_, _, km, _] => Err(Error::shape(format!(
            "kernel expects {km} input channels, input has {m}"
        ))),
        s => Err(Error::shape(format!("kernel must be k1×k2×m×n, got {s:?}"))),
    }
}

/// Cross-correlation of a batch of NHWC images with a k1×k2×m×n kernel.
/// No kernel flip; bias and activation are the caller's business.
pub fn conv2d_batch<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding<'_, T>,
) -> Result<Tensor<T>> {
    let (batch, h, w, m) = match input.shape() {
        &[b, h, w, m] => (b, h, w, m),
        s => return Err(Error::shape(format!("conv input must be N×h×w×m, got {s:?}"))),
    };
    let (k1, k2, n) = check_kernel(m, kernel)?;
    let (same, pad) = match padding {
        Padding::Valid => (false, None),
        Padding::Same(v) => {
            if v.len() != m {
                return Err(Error::shape(format!("{} pad values for {m} channels", v.len())));
            }
            (true, Some(v))
        }
    };
    let geo = ConvGeometry::new(batch, (h, w, m), (k1, k2), stride, same)?;
    let mut col = vec![T::zero(); geo.patches() * geo.patch_len()];
    im2col(input.data(), &geo, pad, &mut col);
    let mut out = vec![T::zero(); geo.patches() * n];
    gemm(&col, kernel.data(), &mut out, geo.patches(), geo.patch_len(), n);
    Tensor::new(vec![batch, geo.out_h, geo.out_w, n], out)
}

/// Single-image form of [`conv2d_batch`]: `h×w×m → h'×w'×n`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding<'_, T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("conv2d input must be h×w×m, got {s:?}")));
    }
    let batched = input.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let out = conv2d_batch(&batched, kernel, stride, padding)?;
    let os = out.shape().to_vec();
    out.reshape(&os[1..])
}

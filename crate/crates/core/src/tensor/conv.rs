//! 2-D convolution and its adjoint via im2col + GEMM.
//!
//! Convolutions are cross-correlations: no kernel flip. Weights are stored as
//! `(out_channels, in_channels, kernel, kernel)` and a transpose convolution
//! reuses the weight tensor of the forward convolution it is the adjoint of,
//! so `conv_transpose2d` maps `out_channels` planes back to `in_channels`.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "conv spec needs kernel, stride and channels >= 1 \
                 (kernel {kernel}, stride {stride}, channels {in_channels}->{out_channels})"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// `floor((input + 2·padding − kernel) / stride) + 1`
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Config(format!(
                "kernel {} does not fit padded extent {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Length of one im2col column: `in_channels · kernel²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_area()
    }

    /// Confirms that the transpose of this convolution maps an `upper`-sized
    /// plane back onto exactly a `lower`-sized one.
    pub fn check_transpose_target(&self, upper: (usize, usize), lower: (usize, usize)) -> Result<()> {
        let h = self.out_extent(lower.0)?;
        let w = self.out_extent(lower.1)?;
        if (h, w) != upper {
            return Err(Error::Config(format!(
                "transpose of {self:?} cannot produce {lower:?} from {upper:?} \
                 (forward conv of {lower:?} gives {:?})",
                (h, w)
            )));
        }
        Ok(())
    }
}

fn check_weight(op: &'static str, weight: &Tensor, spec: &ConvSpec) -> Result<()> {
    let ws = spec.weight_shape();
    if weight.rank() != 4 {
        return Err(Error::Rank {
            op,
            expected: 4,
            actual: weight.shape().to_vec(),
        });
    }
    let names = ["weight out_channels", "weight in_channels", "weight kernel height", "weight kernel width"];
    for ((&e, &a), name) in ws.iter().zip(weight.shape()).zip(names) {
        check_dim(op, name, e, a)?;
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        check_dim(op, "bias length", channels, b.len())?;
    }
    Ok(())
}

/// Unfolds one `(c, h, w)` image into a `(c·k², oh·ow)` column matrix.
pub(crate) fn im2col(x: &[f32], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;
    let plane = oh * ow;
    for c in 0..spec.in_channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub(crate) fn col2im(cols: &[f32], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, out: &mut [f32]) {
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;
    let plane = oh * ow;
    for c in 0..spec.in_channels {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f32], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in chunk {
                *v += bv;
            }
        }
    }
}

/// Zero-padded strided cross-correlation.
///
/// `input` is `(batch, in_channels, h, w)`; the result is
/// `(batch, out_channels, oh, ow)` with extents from [`ConvSpec::out_extent`].
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (b, c, h, w) = input.dims4(OP)?;
    check_dim(OP, "input channels", spec.in_channels, c)?;
    check_weight(OP, weight, spec)?;
    check_bias(OP, bias, spec.out_channels)?;
    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(w)?;
    let plane = oh * ow;
    let patch = spec.patch_len();
    let mut out = Tensor::zeros(&[b, spec.out_channels, oh, ow]);
    let mut cols = vec![0.0f32; patch * plane];
    for i in 0..b {
        im2col(input.item_slice(i), h, w, spec, oh, ow, &mut cols);
        let dst = out.item_slice_mut(i);
        gemm(
            spec.out_channels,
            patch,
            plane,
            weight.data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            0.0,
            dst,
        );
        add_channel_bias(dst, bias, plane);
    }
    Ok(out)
}

/// Transpose (adjoint) of [`conv2d`] with the same `spec` and `weight`.
///
/// `input` is `(batch, out_channels, h, w)` and the result is
/// `(batch, in_channels, out_hw.0, out_hw.1)`. The target extent must be one
/// that `spec` maps back onto `(h, w)`; otherwise a configuration error is
/// returned.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    const OP: &str = "conv_transpose2d";
    let (b, c, h, w) = input.dims4(OP)?;
    check_dim(OP, "input channels", spec.out_channels, c)?;
    check_weight(OP, weight, spec)?;
    check_bias(OP, bias, spec.in_channels)?;
    spec.check_transpose_target((h, w), out_hw)?;
    let (lh, lw) = out_hw;
    let plane = h * w;
    let patch = spec.patch_len();
    let mut out = Tensor::zeros(&[b, spec.in_channels, lh, lw]);
    let mut cols = vec![0.0f32; patch * plane];
    for i in 0..b {
        gemm(
            patch,
            spec.out_channels,
            plane,
            weight.data(),
            Layout::Transposed,
            input.item_slice(i),
            Layout::Normal,
            0.0,
            &mut cols,
        );
        let dst = out.item_slice_mut(i);
        col2im(&cols, lh, lw, spec, h, w, dst);
        add_channel_bias(dst, bias, lh * lw);
    }
    Ok(out)
}

/// Gradient of a conv2d output w.r.t. its weight, summed over the batch.
pub(crate) fn conv2d_weight_grad(input: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (b, _, h, w) = input.dims4("conv2d backward")?;
    let (_, _, oh, ow) = grad_out.dims4("conv2d backward")?;
    let plane = oh * ow;
    let patch = spec.patch_len();
    let mut cols = vec![0.0f32; patch * plane];
    let mut dw = Tensor::zeros(&spec.weight_shape());
    for i in 0..b {
        im2col(input.item_slice(i), h, w, spec, oh, ow, &mut cols);
        gemm(
            spec.out_channels,
            plane,
            patch,
            grad_out.item_slice(i),
            Layout::Normal,
            &cols,
            Layout::Transposed,
            1.0,
            dw.data_mut(),
        );
    }
    Ok(dw)
}

/// Gradient of a conv_transpose2d output w.r.t. the shared weight.
pub(crate) fn conv_transpose2d_weight_grad(input: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (b, _, h, w) = input.dims4("conv_transpose2d backward")?;
    let (_, _, lh, lw) = grad_out.dims4("conv_transpose2d backward")?;
    let plane = h * w;
    let patch = spec.patch_len();
    let mut cols = vec![0.0f32; patch * plane];
    let mut dw = Tensor::zeros(&spec.weight_shape());
    for i in 0..b {
        im2col(grad_out.item_slice(i), lh, lw, spec, h, w, &mut cols);
        gemm(
            spec.out_channels,
            plane,
            patch,
            input.item_slice(i),
            Layout::Normal,
            &cols,
            Layout::Transposed,
            1.0,
            dw.data_mut(),
        );
    }
    Ok(dw)
}

/// Per-channel sum of a `(batch, channels, h, w)` gradient.
pub(crate) fn channel_sums(grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = grad_out.dims4("bias backward")?;
    let plane = h * w;
    let mut out = vec![0.0f32; c];
    for i in 0..b {
        for (acc, chunk) in out.iter_mut().zip(grad_out.item_slice(i).chunks(plane)) {
            *acc += chunk.iter().sum::<f32>();
        }
    }
    Tensor::new(vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f32) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 23) as f32 - 11.0) * scale)
    }

    /// Direct 7-deep loop, independent of im2col.
    fn conv_direct(x: &Tensor, wt: &Tensor, spec: &ConvSpec) -> Vec<f64> {
        let (b, c, h, w) = x.dims4("t").unwrap();
        let oh = spec.out_extent(h).unwrap();
        let ow = spec.out_extent(w).unwrap();
        let k = spec.kernel;
        let mut out = vec![0.0f64; b * spec.out_channels * oh * ow];
        for n in 0..b {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data()[((o * c + ci) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((n * spec.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let spec = ConvSpec::new(3, 3, 1, 1, 0).unwrap();
        let mut wt = Tensor::zeros(&spec.weight_shape());
        for c in 0..3 {
            wt.data_mut()[c * 3 + c] = 1.0;
        }
        let x = ramp(&[2, 3, 5, 4], 0.1);
        let y = conv2d(&x, &wt, Some(&Tensor::zeros(&[3])), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_pad_two_halves_extent() {
        let spec = ConvSpec::new(3, 4, 5, 2, 2).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let y = conv2d(&x, &Tensor::zeros(&spec.weight_shape()), None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let spec = ConvSpec::new(2, 3, 3, 1, 1).unwrap();
        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&ramp(&[1, 2, 4, 4], 1.0), &Tensor::zeros(&spec.weight_shape()), Some(&bias), &spec).unwrap();
        for (c, chunk) in y.data().chunks(16).enumerate() {
            assert!(chunk.iter().all(|&v| v == bias.data()[c]));
        }
    }

    #[test]
    fn matches_direct_loop() {
        for spec in [
            ConvSpec::new(2, 3, 5, 2, 2).unwrap(),
            ConvSpec::new(3, 2, 3, 1, 0).unwrap(),
            ConvSpec::new(1, 2, 4, 3, 1).unwrap(),
        ] {
            let x = ramp(&[2, spec.in_channels, 9, 7], 0.05);
            let wt = ramp(&spec.weight_shape(), 0.03);
            let got = conv2d(&x, &wt, None, &spec).unwrap();
            let want = conv_direct(&x, &wt, &spec);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn transpose_restores_lower_shape() {
        let spec = ConvSpec::new(3, 128, 5, 2, 2).unwrap();
        let y = Tensor::zeros(&[1, 128, 16, 16]);
        let x = conv_transpose2d(&y, &Tensor::zeros(&spec.weight_shape()), None, &spec, (32, 32)).unwrap();
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn transpose_rejects_unreachable_target() {
        let spec = ConvSpec::new(3, 4, 5, 2, 2).unwrap();
        let y = Tensor::zeros(&[1, 4, 16, 16]);
        let err = conv_transpose2d(&y, &Tensor::zeros(&spec.weight_shape()), None, &spec, (34, 34));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn transpose_of_zero_input_is_bias() {
        let spec = ConvSpec::new(2, 3, 5, 2, 2).unwrap();
        let bias = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        let x = conv_transpose2d(&Tensor::zeros(&[1, 3, 4, 4]), &ramp(&spec.weight_shape(), 1.0), Some(&bias), &spec, (8, 8)).unwrap();
        for (c, chunk) in x.data().chunks(64).enumerate() {
            assert!(chunk.iter().all(|&v| v == bias.data()[c]));
        }
    }

    #[test]
    fn wrong_channel_count_names_dimension() {
        let spec = ConvSpec::new(3, 4, 5, 2, 2).unwrap();
        let err = conv2d(&Tensor::zeros(&[1, 2, 8, 8]), &Tensor::zeros(&spec.weight_shape()), None, &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }
}

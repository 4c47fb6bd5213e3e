//! Convolution geometry and the im2col/GEMM kernels behind 2D/3D convolution
//! and 2D transposed convolution.
//!
//! All kernels work on up to three spatial axes. A 2D problem is a 3D problem
//! whose depth axis has extent 1, kernel 1, stride 1 and padding 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Convolution hyper-parameters. `kernel` has one entry per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing extent, transposed convolutions only.
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: 1,
            padding: 0,
            output_padding: 0,
        }
    }

    /// Square 2D kernel with `padding = kernel / 2` (extent preserving at stride 1).
    pub fn same2d(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, &[k, k]).with_padding(k / 2)
    }

    pub fn same3d(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, &[k, k, k]).with_padding(k / 2)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 || self.out_channels == 0 {
            problems.push("channel counts must be positive".to_string());
        }
        if !(1..=3).contains(&self.kernel.len()) {
            problems.push(format!("kernel rank {} not in 1..=3", self.kernel.len()));
        }
        for (axis, &k) in self.kernel.iter().enumerate() {
            if k == 0 || k % 2 == 0 {
                problems.push(format!(
                    "kernel extent {k} on spatial axis {axis} must be odd and positive"
                ));
            }
        }
        if self.stride == 0 {
            problems.push("stride must be positive".into());
        }
        if self.output_padding > 0 && self.output_padding >= self.stride {
            problems.push(format!(
                "output_padding {} must be smaller than stride {}",
                self.output_padding, self.stride
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `floor((in + 2p - k) / s) + 1`.
    pub fn conv_output_extent(&self, axis: usize, input: usize) -> Result<usize> {
        let k = self.kernel[axis];
        let padded = input + 2 * self.padding;
        if padded < k {
            return Err(Error::dim(
                "conv",
                format!("spatial axis {axis}: padded extent {padded} smaller than kernel {k}"),
            ));
        }
        Ok((padded - k) / self.stride + 1)
    }

    /// `(in - 1) * s - 2p + k + output_padding`, rejected when nonpositive.
    pub fn transposed_output_extent(&self, axis: usize, input: usize) -> Result<usize> {
        let k = self.kernel[axis] as isize;
        let out =
            (input as isize - 1) * self.stride as isize - 2 * self.padding as isize + k + self.output_padding as isize;
        if out <= 0 {
            return Err(Error::dim(
                "transposed_conv",
                format!("spatial axis {axis}: computed output extent {out} is not positive"),
            ));
        }
        Ok(out as usize)
    }

    /// `[out, in, k...]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// `[in, out, k...]`, the layout of a transposed convolution's weights.
    pub fn transposed_weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.in_channels, self.out_channels];
        s.extend_from_slice(&self.kernel);
        s
    }
}

/// Sliding-window geometry lifted to three spatial axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Geom {
    /// Geometry of a forward convolution over `input` (spatial extents only).
    pub fn conv(spec: &ConvSpec, channels: usize, input: &[usize]) -> Result<Self> {
        let r = spec.spatial_rank();
        if input.len() != r {
            return Err(Error::dim(
                "conv",
                format!("kernel has {r} spatial axes, input has {}", input.len()),
            ));
        }
        let mut g = Self::identity(channels);
        let off = 3 - r;
        for a in 0..r {
            g.input[off + a] = input[a];
            g.kernel[off + a] = spec.kernel[a];
            g.stride[off + a] = spec.stride;
            g.pad[off + a] = spec.padding;
            g.output[off + a] = spec.conv_output_extent(a, input[a])?;
        }
        Ok(g)
    }

    /// Geometry of the convolution whose adjoint is the transposed convolution
    /// mapping `small` to its output extent. `channels` are the output channels.
    pub fn transposed(spec: &ConvSpec, channels: usize, small: &[usize]) -> Result<Self> {
        let r = spec.spatial_rank();
        if small.len() != r {
            return Err(Error::dim(
                "transposed_conv",
                format!("kernel has {r} spatial axes, input has {}", small.len()),
            ));
        }
        let mut g = Self::identity(channels);
        let off = 3 - r;
        for a in 0..r {
            g.input[off + a] = spec.transposed_output_extent(a, small[a])?;
            g.kernel[off + a] = spec.kernel[a];
            g.stride[off + a] = spec.stride;
            g.pad[off + a] = spec.padding;
            g.output[off + a] = small[a];
        }
        Ok(g)
    }

    fn identity(channels: usize) -> Self {
        Self {
            channels,
            input: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
            output: [1; 3],
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Pointwise geometries use the image itself as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Output positions `o` in `[lo, hi)` whose tap `o * s + k - p` falls in `[0, n)`.
fn valid_range(out: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n + p > k { (n + p - k).div_ceil(s).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold `image` (`channels x input`) into `cols` (`col_rows x col_cols`).
pub(crate) fn im2col<T: Real>(g: &Geom, image: &[T], cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let img_c = &image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, iw, sw, e, pw);
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    dst.fill(T::zero());
                    for z in dlo..dhi {
                        let zi = z * sd + a - pd;
                        for y in hlo..hhi {
                            let yi = y * sh + b - ph;
                            let src = &img_c[(zi * ih + yi) * iw..];
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if sw == 1 {
                                let start = wlo + e - pw;
                                out[wlo..whi].copy_from_slice(&src[start..start + (whi - wlo)]);
                            } else {
                                for x in wlo..whi {
                                    out[x] = src[x * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `image`.
pub(crate) fn col2im<T: Real>(g: &Geom, cols: &[T], image: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let img_c = &mut image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, iw, sw, e, pw);
                    let src = &cols[row * plane..(row + 1) * plane];
                    for z in dlo..dhi {
                        let zi = z * sd + a - pd;
                        for y in hlo..hhi {
                            let yi = y * sh + b - ph;
                            let base = (zi * ih + yi) * iw;
                            let col = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for x in wlo..whi {
                                img_c[base + x * sw + e - pw] += col[x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution over a batch. `weight` is `out x col_rows`.
pub(crate) fn conv_forward<T: Real>(
    g: &Geom,
    batch: usize,
    out_channels: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (krows, p) = (g.col_rows(), g.col_cols());
    let in_len = g.input_len();
    let mut y = vec![T::zero(); batch * out_channels * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); krows * p]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let yn = &mut y[n * out_channels * p..(n + 1) * out_channels * p];
        T::gemm(out_channels, krows, p, weight, (krows, 1), src, (p, 1), T::zero(), yn);
        if let Some(b) = bias {
            for (o, row) in yn.chunks_mut(p).enumerate() {
                for v in row {
                    *v += b[o];
                }
            }
        }
    }
    y
}

/// Gradients of [`conv_forward`]: returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<T: Real>(
    g: &Geom,
    batch: usize,
    out_channels: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (krows, p) = (g.col_rows(), g.col_cols());
    let in_len = g.input_len();
    let mut dx = if need_dx {
        vec![T::zero(); batch * in_len]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); out_channels * krows];
    let mut db = vec![T::zero(); out_channels];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); krows * p]
    };
    let mut dcols = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); krows * p]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_channels * p..(n + 1) * out_channels * p];
        for (o, row) in dyn_.chunks(p).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        let src: &[T] = if pointwise {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        T::gemm(out_channels, p, krows, dyn_, (p, 1), src, (1, p), T::one(), &mut dw);
        if need_dx {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                T::gemm(krows, out_channels, p, weight, (1, krows), dyn_, (p, 1), T::zero(), dxn);
            } else {
                T::gemm(
                    krows,
                    out_channels,
                    p,
                    weight,
                    (1, krows),
                    dyn_,
                    (p, 1),
                    T::zero(),
                    &mut dcols,
                );
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `g` is the geometry of the adjoint convolution
/// (its `input` is this op's output). `weight` is `in_channels x col_rows`.
pub(crate) fn tconv_forward<T: Real>(
    g: &Geom,
    batch: usize,
    in_channels: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (krows, p) = (g.col_rows(), g.col_cols());
    let out_len = g.input_len();
    let out_plane = out_len / g.channels;
    let mut y = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); krows * p];
    for n in 0..batch {
        let xn = &x[n * in_channels * p..(n + 1) * in_channels * p];
        T::gemm(
            krows,
            in_channels,
            p,
            weight,
            (1, krows),
            xn,
            (p, 1),
            T::zero(),
            &mut cols,
        );
        let yn = &mut y[n * out_len..(n + 1) * out_len];
        col2im(g, &cols, yn);
        if let Some(b) = bias {
            for (o, plane) in yn.chunks_mut(out_plane).enumerate() {
                for v in plane {
                    *v += b[o];
                }
            }
        }
    }
    y
}

/// Gradients of [`tconv_forward`]: returns `(dx, dweight, dbias)`.
pub(crate) fn tconv_backward<T: Real>(
    g: &Geom,
    batch: usize,
    in_channels: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (krows, p) = (g.col_rows(), g.col_cols());
    let out_len = g.input_len();
    let out_plane = out_len / g.channels;
    let mut dx = if need_dx {
        vec![T::zero(); batch * in_channels * p]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); in_channels * krows];
    let mut db = vec![T::zero(); g.channels];
    let mut dcols = vec![T::zero(); krows * p];
    for n in 0..batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        for (o, plane) in dyn_.chunks(out_plane).enumerate() {
            db[o] += plane.iter().copied().sum::<T>();
        }
        im2col(g, dyn_, &mut dcols);
        let xn = &x[n * in_channels * p..(n + 1) * in_channels * p];
        T::gemm(in_channels, p, krows, xn, (p, 1), &dcols, (1, p), T::one(), &mut dw);
        if need_dx {
            let dxn = &mut dx[n * in_channels * p..(n + 1) * in_channels * p];
            T::gemm(
                in_channels,
                krows,
                p,
                weight,
                (krows, 1),
                &dcols,
                (p, 1),
                T::zero(),
                dxn,
            );
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation with explicit bounds checks.
    fn naive_conv2d(
        x: &[f64],
        c: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        o: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut y = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let yi = (i * s + a) as isize - p as isize;
                                let xj = (j * s + b) as isize - p as isize;
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                                    acc += x[(ic * h + yi as usize) * w + xj as usize]
                                        * wt[((oc * c + ic) * k + a) * k + b];
                                }
                            }
                        }
                    }
                    y[(oc * oh + i) * ow + j] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_naive_for_strides_and_padding() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (5, 2, 2), (1, 1, 0), (3, 1, 0), (5, 3, 1)] {
            let (c, h, w, o) = (2, 7, 6, 3);
            let x: Vec<f64> = (0..c * h * w).map(|_| next()).collect();
            let wt: Vec<f64> = (0..o * c * k * k).map(|_| next()).collect();
            let spec = ConvSpec::new(c, o, &[k, k]).with_stride(s).with_padding(p);
            let g = Geom::conv(&spec, c, &[h, w]).unwrap();
            let y = conv_forward(&g, 1, o, &x, &wt, None);
            let want = naive_conv2d(&x, c, h, w, &wt, o, k, s, p);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn valid_range_clips_padding() {
        // in = 4, k-offset 0, padding 1, stride 1: output 0 taps index -1.
        assert_eq!(valid_range(4, 4, 1, 0, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 2, 1), (0, 3));
        assert_eq!(valid_range(2, 4, 2, 0, 1), (1, 2));
    }

    #[test]
    fn spec_validation_lists_every_problem() {
        let bad = ConvSpec::new(0, 2, &[2, 3]).with_stride(0);
        match bad.validate() {
            Err(Error::Config(list)) => assert!(list.len() >= 3, "{list:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}

//! Dilated, strided, grouped 2-D cross-correlation.
//!
//! Dense groups go through im2col + GEMM; depthwise groups (one input and one
//! output channel per group) use a direct tap loop. Work is split across the
//! batch axis only and partial weight gradients are reduced in sample order,
//! so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Axis, Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

/// Padding that keeps the spatial size for odd kernels at stride 1:
/// `ceil(d * (k - 1) / 2)`.
pub fn pad_for_same(kernel: usize, dilation: usize) -> usize {
    (dilation * kernel.saturating_sub(1)).div_ceil(2)
}

impl ConvSpec {
    /// Square-kernel convolution with "same" padding and no bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation,
            padding: pad_for_same(kernel, dilation),
            groups: 1,
            has_bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    /// One kernel per channel.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            stride,
            dilation,
            padding: pad_for_same(kernel, dilation),
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.groups == 0 {
            problems.push("groups must be >= 1".to_string());
        } else {
            if self.in_channels % self.groups != 0 {
                problems.push(format!(
                    "in_channels {} not divisible by groups {}",
                    self.in_channels, self.groups
                ));
            }
            if self.out_channels % self.groups != 0 {
                problems.push(format!(
                    "out_channels {} not divisible by groups {}",
                    self.out_channels, self.groups
                ));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            problems.push("channel counts must be >= 1".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            problems.push("kernel extents must be >= 1".into());
        }
        if self.stride == 0 {
            problems.push("stride must be >= 1".into());
        }
        if self.dilation == 0 {
            problems.push("dilation must be >= 1".into());
        }
        match problems.len() {
            0 => Ok(()),
            _ => Err(Error::ConfigViolations(problems)),
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    fn out_extent(&self, size: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = size + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// `(h_out, w_out)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (self.out_extent(h, self.kernel.0), self.out_extent(w, self.kernel.1)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::Config(format!(
                "convolution output would be empty: input {h}x{w}, kernel {:?}, dilation {}, padding {}",
                self.kernel, self.dilation, self.padding
            ))),
        }
    }

    /// Multiply-accumulates per sample for an `(h, w)` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.output_hw(h, w)?;
        let per_out = (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        Ok((ho * wo * self.out_channels * per_out) as u64)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout_g: usize,
}

fn geometry<T: Element>(x: Shape4, weight: &Tensor4<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    check_dim("conv2d", Axis::Channels, spec.in_channels, x.c)?;
    let ws = weight.shape();
    let expected = spec.weight_shape();
    check_dim("conv2d.weight", Axis::Batch, expected.n, ws.n)?;
    check_dim("conv2d.weight", Axis::Channels, expected.c, ws.c)?;
    check_dim("conv2d.weight", Axis::Height, expected.h, ws.h)?;
    check_dim("conv2d.weight", Axis::Width, expected.w, ws.w)?;
    let (ho, wo) = spec.output_hw(x.h, x.w)?;
    Ok(Geometry {
        h: x.h,
        w: x.w,
        cout: spec.out_channels,
        ho,
        wo,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
    })
}

/// Valid output columns `[lo, hi)` for one tap offset along an axis.
#[inline]
fn tap_range(out: usize, size: usize, offset: isize, stride: usize) -> (usize, usize) {
    // input = o*stride + offset must lie in [0, size)
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (size as isize) <= offset {
        0
    } else {
        ((size as isize - offset + s - 1) / s).min(out as isize)
    };
    let lo = lo.clamp(0, out as isize);
    (lo as usize, hi.max(lo) as usize)
}

fn is_identity_window(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

/// Fills `cols` (`cin_g*kh*kw` rows by `ho*wo` columns) from `input`
/// (`cin_g` planes of `h*w`).
fn im2col<T: Element>(input: &[T], g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let plane_out = g.ho * g.wo;
    let p = spec.padding as isize;
    for ci in 0..g.cin_g {
        let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oy_off = (ky * spec.dilation) as isize - p;
            let (ylo, yhi) = tap_range(g.ho, g.h, oy_off, spec.stride);
            for kx in 0..g.kw {
                let ox_off = (kx * spec.dilation) as isize - p;
                let (xlo, xhi) = tap_range(g.wo, g.w, ox_off, spec.stride);
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane_out;
                let dst = &mut cols[row..row + plane_out];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = (oy * spec.stride) as isize + oy_off;
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if spec.stride == 1 && xlo < xhi {
                        let ix0 = (xlo as isize + ox_off) as usize;
                        dst_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            let ix = (ox * spec.stride) as isize + ox_off;
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `input_grad` (inverse of [`im2col`]).
fn col2im<T: Element>(cols: &[T], g: &Geometry, spec: &ConvSpec, input_grad: &mut [T]) {
    let plane_out = g.ho * g.wo;
    let p = spec.padding as isize;
    for ci in 0..g.cin_g {
        let dst = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oy_off = (ky * spec.dilation) as isize - p;
            let (ylo, yhi) = tap_range(g.ho, g.h, oy_off, spec.stride);
            for kx in 0..g.kw {
                let ox_off = (kx * spec.dilation) as isize - p;
                let (xlo, xhi) = tap_range(g.wo, g.w, ox_off, spec.stride);
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane_out;
                let src = &cols[row..row + plane_out];
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride) as isize + oy_off) as usize;
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride) as isize + ox_off) as usize;
                        dst_row[ix] = dst_row[ix] + src_row[ox];
                    }
                }
            }
        }
    }
}

/// Single-channel dilated correlation accumulated into `out` (`ho*wo`).
fn depthwise_plane<T: Element>(src: &[T], kernel: &[T], g: &Geometry, spec: &ConvSpec, out: &mut [T]) {
    let p = spec.padding as isize;
    for ky in 0..g.kh {
        let oy_off = (ky * spec.dilation) as isize - p;
        let (ylo, yhi) = tap_range(g.ho, g.h, oy_off, spec.stride);
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx];
            let ox_off = (kx * spec.dilation) as isize - p;
            let (xlo, xhi) = tap_range(g.wo, g.w, ox_off, spec.stride);
            if xlo == xhi {
                continue;
            }
            for oy in ylo..yhi {
                let iy = ((oy * spec.stride) as isize + oy_off) as usize;
                let src_row = &src[iy * g.w..(iy + 1) * g.w];
                let out_row = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if spec.stride == 1 {
                    let ix0 = (xlo as isize + ox_off) as usize;
                    for (o, &s) in out_row[xlo..xhi].iter_mut().zip(&src_row[ix0..]) {
                        *o = *o + wv * s;
                    }
                } else {
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride) as isize + ox_off) as usize;
                        out_row[ox] = out_row[ox] + wv * src_row[ix];
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_plane`] w.r.t. its input plane and kernel.
fn depthwise_plane_backward<T: Element>(
    src: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    grad_src: &mut [T],
    grad_kernel: &mut [T],
) {
    let p = spec.padding as isize;
    for ky in 0..g.kh {
        let oy_off = (ky * spec.dilation) as isize - p;
        let (ylo, yhi) = tap_range(g.ho, g.h, oy_off, spec.stride);
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx];
            let ox_off = (kx * spec.dilation) as isize - p;
            let (xlo, xhi) = tap_range(g.wo, g.w, ox_off, spec.stride);
            let mut acc = T::zero();
            for oy in ylo..yhi {
                let iy = ((oy * spec.stride) as isize + oy_off) as usize;
                let go_row = &grad_out[oy * g.wo..(oy + 1) * g.wo];
                for ox in xlo..xhi {
                    let ix = ((ox * spec.stride) as isize + ox_off) as usize;
                    let gi = iy * g.w + ix;
                    acc = acc + go_row[ox] * src[gi];
                    grad_src[gi] = grad_src[gi] + wv * go_row[ox];
                }
            }
            grad_kernel[ky * g.kw + kx] = grad_kernel[ky * g.kw + kx] + acc;
        }
    }
}

/// Forward convolution. `bias`, when the spec carries one, is a vector of
/// `out_channels` values.
pub fn conv2d<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let g = geometry(x.shape(), weight, spec)?;
    if spec.has_bias != bias.is_some() {
        return Err(Error::Config(format!(
            "conv2d: spec.has_bias = {} but bias {} supplied",
            spec.has_bias,
            if bias.is_some() { "was" } else { "was not" }
        )));
    }
    if let Some(b) = bias {
        check_dim("conv2d.bias", Axis::Length, spec.out_channels, b.len())?;
    }
    let xs = x.shape();
    let out_shape = Shape4::new(xs.n, g.cout, g.ho, g.wo);
    let mut out = Tensor4::zeros(out_shape);
    let plane_out = g.ho * g.wo;
    let sample_out = g.cout * plane_out;
    let kk = g.kh * g.kw;
    let wdata = weight.data();
    let depthwise = g.cin_g == 1 && g.cout_g == 1;

    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = x.sample(n);
            let mut cols = if depthwise || is_identity_window(spec) {
                Vec::new()
            } else {
                vec![T::zero(); g.cin_g * kk * plane_out]
            };
            for grp in 0..spec.groups {
                let in_g = &x_n[grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w];
                let out_g = &mut out_n[grp * g.cout_g * plane_out..(grp + 1) * g.cout_g * plane_out];
                let w_g = &wdata[grp * g.cout_g * g.cin_g * kk..(grp + 1) * g.cout_g * g.cin_g * kk];
                if depthwise {
                    depthwise_plane(in_g, w_g, &g, spec, out_g);
                    continue;
                }
                let b_mat: &[T] = if is_identity_window(spec) {
                    in_g
                } else {
                    im2col(in_g, &g, spec, &mut cols);
                    &cols
                };
                let k = g.cin_g * kk;
                T::gemm(
                    g.cout_g,
                    k,
                    plane_out,
                    T::one(),
                    w_g,
                    (k as isize, 1),
                    b_mat,
                    (plane_out as isize, 1),
                    T::zero(),
                    out_g,
                    (plane_out as isize, 1),
                );
            }
            if let Some(b) = bias {
                for (co, plane) in out_n.chunks_mut(plane_out).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`].
pub struct ConvGrads<T: Element> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x.shape(), weight, spec)?;
    let xs = x.shape();
    let go = grad_out.shape();
    check_dim("conv2d_backward", Axis::Batch, xs.n, go.n)?;
    check_dim("conv2d_backward", Axis::Channels, g.cout, go.c)?;
    check_dim("conv2d_backward", Axis::Height, g.ho, go.h)?;
    check_dim("conv2d_backward", Axis::Width, g.wo, go.w)?;

    let plane_out = g.ho * g.wo;
    let kk = g.kh * g.kw;
    let k = g.cin_g * kk;
    let wdata = weight.data();
    let wlen = weight.len();
    let depthwise = g.cin_g == 1 && g.cout_g == 1;

    let mut grad_input = Tensor4::zeros(if need_input_grad {
        xs
    } else {
        Shape4::new(xs.n, 1, 1, 1)
    });
    let gx_stride = grad_input.len() / xs.n;
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(gx_stride)
        .enumerate()
        .map(|(n, gx_n)| {
            let x_n = x.sample(n);
            let go_n = grad_out.sample(n);
            let mut gw = vec![T::zero(); wlen];
            let identity = is_identity_window(spec);
            let mut cols = if depthwise || identity {
                Vec::new()
            } else {
                vec![T::zero(); k * plane_out]
            };
            let mut dcols = if depthwise || identity || !need_input_grad {
                Vec::new()
            } else {
                vec![T::zero(); k * plane_out]
            };
            for grp in 0..spec.groups {
                let in_range = grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w;
                let in_g = &x_n[in_range.clone()];
                let mut scratch = Vec::new();
                let gx_g: &mut [T] = if need_input_grad {
                    &mut gx_n[in_range]
                } else {
                    scratch.resize(in_g.len(), T::zero());
                    &mut scratch
                };
                let go_g = &go_n[grp * g.cout_g * plane_out..(grp + 1) * g.cout_g * plane_out];
                let w_range = grp * g.cout_g * k..(grp + 1) * g.cout_g * k;
                let w_g = &wdata[w_range.clone()];
                let gw_g = &mut gw[w_range];
                if depthwise {
                    depthwise_plane_backward(in_g, w_g, go_g, &g, spec, gx_g, gw_g);
                    continue;
                }
                let b_mat: &[T] = if identity {
                    in_g
                } else {
                    im2col(in_g, &g, spec, &mut cols);
                    &cols
                };
                // dW_g = dY_g (cout_g x P) * cols^T (P x k)
                T::gemm(
                    g.cout_g,
                    plane_out,
                    k,
                    T::one(),
                    go_g,
                    (plane_out as isize, 1),
                    b_mat,
                    (1, plane_out as isize),
                    T::one(),
                    gw_g,
                    (k as isize, 1),
                );
                // dcols = W_g^T (k x cout_g) * dY_g (cout_g x P)
                if !need_input_grad {
                    continue;
                }
                if identity {
                    T::gemm(
                        k,
                        g.cout_g,
                        plane_out,
                        T::one(),
                        w_g,
                        (1, k as isize),
                        go_g,
                        (plane_out as isize, 1),
                        T::one(),
                        gx_g,
                        (plane_out as isize, 1),
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout_g,
                        plane_out,
                        T::one(),
                        w_g,
                        (1, k as isize),
                        go_g,
                        (plane_out as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (plane_out as isize, 1),
                    );
                    col2im(&dcols, &g, spec, gx_g);
                }
            }
            gw
        })
        .collect();

    let mut grad_weight = Tensor4::zeros(weight.shape());
    for part in &partial_w {
        for (a, &b) in grad_weight.data_mut().iter_mut().zip(part) {
            *a = *a + b;
        }
    }

    let grad_bias = spec.has_bias.then(|| {
        let mut gb = Tensor4::zeros(Shape4::new(g.cout, 1, 1, 1));
        for n in 0..go.n {
            for co in 0..g.cout {
                let s: T = grad_out.plane(n, co).iter().copied().sum();
                gb.data_mut()[co] = gb.data()[co] + s;
            }
        }
        gb
    });

    Ok(ConvGrads {
        input: need_input_grad.then_some(grad_input),
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_for_same_examples() {
        assert_eq!(pad_for_same(3, 4), 4);
        assert_eq!(pad_for_same(3, 24), 24);
        assert_eq!(pad_for_same(1, 1), 0);
        assert_eq!(pad_for_same(5, 1), 2);
        assert_eq!(pad_for_same(2, 3), 2);
    }

    #[test]
    fn same_padding_preserves_size_for_reference_dilations() {
        for d in [1, 4, 8, 12, 24] {
            for k in [1, 3, 5] {
                let spec = ConvSpec::same(2, 2, k, d);
                assert_eq!(spec.output_hw(32, 17).unwrap(), (32, 17), "k={k} d={d}");
            }
        }
    }

    #[test]
    fn empty_output_is_config_error() {
        let spec = ConvSpec::same(1, 1, 3, 4).with_padding(0);
        assert!(matches!(spec.output_hw(5, 5), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 3, 4, 4));
        let w = Tensor4::<f32>::zeros(Shape4::new(2, 2, 3, 3));
        let err = conv2d(&x, &w, None, &ConvSpec::same(2, 2, 3, 1)).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: Axis::Channels, expected: 2, actual: 3, .. }));
    }

    #[test]
    fn invalid_groups_rejected() {
        let spec = ConvSpec {
            groups: 2,
            ..ConvSpec::same(3, 4, 3, 1)
        };
        assert!(matches!(spec.validate(), Err(Error::ConfigViolations(v)) if v.len() == 1));
    }

    #[test]
    fn worked_examples_on_3x3_grid() {
        let x = Tensor4::<f64>::from_vec(
            Shape4::new(1, 1, 3, 3),
            (1..=9).map(f64::from).collect(),
        )
        .unwrap();
        let w = Tensor4::<f64>::full(Shape4::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::same(1, 1, 3, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        let y = conv2d(&x, &w, None, &ConvSpec::same(1, 1, 3, 2)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 5.0);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor4::<f32>::zeros(Shape4::new(2, 1, 2, 2));
        let w = Tensor4::<f32>::zeros(Shape4::new(3, 1, 1, 1));
        let b = Tensor4::<f32>::from_vec(Shape4::new(3, 1, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), &ConvSpec::pointwise(1, 3).with_bias(true)).unwrap();
        assert_eq!(y.at(1, 2, 1, 1), 3.0);
        assert!(conv2d(&x, &w, None, &ConvSpec::pointwise(1, 3).with_bias(true)).is_err());
    }
}

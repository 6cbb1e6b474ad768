use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Per-output-index source taps along one axis: `(lo, hi, frac)` where the
/// value is `(1 - frac) * src[lo] + frac * src[hi]`.
fn axis_taps(input: usize, output: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output > 1 {
                    o as f64 * (input - 1) as f64 / (output - 1) as f64
                } else {
                    0.0
                }
            } else {
                let scale = input as f64 / output as f64;
                ((o as f64 + 0.5) * scale - 0.5).max(0.0)
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Config(format!(
            "bilinear target must be at least 1x1, got {}x{}",
            target.0, target.1
        )));
    }
    Ok(())
}

pub fn bilinear_resize<T: Element>(
    x: &Tensor4<T>,
    target: (usize, usize),
    align_corners: bool,
) -> Result<Tensor4<T>> {
    check_target(target)?;
    let s = x.shape();
    let (th, tw) = target;
    let ys = axis_taps(s.h, th, align_corners);
    let xs = axis_taps(s.w, tw, align_corners);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, th, tw));
    let od = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * th * tw;
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::lit(fy);
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                let row = &mut od[base + oy * tw..base + (oy + 1) * tw];
                for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                    let fx = T::lit(fx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    *o = top + (bot - top) * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<T: Element>(
    input_shape: Shape4,
    grad_out: &Tensor4<T>,
    align_corners: bool,
) -> Result<Tensor4<T>> {
    let go = grad_out.shape();
    check_target((go.h, go.w))?;
    let ys = axis_taps(input_shape.h, go.h, align_corners);
    let xs = axis_taps(input_shape.w, go.w, align_corners);
    let mut gx = Tensor4::zeros(input_shape);
    let w = input_shape.w;
    let plane = input_shape.plane();
    for n in 0..go.n {
        for c in 0..go.c {
            let g = grad_out.plane(n, c);
            let base = (n * input_shape.c + c) * plane;
            let dst = &mut gx.data_mut()[base..base + plane];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::lit(fx);
                    let v = g[oy * go.w + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                    dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                    dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                }
            }
        }
    }
    Ok(gx)
}

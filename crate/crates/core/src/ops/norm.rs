use crate::error::{check_dim, Axis, Result};
use crate::tensor::{Element, Shape4, Tensor4};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight given to the new batch statistic in the running average.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Quantities saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T: Element> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for updating running statistics.
    pub batch_var_unbiased: Vec<T>,
    pub mode: Mode,
}

fn channel_vec<T: Element>(op: &'static str, v: &Tensor4<T>, c: usize) -> Result<()> {
    check_dim(op, Axis::Length, c, v.len())
}

/// Batch normalisation. In train mode statistics come from the batch (biased
/// variance); in eval mode from `running_mean`/`running_var`.
pub fn batch_norm<T: Element>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    running_mean: &Tensor4<T>,
    running_var: &Tensor4<T>,
    mode: Mode,
    eps: T,
) -> Result<(Tensor4<T>, BnSaved<T>)> {
    let s = x.shape();
    for v in [gamma, beta, running_mean, running_var] {
        channel_vec("batch_norm", v, s.c)?;
    }
    let plane = s.plane();
    let count = s.n * plane;
    let count_t = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    let mut unbiased = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (m, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for n in 0..s.n {
                    sum = sum + x.plane(n, c).iter().copied().sum::<T>();
                }
                let m = sum / count_t;
                let mut sq = T::zero();
                for n in 0..s.n {
                    sq = sq + x.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                unbiased[c] = if count > 1 {
                    sq / T::from_usize(count - 1).unwrap()
                } else {
                    sq
                };
                (m, sq / count_t)
            }
            Mode::Eval => (running_mean.data()[c], running_var.data()[c]),
        };
        mean[c] = m;
        inv_std[c] = T::one() / (var + eps).sqrt();
    }
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - mean[c] * scale;
            let base = (n * s.c + c) * plane;
            for (o, &v) in od[base..base + plane].iter_mut().zip(x.plane(n, c)) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((
        out,
        BnSaved {
            mean,
            inv_std,
            batch_var_unbiased: unbiased,
            mode,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Element>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    x.expect_same_shape("batch_norm_backward", grad_out)?;
    let s = x.shape();
    let plane = s.plane();
    let count_t = T::from_usize(s.n * plane).unwrap();
    let vshape = Shape4::new(s.c, 1, 1, 1);
    let mut g_gamma = Tensor4::zeros(vshape);
    let mut g_beta = Tensor4::zeros(vshape);
    let mut gx = Tensor4::zeros(s);
    for c in 0..s.c {
        let m = saved.mean[c];
        let inv = saved.inv_std[c];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            for (&dy, &v) in grad_out.plane(n, c).iter().zip(x.plane(n, c)) {
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * (v - m) * inv;
            }
        }
        g_gamma.data_mut()[c] = sum_dy_xhat;
        g_beta.data_mut()[c] = sum_dy;
        let gm = gamma.data()[c];
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            let dst = &mut gx.data_mut()[base..base + plane];
            match saved.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / count_t;
                    let mean_dy_xhat = sum_dy_xhat / count_t;
                    for ((o, &dy), &v) in dst.iter_mut().zip(grad_out.plane(n, c)).zip(x.plane(n, c)) {
                        let xhat = (v - m) * inv;
                        *o = gm * inv * (dy - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                Mode::Eval => {
                    for (o, &dy) in dst.iter_mut().zip(grad_out.plane(n, c)) {
                        *o = gm * inv * dy;
                    }
                }
            }
        }
    }
    Ok((gx, g_gamma, g_beta))
}

/// Blends batch statistics into running statistics in place.
pub fn update_running_stats<T: Element>(
    running_mean: &mut Tensor4<T>,
    running_var: &mut Tensor4<T>,
    saved: &BnSaved<T>,
    momentum: T,
) {
    let keep = T::one() - momentum;
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&saved.mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&saved.batch_var_unbiased) {
        *r = keep * *r + momentum * v;
    }
}

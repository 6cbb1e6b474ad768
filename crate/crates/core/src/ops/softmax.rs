use crate::error::{check_dim, Axis, Error, Result};
use crate::tensor::{Element, Tensor4};

/// Per-pixel integer class map, `n x h x w` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        check_dim("label_map", Axis::Length, n * h * w, data.len())?;
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn sample(&self, n: usize) -> &[u8] {
        let p = self.h * self.w;
        &self.data[n * p..(n + 1) * p]
    }
}

pub fn softmax_channels<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    let od = out.data_mut();
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x.data()[idx(c)]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x.data()[idx(c)] - m).exp();
                od[idx(c)] = e;
                z = z + e;
            }
            for c in 0..s.c {
                od[idx(c)] = od[idx(c)] / z;
            }
        }
    }
    out
}

/// Gradient of softmax given its output `y`: `y * (g - sum(g * y))`.
pub fn softmax_channels_backward<T: Element>(y: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let dot: T = (0..s.c).map(|c| grad_out.data()[idx(c)] * y.data()[idx(c)]).sum();
            for c in 0..s.c {
                gx.data_mut()[idx(c)] = y.data()[idx(c)] * (grad_out.data()[idx(c)] - dot);
            }
        }
    }
    gx
}

/// Index of the largest channel per pixel; ties go to the lowest index.
pub fn argmax_channels<T: Element>(x: &Tensor4<T>) -> LabelMap {
    let s = x.shape();
    assert!(s.c <= 256, "argmax_channels supports at most 256 channels");
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = x.data()[(n * s.c) * plane + p];
            for c in 1..s.c {
                let v = x.data()[(n * s.c + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap {
        n: s.n,
        h: s.h,
        w: s.w,
        data,
    }
}

/// Masked mean cross-entropy.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T: Element> {
    pub loss: T,
    /// d loss / d logits.
    pub grad: Tensor4<T>,
    pub valid_pixels: usize,
}

impl<T: Element> CrossEntropy<T> {
    /// True when every pixel was masked out and the loss is defined as 0.
    pub fn is_empty(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Mean over valid pixels of `-log softmax(logits)[label]`. `valid` is an
/// optional `n*h*w` mask; masked pixels contribute neither loss nor gradient.
pub fn cross_entropy<T: Element>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    valid: Option<&[bool]>,
) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    check_dim("cross_entropy", Axis::Batch, s.n, labels.n)?;
    check_dim("cross_entropy", Axis::Height, s.h, labels.h)?;
    check_dim("cross_entropy", Axis::Width, s.w, labels.w)?;
    if let Some(v) = valid {
        check_dim("cross_entropy.valid", Axis::Length, labels.data.len(), v.len())?;
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= s.c) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            s.c
        )));
    }
    let plane = s.plane();
    let count = match valid {
        Some(v) => v.iter().filter(|&&b| b).count(),
        None => labels.data.len(),
    };
    let mut grad = Tensor4::zeros(s);
    if count == 0 {
        log::warn!("cross_entropy: every pixel is masked out; loss defined as 0");
        return Ok(CrossEntropy {
            loss: T::zero(),
            grad,
            valid_pixels: 0,
        });
    }
    let inv_count = T::one() / T::from_usize(count).unwrap();
    let mut total = T::zero();
    let gd = grad.data_mut();
    for n in 0..s.n {
        for p in 0..plane {
            let li = n * plane + p;
            if valid.is_some_and(|v| !v[li]) {
                continue;
            }
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(logits.data()[idx(c)]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                z = z + (logits.data()[idx(c)] - m).exp();
            }
            let label = labels.data[li] as usize;
            let log_z = z.ln() + m;
            total = total + (log_z - logits.data()[idx(label)]);
            for c in 0..s.c {
                let p_c = (logits.data()[idx(c)] - log_z).exp();
                let target = if c == label { T::one() } else { T::zero() };
                gd[idx(c)] = (p_c - target) * inv_count;
            }
        }
    }
    Ok(CrossEntropy {
        loss: total * inv_count,
        grad,
        valid_pixels: count,
    })
}

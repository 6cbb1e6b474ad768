use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Axis, Error, Result};
use crate::ops::norm::Mode;
use crate::tensor::{Element, Shape4, Tensor4};

pub fn global_avg_pool<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let denom = T::from_usize(s.plane()).unwrap();
    Tensor4::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<T>() / denom
    })
}

pub fn global_avg_pool_backward<T: Element>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let denom = T::from_usize(input_shape.plane()).unwrap();
    Tensor4::from_fn(input_shape, |n, c, _, _| grad_out.at(n, c, 0, 0) / denom)
}

pub fn concat_channels<T: Element>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat_channels needs at least one input".into()))?
        .shape();
    let mut channels = 0;
    for t in xs {
        let s = t.shape();
        check_dim("concat_channels", Axis::Batch, first.n, s.n)?;
        check_dim("concat_channels", Axis::Height, first.h, s.h)?;
        check_dim("concat_channels", Axis::Width, first.w, s.w)?;
        channels += s.c;
    }
    let shape = Shape4::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for t in xs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Element>(x: &Tensor4<T>, channels: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let s = x.shape();
    check_dim("split_channels", Axis::Channels, s.c, channels.iter().sum())?;
    let plane = s.plane();
    let mut out: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * plane))
        .collect();
    for n in 0..s.n {
        let sample = x.sample(n);
        let mut off = 0;
        for (buf, &c) in out.iter_mut().zip(channels) {
            buf.extend_from_slice(&sample[off * plane..(off + c) * plane]);
            off += c;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor4::from_vec(Shape4::new(s.n, c, s.h, s.w), d))
        .collect()
}

pub fn add<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    a.zip_map(b, |x, y| x + y)
}

fn check_gate<T: Element>(x: &Tensor4<T>, gate: &Tensor4<T>) -> Result<()> {
    let s = x.shape();
    let g = gate.shape();
    check_dim("scale_channels", Axis::Batch, s.n, g.n)?;
    check_dim("scale_channels", Axis::Channels, s.c, g.c)?;
    check_dim("scale_channels", Axis::Height, 1, g.h)?;
    check_dim("scale_channels", Axis::Width, 1, g.w)
}

/// `x * gate` with `gate` shaped `(n, c, 1, 1)`.
pub fn scale_channels<T: Element>(x: &Tensor4<T>, gate: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_gate(x, gate)?;
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let g = gate.data()[i];
        chunk.iter_mut().for_each(|v| *v = *v * g);
    }
    Ok(out)
}

/// Returns `(grad_x, grad_gate)`.
pub fn scale_channels_backward<T: Element>(
    x: &Tensor4<T>,
    gate: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_gate(x, gate)?;
    let plane = x.shape().plane();
    let gx = scale_channels(grad_out, gate)?;
    let mut gg = Tensor4::zeros(gate.shape());
    for (i, (gchunk, xchunk)) in grad_out.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
        gg.data_mut()[i] = gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum();
    }
    Ok((gx, gg))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1-rate)`), or `None` when the op is the identity.
pub fn dropout<T: Element>(
    x: &Tensor4<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mut out = x.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o = *o * m;
    }
    Ok((out, Some(mask)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_examples() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let c = Tensor4::full(Shape4::new(2, 3, 5, 4), 0.75f64);
        assert!(global_avg_pool(&c).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn concat_orders_by_input_and_splits_back() {
        let a = Tensor4::from_fn(Shape4::new(2, 1, 2, 2), |n, _, _, _| n as f32);
        let b = Tensor4::from_fn(Shape4::new(2, 2, 2, 2), |n, c, _, _| 10.0 + (n * 2 + c) as f32);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 3, 2, 2));
        assert_eq!(y.at(1, 0, 0, 0), 1.0);
        assert_eq!(y.at(1, 2, 1, 1), 13.0);
        let parts = split_channels(&y, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_spatial_mismatch_is_error() {
        let a = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 2));
        let b = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 3));
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::Dimension { axis: Axis::Width, .. })
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |_, c, y, x| (c + y * x) as f32);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, 1).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_determinism() {
        let x = Tensor4::full(Shape4::new(1, 1, 1000, 1000), 1.0f32);
        let (y, _) = dropout(&x, 0.5, Mode::Train, 42).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let (y2, _) = dropout(&x, 0.5, Mode::Train, 42).unwrap();
        assert_eq!(y, y2);
    }
}

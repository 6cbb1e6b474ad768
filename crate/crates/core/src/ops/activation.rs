use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    HSwish,
    HSigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::HSigmoid => (x + three).max(T::zero()).min(six) / six,
            Activation::HSwish => x * (x + three).max(T::zero()).min(six) / six,
        }
    }

    /// Derivative at `x`; the kinks take the one-sided value from the right.
    #[inline]
    pub fn derivative<T: Element>(self, x: T) -> T {
        let three = T::lit(3.0);
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::HSigmoid => {
                if x > -three && x < three {
                    T::one() / T::lit(6.0)
                } else {
                    T::zero()
                }
            }
            Activation::HSwish => {
                if x >= three {
                    T::one()
                } else if x <= -three {
                    T::zero()
                } else {
                    (x + x + three) / T::lit(6.0)
                }
            }
        }
    }

    /// Input values where the derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            Activation::HSigmoid | Activation::HSwish => &[-3.0, 3.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::HSwish => "h_swish",
            Activation::HSigmoid => "h_sigmoid",
        }
    }
}

pub fn activation<T: Element>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Element>(x: &Tensor4<T>, grad_out: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    let mut g = grad_out.clone();
    for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
        *d = *d * kind.derivative(v);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(Activation::HSwish.apply(0.0f64), 0.0);
        assert_eq!(Activation::HSwish.apply(3.0f64), 3.0);
        assert_eq!(Activation::HSwish.apply(-3.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-5.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(5.0f64), 5.0);
        assert_eq!(Activation::HSigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::HSigmoid.apply(10.0f64), 1.0);
        assert_eq!(Activation::HSigmoid.apply(-10.0f64), 0.0);
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::{elu, relu, Scalar, Tensor4};

/// Pointwise non-linearity. `Identity` is the "no activation" choice used
/// between the depthwise and pointwise halves of a separable convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Self::Identity => x.clone(),
            Self::Relu => x.relu(),
            Self::Elu => x.elu(),
        }
    }

    /// Gradient w.r.t. the pre-activation input `x`.
    pub fn backward<T: Scalar>(self, x: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Self::Identity => grad.clone(),
            Self::Relu => x
                .zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
                .expect("activation gradient shape"),
            Self::Elu => x
                .zip_map(grad, |v, g| {
                    if v >= T::zero() {
                        g
                    } else {
                        g * (elu(v) + T::one())
                    }
                })
                .expect("activation gradient shape"),
        }
    }

    pub fn scalar<T: Scalar>(self, v: T) -> T {
        match self {
            Self::Identity => v,
            Self::Relu => relu(v),
            Self::Elu => elu(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "none",
            Self::Relu => "relu",
            Self::Elu => "elu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "elu" => Ok(Self::Elu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

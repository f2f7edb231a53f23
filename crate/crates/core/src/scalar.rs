use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating-point element type of tensors and model parameters: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Ordered field-like number used by box arithmetic and assignment costs.
///
/// Satisfied by the floats as well as exact types such as `Ratio<i64>` or
/// `i64`, so geometry and matching can be checked without rounding.
pub trait Coord: Num + PartialOrd + Copy + Debug {
    #[inline]
    fn two() -> Self {
        Self::one() + Self::one()
    }

    #[inline]
    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    #[inline]
    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    #[inline]
    fn abs_diff(self, other: Self) -> Self {
        if self >= other {
            self - other
        } else {
            other - self
        }
    }

    #[inline]
    fn clamp_unit(self) -> Self {
        self.max_of(Self::zero()).min_of(Self::one())
    }

    /// False for NaN and the infinities; always true for exact types.
    #[inline]
    #[allow(clippy::eq_op)]
    fn is_finite_value(self) -> bool {
        let d = self - self;
        d == Self::zero()
    }
}

impl<T: Num + PartialOrd + Copy + Debug> Coord for T {}

//! Scalar abstraction.
//!
//! Everything numeric in this crate is written against [`Scalar`]. Storage
//! (scheduler constants, solver coefficients, datasets) uses a [`Real`]
//! (`f32` or `f64`); evaluation can additionally run on [`Dual<R>`], a
//! first-order forward-mode dual number, which is how field derivatives
//! with respect to time and state are obtained for gradient computation.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::error::Result;
use crate::field::VelocityField;

/// A number the solvers can compute with.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Sum + Send + Sync + 'static
{
    /// The underlying storage type.
    type Real: Real;

    /// Value part, dropping any tangent.
    fn primal(self) -> Self::Real;

    /// Embed a constant.
    fn from_real(v: Self::Real) -> Self;

    /// Result of a scalar function `f` applied to `self`, given
    /// `f(self.primal()) = value` and `f'(self.primal()) = slope`.
    ///
    /// Used where `f` is computed by an iterative method (bisection) whose
    /// derivative is known in closed form.
    fn chain(self, value: Self::Real, slope: Self::Real) -> Self;

    /// Evaluate `field` at this scalar type. Plain reals count toward the
    /// field's NFE; dual evaluations do not.
    fn eval_field(
        field: &dyn VelocityField<Self::Real>,
        t: Self,
        x: &[Self],
        out: &mut [Self],
    ) -> Result<()>;

    /// Convert an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_real(<Self::Real as NumCast>::from(v).expect("f64 literal fits the real type"))
    }
}

/// Storage scalar: `f32` or `f64`.
pub trait Real: Scalar<Real = Self> + ToPrimitive + NumCast {}

macro_rules! impl_real {
    ($t:ty) => {
        impl Scalar for $t {
            type Real = $t;

            #[inline]
            fn primal(self) -> $t {
                self
            }

            #[inline]
            fn from_real(v: $t) -> $t {
                v
            }

            #[inline]
            fn chain(self, value: $t, _slope: $t) -> $t {
                value
            }

            #[inline]
            fn eval_field(
                field: &dyn VelocityField<$t>,
                t: $t,
                x: &[$t],
                out: &mut [$t],
            ) -> Result<()> {
                field.eval(t, x, out)
            }
        }

        impl Real for $t {}
    };
}

impl_real!(f32);
impl_real!(f64);

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<R> {
    pub re: R,
    pub eps: R,
}

impl<R: Real> Dual<R> {
    #[inline]
    pub fn new(re: R, eps: R) -> Self {
        Self { re, eps }
    }

    #[inline]
    pub fn constant(re: R) -> Self {
        Self { re, eps: R::zero() }
    }

    /// Independent variable: tangent 1.
    #[inline]
    pub fn variable(re: R) -> Self {
        Self { re, eps: R::one() }
    }

    #[inline]
    fn lift(self, f: R, df: R) -> Self {
        Self { re: f, eps: df * self.eps }
    }
}

impl<R: Real> Scalar for Dual<R> {
    type Real = R;

    #[inline]
    fn primal(self) -> R {
        self.re
    }

    #[inline]
    fn from_real(v: R) -> Self {
        Self::constant(v)
    }

    #[inline]
    fn chain(self, value: R, slope: R) -> Self {
        self.lift(value, slope)
    }

    fn eval_field(
        field: &dyn VelocityField<R>,
        t: Self,
        x: &[Self],
        out: &mut [Self],
    ) -> Result<()> {
        field.eval_dual(t, x, out)
    }
}

impl<R: Real> fmt::Display for Dual<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<R: Real> PartialOrd for Dual<R> {
    #[inline]
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<R: Real> Neg for Dual<R> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<R: Real> Add for Dual<R> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<R: Real> Sub for Dual<R> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<R: Real> Mul for Dual<R> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<R: Real> Div for Dual<R> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<R: Real> Rem for Dual<R> {
    type Output = Self;
    #[inline]
    fn rem(self, o: Self) -> Self {
        // a % b = a - b·trunc(a/b); trunc is locally constant.
        let k = (self.re / o.re).trunc();
        Self::new(self.re % o.re, self.eps - k * o.eps)
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<R: Real> $tr for Dual<R> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);

impl<R: Real> Sum for Dual<R> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<R: Real> Zero for Dual<R> {
    #[inline]
    fn zero() -> Self {
        Self::constant(R::zero())
    }
    #[inline]
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<R: Real> One for Dual<R> {
    #[inline]
    fn one() -> Self {
        Self::constant(R::one())
    }
}

impl<R: Real> Num for Dual<R> {
    type FromStrRadixErr = <R as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> std::result::Result<Self, Self::FromStrRadixErr> {
        R::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<R: Real> ToPrimitive for Dual<R> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<R: Real> NumCast for Dual<R> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <R as NumCast>::from(n).map(Self::constant)
    }
}

impl<R: Real> FromPrimitive for Dual<R> {
    fn from_i64(n: i64) -> Option<Self> {
        R::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        R::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        R::from_f64(n).map(Self::constant)
    }
}

impl<R: Real> Float for Dual<R> {
    fn nan() -> Self {
        Self::constant(R::nan())
    }
    fn infinity() -> Self {
        Self::constant(R::infinity())
    }
    fn neg_infinity() -> Self {
        Self::constant(R::neg_infinity())
    }
    fn neg_zero() -> Self {
        Self::constant(R::neg_zero())
    }
    fn min_value() -> Self {
        Self::constant(R::min_value())
    }
    fn min_positive_value() -> Self {
        Self::constant(R::min_positive_value())
    }
    fn epsilon() -> Self {
        Self::constant(R::epsilon())
    }
    fn max_value() -> Self {
        Self::constant(R::max_value())
    }
    fn is_nan(self) -> bool {
        self.re.is_nan() || self.eps.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite() || self.eps.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        Self::new(self.re.fract(), self.eps)
    }
    fn abs(self) -> Self {
        if self.re.is_sign_negative() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.lift(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let nr = R::from_i32(n).expect("small integer");
        self.lift(self.re.powi(n), nr * self.re.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        // d(a^b) = b a^(b-1) da + a^b ln(a) db
        let v = self.re.powf(n.re);
        let da = if n.re.is_zero() { R::zero() } else { n.re * self.re.powf(n.re - R::one()) };
        let db = if n.eps.is_zero() { R::zero() } else { v * self.re.ln() };
        Self::new(v, da * self.eps + db * n.eps)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.lift(s, R::lit(0.5) / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.lift(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.lift(e, e * R::lit(std::f64::consts::LN_2))
    }
    fn ln(self) -> Self {
        self.lift(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.lift(self.re.log2(), (self.re * R::lit(std::f64::consts::LN_2)).recip())
    }
    fn log10(self) -> Self {
        self.lift(self.re.log10(), (self.re * R::lit(std::f64::consts::LN_10)).recip())
    }
    fn max(self, o: Self) -> Self {
        if self.re >= o.re || o.re.is_nan() {
            self
        } else {
            o
        }
    }
    fn min(self, o: Self) -> Self {
        if self.re <= o.re || o.re.is_nan() {
            self
        } else {
            o
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, o: Self) -> Self {
        if self.re <= o.re {
            Self::zero()
        } else {
            self - o
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.lift(c, (R::lit(3.0) * c * c).recip())
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn sin(self) -> Self {
        self.lift(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.lift(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.lift(t, R::one() + t * t)
    }
    fn asin(self) -> Self {
        self.lift(self.re.asin(), (R::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.lift(self.re.acos(), -(R::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.lift(self.re.atan(), (R::one() + self.re * self.re).recip())
    }
    fn atan2(self, o: Self) -> Self {
        let d = self.re * self.re + o.re * o.re;
        Self::new(self.re.atan2(o.re), (o.re * self.eps - self.re * o.eps) / d)
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.lift(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.lift(self.re.ln_1p(), (R::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.lift(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.lift(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.lift(t, R::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.lift(self.re.asinh(), (self.re * self.re + R::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.lift(self.re.acosh(), (self.re * self.re - R::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.lift(self.re.atanh(), (R::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::lit(30.0) {
        x
    } else if x < S::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<R: Real>(y: R) -> R {
    if y > R::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of [`softplus`]: the logistic function.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

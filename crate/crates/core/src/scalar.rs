//! Scalar abstraction and forward-mode differentiation.
//!
//! Math kernels across the crate are generic over [`Real`], a trait alias
//! over `num_traits::Float`. `f32` and `f64` satisfy it, and so does
//! [`Dual`], a fixed-width forward-mode dual number. Running the same
//! kinematics code at `Dual<N>` yields exact derivatives with respect to up
//! to `N` parameters in one pass, which is how the pose and shape solvers
//! obtain their gradients.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumAssignOps, NumCast, One, ToPrimitive, Zero};

/// Scalar type accepted by the generic math kernels.
pub trait Real: Float + FromPrimitive + NumAssignOps + fmt::Debug + Default + 'static {
    /// Lift an `f64` constant into the scalar domain.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + NumAssignOps + fmt::Debug + Default + 'static {}

/// Forward-mode dual number with `N` derivative slots.
///
/// Arithmetic follows the chain rule on `eps` while `re` carries the value.
/// Comparisons and classification look at `re` only, so branch-heavy code
/// (clamps, min/max, visibility tests) behaves exactly as it would on the
/// underlying `f64` evaluation.
#[derive(Clone, Copy)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Variable seeded with derivative 1 in slot `slot`.
    #[inline]
    pub fn variable(re: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Dual { re, eps }
    }

    /// Apply a scalar function given its value and derivative at `re`.
    #[inline]
    fn lift(self, value: f64, slope: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= slope;
        }
        Dual { re: value, eps }
    }
}

impl<const N: usize> Default for Dual<N> {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl<const N: usize> fmt::Debug for Dual<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}+eps{:?}", self.re, &self.eps[..])
    }
}

impl<const N: usize> fmt::Display for Dual<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.re, f)
    }
}

impl<const N: usize> PartialEq for Dual<N> {
    #[inline]
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<const N: usize> PartialOrd for Dual<N> {
    #[inline]
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += *b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= *b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + rhs.eps[i] * self.re;
        }
        Dual { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Rem for Dual<N> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        // Derivative of x - k*y with k = trunc(x/y) constant between jumps.
        let k = (self.re / rhs.re).trunc();
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] - k * rhs.eps[i];
        }
        Dual { re: self.re % rhs.re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}
impl<const N: usize> DivAssign for Dual<N> {
    #[inline]
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}
impl<const N: usize> RemAssign for Dual<N> {
    #[inline]
    fn rem_assign(&mut self, rhs: Self) {
        *self = *self % rhs;
    }
}

impl<const N: usize> Zero for Dual<N> {
    #[inline]
    fn zero() -> Self {
        Self::constant(0.0)
    }
    #[inline]
    fn is_zero(&self) -> bool {
        self.re == 0.0
    }
}

impl<const N: usize> One for Dual<N> {
    #[inline]
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl<const N: usize> Num for Dual<N> {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<const N: usize> ToPrimitive for Dual<N> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.re)
    }
}

impl<const N: usize> NumCast for Dual<N> {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::constant)
    }
}

impl<const N: usize> FromPrimitive for Dual<N> {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Self::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::constant(n))
    }
}

impl<const N: usize> Float for Dual<N> {
    fn nan() -> Self {
        Self::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Self::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::constant(-0.0)
    }
    fn min_value() -> Self {
        Self::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::constant(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::constant(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.re.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite()
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
        // x - trunc(x): derivative 1 away from integer jumps.
        let mut out = self;
        out.re = self.re.fract();
        out
    }
    fn abs(self) -> Self {
        if self.re < 0.0 {
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
        let inv = 1.0 / self.re;
        self.lift(inv, -inv * inv)
    }
    fn powi(self, n: i32) -> Self {
        self.lift(self.re.powi(n), n as f64 * self.re.powi(n - 1))
    }
    fn powf(self, n: Self) -> Self {
        // General case d(x^y) needs both partials; y is almost always a
        // constant in this crate but handle the full rule.
        let v = self.re.powf(n.re);
        let dx = n.re * self.re.powf(n.re - 1.0);
        let dy = if v == 0.0 { 0.0 } else { v * self.re.ln() };
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = dx * self.eps[i] + dy * n.eps[i];
        }
        Dual { re: v, eps }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.lift(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.lift(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.lift(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.lift(self.re.ln(), 1.0 / self.re)
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.lift(self.re.log2(), 1.0 / (self.re * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.lift(self.re.log10(), 1.0 / (self.re * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.re >= other.re {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.re <= other.re {
            self
        } else {
            other
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::constant(0.0)
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.lift(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.lift(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.lift(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let c = self.re.cos();
        self.lift(self.re.tan(), 1.0 / (c * c))
    }
    fn asin(self) -> Self {
        self.lift(self.re.asin(), 1.0 / (1.0 - self.re * self.re).sqrt())
    }
    fn acos(self) -> Self {
        self.lift(self.re.acos(), -1.0 / (1.0 - self.re * self.re).sqrt())
    }
    fn atan(self) -> Self {
        self.lift(self.re.atan(), 1.0 / (1.0 + self.re * self.re))
    }
    fn atan2(self, other: Self) -> Self {
        let d = self.re * self.re + other.re * other.re;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (other.re * self.eps[i] - self.re * other.eps[i]) / d;
        }
        Dual { re: self.re.atan2(other.re), eps }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.lift(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.lift(self.re.ln_1p(), 1.0 / (1.0 + self.re))
    }
    fn sinh(self) -> Self {
        self.lift(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.lift(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.lift(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.lift(self.re.asinh(), 1.0 / (self.re * self.re + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.lift(self.re.acosh(), 1.0 / (self.re * self.re - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.lift(self.re.atanh(), 1.0 / (1.0 - self.re * self.re))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.re)
    }
    fn epsilon() -> Self {
        Self::constant(f64::EPSILON)
    }
    fn to_degrees(self) -> Self {
        self.lift(self.re.to_degrees(), 180.0 / std::f64::consts::PI)
    }
    fn to_radians(self) -> Self {
        self.lift(self.re.to_radians(), std::f64::consts::PI / 180.0)
    }
}

/// First-order Adam over a flat `f64` parameter vector.
///
/// Every gradient-based fit in this crate (hand pose, shape, rigid objects)
/// shares this state machine so their convergence behavior stays comparable.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D2 = Dual<2>;

    fn var(x: f64, slot: usize) -> D2 {
        D2::variable(x, slot)
    }

    #[test]
    fn product_rule() {
        let x = var(3.0, 0);
        let y = var(5.0, 1);
        let p = x * y;
        assert_eq!(p.re, 15.0);
        assert_eq!(p.eps, [5.0, 3.0]);
    }

    #[test]
    fn quotient_rule() {
        let x = var(1.0, 0);
        let y = var(4.0, 1);
        let q = x / y;
        assert_eq!(q.re, 0.25);
        assert!((q.eps[0] - 0.25).abs() < 1e-15);
        assert!((q.eps[1] + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn trig_chain_matches_finite_difference() {
        let f = |x: f64| (x.sin() * 2.0 + x.cos() * x).sqrt();
        let fd = |x: f64| {
            let h = 1e-7;
            (f(x + h) - f(x - h)) / (2.0 * h)
        };
        for &x in &[0.3, 0.9, 1.2] {
            let d = var(x, 0);
            let y = (d.sin() * D2::constant(2.0) + d.cos() * d).sqrt();
            assert!((y.re - f(x)).abs() < 1e-14);
            assert!((y.eps[0] - fd(x)).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn comparisons_use_value_only() {
        let a = var(1.0, 0);
        let b = D2::constant(1.0);
        assert_eq!(a, b);
        assert!(var(2.0, 1) > b);
        let m = Float::max(a, D2::constant(0.5));
        assert_eq!(m.eps, [1.0, 0.0]);
        let m = Float::max(a, D2::constant(1.5));
        assert_eq!(m.eps, [0.0, 0.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = (x0 - 3)^2 + 10 (x1 + 1)^2
        let mut p = [0.0, 0.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 3.0).abs() < 1e-5);
        assert!((p[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn atan2_partials() {
        let y = var(0.6, 0);
        let x = var(0.8, 1);
        let a = Float::atan2(y, x);
        // d/dy atan2 = x/(x^2+y^2), d/dx = -y/(x^2+y^2); here x^2+y^2 = 1.
        assert!((a.eps[0] - 0.8).abs() < 1e-15);
        assert!((a.eps[1] + 0.6).abs() < 1e-15);
    }
}

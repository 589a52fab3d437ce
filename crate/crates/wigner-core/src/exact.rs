//! Exact complex numbers over arbitrary-precision rationals, used where
//! moments must be compared with zero tolerance.

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg};

/// `re + i*im` with exact rational parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexRational {
    pub re: BigRational,
    pub im: BigRational,
}

impl ComplexRational {
    pub fn zero() -> Self {
        Self {
            re: BigRational::zero(),
            im: BigRational::zero(),
        }
    }

    pub fn one() -> Self {
        Self {
            re: BigRational::one(),
            im: BigRational::zero(),
        }
    }

    pub fn from_integer(n: i64) -> Self {
        Self {
            re: BigRational::from_integer(BigInt::from(n)),
            im: BigRational::zero(),
        }
    }

    pub fn from_ratio(numer: i64, denom: i64) -> Self {
        Self {
            re: BigRational::new(BigInt::from(numer), BigInt::from(denom)),
            im: BigRational::zero(),
        }
    }

    /// Exact conversion: every finite f64 is a rational number.
    pub fn from_f64_parts(re: f64, im: f64) -> Option<Self> {
        Some(Self {
            re: BigRational::from_float(re)?,
            im: if im == 0.0 {
                BigRational::zero()
            } else {
                BigRational::from_float(im)?
            },
        })
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn is_real(&self) -> bool {
        self.im.is_zero()
    }

    pub fn conj(&self) -> Self {
        Self {
            re: self.re.clone(),
            im: -self.im.clone(),
        }
    }

    pub fn scale(&self, factor: &BigRational) -> Self {
        Self {
            re: &self.re * factor,
            im: &self.im * factor,
        }
    }

    pub fn abs_real(&self) -> BigRational {
        self.re.abs()
    }

    pub fn to_complex64(&self) -> Complex64 {
        Complex64::new(
            self.re.to_f64().unwrap_or(f64::NAN),
            self.im.to_f64().unwrap_or(f64::NAN),
        )
    }
}

impl Add for ComplexRational {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            re: self.re + rhs.re,
            im: self.im + rhs.im,
        }
    }
}

impl AddAssign for ComplexRational {
    fn add_assign(&mut self, rhs: Self) {
        self.re += rhs.re;
        self.im += rhs.im;
    }
}

impl Neg for ComplexRational {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            re: -self.re,
            im: -self.im,
        }
    }
}

impl Mul for ComplexRational {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        &self * &rhs
    }
}

impl Mul for &ComplexRational {
    type Output = ComplexRational;
    fn mul(self, rhs: &ComplexRational) -> ComplexRational {
        ComplexRational {
            re: &self.re * &rhs.re - &self.im * &rhs.im,
            im: &self.re * &rhs.im + &self.im * &rhs.re,
        }
    }
}

impl fmt::Display for ComplexRational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.im.is_zero() {
            write!(f, "{}", self.re)
        } else {
            write!(f, "{} + {}i", self.re, self.im)
        }
    }
}

/// `n^power` as an exact rational, `power` may be negative.
pub fn integer_power(n: u64, power: i64) -> BigRational {
    let magnitude = BigInt::from(n).pow(power.unsigned_abs() as u32);
    if power >= 0 {
        BigRational::from_integer(magnitude)
    } else {
        BigRational::new(BigInt::one(), magnitude)
    }
}

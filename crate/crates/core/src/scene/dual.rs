//! Forward-mode dual numbers and a minimal scalar trait.
//!
//! Geometry that needs parameter derivatives (plane intersection depth,
//! pixel coverage) is written once against [`Real`] and evaluated either
//! with plain `f64` or with [`Dual`] seeded on the primitive parameters.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Value plus gradient with respect to `N` seeded inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, g: [0.0; N] }
    }

    pub fn variable(v: f64, index: usize) -> Self {
        let mut g = [0.0; N];
        g[index] = 1.0;
        Self { v, g }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut g = self.g;
        for x in &mut g {
            *x *= dv;
        }
        Self { v, g }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for (a, b) in self.g.iter_mut().zip(o.g) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for (a, b) in self.g.iter_mut().zip(o.g) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = self.g[i] * o.v + self.v * o.g[i];
        }
        Self { v: self.v * o.v, g }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = (self.g[i] - v * o.g[i]) * inv;
        }
        Self { v, g }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(-self.v, -1.0)
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.map(s, d)
    }
}

pub type V3<T> = [T; 3];

pub fn lift<T: Real>(v: [f64; 3]) -> V3<T> {
    [T::cst(v[0]), T::cst(v[1]), T::cst(v[2])]
}

pub fn add<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn mul<T: Real>(a: V3<T>, k: T) -> V3<T> {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn values<T: Real>(a: V3<T>) -> [f64; 3] {
    [a[0].value(), a[1].value(), a[2].value()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_quotient_rule() {
        let x = Dual::<2>::variable(3.0, 0);
        let y = Dual::<2>::variable(2.0, 1);
        let q = (x * x) / y;
        assert!((q.v - 4.5).abs() < 1e-15);
        assert!((q.g[0] - 3.0).abs() < 1e-15);
        assert!((q.g[1] + 2.25).abs() < 1e-15);
    }

    #[test]
    fn dual_sqrt_and_abs() {
        let x = Dual::<1>::variable(-4.0, 0);
        let a = x.abs();
        assert_eq!(a.v, 4.0);
        assert_eq!(a.g[0], -1.0);
        let s = a.sqrt();
        assert!((s.g[0] + 0.25).abs() < 1e-15);
    }
}

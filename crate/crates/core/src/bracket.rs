//! Interval arithmetic for truncated quantities.
//!
//! Every capacity, Green value, and escape probability carries a
//! `[lower, upper]` bracket; identities downstream are tested bracket-aware.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn new(lower: f64, upper: f64) -> Self {
        assert!(lower <= upper, "inverted bracket [{lower}, {upper}]");
        Bracket { lower, upper }
    }

    pub fn exact(v: f64) -> Self {
        Bracket { lower: v, upper: v }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn intersects(&self, other: &Bracket) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }

    pub fn add(&self, other: &Bracket) -> Bracket {
        Bracket::new(self.lower + other.lower, self.upper + other.upper)
    }

    /// Scale by a nonnegative factor.
    pub fn scale(&self, c: f64) -> Bracket {
        assert!(c >= 0.0);
        Bracket::new(self.lower * c, self.upper * c)
    }

    /// Product bracket for two nonnegative intervals.
    pub fn mul(&self, other: &Bracket) -> Bracket {
        assert!(self.lower >= 0.0 && other.lower >= 0.0);
        Bracket::new(self.lower * other.lower, self.upper * other.upper)
    }

    /// Reciprocal for a strictly positive interval.
    pub fn recip(&self) -> Bracket {
        assert!(self.lower > 0.0);
        Bracket::new(1.0 / self.upper, 1.0 / self.lower)
    }

    /// Widen symmetrically by `pad >= 0`.
    pub fn padded(&self, pad: f64) -> Bracket {
        assert!(pad >= 0.0);
        Bracket::new(self.lower - pad, self.upper + pad)
    }

    /// Clamp into [0, 1]; for probability brackets.
    pub fn clamp_unit(&self) -> Bracket {
        Bracket::new(self.lower.clamp(0.0, 1.0), self.upper.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let a = Bracket::new(1.0, 2.0);
        let b = Bracket::new(0.5, 0.5);
        assert_eq!(a.add(&b), Bracket::new(1.5, 2.5));
        assert_eq!(a.scale(2.0), Bracket::new(2.0, 4.0));
        assert_eq!(a.mul(&b), Bracket::new(0.5, 1.0));
        assert_eq!(a.recip(), Bracket::new(0.5, 1.0));
        assert!(a.contains(1.5));
        assert!(!a.contains(2.1));
        assert!(a.intersects(&Bracket::new(1.9, 3.0)));
        assert!(!a.intersects(&Bracket::new(2.1, 3.0)));
    }

    #[test]
    #[should_panic]
    fn inverted_rejected() {
        Bracket::new(2.0, 1.0);
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Non-negative rational number, written `a/b` or as a plain integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    num: u32,
    den: u32,
}

impl Ratio {
    pub const fn new(num: u32, den: u32) -> Self {
        assert!(den > 0, "ratio denominator must be positive");
        Ratio { num, den }
    }

    pub const fn integer(v: u32) -> Self {
        Ratio { num: v, den: 1 }
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    /// `floor(self · n)`.
    pub fn floor_mul(self, n: usize) -> usize {
        (self.num as usize * n) / self.den as usize
    }

    /// `self · n` when it is a whole number.
    pub fn exact_mul(self, n: usize) -> Option<usize> {
        let p = self.num as usize * n;
        p.is_multiple_of(self.den as usize).then_some(p / self.den as usize)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Config(format!("`{s}` is not a ratio (expected `a/b` or an integer)"));
        let (num, den) = match s.trim().split_once('/') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if den == 0 {
            return Err(bad());
        }
        Ok(Ratio { num, den })
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let r: Ratio = "1/12".parse().unwrap();
        assert_eq!(r, Ratio::new(1, 12));
        assert_eq!(r.to_string(), "1/12");
        assert_eq!("3".parse::<Ratio>().unwrap().to_string(), "3");
        assert!("1/0".parse::<Ratio>().is_err());
        assert!("x".parse::<Ratio>().is_err());
    }

    #[test]
    fn multiplication() {
        assert_eq!(Ratio::new(1, 12).floor_mul(48), 4);
        assert_eq!(Ratio::new(1, 12).floor_mul(4), 0);
        assert_eq!(Ratio::new(3, 2).exact_mul(6), Some(9));
        assert_eq!(Ratio::new(3, 2).exact_mul(5), None);
    }
}

//! Nearest-rank tertiles and the three-way ordinal discretization built on them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Nearest-rank quantile `num/den` of an ascending slice: the value at
/// 1-based rank `ceil(num * N / den)`, clamped to rank 1.
pub fn nearest_rank(sorted: &[f64], num: usize, den: usize) -> Option<f64> {
    if sorted.is_empty() || den == 0 {
        return None;
    }
    let n = sorted.len();
    let rank = (num * n).div_ceil(den).clamp(1, n);
    Some(sorted[rank - 1])
}

/// The two tertile cut points `Q(1/3) <= Q(2/3)` of an empirical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tertiles {
    pub q13: f64,
    pub q23: f64,
}

impl Tertiles {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut sorted: Vec<f64> = values.into_iter().collect();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmptyInput("non-finite value in distribution".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let q13 = nearest_rank(&sorted, 1, 3)
            .ok_or_else(|| Error::EmptyInput("tertiles of an empty distribution".into()))?;
        let q23 = nearest_rank(&sorted, 2, 3).expect("nonempty");
        Ok(Self { q13, q23 })
    }

    /// Ordinal bin in {1, 2, 3}: `x < q13`, then `x < q23`, else 3.
    pub fn bin(&self, x: f64) -> u8 {
        if x < self.q13 {
            1
        } else if x < self.q23 {
            2
        } else {
            3
        }
    }

    pub fn label(&self, x: f64) -> OrdinalLabel {
        OrdinalLabel::from_bin(self.bin(x))
    }
}

/// Low / Medium / High, serialized with the single-letter codes L / M / H.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OrdinalLabel {
    Low,
    Medium,
    High,
}

impl OrdinalLabel {
    pub const ALL: [OrdinalLabel; 3] = [OrdinalLabel::Low, OrdinalLabel::Medium, OrdinalLabel::High];

    pub fn from_bin(bin: u8) -> Self {
        match bin {
            1 => OrdinalLabel::Low,
            2 => OrdinalLabel::Medium,
            _ => OrdinalLabel::High,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            OrdinalLabel::Low => "L",
            OrdinalLabel::Medium => "M",
            OrdinalLabel::High => "H",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OrdinalLabel::Low => "low",
            OrdinalLabel::Medium => "medium",
            OrdinalLabel::High => "high",
        }
    }
}

impl fmt::Display for OrdinalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrdinalLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l" | "low" => Ok(OrdinalLabel::Low),
            "m" | "medium" | "middle" => Ok(OrdinalLabel::Medium),
            "h" | "high" => Ok(OrdinalLabel::High),
            _ => Err(Error::Unknown {
                kind: "label",
                name: s.to_string(),
            }),
        }
    }
}

impl Serialize for OrdinalLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for OrdinalLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn six_values() {
        let t = Tertiles::from_values([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!((t.q13, t.q23), (2.0, 4.0));
        let bins: Vec<u8> = (1..=6).map(|x| t.bin(x as f64)).collect();
        assert_eq!(bins, [1, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn degenerate_distribution_is_all_high() {
        let t = Tertiles::from_values([7.0; 4]).unwrap();
        assert_eq!(t.label(7.0), OrdinalLabel::High);
        let single = Tertiles::from_values([3.5]).unwrap();
        assert_eq!(single.bin(3.5), 3);
        assert!(Tertiles::from_values(std::iter::empty()).is_err());
    }

    #[test]
    fn label_codes_round_trip() {
        for l in OrdinalLabel::ALL {
            let js = serde_json::to_string(&l).unwrap();
            assert_eq!(serde_json::from_str::<OrdinalLabel>(&js).unwrap(), l);
        }
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(mut xs in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let t = Tertiles::from_values(xs.clone()).unwrap();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            // ceil(n/3) and ceil(2n/3) computed by counting.
            let r1 = (1..=n).find(|r| 3 * r >= n).unwrap();
            let r2 = (1..=n).find(|r| 3 * r >= 2 * n).unwrap();
            prop_assert_eq!(t.q13, xs[r1 - 1]);
            prop_assert_eq!(t.q23, xs[r2 - 1]);
            prop_assert!(t.q13 <= t.q23);
        }
    }
}

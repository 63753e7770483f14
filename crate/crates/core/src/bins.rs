//! Integer-valued count bins.
//!
//! A [`BinPolicy`] partitions the nonnegative integers into an ordered list of
//! bins. Every policy built here starts with the singleton `{0}` and ends with
//! the open bin `[m, inf)` that absorbs all block counts at or above the noise
//! threshold `m`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinError {
    #[error("noise threshold m must be at least 1")]
    ZeroThreshold,
    #[error("dynamic granularity requires a switch_point")]
    MissingSwitchPoint,
    #[error("switch_point {switch_point} must be smaller than m = {m}")]
    SwitchPointTooLarge { switch_point: u64, m: u64 },
    #[error("bin index {index} out of range for {len} bins")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("expected {expected} representatives, got {got}")]
    RepresentativeCount { expected: usize, got: usize },
    #[error("representative {value} of bin {index} ({bin}) lies outside the bin")]
    RepresentativeOutsideBin { index: usize, bin: String, value: f64 },
    #[error("invalid bins: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    Dynamic,
    Coarse,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Granularity::Fine => "fine",
            Granularity::Dynamic => "dynamic",
            Granularity::Coarse => "coarse",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(Granularity::Fine),
            "dynamic" => Ok(Granularity::Dynamic),
            "coarse" => Ok(Granularity::Coarse),
            other => Err(format!("unknown granularity '{other}'")),
        }
    }
}

/// An inclusive integer range `[lo, hi]`; `hi == None` marks the open tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: u64,
    pub hi: Option<u64>,
    pub representative: f64,
}

impl Bin {
    /// Finite bin with the midpoint as representative.
    pub fn finite(lo: u64, hi: u64) -> Self {
        Bin {
            lo,
            hi: Some(hi),
            representative: (lo + hi) as f64 / 2.0,
        }
    }

    pub fn singleton(value: u64) -> Self {
        Bin::finite(value, value)
    }

    /// The open bin `[lo, inf)`, represented by `lo` until calibrated.
    pub fn open(lo: u64) -> Self {
        Bin {
            lo,
            hi: None,
            representative: lo as f64,
        }
    }

    pub fn contains(&self, count: u64) -> bool {
        count >= self.lo && self.hi.map_or(true, |hi| count <= hi)
    }

    pub fn is_singleton(&self) -> bool {
        self.hi == Some(self.lo)
    }

    pub fn is_open(&self) -> bool {
        self.hi.is_none()
    }

    fn representative_in_range(&self, value: f64) -> bool {
        value.is_finite()
            && value >= self.lo as f64
            && self.hi.map_or(true, |hi| value <= hi as f64)
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            None => write!(f, "[{},inf)", self.lo),
            Some(hi) if hi == self.lo => write!(f, "{{{}}}", self.lo),
            Some(hi) => write!(f, "{{{}..{}}}", self.lo, hi),
        }
    }
}

/// Serialized form of a policy in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinPolicySpec {
    pub granularity: Granularity,
    pub m: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_point: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representatives: Option<Vec<f64>>,
}

impl Default for BinPolicySpec {
    fn default() -> Self {
        BinPolicySpec {
            granularity: Granularity::Fine,
            m: 4,
            switch_point: None,
            representatives: None,
        }
    }
}

impl BinPolicySpec {
    pub fn build(&self) -> Result<BinPolicy, BinError> {
        let policy = build_bins(self.granularity, self.m, self.switch_point)?;
        match &self.representatives {
            Some(reps) => policy.with_representatives(reps),
            None => Ok(policy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPolicy {
    bins: Vec<Bin>,
    granularity: Granularity,
    m: u64,
    switch_point: Option<u64>,
}

/// Builds one of the three integer-valued policies.
///
/// Pairs are formed upward from the first integer after the singleton prefix
/// and are cut at `m - 1`, so a trailing integer below `m` may stay a
/// singleton.
pub fn build_bins(
    granularity: Granularity,
    m: u64,
    switch_point: Option<u64>,
) -> Result<BinPolicy, BinError> {
    if m == 0 {
        return Err(BinError::ZeroThreshold);
    }
    // last value kept as a singleton before pairing starts
    let singleton_end = match granularity {
        Granularity::Fine => m - 1,
        Granularity::Coarse => 0,
        Granularity::Dynamic => {
            let sp = switch_point.ok_or(BinError::MissingSwitchPoint)?;
            if sp >= m {
                return Err(BinError::SwitchPointTooLarge { switch_point: sp, m });
            }
            sp
        }
    };

    let mut bins: Vec<Bin> = (0..=singleton_end).map(Bin::singleton).collect();
    let mut lo = singleton_end + 1;
    while lo < m {
        let hi = (lo + 1).min(m - 1);
        bins.push(Bin::finite(lo, hi));
        lo = hi + 1;
    }
    bins.push(Bin::open(m));

    Ok(BinPolicy {
        bins,
        granularity,
        m,
        switch_point: match granularity {
            Granularity::Dynamic => switch_point,
            _ => None,
        },
    })
}

impl BinPolicy {
    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn switch_point(&self) -> Option<u64> {
        self.switch_point
    }

    pub fn spec(&self) -> BinPolicySpec {
        BinPolicySpec {
            granularity: self.granularity,
            m: self.m,
            switch_point: self.switch_point,
            representatives: Some(self.representatives()),
        }
    }

    /// Index of the unique bin containing `count`.
    pub fn quantize(&self, count: u64) -> usize {
        // bins are sorted and contiguous, so the answer is the last bin whose
        // lower bound does not exceed `count`
        self.bins.partition_point(|b| b.lo <= count) - 1
    }

    pub fn representative(&self, k: usize) -> Result<f64, BinError> {
        self.bins
            .get(k)
            .map(|b| b.representative)
            .ok_or(BinError::IndexOutOfRange {
                index: k,
                len: self.bins.len(),
            })
    }

    pub fn representatives(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.representative).collect()
    }

    pub fn terminal_representative(&self) -> f64 {
        self.bins.last().map_or(0.0, |b| b.representative)
    }

    /// Replaces every representative. Each value must lie inside its bin.
    pub fn with_representatives(&self, reps: &[f64]) -> Result<BinPolicy, BinError> {
        if reps.len() != self.bins.len() {
            return Err(BinError::RepresentativeCount {
                expected: self.bins.len(),
                got: reps.len(),
            });
        }
        let mut out = self.clone();
        for (index, (bin, &value)) in out.bins.iter_mut().zip(reps).enumerate() {
            if !bin.representative_in_range(value) {
                return Err(BinError::RepresentativeOutsideBin {
                    index,
                    bin: bin.to_string(),
                    value,
                });
            }
            bin.representative = value;
        }
        Ok(out)
    }

    /// Sets the open bin's representative to the mean of the observed counts
    /// that fall into it. Without such counts the representative becomes `m`.
    pub fn calibrate_terminal<I>(&self, counts: I) -> BinPolicy
    where
        I: IntoIterator<Item = u64>,
    {
        let (sum, n) = counts
            .into_iter()
            .filter(|&c| c >= self.m)
            .fold((0u128, 0u64), |(s, n), c| (s + c as u128, n + 1));
        let mut out = self.clone();
        if let Some(last) = out.bins.last_mut() {
            last.representative = if n == 0 {
                self.m as f64
            } else {
                sum as f64 / n as f64
            };
        }
        out
    }

    /// Short stable identifier of the policy, used to detect mismatches
    /// between a checkpoint and a config.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("policy serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

impl fmt::Display for BinPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bins.iter().map(|b| b.to_string()).collect();
        write!(f, "{} m={}: {}", self.granularity, self.m, parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// `lo > hi` on a finite bin.
    InvertedBounds { index: usize },
    /// Representative outside its bin.
    RepresentativeOutside { index: usize },
    Overlap { value: u64, first: usize, second: usize },
    Uncovered { value: u64 },
    /// No open bin, so everything past `from` is uncovered.
    UncoveredTail { from: u64 },
    /// More than one open bin; both cover every value from `from` upward.
    OverlappingTail { from: u64, first: usize, second: usize },
    Unsorted { index: usize },
    ZeroNotSingleton,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvertedBounds { index } => write!(f, "bin {index} has lo > hi"),
            Violation::RepresentativeOutside { index } => {
                write!(f, "representative of bin {index} lies outside the bin")
            }
            Violation::Overlap {
                value,
                first,
                second,
            } => write!(f, "overlap at {value} (bins {first} and {second})"),
            Violation::Uncovered { value } => write!(f, "{value} uncovered"),
            Violation::UncoveredTail { from } => write!(f, "values >= {from} uncovered"),
            Violation::OverlappingTail {
                from,
                first,
                second,
            } => write!(f, "open bins {first} and {second} overlap from {from}"),
            Violation::Unsorted { index } => write!(f, "bin {index} is out of order"),
            Violation::ZeroNotSingleton => write!(f, "first bin is not {{0}}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Checks disjointness and coverage of an arbitrary bin list.
///
/// Integers up to the largest finite bound are enumerated; the tail beyond it
/// is decided by counting open bins.
pub fn validate(bins: &[Bin]) -> ValidationReport {
    let mut violations = Vec::new();

    for (index, b) in bins.iter().enumerate() {
        if let Some(hi) = b.hi {
            if b.lo > hi {
                violations.push(Violation::InvertedBounds { index });
                continue;
            }
        }
        if !b.representative_in_range(b.representative) {
            violations.push(Violation::RepresentativeOutside { index });
        }
    }
    for (index, pair) in bins.windows(2).enumerate() {
        if pair[1].lo < pair[0].lo {
            violations.push(Violation::Unsorted { index: index + 1 });
        }
    }
    match bins.first() {
        Some(b) if b.lo == 0 && b.hi == Some(0) => {}
        _ => violations.push(Violation::ZeroNotSingleton),
    }

    let max_check = bins
        .iter()
        .map(|b| b.hi.unwrap_or(b.lo).max(b.lo))
        .max()
        .unwrap_or(0);
    for value in 0..=max_check {
        let owners: Vec<usize> = bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.contains(value))
            .map(|(i, _)| i)
            .collect();
        match owners.as_slice() {
            [] => violations.push(Violation::Uncovered { value }),
            [_] => {}
            [first, second, ..] => violations.push(Violation::Overlap {
                value,
                first: *first,
                second: *second,
            }),
        }
    }

    let open: Vec<(usize, u64)> = bins
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_open())
        .map(|(i, b)| (i, b.lo))
        .collect();
    match open.as_slice() {
        [] => violations.push(Violation::UncoveredTail {
            from: max_check + 1,
        }),
        [_] => {}
        [(first, a), (second, b), ..] => violations.push(Violation::OverlappingTail {
            from: (*a).max(*b).max(max_check + 1),
            first: *first,
            second: *second,
        }),
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

impl BinPolicy {
    pub fn validate(&self) -> ValidationReport {
        validate(&self.bins)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(p: &BinPolicy) -> Vec<(u64, Option<u64>)> {
        p.bins().iter().map(|b| (b.lo, b.hi)).collect()
    }

    #[test]
    fn fine_m4() {
        let p = build_bins(Granularity::Fine, 4, None).unwrap();
        assert_eq!(
            bounds(&p),
            vec![
                (0, Some(0)),
                (1, Some(1)),
                (2, Some(2)),
                (3, Some(3)),
                (4, None)
            ]
        );
    }

    #[test]
    fn coarse_m4_keeps_trailing_singleton() {
        let p = build_bins(Granularity::Coarse, 4, None).unwrap();
        assert_eq!(
            bounds(&p),
            vec![(0, Some(0)), (1, Some(2)), (3, Some(3)), (4, None)]
        );
    }

    #[test]
    fn fine_m1_is_minimal() {
        let p = build_bins(Granularity::Fine, 1, None).unwrap();
        assert_eq!(bounds(&p), vec![(0, Some(0)), (1, None)]);
    }

    #[test]
    fn dynamic_singletons_then_pairs() {
        let p = build_bins(Granularity::Dynamic, 8, Some(2)).unwrap();
        assert_eq!(
            bounds(&p),
            vec![
                (0, Some(0)),
                (1, Some(1)),
                (2, Some(2)),
                (3, Some(4)),
                (5, Some(6)),
                (7, Some(7)),
                (8, None)
            ]
        );
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            build_bins(Granularity::Fine, 0, None).unwrap_err(),
            BinError::ZeroThreshold
        );
        assert_eq!(
            build_bins(Granularity::Dynamic, 4, None).unwrap_err(),
            BinError::MissingSwitchPoint
        );
        assert!(matches!(
            build_bins(Granularity::Dynamic, 4, Some(4)).unwrap_err(),
            BinError::SwitchPointTooLarge { .. }
        ));
    }

    #[test]
    fn quantize_examples() {
        let fine = build_bins(Granularity::Fine, 4, None).unwrap();
        let coarse = build_bins(Granularity::Coarse, 4, None).unwrap();
        assert_eq!(fine.quantize(0), 0);
        assert_eq!(fine.quantize(7), 4);
        assert_eq!(coarse.quantize(2), 1);
    }

    #[test]
    fn representative_examples() {
        let fine = build_bins(Granularity::Fine, 4, None).unwrap();
        let coarse = build_bins(Granularity::Coarse, 4, None).unwrap();
        assert_eq!(fine.representative(2).unwrap(), 2.0);
        assert_eq!(coarse.representative(1).unwrap(), 1.5);
        let calibrated = fine.calibrate_terminal([4, 4, 6, 0, 1, 3]);
        assert_eq!(calibrated.representative(4).unwrap(), 14.0 / 3.0);
        assert_eq!(fine.calibrate_terminal([0, 1]).representative(4).unwrap(), 4.0);
        assert!(matches!(
            fine.representative(5),
            Err(BinError::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn overrides_are_checked() {
        let coarse = build_bins(Granularity::Coarse, 4, None).unwrap();
        let p = coarse.with_representatives(&[0.0, 1.2, 3.0, 5.0]).unwrap();
        assert_eq!(p.representatives(), vec![0.0, 1.2, 3.0, 5.0]);
        assert!(coarse.with_representatives(&[0.0, 2.5, 3.0, 5.0]).is_err());
        assert!(coarse.with_representatives(&[0.0]).is_err());
    }

    #[test]
    fn validate_examples() {
        let fine = build_bins(Granularity::Fine, 4, None).unwrap();
        assert!(fine.validate().ok);

        let overlap = validate(&[Bin::singleton(0), Bin::finite(0, 1), Bin::open(2)]);
        assert!(!overlap.ok);
        assert!(overlap.violations.contains(&Violation::Overlap {
            value: 0,
            first: 0,
            second: 1
        }));

        let gap = validate(&[Bin::singleton(0), Bin::singleton(2), Bin::open(3)]);
        assert_eq!(gap.violations, vec![Violation::Uncovered { value: 1 }]);

        let no_tail = validate(&[Bin::singleton(0), Bin::singleton(1)]);
        assert_eq!(no_tail.violations, vec![Violation::UncoveredTail { from: 2 }]);
    }

    #[test]
    fn spec_roundtrip() {
        let spec = BinPolicySpec {
            granularity: Granularity::Dynamic,
            m: 6,
            switch_point: Some(1),
            representatives: None,
        };
        let p = spec.build().unwrap();
        let again = p.spec().build().unwrap();
        assert_eq!(p, again);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"granularity":"dynamic","m":6,"switch_point":1}"#);
    }
}

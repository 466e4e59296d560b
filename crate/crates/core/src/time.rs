//! Musical time in beats (quarter note = 1.0), held as exact thousandths.
//!
//! Every beat value in the crate is rounded to three decimal places, so the
//! representation is an integer count of milli-beats. Sums, differences and
//! comparisons are then exact and the printed form (`1.500`) is canonical.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use thiserror::Error;

/// Round `num / den` to the nearest integer, halves away from zero.
pub(crate) fn div_round_half_away(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    }
}

/// A beat count rounded to three decimals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Beats(i64);

impl Beats {
    pub const ZERO: Beats = Beats(0);

    pub const fn from_millis(millis: i64) -> Self {
        Beats(millis)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn whole(beats: i64) -> Self {
        Beats(beats * 1000)
    }

    /// Round an arbitrary float to the nearest thousandth (halves away from zero).
    pub fn from_f64(value: f64) -> Self {
        Beats((value * 1000.0).round() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Euclidean remainder, for positions inside a measure.
    pub fn rem_euclid(self, modulus: Beats) -> Beats {
        Beats(self.0.rem_euclid(modulus.0))
    }
}

impl Add for Beats {
    type Output = Beats;
    fn add(self, rhs: Beats) -> Beats {
        Beats(self.0 + rhs.0)
    }
}

impl AddAssign for Beats {
    fn add_assign(&mut self, rhs: Beats) {
        self.0 += rhs.0;
    }
}

impl Sub for Beats {
    type Output = Beats;
    fn sub(self, rhs: Beats) -> Beats {
        Beats(self.0 - rhs.0)
    }
}

impl fmt::Display for Beats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", abs / 1000, abs % 1000)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid beat value {0:?}: expected a decimal with exactly three places")]
pub struct ParseBeatsError(pub String);

impl FromStr for Beats {
    type Err = ParseBeatsError;

    /// Parses the canonical `d.ddd` spelling only.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseBeatsError(s.to_string());
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = body.split_once('.').ok_or_else(err)?;
        if int.is_empty()
            || frac.len() != 3
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(err());
        }
        let int: i64 = int.parse().map_err(|_| err())?;
        let frac: i64 = frac.parse().map_err(|_| err())?;
        let millis = int.checked_mul(1000).and_then(|v| v.checked_add(frac)).ok_or_else(err)?;
        Ok(Beats(if neg { -millis } else { millis }))
    }
}

/// A time signature such as 3/4 or 6/8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Meter {
    pub numerator: u8,
    pub denominator: u8,
}

impl Meter {
    pub const COMMON: Meter = Meter { numerator: 4, denominator: 4 };

    pub fn new(numerator: u8, denominator: u8) -> Self {
        Meter { numerator, denominator }
    }

    /// Measure length in quarter-note beats.
    pub fn measure_length(self) -> Beats {
        let millis = div_round_half_away(
            i128::from(self.numerator) * 4000,
            i128::from(self.denominator.max(1)),
        );
        Beats(millis as i64)
    }
}

impl Default for Meter {
    fn default() -> Self {
        Meter::COMMON
    }
}

impl fmt::Display for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid meter {0:?}")]
pub struct ParseMeterError(pub String);

impl FromStr for Meter {
    type Err = ParseMeterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseMeterError(s.to_string());
        let (n, d) = s.split_once('/').ok_or_else(err)?;
        let numerator: u8 = n.trim().parse().map_err(|_| err())?;
        let denominator: u8 = d.trim().parse().map_err(|_| err())?;
        if numerator == 0 || denominator == 0 {
            return Err(err());
        }
        Ok(Meter { numerator, denominator })
    }
}

/// Piecewise-constant meter over a timeline: each region starts at its
/// onset and re-anchors the measure grid there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeterMap {
    regions: Vec<(Beats, Meter)>,
}

impl MeterMap {
    /// Builds a map from (onset, meter) entries. Entries are sorted, later
    /// duplicates at the same onset win, and 4/4 is assumed before the first.
    pub fn new(mut regions: Vec<(Beats, Meter)>) -> Self {
        regions.sort_by_key(|(onset, _)| *onset);
        let mut out: Vec<(Beats, Meter)> = Vec::with_capacity(regions.len() + 1);
        for (onset, meter) in regions {
            match out.last_mut() {
                Some(last) if last.0 == onset => last.1 = meter,
                _ => out.push((onset, meter)),
            }
        }
        if out.first().map_or(true, |(onset, _)| *onset > Beats::ZERO) {
            out.insert(0, (Beats::ZERO, Meter::COMMON));
        }
        // A restated meter on the existing grid changes nothing.
        out.dedup_by(|b, a| a.1 == b.1 && (b.0 - a.0).rem_euclid(a.1.measure_length()) == Beats::ZERO);
        MeterMap { regions: out }
    }

    pub fn constant(meter: Meter) -> Self {
        MeterMap { regions: vec![(Beats::ZERO, meter)] }
    }

    pub fn regions(&self) -> &[(Beats, Meter)] {
        &self.regions
    }

    /// Region in force at `at`.
    pub fn region_at(&self, at: Beats) -> (Beats, Meter) {
        let idx = self.regions.partition_point(|(onset, _)| *onset <= at);
        self.regions[idx.saturating_sub(1)]
    }

    pub fn meter_at(&self, at: Beats) -> Meter {
        self.region_at(at).1
    }

    /// Position of `at` relative to the most recent downbeat.
    pub fn position_in_measure(&self, at: Beats) -> Beats {
        let (start, meter) = self.region_at(at);
        (at - start).rem_euclid(meter.measure_length())
    }

    /// Measure start positions strictly before `end`.
    pub fn measure_starts(&self, end: Beats) -> Vec<Beats> {
        let mut starts = Vec::new();
        for (i, &(onset, meter)) in self.regions.iter().enumerate() {
            let region_end = self.regions.get(i + 1).map_or(end, |r| r.0.min(end));
            let len = meter.measure_length();
            if len <= Beats::ZERO {
                continue;
            }
            let mut t = onset;
            while t < region_end {
                starts.push(t);
                t += len;
            }
        }
        starts
    }

    /// The map seen from a window starting at `start`, rebased to zero.
    pub fn window(&self, start: Beats, end: Beats) -> MeterMap {
        let (_, first) = self.region_at(start);
        let mut regions = vec![(Beats::ZERO, first)];
        regions.extend(
            self.regions
                .iter()
                .filter(|(onset, _)| *onset > start && *onset < end)
                .map(|&(onset, meter)| (onset - start, meter)),
        );
        MeterMap::new(regions)
    }

    /// Compact text form, e.g. `4/4` or `0.000:4/4;8.000:3/4`.
    pub fn to_text(&self) -> String {
        if self.regions.len() == 1 {
            return self.regions[0].1.to_string();
        }
        self.regions
            .iter()
            .map(|(onset, meter)| format!("{onset}:{meter}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_text(s: &str) -> Result<Self, ParseMeterError> {
        let err = || ParseMeterError(s.to_string());
        if !s.contains(':') {
            return Ok(MeterMap::constant(s.parse()?));
        }
        let mut regions = Vec::new();
        for part in s.split(';') {
            let (onset, meter) = part.split_once(':').ok_or_else(err)?;
            let onset: Beats = onset.parse().map_err(|_| err())?;
            regions.push((onset, meter.parse()?));
        }
        Ok(MeterMap::new(regions))
    }
}

impl Default for MeterMap {
    fn default() -> Self {
        MeterMap::constant(Meter::COMMON)
    }
}

impl From<Meter> for MeterMap {
    fn from(meter: Meter) -> Self {
        MeterMap::constant(meter)
    }
}

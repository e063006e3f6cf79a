//! Time and bandwidth units shared by every module.
//!
//! Simulation time is integer nanoseconds so that event ordering never
//! depends on floating-point rounding.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;
pub const NS_PER_S: u64 = 1_000_000_000;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// A duration or a point in simulation time, in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub fn from_us(us: u64) -> Self {
        Nanos(us * NS_PER_US)
    }

    pub fn from_ms(ms: u64) -> Self {
        Nanos(ms * NS_PER_MS)
    }

    /// Rounds to the nearest nanosecond; negative and NaN inputs map to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        Nanos::from_f64_ns(secs * NS_PER_S as f64)
    }

    pub fn from_ms_f64(ms: f64) -> Self {
        Nanos::from_f64_ns(ms * NS_PER_MS as f64)
    }

    pub fn from_us_f64(us: f64) -> Self {
        Nanos::from_f64_ns(us * NS_PER_US as f64)
    }

    fn from_f64_ns(ns: f64) -> Self {
        if ns.is_nan() || ns <= 0.0 {
            Nanos(0)
        } else {
            Nanos(ns.round() as u64)
        }
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NS_PER_S as f64
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / NS_PER_MS as f64
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / NS_PER_US as f64
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Half of this duration, rounded down.
    pub fn half(self) -> Nanos {
        Nanos(self.0 / 2)
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl Mul<u64> for Nanos {
    type Output = Nanos;
    fn mul(self, rhs: u64) -> Nanos {
        Nanos(self.0 * rhs)
    }
}

impl Div<u64> for Nanos {
    type Output = Nanos;
    fn div(self, rhs: u64) -> Nanos {
        Nanos(self.0 / rhs)
    }
}

impl Sum for Nanos {
    fn sum<I: Iterator<Item = Nanos>>(iter: I) -> Nanos {
        iter.fold(Nanos::ZERO, Add::add)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 >= NS_PER_MS {
            write!(f, "{:.3}ms", self.as_ms_f64())
        } else if self.0 >= NS_PER_US {
            write!(f, "{:.3}us", self.as_us_f64())
        } else {
            write!(f, "{}ns", self.0)
        }
    }
}

/// Parses `2ms`, `500us`, `1.5s` or `40ns`. A bare number is read as milliseconds.
pub fn parse_duration(text: &str) -> Result<Nanos> {
    let t = text.trim().to_ascii_lowercase();
    let (num, scale) = if let Some(v) = t.strip_suffix("ms") {
        (v, NS_PER_MS as f64)
    } else if let Some(v) = t.strip_suffix("us") {
        (v, NS_PER_US as f64)
    } else if let Some(v) = t.strip_suffix("ns") {
        (v, 1.0)
    } else if let Some(v) = t.strip_suffix('s') {
        (v, NS_PER_S as f64)
    } else {
        (t.as_str(), NS_PER_MS as f64)
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse duration `{text}`")))?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::invalid(format!("duration `{text}` must be non-negative")));
    }
    Ok(Nanos::from_f64_ns(value * scale))
}

/// Parses `8gbps` or `100mbps` into bits per second. A bare number is read as Gbps.
pub fn parse_bandwidth(text: &str) -> Result<f64> {
    let t = text.trim().to_ascii_lowercase();
    let (num, scale) = if let Some(v) = t.strip_suffix("gbps") {
        (v, 1e9)
    } else if let Some(v) = t.strip_suffix("mbps") {
        (v, 1e6)
    } else if let Some(v) = t.strip_suffix("kbps") {
        (v, 1e3)
    } else if let Some(v) = t.strip_suffix("bps") {
        (v, 1.0)
    } else {
        (t.as_str(), 1e9)
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse bandwidth `{text}`")))?;
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::invalid(format!("bandwidth `{text}` must be positive")));
    }
    Ok(value * scale)
}

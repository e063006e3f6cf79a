//! Kernel latency profiles and batch-size interpolation.
//!
//! A profile file is CSV with the header
//! `device,stage,seq_len,batch_size,latency_us`. Latencies are per layer.
//! Queries between profiled batch sizes interpolate linearly; queries above
//! the largest profiled batch extrapolate from the top two points and
//! queries below the smallest clamp to it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::Nanos;

pub const PROFILE_HEADER: [&str; 5] = ["device", "stage", "seq_len", "batch_size", "latency_us"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    NonAttention,
    Attention,
    Classifier,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::NonAttention => "nonattention",
            StageKind::Attention => "attention",
            StageKind::Classifier => "classifier",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nonattention" | "non-attention" | "non_attention" => Ok(StageKind::NonAttention),
            "attention" => Ok(StageKind::Attention),
            "classifier" => Ok(StageKind::Classifier),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

/// How a latency query was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Exact,
    Interpolated,
    /// Above the largest profiled batch.
    Extrapolated,
    /// Below the smallest profiled batch.
    Clamped,
}

/// One `(batch, latency)` series, strictly increasing in batch.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Series {
    points: Vec<(u32, Nanos)>,
}

impl Series {
    fn batches(&self) -> Vec<u32> {
        self.points.iter().map(|p| p.0).collect()
    }

    fn lookup(&self, batch: u32) -> (Nanos, Coverage) {
        let pts = &self.points;
        let first = pts[0];
        if batch <= first.0 {
            let cov = if batch == first.0 { Coverage::Exact } else { Coverage::Clamped };
            return (first.1, cov);
        }
        match pts.binary_search_by_key(&batch, |p| p.0) {
            Ok(i) => (pts[i].1, Coverage::Exact),
            Err(i) if i < pts.len() => (blend(pts[i - 1], pts[i], batch), Coverage::Interpolated),
            Err(_) => {
                if pts.len() == 1 {
                    return (first.1, Coverage::Extrapolated);
                }
                let n = pts.len();
                (blend(pts[n - 2], pts[n - 1], batch), Coverage::Extrapolated)
            }
        }
    }
}

/// Value of the line through `a` and `b` at `x`, rounded to the nearest
/// nanosecond and never below 1ns.
fn blend(a: (u32, Nanos), b: (u32, Nanos), x: u32) -> Nanos {
    let (x0, y0) = (a.0 as i128, a.1 .0 as i128);
    let (x1, y1) = (b.0 as i128, b.1 .0 as i128);
    let num = (y1 - y0) * (x as i128 - x0);
    let den = x1 - x0;
    // round half away from zero
    let step = if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    };
    Nanos((y0 + step).max(1) as u64)
}

/// Per-device latency table keyed by stage kind and sequence length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelProfile {
    pub device_name: String,
    entries: BTreeMap<StageKind, BTreeMap<u64, Series>>,
    warnings: Vec<String>,
}

/// One profile measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub stage: StageKind,
    pub seq_len: u64,
    pub batch: u32,
    pub latency: Nanos,
}

impl KernelProfile {
    /// Builds a validated profile. Duplicate `(stage, seq_len, batch)` keys and
    /// non-positive latencies are rejected.
    pub fn from_rows(device: impl Into<String>, rows: &[ProfileRow]) -> Result<Self> {
        let device_name = device.into();
        let mut raw: BTreeMap<StageKind, BTreeMap<u64, BTreeMap<u32, Nanos>>> = BTreeMap::new();
        for row in rows {
            if row.latency.is_zero() {
                return Err(Error::parse(
                    format!("profile `{device_name}`"),
                    format!(
                        "non-positive latency for {} batch {} seq_len {}",
                        row.stage, row.batch, row.seq_len
                    ),
                ));
            }
            if row.batch == 0 {
                return Err(Error::parse(
                    format!("profile `{device_name}`"),
                    format!("batch_size must be at least 1 ({})", row.stage),
                ));
            }
            let slot = raw
                .entry(row.stage)
                .or_default()
                .entry(row.seq_len)
                .or_default();
            if slot.insert(row.batch, row.latency).is_some() {
                return Err(Error::parse(
                    format!("profile `{device_name}`"),
                    format!(
                        "duplicate entry for {} seq_len {} batch {}",
                        row.stage, row.seq_len, row.batch
                    ),
                ));
            }
        }
        let mut warnings = Vec::new();
        let entries: BTreeMap<_, _> = raw
            .into_iter()
            .map(|(stage, by_seq)| {
                let by_seq = by_seq
                    .into_iter()
                    .map(|(seq, pts)| {
                        let points: Vec<(u32, Nanos)> = pts.into_iter().collect();
                        if stage == StageKind::NonAttention
                            && points.windows(2).any(|w| w[1].1 < w[0].1)
                        {
                            warnings.push(format!(
                                "{device_name}: nonattention latency decreases with batch size (seq_len {seq})"
                            ));
                        }
                        (seq, Series { points })
                    })
                    .collect();
                (stage, by_seq)
            })
            .collect();
        Ok(KernelProfile {
            device_name,
            entries,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn has_stage(&self, stage: StageKind) -> bool {
        self.entries.contains_key(&stage)
    }

    fn series(&self, stage: StageKind, seq_len: Option<u64>) -> Result<&Series> {
        let by_seq = self.entries.get(&stage).ok_or_else(|| Error::MissingStage {
            device: self.device_name.clone(),
            stage: stage.to_string(),
        })?;
        let chosen = seq_len
            .and_then(|s| by_seq.range(s..).next())
            .or_else(|| by_seq.iter().next_back())
            .map(|(_, series)| series)
            .expect("stage entries are never empty");
        Ok(chosen)
    }

    /// Sorted batch sizes profiled for `stage` at the largest sequence length.
    pub fn profiled_batches(&self, stage: StageKind) -> Result<Vec<u32>> {
        Ok(self.series(stage, None)?.batches())
    }

    pub fn max_seq_len_profiled(&self) -> Option<u64> {
        self.entries
            .values()
            .filter_map(|by_seq| by_seq.keys().next_back().copied())
            .max()
    }

    /// Latency at the largest profiled sequence length.
    pub fn latency(&self, stage: StageKind, batch: u32) -> Result<Nanos> {
        self.latency_at(stage, batch, None).map(|(ns, _)| ns)
    }

    /// Latency using the smallest profiled sequence length that is at least
    /// `seq_len` (the largest one when `seq_len` is `None` or beyond the table).
    pub fn latency_at(
        &self,
        stage: StageKind,
        batch: u32,
        seq_len: Option<u64>,
    ) -> Result<(Nanos, Coverage)> {
        if batch == 0 {
            return Err(Error::invalid("latency query needs batch >= 1"));
        }
        Ok(self.series(stage, seq_len)?.lookup(batch))
    }

    pub fn rows(&self) -> Vec<ProfileRow> {
        let mut out = Vec::new();
        for (&stage, by_seq) in &self.entries {
            for (&seq_len, series) in by_seq {
                for &(batch, latency) in &series.points {
                    out.push(ProfileRow {
                        stage,
                        seq_len,
                        batch,
                        latency,
                    });
                }
            }
        }
        out
    }
}

/// Profiles for several devices, keyed by device name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileSet {
    devices: BTreeMap<String, KernelProfile>,
}

impl ProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, profile: KernelProfile) -> Result<()> {
        let name = profile.device_name.clone();
        if self.devices.contains_key(&name) {
            return Err(Error::parse(
                format!("profile `{name}`"),
                "device appears in more than one profile source",
            ));
        }
        self.devices.insert(name, profile);
        Ok(())
    }

    pub fn get(&self, device: &str) -> Result<&KernelProfile> {
        self.devices
            .get(device)
            .ok_or_else(|| Error::Config(format!("no profile loaded for device `{device}`")))
    }

    pub fn devices(&self) -> impl Iterator<Item = &KernelProfile> {
        self.devices.values()
    }

    pub fn from_csv_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(format!("{origin}:1"), e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != PROFILE_HEADER {
            return Err(Error::parse(
                format!("{origin}:1"),
                format!("expected header `{}`, found `{}`", PROFILE_HEADER.join(","), got.join(",")),
            ));
        }
        let mut per_device: BTreeMap<String, Vec<ProfileRow>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::parse(format!("{origin}:{line}"), e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let loc = format!("{origin}:{line}");
            let field = |i: usize| record.get(i).unwrap_or("");
            let stage: StageKind = field(1)
                .parse()
                .map_err(|e: Error| Error::parse(&loc, e.to_string()))?;
            let seq_len: u64 = field(2)
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad seq_len `{}`", field(2))))?;
            let batch: u32 = field(3)
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad batch_size `{}`", field(3))))?;
            let latency_us: f64 = field(4)
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad latency_us `{}`", field(4))))?;
            if !latency_us.is_finite() || latency_us <= 0.0 {
                return Err(Error::parse(
                    &loc,
                    format!("non-positive latency {latency_us}us"),
                ));
            }
            let latency = Nanos::from_us_f64(latency_us);
            if latency.is_zero() {
                return Err(Error::parse(&loc, "latency rounds to zero nanoseconds"));
            }
            per_device.entry(field(0).to_string()).or_default().push(ProfileRow {
                stage,
                seq_len,
                batch,
                latency,
            });
        }
        let mut set = ProfileSet::new();
        for (device, rows) in per_device {
            let profile = KernelProfile::from_rows(device, &rows)
                .map_err(|e| Error::parse(origin, e.to_string()))?;
            set.insert(profile)?;
        }
        Ok(set)
    }

    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        Self::from_csv_reader(text.as_bytes(), origin)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    pub fn merge(&mut self, other: ProfileSet) -> Result<()> {
        for (_, profile) in other.devices {
            self.insert(profile)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("device,stage,seq_len,batch_size,latency_us\n");
        for profile in self.devices.values() {
            for row in profile.rows() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    profile.device_name,
                    row.stage,
                    row.seq_len,
                    row.batch,
                    row.latency.as_us_f64()
                ));
            }
        }
        out
    }
}

/// Batch sizes spaced by a factor of about sqrt(2): 1, 2, 3, 4, 6, 8, 11, ...
/// capped at `max_batch`, which is always the last element.
pub fn batch_grid(max_batch: u32) -> Vec<u32> {
    let max_batch = max_batch.max(1);
    let mut grid: Vec<u32> = Vec::new();
    for k in 0.. {
        let v = 2f64.powf(k as f64 / 2.0).round();
        if v > max_batch as f64 {
            break;
        }
        let v = v as u32;
        if grid.last() != Some(&v) {
            grid.push(v);
        }
    }
    if grid.last() != Some(&max_batch) {
        grid.push(max_batch);
    }
    grid
}

/// Saturating latency shape: `max(fixed, base + batch * per_item)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStage {
    pub stage: StageKind,
    pub fixed: Nanos,
    #[serde(default)]
    pub base: Nanos,
    pub per_item_ns: f64,
}

impl SyntheticStage {
    pub fn saturating(stage: StageKind, fixed: Nanos, per_item_ns: f64) -> Self {
        SyntheticStage {
            stage,
            fixed,
            base: Nanos::ZERO,
            per_item_ns,
        }
    }

    pub fn linear(stage: StageKind, base: Nanos, per_item_ns: f64) -> Self {
        SyntheticStage {
            stage,
            fixed: Nanos::ZERO,
            base,
            per_item_ns,
        }
    }

    pub fn latency(&self, batch: u32) -> Nanos {
        let linear = self.base.0 as f64 + batch as f64 * self.per_item_ns;
        let ns = linear.round().max(self.fixed.0 as f64);
        Nanos((ns as u64).max(1))
    }

    /// Batch size where the linear term overtakes the fixed floor.
    pub fn saturation_batch(&self) -> f64 {
        if self.per_item_ns <= 0.0 {
            f64::INFINITY
        } else {
            (self.fixed.0 as f64 - self.base.0 as f64).max(0.0) / self.per_item_ns
        }
    }
}

/// Deterministic profile on `batch_grid(max_batch)` for test fixtures and
/// what-if studies.
pub fn synthesize_profile(
    device: &str,
    stages: &[SyntheticStage],
    max_batch: u32,
    seq_len: u64,
) -> Result<KernelProfile> {
    let grid = batch_grid(max_batch);
    let mut rows = Vec::new();
    for st in stages {
        if st.per_item_ns < 0.0 || !st.per_item_ns.is_finite() {
            return Err(Error::invalid("per-item latency must be a non-negative number"));
        }
        if st.fixed.is_zero() && st.base.is_zero() && st.per_item_ns == 0.0 {
            return Err(Error::invalid(format!("{} stage has zero latency", st.stage)));
        }
        for &b in &grid {
            rows.push(ProfileRow {
                stage: st.stage,
                seq_len,
                batch: b,
                latency: st.latency(b),
            });
        }
    }
    KernelProfile::from_rows(device, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> KernelProfile {
        let rows = [
            ProfileRow {
                stage: StageKind::NonAttention,
                seq_len: 0,
                batch: 4,
                latency: Nanos::from_ms(10),
            },
            ProfileRow {
                stage: StageKind::NonAttention,
                seq_len: 0,
                batch: 6,
                latency: Nanos::from_ms(14),
            },
        ];
        KernelProfile::from_rows("gpu", &rows).unwrap()
    }

    #[test]
    fn interpolation_rules() {
        let p = two_point();
        assert_eq!(p.profiled_batches(StageKind::NonAttention).unwrap(), vec![4, 6]);
        assert_eq!(p.latency(StageKind::NonAttention, 5).unwrap(), Nanos::from_ms(12));
        assert_eq!(p.latency(StageKind::NonAttention, 4).unwrap(), Nanos::from_ms(10));
        assert_eq!(p.latency(StageKind::NonAttention, 2).unwrap(), Nanos::from_ms(10));
        let (v, cov) = p.latency_at(StageKind::NonAttention, 8, None).unwrap();
        assert_eq!(cov, Coverage::Extrapolated);
        // independent slope: (14 - 10) / (6 - 4) = 2ms per item
        let slope_ms = (14 - 10) / (6 - 4);
        assert_eq!(v, Nanos::from_ms(14 + slope_ms * (8 - 6)));
    }

    #[test]
    fn missing_stage_is_an_error() {
        let p = two_point();
        assert!(matches!(
            p.latency(StageKind::Attention, 4),
            Err(Error::MissingStage { .. })
        ));
    }

    #[test]
    fn csv_parsing_and_errors() {
        let text = "device,stage,seq_len,batch_size,latency_us\n\
                    t4,nonattention,0,6,14000\n\
                    t4,nonattention,0,4,10000\n";
        let set = ProfileSet::from_csv_str(text, "p.csv").unwrap();
        let p = set.get("t4").unwrap();
        assert_eq!(p.profiled_batches(StageKind::NonAttention).unwrap(), vec![4, 6]);

        let zero = "device,stage,seq_len,batch_size,latency_us\nt4,attention,0,1,0\n";
        let err = ProfileSet::from_csv_str(zero, "p.csv").unwrap_err();
        assert!(err.to_string().contains("non-positive"), "{err}");

        let dup = "device,stage,seq_len,batch_size,latency_us\n\
                   t4,attention,0,1,5\nt4,attention,0,1,6\n";
        let err = ProfileSet::from_csv_str(dup, "p.csv").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let bad_header = "dev,stage,seq,batch,lat\n";
        assert!(ProfileSet::from_csv_str(bad_header, "p.csv").is_err());
    }

    #[test]
    fn attention_uses_max_seq_len_unless_asked() {
        let text = "device,stage,seq_len,batch_size,latency_us\n\
                    cpu,attention,1024,1,100\n\
                    cpu,attention,4096,1,400\n";
        let set = ProfileSet::from_csv_str(text, "p.csv").unwrap();
        let p = set.get("cpu").unwrap();
        assert_eq!(p.max_seq_len_profiled(), Some(4096));
        assert_eq!(p.latency(StageKind::Attention, 1).unwrap(), Nanos::from_us(400));
        let (v, _) = p.latency_at(StageKind::Attention, 1, Some(512)).unwrap();
        assert_eq!(v, Nanos::from_us(100));
    }

    #[test]
    fn nonmonotone_profile_warns() {
        let text = "device,stage,seq_len,batch_size,latency_us\n\
                    g,nonattention,0,1,100\ng,nonattention,0,2,90\n";
        let set = ProfileSet::from_csv_str(text, "p.csv").unwrap();
        assert_eq!(set.get("g").unwrap().warnings().len(), 1);
    }

    #[test]
    fn grid_examples() {
        assert_eq!(batch_grid(8), vec![1, 2, 3, 4, 6, 8]);
        assert_eq!(batch_grid(1), vec![1]);
        assert_eq!(batch_grid(10), vec![1, 2, 3, 4, 6, 8, 10]);
    }

    #[test]
    fn synthetic_shapes() {
        let flat = SyntheticStage::saturating(StageKind::NonAttention, Nanos::from_us(5600), 0.0);
        let p = synthesize_profile("t4", &[flat], 64, 0).unwrap();
        for b in [1, 7, 33, 64] {
            assert_eq!(p.latency(StageKind::NonAttention, b).unwrap(), Nanos::from_us(5600));
        }

        let lin = SyntheticStage::saturating(StageKind::NonAttention, Nanos::ZERO, 1500.0);
        let p = synthesize_profile("t4", &[lin], 64, 0).unwrap();
        for b in 1..=64 {
            assert_eq!(p.latency(StageKind::NonAttention, b).unwrap(), Nanos(1500 * b as u64));
        }

        let kink = SyntheticStage::saturating(StageKind::NonAttention, Nanos(64_000), 1000.0);
        // crossover solved by hand: 64000 / 1000
        assert_eq!(kink.saturation_batch(), 64.0);
        assert_eq!(kink.latency(64), Nanos(64_000));
        assert_eq!(kink.latency(63), Nanos(64_000));
        assert_eq!(kink.latency(65), Nanos(65_000));
    }
}

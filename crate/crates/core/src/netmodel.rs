//! Alpha-beta link model and activation payload sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerSpec;
use crate::units::Nanos;

/// A link with fixed round-trip latency and a depletion rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinkFile", into = "LinkFile")]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub rtt: Nanos,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    bandwidth_gbps: f64,
    rtt_ms: f64,
}

impl TryFrom<LinkFile> for LinkSpec {
    type Error = String;

    fn try_from(f: LinkFile) -> std::result::Result<Self, String> {
        if !(f.bandwidth_gbps.is_finite() && f.bandwidth_gbps > 0.0) {
            return Err(format!("bandwidth_gbps must be positive (got {})", f.bandwidth_gbps));
        }
        if !(f.rtt_ms.is_finite() && f.rtt_ms >= 0.0) {
            return Err(format!("rtt_ms must be non-negative (got {})", f.rtt_ms));
        }
        Ok(LinkSpec {
            bandwidth_bps: f.bandwidth_gbps * 1e9,
            rtt: Nanos::from_ms_f64(f.rtt_ms),
        })
    }
}

impl From<LinkSpec> for LinkFile {
    fn from(l: LinkSpec) -> Self {
        LinkFile {
            bandwidth_gbps: l.bandwidth_bps / 1e9,
            rtt_ms: l.rtt.as_ms_f64(),
        }
    }
}

impl LinkSpec {
    pub fn new(bandwidth_bps: f64, rtt: Nanos) -> Result<Self> {
        if !(bandwidth_bps.is_finite() && bandwidth_bps > 0.0) {
            return Err(Error::invalid("link bandwidth must be positive"));
        }
        Ok(LinkSpec { bandwidth_bps, rtt })
    }

    pub fn gbps(gbps: f64, rtt: Nanos) -> Self {
        LinkSpec::new(gbps * 1e9, rtt).expect("positive bandwidth")
    }

    pub fn with_rtt(self, rtt: Nanos) -> Self {
        LinkSpec { rtt, ..self }
    }

    /// Occupancy of the link for `bytes`, excluding propagation latency.
    pub fn serialization_time(&self, bytes: u64) -> Nanos {
        Nanos::from_secs_f64(bytes as f64 * 8.0 / self.bandwidth_bps)
    }
}

/// `rtt/2 + bytes/bandwidth`.
pub fn one_way_transfer_time(link: &LinkSpec, payload_bytes: u64) -> Nanos {
    link.rtt.half() + link.serialization_time(payload_bytes)
}

/// `rtt + (fwd + bwd)/bandwidth`.
pub fn round_trip_transfer_time(link: &LinkSpec, fwd_bytes: u64, bwd_bytes: u64) -> Nanos {
    // keep the two halves consistent with one_way_transfer_time
    let rest = Nanos(link.rtt.0 - link.rtt.half().0);
    link.rtt.half()
        + link.serialization_time(fwd_bytes)
        + rest
        + link.serialization_time(bwd_bytes)
}

/// The two link classes of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterLinks {
    pub inter_tier: LinkSpec,
    pub intra_tier1: LinkSpec,
}

/// Per-token activation bytes on each hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadModel {
    pub tier1_to_tier2_bytes_per_token: u64,
    pub tier2_to_tier1_bytes_per_token: u64,
    pub intra_tier1_bytes_per_token: u64,
}

impl PayloadModel {
    pub fn for_model(spec: &TransformerSpec) -> Self {
        let w = spec.dtype_bytes;
        PayloadModel {
            tier1_to_tier2_bytes_per_token: w * (2 * spec.d_model + 2 * spec.d_kv),
            tier2_to_tier1_bytes_per_token: w * 2 * spec.d_model,
            intra_tier1_bytes_per_token: w * spec.d_model,
        }
    }

    pub fn round_trip_bytes_per_token(&self) -> u64 {
        self.tier1_to_tier2_bytes_per_token + self.tier2_to_tier1_bytes_per_token
    }
}

fn egress(k: u32, n_layers: u32, bytes_per_token_layer: u64, tokens_per_sec: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("egress needs at least one Tier-1 node"));
    }
    let hops = k as u64 * (n_layers as u64).div_ceil(k as u64);
    Ok(hops as f64 * bytes_per_token_layer as f64 * tokens_per_sec * 8.0)
}

/// Bits per second leaving all Tier-1 nodes towards Tier 2.
pub fn tier1_total_egress(
    k: u32,
    n_layers: u32,
    spec: &TransformerSpec,
    tokens_per_sec: f64,
) -> Result<f64> {
    let p = PayloadModel::for_model(spec);
    egress(k, n_layers, p.tier1_to_tier2_bytes_per_token, tokens_per_sec)
}

/// Bits per second leaving all Tier-2 nodes towards Tier 1.
pub fn tier2_total_egress(
    k: u32,
    n_layers: u32,
    spec: &TransformerSpec,
    tokens_per_sec: f64,
) -> Result<f64> {
    let p = PayloadModel::for_model(spec);
    egress(k, n_layers, p.tier2_to_tier1_bytes_per_token, tokens_per_sec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::KIB;

    #[test]
    fn one_way_example() {
        let link = LinkSpec::gbps(8.0, Nanos::from_ms(2));
        let t = one_way_transfer_time(&link, 16 * KIB);
        assert_eq!(t, Nanos(1_016_384));
        let zero = LinkSpec::gbps(8.0, Nanos::ZERO);
        assert_eq!(one_way_transfer_time(&zero, 0), Nanos::ZERO);
        assert_eq!(
            one_way_transfer_time(&zero, 2000).0,
            2 * one_way_transfer_time(&zero, 1000).0
        );
    }

    #[test]
    fn round_trip_examples() {
        let link = LinkSpec::gbps(8.0, Nanos(3_000_001));
        assert_eq!(round_trip_transfer_time(&link, 0, 0), Nanos(3_000_001));
        let one_sec = LinkSpec::gbps(8.0, Nanos::ZERO);
        assert_eq!(round_trip_transfer_time(&one_sec, 600_000_000, 400_000_000), Nanos(1_000_000_000));
        assert_eq!(
            round_trip_transfer_time(&link, 1024, 2048),
            one_way_transfer_time(&link, 1024) + one_way_transfer_time(&link.with_rtt(Nanos(3_000_002)), 2048)
        );
    }

    #[test]
    fn round_trip_matches_table_expression() {
        // RTT + 2*B*K'*(4D + 2D_kv)/BW at 2-byte activations
        let spec = TransformerSpec::llama2_70b();
        let p = PayloadModel::for_model(&spec);
        let link = LinkSpec::gbps(8.0, Nanos::from_ms(2));
        let bk = 72u64;
        let t = round_trip_transfer_time(
            &link,
            bk * p.tier1_to_tier2_bytes_per_token,
            bk * p.tier2_to_tier1_bytes_per_token,
        );
        let expr = 2e-3 + (2 * bk * (4 * spec.d_model + 2 * spec.d_kv)) as f64 * 8.0 / 8e9;
        assert!((t.as_secs_f64() - expr).abs() < 2e-9, "{t} vs {expr}");
        assert_eq!(p.round_trip_bytes_per_token(), 2 * (4 * spec.d_model + 2 * spec.d_kv));
    }

    #[test]
    fn egress_zero_cases() {
        let spec = TransformerSpec::llama2_70b();
        assert_eq!(tier1_total_egress(16, 80, &spec, 0.0).unwrap(), 0.0);
        let mut flat = spec.clone();
        flat.d_model = 0;
        assert_eq!(tier2_total_egress(16, 80, &flat, 1992.0).unwrap(), 0.0);
        assert!(tier1_total_egress(0, 80, &spec, 1.0).is_err());
    }

    #[test]
    fn link_file_fields() {
        let l: LinkSpec = serde_json::from_str(r#"{"bandwidth_gbps": 8, "rtt_ms": 2}"#).unwrap();
        assert_eq!(l.rtt, Nanos::from_ms(2));
        assert_eq!(l.bandwidth_bps, 8e9);
        assert!(serde_json::from_str::<LinkSpec>(r#"{"bandwidth_gbps": 0, "rtt_ms": 2}"#).is_err());
    }
}

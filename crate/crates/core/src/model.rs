//! Transformer architecture constants and closed-form memory/compute footprints.
//!
//! Footprints count elements (loads + stores) and multiply-accumulates, one
//! entry per GEMM/GEMV of a decoder layer. RMSNorm, residual adds and other
//! small operators are not counted. Converting elements to bytes is left to
//! the caller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub name: String,
    pub n_layers: u32,
    pub d_model: u64,
    pub d_kv: u64,
    pub d_hidden: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub max_seq_len: u64,
    pub dtype_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
}

/// Per-layer memory traffic (elements) and compute (MACs).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceFootprint {
    pub mem_accesses: u64,
    pub flops: u64,
}

impl ResourceFootprint {
    /// MACs per element moved; zero when nothing is moved.
    pub fn intensity(&self) -> f64 {
        if self.mem_accesses == 0 {
            0.0
        } else {
            self.flops as f64 / self.mem_accesses as f64
        }
    }
}

impl TransformerSpec {
    /// Llama2-70B dimensions: 80 layers, D=8192, grouped-query attention with
    /// 8 KV heads (D_kv=1024), FFN hidden size 28672.
    pub fn llama2_70b() -> Self {
        TransformerSpec {
            name: "llama2-70b".into(),
            n_layers: 80,
            d_model: 8192,
            d_kv: 1024,
            d_hidden: 28672,
            n_heads: 64,
            n_kv_heads: 8,
            max_seq_len: 4096,
            dtype_bytes: 2,
            vocab_size: Some(32000),
        }
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let spec: TransformerSpec = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                format!("{origin}:{}:{}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        spec.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Every invariant violation, as human-readable lines.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let counts = [
            ("n_layers", self.n_layers as u64),
            ("d_model", self.d_model),
            ("d_kv", self.d_kv),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, value) in counts {
            if value == 0 {
                out.push(format!("{field} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            out.push(format!(
                "d_model ({}) is not divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_kv_heads > 0 && !self.d_kv.is_multiple_of(self.n_kv_heads) {
            out.push(format!(
                "d_kv ({}) is not divisible by n_kv_heads ({})",
                self.d_kv, self.n_kv_heads
            ));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4) {
            out.push(format!("dtype_bytes must be 1, 2 or 4 (got {})", self.dtype_bytes));
        }
        if self.vocab_size == Some(0) {
            out.push("vocab_size must be positive when present".into());
        }
        out
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::parse(format!("model `{}`", self.name), v.join("; ")))
        }
    }

    /// Key and value vectors for one token in one layer, in bytes.
    pub fn kv_bytes_per_token_layer(&self) -> u64 {
        2 * self.dtype_bytes * self.d_kv
    }

    /// Parameter elements of one decoder layer: q and o projections (D x D),
    /// the fused k/v projection (D x 2D_kv) and the three FFN matrices.
    pub fn layer_weight_elements(&self) -> u64 {
        let d = self.d_model;
        2 * d * d + 2 * d * self.d_kv + 3 * d * self.d_hidden
    }

    pub fn layer_weight_bytes(&self) -> u64 {
        self.layer_weight_elements() * self.dtype_bytes
    }

    /// Token embedding table plus classifier, zero when the vocabulary is unknown.
    pub fn embedding_bytes(&self) -> u64 {
        self.vocab_size
            .map_or(0, |v| v * self.d_model * self.dtype_bytes)
    }
}

/// Cache bytes for one prompt of `seq_len` tokens across all layers.
pub fn kv_bytes_per_prompt(spec: &TransformerSpec, seq_len: u64) -> Result<u64> {
    if seq_len > spec.max_seq_len {
        return Err(Error::invalid(format!(
            "seq_len {seq_len} exceeds max_seq_len {}",
            spec.max_seq_len
        )));
    }
    Ok(spec.kv_bytes_per_token_layer() * spec.n_layers as u64 * seq_len)
}

/// Cache bytes for one prompt restricted to `layers` of the model.
pub fn kv_bytes_per_prompt_slice(spec: &TransformerSpec, seq_len: u64, layers: u32) -> Result<u64> {
    let full = kv_bytes_per_prompt(spec, seq_len)?;
    Ok(full / spec.n_layers as u64 * layers as u64)
}

/// QKV, output projection and FFN GEMMs of one layer at batch `batch`.
pub fn nonattention_footprint(spec: &TransformerSpec, batch: u64) -> ResourceFootprint {
    let d = spec.d_model;
    let dh = spec.d_hidden;
    let dkv = spec.d_kv;
    let weights = d * (2 * d + 3 * dh + 2 * dkv);
    let activations = batch * (8 * d + 3 * dh + 2 * dkv);
    ResourceFootprint {
        mem_accesses: weights + activations,
        flops: batch * d * (2 * d + 3 * dh + 2 * dkv),
    }
}

/// Score and value GEMVs of one layer over a cache of `seq_len` tokens.
pub fn attention_footprint(spec: &TransformerSpec, batch: u64, seq_len: u64) -> ResourceFootprint {
    let d = spec.d_model;
    ResourceFootprint {
        mem_accesses: 2 * batch * (d + seq_len * spec.n_heads + seq_len * spec.d_kv),
        flops: 2 * seq_len * batch * d,
    }
}

/// Total parameter bytes. Embedding and classifier are included only when
/// `vocab_size` is known.
pub fn weights_bytes(spec: &TransformerSpec) -> u64 {
    spec.layer_weight_bytes() * spec.n_layers as u64 + 2 * spec.embedding_bytes()
}

/// How many prompts of `per_prompt_bytes` fit in `free_bytes`.
pub fn context_slots(free_bytes: u64, per_prompt_bytes: u64) -> Result<u64> {
    if per_prompt_bytes == 0 {
        return Err(Error::invalid("per-prompt context size must be positive"));
    }
    Ok(free_bytes / per_prompt_bytes)
}

/// Contiguous layer counts for `nodes` pipeline stages; the first
/// `n_layers % nodes` nodes host one extra layer.
pub fn layers_per_node(n_layers: u32, nodes: u32) -> Vec<u32> {
    assert!(nodes > 0, "at least one node");
    let base = n_layers / nodes;
    let extra = n_layers % nodes;
    (0..nodes).map(|i| base + u32::from(i < extra)).collect()
}

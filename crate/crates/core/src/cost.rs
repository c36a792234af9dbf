//! Parametric timing model.
//!
//! Prefill is linear plus quadratic in context (attention over the prefix),
//! decode is a per-token base cost plus a context-proportional read, and
//! host transfers share a single link whose bandwidth divides evenly among
//! concurrent transfers. `transfer_time` always includes the fixed
//! synchronization overhead, even for zero bytes.

use serde::{Deserialize, Serialize};

/// Shipped calibration, see `presets/cost_defaults.toml`.
pub const DEFAULTS_TOML: &str = include_str!("../presets/cost_defaults.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Seconds per new token.
    pub prefill_linear: f64,
    /// Seconds per (new token x context token).
    pub prefill_quadratic: f64,
    /// Seconds per decoded token.
    pub decode_base: f64,
    /// Seconds per (decoded token x context token).
    pub decode_context: f64,
    pub bytes_per_token: f64,
    /// Aggregate host link bandwidth in bytes per second.
    pub pcie_bandwidth: f64,
    /// Fixed seconds per transfer.
    pub transfer_sync_overhead: f64,
}

#[derive(Deserialize)]
struct DefaultsFile {
    offload_crossover: usize,
    cost: Calibration,
}

/// All-fields-required mirror of `CostParams`, whose own missing fields fall
/// back to this file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Calibration {
    prefill_linear: f64,
    prefill_quadratic: f64,
    decode_base: f64,
    decode_context: f64,
    bytes_per_token: f64,
    pcie_bandwidth: f64,
    transfer_sync_overhead: f64,
}

/// Offload/recompute crossover concurrency recorded alongside the defaults.
pub fn recorded_crossover() -> usize {
    let file: DefaultsFile = toml::from_str(DEFAULTS_TOML).expect("shipped cost defaults");
    file.offload_crossover
}

impl Default for CostParams {
    fn default() -> Self {
        let file: DefaultsFile = toml::from_str(DEFAULTS_TOML).expect("shipped cost defaults");
        let c = file.cost;
        Self {
            prefill_linear: c.prefill_linear,
            prefill_quadratic: c.prefill_quadratic,
            decode_base: c.decode_base,
            decode_context: c.decode_context,
            bytes_per_token: c.bytes_per_token,
            pcie_bandwidth: c.pcie_bandwidth,
            transfer_sync_overhead: c.transfer_sync_overhead,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("prefill_linear", self.prefill_linear),
            ("prefill_quadratic", self.prefill_quadratic),
            ("decode_base", self.decode_base),
            ("decode_context", self.decode_context),
            ("bytes_per_token", self.bytes_per_token),
            ("transfer_sync_overhead", self.transfer_sync_overhead),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("cost.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.pcie_bandwidth.is_finite() && self.pcie_bandwidth > 0.0) {
            return Err(format!(
                "cost.pcie_bandwidth must be > 0, got {}",
                self.pcie_bandwidth
            ));
        }
        Ok(())
    }

    /// Prefill of `new_tokens` at the end of a context `context_len` long.
    pub fn prefill_time(&self, new_tokens: usize, context_len: usize) -> f64 {
        debug_assert!(context_len >= new_tokens);
        let n = new_tokens as f64;
        self.prefill_linear * n + self.prefill_quadratic * n * context_len as f64
    }

    /// Decoding `decode_len` tokens after a prompt of `context_len` tokens.
    /// Token k attends over `context_len + k` positions.
    pub fn decode_time(&self, decode_len: usize, context_len: usize) -> f64 {
        let n = decode_len as f64;
        // sum_{k=0}^{n-1} (c + k) = n*c + n(n-1)/2
        let ctx_sum = n * context_len as f64 + n * (n - 1.0).max(0.0) / 2.0;
        self.decode_base * n + self.decode_context * ctx_sum
    }

    /// One transfer of `bytes` while `concurrent` transfers share the link.
    pub fn transfer_time(&self, bytes: f64, concurrent: usize) -> f64 {
        let c = concurrent.max(1) as f64;
        self.transfer_sync_overhead + bytes * c / self.pcie_bandwidth
    }

    pub fn bytes_for(&self, tokens: usize) -> f64 {
        tokens as f64 * self.bytes_per_token
    }

    /// Smallest concurrency in `1..=max_c` at which moving `bytes` over the
    /// link takes longer than prefilling `tokens` from scratch.
    pub fn offload_crossover(&self, bytes: f64, tokens: usize, max_c: usize) -> Option<usize> {
        let recompute = self.prefill_time(tokens, tokens);
        (1..=max_c).find(|&c| self.transfer_time(bytes, c) > recompute)
    }
}

//! GPU device description used by tiling feasibility and the cost model.

use alloc::string::String;

use serde::{Deserialize, Serialize};

/// Bytes per tensor element (fp32).
pub const ELEM_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub sm_count: usize,
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub global_bw: f64,
    /// Bytes/s, aggregated over all SMs.
    pub shared_bw: f64,
    pub shared_per_sm: usize,
    pub shared_per_block_max: usize,
    pub constant_capacity: usize,
    pub readonly_cache: usize,
    pub banks: usize,
    pub bank_word: usize,
    pub warp_size: usize,
    pub transaction_bytes: usize,
    pub max_blocks_per_sm: usize,
    pub max_threads_per_block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error("device field `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("transaction_bytes {0} is not a multiple of the 4-byte element size")]
    TransactionSize(usize),
    #[error("per-block shared limit exceeds per-SM capacity")]
    SharedLimits,
}

const KB: usize = 1024;

impl DeviceSpec {
    /// Pascal-class defaults shared by the bundled devices.
    fn pascal(name: &str, sm_count: usize, peak_flops: f64, global_bw: f64, shared_bw: f64) -> Self {
        DeviceSpec {
            name: name.into(),
            sm_count,
            peak_flops,
            global_bw,
            shared_bw,
            shared_per_sm: 96 * KB,
            shared_per_block_max: 48 * KB,
            constant_capacity: 64 * KB,
            readonly_cache: 48 * KB,
            banks: 32,
            bank_word: 4,
            warp_size: 32,
            transaction_bytes: 16,
            max_blocks_per_sm: 32,
            max_threads_per_block: 1024,
        }
    }

    pub fn titan_xp() -> Self {
        Self::pascal("titan-xp", 30, 12.15e12, 547.7e9, 6074e9)
    }

    pub fn tesla_p4() -> Self {
        Self::pascal("tesla-p4", 20, 5.5e12, 192e9, 2721e9)
    }

    pub fn check(&self) -> Result<(), DeviceError> {
        let counts = [
            ("sm_count", self.sm_count),
            ("shared_per_sm", self.shared_per_sm),
            ("shared_per_block_max", self.shared_per_block_max),
            ("constant_capacity", self.constant_capacity),
            ("readonly_cache", self.readonly_cache),
            ("banks", self.banks),
            ("bank_word", self.bank_word),
            ("warp_size", self.warp_size),
            ("transaction_bytes", self.transaction_bytes),
            ("max_blocks_per_sm", self.max_blocks_per_sm),
            ("max_threads_per_block", self.max_threads_per_block),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(DeviceError::NonPositive(field));
            }
        }
        let rates = [
            ("peak_flops", self.peak_flops),
            ("global_bw", self.global_bw),
            ("shared_bw", self.shared_bw),
        ];
        for (field, v) in rates {
            if !(v > 0.0) {
                return Err(DeviceError::NonPositive(field));
            }
        }
        if !self.transaction_bytes.is_multiple_of(ELEM_BYTES) {
            return Err(DeviceError::TransactionSize(self.transaction_bytes));
        }
        if self.shared_per_block_max > self.shared_per_sm {
            return Err(DeviceError::SharedLimits);
        }
        Ok(())
    }

    /// Elements covered by one coalesced transaction.
    pub fn elems_per_transaction(&self) -> usize {
        self.transaction_bytes / ELEM_BYTES
    }
}

/// Coalesced transactions needed to move `elements` contiguous fp32 values.
pub fn transactions(elements: usize, transaction_bytes: usize) -> usize {
    (elements * ELEM_BYTES).div_ceil(transaction_bytes)
}

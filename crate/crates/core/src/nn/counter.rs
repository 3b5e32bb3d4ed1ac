/// Per-element operation costs charged to [`MacCounter::aux_ops`].
pub mod cost {
    /// Normalize and affine per element (statistics are not charged).
    pub const BATCHNORM: u64 = 2;
    pub const RELU: u64 = 1;
    pub const TANH: u64 = 1;
    /// exp, sum and divide per element.
    pub const SOFTMAX: u64 = 3;
    pub const BIAS: u64 = 1;
    /// Gate multiplier applied to a surviving path activation.
    pub const GATE_SCALE: u64 = 1;
    pub const RESIDUAL_ADD: u64 = 1;
    pub const AVG_POOL: u64 = 1;
}

/// Instrumented operation counts for a forward pass.
///
/// Convolution and linear counts follow the multiply-accumulate formula of the
/// layer geometry, not the multiplies the kernel actually performs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub conv_macs: u64,
    pub linear_macs: u64,
    pub aux_ops: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn merge(&mut self, other: &MacCounter) {
        self.conv_macs += other.conv_macs;
        self.linear_macs += other.linear_macs;
        self.aux_ops += other.aux_ops;
    }

    pub fn total(&self) -> u64 {
        self.conv_macs + self.linear_macs + self.aux_ops
    }
}

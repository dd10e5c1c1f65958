use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MsFamConfig {
    pub feature_dim: usize,
    pub dilation_rates: [usize; 3],
    /// Weight the dilated branches with branch-wise attention; plain sum otherwise.
    pub use_bam: bool,
    /// Replace each decoder MS-FAM by a 1×1 conv + ReLU (the basic network).
    pub degrade_to_1x1: bool,
}

impl Default for MsFamConfig {
    fn default() -> Self {
        MsFamConfig {
            feature_dim: 64,
            dilation_rates: [1, 2, 4],
            use_bam: true,
            degrade_to_1x1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_channels: [usize; 5],
    pub msfam_in_encoder: bool,
    pub msfam_in_decoder: bool,
    pub msfam: MsFamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            encoder_channels: [16, 32, 48, 64, 64],
            msfam_in_encoder: true,
            msfam_in_decoder: true,
            msfam: MsFamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channels must be >= 1".into()));
        }
        if self.msfam.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.msfam.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the decoder stages are full MS-FAMs.
    pub fn decoder_uses_msfam(&self) -> bool {
        self.msfam_in_decoder && !self.msfam.degrade_to_1x1
    }

    /// Short name of the Table-II style variant.
    pub fn variant_name(&self) -> &'static str {
        match (self.msfam_in_encoder, self.decoder_uses_msfam()) {
            (false, false) => "baseline",
            (true, false) => "encoder",
            (false, true) => "decoder",
            (true, true) => "both",
        }
    }
}

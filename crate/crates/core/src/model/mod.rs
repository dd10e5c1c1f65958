//! Desk-scale saliency network: a five-block FPN-like encoder with optional
//! MS-FAMs on the Conv3–Conv5 lateral paths, and a decoder of three stacked
//! MS-FAMs (or 1×1 convolutions) followed by the prediction head.

mod config;
mod msfam;
mod params;

pub use config::{ModelConfig, MsFamConfig};
pub use msfam::{bam_weights, msfam_forward, BranchWeights, MsFamOutput};
pub use params::{Bound, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{ConvSpec, Tape, Tensor, Var};
use msfam::{conv, conv_relu, init_msfam};
use params::Initializer;

/// Encoder blocks that halve the resolution. The last block keeps it, so an
/// input divisible by 16 suffices and FM2 sits at 1/4 resolution.
const DOWNSAMPLED_BLOCKS: usize = 4;
const DECODER_STAGES: usize = 3;
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyModel {
    cfg: ModelConfig,
    params: ParamStore,
}

/// Feature maps FM2..FM5 produced by the encoder, finest first.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub feature_maps: [Var; 4],
    /// Branch weights of the encoder MS-FAMs (Conv3..Conv5 order), if any.
    pub attention: Vec<Var>,
}

impl EncoderOutput {
    pub fn fm2(&self) -> Var {
        self.feature_maps[0]
    }
}

impl SaliencyModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        let fd = cfg.msfam.feature_dim;
        let ch = cfg.encoder_channels;

        let mut cin = IMAGE_CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            let block = i + 1;
            init.conv(&format!("enc{block}.conv_a"), cin, c, 3)?;
            init.conv(&format!("enc{block}.conv_b"), c, c, 3)?;
            cin = c;
        }
        for block in 2..=5 {
            let c = ch[block - 1];
            let lateral_in = if cfg.msfam_in_encoder && block >= 3 {
                init_msfam(&mut init, &format!("enc{block}.msfam"), c, &cfg.msfam)?;
                fd
            } else {
                c
            };
            init.conv(&format!("lat{block}"), lateral_in, fd, 1)?;
        }
        for stage in 1..=DECODER_STAGES {
            if cfg.decoder_uses_msfam() {
                init_msfam(&mut init, &format!("dec.stage{stage}"), fd, &cfg.msfam)?;
            } else {
                init.conv(&format!("dec.stage{stage}.proj"), fd, fd, 1)?;
            }
        }
        init.conv("dec.conv_a", fd, fd, 3)?;
        init.conv("dec.conv_b", fd, fd, 3)?;
        init.conv("dec.out", fd, 1, 1)?;
        Ok(SaliencyModel { cfg, params: store })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a freshly initialized instance of `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = SaliencyModel::new(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(SaliencyModel { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn encoder_forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<EncoderOutput> {
        let [_, c, h, w] = tape.value(image).dims4("encoder")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape("encoder", format!("expected 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encoder",
                format!("input {h}x{w} is not divisible by 16"),
            ));
        }
        let mut x = image;
        let mut block_out = Vec::with_capacity(5);
        for block in 1..=5 {
            x = conv_relu(tape, x, p, &format!("enc{block}.conv_a"), ConvSpec::same(3, 1))?;
            x = conv_relu(tape, x, p, &format!("enc{block}.conv_b"), ConvSpec::same(3, 1))?;
            if block <= DOWNSAMPLED_BLOCKS {
                x = tape.maxpool2d(x, 2, 2, 0)?;
            }
            block_out.push(x);
        }

        let mut laterals = Vec::with_capacity(4);
        let mut attention = Vec::new();
        for block in 2..=5 {
            let mut src = block_out[block - 1];
            if self.cfg.msfam_in_encoder && block >= 3 {
                let m = msfam_forward(
                    tape,
                    src,
                    &self.cfg.msfam,
                    p,
                    &format!("enc{block}.msfam"),
                )?;
                attention.extend(m.weights);
                src = m.output;
            }
            laterals.push(conv(tape, src, p, &format!("lat{block}"), ConvSpec::default())?);
        }

        // top-down: FM5 = lateral5, FMi = lateral_i + upsample(FM(i+1))
        let mut fms = [laterals[3]; 4];
        for i in (0..3).rev() {
            let coarse = fms[i + 1];
            let scale = tape.shape(laterals[i])[2] / tape.shape(coarse)[2];
            let up = if scale == 1 {
                coarse
            } else {
                tape.bilinear_upsample(coarse, scale)?
            };
            fms[i] = tape.add(laterals[i], up)?;
        }
        Ok(EncoderOutput {
            feature_maps: fms,
            attention,
        })
    }

    /// Decoder on FM2; returns a B×1×(4h)×(4w) map in (0,1).
    pub fn decoder_forward(&self, tape: &mut Tape, p: &Bound, fm2: Var) -> Result<Var> {
        let mut x = fm2;
        for stage in 1..=DECODER_STAGES {
            let prefix = format!("dec.stage{stage}");
            x = if self.cfg.decoder_uses_msfam() {
                msfam_forward(tape, x, &self.cfg.msfam, p, &prefix)?.output
            } else {
                conv_relu(tape, x, p, &format!("{prefix}.proj"), ConvSpec::default())?
            };
        }
        x = conv_relu(tape, x, p, "dec.conv_a", ConvSpec::same(3, 1))?;
        x = conv_relu(tape, x, p, "dec.conv_b", ConvSpec::same(3, 1))?;
        let logits = conv(tape, x, p, "dec.out", ConvSpec::default())?;
        let prob = tape.sigmoid(logits);
        tape.bilinear_upsample(prob, 4)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let enc = self.encoder_forward(tape, p, image)?;
        self.decoder_forward(tape, p, enc.fm2())
    }

    /// Inference on a B×3×H×W batch without recording gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }
}

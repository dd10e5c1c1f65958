//! Plain-text run configuration: `# comment`, `[section]`, `key = value`.
//!
//! Every key has a default; unknown sections or keys are rejected by name.
//! [`RunConfig::to_text`] renders a file that parses back to the same value.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dataio::{ShapeKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::Aggregation;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            aggregation: Aggregation::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items = value
        .split(',')
        .map(|s| parse::<T>(key, s.trim()))
        .collect::<Result<Vec<T>>>()?;
    let len = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} values, got {len}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "msfam", "loss", "train", "data", "eval"].contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]",
                        n + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let Some(sec) = &section else {
                return Err(Error::Config(format!(
                    "line {}: key {} outside any section",
                    n + 1,
                    key.trim()
                )));
            };
            cfg.set(sec, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let t = &mut self.train;
        let m: &mut ModelConfig = &mut t.model;
        let l: &mut LossConfig = &mut t.loss;
        match k {
            "model.input_size" => m.input_size = parse(k, value)?,
            "model.encoder_channels" => m.encoder_channels = parse_list(k, value)?,
            "model.msfam_in_encoder" => m.msfam_in_encoder = parse_bool(k, value)?,
            "model.msfam_in_decoder" => m.msfam_in_decoder = parse_bool(k, value)?,
            "msfam.feature_dim" => m.msfam.feature_dim = parse(k, value)?,
            "msfam.dilation_rates" => m.msfam.dilation_rates = parse_list(k, value)?,
            "msfam.use_bam" => m.msfam.use_bam = parse_bool(k, value)?,
            "msfam.degrade_to_1x1" => m.msfam.degrade_to_1x1 = parse_bool(k, value)?,
            "loss.main" => l.main_kind = value.parse()?,
            "loss.use_psg" => l.use_psg = parse_bool(k, value)?,
            "loss.alpha" => l.alpha = parse(k, value)?,
            "loss.psg_kernel" => l.psg_kernel = parse(k, value)?,
            "loss.epsilon" => l.epsilon = parse(k, value)?,
            "loss.psg_refresh" => l.psg_refresh = value.parse()?,
            "train.epochs" => t.epochs = parse(k, value)?,
            "train.batch_size" => t.batch_size = parse(k, value)?,
            "train.lr" => t.lr = parse(k, value)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(k, value)?,
            "train.seed" => t.seed = parse(k, value)?,
            "train.eval_every" => t.eval_every = parse(k, value)?,
            "train.holdout" => t.holdout = parse(k, value)?,
            "train.probe" => t.probe = parse_bool(k, value)?,
            "data.count" => self.data.count = parse(k, value)?,
            "data.size" => self.data.size = parse(k, value)?,
            "data.seed" => self.data.seed = parse(k, value)?,
            "data.hole_fraction" => self.data.hole_fraction = parse(k, value)?,
            "data.shape_kinds" => {
                self.data.shape_kinds = value
                    .split(',')
                    .map(|s| s.trim().parse::<ShapeKind>())
                    .collect::<Result<_>>()?
            }
            "eval.aggregation" => self.aggregation = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key {full}"))),
        }
        Ok(())
    }

    /// Applies an override of the form `section.key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} lacks '='")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {path:?} lacks a section")))?;
        self.set(section, key, value.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let l = &t.loss;
        let d = &self.data;
        let mut s = String::new();
        let _ = write!(
            s,
            "[model]\ninput_size = {}\nencoder_channels = {}\nmsfam_in_encoder = {}\nmsfam_in_decoder = {}\n\n",
            m.input_size,
            join(&m.encoder_channels),
            m.msfam_in_encoder,
            m.msfam_in_decoder
        );
        let _ = write!(
            s,
            "[msfam]\nfeature_dim = {}\ndilation_rates = {}\nuse_bam = {}\ndegrade_to_1x1 = {}\n\n",
            m.msfam.feature_dim,
            join(&m.msfam.dilation_rates),
            m.msfam.use_bam,
            m.msfam.degrade_to_1x1
        );
        let _ = write!(
            s,
            "[loss]\nmain = {}\nuse_psg = {}\nalpha = {}\npsg_kernel = {}\nepsilon = {}\npsg_refresh = {}\n\n",
            l.main_kind, l.use_psg, l.alpha, l.psg_kernel, l.epsilon, l.psg_refresh
        );
        let _ = write!(
            s,
            "[train]\nepochs = {}\nbatch_size = {}\nlr = {}\nlr_decay_factor = {}\nseed = {}\neval_every = {}\nholdout = {}\nprobe = {}\n\n",
            t.epochs, t.batch_size, t.lr, t.lr_decay_factor, t.seed, t.eval_every, t.holdout, t.probe
        );
        let _ = write!(
            s,
            "[data]\ncount = {}\nsize = {}\nseed = {}\nhole_fraction = {}\nshape_kinds = {}\n\n",
            d.count,
            d.size,
            d.seed,
            d.hole_fraction,
            join(&d.shape_kinds)
        );
        let _ = write!(s, "[eval]\naggregation = {}\n", self.aggregation);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "# desk run\n[loss]\nmain = bce\nalpha = 0.5\n\n[msfam]\ndilation_rates = 1, 3, 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.loss.main_kind, LossKind::Bce);
        assert_eq!(cfg.train.loss.alpha, 0.5);
        assert_eq!(cfg.train.model.msfam.dilation_rates, [1, 3, 5]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nlearning_rate = 1\n").unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        assert!(RunConfig::parse("[optim]\n").is_err());
        assert!(RunConfig::parse("lr = 1\n").is_err());
    }

    #[test]
    fn invariants_checked_at_parse_time() {
        assert!(RunConfig::parse("[loss]\npsg_kernel = 4\n").is_err());
        assert!(RunConfig::parse("[model]\ninput_size = 50\n").is_err());
        assert!(RunConfig::parse("[train]\nepochs = 0\n").is_err());
    }

    #[test]
    fn override_applies() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.epochs=3").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.apply_override("epochs=3").is_err());
    }
}

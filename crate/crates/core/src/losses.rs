//! Training losses. Every loss takes a prediction and a target of the same
//! B×1×H×W shape on a tape and returns a scalar variable.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::morphology::{psg_target_batch, StructuringElement};
use crate::ndtensor::{Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Dice,
    Hybrid,
    L1,
    L2,
    Kld,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L1,
        LossKind::L2,
        LossKind::Kld,
        LossKind::Dice,
        LossKind::Bce,
        LossKind::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
            LossKind::Hybrid => "hybrid",
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Kld => "kld",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

/// When the PSG target is rebuilt from the network's own prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsgRefresh {
    /// From the current forward pass, every step.
    Step,
    /// Once per epoch, from the model as it stands at the start of the epoch.
    Epoch,
}

impl FromStr for PsgRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(PsgRefresh::Step),
            "epoch" => Ok(PsgRefresh::Epoch),
            _ => Err(Error::Config(format!("unknown psg refresh {s:?}"))),
        }
    }
}

impl fmt::Display for PsgRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsgRefresh::Step => "step",
            PsgRefresh::Epoch => "epoch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub main_kind: LossKind,
    pub use_psg: bool,
    /// Weight of the auxiliary term.
    pub alpha: f64,
    pub psg_kernel: usize,
    pub epsilon: f64,
    pub psg_refresh: PsgRefresh,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            main_kind: LossKind::Hybrid,
            use_psg: true,
            alpha: 1.0,
            psg_kernel: 3,
            epsilon: DEFAULT_EPSILON,
            psg_refresh: PsgRefresh::Step,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.psg_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "psg_kernel must be odd, got {}",
                self.psg_kernel
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn structuring_element(&self) -> Result<StructuringElement> {
        StructuringElement::square(self.psg_kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: f64,
    pub overall: f64,
}

fn check_pair(tape: &Tape, op: &'static str, pred: Var, target: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    Ok(())
}

fn one_minus(tape: &mut Tape, v: Var) -> Var {
    let neg = tape.scalar_mul(v, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// Mean binary cross-entropy with the prediction clamped to [ε, 1−ε].
pub fn bce(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    check_pair(tape, "bce", pred, target)?;
    let x = tape.clamp(pred, eps, 1.0 - eps);
    let log_x = tape.ln(x);
    let one_minus_x = one_minus(tape, x);
    let log_1mx = tape.ln(one_minus_x);
    let one_minus_y = one_minus(tape, target);
    let pos = tape.mul(target, log_x)?;
    let neg = tape.mul(one_minus_y, log_1mx)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both);
    Ok(tape.scalar_mul(m, -1.0))
}

/// 1 − 2Σxy / (Σx + Σy + ε), per batch item, averaged over the batch.
pub fn dice(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    check_pair(tape, "dice", pred, target)?;
    let xy = tape.mul(pred, target)?;
    let inter = tape.sum_per_item(xy);
    let sx = tape.sum_per_item(pred);
    let sy = tape.sum_per_item(target);
    let den = tape.add(sx, sy)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(inter, den)?;
    let m = tape.mean(ratio);
    let m = tape.scalar_mul(m, -2.0);
    Ok(tape.add_scalar(m, 1.0))
}

pub fn hybrid(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let b = bce(tape, pred, target, eps)?;
    let d = dice(tape, pred, target, eps)?;
    tape.add(b, d)
}

pub fn l1(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "l1", pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn l2(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "l2", pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Mean per-pixel Bernoulli KL divergence KL(target ‖ pred). Both arguments
/// of every logarithm are clamped to [ε, 1−ε]; a zero weight in front of a
/// clamped log therefore contributes exactly zero.
pub fn kld(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    check_pair(tape, "kld", pred, target)?;
    let x = tape.clamp(pred, eps, 1.0 - eps);
    let y = tape.clamp(target, eps, 1.0 - eps);
    let one_minus_x = one_minus(tape, x);
    let one_minus_y_c = one_minus(tape, y);
    let one_minus_t = one_minus(tape, target);

    let ly = tape.ln(y);
    let lx = tape.ln(x);
    let l1y = tape.ln(one_minus_y_c);
    let l1x = tape.ln(one_minus_x);
    let pos_log = tape.sub(ly, lx)?;
    let neg_log = tape.sub(l1y, l1x)?;
    let pos = tape.mul(target, pos_log)?;
    let neg = tape.mul(one_minus_t, neg_log)?;
    let both = tape.add(pos, neg)?;
    Ok(tape.mean(both))
}

pub fn main_loss(tape: &mut Tape, kind: LossKind, pred: Var, target: Var, eps: f64) -> Result<Var> {
    match kind {
        LossKind::Bce => bce(tape, pred, target, eps),
        LossKind::Dice => dice(tape, pred, target, eps),
        LossKind::Hybrid => hybrid(tape, pred, target, eps),
        LossKind::L1 => l1(tape, pred, target),
        LossKind::L2 => l2(tape, pred, target),
        LossKind::Kld => kld(tape, pred, target, eps),
    }
}

/// The PSG target for the current prediction, computed off the tape.
pub fn psg_target_for(tape: &Tape, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    psg_target_batch(tape.value(pred), gt, cfg.structuring_element()?)
}

/// Auxiliary loss: the main formula against the PSG target built from the
/// detached prediction.
pub fn psg_aux(tape: &mut Tape, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let target = psg_target_for(tape, pred, gt, cfg)?;
    psg_aux_with_target(tape, pred, target, cfg)
}

/// Auxiliary loss against a target computed elsewhere (for per-epoch refresh).
pub fn psg_aux_with_target(
    tape: &mut Tape,
    pred: Var,
    target: Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let t = tape.constant(target);
    main_loss(tape, cfg.main_kind, pred, t, cfg.epsilon)
}

/// Overall objective `main + α·aux`. Returns the scalar to back-propagate and
/// its breakdown. `pgt` overrides the per-step PSG target when given.
pub fn overall(
    tape: &mut Tape,
    pred: Var,
    gt: &Tensor,
    cfg: &LossConfig,
    pgt: Option<Tensor>,
) -> Result<(Var, LossBreakdown)> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape(
            "overall",
            format!("prediction {:?} vs ground truth {:?}", tape.shape(pred), gt.shape()),
        ));
    }
    let gt_var = tape.constant(gt.clone());
    let main = main_loss(tape, cfg.main_kind, pred, gt_var, cfg.epsilon)?;
    let main_v = tape.value(main).data()[0];
    if !cfg.use_psg {
        let b = LossBreakdown {
            main: main_v,
            aux: 0.0,
            overall: main_v,
        };
        return Ok((main, b));
    }
    let aux = match pgt {
        Some(t) => psg_aux_with_target(tape, pred, t, cfg)?,
        None => psg_aux(tape, pred, gt, cfg)?,
    };
    let aux_v = tape.value(aux).data()[0];
    let scaled = tape.scalar_mul(aux, cfg.alpha);
    let total = tape.add(main, scaled)?;
    let b = LossBreakdown {
        main: main_v,
        aux: aux_v,
        overall: tape.value(total).data()[0],
    };
    Ok((total, b))
}

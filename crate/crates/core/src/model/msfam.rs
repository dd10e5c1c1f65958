//! Multi-scale feature aggregation module: inception-style reduction, three
//! parallel dilated 3×3 convolutions fused by branch-wise attention, two
//! adjustment convolutions and a residual connection.

use super::config::MsFamConfig;
use super::params::{Bound, Initializer};
use crate::error::{Error, Result};
use crate::ndtensor::{ConvSpec, Tape, Var};

/// Per-image attention weights of the three dilated branches, each in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl BranchWeights {
    /// Splits a batch×3 tensor of weights into per-image triples.
    pub fn from_rows(values: &[f64]) -> Vec<BranchWeights> {
        values
            .chunks_exact(3)
            .map(|r| BranchWeights {
                w1: r[0],
                w2: r[1],
                w3: r[2],
            })
            .collect()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w3]
    }
}

pub(crate) fn conv(tape: &mut Tape, x: Var, p: &Bound, name: &str, spec: ConvSpec) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

pub(crate) fn conv_relu(
    tape: &mut Tape,
    x: Var,
    p: &Bound,
    name: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let y = conv(tape, x, p, name, spec)?;
    Ok(tape.relu(y))
}

fn bam_hidden(feature_dim: usize) -> usize {
    (3 * feature_dim / 4).max(1)
}

pub(crate) fn init_msfam(
    init: &mut Initializer<'_>,
    prefix: &str,
    in_ch: usize,
    cfg: &MsFamConfig,
) -> Result<()> {
    let fd = cfg.feature_dim;
    init.conv(&format!("{prefix}.reduce"), in_ch, fd, 1)?;
    init.conv(&format!("{prefix}.adapt"), fd, fd, 3)?;
    for i in 1..=3 {
        init.conv(&format!("{prefix}.branch{i}"), fd, fd, 3)?;
    }
    if cfg.use_bam {
        init.linear(&format!("{prefix}.bam.fc1"), 3 * fd, bam_hidden(fd))?;
        init.linear(&format!("{prefix}.bam.fc2"), bam_hidden(fd), 3)?;
    }
    init.conv(&format!("{prefix}.fuse_a"), fd, fd, 3)?;
    init.conv(&format!("{prefix}.fuse_b"), fd, fd, 3)?;
    if in_ch != fd {
        init.conv(&format!("{prefix}.skip"), in_ch, fd, 1)?;
    }
    Ok(())
}

/// Branch-wise attention: pool each branch, concatenate the descriptors,
/// FC → ReLU → FC(3) → sigmoid. Returns a batch×3 variable.
pub fn bam_weights(tape: &mut Tape, branches: [Var; 3], p: &Bound, prefix: &str) -> Result<Var> {
    let pooled = branches
        .iter()
        .map(|&b| tape.global_avg_pool(b))
        .collect::<Result<Vec<_>>>()?;
    let desc = tape.concat(&pooled)?;
    let fc1 = tape.linear(
        desc,
        p.var(&format!("{prefix}.bam.fc1.weight"))?,
        Some(p.var(&format!("{prefix}.bam.fc1.bias"))?),
    )?;
    let hidden = tape.relu(fc1);
    let fc2 = tape.linear(
        hidden,
        p.var(&format!("{prefix}.bam.fc2.weight"))?,
        Some(p.var(&format!("{prefix}.bam.fc2.bias"))?),
    )?;
    Ok(tape.sigmoid(fc2))
}

/// Output of one MS-FAM, with the attention weights when BAM is enabled.
pub struct MsFamOutput {
    pub output: Var,
    pub weights: Option<Var>,
}

pub fn msfam_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &MsFamConfig,
    p: &Bound,
    prefix: &str,
) -> Result<MsFamOutput> {
    let [_, in_ch, _, _] = tape.value(x).dims4("msfam")?;
    let fd = cfg.feature_dim;

    let reduced = conv_relu(tape, x, p, &format!("{prefix}.reduce"), ConvSpec::default())?;
    let adapted = conv_relu(tape, reduced, p, &format!("{prefix}.adapt"), ConvSpec::same(3, 1))?;

    let mut branches = [adapted; 3];
    for (i, &rate) in cfg.dilation_rates.iter().enumerate() {
        branches[i] = conv_relu(
            tape,
            adapted,
            p,
            &format!("{prefix}.branch{}", i + 1),
            ConvSpec::same(3, rate),
        )?;
    }

    let (fused, weights) = if cfg.use_bam {
        let w = bam_weights(tape, branches, p, prefix)?;
        let mut acc = None;
        for (i, &b) in branches.iter().enumerate() {
            let wi = tape.column(w, i)?;
            let scaled = tape.channel_scale(b, wi)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        (acc.expect("three branches"), Some(w))
    } else {
        let s = tape.add(branches[0], branches[1])?;
        (tape.add(s, branches[2])?, None)
    };

    let adj = conv_relu(tape, fused, p, &format!("{prefix}.fuse_a"), ConvSpec::same(3, 1))?;
    let adj = conv_relu(tape, adj, p, &format!("{prefix}.fuse_b"), ConvSpec::same(3, 1))?;

    let skip = if in_ch == fd {
        x
    } else {
        let name = format!("{prefix}.skip");
        if p.var(&format!("{name}.weight")).is_err() {
            return Err(Error::shape(
                "msfam",
                format!("{in_ch} input channels, {fd} features and no residual projection"),
            ));
        }
        conv(tape, x, p, &name, ConvSpec::default())?
    };
    let output = tape.add(adj, skip)?;
    Ok(MsFamOutput { output, weights })
}

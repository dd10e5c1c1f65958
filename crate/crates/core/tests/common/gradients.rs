//! Finite-difference cases for every differentiable op and loss. Inputs are
//! drawn away from kinks (ReLU/abs at 0, clamp bounds) and ties (max-pool).

use psg_core::losses::{self, LossConfig, LossKind, DEFAULT_EPSILON as EPS};
use psg_core::morphology::{psg_target_batch, StructuringElement};
use psg_core::ndtensor::{ConvSpec, Tape, Tensor, Var};
use rand::Rng;

use super::{away_from_zero, distinct, gradcheck, rng, uniform, GradCheck};

type Case = (&'static str, GradCheck);

fn binary(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
}

fn op_cases() -> Vec<Case> {
    let mut r = rng(11);
    let mut out = Vec::new();

    let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut r, &[4], -0.5, 0.5);
    let specs = [
        ("conv2d 3x3 same", ConvSpec::same(3, 1)),
        (
            "conv2d 3x3 stride 2",
            ConvSpec {
                stride: 2,
                padding: 1,
                dilation: 1,
            },
        ),
        ("conv2d 3x3 dilation 2", ConvSpec::same(3, 2)),
    ];
    for (name, spec) in specs {
        let g = gradcheck(&[x.clone(), w.clone(), b.clone()], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), spec)
        });
        out.push((name, g));
    }
    let w1 = uniform(&mut r, &[4, 3, 1, 1], -0.5, 0.5);
    out.push((
        "conv2d 1x1",
        gradcheck(&[x.clone(), w1], |t, v| t.conv2d(v[0], v[1], None, ConvSpec::default())),
    ));

    let xp = distinct(&mut r, &[2, 2, 6, 6]);
    out.push((
        "maxpool2d k2 s2",
        gradcheck(&[xp.clone()], |t, v| t.maxpool2d(v[0], 2, 2, 0)),
    ));
    out.push((
        "maxpool2d k3 s1 p1",
        gradcheck(&[xp], |t, v| t.maxpool2d(v[0], 3, 1, 1)),
    ));

    let xs = uniform(&mut r, &[2, 2, 3, 4], -1.0, 1.0);
    out.push((
        "bilinear_upsample x2",
        gradcheck(&[xs.clone()], |t, v| t.bilinear_upsample(v[0], 2)),
    ));
    out.push((
        "bilinear_upsample x4",
        gradcheck(&[xs.clone()], |t, v| t.bilinear_upsample(v[0], 4)),
    ));
    out.push(("global_avg_pool", gradcheck(&[xs.clone()], |t, v| t.global_avg_pool(v[0]))));

    let wl = uniform(&mut r, &[5, 24], -0.5, 0.5);
    let bl = uniform(&mut r, &[5], -0.5, 0.5);
    out.push((
        "linear",
        gradcheck(&[xs.clone(), wl, bl], |t, v| t.linear(v[0], v[1], Some(v[2]))),
    ));

    let xz = away_from_zero(&mut r, &[2, 3, 4], 0.05);
    out.push(("relu", gradcheck(&[xz.clone()], |t, v| Ok(t.relu(v[0])))));
    out.push(("abs", gradcheck(&[xz.clone()], |t, v| Ok(t.abs(v[0])))));
    out.push(("sigmoid", gradcheck(&[xz.clone()], |t, v| Ok(t.sigmoid(v[0])))));
    let xc = Tensor::from_fn(&[24], |i| [-0.9, -0.3, 0.1, 0.45, 0.7, -0.55][i % 6] + 0.001 * i as f64);
    out.push(("clamp", gradcheck(&[xc], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)))));
    let xpos = uniform(&mut r, &[2, 3, 4], 0.1, 2.0);
    out.push(("ln", gradcheck(&[xpos.clone()], |t, v| Ok(t.ln(v[0])))));
    out.push((
        "add_scalar",
        gradcheck(&[xz.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7))),
    ));
    out.push((
        "scalar_mul",
        gradcheck(&[xz.clone()], |t, v| Ok(t.scalar_mul(v[0], -1.7))),
    ));

    let ya = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    out.push(("add", gradcheck(&[xz.clone(), ya.clone()], |t, v| t.add(v[0], v[1]))));
    out.push(("sub", gradcheck(&[xz.clone(), ya.clone()], |t, v| t.sub(v[0], v[1]))));
    out.push(("mul", gradcheck(&[xz.clone(), ya.clone()], |t, v| t.mul(v[0], v[1]))));
    out.push(("div", gradcheck(&[ya.clone(), xpos], |t, v| t.div(v[0], v[1]))));
    out.push(("sum", gradcheck(&[ya.clone()], |t, v| Ok(t.sum(v[0])))));
    out.push(("mean", gradcheck(&[ya.clone()], |t, v| Ok(t.mean(v[0])))));
    out.push((
        "sum_per_item",
        gradcheck(&[xs.clone()], |t, v| Ok(t.sum_per_item(v[0]))),
    ));

    let xa = uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let xb = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    out.push((
        "concat",
        gradcheck(&[xa, xb.clone()], |t, v| t.concat(&[v[0], v[1]])),
    ));
    let s_item = uniform(&mut r, &[2, 1], -1.0, 1.0);
    let s_chan = uniform(&mut r, &[2, 2], -1.0, 1.0);
    out.push((
        "channel_scale per item",
        gradcheck(&[xb.clone(), s_item], |t, v| t.channel_scale(v[0], v[1])),
    ));
    out.push((
        "channel_scale per channel",
        gradcheck(&[xb, s_chan.clone()], |t, v| t.channel_scale(v[0], v[1])),
    ));
    out.push(("column", gradcheck(&[s_chan], |t, v| t.column(v[0], 1))));
    out
}

fn loss_cases() -> Vec<Case> {
    let mut r = rng(23);
    let shape = [2, 1, 4, 4];
    let pred = uniform(&mut r, &shape, 0.05, 0.95);
    let hard = binary(5, &shape);
    // offset from the prediction so l1 stays away from its kink
    let soft = pred.map(|p| (p + 0.3) % 1.0);
    let mut out = Vec::new();

    let with_target = |target: &Tensor, kind: LossKind| {
        let target = target.clone();
        gradcheck(&[pred.clone()], move |t: &mut Tape, v: &[Var]| {
            let y = t.constant(target.clone());
            losses::main_loss(t, kind, v[0], y, EPS)
        })
    };
    for kind in LossKind::ALL {
        out.push((kind_label(kind, false), with_target(&hard, kind)));
        out.push((kind_label(kind, true), with_target(&soft, kind)));
    }

    // PSG overall objective: the target is built once and held constant
    let se = StructuringElement::square(3).unwrap();
    let pgt = psg_target_batch(&pred, &hard, se).unwrap();
    let cfg = LossConfig::default();
    out.push((
        "overall hybrid + psg",
        gradcheck(&[pred.clone()], |t, v| {
            losses::overall(t, v[0], &hard, &cfg, Some(pgt.clone())).map(|(l, _)| l)
        }),
    ));
    out
}

fn kind_label(kind: LossKind, soft: bool) -> &'static str {
    match (kind, soft) {
        (LossKind::L1, false) => "l1 loss",
        (LossKind::L1, true) => "l1 loss, soft target",
        (LossKind::L2, false) => "l2 loss",
        (LossKind::L2, true) => "l2 loss, soft target",
        (LossKind::Kld, false) => "kld loss",
        (LossKind::Kld, true) => "kld loss, soft target",
        (LossKind::Dice, false) => "dice loss",
        (LossKind::Dice, true) => "dice loss, soft target",
        (LossKind::Bce, false) => "bce loss",
        (LossKind::Bce, true) => "bce loss, soft target",
        (LossKind::Hybrid, false) => "hybrid loss",
        (LossKind::Hybrid, true) => "hybrid loss, soft target",
    }
}

pub fn suite() -> Vec<Case> {
    let mut all = op_cases();
    all.extend(loss_cases());
    all
}

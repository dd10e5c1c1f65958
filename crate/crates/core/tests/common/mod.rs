#![allow(dead_code)]

pub mod gradients;

use psg_core::morphology::{BinaryMask, SaliencyMap};
use psg_core::ndtensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero by `gap`, with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart in shuffled order, so max-pool windows
/// have no ties within the finite-difference step.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    Tensor::new(shape, v).unwrap()
}

fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 0.5 * (0.7 * i as f64 + 0.3).sin()).collect()
}

fn projected(out: &Tensor) -> f64 {
    out.data().iter().zip(projection(out.numel())).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central finite differences of `Σ wᵢ·outᵢ` (fixed weights) against the tape
/// gradient, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> psg_core::Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("build");
        projected(tape.value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("build");
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(&shape, projection(shape.iter().product())).unwrap());
    let p = tape.mul(out, w).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    let mut vals = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            vals[k].data_mut()[j] = x0 + FD_STEP;
            let fp = eval(&vals);
            vals[k].data_mut()[j] = x0 - FD_STEP;
            let fm = eval(&vals);
            vals[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err,
        checked,
    }
}

/// Dilation straight from the set definition: any set pixel within the
/// Chebyshev radius.
pub fn dilate_oracle(m: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let r = radius as isize;
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (xx, yy) = (x + dx, y + dy);
                xx >= 0 && yy >= 0 && xx < w && yy < h && m.get(xx as usize, yy as usize)
            })
        })
    })
}

/// Straightforward evaluator: binarize at each byte level, count, average.
pub struct BruteMetrics {
    pub max_f: f64,
    pub mae: f64,
}

pub fn brute_metrics(preds: &[SaliencyMap], gts: &[BinaryMask]) -> BruteMetrics {
    let n = preds.len() as f64;
    let with_gt = gts.iter().filter(|g| g.count() > 0).count() as f64;
    let mut max_f = f64::NEG_INFINITY;
    for t in 0..256u32 {
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            let (mut tp, mut fp, mut pos) = (0u64, 0u64, 0u64);
            for (&v, &gv) in p.data().iter().zip(g.data()) {
                let on = (v * 255.0).round() as u32 >= t;
                if gv == 1 {
                    pos += 1;
                    if on {
                        tp += 1;
                    }
                } else if on {
                    fp += 1;
                }
            }
            p_sum += if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            if pos > 0 {
                r_sum += tp as f64 / pos as f64;
            }
        }
        let prec = p_sum / n;
        let rec = if with_gt > 0.0 { r_sum / with_gt } else { 0.0 };
        let den = 0.3 * prec + rec;
        let f = if den <= 0.0 {
            0.0
        } else {
            1.3 * prec * rec / den
        };
        max_f = max_f.max(f);
    }
    let mae = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| (v - gv as f64).abs())
                .sum::<f64>()
                / p.data().len() as f64
        })
        .sum::<f64>()
        / n;
    BruteMetrics { max_f, mae }
}

/// A random pair: a prediction mostly on the byte grid with occasional exact
/// 0 and 1, and a random or empty ground truth.
pub fn random_pair(rng: &mut ChaCha8Rng, size: usize) -> (SaliencyMap, BinaryMask) {
    let data: Vec<f64> = (0..size * size)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            2 => rng.gen_range(0.0..1.0),
            _ => rng.gen_range(0..=255) as f64 / 255.0,
        })
        .collect();
    let pred = SaliencyMap::new(size, size, data).unwrap();
    let density = match rng.gen_range(0..5) {
        0 => 0.0,
        _ => rng.gen_range(0.1..0.9),
    };
    let bits = (0..size * size).map(|_| u8::from(rng.gen_bool(density))).collect();
    (pred, BinaryMask::new(size, size, bits).unwrap())
}

mod common;

use std::collections::VecDeque;

use psg_core::dataio::{batch_tensors, generate_synthetic, Sample, SyntheticSpec};
use psg_core::losses::{self, LossConfig, LossKind};
use psg_core::model::{ModelConfig, MsFamConfig};
use psg_core::morphology::{dilate, psg_target, BinaryMask, SaliencyMap, StructuringElement};
use psg_core::ndtensor::{Tape, Tensor};
use psg_core::trainer::{
    decay_epoch, load_model, lr_schedule, Adam, Checkpoint, TrainConfig, Trainer,
};
use psg_core::Error;
use rand::Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        encoder_channels: [4, 4, 6, 8, 8],
        msfam: MsFamConfig {
            feature_dim: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        lr: 1e-3,
        eval_every: 2,
        probe: true,
        model: tiny_model(),
        ..Default::default()
    }
}

fn data(count: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic(&SyntheticSpec {
        count,
        size: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn adam_first_step_on_square() {
    // f(w) = w², w = 1: g = 2, m = 0.2, v = 0.004, bias-corrected m̂ = 2, v̂ = 4
    let lr = 0.01;
    let mut w = vec![Tensor::full(&[1], 1.0)];
    let mut adam = Adam::new(&w);
    adam.update(&mut w, &[Tensor::full(&[1], 2.0)], lr).unwrap();
    let expected = 1.0 - lr * 2.0 / (4.0f64.sqrt() + 1e-8);
    assert!((w[0].data()[0] - expected).abs() < 1e-15);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut w = vec![Tensor::zeros(&[2, 2])];
    let mut adam = Adam::new(&w);
    assert!(adam.update(&mut w, &[Tensor::zeros(&[4])], 0.1).is_err());
}

#[test]
fn decay_starts_at_half() {
    assert_eq!(decay_epoch(99), 50);
    assert_eq!(decay_epoch(2), 1);
    let cfg = TrainConfig {
        epochs: 99,
        lr: 5e-5,
        ..Default::default()
    };
    assert_eq!(lr_schedule(49, &cfg), 5e-5);
    assert!((lr_schedule(50, &cfg) - 5e-6).abs() < 1e-20);
    let flat = TrainConfig {
        lr_decay_factor: 1.0,
        ..cfg
    };
    assert!((0..99).all(|e| lr_schedule(e, &flat) == 5e-5));
}

#[test]
fn loss_on_fixed_batch_decreases() {
    let cfg = TrainConfig {
        lr: 1e-3,
        model: ModelConfig {
            input_size: 32,
            encoder_channels: [8, 8, 16, 16, 16],
            msfam: MsFamConfig {
                feature_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let samples = generate_synthetic(&SyntheticSpec {
        count: 4,
        size: 32,
        ..Default::default()
    })
    .unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let (images, masks) = batch_tensors(&refs, &[false; 4]).unwrap();
    let mut trainer = Trainer::new(cfg, samples.clone(), Vec::new()).unwrap();
    let losses: Vec<f64> = (0..6)
        .map(|_| trainer.step(&images, &masks, None, 1e-3).unwrap().overall)
        .collect();
    for pair in losses.windows(2) {
        assert!(pair[1] < pair[0], "{losses:?}");
    }
}

fn run_logs(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> (Vec<String>, Vec<u8>) {
    let mut t = Trainer::new(cfg.clone(), train.to_vec(), val.to_vec()).unwrap();
    let logs = t.run().unwrap().iter().map(|o| o.log.to_string()).collect();
    (logs, t.checkpoint().to_bytes())
}

#[test]
fn identical_seeds_identical_runs() {
    let (train, val) = (data(7, 1), data(3, 2));
    let cfg = tiny_config(3);
    let a = run_logs(&cfg, &train, &val);
    assert_eq!(a, run_logs(&cfg, &train, &val));
    let other = TrainConfig {
        seed: 2,
        ..cfg
    };
    assert_ne!(a.0, run_logs(&other, &train, &val).0);
}

#[test]
fn validation_follows_schedule() {
    let (train, val) = (data(5, 1), data(2, 2));
    let mut t = Trainer::new(tiny_config(3), train, val).unwrap();
    let out = t.run().unwrap();
    let has_val: Vec<bool> = out.iter().map(|o| o.log.val_mae.is_some()).collect();
    // every second epoch, and always the last
    assert_eq!(has_val, [false, true, true]);
    let probe = out[0].probe.as_ref().unwrap();
    assert_eq!(probe.id, "syn_00000");
    assert!(probe.pgt.data().iter().zip(probe.pred.data()).all(|(g, p)| g + 1e-12 >= 0.0 && *p > 0.0));
    assert!(t.run_epoch().is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let mut t = Trainer::new(tiny_config(2), data(4, 1), Vec::new()).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let (cfg, model) = load_model(&back).unwrap();
    assert_eq!(cfg, *t.config());
    assert_eq!(&model, t.model());

    let mut bytes = ckpt.to_bytes();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn resume_equals_uninterrupted() {
    let (train, val) = (data(7, 3), data(3, 4));
    for refresh in ["step", "epoch"] {
        let mut cfg = tiny_config(4);
        cfg.loss.psg_refresh = refresh.parse().unwrap();
        let (full_logs, full_ckpt) = run_logs(&cfg, &train, &val);

        let mut first = Trainer::new(cfg.clone(), train.clone(), val.clone()).unwrap();
        let mut logs: Vec<String> = (0..2).map(|_| first.run_epoch().unwrap().log.to_string()).collect();
        let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        drop(first);
        let mut resumed = Trainer::resume(&saved, train.clone(), val.clone()).unwrap();
        assert_eq!(resumed.epoch(), 2);
        logs.extend(resumed.run().unwrap().iter().map(|o| o.log.to_string()));

        assert_eq!(logs.join("\n"), full_logs.join("\n"), "{refresh}");
        assert_eq!(resumed.checkpoint().to_bytes(), full_ckpt, "{refresh}");
    }
}

#[test]
fn empty_training_set_rejected() {
    assert!(matches!(
        Trainer::new(tiny_config(1), Vec::new(), Vec::new()),
        Err(Error::Dataset(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..tiny_config(1)
    };
    assert!(matches!(Trainer::new(bad, data(2, 1), Vec::new()), Err(Error::Config(_))));
}

/// Gradient norm with respect to the prediction itself.
fn pred_grad_norm(pred: &Tensor, masks: &Tensor, main: bool) -> f64 {
    let cfg = LossConfig {
        main_kind: LossKind::Hybrid,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let p = tape.param(pred.clone());
    let loss = if main {
        losses::overall(&mut tape, p, masks, &cfg, None).unwrap().0
    } else {
        losses::psg_aux(&mut tape, p, masks, &cfg).unwrap()
    };
    tape.backward(loss).unwrap();
    tape.grad(p).unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn main_loss_lifts_a_zero_prediction() {
    let samples = data(2, 5);
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, masks) = batch_tensors(&refs, &[false, false]).unwrap();
    let zero = Tensor::zeros(masks.shape());
    // the target built from a zero map is zero, so the auxiliary term alone
    // gives nothing to descend on
    assert_eq!(pred_grad_norm(&zero, &masks, false), 0.0);
    assert!(pred_grad_norm(&zero, &masks, true) > 1e-3);

    // and a model trained with the main term moves off the zero map
    let mut cfg = tiny_config(1);
    cfg.probe = false;
    let mut ckpt = Trainer::new(cfg, samples.clone(), Vec::new()).unwrap().checkpoint();
    let bias = ckpt.arrays.iter_mut().find(|(n, _)| n == "param/dec.out.bias").unwrap();
    bias.1.data_mut()[0] = -8.0;
    let mut t = Trainer::resume(&ckpt, samples.clone(), Vec::new()).unwrap();
    let (images, _) = batch_tensors(&refs, &[false, false]).unwrap();
    let before = t.model().predict(&images).unwrap().data().iter().sum::<f64>();
    for _ in 0..5 {
        t.step(&images, &masks, None, 1e-2).unwrap();
    }
    let after = t.model().predict(&images).unwrap().data().iter().sum::<f64>();
    assert!(after > 2.0 * before, "{before} -> {after}");
}

fn se3() -> StructuringElement {
    StructuringElement::square(3).unwrap()
}

/// Ground-truth pixels 8-connected within the mask to a seed pixel.
fn flood(gt: &BinaryMask, seeds: &BinaryMask) -> BinaryMask {
    let (w, h) = (gt.width(), gt.height());
    let mut out = BinaryMask::zeros(w, h);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if seeds.get(x, y) && gt.get(x, y) {
                out.set(x, y, true);
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if gt.get(nx, ny) && !out.get(nx, ny) {
                    out.set(nx, ny, true);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    out
}

fn support(m: &SaliencyMap) -> BinaryMask {
    BinaryMask::from_fn(m.width(), m.height(), |x, y| m.get(x, y) > 0.0)
}

/// Iterates the target on its own output; returns the iteration count at
/// which it stopped changing.
fn iterate_to_fixed_point(pred: &SaliencyMap, gt: &BinaryMask, limit: usize) -> (SaliencyMap, usize) {
    let mut cur = psg_target(pred, gt, se3()).unwrap();
    for i in 1..=limit {
        let next = psg_target(&cur, gt, se3()).unwrap();
        assert!(support(&cur).is_subset_of(&support(&next)), "support shrank");
        assert!(next.data().iter().zip(cur.data()).all(|(a, b)| a >= b));
        if next == cur {
            return (cur, i);
        }
        cur = next;
    }
    (cur, limit + 1)
}

#[test]
fn iterated_target_grows_to_connected_closure() {
    let mut r = common::rng(17);
    let n = 24;
    for trial in 0..200 {
        let (cx, cy) = (r.gen_range(6.0..18.0), r.gen_range(6.0..18.0));
        let (rx, ry) = (r.gen_range(2.0..10.0), r.gen_range(2.0..10.0));
        let rect = trial % 2 == 0;
        let gt = BinaryMask::from_fn(n, n, |x, y| {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if rect {
                dx.abs().max(dy.abs()) <= 1.0
            } else {
                dx * dx + dy * dy <= 1.0
            }
        });
        let pred = SaliencyMap::new(
            n,
            n,
            (0..n * n)
                .map(|_| if r.gen_bool(0.01) { r.gen_range(0.1..1.0) } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let (fixed, iters) = iterate_to_fixed_point(&pred, &gt, n);
        assert!(iters <= n, "trial {trial}: {iters} iterations");
        let seeds = dilate(&support(&pred), se3());
        assert_eq!(support(&fixed), flood(&gt, &seeds), "trial {trial}");
    }
}

#[test]
fn serpentine_mask_needs_more_than_side_iterations() {
    // a one-pixel corridor snaking through a 9×9 grid: its geodesic length is
    // far longer than the side, so the bound needs convex shapes
    let n = 9;
    let gt = BinaryMask::from_fn(n, n, |x, y| match y % 4 {
        0 | 2 => true,
        1 => x == n - 1,
        _ => x == 0,
    });
    let mut seed = vec![0.0; n * n];
    seed[0] = 1.0;
    let pred = SaliencyMap::new(n, n, seed).unwrap();
    let (fixed, iters) = iterate_to_fixed_point(&pred, &gt, 10 * n);
    assert!(iters > n);
    assert_eq!(support(&fixed), gt);
}

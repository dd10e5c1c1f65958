mod common;

use common::dilate_oracle;
use proptest::prelude::*;
use psg_core::morphology::{
    close, dilate, erode, erode_with, max_filter, postprocess_close, psg_target, BinaryMask,
    Border, SaliencyMap, StructuringElement,
};
use psg_core::ndtensor::{Tape, Tensor};

fn se(side: usize) -> StructuringElement {
    StructuringElement::square(side).unwrap()
}

fn all_4x4() -> impl Iterator<Item = BinaryMask> {
    (0u64..1 << 16).map(|code| BinaryMask::from_bits(4, 4, code))
}

/// Closing from its window characterization: a pixel survives iff every
/// element placement covering it, anywhere on the plane, touches the mask.
fn close_oracle(m: &BinaryMask, side: usize) -> BinaryMask {
    let r = (side / 2) as isize;
    let (w, h) = (m.width() as isize, m.height() as isize);
    let hits = |cx: isize, cy: isize| {
        (cy - r..=cy + r).any(|y| {
            (cx - r..=cx + r).any(|x| {
                x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize)
            })
        })
    };
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        (y - r..=y + r).all(|cy| (x - r..=x + r).all(|cx| hits(cx, cy)))
    })
}

/// Erosion with the outside counted as unset.
fn erode_oracle(m: &BinaryMask, radius: usize) -> BinaryMask {
    let r = radius as isize;
    let (w, h) = (m.width() as isize, m.height() as isize);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        (y - r..=y + r).all(|yy| {
            (x - r..=x + r).all(|xx| {
                xx >= 0 && yy >= 0 && xx < w && yy < h && m.get(xx as usize, yy as usize)
            })
        })
    })
}

fn maxpool_dilate(m: &BinaryMask, side: usize) -> BinaryMask {
    let mut t = Tape::new();
    let x = t.constant(
        Tensor::new(
            &[1, 1, m.height(), m.width()],
            m.data().iter().map(|&b| b as f64).collect(),
        )
        .unwrap(),
    );
    let y = t.maxpool2d(x, side, 1, side / 2).unwrap();
    let bits = t.value(y).data().iter().map(|&v| u8::from(v > 0.5)).collect();
    BinaryMask::new(m.width(), m.height(), bits).unwrap()
}

#[test]
fn exhaustive_dilation_matches_set_definition() {
    for m in all_4x4() {
        let oracle = dilate_oracle(&m, 1);
        assert_eq!(maxpool_dilate(&m, 3), oracle);
        assert_eq!(dilate(&m, se(3)), oracle);
        let filtered = max_filter(m.to_saliency().data(), 4, 4, se(3));
        assert!(filtered
            .iter()
            .zip(oracle.data())
            .all(|(&v, &b)| v == b as f64));
    }
}

#[test]
fn exhaustive_closing_properties() {
    for m in all_4x4() {
        for side in [3, 5] {
            let c = close(&m, se(side));
            assert!(m.is_subset_of(&c), "not extensive");
            assert_eq!(close(&c, se(side)), c, "not idempotent");
            assert_eq!(c, close_oracle(&m, side));
        }
    }
}

#[test]
fn exhaustive_duality() {
    for m in all_4x4() {
        assert_eq!(erode_with(&m, se(3), Border::One), dilate(&m.not(), se(3)).not());
        assert_eq!(erode_with(&m, se(3), Border::Zero), erode_oracle(&m, 1));
    }
}

#[test]
fn erosion_clears_border_ring() {
    let m = BinaryMask::ones(6, 5);
    let e = erode(&m, se(3));
    assert_eq!(e.count(), 4 * 3);
    assert!(!e.get(0, 2) && e.get(1, 1));
}

#[test]
fn closing_a_point_is_the_point() {
    let mut m = BinaryMask::zeros(11, 11);
    m.set(5, 5, true);
    assert_eq!(close(&m, se(3)), m);
    assert_eq!(erode(&dilate(&m, se(3)), se(3)), m);
}

#[test]
fn postprocess_matches_binarize_then_close_oracle() {
    let mut r = common::rng(3);
    for _ in 0..200 {
        let (pred, _) = common::random_pair(&mut r, 8);
        for side in [1, 3, 5] {
            let bin = pred.threshold(0.5);
            assert_eq!(postprocess_close(&pred, se(side), 0.5), close_oracle(&bin, side));
        }
    }
}

fn map_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n * n)
}

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, n * n)
}

proptest! {
    #[test]
    fn psg_target_invariants(
        p in map_strategy(6),
        bump in map_strategy(6),
        g in mask_strategy(6),
        side in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let pred = SaliencyMap::new(6, 6, p.clone()).unwrap();
        let gt = BinaryMask::new(6, 6, g).unwrap();
        let pgt = psg_target(&pred, &gt, se(side)).unwrap();
        let higher: Vec<f64> = p.iter().zip(&bump).map(|(a, b)| a.max(*b)).collect();
        let pgt_hi = psg_target(&SaliencyMap::new(6, 6, higher).unwrap(), &gt, se(side)).unwrap();
        for i in 0..36 {
            let (v, gv) = (pgt.data()[i], gt.data()[i] as f64);
            prop_assert!((0.0..=gv).contains(&v));
            prop_assert!(v >= pred.data()[i] * gv);
            prop_assert!(pgt_hi.data()[i] >= v);
        }
    }

    #[test]
    fn soft_dilation_is_maxpool(p in map_strategy(5)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, 5, 5], p.clone()).unwrap());
        let y = t.maxpool2d(x, 3, 1, 1).unwrap();
        prop_assert_eq!(t.value(y).data(), &max_filter(&p, 5, 5, se(3))[..]);
    }
}

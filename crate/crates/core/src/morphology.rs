//! Binary morphology on square structuring elements and the soft
//! dilate-then-intersect target used by the PSG auxiliary loss.

use crate::error::{Error, Result};
use crate::ndtensor::{maxpool_plane, Tensor};

/// Width×height grid of {0,1}, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{width}x{height} mask needs {} values, got {}", width * height, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::shape("mask", format!("mask value {v} is not 0 or 1")));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| u8::from(f(x, y)))
            .collect();
        BinaryMask {
            width,
            height,
            data,
        }
    }

    /// Bits of `code` in row-major order, least significant first.
    pub fn from_bits(width: usize, height: usize, code: u64) -> Self {
        Self::from_fn(width, height, |x, y| code >> (y * width + x) & 1 == 1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn not(&self) -> Self {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Elementwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn hflip(&self) -> Self {
        let data = self
            .data
            .chunks(self.width)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        BinaryMask { data, ..*self }
    }
}

/// Width×height grid of reals in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "saliency map",
                format!("{width}x{height} map needs {} values, got {}", width * height, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(
                "saliency map",
                format!("value {v} outside [0, 1]"),
            ));
        }
        Ok(SaliencyMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        SaliencyMap {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_size<T: Sized2d>(&self, other: &T) -> bool {
        self.width == other.dims().0 && self.height == other.dims().1
    }

    /// Converts a 1×1×H×W (or H×W) tensor into a map, clamping into [0,1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match *s {
            [1, 1, h, w] | [h, w] => (h, w),
            _ => {
                return Err(Error::shape(
                    "saliency map",
                    format!("cannot read a map out of {s:?}"),
                ))
            }
        };
        Ok(SaliencyMap {
            width: w,
            height: h,
            data: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("sized")
    }

    pub fn hflip(&self) -> Self {
        let data = self
            .data
            .chunks(self.width)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        SaliencyMap { data, ..*self }
    }

    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v >= t)).collect(),
        }
    }
}

pub trait Sized2d {
    fn dims(&self) -> (usize, usize);
}

impl Sized2d for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Sized2d for SaliencyMap {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Square all-ones structuring element with odd side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    side: usize,
}

impl StructuringElement {
    pub fn square(side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::Config(format!(
                "structuring element side must be odd and >= 1, got {side}"
            )));
        }
        Ok(StructuringElement { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }
}

/// Value assumed for pixels outside the grid during erosion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    Zero,
    One,
}

fn window_any(m: &BinaryMask, se: StructuringElement, x: usize, y: usize, want: u8) -> bool {
    let r = se.radius();
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(m.width - 1));
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(m.height - 1));
    (y0..=y1).any(|yy| (x0..=x1).any(|xx| m.data[yy * m.width + xx] == want))
}

fn window_clipped(m: &BinaryMask, se: StructuringElement, x: usize, y: usize) -> bool {
    let r = se.radius();
    x < r || y < r || x + r >= m.width || y + r >= m.height
}

/// A pixel is set iff any pixel under the element is set. Outside counts as 0.
pub fn dilate(m: &BinaryMask, se: StructuringElement) -> BinaryMask {
    BinaryMask::from_fn(m.width, m.height, |x, y| window_any(m, se, x, y, 1))
}

/// A pixel is set iff every pixel under the element is set. Outside counts as 0,
/// so the border ring is always cleared for sides above 1.
pub fn erode(m: &BinaryMask, se: StructuringElement) -> BinaryMask {
    erode_with(m, se, Border::Zero)
}

pub fn erode_with(m: &BinaryMask, se: StructuringElement, border: Border) -> BinaryMask {
    BinaryMask::from_fn(m.width, m.height, |x, y| {
        if border == Border::Zero && window_clipped(m, se, x, y) {
            return false;
        }
        !window_any(m, se, x, y, 0)
    })
}

/// Dilation followed by erosion on the unbounded plane with a zero background:
/// the mask is padded by the element radius so the erosion never reads past
/// the dilated support, then cropped back. The result is extensive and
/// idempotent, and never grows toward the image border.
pub fn close(m: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let r = se.radius();
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width + 2 * r, m.height + 2 * r);
    let padded = BinaryMask::from_fn(w, h, |x, y| {
        x >= r && y >= r && x < m.width + r && y < m.height + r && m.get(x - r, y - r)
    });
    let closed = erode_with(&dilate(&padded, se), se, Border::One);
    BinaryMask::from_fn(m.width, m.height, |x, y| closed.get(x + r, y + r))
}

/// Stride-1, same-size max filter over a row-major plane; outside is ignored.
pub fn max_filter(values: &[f64], width: usize, height: usize, se: StructuringElement) -> Vec<f64> {
    let k = se.side();
    maxpool_plane(values, height, width, k, 1, se.radius(), height, width).0
}

/// PSG target: max-pool dilation of the prediction intersected with the
/// ground truth (elementwise product with the binary mask).
pub fn psg_target(
    pred: &SaliencyMap,
    gt: &BinaryMask,
    se: StructuringElement,
) -> Result<SaliencyMap> {
    if !pred.same_size(gt) {
        return Err(Error::shape(
            "psg_target",
            format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.width, pred.height, gt.width, gt.height
            ),
        ));
    }
    let dilated = max_filter(&pred.data, pred.width, pred.height, se);
    let data = dilated
        .iter()
        .zip(&gt.data)
        .map(|(&d, &g)| d * g as f64)
        .collect();
    Ok(SaliencyMap {
        width: pred.width,
        height: pred.height,
        data,
    })
}

/// Batched PSG target over B×1×H×W prediction and ground-truth tensors.
pub fn psg_target_batch(pred: &Tensor, gt: &Tensor, se: StructuringElement) -> Result<Tensor> {
    let [n, c, h, w] = pred.dims4("psg_target")?;
    if pred.shape() != gt.shape() || c != 1 {
        return Err(Error::shape(
            "psg_target",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        let dilated = max_filter(&pred.data()[i * plane..(i + 1) * plane], w, h, se);
        let g = &gt.data()[i * plane..(i + 1) * plane];
        out.extend(dilated.iter().zip(g).map(|(d, g)| d * g));
    }
    Tensor::new(pred.shape(), out)
}

/// Post-processing baseline: binarize at `threshold`, then close.
pub fn postprocess_close(
    pred: &SaliencyMap,
    se: StructuringElement,
    threshold: f64,
) -> BinaryMask {
    close(&pred.threshold(threshold), se)
}

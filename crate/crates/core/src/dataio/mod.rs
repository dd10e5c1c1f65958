//! Image and mask ingestion, resizing, flipping, the on-disk dataset layout
//! and a synthetic dataset of shapes with background-textured interiors.
//!
//! Layout: `<root>/images/<id>.ppm`, `<root>/masks/<id>.pgm`, and
//! `<root>/list.txt` with one id per line fixing the order.

pub mod pnm;
mod synthetic;

pub use synthetic::{generate_synthetic, ShapeKind, SyntheticSpec};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::morphology::{BinaryMask, SaliencyMap};
use crate::ndtensor::{bilinear_plane, bilinear_taps, Tensor};
use crate::par;
use pnm::{Pnm, PnmKind};

/// Threshold applied to mask bytes on load.
pub const MASK_THRESHOLD: u8 = 128;

/// Width×height RGB image with channel values in [0,1], stored interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB image needs {} values", width * height * 3),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
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

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major planes, as the model consumes them.
    pub fn to_planes(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.to_planes()).expect("sized")
    }

    pub fn hflip(&self) -> Self {
        let data = self
            .data
            .chunks(3 * self.width)
            .flat_map(|row| row.chunks_exact(3).rev().flatten().copied())
            .collect();
        Image { data, ..*self }
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let planes = self.to_planes();
        let (n_in, n_out) = (self.width * self.height, width * height);
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut out_planes = vec![0.0; 3 * n_out];
        for c in 0..3 {
            bilinear_plane(
                &planes[c * n_in..(c + 1) * n_in],
                self.width,
                &ys,
                &xs,
                &mut out_planes[c * n_out..(c + 1) * n_out],
            );
        }
        let mut data = vec![0.0; 3 * n_out];
        for i in 0..n_out {
            for c in 0..3 {
                data[3 * i + c] = out_planes[c * n_out + i];
            }
        }
        Image {
            width,
            height,
            data,
        }
    }
}

/// Bilinear resize of a single-channel map (align-corners=false).
pub fn resize_map(map: &SaliencyMap, width: usize, height: usize) -> SaliencyMap {
    if (width, height) == (map.width(), map.height()) {
        return map.clone();
    }
    let ys = bilinear_taps(map.height(), height);
    let xs = bilinear_taps(map.width(), width);
    let mut out = vec![0.0; width * height];
    bilinear_plane(map.data(), map.width(), &ys, &xs, &mut out);
    SaliencyMap::new(width, height, out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .expect("sized")
}

/// An image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: BinaryMask) -> Result<Self> {
        if (image.width, image.height) != (mask.width(), mask.height()) {
            return Err(Error::shape(
                "sample",
                format!(
                    "image is {}x{}, mask is {}x{}",
                    image.width,
                    image.height,
                    mask.width(),
                    mask.height()
                ),
            ));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn hflip(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.hflip(),
            mask: self.mask.hflip(),
        }
    }

    /// Resizes to `target`×`target`; the mask is interpolated and re-thresholded at 0.5.
    pub fn resize(&self, target: usize) -> Sample {
        let mask = resize_map(&self.mask.to_saliency(), target, target).threshold(0.5);
        Sample {
            id: self.id.clone(),
            image: self.image.resize(target, target),
            mask,
        }
    }
}

/// Stacks samples into a B×3×H×W image tensor and a B×1×H×W mask tensor,
/// flipping the items whose flag is set.
pub fn batch_tensors(samples: &[&Sample], flips: &[bool]) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (s, &flip) in samples.iter().zip(flips) {
        let (img, mask) = if flip {
            (s.image.hflip(), s.mask.hflip())
        } else {
            (s.image.clone(), s.mask.clone())
        };
        images.push(Tensor::new(&[3, img.height, img.width], img.to_planes())?);
        masks.push(mask.to_saliency().to_tensor().reshape(&[1, img.height, img.width])?);
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

fn from_gray<'a>(p: &'a Pnm, path: &Path) -> Result<&'a [u8]> {
    if p.kind != PnmKind::Gray {
        return Err(Error::PnmHeader {
            path: path.to_path_buf(),
            reason: "expected a P5 grayscale file".into(),
        });
    }
    Ok(&p.pixels)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let p = pnm::read(path)?;
    let data = match p.kind {
        PnmKind::Rgb => p.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        PnmKind::Gray => p
            .pixels
            .iter()
            .flat_map(|&b| [b as f64 / 255.0; 3])
            .collect(),
    };
    Image::new(p.width, p.height, data)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let p = pnm::read(path)?;
    let px = from_gray(&p, path)?;
    BinaryMask::new(
        p.width,
        p.height,
        px.iter().map(|&b| u8::from(b >= MASK_THRESHOLD)).collect(),
    )
}

pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let p = pnm::read(path)?;
    let px = from_gray(&p, path)?;
    SaliencyMap::new(p.width, p.height, px.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn save_saliency(map: &SaliencyMap, path: &Path) -> Result<()> {
    pnm::write(
        &Pnm {
            kind: PnmKind::Gray,
            width: map.width(),
            height: map.height(),
            pixels: map.data().iter().map(|&v| pnm::to_byte(v)).collect(),
        },
        path,
    )
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    pnm::write(
        &Pnm {
            kind: PnmKind::Gray,
            width: mask.width(),
            height: mask.height(),
            pixels: mask.data().iter().map(|&v| v * 255).collect(),
        },
        path,
    )
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    pnm::write(
        &Pnm {
            kind: PnmKind::Rgb,
            width: img.width,
            height: img.height,
            pixels: img.data.iter().map(|&v| pnm::to_byte(v)).collect(),
        },
        path,
    )
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.ppm"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.pgm"))
}

pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    for s in samples {
        save_image(&s.image, &image_path(root, &s.id))?;
        save_mask(&s.mask, &mask_path(root, &s.id))?;
    }
    let list: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    let list_path = root.join("list.txt");
    fs::write(&list_path, list).map_err(|e| Error::io(format!("writing {}", list_path.display()), e))
}

pub fn read_list(root: &Path) -> Result<Vec<String>> {
    let list_path = root.join("list.txt");
    let text = fs::read_to_string(&list_path)
        .map_err(|e| Error::io(format!("reading {}", list_path.display()), e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Dataset(format!("{} lists no samples", list_path.display())));
    }
    Ok(ids)
}

/// Loads every sample named in `list.txt`, in list order.
pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    let ids = read_list(root)?;
    par::map_slice(&ids, |id| {
        let image = load_image(&image_path(root, id))?;
        let mask = load_mask(&mask_path(root, id))?;
        Sample::new(id.clone(), image, mask)
    })
    .into_iter()
    .collect()
}

//! PNG image/mask pairs on disk, and conversions between PNG and tensors.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::Result;
use crate::imageops::{resize_bilinear, resize_nearest};
use crate::mask::BitMask;
use crate::tensor::Tensor;

/// Mask pixels strictly above this 8-bit value are foreground.
pub const MASK_BINARIZE_LEVEL: u8 = 128;

/// `[3, h, w]` in `[0, 1]` from any decoded image.
pub fn image_to_tensor(img: &DynamicImage) -> Tensor {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = p[ch] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("decoded images are non-empty")
}

pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn image_to_mask(img: &DynamicImage) -> BitMask {
    let g = img.to_luma8();
    BitMask::from_fn(g.height() as usize, g.width() as usize, |r, c| {
        g.get_pixel(c as u32, r as u32)[0] > MASK_BINARIZE_LEVEL
    })
}

pub fn mask_to_gray(mask: &BitMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<DynamicImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub name: String,
    pub image: Tensor,
    pub gt: BitMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

/// Loads every `name.png` / `name_mask.png` pair in `dir`, resized to
/// `side x side`. Problems with individual files are collected in the
/// rejects list instead of failing the whole load.
pub fn load_pair_dataset(dir: &Path, side: usize) -> Result<(Vec<PairSample>, Vec<Reject>)> {
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        match stem.strip_suffix("_mask") {
            Some(base) => masks.insert(base.to_owned(), path),
            None => images.insert(stem, path),
        };
    }
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    for (name, mpath) in &masks {
        if !images.contains_key(name) {
            rejects.push(Reject { path: mpath.clone(), reason: "mask without image".into() });
        }
    }
    for (name, ipath) in images {
        let Some(mpath) = masks.get(&name) else {
            rejects.push(Reject { path: ipath, reason: "image without mask".into() });
            continue;
        };
        let loaded = (|| -> Result<(Tensor, BitMask)> {
            let img = image::open(&ipath)?;
            let m = image::open(mpath)?;
            Ok((image_to_tensor(&img), image_to_mask(&m)))
        })();
        let (img, gt) = match loaded {
            Ok(v) => v,
            Err(e) => {
                rejects.push(Reject { path: ipath, reason: e.to_string() });
                continue;
            }
        };
        if gt.is_empty() {
            rejects.push(Reject { path: mpath.clone(), reason: "empty mask".into() });
            continue;
        }
        let gt = resize_nearest(&gt, side, side);
        if gt.is_empty() {
            rejects.push(Reject { path: mpath.clone(), reason: "mask vanishes after resize".into() });
            continue;
        }
        samples.push(PairSample {
            name,
            image: resize_bilinear(&img, side, side),
            gt,
        });
    }
    Ok((samples, rejects))
}

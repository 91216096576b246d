use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Mask pixels above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// `<root>/images` and `<root>/masks`, matched by file stem.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
}

impl DatasetLayout {
    pub fn from_root(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self {
            images_dir: root.join("images"),
            masks_dir: root.join("masks"),
        }
    }
}

/// Maps `v` to `v / 255`.
pub fn normalize(raw: &[u8], shape: &[usize]) -> Result<Tensor<f32>> {
    Tensor::new(
        shape.to_vec(),
        raw.iter().map(|&v| f32::from(v) / 255.0).collect(),
    )
}

fn list_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::path(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::path(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some(e) if EXTENSIONS.contains(&e)) || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_owned(), path.clone()) {
            return Err(Error::Dataset(format!(
                "two files share the id `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Matched `(id, image path, mask path)` triples in id order.
pub fn list_pairs(layout: &DatasetLayout) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images = list_dir(&layout.images_dir)?;
    let mut masks = list_dir(&layout.masks_dir)?;
    let mut pairs = Vec::with_capacity(images.len());
    let mut orphan_images = Vec::new();
    for (id, image) in images {
        match masks.remove(&id) {
            Some(mask) => pairs.push((id, image, mask)),
            None => orphan_images.push(id),
        }
    }
    let orphan_masks: Vec<String> = masks.into_keys().collect();
    if !orphan_images.is_empty() || !orphan_masks.is_empty() {
        return Err(Error::Unmatched {
            images_without_masks: orphan_images,
            masks_without_images: orphan_masks,
        });
    }
    Ok(pairs)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::path(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::path(path, e))?
        .decode()
        .map_err(|source| Error::Decode {
            path: path.to_owned(),
            source,
        })
}

fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0u8; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px.0[c];
        }
    }
    normalize(&planar, &[3, h, w])
}

fn mask_to_tensor(img: &GrayImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p.0[0] > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Decodes one RGB image, resized (bilinear) to `side`×`side`.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let mut img = decode(path)?.to_rgb8();
    let side = side as u32;
    if img.width() != side || img.height() != side {
        img = imageops::resize(&img, side, side, FilterType::Triangle);
    }
    rgb_to_tensor(&img)
}

fn load_mask(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let mut img = decode(path)?.to_luma8();
    let side = side as u32;
    if img.width() != side || img.height() != side {
        img = imageops::resize(&img, side, side, FilterType::Nearest);
    }
    mask_to_tensor(&img)
}

/// Loads every matched pair, resizing images bilinearly and masks by nearest
/// neighbour, then binarizing masks at `> 127`.
pub fn load_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    target_side: usize,
) -> Result<Vec<Sample>> {
    if target_side == 0 {
        return Err(Error::InvalidArgument(
            "target side must be positive".into(),
        ));
    }
    let layout = DatasetLayout {
        images_dir: images_dir.to_owned(),
        masks_dir: masks_dir.to_owned(),
    };
    list_pairs(&layout)?
        .into_iter()
        .map(|(id, image, mask)| {
            let image = load_image(&image, target_side)?;
            let mask = load_mask(&mask, target_side)?;
            Sample::new(id, image, mask)
        })
        .collect()
}

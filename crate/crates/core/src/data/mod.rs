//! Dataset ingestion: manifests, split protocols, depth encoding, image
//! preprocessing and the synthetic task generator.

pub mod depth;
pub mod manifest;
pub mod split;
pub mod synth;

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};
use ndarray::Array2;

pub use depth::{colorize_depth, fill_holes, surface_normals, DEFAULT_PIXEL_SIZE};
pub use manifest::{SampleManifest, SampleRecord, DATA_ROOT_ENV};
pub use split::{
    linemod_split, nyu_class_remap, parse_split_file, rod_split, LabelRemap, LeaveOut, Split, OTHER_LABEL,
};
pub use synth::{synth_task, Difficulty, SynthDataset, SynthSpec};

use crate::error::{Error, Result};
use crate::metrics::Rotation;
use crate::model::{Setting, TaskKind};
use crate::tensor::Tensor;

/// 16-bit depth image in millimetres; 0 marks a hole.
pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Late-fusion feature layout: RGB block first, then depth.
pub fn fuse_rgbd(features_rgb: &[f64], features_depth: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(features_rgb.len() + features_depth.len());
    out.extend_from_slice(features_rgb);
    out.extend_from_slice(features_depth);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// One `[C, S, S]` tensor per backbone branch.
    pub inputs: Vec<Tensor>,
    pub label: usize,
    pub rotation: Option<Rotation>,
}

/// Preprocessed samples ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub samples: Vec<Sample>,
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub rotations: Vec<Option<Rotation>>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let first = indices.first().ok_or(Error::Empty("batch"))?;
        let branches = self.samples[*first].inputs.len();
        let inputs = (0..branches)
            .map(|b| {
                let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].inputs[b]).collect();
                Tensor::stack(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            inputs,
            labels: indices.iter().map(|&i| self.samples[i].label).collect(),
            rotations: indices.iter().map(|&i| self.samples[i].rotation).collect(),
        })
    }

    /// First `n` samples, in order.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            kind: self.kind,
            labels: self.labels.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

/// Center crop to a square, bilinear resize to `size`, scale to
/// `[-0.5, 0.5]`; returns `[3, size, size]`.
pub fn rgb_to_tensor(img: &RgbImage, size: usize) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let side = w.min(h);
    let crop = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == size {
        crop
    } else {
        image::imageops::resize(&crop, size as u32, size as u32, image::imageops::FilterType::Triangle)
    };
    let mut data = vec![0.0; 3 * size * size];
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[c * size * size + y as usize * size + x as usize] = p.0[c] as f64 / 255.0 - 0.5;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

pub fn depth_image_to_meters(img: &DepthImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 1000.0
    })
}

/// Normal-encoded depth as a `[3, size, size]` network input.
pub fn depth_to_tensor(depth_m: &Array2<f64>, size: usize, pixel_size: f64) -> Result<Tensor> {
    rgb_to_tensor(&colorize_depth(depth_m, pixel_size)?, size)
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::DatasetMissing(path.to_owned()));
    }
    Ok(image::open(path)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn load_depth(path: &Path) -> Result<DepthImage> {
    match open(path)? {
        DynamicImage::ImageLuma16(img) => Ok(img),
        _ => Err(Error::Parse(format!(
            "{}: depth must be a 16-bit grayscale PNG in millimetres",
            path.display()
        ))),
    }
}

/// Network inputs of one sample for `setting`.
pub fn sample_inputs(
    setting: Setting,
    rgb: impl FnOnce() -> Result<RgbImage>,
    depth: impl FnOnce() -> Result<DepthImage>,
    size: usize,
    pixel_size: f64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut rgb = Some(rgb);
    let mut depth = Some(depth);
    for name in setting.branch_names() {
        match *name {
            "rgb" => out.push(rgb_to_tensor(&(rgb.take().expect("one rgb branch"))()?, size)?),
            _ => {
                let d = (depth.take().expect("one depth branch"))()?;
                out.push(depth_to_tensor(&depth_image_to_meters(&d), size, pixel_size)?);
            }
        }
    }
    Ok(out)
}

/// Loads and preprocesses every record of `manifest`, resolving paths
/// against `root`.
pub fn load_dataset(manifest: &SampleManifest, root: &Path, setting: Setting, size: usize) -> Result<Dataset> {
    let samples = manifest
        .records
        .iter()
        .map(|r| {
            let inputs = sample_inputs(
                setting,
                || load_rgb(&root.join(&r.rgb_path)),
                || load_depth(&root.join(&r.depth_path)),
                size,
                DEFAULT_PIXEL_SIZE,
            )?;
            Ok(Sample {
                id: r.id.clone(),
                inputs,
                label: manifest.class_index(&r.class_label).expect("validated manifest"),
                rotation: r.rotation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind: manifest.task_kind,
        labels: manifest.labels.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_order_and_size() {
        let f = fuse_rgbd(&[1.0; 512], &[2.0; 512]);
        assert_eq!(f.len(), 1024);
        assert_eq!((f[0], f[511], f[512]), (1.0, 1.0, 2.0));
        assert!(fuse_rgbd(&[0.0; 3], &[0.0; 2]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rgb_tensor_crops_and_scales() {
        let img = RgbImage::from_fn(6, 4, |x, _| image::Rgb([if x == 0 { 0 } else { 255 }, 0, 255]));
        let t = rgb_to_tensor(&img, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        // Column 0 was cropped away.
        assert!(t.data()[..16].iter().all(|v| *v == 0.5));
        assert!(t.data()[16..32].iter().all(|v| *v == -0.5));
    }

    #[test]
    fn missing_files_are_reported() {
        let err = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::DatasetMissing(_)));
    }
}

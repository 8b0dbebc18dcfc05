//! Deterministic synthetic RGB-D tasks for desk-scale runs.
//!
//! Classification samples show one textured object on a noisy background:
//! the class fixes the object's hue and the orientation of its stripes (in
//! hard mode pairs of classes share a hue, so the stripes matter). Pose
//! samples show an asymmetric planar marker tilted out of the image plane
//! (and, in hard mode, also turned within it) by the sample's rotation,
//! shaded by its normal. Depth is a tilted background plane with the
//! object raised towards the camera (stripes carved into classification
//! objects, the marker's own slope for pose samples).

use std::path::{Path, PathBuf};

use image::{Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{SampleManifest, SampleRecord};
use super::{depth_image_to_meters, depth_to_tensor, rgb_to_tensor, Dataset, DepthImage, Sample, DEFAULT_PIXEL_SIZE};
use crate::error::{Error, Result};
use crate::metrics::Rotation;
use crate::model::{Setting, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub task_kind: TaskKind,
    #[serde(default = "default_difficulty")]
    pub difficulty: Difficulty,
}

fn default_difficulty() -> Difficulty {
    Difficulty::Easy
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::InvalidValue(
                "synthetic tasks need at least 2 classes and 1 sample per class".into(),
            ));
        }
        if !(8..=256).contains(&self.image_size) {
            return Err(Error::InvalidValue(format!(
                "synthetic image size must be in 8..=256, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub rgb: RgbImage,
    pub depth: DepthImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: SampleManifest,
    pub samples: Vec<SynthSample>,
}

/// Hue-spread palette in linear RGB.
fn palette(i: usize, n: usize) -> [f64; 3] {
    let h = i as f64 / n as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng, noise: f64) -> Self {
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.55));
        let n = Normal::new(0.0, noise).expect("valid sigma");
        let base = rng.random_range(0.9..1.1);
        let (tx, ty) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        let px = DEFAULT_PIXEL_SIZE;
        let mut rgb = Vec::with_capacity(size * size);
        let mut depth = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                rgb.push(tint.map(|t| t + n.sample(rng)));
                depth.push(base + tx * x as f64 * px + ty * y as f64 * px);
            }
        }
        Self { size, rgb, depth }
    }

    fn into_images(self, rng: &mut ChaCha8Rng, hole_rate: f64) -> (RgbImage, DepthImage) {
        let s = self.size as u32;
        let rgb = RgbImage::from_fn(s, s, |x, y| {
            let p = self.rgb[(y * s + x) as usize];
            Rgb(p.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let mut depth = DepthImage::new(s, s);
        for y in 0..s {
            for x in 0..s {
                let hole = rng.random_bool(hole_rate);
                let mm = (self.depth[(y * s + x) as usize] * 1000.0).round().clamp(1.0, 65535.0) as u16;
                depth.put_pixel(x, y, Luma([if hole { 0 } else { mm }]));
            }
        }
        (rgb, depth)
    }
}

/// One textured object: the class picks hue and stripe orientation.
fn render_object(c: &mut Canvas, rng: &mut ChaCha8Rng, class: usize, spec: &SynthSpec) {
    let k = spec.num_classes;
    let (n_colors, jitter, n_orient) = match spec.difficulty {
        Difficulty::Easy => (k, 0.03, 1),
        Difficulty::Hard => (k.div_ceil(2), 0.10, 2),
    };
    let hue = class % n_colors;
    let orient = (class / n_colors) % n_orient.max(1);
    let base = palette(hue, n_colors);
    let color: [f64; 3] = base.map(|v| v + rng.random_range(-jitter..jitter));
    let angle = orient as f64 * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.15..0.15);
    let (sa, ca) = angle.sin_cos();
    let s = c.size as f64;
    let radius = s * rng.random_range(0.25..0.38);
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let period = s * rng.random_range(0.16..0.22);
    let height = rng.random_range(0.03..0.05);
    for y in 0..c.size {
        for x in 0..c.size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt() / radius;
            if r >= 1.0 {
                continue;
            }
            let phase = (dx * ca + dy * sa) / period * std::f64::consts::TAU;
            let stripe = phase.sin();
            let i = y * c.size + x;
            let shade = 0.75 + 0.25 * stripe;
            c.rgb[i] = color.map(|v| v * shade);
            let dome = height * (1.0 - r * r).sqrt();
            c.depth[i] -= dome + 0.004 * stripe;
        }
    }
}

/// Square planar marker printed with an asymmetric glyph (a bar with a
/// class-specific foot, dot and ink color), turned by `rotation` and viewed orthographically. Each color channel is
/// lit from its own direction, so shading follows the marker's normal.
fn render_glyph(c: &mut Canvas, rng: &mut ChaCha8Rng, class: usize, spec: &SynthSpec, rotation: &Rotation) {
    let base = palette(class, spec.num_classes);
    let jitter = match spec.difficulty {
        Difficulty::Easy => 0.03,
        Difficulty::Hard => 0.08,
    };
    let ink: [f64; 3] = base.map(|v| v + rng.random_range(-jitter..jitter));
    let paper = 0.85 + rng.random_range(-jitter..jitter);
    let r = rotation.matrix();
    let normal = [r[0][2], r[1][2], r[2][2]];
    let lights = [[0.8, 0.0, 0.6], [0.0, 0.8, 0.6], [0.0, 0.0, 1.0]];
    let shade: [f64; 3] = std::array::from_fn(|k| {
        let lit: f64 = (0..3).map(|j| normal[j] * lights[k][j]).sum();
        0.3 + 0.7 * lit.max(0.0)
    });
    let s = c.size as f64;
    let scale = s * rng.random_range(0.3..0.34);
    let (cx, cy) = (
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
    );
    let foot = 0.35 + 0.3 * (class % 3) as f64 / 2.0;
    let dot_side = if class % 2 == 0 { 1.0 } else { -1.0 };
    // Image offsets are the first two rows of R applied to marker coordinates.
    let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
    for y in 0..c.size {
        for x in 0..c.size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / scale, (y as f64 + 0.5 - cy) / scale);
            let u = (r[1][1] * dx - r[0][1] * dy) / det;
            let v = (-r[1][0] * dx + r[0][0] * dy) / det;
            let bar = u.abs() < 0.16 && v.abs() < 0.75;
            let foot_hit = (0.0..foot).contains(&u) && (0.5..0.75).contains(&v);
            let dot = (u - 0.45 * dot_side).powi(2) + (v + 0.55).powi(2) < 0.04;
            if u.abs() < 0.9 && v.abs() < 0.9 {
                let i = y * c.size + x;
                let towards = (r[2][0] * u + r[2][1] * v) * scale * DEFAULT_PIXEL_SIZE;
                let albedo = if bar || foot_hit || dot { ink } else { [paper; 3] };
                c.rgb[i] = std::array::from_fn(|k| albedo[k] * shade[k]);
                c.depth[i] -= 0.03 + towards;
            }
        }
    }
}

/// Out-of-plane tilt of a pose sample, plus an in-plane turn in hard mode.
fn sample_rotation(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Rotation {
    let (tilt, spin) = match difficulty {
        Difficulty::Easy => (35.0, 0.0),
        Difficulty::Hard => (50.0, 30.0),
    };
    let a = rng.random_range(-tilt..tilt);
    let b = rng.random_range(-tilt..tilt);
    let z = if spin > 0.0 { rng.random_range(-spin..spin) } else { 0.0 };
    let rx = Rotation::from_axis_angle([1.0, 0.0, 0.0], a).expect("x axis");
    let ry = Rotation::from_axis_angle([0.0, 1.0, 0.0], b).expect("y axis");
    Rotation::rz(z).compose(&rx).compose(&ry)
}

/// Deterministic dataset for `spec`; samples cycle through the classes so
/// any prefix is roughly balanced.
pub fn synth_task(seed: u64, spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<String> = (0..spec.num_classes).map(|c| format!("class{c:02}")).collect();
    let total = spec.num_classes * spec.samples_per_class;
    let noise = match spec.difficulty {
        Difficulty::Easy => 0.03,
        Difficulty::Hard => 0.08,
    };
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.num_classes;
        let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut canvas = Canvas::background(spec.image_size, &mut srng, noise);
        let rotation = match spec.task_kind {
            TaskKind::Classification => {
                render_object(&mut canvas, &mut srng, class, spec);
                None
            }
            TaskKind::Pose => {
                let rotation = sample_rotation(&mut srng, spec.difficulty);
                render_glyph(&mut canvas, &mut srng, class, spec, &rotation);
                Some(rotation)
            }
        };
        let (rgb, depth) = canvas.into_images(&mut srng, 0.01);
        let id = format!("s{i:05}");
        samples.push(SynthSample {
            record: SampleRecord {
                rgb_path: format!("rgb/{id}.png"),
                depth_path: format!("depth/{id}.png"),
                id,
                class_label: labels[class].clone(),
                rotation,
                instance_id: None,
                frame_index: None,
            },
            rgb,
            depth,
        });
    }
    let manifest = SampleManifest::new(
        spec.task_kind,
        labels,
        samples.iter().map(|s| s.record.clone()).collect(),
    )?;
    Ok(SynthDataset { manifest, samples })
}

impl SynthDataset {
    /// Preprocessed samples named by `manifest` (a subset of this dataset's).
    pub fn to_dataset(&self, manifest: &SampleManifest, setting: Setting, size: usize) -> Result<Dataset> {
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                let s = self
                    .samples
                    .iter()
                    .find(|s| s.record.id == r.id)
                    .ok_or_else(|| Error::Split(format!("unknown synthetic sample `{}`", r.id)))?;
                let mut inputs = Vec::new();
                for name in setting.branch_names() {
                    inputs.push(match *name {
                        "rgb" => rgb_to_tensor(&s.rgb, size)?,
                        _ => depth_to_tensor(&depth_image_to_meters(&s.depth), size, DEFAULT_PIXEL_SIZE)?,
                    });
                }
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

    /// Writes `manifest.jsonl` plus `rgb/` and `depth/` PNGs under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("rgb"))?;
        std::fs::create_dir_all(dir.join("depth"))?;
        for s in &self.samples {
            s.rgb.save(dir.join(&s.record.rgb_path))?;
            s.depth.save(dir.join(&s.record.depth_path))?;
        }
        let path = dir.join("manifest.jsonl");
        std::fs::write(&path, self.manifest.to_jsonl()?)?;
        Ok(path)
    }
}

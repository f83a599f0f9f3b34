//! Dataset layouts, preprocessing and the procedural defect generator.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::scoring::Reduction;

/// Per-channel statistics of the pretrained source domain (ImageNet).
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const SYNTHETIC_CATEGORY: &str = "synthetic";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `<category>/{train/good, test/<type>, ground_truth/<type>}`.
    Mvtec,
    /// Images listed in a split CSV (`object,split,label,image,mask`).
    Visa,
    /// `train/normal`, `test/normal`, `test/anomalous`; no masks.
    FolderBinary,
    /// Generated data in the MVTec layout plus a manifest.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

fn default_image_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub layout: Layout,
    pub root: PathBuf,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub center_crop: Option<usize>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub score_reduction: Reduction,
    /// Crop to the bounding box of non-dark pixels before resizing
    /// (fundus photographs).
    #[serde(default)]
    pub nonzero_crop: bool,
    /// Split CSV for the VisA layout; defaults to `split_csv/1cls.csv`
    /// under the root.
    #[serde(default)]
    pub split_file: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn new(layout: Layout, root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            layout,
            root: root.into(),
            category: None,
            image_size: default_image_size(),
            center_crop: None,
            normalization: Normalization::default(),
            score_reduction: Reduction::Max,
            nonzero_crop: false,
            split_file: None,
        }
    }

    /// Spatial size of model inputs after resize and crop.
    pub fn input_size(&self) -> usize {
        self.center_crop.unwrap_or(self.image_size)
    }

    pub fn has_masks(&self) -> bool {
        self.layout != Layout::FolderBinary
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("dataset.image_size must be positive".into()));
        }
        if let Some(c) = self.center_crop {
            if c == 0 || c > self.image_size {
                return Err(Error::Config(format!(
                    "dataset.center_crop {c} must be in 1..={}",
                    self.image_size
                )));
            }
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("dataset.normalization.std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A sample located on disk but not yet decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub path: PathBuf,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub category: String,
    /// False for layouts without pixel annotations.
    pub has_mask: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(3, H, W)` in `[0, 1]`, not yet normalized.
    pub image: Array3<f32>,
    pub label: u8,
    pub mask: Option<Array2<bool>>,
    pub category: String,
    pub path: PathBuf,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn missing_layout(spec: &DatasetSpec, expected: &[PathBuf]) -> Error {
    let list: Vec<String> = expected.iter().map(|p| p.display().to_string()).collect();
    Error::Dataset(format!(
        "{:?} layout not found under {}; expected: {}",
        spec.layout,
        spec.root.display(),
        list.join(", ")
    ))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn mvtec_categories(spec: &DatasetSpec) -> Result<Vec<String>> {
    if let Some(c) = &spec.category {
        return Ok(vec![c.clone()]);
    }
    if !spec.root.is_dir() {
        return Err(missing_layout(spec, &[spec.root.join("<category>/train/good")]));
    }
    let cats: Vec<String> = sorted_subdirs(&spec.root)?
        .into_iter()
        .filter(|d| d.join("train").is_dir())
        .map(|d| file_name(&d))
        .collect();
    if cats.is_empty() {
        return Err(missing_layout(spec, &[spec.root.join("<category>/train/good")]));
    }
    Ok(cats)
}

fn list_mvtec(spec: &DatasetSpec, split: Split) -> Result<Vec<SampleRef>> {
    let mut out = Vec::new();
    for cat in mvtec_categories(spec)? {
        let base = spec.root.join(&cat);
        match split {
            Split::Train => {
                let dir = base.join("train").join("good");
                if !dir.is_dir() {
                    return Err(missing_layout(spec, &[dir]));
                }
                for path in sorted_images(&dir)? {
                    out.push(SampleRef {
                        path,
                        label: 0,
                        mask_path: None,
                        category: cat.clone(),
                        has_mask: false,
                    });
                }
            }
            Split::Test => {
                let dir = base.join("test");
                if !dir.is_dir() {
                    return Err(missing_layout(spec, &[dir, base.join("ground_truth")]));
                }
                for kind_dir in sorted_subdirs(&dir)? {
                    let kind = file_name(&kind_dir);
                    let good = kind == "good";
                    for path in sorted_images(&kind_dir)? {
                        let mask_path = if good {
                            None
                        } else {
                            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                            let m = base.join("ground_truth").join(&kind).join(format!("{stem}_mask.png"));
                            if !m.is_file() {
                                return Err(Error::Dataset(format!(
                                    "anomalous image {} has no mask at {}",
                                    path.display(),
                                    m.display()
                                )));
                            }
                            Some(m)
                        };
                        out.push(SampleRef {
                            path,
                            label: u8::from(!good),
                            mask_path,
                            category: cat.clone(),
                            has_mask: true,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn list_folder_binary(spec: &DatasetSpec, split: Split) -> Result<Vec<SampleRef>> {
    let category = spec
        .category
        .clone()
        .unwrap_or_else(|| file_name(&spec.root));
    let mut dirs = vec![(spec.root.join(split.as_str()).join("normal"), 0u8)];
    if split == Split::Test {
        dirs.push((spec.root.join("test").join("anomalous"), 1));
    }
    let mut out = Vec::new();
    for (dir, label) in &dirs {
        if !dir.is_dir() {
            return Err(missing_layout(spec, &dirs.iter().map(|d| d.0.clone()).collect::<Vec<_>>()));
        }
        for path in sorted_images(dir)? {
            out.push(SampleRef {
                path,
                label: *label,
                mask_path: None,
                category: category.clone(),
                has_mask: false,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: Option<String>,
}

fn list_visa(spec: &DatasetSpec, split: Split) -> Result<Vec<SampleRef>> {
    let split_file = spec
        .split_file
        .clone()
        .unwrap_or_else(|| spec.root.join("split_csv").join("1cls.csv"));
    if !split_file.is_file() {
        return Err(missing_layout(spec, &[split_file]));
    }
    let mut reader = csv::Reader::from_path(&split_file)
        .map_err(|e| Error::Dataset(format!("{}: {e}", split_file.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<VisaRow>() {
        let row = row.map_err(|e| Error::Dataset(format!("{}: {e}", split_file.display())))?;
        if row.split != split.as_str() {
            continue;
        }
        if spec.category.as_ref().is_some_and(|c| *c != row.object) {
            continue;
        }
        let label = match row.label.as_str() {
            "normal" => 0,
            "anomaly" => 1,
            other => {
                return Err(Error::Dataset(format!(
                    "{}: unknown label '{other}'",
                    split_file.display()
                )))
            }
        };
        out.push(SampleRef {
            path: spec.root.join(&row.image),
            label,
            mask_path: row.mask.filter(|m| !m.is_empty()).map(|m| spec.root.join(m)),
            category: row.object,
            has_mask: true,
        });
    }
    out.sort_by(|a, b| (&a.category, &a.path).cmp(&(&b.category, &b.path)));
    Ok(out)
}

/// Lists the samples of a split in deterministic (lexicographic) order.
pub fn list_samples(spec: &DatasetSpec, split: Split) -> Result<Vec<SampleRef>> {
    let refs = match spec.layout {
        Layout::Mvtec | Layout::Synthetic => list_mvtec(spec, split)?,
        Layout::FolderBinary => list_folder_binary(spec, split)?,
        Layout::Visa => list_visa(spec, split)?,
    };
    if split == Split::Train {
        if let Some(bad) = refs.iter().find(|r| r.label != 0) {
            return Err(Error::Dataset(format!(
                "training split contains anomalous sample {}",
                bad.path.display()
            )));
        }
    }
    if refs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} split under {} is empty",
            split.as_str(),
            spec.root.display()
        )));
    }
    Ok(refs)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Bounding box `(x, y, w, h)` of pixels brighter than `threshold` in any
/// channel; the full image when none are.
pub fn nonzero_bbox(img: &DynamicImage, threshold: u8) -> (u32, u32, u32, u32) {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (x, y, p) in rgb.enumerate_pixels() {
        if p.0.iter().any(|&c| c > threshold) {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x1 < x0 || y1 < y0 {
        (0, 0, w, h)
    } else {
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }
}

/// Geometry shared by an image and its mask: source crop, resize target,
/// center crop.
fn geometry(spec: &DatasetSpec, img: &DynamicImage) -> ((u32, u32, u32, u32), u32, Option<u32>) {
    let bbox = if spec.nonzero_crop {
        nonzero_bbox(img, 10)
    } else {
        (0, 0, img.width(), img.height())
    };
    (bbox, spec.image_size as u32, spec.center_crop.map(|c| c as u32))
}

fn apply_geometry(
    img: &DynamicImage,
    geo: ((u32, u32, u32, u32), u32, Option<u32>),
    filter: FilterType,
) -> DynamicImage {
    let ((x, y, w, h), size, crop) = geo;
    let mut out = img.crop_imm(x, y, w, h);
    if out.dimensions() != (size, size) {
        out = out.resize_exact(size, size, filter);
    }
    if let Some(c) = crop {
        let off = (size - c) / 2;
        out = out.crop_imm(off, off, c, c);
    }
    out
}

/// Resizes (bilinear), optionally crops, and scales to `[0, 1]`.
pub fn preprocess_image(img: &DynamicImage, spec: &DatasetSpec) -> Array3<f32> {
    let out = apply_geometry(img, geometry(spec, img), FilterType::Triangle).to_rgb32f();
    let (w, h) = out.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        out.get_pixel(x as u32, y as u32).0[c].clamp(0.0, 1.0)
    })
}

/// Same geometry as the paired image with nearest-neighbour resampling;
/// any value above half intensity is foreground.
pub fn preprocess_mask(mask: &DynamicImage, image: &DynamicImage, spec: &DatasetSpec) -> Array2<bool> {
    let mut geo = geometry(spec, image);
    if mask.dimensions() != image.dimensions() {
        geo.0 = (0, 0, mask.width(), mask.height());
    }
    let out = apply_geometry(mask, geo, FilterType::Nearest).to_luma8();
    let (w, h) = out.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| out.get_pixel(x as u32, y as u32).0[0] > 127)
}

/// Decodes and preprocesses one image file.
pub fn load_image(path: &Path, spec: &DatasetSpec) -> Result<Array3<f32>> {
    Ok(preprocess_image(&open_image(path)?, spec))
}

pub fn load_sample(r: &SampleRef, spec: &DatasetSpec) -> Result<Sample> {
    let img = open_image(&r.path)?;
    let image = preprocess_image(&img, spec);
    let (_, h, w) = image.dim();
    let mask = if !r.has_mask {
        None
    } else if let Some(mp) = &r.mask_path {
        let m = preprocess_mask(&open_image(mp)?, &img, spec);
        if m.dim() != (h, w) {
            return Err(Error::Dataset(format!(
                "mask {} does not match image {}",
                mp.display(),
                r.path.display()
            )));
        }
        Some(m)
    } else {
        Some(Array2::from_elem((h, w), false))
    };
    if r.label == 1 && mask.as_ref().is_some_and(|m| !m.iter().any(|&v| v)) && r.mask_path.is_some() {
        return Err(Error::Dataset(format!(
            "anomalous sample {} has an empty mask",
            r.path.display()
        )));
    }
    Ok(Sample {
        image,
        label: r.label,
        mask,
        category: r.category.clone(),
        path: r.path.clone(),
    })
}

/// Lists and decodes a split. Decoding may run in parallel; the returned
/// order is always the listing order.
pub fn load_split(spec: &DatasetSpec, split: Split, exec: Exec) -> Result<Vec<Sample>> {
    let refs = list_samples(spec, split)?;
    par::try_map(exec, &refs, |r| load_sample(r, spec))
}

/// Normalizes a set of images into one `(N, 3, H, W)` tensor.
pub fn to_tensor(images: &[&Array3<f32>], norm: &Normalization, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Dataset("no images to batch".into()));
    };
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {:?} in a batch of {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        for ((ch, _, _), &v) in img.indexed_iter() {
            data.push((v - norm.mean[ch]) / norm.std[ch]);
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

/// Epoch-wise shuffled batches of indices; the trailing partial batch of
/// each epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || n < batch_size {
            return Err(Error::Config(format!(
                "batch size {batch_size} needs at least that many training samples (have {n})"
            )));
        }
        Ok(BatchSampler {
            n,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor.saturating_add(self.batch_size) > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }
}

// ---------------------------------------------------------------------------
// Synthetic defects

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anom: usize,
    pub image_size: usize,
    /// Allowed defect area as a fraction of the image.
    pub min_area: f64,
    pub max_area: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_train: usize, n_test_normal: usize, n_test_anom: usize, image_size: usize) -> Self {
        SyntheticConfig {
            seed,
            n_train,
            n_test_normal,
            n_test_anom,
            image_size,
            min_area: 0.005,
            max_area: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test_normal == 0 || self.n_test_anom == 0 {
            return Err(Error::Config("synthetic sample counts must be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("synthetic image_size must be at least 32".into()));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area < 0.5) {
            return Err(Error::Config(format!(
                "synthetic defect area range [{}, {}] is invalid",
                self.min_area, self.max_area
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    Shuffle,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Blob, DefectKind::Scratch, DefectKind::Shuffle];

    fn dir_name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::Shuffle => "shuffle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub split: Split,
    pub label: u8,
    pub defect: Option<DefectKind>,
    pub mask: Option<String>,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub category: String,
    pub config: SyntheticConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Parameters shared by every image of one synthetic dataset.
#[derive(Debug, Clone)]
struct TextureStyle {
    base: [f32; 3],
    grating_period: f64,
    grating_angle: f64,
    grating_amp: f32,
}

impl TextureStyle {
    fn from_seed(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        TextureStyle {
            base: [
                rng.random_range(0.35..0.6),
                rng.random_range(0.35..0.6),
                rng.random_range(0.35..0.6),
            ],
            grating_period: size as f64 / 8.0,
            grating_angle: rng.random_range(0.0..std::f64::consts::PI),
            grating_amp: 0.12,
        }
    }
}

/// Normal texture: a fixed-orientation grating with per-image phase, a few
/// low-frequency sinusoids and faint pixel noise.
fn normal_texture(style: &TextureStyle, size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    use std::f64::consts::TAU;
    let phase = rng.random_range(0.0..TAU);
    let (ca, sa) = (style.grating_angle.cos(), style.grating_angle.sin());
    let waves: Vec<(f64, f64, f64, [f32; 3])> = (0..5)
        .map(|_| {
            let fx = rng.random_range(-3i32..=3) as f64;
            let fy = rng.random_range(1i32..=3) as f64;
            let amp = [
                rng.random_range(-0.03f32..0.03),
                rng.random_range(-0.03f32..0.03),
                rng.random_range(-0.03f32..0.03),
            ];
            (fx, fy, rng.random_range(0.0..TAU), amp)
        })
        .collect();
    let jitter: Vec<f32> = (0..3).map(|_| rng.random_range(-0.02f32..0.02)).collect();
    let n = size as f64;
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let g = (TAU * (xf * ca + yf * sa) / style.grating_period + phase).sin() as f32 * style.grating_amp;
            let mut low = [0f32; 3];
            for (fx, fy, ph, amp) in &waves {
                let s = (TAU * (fx * xf + fy * yf) / n + ph).sin() as f32;
                for c in 0..3 {
                    low[c] += amp[c] * s;
                }
            }
            for c in 0..3 {
                let noise = rng.random_range(-0.01f32..0.01);
                img[[c, y, x]] = (style.base[c] + jitter[c] + g + low[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn area_range(cfg: &SyntheticConfig) -> (f64, f64) {
    let px = (cfg.image_size * cfg.image_size) as f64;
    (cfg.min_area * px, cfg.max_area * px)
}

fn blob_mask(size: usize, target: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let ratio = rng.random_range(0.5..2.0f64);
    // area of an ellipse: pi * a * b with a = ratio * b
    let b = (target / (std::f64::consts::PI * ratio)).sqrt();
    let a = ratio * b;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let margin = a.max(b) + 1.0;
    let cx = rng.random_range(margin..(size as f64 - margin).max(margin + 1.0));
    let cy = rng.random_range(margin..(size as f64 - margin).max(margin + 1.0));
    let (ct, st) = (theta.cos(), theta.sin());
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = (dx * ct + dy * st) / a;
        let v = (-dx * st + dy * ct) / b;
        u * u + v * v <= 1.0
    })
}

fn scratch_mask(size: usize, target: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let thickness = (size as f64 / 32.0).max(1.5);
    let length = (target / thickness).min(size as f64 * 0.8);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (theta.cos() * length / 2.0, theta.sin() * length / 2.0);
    let lo = dx.abs().max(dy.abs()) + thickness;
    let hi = (size as f64 - lo).max(lo + 1.0);
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
    let len2 = (x1 - x0).powi(2) + (y1 - y0).powi(2);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = (((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() <= thickness / 2.0
    })
}

/// Applies one defect to `img` and returns its mask.
fn apply_defect(img: &mut Array3<f32>, kind: DefectKind, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let size = cfg.image_size;
    let (lo, hi) = area_range(cfg);
    let count = |m: &Array2<bool>| m.iter().filter(|&&v| v).count() as f64;
    match kind {
        DefectKind::Blob | DefectKind::Scratch => {
            let mask = loop {
                let target = rng.random_range(lo * 1.1..hi * 0.9);
                let m = if kind == DefectKind::Blob {
                    blob_mask(size, target, rng)
                } else {
                    scratch_mask(size, target, rng)
                };
                if (lo..=hi).contains(&count(&m)) {
                    break m;
                }
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let shift: Vec<f32> = (0..3).map(|_| sign * rng.random_range(0.25f32..0.45)).collect();
            for ((c, y, x), v) in img.indexed_iter_mut() {
                if mask[[y, x]] {
                    *v = (*v + shift[c]).clamp(0.0, 1.0);
                }
            }
            mask
        }
        DefectKind::Shuffle => {
            let side = rng.random_range(lo.sqrt().ceil() as usize..=hi.sqrt().floor() as usize);
            let (ax, ay) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            let (bx, by) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            let src = img.clone();
            // quarter-turned copy of another patch: breaks the grating orientation
            for c in 0..3 {
                for i in 0..side {
                    for j in 0..side {
                        img[[c, ay + i, ax + j]] = src[[c, by + j, bx + side - 1 - i]];
                    }
                }
            }
            Array2::from_shape_fn((size, size), |(y, x)| {
                (ay..ay + side).contains(&y) && (ax..ax + side).contains(&x)
            })
        }
    }
}

fn save_rgb(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (img[[c, y as usize, x as usize]] * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = if mask[[y as usize, x as usize]] { 255 } else { 0 };
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

struct Planned {
    rel: String,
    split: Split,
    defect: Option<DefectKind>,
    seed: u64,
}

/// Materializes a synthetic dataset under `root` and returns a spec that
/// loads it. Every image has its own sub-seed, so output is identical
/// regardless of how generation is scheduled.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig, root: &Path, exec: Exec) -> Result<(DatasetSpec, Manifest)> {
    cfg.validate()?;
    let base = root.join(SYNTHETIC_CATEGORY);
    let mut dirs = vec![base.join("train/good"), base.join("test/good")];
    for k in DefectKind::ALL {
        dirs.push(base.join("test").join(k.dir_name()));
        dirs.push(base.join("ground_truth").join(k.dir_name()));
    }
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plan = Vec::new();
    for i in 0..cfg.n_train {
        plan.push(Planned {
            rel: format!("train/good/{i:04}.png"),
            split: Split::Train,
            defect: None,
            seed: seeder.random(),
        });
    }
    for i in 0..cfg.n_test_normal {
        plan.push(Planned {
            rel: format!("test/good/{i:04}.png"),
            split: Split::Test,
            defect: None,
            seed: seeder.random(),
        });
    }
    for i in 0..cfg.n_test_anom {
        let kind = DefectKind::ALL[i % DefectKind::ALL.len()];
        plan.push(Planned {
            rel: format!("test/{}/{i:04}.png", kind.dir_name()),
            split: Split::Test,
            defect: Some(kind),
            seed: seeder.random(),
        });
    }
    let style = TextureStyle::from_seed(cfg.seed, cfg.image_size);
    let entries = par::try_map(exec, &plan, |p| -> Result<ManifestEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut img = normal_texture(&style, cfg.image_size, &mut rng);
        let (mask_rel, area) = match p.defect {
            None => (None, 0.0),
            Some(kind) => {
                let mask = apply_defect(&mut img, kind, cfg, &mut rng);
                let stem = Path::new(&p.rel).file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let rel = format!("ground_truth/{}/{stem}_mask.png", kind.dir_name());
                save_mask(&mask, &base.join(&rel))?;
                let area = mask.iter().filter(|&&v| v).count() as f64 / mask.len() as f64;
                (Some(format!("{SYNTHETIC_CATEGORY}/{rel}")), area)
            }
        };
        save_rgb(&img, &base.join(&p.rel))?;
        Ok(ManifestEntry {
            image: format!("{SYNTHETIC_CATEGORY}/{}", p.rel),
            split: p.split,
            label: u8::from(p.defect.is_some()),
            defect: p.defect,
            mask: mask_rel,
            area_fraction: area,
        })
    })?;
    let manifest = Manifest {
        category: SYNTHETIC_CATEGORY.into(),
        config: cfg.clone(),
        entries,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut spec = DatasetSpec::new(Layout::Synthetic, root);
    spec.category = Some(SYNTHETIC_CATEGORY.into());
    spec.image_size = cfg.image_size;
    Ok((spec, manifest))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_drops_partial_batches_and_reshuffles() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        let a = [s.next_batch(), s.next_batch()].concat();
        let mut seen = a.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        let b = [s.next_batch(), s.next_batch()].concat();
        assert_ne!(a, b);
        assert!(BatchSampler::new(3, 4, 0).is_err());
    }

    #[test]
    fn preprocess_shapes() {
        let img = DynamicImage::new_rgb8(512, 512);
        let mut spec = DatasetSpec::new(Layout::Mvtec, "/nonexistent");
        assert_eq!(preprocess_image(&img, &spec).dim(), (3, 256, 256));
        let img = DynamicImage::new_rgb8(256, 256);
        spec.center_crop = Some(224);
        assert_eq!(preprocess_image(&img, &spec).dim(), (3, 224, 224));
    }

    #[test]
    fn masks_binarize() {
        let mut m = image::GrayImage::new(8, 8);
        m.put_pixel(2, 3, image::Luma([255]));
        let mask = DynamicImage::ImageLuma8(m);
        let img = DynamicImage::new_rgb8(8, 8);
        let mut spec = DatasetSpec::new(Layout::Mvtec, "/nonexistent");
        spec.image_size = 16;
        let out = preprocess_mask(&mask, &img, &spec);
        assert_eq!(out.dim(), (16, 16));
        assert_eq!(out.iter().filter(|&&v| v).count(), 4);
        assert!(out[[6, 4]] && out[[7, 5]]);
    }

    #[test]
    fn nonzero_crop_finds_bright_region() {
        let mut img = image::RgbImage::new(20, 10);
        for x in 5..9 {
            for y in 2..6 {
                img.put_pixel(x, y, image::Rgb([200, 100, 50]));
            }
        }
        assert_eq!(nonzero_bbox(&DynamicImage::ImageRgb8(img), 10), (5, 2, 4, 4));
    }

    #[test]
    fn missing_root_lists_expected_paths() {
        let spec = DatasetSpec::new(Layout::FolderBinary, "/definitely/not/here");
        let err = list_samples(&spec, Split::Test).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test/normal") && msg.contains("test/anomalous"), "{msg}");
        assert!(err.is_user_error());
    }
}

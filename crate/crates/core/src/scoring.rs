//! Anomaly maps at image resolution and scalar image scores.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PairSet;
use crate::par::{self, Exec};

/// How a score map is reduced to an image score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub score_map: Array2<f32>,
    pub image_score: f64,
    pub reduction: Reduction,
}

impl AnomalyResult {
    pub fn new(score_map: Array2<f32>, reduction: Reduction) -> Self {
        let image_score = image_score(score_map.view(), reduction);
        AnomalyResult {
            score_map,
            image_score,
            reduction,
        }
    }
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn upsample_bilinear(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = map.dim();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ly) = ys[y];
        let (x0, x1, lx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - lx) + map[[y0, x1]] * lx;
        let bottom = map[[y1, x0]] * (1.0 - lx) + map[[y1, x1]] * lx;
        top * (1.0 - ly) + bottom * ly
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Mirror index for symmetric (edge-repeating) border handling.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian filter, kernel truncated at four standard deviations.
pub fn gaussian_smooth(map: ArrayView2<f32>, sigma: f64) -> Array2<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = map.dim();
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * map[[y, reflect(x as isize + j as isize - r, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * rows[[reflect(y as isize + j as isize - r, h), x]])
            .sum::<f32>()
    })
}

/// Upsamples every distance map to `image_size` and sums them, then
/// optionally smooths the sum.
pub fn assemble_score_map(
    maps: &[ArrayView2<f32>],
    image_size: (usize, usize),
    smoothing_sigma: Option<f64>,
) -> Result<Array2<f32>> {
    if maps.is_empty() {
        return Err(Error::Shape("cannot assemble a score map from zero distance maps".into()));
    }
    let (h, w) = image_size;
    let mut acc = Array2::<f32>::zeros((h, w));
    for m in maps {
        let (mh, mw) = m.dim();
        if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 {
            return Err(Error::Shape(format!(
                "distance map {mh}x{mw} does not divide image size {h}x{w}"
            )));
        }
        acc += &upsample_bilinear(*m, h, w);
    }
    Ok(match smoothing_sigma {
        Some(s) if s > 0.0 => gaussian_smooth(acc.view(), s),
        _ => acc,
    })
}

pub fn image_score(map: ArrayView2<f32>, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Max => map.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64,
        Reduction::Mean => map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64,
    }
}

/// Scores every image of a batch from its pair set.
pub fn score_batch(
    pairs: &PairSet,
    image_size: (usize, usize),
    smoothing_sigma: Option<f64>,
    reduction: Reduction,
    exec: Exec,
) -> Result<Vec<AnomalyResult>> {
    let host: Vec<Vec<Array2<f32>>> = pairs
        .distance_maps()?
        .iter()
        .map(|m| -> Result<Vec<Array2<f32>>> {
            let (b, h, w) = m.dims3()?;
            let flat = m.flatten_all()?.to_vec1::<f32>()?;
            Ok(flat
                .chunks(h * w)
                .take(b)
                .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk matches map size"))
                .collect())
        })
        .collect::<Result<_>>()?;
    let batch = host.first().map_or(0, Vec::len);
    let per_image = par::map_range(exec, batch, |i| {
        let views: Vec<ArrayView2<f32>> = host.iter().map(|pair| pair[i].view()).collect();
        assemble_score_map(&views, image_size, smoothing_sigma).map(|m| AnomalyResult::new(m, reduction))
    });
    per_image.into_iter().collect()
}

/// Header stored next to a raw score-map dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMapHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    pub image_id: String,
}

/// Writes `<stem>.f32` (row-major little-endian) and `<stem>.json`.
pub fn write_score_map(dir: &Path, stem: &str, image_id: &str, map: ArrayView2<f32>) -> Result<PathBuf> {
    let raw_path = dir.join(format!("{stem}.f32"));
    let mut bytes = Vec::with_capacity(map.len() * 4);
    for v in map.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(format!("writing {}", raw_path.display()), e))?;
    let header = ScoreMapHeader {
        shape: [map.nrows(), map.ncols()],
        dtype: "float32".into(),
        byte_order: "little".into(),
        image_id: image_id.into(),
    };
    let header_path = dir.join(format!("{stem}.json"));
    fs::write(&header_path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(format!("writing {}", header_path.display()), e))?;
    Ok(raw_path)
}

pub fn read_score_map(dir: &Path, stem: &str) -> Result<(ScoreMapHeader, Array2<f32>)> {
    let header_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&header_path)
        .map_err(|e| Error::io(format!("reading {}", header_path.display()), e))?;
    let header: ScoreMapHeader = serde_json::from_str(&text)?;
    let raw_path = dir.join(format!("{stem}.f32"));
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(format!("reading {}", raw_path.display()), e))?;
    let [h, w] = header.shape;
    if bytes.len() != h * w * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, header says {h}x{w} float32",
            raw_path.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let map = Array2::from_shape_vec((h, w), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((header, map))
}

/// Piecewise-linear blue-cyan-yellow-red ramp.
fn colormap(t: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.5, 1.0, 0.5],
        [1.0, 0.8, 0.0],
        [0.6, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f32;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
        out[c] = (v * 255.0).round() as u8;
    }
    out
}

/// Min-max normalizes a map to [0, 1]; constant maps become all zero.
pub fn min_max_normalize(map: ArrayView2<f32>) -> Array2<f32> {
    let lo = map.iter().fold(f32::INFINITY, |a, &b| a.min(b));
    let hi = map.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let span = hi - lo;
    map.mapv(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Saves an 8-bit RGB heatmap of the per-image min-max normalized map.
pub fn write_heatmap(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    let norm = min_max_normalize(map);
    let (h, w) = norm.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in norm.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Rgb(colormap(v)));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

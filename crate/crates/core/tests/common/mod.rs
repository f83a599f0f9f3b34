//! Independent reference implementations used by the integration tests.
//! Everything here works on plain `Vec<f64>` with nested loops.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `(B, C, H, W)` array in row-major order.
#[derive(Debug, Clone)]
pub struct Map4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Map4 {
    pub fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let n = dims.iter().product();
        Map4 {
            dims,
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    pub fn tensor(&self, dtype: DType) -> Tensor {
        let [b, c, h, w] = self.dims;
        Tensor::from_slice(&self.data, (b, c, h, w), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (b, c, h, w) = t.dims4().unwrap();
        Map4 {
            dims: [b, c, h, w],
            data: t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random pyramid pair: 1..=3 stages sharing a batch size, each with its
/// own channel count and spatial size.
/// Every stage holds at least two feature points.
pub fn random_pyramids(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> (Vec<Map4>, Vec<Map4>) {
    let stages = rng.random_range(1..=3);
    let b = rng.random_range(1..=3);
    let mut e = Vec::new();
    let mut d = Vec::new();
    for _ in 0..stages {
        let dims = [
            b,
            rng.random_range(1..=max_c),
            rng.random_range(1..=max_hw),
            rng.random_range(2..=max_hw.max(2)),
        ];
        e.push(Map4::random(dims, rng));
        d.push(Map4::random(dims, rng));
    }
    (e, d)
}

pub fn cos_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    1.0 - dot / (na * nb).sqrt().max(1e-8)
}

/// Per-point distance map, indexed `[b][h][w]`.
pub fn oracle_distance_map(e: &Map4, d: &Map4) -> Vec<Vec<Vec<f64>>> {
    let [bb, cc, hh, ww] = e.dims;
    let mut out = vec![vec![vec![0.0; ww]; hh]; bb];
    for b in 0..bb {
        for h in 0..hh {
            for w in 0..ww {
                let u: Vec<f64> = (0..cc).map(|c| e.at(b, c, h, w)).collect();
                let v: Vec<f64> = (0..cc).map(|c| d.at(b, c, h, w)).collect();
                out[b][h][w] = cos_distance(&u, &v);
            }
        }
    }
    out
}

pub fn oracle_regional(e: &[Map4], d: &[Map4]) -> f64 {
    let mut total = 0.0;
    for (a, b) in e.iter().zip(d) {
        let m = oracle_distance_map(a, b);
        let mut sum = 0.0;
        let mut n = 0.0;
        for plane in &m {
            for row in plane {
                for v in row {
                    sum += v;
                    n += 1.0;
                }
            }
        }
        total += sum / n;
    }
    total
}

pub fn oracle_global(e: &[Map4], d: &[Map4]) -> f64 {
    let mut total = 0.0;
    for (a, b) in e.iter().zip(d) {
        let [bb, ..] = a.dims;
        let per = a.data.len() / bb;
        let mut sum = 0.0;
        for i in 0..bb {
            sum += cos_distance(&a.data[i * per..(i + 1) * per], &b.data[i * per..(i + 1) * per]);
        }
        total += sum / bb as f64;
    }
    total
}

/// Easy-point flags for one stage: distance below mean + alpha * std
/// (population std over every point of the stage).
pub fn oracle_easy(e: &Map4, d: &Map4, alpha: f64) -> Vec<Vec<Vec<bool>>> {
    let m = oracle_distance_map(e, d);
    let flat: Vec<f64> = m.iter().flatten().flatten().copied().collect();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let std = (flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let t = mean + alpha * std;
    m.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|&v| v < t).collect()).collect())
        .collect()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// AUROC as the fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

fn find(parent: &mut Vec<usize>, x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// 8-connected components by union-find; returns one component id per
/// pixel (`None` for background) and the component count.
pub fn union_find_components(mask: &[Vec<bool>]) -> (Vec<Vec<Option<usize>>>, usize) {
    let h = mask.len();
    let w = if h == 0 { 0 } else { mask[0].len() };
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !mask[y][x] {
                continue;
            }
            for (dy, dx) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if mask[ny][nx] {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    parent[a] = b;
                }
            }
        }
    }
    let mut roots = std::collections::BTreeMap::new();
    let mut out = vec![vec![None; w]; h];
    for y in 0..h {
        for x in 0..w {
            if mask[y][x] {
                let r = find(&mut parent, y * w + x);
                let next = roots.len();
                out[y][x] = Some(*roots.entry(r).or_insert(next));
            }
        }
    }
    (out, roots.len())
}

/// Normalized area under the PRO curve, sweeping every distinct score as
/// a threshold (score >= t is anomalous) and integrating up to `limit`.
pub fn brute_aupro(maps: &[Vec<Vec<f64>>], masks: &[Vec<Vec<bool>>], limit: f64) -> f64 {
    struct Region {
        image: usize,
        pixels: Vec<(usize, usize)>,
    }
    let mut regions = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let (ids, n) = union_find_components(m);
        let mut rs: Vec<Region> = (0..n).map(|_| Region { image: i, pixels: Vec::new() }).collect();
        for (y, row) in ids.iter().enumerate() {
            for (x, id) in row.iter().enumerate() {
                if let Some(id) = id {
                    rs[*id].pixels.push((y, x));
                }
            }
        }
        regions.extend(rs);
    }
    let mut thresholds: Vec<f64> = maps.iter().flatten().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_normal = masks.iter().flatten().flatten().filter(|&&m| !m).count() as f64;
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0.0;
        for (m, g) in maps.iter().zip(masks) {
            for (mr, gr) in m.iter().zip(g) {
                for (&s, &a) in mr.iter().zip(gr) {
                    if !a && s >= t {
                        fp += 1.0;
                    }
                }
            }
        }
        let mut pro = 0.0;
        for r in &regions {
            let hit = r.pixels.iter().filter(|&&(y, x)| maps[r.image][y][x] >= t).count();
            pro += hit as f64 / r.pixels.len() as f64;
        }
        curve.push((fp / n_normal, pro / regions.len() as f64));
    }
    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// Best F1 over every way of cutting the sorted scores (predict anomalous
/// for all scores >= cut, or for none); returns (f1, acc) with ties on F1
/// broken by higher accuracy.
pub fn enumerate_f1(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::INFINITY);
    let total_pos = labels.iter().filter(|&&l| l).count();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &c in &cuts {
        let (mut tp, mut fp, mut tn) = (0usize, 0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= c, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + (total_pos - tp)) as f64
        };
        let acc = (tp + tn) as f64 / scores.len() as f64;
        if f1 > best.0 || (f1 == best.0 && acc > best.1) {
            best = (f1, acc);
        }
    }
    best
}

/// Bilinear resize with half-pixel centres and edge clamping, written
/// out per output pixel.
pub fn oracle_bilinear(src: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
    let h = src.len();
    let w = src[0].len();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = vec![vec![0.0; out_w]; out_h];
    for (i, row) in out.iter_mut().enumerate() {
        let (y0, y1, fy) = coord(i, out_h, h);
        for (j, v) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = coord(j, out_w, w);
            let top = src[y0][x0] * (1.0 - fx) + src[y0][x1] * fx;
            let bot = src[y1][x0] * (1.0 - fx) + src[y1][x1] * fx;
            *v = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-8)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // floor: two vanishing gradients agree regardless of rounding noise
    diff / na.max(nb).max(1e-8)
}

//! Cosine-distance maps and the reconstruction objectives.
//!
//! All functions take batched stage tensors `(B, C, H, W)`; a "pyramid" here
//! is any slice of stages (3 for single-encoder wiring, 6 for paired). Stage
//! terms are summed. Within a stage the regional loss averages over every
//! (batch, h, w) point and the global losses average the per-image cosine
//! distance over the batch, so a batch of one reduces to the per-image
//! formulas.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on the product of norms in every cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity along `dim`, with the denominator clamped at
/// [`COSINE_EPS`].
fn cosine(a: &Tensor, b: &Tensor, dim: usize) -> Result<Tensor> {
    let dot = (a * b)?.sum(dim)?;
    let na = a.sqr()?.sum(dim)?;
    let nb = b.sqr()?.sum(dim)?;
    let denom = (na * nb)?.maximum(COSINE_EPS * COSINE_EPS)?.sqrt()?;
    Ok((dot / denom)?)
}

fn check_pair(e: &Tensor, d: &Tensor) -> Result<()> {
    if e.dims() != d.dims() {
        return Err(Error::Shape(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            e.dims(),
            d.dims()
        )));
    }
    let dims = e.dims();
    if dims.len() != 4 || dims[1] == 0 {
        return Err(Error::Shape(format!(
            "feature maps must be (B, C>=1, H, W), got {dims:?}"
        )));
    }
    Ok(())
}

fn check_pyramids(e: &[Tensor], d: &[Tensor]) -> Result<()> {
    if e.len() != d.len() || e.is_empty() {
        return Err(Error::Shape(format!(
            "pyramids must have the same nonzero number of stages, got {} and {}",
            e.len(),
            d.len()
        )));
    }
    e.iter().zip(d).try_for_each(|(a, b)| check_pair(a, b))
}

/// Per-point cosine distance `1 - cos(f_e(:,h,w), f_d(:,h,w))`, shape
/// `(B, H, W)`, values in `[0, 2]`.
pub fn distance_map(f_e: &Tensor, f_d: &Tensor) -> Result<Tensor> {
    check_pair(f_e, f_d)?;
    Ok(cosine(f_e, f_d, 1)?.affine(-1.0, 1.0)?)
}

/// Sum over stages of the mean per-point cosine distance.
pub fn loss_regional(pyr_e: &[Tensor], pyr_d: &[Tensor]) -> Result<Tensor> {
    check_pyramids(pyr_e, pyr_d)?;
    let terms = pyr_e
        .iter()
        .zip(pyr_d)
        .map(|(e, d)| Ok(distance_map(e, d)?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

fn global_term(e: &Tensor, d: &Tensor) -> Result<Tensor> {
    let e = e.flatten_from(1)?;
    let d = d.flatten_from(1)?;
    Ok(cosine(&e, &d, 1)?.affine(-1.0, 1.0)?.mean_all()?)
}

fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut iter = terms.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Shape("no stages to sum".into()))?;
    iter.try_fold(first, |acc, t| Ok((acc + t)?))
}

/// Sum over stages of the cosine distance between whole flattened maps.
/// With `stop_grad_target` no gradient reaches `pyr_e`.
pub fn loss_global(pyr_e: &[Tensor], pyr_d: &[Tensor], stop_grad_target: bool) -> Result<Tensor> {
    check_pyramids(pyr_e, pyr_d)?;
    let terms = pyr_e
        .iter()
        .zip(pyr_d)
        .map(|(e, d)| {
            let e = if stop_grad_target { e.detach() } else { e.clone() };
            global_term(&e, d)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// Batch statistics of one stage's distance map used to pick easy points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
    pub discarded: usize,
    pub total: usize,
}

impl MiningStats {
    pub fn discard_rate(&self) -> f64 {
        self.discarded as f64 / self.total as f64
    }
}

/// Marks points with distance strictly below `mean + alpha * std` as easy.
/// `alpha = -inf` (or all-equal distances) discards nothing.
pub fn easy_mask(distances: &[f32], alpha: f64) -> Result<(Vec<bool>, MiningStats)> {
    let n = distances.len();
    if n < 2 {
        return Err(Error::Shape(format!(
            "hard mining needs at least 2 distance values, got {n}"
        )));
    }
    let mean = distances.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = distances
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let (lo, hi) = distances
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let threshold = if alpha == f64::NEG_INFINITY || lo == hi {
        f64::NEG_INFINITY
    } else {
        mean + alpha * std
    };
    let mask: Vec<bool> = distances.iter().map(|&v| (v as f64) < threshold).collect();
    let discarded = mask.iter().filter(|&&m| m).count();
    Ok((
        mask,
        MiningStats {
            mean,
            std,
            threshold,
            discarded,
            total: n,
        },
    ))
}

/// Replaces easy points of `f_d` by their stop-gradient copy. Values are
/// unchanged; only the gradient field differs.
pub fn mine_hard_points(f_e: &Tensor, f_d: &Tensor, alpha: f64) -> Result<(Tensor, MiningStats)> {
    check_pair(f_e, f_d)?;
    let m = distance_map(&f_e.detach(), &f_d.detach())?;
    let values = m.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let (mask, stats) = easy_mask(&values, alpha)?;
    if stats.discarded == 0 {
        return Ok((f_d.clone(), stats));
    }
    let mask: Vec<u8> = mask.into_iter().map(u8::from).collect();
    let (b, c, h, w) = f_d.dims4()?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), f_d.device())?.broadcast_as((b, c, h, w))?;
    let mined = mask.where_cond(&f_d.detach(), f_d)?;
    Ok((mined, stats))
}

/// Global loss whose gradient skips easy decoder points (per-stage batch
/// statistics). The value equals [`loss_global`] on the same inputs.
pub fn loss_global_hm(
    pyr_e: &[Tensor],
    pyr_d: &[Tensor],
    alpha: f64,
    stop_grad_target: bool,
) -> Result<(Tensor, Vec<MiningStats>)> {
    check_pyramids(pyr_e, pyr_d)?;
    let mut terms = Vec::with_capacity(pyr_e.len());
    let mut stats = Vec::with_capacity(pyr_e.len());
    for (e, d) in pyr_e.iter().zip(pyr_d) {
        let e = if stop_grad_target { e.detach() } else { e.clone() };
        let (mined, s) = mine_hard_points(&e, d, alpha)?;
        terms.push(global_term(&e, &mined)?);
        stats.push(s);
    }
    Ok((sum_scalars(terms)?, stats))
}

/// Threshold-multiplier schedule for hard mining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardMiningConfig {
    /// Fixed multiplier; when set the warm-up schedule is not used.
    pub alpha: Option<f64>,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub warmup_fraction: f64,
}

impl Default for HardMiningConfig {
    fn default() -> Self {
        HardMiningConfig {
            alpha: None,
            alpha_start: -3.0,
            alpha_end: 1.0,
            warmup_fraction: 0.1,
        }
    }
}

impl HardMiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard_mining.warmup_fraction must be in (0, 1], got {}",
                self.warmup_fraction
            )));
        }
        let alphas = [Some(self.alpha_start), Some(self.alpha_end), self.alpha];
        if alphas.iter().flatten().any(|a| a.is_nan()) {
            return Err(Error::Config("hard_mining alpha values must not be NaN".into()));
        }
        Ok(())
    }
}

/// Linear ramp from `alpha_start` to `alpha_end` over the first
/// `warmup_fraction` of training, constant afterwards.
pub fn alpha_schedule(iteration: usize, total_iterations: usize, cfg: &HardMiningConfig) -> Result<f64> {
    if iteration >= total_iterations {
        return Err(Error::Config(format!(
            "iteration {iteration} outside schedule of {total_iterations} iterations"
        )));
    }
    cfg.validate()?;
    if let Some(alpha) = cfg.alpha {
        return Ok(alpha);
    }
    let warmup = cfg.warmup_fraction * total_iterations as f64;
    let it = iteration as f64;
    if it >= warmup {
        Ok(cfg.alpha_end)
    } else {
        Ok(cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * it / warmup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(data: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn distance_map_examples() {
        let a = t(&[1.0, 0.0], (1, 2, 1, 1));
        let b = t(&[0.0, 1.0], (1, 2, 1, 1));
        let m = distance_map(&a, &b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);

        let c = t(&[1.0, 1.0], (1, 2, 1, 1));
        let m = distance_map(&c, &a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((m[0] - 0.292_893_218_813_452_5).abs() < 1e-12);

        let m = distance_map(&c, &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m[0].abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(&[1.0, 0.0], (1, 2, 1, 1));
        let b = t(&[1.0, 0.0], (1, 1, 1, 2));
        assert!(matches!(distance_map(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(loss_global(&[a.clone()], &[], false), Err(Error::Shape(_))));
    }

    #[test]
    fn orthogonal_pyramids_cost_one_per_stage() {
        let e: Vec<Tensor> = (0..3).map(|_| t(&[1.0, 0.0, 0.0, 1.0], (1, 2, 1, 2))).collect();
        let d: Vec<Tensor> = (0..3).map(|_| t(&[0.0, 1.0, 1.0, 0.0], (1, 2, 1, 2))).collect();
        assert!((scalar(&loss_regional(&e, &d).unwrap()) - 3.0).abs() < 1e-12);
        assert!(scalar(&loss_regional(&e, &e).unwrap()).abs() < 1e-12);
        assert!(scalar(&loss_global(&e, &e, true).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_stay_finite() {
        let z = t(&[0.0; 4], (1, 2, 1, 2));
        let v = Var::from_tensor(&z).unwrap();
        let loss = loss_regional(&[z.clone()], &[v.as_tensor().clone()]).unwrap();
        assert!((scalar(&loss) - 1.0).abs() < 1e-12);
        let g = loss.backward().unwrap();
        let g = g.get(&v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn equal_distances_discard_nothing() {
        let (mask, stats) = easy_mask(&[0.3; 10], 1.0).unwrap();
        assert!(mask.iter().all(|m| !m));
        assert_eq!(stats.discarded, 0);
        let (mask, _) = easy_mask(&[0.1, 0.5, 0.9], f64::NEG_INFINITY).unwrap();
        assert!(mask.iter().all(|m| !m));
        assert!(easy_mask(&[0.2], 0.0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = HardMiningConfig::default();
        assert_eq!(alpha_schedule(0, 2000, &cfg).unwrap(), -3.0);
        assert_eq!(alpha_schedule(100, 2000, &cfg).unwrap(), -1.0);
        assert_eq!(alpha_schedule(200, 2000, &cfg).unwrap(), 1.0);
        assert_eq!(alpha_schedule(1999, 2000, &cfg).unwrap(), 1.0);
        assert!(alpha_schedule(2000, 2000, &cfg).is_err());
        let bad = HardMiningConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert!(alpha_schedule(0, 10, &bad).is_err());
        let fixed = HardMiningConfig {
            alpha: Some(0.5),
            ..cfg
        };
        assert_eq!(alpha_schedule(0, 10, &fixed).unwrap(), 0.5);
    }
}

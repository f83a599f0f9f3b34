//! Detection and segmentation metrics: AUROC, AUPRO, F1/ACC at the
//! optimal-F1 threshold, and the evaluation report that bundles them.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Default upper FPR bound for AUPRO integration.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Maximum number of thresholds swept by [`aupro`].
pub const MAX_PRO_THRESHOLDS: usize = 5000;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_scores<T: Copy + Into<f64>>(scores: &[T], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|&s| s.into().is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "both classes are required (positives {pos}, negatives {neg})"
        )));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied
/// scores get their average rank (a tie counts one half).
pub fn auroc<T: Copy + Into<f64>>(scores: &[T], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].into().total_cmp(&scores[b].into()));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let v: f64 = scores[order[i]].into();
        let mut j = i;
        while j < order.len() && scores[order[j]].into() == v {
            j += 1;
        }
        // ranks i+1 ..= j share the average
        let avg = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg * tied_pos as f64;
        i = j;
    }
    let (p, n) = class_counts(labels);
    let (p, n) = (p as f64, n as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn check_maps(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Metric(format!(
            "{} score maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != g.dim() {
            return Err(Error::Metric(format!(
                "image {i}: score map {:?} vs mask {:?}",
                m.dim(),
                g.dim()
            )));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of all images.
pub fn pixel_auroc(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<f64> {
    check_maps(maps, masks)?;
    let scores: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    auroc(&scores, &labels)
}

/// 8-connected component labelling. Returns labels (0 = background,
/// components numbered from 1 in raster order of their first pixel) and
/// the component count.
pub fn label_components(mask: ArrayView2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Thresholds for the PRO sweep: all distinct values, or quantile-spaced
/// values when there are more than [`MAX_PRO_THRESHOLDS`]. Descending.
fn pro_thresholds(sorted_desc: &[f32]) -> Vec<f32> {
    let mut unique: Vec<f32> = sorted_desc.to_vec();
    unique.dedup();
    if unique.len() <= MAX_PRO_THRESHOLDS {
        return unique;
    }
    let n = sorted_desc.len();
    let mut t: Vec<f32> = (0..MAX_PRO_THRESHOLDS)
        .map(|i| {
            let q = i as f64 / (MAX_PRO_THRESHOLDS - 1) as f64;
            sorted_desc[((q * (n - 1) as f64).round() as usize).min(n - 1)]
        })
        .collect();
    t.dedup();
    t
}

/// Area under the (FPR, PRO) curve from a list of points sorted by FPR,
/// clipped and interpolated at `limit`, normalized by `limit`.
pub fn integrate_clipped(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
    }
    area / limit
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
///
/// A pixel is predicted anomalous when its score is at least the
/// threshold. Regions are 8-connected components of each ground-truth
/// mask; PRO is the unweighted mean coverage over all regions in the set.
pub fn aupro(
    maps: &[ArrayView2<f32>],
    masks: &[ArrayView2<bool>],
    fpr_limit: f64,
    exec: Exec,
) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Metric(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    check_maps(maps, masks)?;
    let components = par::map(exec, masks, |m| label_components(*m));
    let n_regions: usize = components.iter().map(|c| c.1).sum();
    if n_regions == 0 {
        return Err(Error::Metric("no anomalous ground-truth pixels".into()));
    }
    // Each pixel carries its contribution to FPR (normal) or PRO (region).
    let mut pixels: Vec<(f32, f64, f64)> = Vec::new();
    let mut n_normal = 0usize;
    for (map, (labels, count)) in maps.iter().zip(&components) {
        let mut sizes = vec![0usize; count + 1];
        for &l in labels.iter() {
            sizes[l as usize] += 1;
        }
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if s.is_nan() {
                return Err(Error::Metric("NaN in score map".into()));
            }
            if l == 0 {
                n_normal += 1;
                pixels.push((s, 1.0, 0.0));
            } else {
                pixels.push((s, 0.0, 1.0 / (sizes[l as usize] * n_regions) as f64));
            }
        }
    }
    if n_normal == 0 {
        return Err(Error::Metric("no normal pixels; FPR is undefined".into()));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let sorted: Vec<f32> = pixels.iter().map(|p| p.0).collect();
    let thresholds = pro_thresholds(&sorted);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut pro, mut i) = (0.0f64, 0.0f64, 0usize);
    for t in thresholds {
        while i < pixels.len() && pixels[i].0 >= t {
            fp += pixels[i].1;
            pro += pixels[i].2;
            i += 1;
        }
        points.push((fp / n_normal as f64, pro));
    }
    Ok(integrate_clipped(&points, fpr_limit))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Result {
    pub f1: f64,
    pub acc: f64,
    /// Samples scoring strictly above the threshold are predicted
    /// anomalous. May be infinite.
    pub threshold: f64,
}

fn f1_acc(tp: usize, fp: usize, total_pos: usize, total: usize) -> (f64, f64) {
    let fn_ = total_pos - tp;
    let tn = total - total_pos - fp;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (f1, (tp + tn) as f64 / total as f64)
}

/// F1 and accuracy at the cut-point maximizing F1. Candidates are the
/// midpoints between consecutive distinct scores plus both infinities;
/// ties prefer higher accuracy, then the lower threshold.
pub fn f1_acc_at_optimal_f1(scores: &[f64], labels: &[bool]) -> Result<F1Result> {
    check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let total = scores.len();
    let (total_pos, _) = class_counts(labels);
    let (f1, acc) = f1_acc(0, 0, total_pos, total);
    let mut best = F1Result {
        f1,
        acc,
        threshold: f64::INFINITY,
    };
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    // Walking down the distinct scores, each group moves to the positive side.
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            (v + scores[order[i]]) / 2.0
        } else {
            f64::NEG_INFINITY
        };
        let (f1, acc) = f1_acc(tp, fp, total_pos, total);
        // thresholds only decrease, so equal scores favour the later one
        if f1 > best.f1 || (f1 == best.f1 && acc >= best.acc) {
            best = F1Result { f1, acc, threshold };
        }
    }
    Ok(best)
}

mod signed_inf {
    //! Serializes infinite thresholds as the strings "inf" / "-inf".
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if *x == f64::INFINITY => s.serialize_str("inf"),
            Some(x) if *x == f64::NEG_INFINITY => s.serialize_str("-inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Str(s)) => match s.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(de::Error::custom(format!("bad threshold '{other}'"))),
            },
        }
    }
}

/// Metric values for one image population. Metrics that cannot be
/// computed (no masks, a single class) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub i_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    #[serde(with = "signed_inf")]
    pub threshold_f1: Option<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: MetricSet,
    pub per_category: BTreeMap<String, MetricSet>,
}

/// Per-image evaluation inputs.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub image_scores: &'a [f64],
    pub labels: &'a [bool],
    pub categories: &'a [String],
    pub maps: &'a [Array2<f32>],
    /// `None` when the dataset has no pixel annotations.
    pub masks: Option<&'a [Array2<bool>]>,
}

fn metric_set(
    scores: &[f64],
    labels: &[bool],
    pixel: Option<(Vec<ArrayView2<f32>>, Vec<ArrayView2<bool>>)>,
    fpr_limit: f64,
    exec: Exec,
) -> MetricSet {
    let i_auroc = auroc(scores, labels).ok();
    let f1 = f1_acc_at_optimal_f1(scores, labels).ok();
    let (p_auroc, aupro_v) = match &pixel {
        Some((maps, masks)) => (
            pixel_auroc(maps, masks).ok(),
            aupro(maps, masks, fpr_limit, exec).ok(),
        ),
        None => (None, None),
    };
    MetricSet {
        i_auroc,
        p_auroc,
        aupro: aupro_v,
        f1: f1.map(|r| r.f1),
        acc: f1.map(|r| r.acc),
        threshold_f1: f1.map(|r| r.threshold),
        n_images: scores.len(),
    }
}

/// Builds the overall and per-category report. Pixel metrics pool all
/// images of the population.
pub fn evaluate(input: &EvalInput<'_>, fpr_limit: f64, exec: Exec) -> Result<EvalReport> {
    let n = input.image_scores.len();
    if n == 0 {
        return Err(Error::Metric("no images to evaluate".into()));
    }
    if input.labels.len() != n || input.categories.len() != n {
        return Err(Error::Metric("evaluation inputs differ in length".into()));
    }
    if let Some(masks) = input.masks {
        if masks.len() != n || input.maps.len() != n {
            return Err(Error::Metric("maps and masks must cover every image".into()));
        }
    }
    let subset = |idx: &[usize]| -> MetricSet {
        let scores: Vec<f64> = idx.iter().map(|&i| input.image_scores[i]).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| input.labels[i]).collect();
        let pixel = input.masks.map(|masks| {
            (
                idx.iter().map(|&i| input.maps[i].view()).collect(),
                idx.iter().map(|&i| masks[i].view()).collect(),
            )
        });
        metric_set(&scores, &labels, pixel, fpr_limit, exec)
    };
    let all: Vec<usize> = (0..n).collect();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in input.categories.iter().enumerate() {
        groups.entry(c.clone()).or_default().push(i);
    }
    let per_category = groups.iter().map(|(c, idx)| (c.clone(), subset(idx))).collect();
    Ok(EvalReport {
        overall: subset(&all),
        per_category,
    })
}

pub const CSV_COLUMNS: [&str; 8] = [
    "category",
    "i_auroc",
    "p_auroc",
    "aupro",
    "f1",
    "acc",
    "threshold_f1",
    "n_images",
];

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => if x > 0.0 { "inf" } else { "-inf" }.to_string(),
        Some(x) => format!("{x:.6}"),
    }
}

impl MetricSet {
    pub fn csv_fields(&self, category: &str) -> Vec<String> {
        vec![
            category.to_string(),
            fmt_opt(self.i_auroc),
            fmt_opt(self.p_auroc),
            fmt_opt(self.aupro),
            fmt_opt(self.f1),
            fmt_opt(self.acc),
            fmt_opt(self.threshold_f1),
            self.n_images.to_string(),
        ]
    }
}

impl EvalReport {
    /// One row per category followed by an `all` row; empty cells for
    /// metrics that were not computed.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
        for (cat, m) in &self.per_category {
            w.write_record(m.csv_fields(cat)).map_err(csv_err)?;
        }
        w.write_record(self.overall.csv_fields("all")).map_err(csv_err)?;
        w.flush().map_err(|e| Error::io("flushing csv", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        let v = auroc(&[0.2, 0.8, 0.8, 0.4], &[false, true, false, true]).unwrap();
        assert!((v - 0.625).abs() < 1e-12);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        let r = f1_acc_at_optimal_f1(&[0.1, 0.9], &[false, true]).unwrap();
        assert_eq!((r.f1, r.acc), (1.0, 1.0));
        assert!((r.threshold - 0.5).abs() < 1e-12);
        let r = f1_acc_at_optimal_f1(&[0.3, 0.3], &[false, true]).unwrap();
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn components_eight_connected() {
        let m = array![
            [true, false, false, true],
            [false, true, false, false],
            [false, false, false, true],
        ];
        let (labels, n) = label_components(m.view());
        assert_eq!(n, 3);
        assert_eq!(labels[[0, 0]], labels[[1, 1]]);
        assert_eq!(labels[[0, 3]], 2);
        assert_eq!(labels[[2, 3]], 3);
    }

    #[test]
    fn perfect_segmentation_has_unit_aupro() {
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| (2..5).contains(&y) && (3..7).contains(&x));
        let map = mask.mapv(|b| if b { 1.0f32 } else { 0.0 });
        let v = aupro(&[map.view()], &[mask.view()], 0.3, Exec::Sequential).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        let empty = Array2::from_elem((8, 8), false);
        assert!(aupro(&[map.view()], &[empty.view()], 0.3, Exec::Sequential).is_err());
        assert!(aupro(&[map.view()], &[mask.view()], 0.0, Exec::Sequential).is_err());
    }

    #[test]
    fn clipped_integration_interpolates_at_limit() {
        // y = x from 0 to 1: area to 0.5 is 0.125, normalized 0.25
        let v = integrate_clipped(&[(0.0, 0.0), (1.0, 1.0)], 0.5);
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_infinite_threshold() {
        let m = MetricSet {
            i_auroc: Some(0.5),
            p_auroc: None,
            aupro: None,
            f1: Some(0.6),
            acc: Some(0.5),
            threshold_f1: Some(f64::NEG_INFINITY),
            n_images: 2,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"-inf\""), "{json}");
        let back: MetricSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}

//! Anomaly maps from branch disagreement, image scores and the image-level
//! evaluation metrics.

use crate::error::{Error, Result};
use crate::pnm;
use crate::recon::ModelState;
use crate::tensor::{cosine_distance, Real, Tensor};
use crate::vit::ImageSample;

/// Dense row-major 2-D map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension {
                op: "map",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Map2 {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Map2 {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Grayscale bytes scaled so `hi` is white.
    pub fn to_gray(&self, hi: f64) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| pnm::quantize(v, 0.0, hi))
            .collect()
    }

    /// Colormapped RGB bytes, `hi` mapping to full red.
    pub fn to_heatmap(&self, hi: f64) -> Vec<u8> {
        let hi = if hi > 0.0 { hi } else { 1.0 };
        self.data
            .iter()
            .flat_map(|&v| pnm::colormap(v / hi))
            .collect()
    }
}

/// Per-token cosine distance between reference and decoded features,
/// averaged over layer groups and laid out on the token grid.
pub fn anomaly_map<T: Real>(
    reference: &[Tensor<T>],
    decoded: &[Tensor<T>],
    grid: (usize, usize),
) -> Result<Map2> {
    if reference.len() != decoded.len() || reference.is_empty() {
        return Err(Error::Config(format!(
            "{} reference groups vs {} decoded groups",
            reference.len(),
            decoded.len()
        )));
    }
    let n = grid.0 * grid.1;
    let mut acc = vec![0.0; n];
    for (r, d) in reference.iter().zip(decoded) {
        if r.shape() != d.shape() || r.shape().len() != 2 || r.shape()[0] != n {
            return Err(Error::Config(format!(
                "feature shapes {:?} / {:?} do not fit a {}x{} grid",
                r.shape(),
                d.shape(),
                grid.0,
                grid.1
            )));
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += cosine_distance(r.row(i), d.row(i))?.value;
        }
    }
    let groups = reference.len() as f64;
    Map2::new(
        grid.0,
        grid.1,
        acc.into_iter().map(|v| v / groups).collect(),
    )
}

/// Half-pixel-centred bilinear resampling.
pub fn bilinear(map: &Map2, height: usize, width: usize) -> Map2 {
    let coord = |dst: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, map.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, map.width);
            let top = map.at(y0, x0) * (1.0 - fx) + map.at(y0, x1) * fx;
            let bottom = map.at(y1, x0) * (1.0 - fx) + map.at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Map2 {
        height,
        width,
        data,
    }
}

/// Symmetric reflection about the half-sample boundary: `-1 → 0`, `n → n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with reflective padding; `sigma = 0` is a no-op.
pub fn gaussian_blur(map: &Map2, sigma: f64) -> Map2 {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (map.height, map.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                s += kw * map.data[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                s += kw * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    Map2 {
        height: h,
        width: w,
        data: out,
    }
}

pub fn upsample_smooth(map: &Map2, height: usize, width: usize, sigma: f64) -> Result<Map2> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!(
            "sigma {sigma} must be non-negative"
        )));
    }
    if height == 0 || width == 0 || map.data.is_empty() {
        return Err(Error::Argument("empty map".into()));
    }
    Ok(gaussian_blur(&bilinear(map, height, width), sigma))
}

/// Aggregation from pixel map to image score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreMode {
    /// Mean of the highest `fraction` of pixels, at least one.
    TopFraction(f64),
    Max,
    Mean,
}

impl Default for ScoreMode {
    fn default() -> Self {
        ScoreMode::TopFraction(0.01)
    }
}

impl ScoreMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "top1" | "top1%" => Some(ScoreMode::TopFraction(0.01)),
            "max" => Some(ScoreMode::Max),
            "mean" => Some(ScoreMode::Mean),
            _ => None,
        }
    }
}

pub fn image_score(map: &Map2, mode: ScoreMode) -> Result<f64> {
    if map.data.is_empty() {
        return Err(Error::Argument("cannot score an empty map".into()));
    }
    Ok(match mode {
        ScoreMode::Max => map.max(),
        ScoreMode::Mean => map.mean(),
        ScoreMode::TopFraction(frac) => {
            let n = map.data.len();
            let k = ((n as f64 * frac).floor() as usize).clamp(1, n);
            let mut sorted = map.data.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[..k].iter().sum::<f64>() / k as f64
        }
    })
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "both normal and anomalous samples are required".into(),
        ));
    }
    Ok((pos, neg))
}

/// Probability that a random anomalous sample outscores a random normal one,
/// ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie blocks, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let pos_f = pos as f64;
    Ok((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub f1: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "auc,f1,acc,sen,spe,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.auc, self.f1, self.acc, self.sen, self.spe, self.threshold
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "AUC {:.4}  F1 {:.4}  ACC {:.4}  SEN {:.4}  SPE {:.4}  (threshold {:.6})",
            self.auc, self.f1, self.acc, self.sen, self.spe, self.threshold
        )
    }
}

/// Confusion counts when predicting anomalous for `score >= t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], t: f64) -> Confusion {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// F1-maximizing threshold over all distinct scores (lowest on ties) and
/// the metrics at that threshold.
pub fn thresholded_metrics(scores: &[f64], labels: &[bool]) -> Result<MetricReport> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sweep thresholds upward; tokens strictly below t are predicted normal
    let mut best: Option<(f64, Confusion)> = None;
    let (mut below_pos, mut below_neg) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let c = Confusion {
            tp: pos - below_pos,
            fp: neg - below_neg,
            tn: below_neg,
            fn_: below_pos,
        };
        if best.is_none_or(|(_, b)| c.f1() > b.f1()) {
            best = Some((t, c));
        }
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
    }
    let (threshold, c) = best.expect("non-empty input");
    Ok(MetricReport {
        auc: auc(scores, labels)?,
        f1: c.f1(),
        acc: (c.tp + c.tn) as f64 / scores.len() as f64,
        sen: c.tp as f64 / pos as f64,
        spe: c.tn as f64 / neg as f64,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringConfig {
    pub sigma: f64,
    pub mode: ScoreMode,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            sigma: 4.0,
            mode: ScoreMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    pub id: String,
    pub token_map: Map2,
    pub pixel_map: Map2,
    pub score: f64,
}

pub fn score_image<T: Real>(
    state: &ModelState<T>,
    img: &ImageSample,
    cfg: &ScoringConfig,
) -> Result<AnomalyResult> {
    let trace = state.reconstruct(img)?;
    let token_map = anomaly_map(&trace.reference, &trace.decoded, trace.grid)?;
    let pixel_map = upsample_smooth(&token_map, img.height, img.width, cfg.sigma)?;
    let score = image_score(&pixel_map, cfg.mode)?;
    Ok(AnomalyResult {
        id: img.id.clone(),
        token_map,
        pixel_map,
        score,
    })
}

/// Scores every sample and computes the metric report.
pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    samples: &[ImageSample],
    cfg: &ScoringConfig,
) -> Result<(Vec<AnomalyResult>, MetricReport)> {
    let results = samples
        .iter()
        .map(|s| score_image(state, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label.is_anomalous()).collect();
    let report = thresholded_metrics(&scores, &labels)?;
    Ok((results, report))
}

/// Mean pixel value inside and outside `mask`.
pub fn mask_contrast(map: &Map2, mask: &[bool]) -> Result<(f64, f64)> {
    if mask.len() != map.data.len() {
        return Err(Error::Dimension {
            op: "mask contrast",
            lhs: vec![map.height, map.width],
            rhs: vec![mask.len()],
        });
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.data.iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Argument(
            "mask must be neither empty nor full".into(),
        ));
    }
    Ok((si / ni as f64, so / no as f64))
}

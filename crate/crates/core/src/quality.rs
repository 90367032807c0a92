//! Image-quality metrics and pluggable fitness functions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::Shape;
use crate::autodiff::{resize_bilinear, Tensor};
use crate::dip::{task_loss, TaskKind, TaskSpec};

/// Returned by [`psnr`] for identical images.
pub const PSNR_IDENTICAL: f64 = f64::MAX;
/// Ceiling of the PSNR-based fitness, in dB.
pub const PSNR_CEILING: f64 = 60.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("image {0} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(Shape),
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("fitness needs a ground-truth reference")]
    MissingReference,
    #[error("unknown fitness `{0}`")]
    UnknownFitness(String),
    #[error("restored image {actual} does not match the task target {expected}")]
    RestoredShape { expected: Shape, actual: Shape },
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), QualityError> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(QualityError::ShapeMismatch(a.shape, b.shape))
    }
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, QualityError> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, QualityError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * m.log10()
    })
}

/// Single-channel f64 view: luma for RGB, identity for gray.
pub fn to_gray(a: &Tensor<f32>) -> Result<Vec<f64>, QualityError> {
    let plane = a.plane();
    match a.shape.channels {
        1 => Ok(a.data.iter().map(|&v| v as f64).collect()),
        3 => Ok((0..plane)
            .map(|i| (0..3).map(|c| LUMA[c] * a.data[c * plane + i] as f64).sum())
            .collect()),
        c => Err(QualityError::Channels(c)),
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(i, &t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k
                .iter()
                .enumerate()
                .map(|(i, &t)| t * rows[(oy + i) * ow + ox])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows of the luma planes, with dynamic range 1.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, QualityError> {
    same_shape(a, b)?;
    let (h, w) = (a.shape.height, a.shape.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(QualityError::TooSmall(a.shape));
    }
    let x = to_gray(a)?;
    let y = to_gray(b)?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = (SSIM_K1).powi(2);
    let c2 = (SSIM_K2).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Outcome of scoring one candidate. Higher is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub value: f64,
    #[serde(default)]
    pub components: BTreeMap<String, f64>,
    pub valid: bool,
}

impl FitnessScore {
    pub fn invalid() -> Self {
        Self {
            value: 0.0,
            components: BTreeMap::new(),
            valid: false,
        }
    }

    pub fn valid(value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::new(),
            valid: true,
        }
    }

    pub fn with(mut self, key: &str, v: f64) -> Self {
        self.components.insert(key.to_string(), v);
        self
    }
}

/// What a fitness function may look at.
#[derive(Debug, Clone, Copy)]
pub struct FitnessInput<'a> {
    pub restored: &'a Tensor<f32>,
    pub task: &'a TaskSpec,
    /// Clean image, available only in controlled experiments.
    pub reference: Option<&'a Tensor<f32>>,
}

pub trait FitnessPlugin: Send + Sync {
    fn name(&self) -> &'static str;
    fn needs_reference(&self) -> bool {
        false
    }
    /// Must be deterministic, non-negative and at most 1.
    fn score(&self, input: &FitnessInput<'_>) -> Result<FitnessScore, QualityError>;
}

/// PSNR against the reference, clamped to `[0, 60]` dB and scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePsnr;

impl FitnessPlugin for OraclePsnr {
    fn name(&self) -> &'static str {
        "oracle-psnr"
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn score(&self, input: &FitnessInput<'_>) -> Result<FitnessScore, QualityError> {
        let reference = input.reference.ok_or(QualityError::MissingReference)?;
        let db = psnr(input.restored, reference)?;
        let mut s = FitnessScore::valid(db.clamp(0.0, PSNR_CEILING) / PSNR_CEILING)
            .with("psnr", db.min(PSNR_CEILING * 10.0));
        if reference.shape.height >= SSIM_WINDOW && reference.shape.width >= SSIM_WINDOW {
            s = s.with("ssim", ssim(input.restored, reference)?);
        }
        Ok(s)
    }
}

/// `exp(-task loss)`: how well the output explains the observation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReconProxy;

impl FitnessPlugin for ReconProxy {
    fn name(&self) -> &'static str {
        "recon-proxy"
    }

    fn score(&self, input: &FitnessInput<'_>) -> Result<FitnessScore, QualityError> {
        let (loss, _) = task_loss(input.restored, input.task).map_err(|_| {
            QualityError::RestoredShape {
                expected: input.task.target_shape(),
                actual: input.restored.shape,
            }
        })?;
        Ok(FitnessScore::valid((-loss).exp()).with("loss", loss))
    }
}

/// Blind score mixing agreement with the observation and smoothness.
#[derive(Debug, Clone, Copy)]
pub struct ProxyPerceptual {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ProxyPerceptual {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
        }
    }
}

/// Mean absolute forward difference over both axes and all channels.
pub fn total_variation(a: &Tensor<f32>) -> f64 {
    let Shape {
        channels,
        height,
        width,
    } = a.shape;
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let v = a.at(c, y, x) as f64;
                if x + 1 < width {
                    sum += (a.at(c, y, x + 1) as f64 - v).abs();
                    count += 1;
                }
                if y + 1 < height {
                    sum += (a.at(c, y + 1, x) as f64 - v).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

impl FitnessPlugin for ProxyPerceptual {
    fn name(&self) -> &'static str {
        "proxy-perceptual"
    }

    fn score(&self, input: &FitnessInput<'_>) -> Result<FitnessScore, QualityError> {
        let task = input.task;
        let expected = task.target_shape();
        if input.restored.shape != expected {
            return Err(QualityError::RestoredShape {
                expected,
                actual: input.restored.shape,
            });
        }
        let observed = &task.observed;
        let (pred, weights) = match task.kind {
            TaskKind::Upscale => (
                resize_bilinear(input.restored, observed.shape.height, observed.shape.width),
                None,
            ),
            TaskKind::Inpaint => {
                let m = task.mask.as_ref().ok_or(QualityError::MissingReference)?;
                let plane = m.plane();
                let w: Vec<f64> = (0..observed.data.len())
                    .map(|i| {
                        if m.shape.channels == 1 {
                            m.data[i % plane] as f64
                        } else {
                            m.data[i] as f64
                        }
                    })
                    .collect();
                (input.restored.clone(), Some(w))
            }
            TaskKind::Denoise => (input.restored.clone(), None),
        };
        let mut se = 0.0;
        let mut n = 0.0;
        for (i, (&p, &o)) in pred.data.iter().zip(&observed.data).enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            let d = p as f64 - o as f64;
            se += w * d * d;
            n += w;
        }
        let rmse = if n > 0.0 { (se / n).sqrt() } else { 0.0 };
        let fidelity = (1.0 - rmse).clamp(0.0, 1.0);
        let tv = total_variation(input.restored);
        let smooth = (1.0 - tv).clamp(0.0, 1.0);
        let value = (self.alpha * fidelity + self.beta * smooth).clamp(0.0, 1.0);
        Ok(FitnessScore::valid(value)
            .with("fidelity", fidelity)
            .with("smoothness", smooth))
    }
}

/// Built-in fitness functions, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FitnessKind {
    #[serde(rename = "oracle-psnr")]
    OraclePsnr,
    #[serde(rename = "recon-proxy")]
    ReconProxy,
    #[serde(rename = "proxy-perceptual")]
    ProxyPerceptual,
}

impl FitnessKind {
    pub const ALL: [FitnessKind; 3] = [
        FitnessKind::OraclePsnr,
        FitnessKind::ReconProxy,
        FitnessKind::ProxyPerceptual,
    ];

    pub fn plugin(self) -> Box<dyn FitnessPlugin> {
        match self {
            FitnessKind::OraclePsnr => Box::new(OraclePsnr),
            FitnessKind::ReconProxy => Box::new(ReconProxy),
            FitnessKind::ProxyPerceptual => Box::new(ProxyPerceptual::default()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FitnessKind::OraclePsnr => "oracle-psnr",
            FitnessKind::ReconProxy => "recon-proxy",
            FitnessKind::ProxyPerceptual => "proxy-perceptual",
        }
    }
}

impl fmt::Display for FitnessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FitnessKind {
    type Err = QualityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| QualityError::UnknownFitness(s.to_string()))
    }
}

/// Scores a restored image; `None` (an invalid, diverged or failed
/// candidate) always scores exactly zero.
pub fn fitness(
    restored: Option<&Tensor<f32>>,
    task: &TaskSpec,
    reference: Option<&Tensor<f32>>,
    plugin: &dyn FitnessPlugin,
) -> Result<FitnessScore, QualityError> {
    if plugin.needs_reference() && reference.is_none() {
        return Err(QualityError::MissingReference);
    }
    match restored {
        None => Ok(FitnessScore::invalid()),
        Some(r) => plugin.score(&FitnessInput {
            restored: r,
            task,
            reference,
        }),
    }
}

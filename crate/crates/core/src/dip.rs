//! Deep-image-prior training: fit one network to one degraded image from a
//! fixed noise field under a task-specific reconstruction loss.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{compile, CompileOptions, Compiled, InvalidReason, Shape};
use crate::autodiff::{
    self, backward, forward, masked_loss, resize_bilinear, resize_bilinear_backward, LossNorm,
    Real, Tensor,
};
use crate::genome::{Architecture, Genome, Layout, UnitParams, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("in-painting requires a mask")]
    MissingMask,
    #[error("mask {mask} does not cover image {image}")]
    MaskShape { mask: Shape, image: Shape },
    #[error("mask values must be exactly 0 or 1")]
    MaskNotBinary,
    #[error("upscaling requires a scale factor of 2, 4 or 8, got {0:?}")]
    BadScale(Option<u32>),
    #[error("output {actual} does not match the task's target {expected}")]
    OutputShape { expected: Shape, actual: Shape },
    #[error("graph maps {input} to {output}, task needs {expected_input} to {expected_output}")]
    GraphShape {
        input: Shape,
        output: Shape,
        expected_input: Shape,
        expected_output: Shape,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Denoise,
    Inpaint,
    Upscale,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Upscale => "upscale",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "denoise" => Ok(TaskKind::Denoise),
            "inpaint" => Ok(TaskKind::Inpaint),
            "upscale" => Ok(TaskKind::Upscale),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// A restoration problem: the degraded image and how it was degraded.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub observed: Tensor<f32>,
    /// Zero inside the hole. One channel (broadcast) or one per image channel.
    pub mask: Option<Tensor<f32>>,
    pub scale: Option<u32>,
    pub loss_norm: LossNorm,
}

impl TaskSpec {
    pub fn denoise(observed: Tensor<f32>) -> Self {
        Self {
            kind: TaskKind::Denoise,
            observed,
            mask: None,
            scale: None,
            loss_norm: LossNorm::L2,
        }
    }

    pub fn inpaint(observed: Tensor<f32>, mask: Tensor<f32>) -> Result<Self, TaskError> {
        let t = Self {
            kind: TaskKind::Inpaint,
            observed,
            mask: Some(mask),
            scale: None,
            loss_norm: LossNorm::L2,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn upscale(observed: Tensor<f32>, scale: u32) -> Result<Self, TaskError> {
        let t = Self {
            kind: TaskKind::Upscale,
            observed,
            mask: None,
            scale: Some(scale),
            loss_norm: LossNorm::L2,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_loss(mut self, norm: LossNorm) -> Self {
        self.loss_norm = norm;
        self
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self.kind {
            TaskKind::Inpaint => {
                let mask = self.mask.as_ref().ok_or(TaskError::MissingMask)?;
                let img = self.observed.shape;
                if !mask.shape.same_plane(&img)
                    || (mask.shape.channels != 1 && mask.shape.channels != img.channels)
                {
                    return Err(TaskError::MaskShape {
                        mask: mask.shape,
                        image: img,
                    });
                }
                if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(TaskError::MaskNotBinary);
                }
            }
            TaskKind::Upscale => {
                if !matches!(self.scale, Some(2 | 4 | 8)) {
                    return Err(TaskError::BadScale(self.scale));
                }
            }
            TaskKind::Denoise => {}
        }
        Ok(())
    }

    /// Shape of the image the network must produce.
    pub fn target_shape(&self) -> Shape {
        let s = self.observed.shape;
        match (self.kind, self.scale) {
            (TaskKind::Upscale, Some(k)) => {
                Shape::new(s.channels, s.height * k as usize, s.width * k as usize)
            }
            _ => s,
        }
    }

    /// Shape of the noise field feeding the network.
    pub fn input_shape(&self, noise_channels: usize) -> Shape {
        let t = self.target_shape();
        Shape::new(noise_channels, t.height, t.width)
    }

    /// Per-element loss weights for in-painting, expanded to the image shape.
    fn weights(&self) -> Option<Vec<f32>> {
        let mask = self.mask.as_ref()?;
        if mask.shape == self.observed.shape {
            return Some(mask.data.clone());
        }
        let plane = mask.plane();
        Some(
            (0..self.observed.shape.channels)
                .flat_map(|_| mask.data[..plane].iter().copied())
                .collect(),
        )
    }
}

/// Compiles decoded units for a task's input and output sizes.
pub fn compile_for_task(
    units: &[UnitParams],
    task: &TaskSpec,
    noise_channels: usize,
    opts: &CompileOptions,
) -> Compiled {
    compile(units, task.input_shape(noise_channels), task.target_shape(), opts)
}

/// Deterministic piecewise-smooth RGB test image in `[0, 1]`: a color
/// gradient with a disc, a rectangle and a soft stripe pattern.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.gen::<f32>();
    let base = [[u(), u(), u()], [u(), u(), u()]];
    let disc = ([u(), u(), u()], 0.25 + 0.5 * u(), 0.25 + 0.5 * u(), 0.15 + 0.15 * u());
    let rect = ([u(), u(), u()], 0.1 + 0.4 * u(), 0.1 + 0.4 * u(), 0.3 + 0.2 * u());
    let freq = 2.0 + 4.0 * u();
    Tensor::from_fn(Shape::new(3, height, width), |c, y, x| {
        let fy = (y as f32 + 0.5) / height as f32;
        let fx = (x as f32 + 0.5) / width as f32;
        let t = 0.5 * (fx + fy);
        let mut v = base[0][c] * (1.0 - t) + base[1][c] * t;
        let (col, cy, cx, r) = disc;
        if (fy - cy).powi(2) + (fx - cx).powi(2) < r * r {
            v = col[c];
        }
        let (col, ry, rx, side) = rect;
        if (ry..ry + side).contains(&fy) && (rx..rx + side * 0.8).contains(&fx) {
            v = 0.5 * (v + col[c]);
        }
        v += 0.08 * (std::f32::consts::TAU * freq * fx).sin() * fy;
        v.clamp(0.0, 1.0)
    })
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` and clips to
/// `[0, 1]`.
pub fn add_gaussian_noise(image: &Tensor<f32>, sigma: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = image
        .data
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::from_vec(image.shape, data)
}

/// Hand-fixed stand-in for the standard deep-image-prior hourglass: five
/// symmetric units of 3x3 convolutions with 64 channels and 4-channel mirror
/// skips.
pub fn baseline_genome() -> Genome {
    let n = 5;
    let units = (0..n)
        .map(|u| UnitParams {
            enc_skip: false,
            enc_filter_bits: 1,
            enc_chan_bits: 7,
            dec_skip: false,
            dec_filter_bits: 1,
            dec_chan_bits: 7,
            skip_gates: (0..n).map(|j| if j == u { 4 } else { 0 }).collect(),
        })
        .collect();
    let layout = Layout {
        units: n,
        variant: Variant::Symmetric,
    };
    Genome::encode(
        layout,
        &Architecture {
            units,
            epoch_code: None,
        },
    )
    .expect("baseline is representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub noise_channels: usize,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-3,
            noise_channels: 32,
            noise_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.epochs == 0 {
            return Err(TaskError::Config("epochs must be at least 1".into()));
        }
        if self.noise_channels == 0 {
            return Err(TaskError::Config("noise channels must be at least 1".into()));
        }
        if !(self.noise_amplitude > 0.0) {
            return Err(TaskError::Config("noise amplitude must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TaskError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn init_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

/// Fixed input field with i.i.d. entries uniform on `[0, amplitude]`.
pub fn make_noise_field(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    amplitude: f64,
) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(channels, height, width), |_, _, _| {
        (rng.gen::<f64>() * amplitude) as f32
    })
}

/// Task loss of a network output and its gradient with respect to that
/// output. Losses are mean-reduced over the observed (unmasked) elements.
pub fn task_loss<T: Real>(
    output: &Tensor<T>,
    task: &TaskSpec,
) -> Result<(f64, Tensor<T>), TaskError> {
    let expected = task.target_shape();
    if output.shape != expected {
        return Err(TaskError::OutputShape {
            expected,
            actual: output.shape,
        });
    }
    let observed: Tensor<T> = task.observed.cast();
    match task.kind {
        TaskKind::Denoise => {
            let (l, g) = masked_loss(&output.data, &observed.data, None, task.loss_norm);
            Ok((l, Tensor::from_vec(output.shape, g)))
        }
        TaskKind::Inpaint => {
            let w: Vec<T> = task
                .weights()
                .ok_or(TaskError::MissingMask)?
                .into_iter()
                .map(|v| T::of(v as f64))
                .collect();
            let (l, g) = masked_loss(&output.data, &observed.data, Some(&w), task.loss_norm);
            Ok((l, Tensor::from_vec(output.shape, g)))
        }
        TaskKind::Upscale => {
            let s = observed.shape;
            let down = resize_bilinear(output, s.height, s.width);
            let (l, g) = masked_loss(&down.data, &observed.data, None, task.loss_norm);
            let g = resize_bilinear_backward(&Tensor::from_vec(s, g), output.shape);
            Ok((l, g))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Cumulative wall-clock milliseconds at the end of each epoch.
    pub wall_ms: Vec<f64>,
    pub total_ms: f64,
    pub diverged: bool,
    pub timed_out: bool,
    pub invalid: Option<InvalidReason>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,wall_ms\n");
        for (i, (l, t)) in self.losses.iter().zip(&self.wall_ms).enumerate() {
            out.push_str(&format!("{},{},{:.3}\n", i + 1, l, t));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `None` for invalid, diverged or timed-out runs.
    pub restored: Option<Tensor<f32>>,
    pub trace: TrainTrace,
}

/// Trains `compiled` on `task`. Invalid architectures yield an empty,
/// flagged trace rather than an error.
pub fn train(
    compiled: &Compiled,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TaskError> {
    train_until(compiled, task, cfg, None)
}

/// [`train`] with an optional wall-clock deadline checked between epochs.
pub fn train_until(
    compiled: &Compiled,
    task: &TaskSpec,
    cfg: &TrainConfig,
    deadline: Option<Instant>,
) -> Result<TrainOutcome, TaskError> {
    task.validate()?;
    cfg.validate()?;
    let graph = match compiled {
        Compiled::Valid(g) => g,
        Compiled::Invalid(reason) => {
            return Ok(TrainOutcome {
                restored: None,
                trace: TrainTrace {
                    invalid: Some(reason.clone()),
                    ..Default::default()
                },
            })
        }
    };
    let input_shape = task.input_shape(cfg.noise_channels);
    if graph.input_shape != input_shape || graph.output_shape != task.target_shape() {
        return Err(TaskError::GraphShape {
            input: graph.input_shape,
            output: graph.output_shape,
            expected_input: input_shape,
            expected_output: task.target_shape(),
        });
    }

    let start = Instant::now();
    let noise = make_noise_field(
        cfg.seed,
        cfg.noise_channels,
        input_shape.height,
        input_shape.width,
        cfg.noise_amplitude,
    );
    let mut params = autodiff::init_params::<f32>(graph, cfg.init_seed());
    let mut trace = TrainTrace::default();
    let elapsed = |s: Instant| s.elapsed().as_secs_f64() * 1e3;

    for _ in 0..cfg.epochs {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            trace.timed_out = true;
            break;
        }
        let (out, tape) = forward(graph, &params, &noise).expect("shapes checked above");
        let (loss, grad) = task_loss(&out, task)?;
        if !loss.is_finite() {
            trace.diverged = true;
            break;
        }
        trace.losses.push(loss);
        backward(graph, &mut params, &tape, &grad).expect("tape from this graph");
        params.adam_step(cfg.learning_rate);
        trace.wall_ms.push(elapsed(start));
    }

    let restored = if trace.diverged || trace.timed_out {
        None
    } else {
        let (out, _) = forward(graph, &params, &noise).expect("shapes checked above");
        if out.is_finite() {
            Some(out)
        } else {
            trace.diverged = true;
            None
        }
    };
    trace.total_ms = elapsed(start);
    Ok(TrainOutcome { restored, trace })
}

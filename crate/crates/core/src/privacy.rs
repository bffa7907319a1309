//! Inversion attacks: reconstruct an input from a ReLU feature map or from
//! sparsity statistics of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

/// Logistic relaxation of the zero fraction: mean of `sigmoid(-beta * a)`.
pub fn soft_sparsity(channel: &[f32], beta: f32) -> f32 {
    if channel.is_empty() {
        return 0.0;
    }
    channel.iter().map(|&a| soft_zero(a, beta)).sum::<f32>() / channel.len() as f32
}

fn soft_zero(a: f32, beta: f32) -> f32 {
    1.0 / (1.0 + (beta * a).exp())
}

/// What the attacker observes about the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    /// The full feature map.
    Fm,
    /// Per channel, the soft zero count of each row.
    HSp,
    /// Per channel, the soft zero count of each column.
    VSp,
    /// Per channel, the soft sparsity of the whole map.
    WSp,
}

impl PropertyKind {
    pub const ALL: [PropertyKind; 4] = [PropertyKind::Fm, PropertyKind::HSp, PropertyKind::VSp, PropertyKind::WSp];

    pub fn name(self) -> &'static str {
        match self {
            PropertyKind::Fm => "fm",
            PropertyKind::HSp => "h_sp",
            PropertyKind::VSp => "v_sp",
            PropertyKind::WSp => "w_sp",
        }
    }
}

impl std::str::FromStr for PropertyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PropertyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown property `{s}` (fm, h_sp, v_sp, w_sp)")))
    }
}

fn dims(map: &Tensor) -> (usize, usize, usize) {
    match map.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => (map.len(), 1, 1),
    }
}

/// Property values of a ReLU output.
pub fn property(kind: PropertyKind, map: &Tensor, beta: f32) -> Vec<f32> {
    let (c, h, w) = dims(map);
    let x = map.data();
    match kind {
        PropertyKind::Fm => x.to_vec(),
        PropertyKind::HSp => (0..c * h)
            .map(|row| x[row * w..(row + 1) * w].iter().map(|&a| soft_zero(a, beta)).sum())
            .collect(),
        PropertyKind::VSp => {
            let mut out = vec![0.0f32; c * w];
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        out[ch * w + col] += soft_zero(x[(ch * h + r) * w + col], beta);
                    }
                }
            }
            out
        }
        PropertyKind::WSp => (0..c).map(|ch| soft_sparsity(&x[ch * h * w..(ch + 1) * h * w], beta)).collect(),
    }
}

/// Squared error between the map's property and `target`, relative to the
/// target's squared norm, and its gradient with respect to the map.
fn property_loss(kind: PropertyKind, map: &Tensor, beta: f32, target: &[f32]) -> (f32, Vec<f32>) {
    let (c, h, w) = dims(map);
    let values = property(kind, map, beta);
    let n = target.iter().map(|t| t * t).sum::<f32>().max(1e-12);
    let dv: Vec<f32> = values.iter().zip(target).map(|(v, t)| 2.0 * (v - t) / n).collect();
    let loss = values.iter().zip(target).map(|(v, t)| (v - t) * (v - t)).sum::<f32>() / n;
    let x = map.data();
    let dsoft = |a: f32| {
        let s = soft_zero(a, beta);
        -beta * s * (1.0 - s)
    };
    let grad = match kind {
        PropertyKind::Fm => dv,
        _ => (0..x.len())
            .map(|i| {
                let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
                let up = match kind {
                    PropertyKind::HSp => dv[ch * h + r],
                    PropertyKind::VSp => dv[ch * w + col],
                    _ => dv[ch] / (h * w) as f32,
                };
                up * dsoft(x[i])
            })
            .collect(),
    };
    debug_assert_eq!(c * h * w, x.len());
    (loss, grad)
}

/// Property observed from a real input. The reference input is kept for
/// scoring only.
#[derive(Debug, Clone)]
pub struct InversionTarget {
    pub kind: PropertyKind,
    pub relu_index: usize,
    pub beta: f32,
    pub values: Vec<f32>,
    pub reference: Tensor,
}

impl InversionTarget {
    pub fn capture(model: &Model, kind: PropertyKind, relu_index: usize, reference: Tensor, beta: f32) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::config("beta must be positive"));
        }
        let map = model.relu_output(&reference, relu_index)?;
        Ok(InversionTarget {
            kind,
            relu_index,
            beta,
            values: property(kind, &map, beta),
            reference,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f32,
    /// Step size halves after every `decay_every` steps.
    pub decay_every: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 500,
            step_size: 1.0,
            decay_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub kind: PropertyKind,
    pub relu_index: usize,
    pub reconstruction: Tensor,
    /// Objective before each step.
    pub objective: Vec<f32>,
    pub mse: f64,
    pub ssim: f64,
    /// The objective or its gradient became non-finite.
    pub failed: bool,
}

/// Serialisable summary of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub kind: PropertyKind,
    pub relu_index: usize,
    pub steps: usize,
    pub final_objective: Option<f32>,
    pub mse: f64,
    pub ssim: f64,
    pub failed: bool,
}

impl InversionReport {
    pub fn record(&self) -> ReportRecord {
        ReportRecord {
            kind: self.kind,
            relu_index: self.relu_index,
            steps: self.objective.len(),
            final_objective: self.objective.last().copied(),
            mse: self.mse,
            ssim: self.ssim,
            failed: self.failed,
        }
    }
}

/// Gradient descent on a uniformly random input so that its property matches
/// the target. Pixels are clamped to `[0, 1]` after each step.
pub fn invert(model: &Model, target: &InversionTarget, config: &InversionConfig) -> Result<InversionReport> {
    let layer = model.relu_layer(target.relu_index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[stream::ATTACK]));
    let shape = model.input_shape().to_vec();
    let n: usize = shape.iter().product();
    let init: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    let mut x = Tensor::new(shape, init)?;
    let (kind, beta, values) = (target.kind, target.beta, &target.values);
    let objective = |map: &Tensor| property_loss(kind, map, beta, values);

    let mut trajectory = Vec::with_capacity(config.steps);
    let mut failed = false;
    let mut step = config.step_size;
    for t in 0..config.steps {
        if config.decay_every > 0 && t > 0 && t % config.decay_every == 0 {
            step *= 0.5;
        }
        let (loss, grad) = model.objective_and_input_gradient(&x, layer, objective)?;
        if !loss.is_finite() || !grad.is_finite() {
            failed = true;
            break;
        }
        trajectory.push(loss);
        for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v - step * g).clamp(0.0, 1.0);
        }
    }
    Ok(InversionReport {
        kind,
        relu_index: target.relu_index,
        mse: mse(x.data(), target.reference.data()),
        ssim: ssim(x.data(), target.reference.data()),
        reconstruction: x,
        objective: trajectory,
        failed,
    })
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Structural similarity computed over the whole image as one window, for
/// pixel values in `[0, 1]`.
pub fn ssim(a: &[f32], b: &[f32]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = a.len().max(1) as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Binary PGM with the images side by side, separated by one white column.
pub fn pgm_grid(images: &[&Tensor]) -> Result<Vec<u8>> {
    let (h, w) = match images.first().map(|t| t.shape()) {
        Some([1, h, w]) | Some([h, w]) => (*h, *w),
        _ => return Err(Error::config("PGM export needs single-channel images")),
    };
    if images.iter().any(|t| t.len() != h * w) {
        return Err(Error::config("PGM images must share one size"));
    }
    let width = images.len() * (w + 1) - 1;
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for r in 0..h {
        for (k, img) in images.iter().enumerate() {
            if k > 0 {
                out.push(255);
            }
            out.extend(img.data()[r * w..(r + 1) * w].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(out)
}

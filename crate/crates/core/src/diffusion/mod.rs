//! Preconditioned denoiser, score function and the patch-wise training objective.
//!
//! The denoiser wraps the raw network `F` as
//! `D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise)` on image channels,
//! with the coordinate channels passed through unscaled and their outputs dropped.

mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{forward_graph, DenoiserParams, ParamVars, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use train::{train, MetricRecord, StepReport, TrainConfig, TrainOutcome, TrainState, Trainer};

/// Log-normal training noise distribution with clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaDistribution {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        SigmaDistribution {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }
}

impl SigmaDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) {
            return Err(Error::config("sigma_min", "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min) {
            return Err(Error::config("sigma_max", "must exceed sigma_min"));
        }
        if !(self.p_std >= 0.0) {
            return Err(Error::config("p_std", "must be non-negative"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("sigma_data", "must be positive"));
        }
        Ok(())
    }
}

/// Draws `n` noise levels with `ln(sigma) ~ N(p_mean, p_std^2)`, clipped to `[sigma_min, sigma_max]`.
pub fn sample_sigma<T: Scalar, R: Rng + ?Sized>(dist: &SigmaDistribution, n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let s = (dist.p_mean + dist.p_std * z).exp();
            T::of(s.clamp(dist.sigma_min, dist.sigma_max))
        })
        .collect()
}

/// Noise-level dependent scalings of the denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Precond {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Per-sample weight applied to the squared denoising error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`
    #[default]
    Edm,
    Unweighted,
}

impl LossWeighting {
    pub fn weight(&self, sigma: f64, sigma_data: f64) -> f64 {
        match self {
            LossWeighting::Edm => (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2),
            LossWeighting::Unweighted => 1.0,
        }
    }
}

fn check_input<T: Scalar>(
    params: &DenoiserParams<T>,
    x: &Tensor<T>,
    sigma: &[T],
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let cfg = params.config();
    if c != cfg.in_channels {
        return Err(Error::shape(&[b, cfg.in_channels, h, w], x.shape()));
    }
    if sigma.len() != b {
        return Err(Error::shape(&[b], &[sigma.len()]));
    }
    if !x.all_finite() {
        return Err(Error::Numerical {
            path: "denoiser input".into(),
            reason: "non-finite values".into(),
        });
    }
    Ok((b, c - 2, h, w))
}

/// Records `D(x; sigma)` restricted to image channels, `[B, C, h, w]`.
pub fn denoise_graph<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    params: &DenoiserParams<T>,
    x_with_coords: &Tensor<T>,
    sigma: &[T],
    sigma_data: f64,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let (b, c, h, w) = check_input(params, x_with_coords, sigma)?;
    let hw = h * w;
    let pre: Vec<Precond> = sigma.iter().map(|s| Precond::new(s.as_f64(), sigma_data)).collect();
    // c_in scales image channels only; coordinate channels stay as given
    let mut scaled = x_with_coords.clone();
    let mut skip = Tensor::zeros(&[b, c, h, w]);
    for (n, p) in pre.iter().enumerate() {
        let base = n * (c + 2) * hw;
        let (c_in, c_skip) = (T::of(p.c_in), T::of(p.c_skip));
        for i in 0..c * hw {
            let v = x_with_coords.data()[base + i];
            scaled.data_mut()[base + i] = c_in * v;
            skip.data_mut()[n * c * hw + i] = c_skip * v;
        }
    }
    let noise_cond: Vec<T> = pre.iter().map(|p| T::of(p.c_noise)).collect();
    let c_out: Vec<T> = pre.iter().map(|p| T::of(p.c_out)).collect();
    let xin = tape.constant(scaled);
    let raw = forward_graph(tape, pv, params.config(), xin, &noise_cond, labels)?;
    let img = tape.channels(raw, 0, c)?;
    tape.affine_per_sample(img, &c_out, &skip)
}

/// Denoised image channels `[B, C, h, w]` for a noisy input with coordinate channels.
pub fn denoise<T: Scalar>(
    params: &DenoiserParams<T>,
    x_with_coords: &Tensor<T>,
    sigma: &[T],
    sigma_data: f64,
    labels: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let d = denoise_graph(&mut tape, &pv, params, x_with_coords, sigma, sigma_data, labels)?;
    Ok(tape.value(d).clone())
}

/// `(D(x; sigma) - x) / sigma^2` on image channels.
pub fn score_from_denoised<T: Scalar>(
    denoised: &Tensor<T>,
    x_with_coords: &Tensor<T>,
    sigma: &[T],
) -> Result<Tensor<T>> {
    let (b, c, h, w) = denoised.dims4()?;
    if sigma.len() != b {
        return Err(Error::shape(&[b], &[sigma.len()]));
    }
    if let Some(s) = sigma.iter().find(|s| !(s.abs() > T::zero())) {
        return Err(Error::Numerical {
            path: "sigma".into(),
            reason: format!("score undefined at sigma = {s}"),
        });
    }
    let x_img = x_with_coords.channels(0, c)?;
    let hw = c * h * w;
    let mut out = denoised.clone();
    for (n, &s) in sigma.iter().enumerate() {
        let inv = T::one() / (s * s);
        for i in n * hw..(n + 1) * hw {
            out.data_mut()[i] = (denoised.data()[i] - x_img.data()[i]) * inv;
        }
    }
    Ok(out)
}

pub fn score<T: Scalar>(
    params: &DenoiserParams<T>,
    x_with_coords: &Tensor<T>,
    sigma: &[T],
    sigma_data: f64,
    labels: Option<&[usize]>,
) -> Result<Tensor<T>> {
    if let Some(s) = sigma.iter().find(|s| !(s.abs() > T::zero())) {
        return Err(Error::Numerical {
            path: "sigma".into(),
            reason: format!("score undefined at sigma = {s}"),
        });
    }
    let d = denoise(params, x_with_coords, sigma, sigma_data, labels)?;
    score_from_denoised(&d, x_with_coords, sigma)
}

/// Records the weighted patch denoising loss over image channels.
#[allow(clippy::too_many_arguments)]
pub fn patch_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    params: &DenoiserParams<T>,
    clean: &Tensor<T>,
    noisy_with_coords: &Tensor<T>,
    sigma: &[T],
    sigma_data: f64,
    weighting: LossWeighting,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let (b, c, h, w) = clean.dims4()?;
    noisy_with_coords.expect_shape(&[b, c + 2, h, w])?;
    let d = denoise_graph(tape, pv, params, noisy_with_coords, sigma, sigma_data, labels)?;
    let weights: Vec<T> = sigma
        .iter()
        .map(|s| T::of(weighting.weight(s.as_f64(), sigma_data)))
        .collect();
    tape.weighted_sq_err(d, clean, &weights)
}

#[allow(clippy::too_many_arguments)]
pub fn patch_loss<T: Scalar>(
    params: &DenoiserParams<T>,
    clean: &Tensor<T>,
    noisy_with_coords: &Tensor<T>,
    sigma: &[T],
    sigma_data: f64,
    weighting: LossWeighting,
    labels: Option<&[usize]>,
) -> Result<T> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let l = patch_loss_graph(
        &mut tape,
        &pv,
        params,
        clean,
        noisy_with_coords,
        sigma,
        sigma_data,
        weighting,
        labels,
    )?;
    let v = tape.value(l).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical {
            path: "loss".into(),
            reason: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

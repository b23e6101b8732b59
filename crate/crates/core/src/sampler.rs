//! Deterministic probability-flow ODE sampling and out-painting.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coords::{attach_coords_batch, extended_grid, full_grid, CoordGrid};
use crate::diffusion::denoise;
use crate::error::{Error, Result};
use crate::netgraph::DenoiserParams;
use crate::rng::{Purpose, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Classifier-free guidance strength; 1 disables the unconditional branch.
    pub guidance: f64,
    pub sigma_data: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            rho: 7.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            guidance: 1.3,
            sigma_data: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::config("sigma_min", "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min) {
            return Err(Error::config("sigma_max", "must exceed sigma_min"));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::config("guidance", "must be non-negative"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("rho", "must be positive"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("sigma_data", "must be positive"));
        }
        Ok(())
    }
}

/// Decreasing noise levels `sigma_0 > ... > sigma_{N-1}` followed by a terminal 0.
pub fn sigma_schedule(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.steps;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                cfg.sigma_max
            } else if i == n - 1 {
                cfg.sigma_min
            } else {
                (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho)
            }
        })
        .collect();
    out.push(0.0);
    Ok(out)
}

/// Anything that maps a noisy batch `[B, C, h, w]` at one noise level to a clean estimate.
pub trait Denoiser<T: Scalar> {
    fn denoise(&mut self, x: &Tensor<T>, grid: &CoordGrid<T>, sigma: T, labels: Option<&[usize]>) -> Result<Tensor<T>>;
}

/// Wraps a closure `(x, sigma) -> D(x; sigma)` ignoring coordinates and labels.
pub struct FnDenoiser<F>(pub F);

impl<T: Scalar, F: FnMut(&Tensor<T>, T) -> Tensor<T>> Denoiser<T> for FnDenoiser<F> {
    fn denoise(&mut self, x: &Tensor<T>, _: &CoordGrid<T>, sigma: T, _: Option<&[usize]>) -> Result<Tensor<T>> {
        Ok((self.0)(x, sigma))
    }
}

/// The trained network with clean coordinates attached and optional guidance.
pub struct NetDenoiser<'a, T> {
    params: &'a DenoiserParams<T>,
    sigma_data: f64,
    guidance: f64,
    forwards: usize,
}

impl<'a, T: Scalar> NetDenoiser<'a, T> {
    pub fn new(params: &'a DenoiserParams<T>, sigma_data: f64, guidance: f64) -> Self {
        NetDenoiser {
            params,
            sigma_data,
            guidance,
            forwards: 0,
        }
    }

    /// Network forward passes so far; a guided evaluation costs two.
    pub fn forwards(&self) -> usize {
        self.forwards
    }

    fn run(&mut self, x: &Tensor<T>, grid: &CoordGrid<T>, sigma: T, labels: Option<&[usize]>) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        let grids = vec![grid; b];
        let input = attach_coords_batch(x, &grids)?;
        self.forwards += 1;
        denoise(self.params, &input, &vec![sigma; b], self.sigma_data, labels)
    }
}

impl<T: Scalar> Denoiser<T> for NetDenoiser<'_, T> {
    fn denoise(&mut self, x: &Tensor<T>, grid: &CoordGrid<T>, sigma: T, labels: Option<&[usize]>) -> Result<Tensor<T>> {
        let (Some(labels), Some(null)) = (labels, self.params.config().null_class()) else {
            return self.run(x, grid, sigma, labels);
        };
        let w = self.guidance;
        let null_labels = vec![null; labels.len()];
        if w == 0.0 {
            return self.run(x, grid, sigma, Some(&null_labels));
        }
        let cond = self.run(x, grid, sigma, Some(labels))?;
        if w == 1.0 {
            return Ok(cond);
        }
        let uncond = self.run(x, grid, sigma, Some(&null_labels))?;
        let w = T::of(w);
        uncond.zip_map(&cond, |u, c| u + w * (c - u))
    }
}

fn check_finite<T: Scalar>(x: &Tensor<T>, step: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            path: format!("sampler step {step}"),
            reason: "state became non-finite".into(),
        })
    }
}

/// One Heun step from `sigma_cur` to `sigma_next`, Euler when `sigma_next` is 0.
///
/// Returns the new state and the number of denoiser evaluations used.
#[allow(clippy::too_many_arguments)]
pub fn ode_step<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &mut D,
    x: &Tensor<T>,
    sigma_cur: f64,
    sigma_next: f64,
    grid: &CoordGrid<T>,
    labels: Option<&[usize]>,
    step: usize,
) -> Result<(Tensor<T>, usize)> {
    if !(sigma_cur > sigma_next && sigma_next >= 0.0) {
        return Err(Error::OutOfRange(format!(
            "step {step}: need sigma_cur > sigma_next >= 0, got {sigma_cur} -> {sigma_next}"
        )));
    }
    let (sc, sn) = (T::of(sigma_cur), T::of(sigma_next));
    let h = sn - sc;
    let d0 = den.denoise(x, grid, sc, labels)?;
    let slope0 = x.zip_map(&d0, |xv, dv| (xv - dv) / sc)?;
    let euler = x.zip_map(&slope0, |xv, s| xv + h * s)?;
    check_finite(&euler, step)?;
    if sigma_next == 0.0 {
        return Ok((euler, 1));
    }
    let d1 = den.denoise(&euler, grid, sn, labels)?;
    let slope1 = euler.zip_map(&d1, |xv, dv| (xv - dv) / sn)?;
    let half = T::of(0.5);
    let avg = slope0.zip_map(&slope1, |a, b| half * (a + b))?;
    let next = x.zip_map(&avg, |xv, s| xv + h * s)?;
    check_finite(&next, step)?;
    Ok((next, 2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<T> {
    /// `[B, C, h, w]`, clamped to `[-1, 1]`
    pub images: Tensor<T>,
    pub steps: usize,
    /// Denoiser evaluations along one trajectory.
    pub evals: usize,
}

/// Integrates the ODE over `schedule`, calling `after_step(i, sigma_next, state)` after each step.
pub fn integrate<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &mut D,
    schedule: &[f64],
    init: Tensor<T>,
    grid: &CoordGrid<T>,
    labels: Option<&[usize]>,
    mut after_step: impl FnMut(usize, f64, &mut Tensor<T>) -> Result<()>,
) -> Result<SampleOutput<T>> {
    let mut x = init;
    let mut evals = 0;
    for (i, pair) in schedule.windows(2).enumerate() {
        let (next, used) = ode_step(den, &x, pair[0], pair[1], grid, labels, i)?;
        x = next;
        evals += used;
        after_step(i, pair[1], &mut x)?;
    }
    Ok(SampleOutput {
        images: x.map(|v| v.max(-T::one()).min(T::one())),
        steps: schedule.len().saturating_sub(1),
        evals,
    })
}

fn check_resolution<T: Scalar>(params: &DenoiserParams<T>, resolution: usize) -> Result<()> {
    let stride = params.config().stride();
    if !resolution.is_multiple_of(stride) {
        return Err(Error::InvalidResolution {
            resolution,
            reason: format!("must be divisible by the network stride {stride}"),
        });
    }
    Ok(())
}

fn initial_noise<T: Scalar>(key: RngKey, purpose: Purpose, index: u64, shape: &[usize], scale: f64) -> Tensor<T> {
    let mut rng = key.stream(purpose, index, 0);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Generates `batch` images at `resolution`. Sample `n` depends only on the seed and `n`.
pub fn sample<T: Scalar>(
    params: &DenoiserParams<T>,
    cfg: &SamplerConfig,
    resolution: usize,
    batch: usize,
    labels: Option<&[usize]>,
) -> Result<SampleOutput<T>> {
    check_resolution(params, resolution)?;
    if let Some(l) = labels {
        if l.len() != batch {
            return Err(Error::shape(&[batch], &[l.len()]));
        }
    }
    let schedule = sigma_schedule(cfg)?;
    let c = params.config().image_channels();
    let key = RngKey::new(cfg.seed);
    let per: Vec<Tensor<T>> = (0..batch)
        .map(|n| {
            initial_noise(
                key,
                Purpose::Sampling,
                n as u64,
                &[c, resolution, resolution],
                cfg.sigma_max,
            )
        })
        .collect();
    let init = Tensor::stack(&per)?;
    let grid = full_grid(resolution)?;
    let mut den = NetDenoiser::new(params, cfg.sigma_data, cfg.guidance);
    integrate(&mut den, &schedule, init, &grid, labels, |_, _, _| Ok(()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutpaintMode {
    /// Overwrite the reference region with the clean reference.
    #[default]
    Clean,
    /// Overwrite with the reference forward-noised to the current level.
    Noised,
}

/// Extends `reference` (`[C, R, R]`) to `[C, R_ext, R_ext]`, keeping it fixed at the center.
pub fn outpaint<T: Scalar>(
    params: &DenoiserParams<T>,
    cfg: &SamplerConfig,
    reference: &Tensor<T>,
    extended: usize,
    label: Option<usize>,
    mode: OutpaintMode,
) -> Result<SampleOutput<T>> {
    let (c, r, rw) = reference.dims3()?;
    if r != rw {
        return Err(Error::shape(&[c, r, r], reference.shape()));
    }
    if c != params.config().image_channels() {
        return Err(Error::shape(
            &[params.config().image_channels(), r, r],
            reference.shape(),
        ));
    }
    let (grid, offset) = extended_grid::<T>(r, extended)?;
    check_resolution(params, extended)?;
    let schedule = sigma_schedule(cfg)?;
    let key = RngKey::new(cfg.seed);
    let reference = reference.clone().reshape(&[1, c, r, r])?;
    let mut init = initial_noise(key, Purpose::Sampling, 0, &[1, c, extended, extended], cfg.sigma_max);
    init.paste(&reference, offset, offset)?;
    let labels = label.map(|l| vec![l]);
    let mut den = NetDenoiser::new(params, cfg.sigma_data, cfg.guidance);
    integrate(
        &mut den,
        &schedule,
        init,
        &grid,
        labels.as_deref(),
        |i, sigma, x| match mode {
            OutpaintMode::Clean => x.paste(&reference, offset, offset),
            OutpaintMode::Noised => {
                let eps = initial_noise::<T>(key, Purpose::Outpaint, i as u64, &[1, c, r, r], sigma);
                let noised = reference.zip_map(&eps, |a, b| a + b)?;
                x.paste(&noised, offset, offset)
            }
        },
    )
}

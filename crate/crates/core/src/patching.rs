//! Patch-size scheduling and per-sample random cropping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coords::{attach_coords_batch, patch_grid, CoordGrid, PatchSpec};
use crate::diffusion::{sample_sigma, SigmaDistribution};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Stochastic,
    Progressive,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(ScheduleMode::Stochastic),
            "progressive" => Ok(ScheduleMode::Progressive),
            other => Err(Error::config("schedule", format!("unknown mode `{other}`"))),
        }
    }
}

/// Distribution (or curriculum) over the patch sizes `{R, R/2, R/4}`.
///
/// `p` is the share of full-size batches; the remainder splits 3:2 between
/// half- and quarter-size patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSchedule {
    mode: ScheduleMode,
    p: f64,
    resolution: usize,
    total_iterations: usize,
    // progressive phase boundaries: [0, quarter_end) -> R/4, [quarter_end, half_end) -> R/2
    quarter_end: usize,
    half_end: usize,
}

impl PatchSchedule {
    pub fn stochastic(p: f64, resolution: usize) -> Result<Self> {
        Self::new(ScheduleMode::Stochastic, p, resolution, 0)
    }

    pub fn progressive(p: f64, resolution: usize, total_iterations: usize) -> Result<Self> {
        Self::new(ScheduleMode::Progressive, p, resolution, total_iterations)
    }

    pub fn new(mode: ScheduleMode, p: f64, resolution: usize, total_iterations: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("p", format!("{p} is outside [0, 1]")));
        }
        if resolution < 4 || !resolution.is_multiple_of(4) {
            return Err(Error::InvalidResolution {
                resolution,
                reason: "patch schedules need a resolution divisible by 4".into(),
            });
        }
        if mode == ScheduleMode::Progressive && total_iterations == 0 {
            return Err(Error::config(
                "total_iterations",
                "progressive scheduling needs the total iteration count",
            ));
        }
        // Phase lengths are floored; the full-size phase absorbs the remainder.
        let t = total_iterations as f64;
        let quarter = (2.0 * (1.0 - p) * t / 5.0 + 1e-9).floor() as usize;
        let half = (3.0 * (1.0 - p) * t / 5.0 + 1e-9).floor() as usize;
        Ok(PatchSchedule {
            mode,
            p,
            resolution,
            total_iterations,
            quarter_end: quarter,
            half_end: quarter + half,
        })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn total_iterations(&self) -> usize {
        self.total_iterations
    }

    /// The size menu `[R, R/2, R/4]`.
    pub fn sizes(&self) -> [usize; 3] {
        [self.resolution, self.resolution / 2, self.resolution / 4]
    }

    /// Probability masses aligned with [`sizes`](Self::sizes).
    pub fn masses(&self) -> [f64; 3] {
        patch_size_masses(self.p)
    }

    /// Progressive phase boundaries `(end of R/4 phase, end of R/2 phase)`.
    pub fn phase_boundaries(&self) -> (usize, usize) {
        (self.quarter_end, self.half_end)
    }

    /// Patch size for one mini-batch.
    ///
    /// Progressive schedules past `total_iterations` stay at full size.
    pub fn sample_patch_size<R: Rng + ?Sized>(&self, iteration: usize, rng: &mut R) -> usize {
        let [full, half, quarter] = self.sizes();
        match self.mode {
            ScheduleMode::Stochastic => {
                let [pf, ph, _] = self.masses();
                let u: f64 = rng.random();
                if u < pf {
                    full
                } else if u < pf + ph {
                    half
                } else {
                    quarter
                }
            }
            ScheduleMode::Progressive => {
                if iteration < self.quarter_end {
                    quarter
                } else if iteration < self.half_end {
                    half
                } else {
                    full
                }
            }
        }
    }

    /// Expected fraction of full-size convolution cost, `sum_s P(s) (s/R)^2`.
    pub fn expected_cost_fraction(&self) -> f64 {
        let r = self.resolution as f64;
        self.sizes()
            .iter()
            .zip(self.masses())
            .map(|(&s, m)| m * (s as f64 / r).powi(2))
            .sum()
    }
}

pub fn patch_size_masses(p: f64) -> [f64; 3] {
    [p, 0.6 * (1.0 - p), 0.4 * (1.0 - p)]
}

/// Crops a uniformly placed `s x s` patch from a `[C, R, R]` image.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    size: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, PatchSpec)> {
    let (_, h, w) = image.dims3()?;
    if h != w {
        return Err(Error::shape(&[h, h], &[h, w]));
    }
    if size == 0 || size > h {
        return Err(Error::InvalidPatchSize { size, resolution: h });
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=h - size);
    let spec = PatchSpec::new(top, left, size, h)?;
    Ok((image.crop(top, left, size, size)?, spec))
}

/// Network inputs and targets for one training step.
#[derive(Clone, Debug)]
pub struct TrainingBatch<T> {
    /// `[B, C+2, s, s]`: noisy image channels followed by clean coordinate channels.
    pub noisy_input: Tensor<T>,
    /// `[B, C, s, s]`
    pub clean_patches: Tensor<T>,
    pub sigmas: Vec<T>,
    pub specs: Vec<PatchSpec>,
    pub patch_size: usize,
}

/// Builds a batch: one patch size for the whole batch, independent crop,
/// noise level and noise per sample, coordinates attached without noise.
pub fn make_training_batch<T: Scalar>(
    images: &Tensor<T>,
    schedule: &PatchSchedule,
    sigma_dist: &SigmaDistribution,
    iteration: usize,
    key: RngKey,
) -> Result<TrainingBatch<T>> {
    let (b, c, r, _) = images.dims4()?;
    if b == 0 {
        return Err(Error::OutOfRange("empty training batch".into()));
    }
    if r != schedule.resolution() {
        return Err(Error::InvalidResolution {
            resolution: r,
            reason: format!("schedule expects {}", schedule.resolution()),
        });
    }
    let step = iteration as u64;
    let s = schedule.sample_patch_size(iteration, &mut key.stream(Purpose::PatchSize, step, 0));

    let mut clean = Vec::with_capacity(b * c * s * s);
    let mut noisy = Vec::with_capacity(b * c * s * s);
    let mut sigmas = Vec::with_capacity(b);
    let mut specs = Vec::with_capacity(b);
    let mut grids: Vec<CoordGrid<T>> = Vec::with_capacity(b);
    for n in 0..b {
        let image = images.slice_outer(n, n + 1)?.reshape(&[c, r, r])?;
        let (patch, spec) = random_crop(&image, s, &mut key.stream(Purpose::Crop, step, n as u64))?;
        let sigma: T = sample_sigma(sigma_dist, 1, &mut key.stream(Purpose::Sigma, step, n as u64))[0];
        let eps = Tensor::<T>::randn(&[c, s, s], &mut key.stream(Purpose::Noise, step, n as u64));
        noisy.extend(patch.data().iter().zip(eps.data()).map(|(&x, &e)| x + sigma * e));
        clean.extend_from_slice(patch.data());
        grids.push(patch_grid(&spec)?);
        sigmas.push(sigma);
        specs.push(spec);
    }
    let noisy = Tensor::from_vec(&[b, c, s, s], noisy)?;
    let grid_refs: Vec<&CoordGrid<T>> = grids.iter().collect();
    Ok(TrainingBatch {
        noisy_input: attach_coords_batch(&noisy, &grid_refs)?,
        clean_patches: Tensor::from_vec(&[b, c, s, s], clean)?,
        sigmas,
        specs,
        patch_size: s,
    })
}

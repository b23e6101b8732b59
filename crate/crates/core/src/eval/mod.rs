//! Desk-scale quality and efficiency measurements.

mod mmd;

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub use mmd::{mmd_distance, mmd_from_features, FeatureEmbedder, MmdResult};

use crate::coords::{attach_coords, full_grid, patch_grid, PatchSpec};
use crate::data_io::synth_shapes;
use crate::diffusion::{denoise, TrainConfig, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::netgraph::{init_params, DenoiserParams, NetConfig};
use crate::patching::{PatchSchedule, ScheduleMode};
use crate::rng::{Purpose, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn positions(r: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > r || (s < r && (!s.is_multiple_of(2) || !(r - s).is_multiple_of(s / 2))) {
        return Err(Error::InvalidPatchSize { size: s, resolution: r });
    }
    if s == r {
        return Ok(vec![0]);
    }
    Ok((0..=(r - s) / (s / 2)).map(|i| i * s / 2).collect())
}

/// Width of the patch border ignored when comparing predictions.
pub fn coherence_border(net: &NetConfig, s: usize) -> usize {
    net.receptive_radius().min(s / 4)
}

/// Mean relative L2 disagreement between per-patch and full-image denoiser
/// outputs on one noisy `[C, R, R]` image, over patches at stride `s/2`.
///
/// Patch pixels within [`coherence_border`] of a patch edge are ignored unless
/// that edge is also an image edge.
pub fn score_coherence<T: Scalar>(
    params: &DenoiserParams<T>,
    image: &Tensor<T>,
    sigma: f64,
    s: usize,
    label: Option<usize>,
    key: RngKey,
) -> Result<f64> {
    let (c, r, rw) = image.dims3()?;
    if r != rw {
        return Err(Error::shape(&[c, r, r], image.shape()));
    }
    let starts = positions(r, s)?;
    let mut rng = key.stream(Purpose::Eval, 2, 0);
    let sig = T::of(sigma);
    let eps: Vec<T> = (0..image.numel())
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let noisy = image.zip_map(&Tensor::from_vec(image.shape(), eps)?, |v, e| v + sig * e)?;
    let labels = label.map(|l| vec![l]);
    let full_in = attach_coords(&noisy, &full_grid(r)?)?.reshape(&[1, c + 2, r, r])?;
    let full_d = denoise(params, &full_in, &[sig], 0.5, labels.as_deref())?;
    let full_dir = full_d.zip_map(&noisy.clone().reshape(&[1, c, r, r])?, |d, x| d - x)?;
    let border = coherence_border(params.config(), s);

    let mut total = 0.0;
    let mut count = 0usize;
    for &top in &starts {
        for &left in &starts {
            let spec = PatchSpec::new(top, left, s, r)?;
            let crop = noisy.crop(top, left, s, s)?;
            let input = attach_coords(&crop, &patch_grid(&spec)?)?.reshape(&[1, c + 2, s, s])?;
            let d = denoise(params, &input, &[sig], 0.5, labels.as_deref())?;
            let patch_dir = d.zip_map(&crop.reshape(&[1, c, s, s])?, |a, b| a - b)?;
            let reference = full_dir.crop(top, left, s, s)?;
            let lo_y = if top == 0 { 0 } else { border };
            let lo_x = if left == 0 { 0 } else { border };
            let hi_y = if top + s == r { s } else { s - border };
            let hi_x = if left + s == r { s } else { s - border };
            let (mut num, mut den) = (0.0, 0.0);
            for ch in 0..c {
                for y in lo_y..hi_y {
                    for x in lo_x..hi_x {
                        let i = (ch * s + y) * s + x;
                        let a = patch_dir.data()[i].as_f64();
                        let b = reference.data()[i].as_f64();
                        num += (a - b) * (a - b);
                        den += b * b;
                    }
                }
            }
            if den > 0.0 {
                total += (num / den).sqrt();
            } else if num > 0.0 {
                total += f64::INFINITY;
            }
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean of [`score_coherence`] over a batch of images.
pub fn score_coherence_batch<T: Scalar>(
    params: &DenoiserParams<T>,
    images: &Tensor<T>,
    sigma: f64,
    s: usize,
    labels: Option<&[usize]>,
    key: RngKey,
) -> Result<f64> {
    let (n, c, r, _) = images.dims4()?;
    let mut acc = 0.0;
    for i in 0..n {
        let img = images.slice_outer(i, i + 1)?.reshape(&[c, r, r])?;
        let item_key = RngKey::new(key.seed.wrapping_add(i as u64));
        acc += score_coherence(params, &img, sigma, s, labels.map(|l| l[i]), item_key)?;
    }
    Ok(acc / n as f64)
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub net: NetConfig,
    pub resolution: usize,
    pub batch_size: usize,
    pub ps: Vec<f64>,
    pub warmup: usize,
    pub batches: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            net: NetConfig::for_images(3, 16, 2, 8),
            resolution: 32,
            batch_size: 16,
            ps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            warmup: 10,
            batches: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub p: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Expected cost relative to full-size batches, `sum_s P(s) (s/R)^2`.
    pub flop_fraction: f64,
    /// Mean time of the `p = 1` row divided by this row's mean, when that row exists.
    pub speedup: Option<f64>,
    pub batches: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub batch_size: usize,
    /// Multiply-accumulates of one full-size forward pass.
    pub full_forward_macs: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, p: f64) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.p == p)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "R = {}, batch = {}, full forward = {:.1} MMAC/image\n{:>6} {:>10} {:>9} {:>9} {:>8}\n",
            self.resolution,
            self.batch_size,
            self.full_forward_macs as f64 / 1e6,
            "p",
            "mean_ms",
            "std_ms",
            "flops",
            "speedup"
        );
        for r in &self.rows {
            let sp = r.speedup.map_or("-".to_string(), |v| format!("{v:.3}"));
            s.push_str(&format!(
                "{:>6.2} {:>10.2} {:>9.2} {:>9.4} {:>8}\n",
                r.p, r.mean_ms, r.std_ms, r.flop_fraction, sp
            ));
        }
        s
    }
}

/// Times training steps on synthetic data for each `p`, with identical network and batch size.
pub fn bench_throughput(cfg: &BenchConfig) -> Result<BenchReport> {
    let data = synth_shapes(256, cfg.resolution, 0, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.ps.len());
    for &p in &cfg.ps {
        let train = TrainConfig {
            p,
            batch_size: cfg.batch_size,
            duration_images: ((cfg.warmup + cfg.batches) * cfg.batch_size) as u64,
            seed: cfg.seed,
            ..TrainConfig::default()
        };
        let params = init_params::<f32, _>(&cfg.net, &mut RngKey::new(cfg.seed).stream(Purpose::Init, 0, 0))?;
        let mut trainer = Trainer::new(train, &data.images, None, TrainState::new(params, cfg.seed))?;
        for _ in 0..cfg.warmup {
            trainer.step()?;
        }
        let mut times = Vec::with_capacity(cfg.batches);
        for _ in 0..cfg.batches {
            let t = Instant::now();
            trainer.step()?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
        let std = if times.len() > 1 {
            (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let schedule = PatchSchedule::new(ScheduleMode::Stochastic, p, cfg.resolution, 1)?;
        log::info!("bench p={p}: {mean:.2} ms/batch");
        rows.push(BenchRow {
            p,
            mean_ms: mean,
            std_ms: std,
            flop_fraction: schedule.expected_cost_fraction(),
            speedup: None,
            batches: times.len(),
        });
    }
    if let Some(full) = rows.iter().find(|r| r.p == 1.0).map(|r| r.mean_ms) {
        for r in &mut rows {
            r.speedup = Some(if r.p == 1.0 { 1.0 } else { full / r.mean_ms });
        }
    }
    Ok(BenchReport {
        resolution: cfg.resolution,
        batch_size: cfg.batch_size,
        full_forward_macs: cfg.net.conv_macs(cfg.resolution, cfg.resolution),
        rows,
    })
}

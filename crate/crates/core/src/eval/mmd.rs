use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netgraph::kernels::{avg_pool2_forward, conv2d_forward, ConvShape};
use crate::rng::{Purpose, RngKey};
use crate::tensor::Tensor;

/// Fixed, untrained convolutional feature map.
///
/// Three 3x3 conv + ReLU stages with 2x average pooling between them; the
/// descriptor holds per-channel means and standard deviations of each stage
/// plus a 4x4 thumbnail of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbedder {
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
    seed: u64,
}

impl FeatureEmbedder {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let key = RngKey::new(seed);
        let widths = [in_channels, 16, 32, 32];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (cin, cout) = (w[0], w[1]);
                let mut rng = key.stream(Purpose::Eval, 1, l as u64);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = (0..cout * cin * 9)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let bias = (0..cout).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
                (cin, cout, weight, bias)
            })
            .collect();
        FeatureEmbedder { layers, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        let conv: usize = self.layers.iter().map(|l| 2 * l.1).sum();
        conv + 16 * self.layers[0].0
    }

    /// Descriptors for a `[N, C, H, W]` batch; H and W must be multiples of 4.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (n, c, h, w) = images.dims4()?;
        if c != self.layers[0].0 {
            return Err(Error::shape(&[n, self.layers[0].0, h, w], images.shape()));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 {
            return Err(Error::InvalidResolution {
                resolution: h,
                reason: "embedding needs a multiple of 4 that is at least 8".into(),
            });
        }
        let per = c * h * w;
        Ok((0..n)
            .map(|i| {
                let x: Vec<f64> = images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                self.embed_one(x, c, h, w)
            })
            .collect())
    }

    fn embed_one(&self, input: Vec<f64>, c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(thumbnail(&input, c, h, w));
        let (mut x, mut h, mut w) = (input, h, w);
        for (l, (cin, cout, weight, bias)) in self.layers.iter().enumerate() {
            let s = ConvShape {
                batch: 1,
                cin: *cin,
                cout: *cout,
                h,
                w,
                k: 3,
            };
            let mut y = conv2d_forward(s, &x, weight, Some(bias));
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            let hw = (h * w) as f64;
            for ch in y.chunks(h * w) {
                let mean = ch.iter().sum::<f64>() / hw;
                let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
                out.push(mean);
                out.push(var.sqrt());
            }
            if l + 1 < self.layers.len() && h % 2 == 0 && w % 2 == 0 && h > 4 {
                x = avg_pool2_forward(&y, *cout, h, w);
                h /= 2;
                w /= 2;
            } else {
                x = y;
            }
        }
        out
    }
}

fn thumbnail(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (bh, bw) = (h / 4, w / 4);
    let mut out = vec![0.0; c * 16];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[ch * 16 + (y / bh) * 4 + xx / bw] += x[ch * h * w + y * w + xx];
            }
        }
    }
    let area = (bh * bw) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MmdResult {
    /// Unbiased estimate of squared MMD; may dip slightly below zero.
    pub mmd2: f64,
    pub std_error: f64,
    /// Squared RBF bandwidth from the pooled median heuristic.
    pub bandwidth2: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased RBF-kernel MMD between two descriptor sets.
pub fn mmd_from_features(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<MmdResult> {
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return Err(Error::Estimator(format!(
            "need at least 2 items per set, got {m} and {n}"
        )));
    }
    let pooled: Vec<&[f64]> = xs.iter().chain(ys).map(|v| v.as_slice()).collect();
    let t = pooled.len();
    let mut d2 = vec![0.0; t * t];
    let mut upper = Vec::with_capacity(t * (t - 1) / 2);
    for i in 0..t {
        for j in i + 1..t {
            let d = sq_dist(pooled[i], pooled[j]);
            d2[i * t + j] = d;
            d2[j * t + i] = d;
            upper.push(d);
        }
    }
    upper.sort_by(f64::total_cmp);
    let mut bandwidth2 = upper[upper.len() / 2];
    if bandwidth2 <= 0.0 {
        let nonzero: Vec<f64> = upper.iter().copied().filter(|&d| d > 0.0).collect();
        bandwidth2 = if nonzero.is_empty() {
            1.0
        } else {
            nonzero[nonzero.len() / 2]
        };
    }
    let k: Vec<f64> = d2.iter().map(|&d| (-d / (2.0 * bandwidth2)).exp()).collect();
    let kij = |i: usize, j: usize| k[i * t + j];

    let (mf, nf) = (m as f64, n as f64);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    // per-sample influence terms for the first-order variance
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; n];
    for i in 0..m {
        let mut within = 0.0;
        for j in 0..m {
            if i != j {
                within += kij(i, j);
            }
        }
        let cross: f64 = (0..n).map(|j| kij(i, m + j)).sum();
        sxx += within;
        sxy += cross;
        a[i] = within / (mf - 1.0) - cross / nf;
    }
    for j in 0..n {
        let mut within = 0.0;
        for l in 0..n {
            if j != l {
                within += kij(m + j, m + l);
            }
        }
        let cross: f64 = (0..m).map(|i| kij(i, m + j)).sum();
        syy += within;
        b[j] = within / (nf - 1.0) - cross / mf;
    }
    let mmd2 = sxx / (mf * (mf - 1.0)) + syy / (nf * (nf - 1.0)) - 2.0 * sxy / (mf * nf);

    let var = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let first = 4.0 * var(&a) / mf + 4.0 * var(&b) / nf;

    // degenerate term from the doubly centred pooled kernel
    let row: Vec<f64> = (0..t)
        .map(|i| (0..t).map(|j| kij(i, j)).sum::<f64>() / t as f64)
        .collect();
    let grand = row.iter().sum::<f64>() / t as f64;
    let mut c2 = 0.0;
    for i in 0..t {
        for j in 0..t {
            if i != j {
                let c = kij(i, j) - row[i] - row[j] + grand;
                c2 += c * c;
            }
        }
    }
    c2 /= (t * (t - 1)) as f64;
    let second = 2.0 * c2 * (1.0 / mf + 1.0 / nf).powi(2);
    Ok(MmdResult {
        mmd2,
        std_error: (first + second).sqrt(),
        bandwidth2,
    })
}

pub fn mmd_distance(a: &Tensor<f32>, b: &Tensor<f32>, embedder: &FeatureEmbedder) -> Result<MmdResult> {
    mmd_from_features(&embedder.embed(a)?, &embedder.embed(b)?)
}

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::coords::PatchSpec;
use crate::error::{Error, Result};

/// Gaussian with mean `mu` and precision `lambda`, so the score is `-lambda (x - mu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    mu: DVector<f64>,
    lambda: DMatrix<f64>,
    /// Lower Cholesky factor of `lambda`.
    chol: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mu: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if lambda.shape() != (d, d) {
            return Err(Error::shape(&[d, d], &[lambda.nrows(), lambda.ncols()]));
        }
        let scale = lambda.amax().max(f64::MIN_POSITIVE);
        if (&lambda - lambda.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Domain("precision matrix is not symmetric".into()));
        }
        let chol = lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("precision matrix is not positive definite".into()))?
            .l();
        Ok(GaussianModel { mu, lambda, chol })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// Draws `x = mu + L^-T z`, which has covariance `lambda^-1`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let lt = self.chol.transpose();
        let y = lt
            .solve_upper_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        &self.mu + y
    }
}

pub fn gaussian_score(model: &GaussianModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.dim() {
        return Err(Error::shape(&[model.dim()], &[x.len()]));
    }
    Ok(-(&model.lambda * (x - &model.mu)))
}

/// Distinct coordinates observed by one measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMatrix {
    indices: Vec<usize>,
    dim: usize,
}

impl SelectionMatrix {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in &indices {
            if i >= dim {
                return Err(Error::OutOfRange(format!("index {i} outside dimension {dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Domain(format!("index {i} selected twice")));
            }
        }
        Ok(SelectionMatrix { indices, dim })
    }

    pub fn full(dim: usize) -> Self {
        SelectionMatrix {
            indices: (0..dim).collect(),
            dim,
        }
    }

    /// Pixels of a square patch, flattened row-major over the source image.
    pub fn from_patch(spec: &PatchSpec) -> Result<Self> {
        spec.validate()?;
        let r = spec.source_resolution;
        let indices = (0..spec.size)
            .flat_map(|dy| (0..spec.size).map(move |dx| (spec.top + dy) * r + spec.left + dx))
            .collect();
        Self::new(indices, r * r)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.indices.len(), self.dim);
        for (row, &i) in self.indices.iter().enumerate() {
            m[(row, i)] = 1.0;
        }
        m
    }
}

/// Every `size x size` block of a `height x width` grid at every integer offset.
pub fn block_patches(height: usize, width: usize, size: usize) -> Result<Vec<SelectionMatrix>> {
    if size == 0 || size > height || size > width {
        return Err(Error::InvalidPatchSize {
            size,
            resolution: height.min(width),
        });
    }
    let mut out = Vec::new();
    for top in 0..=height - size {
        for left in 0..=width - size {
            let idx = (0..size)
                .flat_map(|dy| (0..size).map(move |dx| (top + dy) * width + left + dx))
                .collect();
            out.push(SelectionMatrix::new(idx, height * width)?);
        }
    }
    Ok(out)
}

fn check_inputs(lambda: &DMatrix<f64>, samples: &[DVector<f64>], eps: &[DVector<f64>], sigma: f64) -> Result<usize> {
    let d = lambda.nrows();
    if lambda.ncols() != d {
        return Err(Error::shape(&[d, d], &[d, lambda.ncols()]));
    }
    if samples.is_empty() {
        return Err(Error::Domain("at least one sample is required".into()));
    }
    if samples.len() != eps.len() {
        return Err(Error::shape(&[samples.len()], &[eps.len()]));
    }
    if let Some(v) = samples.iter().chain(eps).find(|v| v.len() != d) {
        return Err(Error::shape(&[d], &[v.len()]));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise level {sigma} must be positive")));
    }
    Ok(d)
}

/// Least-squares mean estimate from full observations.
pub fn full_fit(
    lambda: &DMatrix<f64>,
    samples: &[DVector<f64>],
    sigma: f64,
    eps: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let d = check_inputs(lambda, samples, eps, sigma)?;
    let inv_var = 1.0 / (sigma * sigma);
    let mut target = DVector::zeros(d);
    for (x, e) in samples.iter().zip(eps) {
        target += lambda * x - e * inv_var;
    }
    target /= samples.len() as f64;
    let lu = lambda.clone().lu();
    let rcond = rcond_estimate(lambda);
    if rcond < 1e-14 {
        return Err(Error::Conditioning(format!(
            "precision matrix has reciprocal condition ~{rcond:.1e}"
        )));
    }
    lu.solve(&target)
        .ok_or_else(|| Error::Conditioning("precision matrix is singular".into()))
}

/// Least-squares mean estimate when observation `n` only sees coordinates `selections[n]`.
pub fn patch_fit(
    lambda: &DMatrix<f64>,
    samples: &[DVector<f64>],
    sigma: f64,
    eps: &[DVector<f64>],
    selections: &[SelectionMatrix],
) -> Result<DVector<f64>> {
    let d = check_inputs(lambda, samples, eps, sigma)?;
    if selections.len() != samples.len() {
        return Err(Error::shape(&[samples.len()], &[selections.len()]));
    }
    let inv_var = 1.0 / (sigma * sigma);
    let mut count = DVector::<f64>::zeros(d);
    let mut masked = DVector::<f64>::zeros(d);
    for ((x, e), sel) in samples.iter().zip(eps).zip(selections) {
        if sel.dim() != d {
            return Err(Error::shape(&[d], &[sel.dim()]));
        }
        let r = lambda * x - e * inv_var;
        for &i in sel.indices() {
            count[i] += 1.0;
            masked[i] += r[i];
        }
    }
    let uncovered: Vec<usize> = (0..d).filter(|&i| count[i] == 0.0).collect();
    if !uncovered.is_empty() {
        return Err(Error::Identifiability { uncovered });
    }
    // lambda^T P^T P lambda summed over observations
    let a = lambda.transpose() * DMatrix::from_diagonal(&count) * lambda;
    let b = lambda.transpose() * masked;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Conditioning("stacked normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b))
}

fn rcond_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

/// `alpha I + beta L` for the 4-neighbour Laplacian `L` of an `h x w` grid.
pub fn grid_precision(height: usize, width: usize, alpha: f64, beta: f64) -> DMatrix<f64> {
    let d = height * width;
    let mut m = DMatrix::identity(d, d) * alpha;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            for j in [(x + 1 < width).then(|| i + 1), (y + 1 < height).then(|| i + width)]
                .into_iter()
                .flatten()
            {
                m[(i, i)] += beta;
                m[(j, j)] += beta;
                m[(i, j)] -= beta;
                m[(j, i)] -= beta;
            }
        }
    }
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub samples: usize,
    pub full_median: f64,
    pub patch_median: f64,
    /// `patch_median / full_median`
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub dim: usize,
    pub repetitions: usize,
    pub sigma: f64,
    pub menu_size: usize,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// True when both medians shrink strictly from each sample count to the next.
    pub fn strictly_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].full_median < w[0].full_median && w[1].patch_median < w[0].patch_median)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "d = {}, menu = {} patches, sigma = {}, {} repetitions (median L2 error)\n",
            self.dim, self.menu_size, self.sigma, self.repetitions
        );
        s.push_str(&format!(
            "{:>10} {:>14} {:>14} {:>10}\n",
            "samples", "full_fit", "patch_fit", "ratio"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>10} {:>14.6e} {:>14.6e} {:>10.4}\n",
                r.samples, r.full_median, r.patch_median, r.ratio
            ));
        }
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Monte-Carlo error of `full_fit` and `patch_fit` versus sample count.
///
/// Both fits see the same draws; each patch observation keeps only one menu entry, drawn uniformly.
pub fn patch_training_convergence_report<R: Rng + ?Sized>(
    model: &GaussianModel,
    menu: &[SelectionMatrix],
    sample_counts: &[usize],
    repetitions: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<ConvergenceReport> {
    let d = model.dim();
    if menu.is_empty() {
        return Err(Error::Domain("patch menu is empty".into()));
    }
    let mut covered = vec![false; d];
    for sel in menu {
        if sel.dim() != d {
            return Err(Error::shape(&[d], &[sel.dim()]));
        }
        sel.indices().iter().for_each(|&i| covered[i] = true);
    }
    let uncovered: Vec<usize> = (0..d).filter(|&i| !covered[i]).collect();
    if !uncovered.is_empty() {
        return Err(Error::Identifiability { uncovered });
    }
    let noise = |rng: &mut R| DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let mut rows = Vec::with_capacity(sample_counts.len());
    for &n in sample_counts {
        let mut full_err = Vec::with_capacity(repetitions);
        let mut patch_err = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let mut xs = Vec::with_capacity(n);
            let mut es = Vec::with_capacity(n);
            for _ in 0..n {
                let e = noise(rng);
                xs.push(model.sample(rng) + &e);
                es.push(e);
            }
            let sels: Vec<SelectionMatrix> = (0..n).map(|_| menu[rng.random_range(0..menu.len())].clone()).collect();
            let mu_full = full_fit(model.lambda(), &xs, sigma, &es)?;
            let mu_patch = patch_fit(model.lambda(), &xs, sigma, &es, &sels)?;
            full_err.push((mu_full - model.mu()).norm());
            patch_err.push((mu_patch - model.mu()).norm());
        }
        let full_median = median(&mut full_err);
        let patch_median = median(&mut patch_err);
        rows.push(ConvergenceRow {
            samples: n,
            full_median,
            patch_median,
            ratio: patch_median / full_median,
        });
    }
    Ok(ConvergenceReport {
        dim: d,
        repetitions,
        sigma,
        menu_size: menu.len(),
        rows,
    })
}

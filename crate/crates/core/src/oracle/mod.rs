//! Closed-form checks of patch-wise score matching on Gaussian and MRF models.

mod gaussian;
mod mrf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub use gaussian::{
    block_patches, full_fit, gaussian_score, grid_precision, patch_fit, patch_training_convergence_report,
    ConvergenceReport, ConvergenceRow, GaussianModel, SelectionMatrix,
};
pub use mrf::{mrf_score_decompose, GridMrf, QuadPotential};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngKey};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub convergence: ConvergenceReport,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {:<32} {}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        s.push('\n');
        s.push_str(&self.convergence.to_text());
        s
    }
}

/// Diagonal precision with entries in `[2, 4]` and mean in `[-1, 1]` on a `side x side` grid.
pub fn diagonal_model(side: usize, key: RngKey) -> Result<GaussianModel> {
    let d = side * side;
    let mut rng = key.stream(Purpose::Eval, 100, 0);
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let diag = DVector::from_fn(d, |_, _| rng.random_range(2.0..4.0));
    GaussianModel::new(mu, DMatrix::from_diagonal(&diag))
}

/// Fits a 4x4 model from `samples` draws, each observed through every 2x2 block
/// with independent noise. Returns the max-norm error of the patch estimate.
pub fn block_fit_error(samples: usize, sigma: f64, key: RngKey) -> Result<f64> {
    let model = diagonal_model(4, key)?;
    let menu = block_patches(4, 4, 2)?;
    let mut rng = key.stream(Purpose::Eval, 101, 0);
    let cap = samples * menu.len();
    let (mut xs, mut es, mut sels) = (
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
    );
    for _ in 0..samples {
        let x = model.sample(&mut rng);
        for sel in &menu {
            let e = DVector::from_fn(16, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            xs.push(&x + &e);
            es.push(e);
            sels.push(sel.clone());
        }
    }
    let mu = patch_fit(model.lambda(), &xs, sigma, &es, &sels)?;
    Ok((mu - model.mu()).amax())
}

/// Median-error table for a smooth 4x4 grid model with the 2x2 block menu.
pub fn default_convergence_report(counts: &[usize], repetitions: usize, key: RngKey) -> Result<ConvergenceReport> {
    let mut rng = key.stream(Purpose::Eval, 102, 0);
    let mu = DVector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
    let model = GaussianModel::new(mu, grid_precision(4, 4, 1.0, 0.5))?;
    let menu = block_patches(4, 4, 2)?;
    patch_training_convergence_report(&model, &menu, counts, repetitions, 1.0, &mut rng)
}

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// Runs every oracle check and the convergence experiment.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let key = RngKey::new(seed);
    let mut checks = Vec::new();

    checks.push(check("score_vanishes_at_mode", {
        let m = diagonal_model(3, key)?;
        let s = gaussian_score(&m, m.mu())?;
        Ok((s.iter().all(|&v| v == 0.0), format!("max |score| = {:e}", s.amax())))
    }));
    checks.push(check("score_hand_value", {
        let m = GaussianModel::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 2.0))?;
        let s = gaussian_score(&m, &DVector::from_element(1, 1.0))?[0];
        Ok((s == -2.0, format!("score = {s}")))
    }));
    checks.push(check("noiseless_full_fit_is_mean", {
        let m = diagonal_model(3, key)?;
        let mut rng = key.stream(Purpose::Eval, 103, 0);
        let xs: Vec<_> = (0..25).map(|_| m.sample(&mut rng)).collect();
        let zeros = vec![DVector::zeros(9); 25];
        let mean = xs.iter().fold(DVector::zeros(9), |a, x| a + x) / 25.0;
        let err = (full_fit(m.lambda(), &xs, 1.0, &zeros)? - mean).amax();
        Ok((err < 1e-12, format!("max deviation = {err:e}")))
    }));
    checks.push(check(
        "identity_patch_equals_full",
        (|| {
            let mut rng = key.stream(Purpose::Eval, 104, 0);
            let model = GaussianModel::new(
                DVector::from_fn(16, |i, _| i as f64 / 16.0),
                grid_precision(4, 4, 1.0, 0.5),
            )?;
            let es: Vec<_> = (0..200)
                .map(|_| DVector::from_fn(16, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let xs: Vec<_> = es.iter().map(|e| model.sample(&mut rng) + e).collect();
            let a = full_fit(model.lambda(), &xs, 1.0, &es)?;
            let b = patch_fit(model.lambda(), &xs, 1.0, &es, &vec![SelectionMatrix::full(16); 200])?;
            let rel = (&a - &b).amax() / a.amax();
            Ok((rel <= 1e-10, format!("relative difference = {rel:e}")))
        })(),
    ));
    checks.push(check("block_patch_fit_recovers_mean", {
        block_fit_error(10_000, 1.0, key).map(|e| (e < 0.05, format!("|mu_hat - mu|_inf = {e:.4} (< 0.05)")))
    }));
    checks.push(check("uncovered_index_reported", {
        let m = diagonal_model(4, key)?;
        let sels: Vec<_> = (0..16)
            .filter(|&i| i != 7)
            .map(|i| SelectionMatrix::new(vec![i], 16))
            .collect::<Result<_>>()?;
        let xs = vec![m.mu().clone(); 15];
        match patch_fit(m.lambda(), &xs, 1.0, &xs, &sels) {
            Err(Error::Identifiability { uncovered }) => Ok((uncovered == [7], format!("uncovered = {uncovered:?}"))),
            other => Ok((false, format!("unexpected outcome {other:?}"))),
        }
    }));
    checks.push(check(
        "mrf_decomposition_agrees",
        (|| {
            let mut worst: f64 = 0.0;
            for side in [2, 3, 4] {
                let d = side * side;
                let mut rng = key.stream(Purpose::Eval, 105, side as u64);
                let prec: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
                let centers: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mrf = GridMrf::quadratic(side, side, &prec, &centers, 0.7)?;
                let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let (full, dec) = mrf_score_decompose(&mrf, &x)?;
                worst = worst.max((full - dec).amax());
            }
            Ok((worst <= 1e-10, format!("max difference = {worst:e} over 2x2..4x4")))
        })(),
    ));
    checks.push(check(
        "mrf_unit_edges_factorize",
        (|| {
            let mut mrf = GridMrf::quadratic(2, 2, &[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4], 1.0)?;
            mrf.edges.iter_mut().for_each(|e| e.2 = QuadPotential::unit(2));
            let x = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
            let (full, _) = mrf_score_decompose(&mrf, &x)?;
            let nodes = DVector::from_fn(4, |v, _| -mrf.nodes[v].q[(0, 0)] * (x[v] - mrf.nodes[v].center[0]));
            let diff = (full - nodes).amax();
            Ok((diff <= 1e-12, format!("max difference = {diff:e}")))
        })(),
    ));

    let convergence = default_convergence_report(&[100, 1000, 10_000], 20, key)?;
    let ratios: Vec<String> = convergence.rows.iter().map(|r| format!("{:.3}", r.ratio)).collect();
    checks.push(Check {
        name: "convergence_strictly_decreasing".into(),
        pass: convergence.strictly_decreasing(),
        detail: format!("patch/full median ratios {}", ratios.join(", ")),
    });
    Ok(SuiteReport {
        seed,
        checks,
        convergence,
    })
}

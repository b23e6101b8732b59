use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `phi(x_c) = scale * exp(-0.5 (x_c - center)^T q (x_c - center))` over a clique.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadPotential {
    pub scale: f64,
    pub q: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl QuadPotential {
    pub fn node(precision: f64, center: f64) -> Self {
        QuadPotential {
            scale: 1.0,
            q: DMatrix::from_element(1, 1, precision),
            center: DVector::from_element(1, center),
        }
    }

    /// Penalizes the difference of two neighbours with strength `coupling`.
    pub fn smoothness(coupling: f64) -> Self {
        QuadPotential {
            scale: 1.0,
            q: DMatrix::from_row_slice(2, 2, &[coupling, -coupling, -coupling, coupling]),
            center: DVector::zeros(2),
        }
    }

    /// The constant potential 1, whose log is identically zero.
    pub fn unit(arity: usize) -> Self {
        QuadPotential {
            scale: 1.0,
            q: DMatrix::zeros(arity, arity),
            center: DVector::zeros(arity),
        }
    }

    fn arity(&self) -> usize {
        self.center.len()
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Domain(format!(
                "{what} has non-positive value (scale {})",
                self.scale
            )));
        }
        if self.q.shape() != (self.arity(), self.arity()) {
            return Err(Error::shape(
                &[self.arity(), self.arity()],
                &[self.q.nrows(), self.q.ncols()],
            ));
        }
        Ok(())
    }

    pub fn log_value(&self, xc: &DVector<f64>) -> f64 {
        let r = xc - &self.center;
        self.scale.ln() - 0.5 * r.dot(&(&self.q * &r))
    }

    /// Gradient of `log phi` with respect to the clique variables.
    pub fn log_gradient(&self, xc: &DVector<f64>) -> DVector<f64> {
        let qs = 0.5 * (&self.q + self.q.transpose());
        -(qs * (xc - &self.center))
    }
}

/// Pairwise Markov random field on a 4-connected `height x width` grid.
#[derive(Clone, Debug)]
pub struct GridMrf {
    pub height: usize,
    pub width: usize,
    pub nodes: Vec<QuadPotential>,
    /// `(u, v, potential over (x_u, x_v))` with `u < v`.
    pub edges: Vec<(usize, usize, QuadPotential)>,
}

impl GridMrf {
    /// Node potentials from `precision`/`centers`, the same smoothness coupling on every edge.
    pub fn quadratic(height: usize, width: usize, precision: &[f64], centers: &[f64], coupling: f64) -> Result<Self> {
        let d = height * width;
        if precision.len() != d || centers.len() != d {
            return Err(Error::shape(&[d], &[precision.len().min(centers.len())]));
        }
        let nodes = precision
            .iter()
            .zip(centers)
            .map(|(&a, &c)| QuadPotential::node(a, c))
            .collect();
        let edges = Self::grid_edges(height, width)
            .into_iter()
            .map(|(u, v)| (u, v, QuadPotential::smoothness(coupling)))
            .collect();
        Ok(GridMrf {
            height,
            width,
            nodes,
            edges,
        })
    }

    pub fn grid_edges(height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if x + 1 < width {
                    out.push((i, i + 1));
                }
                if y + 1 < height {
                    out.push((i, i + width));
                }
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.nodes.len() != d {
            return Err(Error::shape(&[d], &[self.nodes.len()]));
        }
        for (v, p) in self.nodes.iter().enumerate() {
            p.check(&format!("node potential {v}"))?;
            if p.arity() != 1 {
                return Err(Error::shape(&[1], &[p.arity()]));
            }
        }
        for (u, v, p) in &self.edges {
            p.check(&format!("edge potential ({u}, {v})"))?;
            if p.arity() != 2 {
                return Err(Error::shape(&[2], &[p.arity()]));
            }
            if *u >= d || *v >= d || u == v {
                return Err(Error::OutOfRange(format!("edge ({u}, {v}) on {d} nodes")));
            }
        }
        Ok(())
    }

    /// Global quadratic form `log p = -0.5 x^T J x + h^T x + const`.
    pub fn information_form(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.validate()?;
        let d = self.dim();
        let mut j = DMatrix::zeros(d, d);
        let mut h = DVector::zeros(d);
        let mut add = |idx: &[usize], p: &QuadPotential| {
            let qs = 0.5 * (&p.q + p.q.transpose());
            let qc = &qs * &p.center;
            for (a, &ia) in idx.iter().enumerate() {
                h[ia] += qc[a];
                for (b, &ib) in idx.iter().enumerate() {
                    j[(ia, ib)] += qs[(a, b)];
                }
            }
        };
        for (v, p) in self.nodes.iter().enumerate() {
            add(&[v], p);
        }
        for (u, v, p) in &self.edges {
            add(&[*u, *v], p);
        }
        Ok((j, h))
    }

    pub fn log_density_unnormalized(&self, x: &DVector<f64>) -> Result<f64> {
        self.validate()?;
        let nodes: f64 = self
            .nodes
            .iter()
            .enumerate()
            .map(|(v, p)| p.log_value(&DVector::from_element(1, x[v])))
            .sum();
        let edges: f64 = self
            .edges
            .iter()
            .map(|(u, v, p)| p.log_value(&DVector::from_vec(vec![x[*u], x[*v]])))
            .sum();
        Ok(nodes + edges)
    }
}

/// Score of the field at `x`, once from the assembled global form and once as a sum over cliques.
pub fn mrf_score_decompose(mrf: &GridMrf, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != mrf.dim() {
        return Err(Error::shape(&[mrf.dim()], &[x.len()]));
    }
    let (j, h) = mrf.information_form()?;
    let full = h - j * x;
    let mut decomposed = DVector::zeros(mrf.dim());
    for (v, p) in mrf.nodes.iter().enumerate() {
        decomposed[v] += p.log_gradient(&DVector::from_element(1, x[v]))[0];
    }
    for (u, v, p) in &mrf.edges {
        let g = p.log_gradient(&DVector::from_vec(vec![x[*u], x[*v]]));
        decomposed[*u] += g[0];
        decomposed[*v] += g[1];
    }
    Ok((full, decomposed))
}

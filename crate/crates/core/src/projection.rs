//! Deterministic 2-D principal-component projection for representation
//! dumps. Eigenpairs come from a cyclic Jacobi sweep over the covariance
//! matrix; component signs are fixed by making the largest-magnitude
//! coordinate positive, so identical inputs always produce identical
//! coordinates.

use crate::error::{Error, Result};

/// Top-2 principal directions of a centered point cloud.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// The two leading eigenvectors, unit norm, sign-fixed.
    pub components: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Projection {
    /// Coordinates of a point in the projected plane.
    pub fn project(&self, x: &[f64]) -> (f64, f64) {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let c1 = dot(&centered, &self.components[0]);
        let c2 = dot(&centered, &self.components[1]);
        (c1, c2)
    }

    /// Mean squared reconstruction error of the fitted cloud; equals the
    /// sum of the trailing eigenvalues.
    pub fn trailing_variance(&self) -> f64 {
        self.eigenvalues.iter().skip(2).sum()
    }
}

/// Fit the top-2 variance directions of `data` (rows = observations).
pub fn principal_projection(data: &[Vec<f64>]) -> Result<Projection> {
    if data.is_empty() {
        return Err(Error::data("cannot project an empty point set"));
    }
    let dim = data[0].len();
    if dim < 2 {
        return Err(Error::data("projection needs at least 2 dimensions"));
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in data {
        if row.len() != dim {
            return Err(Error::Dimension {
                op: "principal_projection",
                lhs: vec![dim],
                rhs: vec![row.len()],
            });
        }
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    // Covariance (1/n) X_c^T X_c.
    let mut cov = vec![0.0; dim * dim];
    for row in data {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += centered[i] * centered[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i * dim + j] = cov[j * dim + i];
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(cov, dim);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));

    let component = |idx: usize| -> Vec<f64> {
        let col = order[idx];
        let mut v: Vec<f64> = (0..dim).map(|r| vectors[r * dim + col]).collect();
        // Sign fix: largest-magnitude coordinate positive.
        let mut anchor = 0;
        for (i, x) in v.iter().enumerate().skip(1) {
            if x.abs() > v[anchor].abs() {
                anchor = i;
            }
        }
        if v[anchor] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        v
    };

    Ok(Projection {
        mean,
        components: [component(0), component(1)],
        eigenvalues: order.iter().map(|&i| eigenvalues[i]).collect(),
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

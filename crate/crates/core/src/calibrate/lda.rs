use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, CalibrateError, Rows, N_OUT};

/// Linear discriminant analysis with a pooled, ridge-regularized covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lda {
    /// Per class `(weights, bias)`; absent classes are `None`.
    discriminants: Vec<Option<(Vec<f64>, f64)>>,
}

impl Lda {
    pub fn fit(x: &Rows, y: &[usize]) -> Result<Lda, CalibrateError> {
        let dim = x.dim;
        let mut counts = [0usize; N_OUT];
        let mut means = vec![vec![0.0f64; dim]; N_OUT];
        for i in 0..x.n {
            counts[y[i]] += 1;
            means[y[i]].iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v as f64);
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        let present = counts.iter().filter(|&&c| c > 0).count();
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..x.n {
            let d = DVector::from_iterator(dim, x.row(i).iter().zip(&means[y[i]]).map(|(&v, m)| v as f64 - m));
            cov.syger(1.0, &d, &d, 1.0);
        }
        cov /= (x.n.saturating_sub(present)).max(1) as f64;
        let ridge = 1e-6 * cov.trace() / dim as f64;
        let ridge = if ridge > 0.0 { ridge } else { 1e-12 };
        for j in 0..dim {
            cov[(j, j)] += ridge;
        }
        let chol = cov.cholesky().ok_or_else(|| CalibrateError::Fit("LDA covariance is not positive definite".into()))?;
        let discriminants = (0..N_OUT)
            .map(|c| {
                (counts[c] > 0).then(|| {
                    let mu = DVector::from_column_slice(&means[c]);
                    let w = chol.solve(&mu);
                    let prior = counts[c] as f64 / x.n as f64;
                    let bias = -0.5 * mu.dot(&w) + prior.ln();
                    (w.as_slice().to_vec(), bias)
                })
            })
            .collect();
        Ok(Lda { discriminants })
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let scores: Vec<f64> = self
            .discriminants
            .iter()
            .map(|d| match d {
                Some((w, b)) => w.iter().zip(row).map(|(w, &v)| w * v as f64).sum::<f64>() + b,
                None => f64::NEG_INFINITY,
            })
            .collect();
        argmax_lowest(&scores)
    }
}

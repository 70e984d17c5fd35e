use serde::{Deserialize, Serialize};

use super::{argmax_lowest, Rows, N_OUT};

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent with backtracking line search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[N_OUT, dim + 1]`, bias last.
    weights: Vec<f64>,
    pub iterations: usize,
}

struct Problem<'a> {
    x: Vec<f64>,
    y: &'a [usize],
    n: usize,
    dim: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Objective and gradient at `w`.
    fn eval(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let stride = self.dim + 1;
        let mut loss = 0.0;
        let mut g = vec![0.0; w.len()];
        let mut logits = [0.0; N_OUT];
        for i in 0..self.n {
            let row = &self.x[i * self.dim..(i + 1) * self.dim];
            for (c, l) in logits.iter_mut().enumerate() {
                let wc = &w[c * stride..(c + 1) * stride];
                *l = wc[self.dim] + wc[..self.dim].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            loss += max + z.ln() - logits[self.y[i]];
            for c in 0..N_OUT {
                let p = (logits[c] - max).exp() / z - if c == self.y[i] { 1.0 } else { 0.0 };
                let gc = &mut g[c * stride..(c + 1) * stride];
                gc[..self.dim].iter_mut().zip(row).for_each(|(o, &v)| *o += p * v);
                gc[self.dim] += p;
            }
        }
        let n = self.n as f64;
        loss /= n;
        let mut penalty = 0.0;
        for c in 0..N_OUT {
            for j in 0..self.dim {
                let k = c * stride + j;
                penalty += w[k] * w[k];
                g[k] = g[k] / n + self.l2 * w[k];
            }
            g[c * stride + self.dim] /= n;
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        loss + 0.5 * self.l2 * penalty
    }
}

impl Logistic {
    pub fn fit(x: &Rows, y: &[usize], l2: f64, max_iter: usize, tol: f64) -> Logistic {
        let (n, dim) = (x.n, x.dim);
        let mut mean = vec![0.0; dim];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for i in 0..n {
            scale.iter_mut().zip(x.row(i)).zip(&mean).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { (*s / n as f64).sqrt() } else { 1.0 });
        let xs = (0..n).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| (x.get(i, j) as f64 - mean[j]) / scale[j]).collect();
        let problem = Problem { x: xs, y, n, dim, l2 };

        let mut w = vec![0.0; N_OUT * (dim + 1)];
        let mut g = vec![0.0; w.len()];
        let mut f = problem.eval(&w, Some(&mut g));
        let mut step = 1.0;
        let mut iterations = 0;
        while iterations < max_iter {
            let gnorm2: f64 = g.iter().map(|v| v * v).sum();
            if gnorm2.sqrt() < tol {
                break;
            }
            iterations += 1;
            let mut candidate = vec![0.0; w.len()];
            loop {
                candidate.iter_mut().zip(&w).zip(&g).for_each(|((c, wi), gi)| *c = wi - step * gi);
                let fc = problem.eval(&candidate, None);
                if fc <= f - 0.5 * step * gnorm2 || step < 1e-12 {
                    break;
                }
                step *= 0.5;
            }
            w = candidate;
            f = problem.eval(&w, Some(&mut g));
            step *= 2.0;
        }
        Logistic { mean, scale, weights: w, iterations }
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let dim = self.mean.len();
        let xs: Vec<f64> = row.iter().zip(&self.mean).zip(&self.scale).map(|((&v, m), s)| (v as f64 - m) / s).collect();
        let scores: Vec<f64> = self
            .weights
            .chunks_exact(dim + 1)
            .map(|wc| wc[dim] + wc[..dim].iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        argmax_lowest(&scores)
    }
}

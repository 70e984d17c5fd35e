use serde::{Deserialize, Serialize};

use super::{argmax_lowest, Rows, N_OUT};

/// Brute-force k-nearest-neighbour vote under Euclidean distance. Distance
/// ties keep training order; vote ties go to the lowest class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    k: usize,
    dim: usize,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn fit(x: &Rows, y: &[usize], k: usize) -> Knn {
        Knn { k: k.max(1), dim: x.dim, data: x.data.to_vec(), labels: y.to_vec() }
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let mut d: Vec<(f64, usize)> = self
            .data
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, r)| (r.iter().zip(row).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum(), i))
            .collect();
        let k = self.k.min(d.len());
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0.0; N_OUT];
        d[..k].iter().for_each(|&(_, i)| votes[self.labels[i]] += 1.0);
        argmax_lowest(&votes)
    }
}

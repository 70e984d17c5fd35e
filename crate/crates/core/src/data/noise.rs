use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, Window};

/// Population standard deviation over every value of every window.
pub fn population_std(windows: &[Window]) -> f64 {
    let n: usize = windows.iter().map(|w| w.samples.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = windows.iter().flat_map(|w| w.samples.iter()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = windows
        .iter()
        .flat_map(|w| w.samples.iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    var.sqrt()
}

/// Noise scale giving `snr_db` relative to a signal of spread `sigma_x`.
pub fn noise_sigma(sigma_x: f64, snr_db: f64) -> f64 {
    sigma_x / 10f64.powf(snr_db / 20.0)
}

/// Add white Gaussian noise to a batch of one class so that the batch SNR is
/// `snr_db`. `None` means infinite SNR and returns the input unchanged, as
/// does a zero-variance batch.
pub fn inject_noise<R: Rng + ?Sized>(batch: &[Window], snr_db: Option<f64>, rng: &mut R) -> Result<Vec<Window>, DataError> {
    let first = batch.first().ok_or_else(|| DataError::Batch("noise injection on an empty batch".into()))?;
    if let Some(w) = batch.iter().find(|w| w.label != first.label) {
        return Err(DataError::Batch(format!("mixed classes in one noise batch: {} and {}", first.label, w.label)));
    }
    let Some(snr) = snr_db else { return Ok(batch.to_vec()) };
    let sigma = noise_sigma(population_std(batch), snr);
    if sigma == 0.0 {
        return Ok(batch.to_vec());
    }
    Ok(batch
        .iter()
        .map(|w| {
            let samples: Vec<f32> = w
                .samples
                .iter()
                .map(|&v| v + (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            Window { samples: samples.into(), ..w.clone() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, GestureLabel, Modifier};
    use crate::rng::stream;

    fn windows(mut values: impl FnMut(usize) -> f32, n: usize, len: usize) -> Vec<Window> {
        let label = GestureLabel::new(Direction::Up, Modifier::NoMod);
        (0..n).map(|i| Window::new((0..len).map(|j| values(i * len + j)).collect(), 1, label, 0)).collect()
    }

    #[test]
    fn closed_form_sigma() {
        assert!((noise_sigma(1.0, 20.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn infinite_snr_is_identity() {
        let b = windows(|i| (i as f32).sin(), 3, 10);
        let out = inject_noise(&b, None, &mut stream(0, "n", &[])).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn constant_batch_is_unchanged() {
        let b = windows(|_| 4.5, 3, 10);
        let out = inject_noise(&b, Some(10.0), &mut stream(0, "n", &[])).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn empirical_snr_within_half_db() {
        let mut rng = stream(5, "signal", &[]);
        let b = windows(|_| rng.sample::<f64, _>(StandardNormal) as f32 * 2.0 + 1.0, 50, 1000);
        for snr in [10.0, 20.0, 30.0] {
            let out = inject_noise(&b, Some(snr), &mut stream(1, "n", &[snr as u64])).unwrap();
            let noise: Vec<Window> = out
                .iter()
                .zip(&b)
                .map(|(o, i)| Window {
                    samples: o.samples.iter().zip(i.samples.iter()).map(|(a, b)| a - b).collect::<Vec<_>>().into(),
                    ..i.clone()
                })
                .collect();
            let measured = 20.0 * (population_std(&b) / population_std(&noise)).log10();
            assert!((measured - snr).abs() < 0.5, "snr {snr}: measured {measured}");
        }
    }

    #[test]
    fn mixed_classes_rejected() {
        let mut b = windows(|i| i as f32, 2, 4);
        b[1].label = GestureLabel::new(Direction::Down, Modifier::NoMod);
        assert!(inject_noise(&b, Some(20.0), &mut stream(0, "n", &[])).is_err());
    }
}

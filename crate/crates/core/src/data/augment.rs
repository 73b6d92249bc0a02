use rand_distr::{Distribution, StandardNormal};

use super::FeatureSequence;
use crate::error::{KwsError, Result};
use crate::numerics::Tensor;
use crate::seed;

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// SNR in dB of `clean` against the difference `noisy - clean`.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let noise: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    10.0 * (power(clean) / power(&noise)).log10()
}

/// Adds white Gaussian noise scaled so the realized SNR equals `snr_db`.
pub fn augment_noise(features: &FeatureSequence, snr_db: f64, seed: u64) -> Result<FeatureSequence> {
    if !snr_db.is_finite() {
        return Err(KwsError::Validation(format!("snr must be finite, got {snr_db}")));
    }
    let clean = features.frames.data();
    let signal = power(clean);
    if signal == 0.0 {
        return Err(KwsError::Validation(format!(
            "cannot set an snr on silent utterance {}",
            features.utterance_id
        )));
    }
    let mut rng = seed::rng(seed);
    let mut noise: Vec<f64> = (0..clean.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let target = signal / 10f64.powf(snr_db / 10.0);
    let scale = (target / power(&noise)).sqrt();
    noise.iter_mut().zip(clean).for_each(|(n, c)| *n = c + *n * scale);
    Ok(FeatureSequence {
        frames: Tensor::new(features.frames.shape().to_vec(), noise)?,
        utterance_id: features.utterance_id.clone(),
        speaker_id: features.speaker_id.clone(),
    })
}

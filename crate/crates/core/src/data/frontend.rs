use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{KwsError, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const FRAME_LENGTH: usize = 400;
/// 10 ms hop.
pub const HOP_LENGTH: usize = 160;
pub const MEL_BINS: usize = 40;
const FFT_SIZE: usize = 512;
const MEL_LOW_HZ: f64 = 125.0;
const MEL_HIGH_HZ: f64 = 7500.0;
const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies in Hz of the triangular filters.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_edges()[1..=MEL_BINS].to_vec()
}

fn mel_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

/// `[MEL_BINS × (FFT_SIZE/2 + 1)]` triangular weights.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let edges = mel_edges();
    let bins = FFT_SIZE / 2 + 1;
    let hz_per_bin = SAMPLE_RATE as f64 / FFT_SIZE as f64;
    (0..MEL_BINS)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * hz_per_bin;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log mel energies `[frames × MEL_BINS]` of 16 kHz mono samples.
/// Only whole windows are used: `frames = 1 + (len - 400) / 160`.
pub fn extract_logmel_samples(samples: &[f64]) -> Result<Tensor> {
    if samples.len() < FRAME_LENGTH {
        return Err(KwsError::Validation(format!(
            "audio has {} samples, need at least {FRAME_LENGTH}",
            samples.len()
        )));
    }
    let frames = 1 + (samples.len() - FRAME_LENGTH) / HOP_LENGTH;
    let window: Vec<f64> = (0..FRAME_LENGTH)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME_LENGTH as f64).cos())
        .collect();
    let bank = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut out = Vec::with_capacity(frames * MEL_BINS);
    for f in 0..frames {
        let chunk = &samples[f * HOP_LENGTH..f * HOP_LENGTH + FRAME_LENGTH];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (s, w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            b.re = s * w;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Tensor::new(vec![frames, MEL_BINS], out)
}

/// Reads a 16 kHz mono WAV (integer or float samples) scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
        return Err(KwsError::Data(format!(
            "{}: expected 16 kHz mono, got {} Hz with {} channel(s)",
            path.display(),
            spec.sample_rate,
            spec.channels
        )));
    }
    let bad = |e: hound::Error| KwsError::Data(format!("{}: {e}", path.display()));
    match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().map(|s| s.map(f64::from).map_err(bad)).collect(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale).map_err(bad)).collect()
        }
    }
}

pub fn extract_logmel(path: &Path) -> Result<Tensor> {
    extract_logmel_samples(&read_wav(path)?)
}

/// Concatenates each frame with its `left` predecessors, oldest first.
/// Frames before the start replicate frame 0.
pub fn stack_context(frames: &Tensor, left: usize) -> Result<Tensor> {
    let (n, d) = frames.matrix_dims("stack_context")?;
    let mut out = Vec::with_capacity(n * d * (left + 1));
    for f in 0..n {
        for back in (0..=left).rev() {
            out.extend_from_slice(frames.row(f.saturating_sub(back)));
        }
    }
    Tensor::new(vec![n, d * (left + 1)], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let t = extract_logmel_samples(&vec![0.0; 16_000]).unwrap();
        assert_eq!(t.shape(), &[98, MEL_BINS]);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let t = extract_logmel_samples(&vec![0.0; 4000]).unwrap();
        assert!(t.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_at_nearest_filter() {
        let hz = 1000.0;
        let s: Vec<f64> = (0..16_000).map(|n| (2.0 * PI * hz * n as f64 / 16_000.0).sin()).collect();
        let t = extract_logmel_samples(&s).unwrap();
        let centers = mel_center_frequencies();
        let nearest = (0..MEL_BINS)
            .min_by(|&a, &b| (centers[a] - hz).abs().total_cmp(&(centers[b] - hz).abs()))
            .unwrap();
        for f in 0..t.rows() {
            let row = t.row(f);
            let peak = (0..MEL_BINS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, nearest, "frame {f}");
        }
    }

    #[test]
    fn too_short_audio_rejected() {
        assert!(extract_logmel_samples(&[0.0; 399]).is_err());
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 125.0, 1000.0, 7500.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn context_stacking_replicates_first_frame() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = stack_context(&x, 1).unwrap();
        assert_eq!(s.shape(), &[3, 4]);
        assert_eq!(s.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    }
}

//! Training-time augmentation: time shift, resampling, background-noise
//! mixing on the waveform, and SpecAugment-style time/frequency masks on the
//! feature matrix. Augmentation order is fixed: shift, resample, noise.
//!
//! Validation and test paths never call into this module; their features come
//! straight from [`crate::features::mfcc`].

use crate::error::{Error, Result};
use crate::features::{MfccMatrix, Waveform, MFCC_BINS, MFCC_FRAMES, SAMPLE_RATE};
use crate::rng::{uniform, uniform_in, uniform_usize, ChaCha8Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Shift drawn uniformly from [-shift_ms, shift_ms].
    pub shift_ms: f32,
    pub resample_lo: f32,
    pub resample_hi: f32,
    /// Amplitude scale applied to the mixed-in noise crop.
    pub noise_volume: f32,
    pub noise_prob: f32,
    pub time_masks: usize,
    pub time_mask_max: usize,
    pub freq_masks: usize,
    pub freq_mask_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_ms: 100.0,
            resample_lo: 0.85,
            resample_hi: 1.15,
            noise_volume: 0.1,
            noise_prob: 0.8,
            time_masks: 2,
            time_mask_max: 25,
            freq_masks: 2,
            freq_mask_max: 7,
        }
    }
}

/// Target length every augmented waveform is cropped or padded to.
pub const AUGMENT_SAMPLES: usize = SAMPLE_RATE as usize;

/// Shifts content by `shift` samples (positive delays, negative advances),
/// zero-filling the vacated region. Length is preserved.
pub fn shift_waveform(w: &Waveform, shift: i64) -> Waveform {
    let n = w.samples.len() as i64;
    let samples = (0..n)
        .map(|i| {
            let src = i - shift;
            if src >= 0 && src < n {
                w.samples[src as usize]
            } else {
                0.0
            }
        })
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Linear-interpolation resampling by `rate`; the output holds
/// floor(len / rate) samples (rate < 1 stretches, rate > 1 compresses).
pub fn resample_linear(w: &Waveform, rate: f32) -> Waveform {
    let n = w.samples.len();
    if n == 0 || rate == 1.0 {
        return w.clone();
    }
    let out_len = (n as f64 / rate as f64).floor() as usize;
    let samples = (0..out_len)
        .map(|i| {
            let src = i as f64 * rate as f64;
            let lo = src.floor() as usize;
            let frac = (src - lo as f64) as f32;
            let a = w.samples.get(lo).copied().unwrap_or(0.0);
            let b = w.samples.get(lo + 1).copied().unwrap_or(a);
            a + frac * (b - a)
        })
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

fn crop_or_pad(mut samples: Vec<f32>, len: usize) -> Vec<f32> {
    samples.resize(len, 0.0);
    samples.truncate(len);
    samples
}

/// Full waveform augmentation: uniform shift in [-shift_ms, shift_ms],
/// uniform resampling rate, then with probability `noise_prob` a random
/// one-second crop of a random noise clip scaled by `noise_volume`. The
/// result is exactly one second long, clamped to [-1, 1].
pub fn augment_waveform(
    w: &Waveform,
    noise_pool: &[Waveform],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    if cfg.noise_prob > 0.0 {
        if noise_pool.is_empty() {
            return Err(Error::Config(
                "augment: noise_prob > 0 requires a non-empty noise pool".into(),
            ));
        }
        for (i, clip) in noise_pool.iter().enumerate() {
            if clip.samples.len() < AUGMENT_SAMPLES {
                return Err(Error::Config(format!(
                    "augment: noise clip {i} is shorter than one second ({} samples)",
                    clip.samples.len()
                )));
            }
        }
    }

    // Fixed draw order: shift, rate, noise coin, then clip and offset.
    let shift_ms = uniform_in(rng, -cfg.shift_ms, cfg.shift_ms);
    let shift = (shift_ms * SAMPLE_RATE as f32 / 1000.0).round() as i64;
    let rate = uniform_in(rng, cfg.resample_lo, cfg.resample_hi);
    let coin = uniform(rng);

    let shifted = shift_waveform(w, shift);
    let resampled = resample_linear(&shifted, rate);
    let mut samples = crop_or_pad(resampled.samples, AUGMENT_SAMPLES);

    if cfg.noise_prob > 0.0 && coin < cfg.noise_prob {
        let clip = &noise_pool[uniform_usize(rng, noise_pool.len())];
        let max_off = clip.samples.len() - AUGMENT_SAMPLES;
        let off = uniform_usize(rng, max_off + 1);
        for (s, &n) in samples.iter_mut().zip(&clip.samples[off..off + AUGMENT_SAMPLES]) {
            *s += cfg.noise_volume * n;
        }
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// SpecAugment masks: `time_masks` column bands of width U{0..time_mask_max}
/// and `freq_masks` row bands of height U{0..freq_mask_max}, zeroed.
pub fn spec_augment(m: &MfccMatrix, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> MfccMatrix {
    let mut data = m.coeffs.data().to_vec();
    for _ in 0..cfg.time_masks {
        let width = uniform_usize(rng, cfg.time_mask_max + 1);
        let start = uniform_usize(rng, MFCC_FRAMES - width + 1);
        for row in 0..MFCC_BINS {
            for col in start..start + width {
                data[row * MFCC_FRAMES + col] = 0.0;
            }
        }
    }
    for _ in 0..cfg.freq_masks {
        let height = uniform_usize(rng, cfg.freq_mask_max + 1);
        let start = uniform_usize(rng, MFCC_BINS - height + 1);
        for row in start..start + height {
            for col in 0..MFCC_FRAMES {
                data[row * MFCC_FRAMES + col] = 0.0;
            }
        }
    }
    MfccMatrix {
        coeffs: Tensor::from_vec(&[MFCC_BINS, MFCC_FRAMES], data).unwrap(),
        source_frames: m.source_frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mfcc;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn tone(secs: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f32) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| 0.4 * (0.11 * i as f32).sin())
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn null_augmentation_is_identity() {
        let w = tone(1.0);
        let shifted = shift_waveform(&w, 0);
        assert_eq!(shifted.samples, w.samples);
        let resampled = resample_linear(&w, 1.0);
        assert_eq!(resampled.samples, w.samples);
    }

    #[test]
    fn positive_shift_zeroes_the_head() {
        let w = tone(1.0);
        let out = shift_waveform(&w, 1600); // +100 ms
        assert!(out.samples[..1600].iter().all(|&v| v == 0.0));
        assert_eq!(out.samples[1600], w.samples[0]);
        assert_eq!(out.samples.len(), w.samples.len());
    }

    #[test]
    fn slow_resample_lengthens_then_crops() {
        let w = tone(1.0);
        let out = resample_linear(&w, 0.85);
        assert_eq!(out.samples.len(), (16000f64 / 0.85).floor() as usize); // 18823
        let cropped = crop_or_pad(out.samples, AUGMENT_SAMPLES);
        assert_eq!(cropped.len(), 16000);
    }

    #[test]
    fn empty_noise_pool_with_noise_prob_is_config_error() {
        let w = tone(1.0);
        let cfg = AugmentConfig::default();
        let mut rng = rng_from_seed(1);
        assert!(matches!(
            augment_waveform(&w, &[], &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_noise_clip_is_config_error() {
        let w = tone(1.0);
        let cfg = AugmentConfig::default();
        let mut rng = rng_from_seed(1);
        let short = tone(0.5);
        assert!(matches!(
            augment_waveform(&w, &[short], &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn augmented_output_is_reproducible_per_seed() {
        let w = tone(0.9);
        let noise = tone(2.0);
        let cfg = AugmentConfig::default();
        let a = augment_waveform(&w, &[noise.clone()], &cfg, &mut rng_from_seed(7)).unwrap();
        let b = augment_waveform(&w, &[noise], &cfg, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn spec_augment_with_zero_maxima_is_identity() {
        let m = mfcc(&tone(1.0)).unwrap();
        let cfg = AugmentConfig {
            time_mask_max: 0,
            freq_mask_max: 0,
            ..AugmentConfig::default()
        };
        let out = spec_augment(&m, &cfg, &mut rng_from_seed(3));
        assert_eq!(out.coeffs.data(), m.coeffs.data());
        assert_eq!(out.source_frames, m.source_frames);
    }

    #[test]
    fn spec_augment_is_deterministic_per_seed() {
        let m = mfcc(&tone(1.0)).unwrap();
        let cfg = AugmentConfig::default();
        let a = spec_augment(&m, &cfg, &mut rng_from_seed(9));
        let b = spec_augment(&m, &cfg, &mut rng_from_seed(9));
        assert_eq!(a.coeffs.data(), b.coeffs.data());
    }

    #[test]
    fn time_masks_zero_at_most_fifty_columns() {
        let m = mfcc(&tone(1.0)).unwrap();
        let cfg = AugmentConfig {
            freq_masks: 0,
            ..AugmentConfig::default()
        };
        for seed in 0..50 {
            let out = spec_augment(&m, &cfg, &mut rng_from_seed(seed));
            let zeroed = (0..MFCC_FRAMES)
                .filter(|&col| (0..MFCC_BINS).all(|row| out.coeffs.data()[row * MFCC_FRAMES + col] == 0.0))
                .count();
            assert!(zeroed <= 50, "seed {seed}: {zeroed} columns zeroed");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augmented_length_is_always_one_second(seed in 0u64..5000, len_ms in 300usize..1200) {
            let w = tone(len_ms as f32 / 1000.0);
            let noise = tone(1.5);
            let cfg = AugmentConfig::default();
            let out = augment_waveform(&w, &[noise], &cfg, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(out.samples.len(), AUGMENT_SAMPLES);
            prop_assert!(out.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn spec_augment_never_increases_magnitude(seed in 0u64..5000) {
            let m = mfcc(&tone(1.0)).unwrap();
            let cfg = AugmentConfig::default();
            let out = spec_augment(&m, &cfg, &mut rng_from_seed(seed));
            for (a, b) in out.coeffs.data().iter().zip(m.coeffs.data()) {
                prop_assert!(a.abs() <= b.abs() + 1e-9);
            }
        }
    }
}

//! Audio front end: PCM WAV decoding and the 40-dimensional MFCC pipeline.
//!
//! The feature chain is frozen so experiments reproduce exactly: 30 ms Hann
//! window (480 samples at 16 kHz, periodic form), 10 ms hop, magnitude FFT of
//! size 512, a 40-band triangular mel filterbank on the HTK scale spanning
//! 20 Hz - 8 kHz, natural log with a 1e-10 floor, an orthonormal DCT-II
//! keeping all 40 coefficients, and zero padding (or truncation) of the time
//! axis to 98 frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::path::Path;
use std::sync::{Arc, OnceLock};

pub const SAMPLE_RATE: u32 = 16_000;
pub const MFCC_BINS: usize = 40;
pub const MFCC_FRAMES: usize = 98;
pub const WINDOW_SAMPLES: usize = 480; // 30 ms
pub const HOP_SAMPLES: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const MEL_LOW_HZ: f32 = 20.0;
pub const MEL_HIGH_HZ: f32 = 8_000.0;
pub const LOG_FLOOR: f32 = 1e-10;

/// Mono audio in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// A fixed 40 x 98 coefficient matrix; columns beyond `source_frames` are
/// exactly zero.
#[derive(Clone, Debug)]
pub struct MfccMatrix {
    pub coeffs: Tensor, // [40, 98]
    pub source_frames: usize,
}

// ---------------------------------------------------------------------------
// WAV parsing (RIFF, PCM 16-bit mono)
// ---------------------------------------------------------------------------

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            msg: "truncated file".into(),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

fn read_u16(bytes: &[u8], offset: usize) -> Result<u16> {
    let end = offset + 2;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            msg: "truncated file".into(),
        });
    }
    Ok(u16::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Decodes a RIFF/WAVE buffer holding 16-bit mono PCM. Samples are scaled by
/// 1/32768.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::Format {
            offset: 0,
            msg: "missing RIFF header".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Format {
            offset: 8,
            msg: "not a WAVE file".into(),
        });
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_len = read_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match chunk_id {
            b"fmt " => {
                let codec = read_u16(bytes, body)?;
                let channels = read_u16(bytes, body + 2)?;
                let rate = read_u32(bytes, body + 4)?;
                let bits = read_u16(bytes, body + 14)?;
                fmt = Some((codec, channels, rate, bits));
            }
            b"data" => {
                if body + chunk_len > bytes.len() {
                    return Err(Error::Format {
                        offset: body as u64,
                        msg: format!(
                            "data chunk claims {chunk_len} bytes but only {} remain",
                            bytes.len() - body
                        ),
                    });
                }
                data = Some((body, chunk_len));
            }
            _ => {}
        }
        // chunks are word-aligned
        pos = body + chunk_len + (chunk_len & 1);
    }
    let (codec, channels, rate, bits) = fmt.ok_or(Error::Format {
        offset: 12,
        msg: "missing fmt chunk".into(),
    })?;
    if codec != 1 {
        return Err(Error::Format {
            offset: 20,
            msg: format!("unsupported codec {codec}, expected PCM (1)"),
        });
    }
    if channels != 1 {
        return Err(Error::Format {
            offset: 22,
            msg: format!("expected mono audio, file has {channels} channels"),
        });
    }
    if bits != 16 {
        return Err(Error::Format {
            offset: 34,
            msg: format!("expected 16-bit samples, got {bits}"),
        });
    }
    let (off, len) = data.ok_or(Error::Format {
        offset: pos as u64,
        msg: "missing data chunk".into(),
    })?;
    let samples: Vec<f32> = bytes[off..off + (len & !1)]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = std::fs::read(path.as_ref())?;
    parse_wav(&bytes)
}

/// Serializes a waveform as 16-bit mono PCM (test fixtures, synthesis).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// MFCC pipeline
// ---------------------------------------------------------------------------

fn hann_window() -> &'static Vec<f32> {
    static WINDOW: OnceLock<Vec<f32>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..WINDOW_SAMPLES)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / WINDOW_SAMPLES as f64;
                (0.5 * (1.0 - phase.cos())) as f32
            })
            .collect()
    })
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank rows over the FFT_SIZE/2 + 1 magnitude bins.
fn mel_filterbank() -> &'static Vec<Vec<f32>> {
    static BANK: OnceLock<Vec<Vec<f32>>> = OnceLock::new();
    BANK.get_or_init(|| {
        let bins = FFT_SIZE / 2 + 1;
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let points: Vec<f32> = (0..MFCC_BINS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (MFCC_BINS + 1) as f32))
            .collect();
        let hz_per_bin = SAMPLE_RATE as f32 / FFT_SIZE as f32;
        (0..MFCC_BINS)
            .map(|m| {
                let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f32 * hz_per_bin;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= center {
                            (f - lo) / (center - lo)
                        } else {
                            (hi - f) / (hi - center)
                        }
                    })
                    .collect()
            })
            .collect()
    })
}

/// Orthonormal DCT-II basis, MFCC_BINS x MFCC_BINS.
fn dct_basis() -> &'static Vec<f32> {
    static BASIS: OnceLock<Vec<f32>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let m = MFCC_BINS;
        let mut basis = vec![0.0f32; m * m];
        for k in 0..m {
            let scale = if k == 0 {
                (1.0 / m as f64).sqrt()
            } else {
                (2.0 / m as f64).sqrt()
            };
            for j in 0..m {
                basis[k * m + j] = (scale
                    * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * m) as f64)
                        .cos()) as f32;
            }
        }
        basis
    })
}

fn fft_plan() -> Arc<dyn Fft<f32>> {
    static PLAN: OnceLock<Arc<dyn Fft<f32>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(FFT_SIZE))
        .clone()
}

/// Frame count before padding: 1 + floor((len - window) / hop), capped at the
/// fixed 98-frame output width.
pub fn frame_count(samples: usize) -> usize {
    if samples < WINDOW_SAMPLES {
        0
    } else {
        (1 + (samples - WINDOW_SAMPLES) / HOP_SAMPLES).min(MFCC_FRAMES)
    }
}

/// 40-dimensional MFCCs over 30 ms windows with a 10 ms stride, zero-padded
/// to exactly 98 frames.
pub fn mfcc(w: &Waveform) -> Result<MfccMatrix> {
    if w.samples.is_empty() {
        return Err(Error::Data("mfcc: empty waveform".into()));
    }
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "mfcc: expected {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        )));
    }
    let frames = frame_count(w.samples.len());
    let window = hann_window();
    let bank = mel_filterbank();
    let basis = dct_basis();
    let fft = fft_plan();
    let bins = FFT_SIZE / 2 + 1;

    let mut out = vec![0.0f32; MFCC_BINS * MFCC_FRAMES];
    let mut buf = vec![Complex32::default(); FFT_SIZE];
    let mut magnitude = vec![0.0f32; bins];
    let mut log_mel = vec![0.0f32; MFCC_BINS];
    for frame in 0..frames {
        let start = frame * HOP_SAMPLES;
        for i in 0..FFT_SIZE {
            let v = if i < WINDOW_SAMPLES {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex32::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in magnitude.iter_mut().zip(buf.iter()) {
            *m = b.norm();
        }
        for (lm, row) in log_mel.iter_mut().zip(bank.iter()) {
            let mut acc = 0.0f32;
            for (&w, &m) in row.iter().zip(&magnitude) {
                acc += w * m;
            }
            *lm = acc.max(LOG_FLOOR).ln();
        }
        for k in 0..MFCC_BINS {
            let mut acc = 0.0f32;
            for j in 0..MFCC_BINS {
                acc += basis[k * MFCC_BINS + j] * log_mel[j];
            }
            out[k * MFCC_FRAMES + frame] = acc;
        }
    }

    Ok(MfccMatrix {
        coeffs: Tensor::from_vec(&[MFCC_BINS, MFCC_FRAMES], out)?,
        source_frames: frames,
    })
}

/// Writes a coefficient matrix as CSV: 40 rows x 98 columns.
pub fn mfcc_to_csv(m: &MfccMatrix) -> String {
    let mut out = String::new();
    for row in m.coeffs.data().chunks(MFCC_FRAMES) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f32, secs: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f32) as usize;
        let samples = (0..n)
            .map(|i| {
                0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / SAMPLE_RATE as f32).sin()
            })
            .collect();
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn one_second_fills_all_98_frames() {
        let m = mfcc(&sine(440.0, 1.0)).unwrap();
        assert_eq!(m.source_frames, 98);
        assert_eq!(m.coeffs.shape(), &[40, 98]);
    }

    #[test]
    fn half_second_pads_from_frame_48() {
        let m = mfcc(&sine(1000.0, 0.5)).unwrap();
        assert_eq!(m.source_frames, 48);
        let d = m.coeffs.data();
        for row in 0..40 {
            for col in 48..98 {
                assert_eq!(d[row * 98 + col], 0.0, "row {row} col {col}");
            }
        }
        // voiced frames are not all zero
        assert!(d[0].abs() > 0.0);
    }

    #[test]
    fn zero_waveform_gives_constant_c0_and_zero_rest() {
        let w = Waveform {
            samples: vec![0.0; SAMPLE_RATE as usize],
            sample_rate: SAMPLE_RATE,
        };
        let m = mfcc(&w).unwrap();
        let d = m.coeffs.data();
        let c0 = d[0];
        // c0 = sqrt(40) * ln(1e-10), constant across frames
        let expect = (40f32).sqrt() * LOG_FLOOR.ln();
        assert!((c0 - expect).abs() < 1e-3, "{c0} vs {expect}");
        for frame in 0..98 {
            assert!((d[frame] - c0).abs() < 1e-4);
            for row in 1..40 {
                assert!(d[row * 98 + frame].abs() < 1e-4);
            }
        }
    }

    #[test]
    fn empty_waveform_is_data_error() {
        let w = Waveform {
            samples: vec![],
            sample_rate: SAMPLE_RATE,
        };
        assert!(matches!(mfcc(&w), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_sample_rate_error_names_the_rate() {
        let w = Waveform {
            samples: vec![0.0; 8000],
            sample_rate: 8000,
        };
        let err = mfcc(&w).unwrap_err().to_string();
        assert!(err.contains("8000"), "{err}");
    }

    #[test]
    fn time_shift_by_hop_multiples_shifts_columns() {
        let base = sine(700.0, 0.6);
        let k = 3usize;
        let mut shifted = vec![0.0f32; SAMPLE_RATE as usize];
        for (i, &s) in base.samples.iter().enumerate() {
            let dst = i + k * HOP_SAMPLES;
            if dst < shifted.len() {
                shifted[dst] = s;
            }
        }
        let mut padded_base = base.samples.clone();
        padded_base.resize(SAMPLE_RATE as usize, 0.0);
        let m0 = mfcc(&Waveform {
            samples: padded_base,
            sample_rate: SAMPLE_RATE,
        })
        .unwrap();
        let m1 = mfcc(&Waveform {
            samples: shifted,
            sample_rate: SAMPLE_RATE,
        })
        .unwrap();
        // interior columns: col + k of shifted equals col of base
        for row in 0..40 {
            for col in 0..40 {
                let a = m0.coeffs.data()[row * 98 + col];
                let b = m1.coeffs.data()[row * 98 + col + k];
                assert!((a - b).abs() < 1e-4, "row {row} col {col}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn louder_audio_increases_c0() {
        let quiet = sine(500.0, 1.0);
        let loud = Waveform {
            samples: quiet.samples.iter().map(|s| s * 1.8).collect(),
            sample_rate: SAMPLE_RATE,
        };
        let mq = mfcc(&quiet).unwrap();
        let ml = mfcc(&loud).unwrap();
        assert_eq!(mq.source_frames, ml.source_frames);
        for frame in 0..98 {
            assert!(ml.coeffs.data()[frame] > mq.coeffs.data()[frame]);
        }
    }

    #[test]
    fn mfcc_is_bit_deterministic() {
        let w = sine(333.0, 1.0);
        let a = mfcc(&w).unwrap();
        let b = mfcc(&w).unwrap();
        assert_eq!(a.coeffs.data(), b.coeffs.data());
    }

    #[test]
    fn wav_roundtrip_scaling() {
        // 44-byte header + 4 samples with known values
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        for v in [0i16, 16384, -16384, 32767] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples.len(), 4);
        assert_eq!(w.samples[0], 0.0);
        assert_eq!(w.samples[1], 0.5);
        assert_eq!(w.samples[2], -0.5);
        assert!((w.samples[3] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn truncated_wav_is_format_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        // cut off mid-chunk
        bytes.extend_from_slice(&1u16.to_le_bytes());
        assert!(matches!(parse_wav(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn stereo_wav_error_names_channel_count() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&44u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let w = sine(440.0, 0.25);
        write_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        assert_eq!(back.samples.len(), w.samples.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}

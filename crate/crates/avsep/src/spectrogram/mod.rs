//! Waveform <-> spectrogram transforms and magnitude scaling.
//!
//! The audio path is: waveform -> STFT -> magnitude/phase -> log-compress
//! and scale to [0,1] -> resample to the network grid. Inversion runs the
//! same steps backwards, borrowing the mixture phase. All grids are
//! `[frequency x time]`; the sample-rate/window/hop metadata needed for
//! inversion travels with the data.

mod wav;

pub use wav::{read_wav, write_wav_f32, write_wav_i16};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::container::Container;
use crate::error::{AvsepError, Result};

/// Default analysis sample rate in Hz. The nominal "11 kHz" rate is the
/// exact quarter of 44.1 kHz.
pub const DEFAULT_SAMPLE_RATE: u32 = 11025;
/// Default STFT window length in samples (Hann).
pub const DEFAULT_WINDOW_SIZE: usize = 1022;
/// Default STFT hop in samples.
pub const DEFAULT_HOP_LENGTH: usize = 256;
/// Default network grid (frequency rows, time columns).
pub const DEFAULT_GRID: (usize, usize) = (256, 256);
/// Default log-magnitude scale factor.
pub const DEFAULT_SIGMA: f64 = 0.15;
/// Default clip duration in seconds.
pub const DEFAULT_DURATION_S: f64 = 6.0;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AvsepError::InvalidInput("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AvsepError::NonFinite("waveform sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Center-crop or zero-pad to exactly `target_len` samples so every clip
    /// produces a spectrogram with identical frame count.
    pub fn fit_length(&self, target_len: usize) -> Waveform {
        let n = self.samples.len();
        let mut out = vec![0.0; target_len];
        if n >= target_len {
            let start = (n - target_len) / 2;
            out.copy_from_slice(&self.samples[start..start + target_len]);
        } else {
            let start = (target_len - n) / 2;
            out[start..start + n].copy_from_slice(&self.samples);
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

/// Magnitude and phase of an STFT on an `[F x T]` grid, plus the transform
/// metadata needed to invert it.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub window_size: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn num_bins(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.magnitude.ncols()
    }

    /// (F, T_frames)
    pub fn shape(&self) -> (usize, usize) {
        (self.magnitude.nrows(), self.magnitude.ncols())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        c.meta.insert("kind".into(), serde_json::json!("complex_spectrogram"));
        c.meta.insert("window_size".into(), serde_json::json!(self.window_size));
        c.meta.insert("hop_length".into(), serde_json::json!(self.hop_length));
        c.meta.insert("sample_rate".into(), serde_json::json!(self.sample_rate));
        c.insert("magnitude", self.magnitude.clone().into_dyn());
        c.insert("phase", self.phase.clone().into_dyn());
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        let magnitude = to_2d(c.get("magnitude")?)?;
        let phase = to_2d(c.get("phase")?)?;
        Ok(Self {
            magnitude,
            phase,
            window_size: c.meta_u64("window_size")? as usize,
            hop_length: c.meta_u64("hop_length")? as usize,
            sample_rate: c.meta_u64("sample_rate")? as u32,
        })
    }
}

/// Log-compressed, sigma-scaled magnitude on the network grid `[H x W]`,
/// every value in [0,1]. `source_shape` remembers the (F, T) grid it was
/// resampled from so the inverse direction is well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMagnitude {
    pub values: Array2<f64>,
    pub sigma: f64,
    pub source_shape: (usize, usize),
}

impl ScaledMagnitude {
    pub fn grid(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        c.meta.insert("kind".into(), serde_json::json!("scaled_magnitude"));
        c.meta.insert("sigma".into(), serde_json::json!(self.sigma));
        c.meta.insert("source_f".into(), serde_json::json!(self.source_shape.0));
        c.meta.insert("source_t".into(), serde_json::json!(self.source_shape.1));
        c.insert("values", self.values.clone().into_dyn());
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path)?;
        Ok(Self {
            values: to_2d(c.get("values")?)?,
            sigma: c.meta_f64("sigma")?,
            source_shape: (c.meta_u64("source_f")? as usize, c.meta_u64("source_t")? as usize),
        })
    }
}

fn to_2d(a: &ndarray::ArrayD<f64>) -> Result<Array2<f64>> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| AvsepError::Shape(format!("expected 2-D array: {e}")))
}

/// Periodic Hann window: w[n] = 0.5 (1 - cos(2 pi n / N)).
pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos()))
        .collect()
}

/// Short-time Fourier transform with a periodic Hann window.
///
/// Frame k covers samples `[k*hop, k*hop + window_size)`; no center padding.
/// F = window_size/2 + 1 bins.
pub fn stft(w: &Waveform, window_size: usize, hop_length: usize) -> Result<ComplexSpectrogram> {
    if window_size == 0 || window_size % 2 != 0 {
        return Err(AvsepError::InvalidInput(format!(
            "window_size must be even and nonzero, got {window_size}"
        )));
    }
    if hop_length == 0 || hop_length > window_size {
        return Err(AvsepError::InvalidInput(format!(
            "hop_length must be in 1..=window_size, got {hop_length}"
        )));
    }
    if w.len() < window_size {
        return Err(AvsepError::InvalidInput(format!(
            "input too short: {} samples < window {}",
            w.len(),
            window_size
        )));
    }

    let num_frames = (w.len() - window_size) / hop_length + 1;
    let num_bins = window_size / 2 + 1;
    let window = hann_window(window_size);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_size);

    let mut magnitude = Array2::zeros((num_bins, num_frames));
    let mut phase = Array2::zeros((num_bins, num_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for frame in 0..num_frames {
        let start = frame * hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for bin in 0..num_bins {
            magnitude[[bin, frame]] = buf[bin].norm();
            phase[[bin, frame]] = buf[bin].arg();
        }
    }

    Ok(ComplexSpectrogram {
        magnitude,
        phase,
        window_size,
        hop_length,
        sample_rate: w.sample_rate,
    })
}

/// Least-squares overlap-add inverse STFT.
///
/// Uses the analysis window for synthesis and normalizes by the accumulated
/// squared-window envelope, which reconstructs exactly wherever the envelope
/// is nonzero. Output length is `hop*(T-1) + window_size`.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let (num_bins, num_frames) = s.shape();
    let window_size = s.window_size;
    let hop = s.hop_length;
    if window_size == 0 || window_size % 2 != 0 || num_bins != window_size / 2 + 1 {
        return Err(AvsepError::Shape(format!(
            "spectrogram bins {num_bins} inconsistent with window {window_size}"
        )));
    }
    if hop == 0 || hop > window_size {
        return Err(AvsepError::InvalidInput(format!(
            "hop_length must be in 1..=window_size, got {hop}"
        )));
    }

    let window = hann_window(window_size);
    // Overlap-add property check: the squared-window envelope over the
    // interior must be bounded away from zero or the inverse is undefined.
    let interior_envelope: f64 = (0..window_size)
        .step_by(hop)
        .map(|off| window[off] * window[off])
        .sum();
    if num_frames > 1 && interior_envelope < 1e-8 {
        return Err(AvsepError::InvalidInput(format!(
            "window/hop pair ({window_size}/{hop}) does not satisfy overlap-add reconstruction"
        )));
    }

    let out_len = hop * (num_frames - 1) + window_size;
    let mut out = vec![0.0f64; out_len];
    let mut env = vec![0.0f64; out_len];

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let scale = 1.0 / window_size as f64;

    for frame in 0..num_frames {
        for bin in 0..num_bins {
            let m = s.magnitude[[bin, frame]];
            let p = s.phase[[bin, frame]];
            buf[bin] = Complex64::from_polar(m, p);
        }
        // Hermitian symmetry for the negative-frequency half.
        for bin in num_bins..window_size {
            buf[bin] = buf[window_size - bin].conj();
        }
        ifft.process(&mut buf);
        let start = frame * hop;
        for i in 0..window_size {
            out[start + i] += buf[i].re * scale * window[i];
            env[start + i] += window[i] * window[i];
        }
    }

    for (o, e) in out.iter_mut().zip(env.iter()) {
        if *e > 1e-12 {
            *o /= *e;
        }
    }

    Waveform::new(out, s.sample_rate)
}

/// Elementwise log compression and scaling: clip(ln(1+m) * sigma, 0, 1).
pub fn scale_magnitude(m: &Array2<f64>, sigma: f64, source_shape: (usize, usize)) -> Result<ScaledMagnitude> {
    if sigma <= 0.0 {
        return Err(AvsepError::InvalidInput(format!("sigma must be > 0, got {sigma}")));
    }
    if m.iter().any(|&v| v < 0.0) {
        return Err(AvsepError::InvalidInput("magnitude must be nonnegative".into()));
    }
    let values = m.mapv(|v| ((1.0 + v).ln() * sigma).clamp(0.0, 1.0));
    Ok(ScaledMagnitude {
        values,
        sigma,
        source_shape,
    })
}

/// Inverse of [`scale_magnitude`] on the non-clipped range:
/// e^(v/sigma) - 1, clamped at 0 so negative sampler outputs map to silence.
pub fn unscale_magnitude(s: &ScaledMagnitude) -> Array2<f64> {
    s.values.mapv(|v| ((v / s.sigma).exp() - 1.0).max(0.0))
}

/// Bilinear resampling with align-corners semantics: output index i maps to
/// source coordinate i*(S-1)/(D-1), so corners map to corners and a
/// same-shape resample is the identity.
pub fn resample_grid(m: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (src_h, src_w) = (m.nrows(), m.ncols());
    let (dst_h, dst_w) = target;
    if src_h < 2 || src_w < 2 {
        return Err(AvsepError::InvalidInput(format!(
            "source grid must be at least 2x2, got {src_h}x{src_w}"
        )));
    }
    if dst_h < 2 || dst_w < 2 {
        return Err(AvsepError::InvalidInput(format!(
            "target grid must be at least 2x2, got {dst_h}x{dst_w}"
        )));
    }

    let row_scale = (src_h - 1) as f64 / (dst_h - 1) as f64;
    let col_scale = (src_w - 1) as f64 / (dst_w - 1) as f64;
    let mut out = Array2::zeros((dst_h, dst_w));
    for i in 0..dst_h {
        let y = i as f64 * row_scale;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = y - y0 as f64;
        for j in 0..dst_w {
            let x = j as f64 * col_scale;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = x - x0 as f64;
            let top = m[[y0, x0]] * (1.0 - fx) + m[[y0, x1]] * fx;
            let bot = m[[y1, x0]] * (1.0 - fx) + m[[y1, x1]] * fx;
            out[[i, j]] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(out)
}

/// Convert a separated scaled magnitude back to a waveform using the
/// mixture's phase: unscale -> resample to the mixture's (F, T) grid ->
/// recombine with mixture phase -> inverse STFT.
pub fn reconstruct_waveform(sep: &ScaledMagnitude, mix: &ComplexSpectrogram) -> Result<Waveform> {
    if sep.source_shape != mix.shape() {
        return Err(AvsepError::Shape(format!(
            "scaled magnitude source shape {:?} does not match mixture {:?}",
            sep.source_shape,
            mix.shape()
        )));
    }
    let mag = unscale_magnitude(sep);
    let mag = resample_grid(&mag, mix.shape())?;
    let est = ComplexSpectrogram {
        magnitude: mag,
        phase: mix.phase.clone(),
        window_size: mix.window_size,
        hop_length: mix.hop_length,
        sample_rate: mix.sample_rate,
    };
    istft(&est)
}

/// Full analysis path from waveform to network-grid input: STFT ->
/// magnitude scaling -> resample to `grid`.
pub fn waveform_to_scaled(
    w: &Waveform,
    window_size: usize,
    hop_length: usize,
    sigma: f64,
    grid: (usize, usize),
) -> Result<(ScaledMagnitude, ComplexSpectrogram)> {
    let spec = stft(w, window_size, hop_length)?;
    let scaled = scale_spectrogram(&spec, sigma, grid)?;
    Ok((scaled, spec))
}

/// Scale and resample an existing spectrogram's magnitude to `grid`.
pub fn scale_spectrogram(
    spec: &ComplexSpectrogram,
    sigma: f64,
    grid: (usize, usize),
) -> Result<ScaledMagnitude> {
    let scaled = scale_magnitude(&spec.magnitude, sigma, spec.shape())?;
    let resampled = resample_grid(&scaled.values, grid)?;
    Ok(ScaledMagnitude {
        values: resampled,
        sigma,
        source_shape: spec.shape(),
    })
}

/// Interior signal-to-noise ratio in dB between a reference and an estimate,
/// trimming `trim` samples at each end.
pub fn snr_db(reference: &[f64], estimate: &[f64], trim: usize) -> f64 {
    let n = reference.len().min(estimate.len());
    assert!(n > 2 * trim, "signal too short for requested trim");
    let (mut sig, mut err) = (0.0, 0.0);
    for i in trim..n - trim {
        sig += reference[i] * reference[i];
        let d = reference[i] - estimate[i];
        err += d * d;
    }
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, sample_rate: u32, len: usize, amp: f64) -> Waveform {
        let w = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
        Waveform::new((0..len).map(|n| amp * (w * n as f64).sin()).collect(), sample_rate).unwrap()
    }

    fn noise(len: usize, seed: u64, amp: f64) -> Waveform {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), 11025).unwrap()
    }

    /// Brute-force DFT of one windowed frame, used as the peak-bin oracle.
    fn dft_frame_magnitude(w: &Waveform, window_size: usize, frame_start: usize) -> Vec<f64> {
        let window = hann_window(window_size);
        let num_bins = window_size / 2 + 1;
        (0..num_bins)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..window_size {
                    let angle = -2.0 * std::f64::consts::PI * (k * n) as f64 / window_size as f64;
                    acc += Complex64::from_polar(w.samples()[frame_start + n] * window[n], angle);
                }
                acc.norm()
            })
            .collect()
    }

    #[test]
    fn sine_peak_bin_matches_dft_oracle() {
        let w = sine(440.0, 11025, 4096, 0.8);
        let spec = stft(&w, 1022, 256).unwrap();
        // Expected peak at round(f * N / fs) = round(440*1022/11025) = 41.
        let expected_bin = (440.0_f64 * 1022.0 / 11025.0).round() as usize;
        assert_eq!(expected_bin, 41);
        let col = spec.magnitude.column(3);
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, expected_bin);
        // The whole column must agree with a brute-force DFT.
        let oracle = dft_frame_magnitude(&w, 1022, 3 * 256);
        for (bin, &m) in oracle.iter().enumerate() {
            assert!(
                (spec.magnitude[[bin, 3]] - m).abs() < 1e-6 * (1.0 + m),
                "bin {bin}: fft {} vs dft {}",
                spec.magnitude[[bin, 3]],
                m
            );
        }
    }

    #[test]
    fn zero_waveform_zero_magnitude() {
        let w = Waveform::new(vec![0.0; 4096], 11025).unwrap();
        let spec = stft(&w, 1022, 256).unwrap();
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn too_short_input_errors() {
        let w = Waveform::new(vec![0.1; 100], 11025).unwrap();
        let err = stft(&w, 1022, 256).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn roundtrip_interior_snr_above_50db() {
        let w = noise(11025 * 2, 17, 0.7);
        let rec = istft(&stft(&w, 1022, 256).unwrap()).unwrap();
        let snr = snr_db(w.samples(), rec.samples(), 1022);
        assert!(snr > 50.0, "interior SNR {snr} dB");
    }

    #[test]
    fn istft_zero_spectrogram_is_silent() {
        let spec = ComplexSpectrogram {
            magnitude: Array2::zeros((512, 10)),
            phase: Array2::zeros((512, 10)),
            window_size: 1022,
            hop_length: 256,
            sample_rate: 11025,
        };
        let w = istft(&spec).unwrap();
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mixed_magnitude_phase_stays_finite() {
        let a = stft(&sine(440.0, 11025, 8192, 0.5), 1022, 256).unwrap();
        let b = stft(&noise(8192, 3, 0.5), 1022, 256).unwrap();
        let franken = ComplexSpectrogram {
            magnitude: a.magnitude.clone(),
            phase: b.phase.clone(),
            window_size: 1022,
            hop_length: 256,
            sample_rate: 11025,
        };
        let w = istft(&franken).unwrap();
        assert!(w.samples().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn scale_examples() {
        let m = Array2::from_elem((2, 2), 0.0);
        let s = scale_magnitude(&m, 0.15, (2, 2)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));

        let m = Array2::from_elem((1, 1), std::f64::consts::E - 1.0);
        let s = scale_magnitude(&m, 0.15, (1, 1)).unwrap();
        assert!((s.values[[0, 0]] - 0.15).abs() < 1e-12);

        // ln(1001)*0.15 ~ 1.036 clips to 1.
        let m = Array2::from_elem((1, 1), 1000.0);
        let s = scale_magnitude(&m, 0.15, (1, 1)).unwrap();
        assert_eq!(s.values[[0, 0]], 1.0);
    }

    #[test]
    fn scale_rejects_negative() {
        let m = Array2::from_elem((1, 1), -0.5);
        let err = scale_magnitude(&m, 0.15, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("nonnegative"));
    }

    #[test]
    fn unscale_examples() {
        let s = ScaledMagnitude {
            values: Array2::from_elem((1, 1), 0.0),
            sigma: 0.15,
            source_shape: (1, 1),
        };
        assert_eq!(unscale_magnitude(&s)[[0, 0]], 0.0);

        let s = ScaledMagnitude {
            values: Array2::from_elem((1, 1), 0.15),
            sigma: 0.15,
            source_shape: (1, 1),
        };
        assert!((unscale_magnitude(&s)[[0, 0]] - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn scale_unscale_roundtrip_on_nonclipped_range() {
        let ms: Vec<f64> = (0..2000).map(|i| 700.0 * i as f64 / 1999.0).collect();
        let m = Array2::from_shape_vec((40, 50), ms).unwrap();
        let s = scale_magnitude(&m, 0.15, (40, 50)).unwrap();
        let back = unscale_magnitude(&s);
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + a), "{a} vs {b}");
        }
    }

    #[test]
    fn resample_constant_and_identity() {
        let m = Array2::from_elem((7, 9), 3.25);
        let r = resample_grid(&m, (16, 5)).unwrap();
        assert!(r.iter().all(|&v| (v - 3.25).abs() < 1e-12));

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((12, 13), |_| rng.gen_range(0.0..1.0));
        let r = resample_grid(&m, (12, 13)).unwrap();
        for (a, b) in m.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_down_up_on_smooth_grid() {
        // Low-order 2-D sinusoid: band-limited well below either grid's
        // Nyquist, so down-then-up should lose little.
        let m = Array2::from_shape_fn((128, 128), |(i, j)| {
            2.0 + (2.0 * std::f64::consts::PI * i as f64 / 128.0).sin()
                * (2.0 * std::f64::consts::PI * j as f64 / 128.0).cos()
        });
        let down = resample_grid(&m, (48, 48)).unwrap();
        let up = resample_grid(&down, (128, 128)).unwrap();
        let num: f64 = m.iter().zip(up.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = m.iter().map(|a| a * a).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative L2 error {rel}");
    }

    #[test]
    fn resample_rejects_tiny_targets() {
        let m = Array2::from_elem((8, 8), 1.0);
        assert!(resample_grid(&m, (1, 8)).is_err());
        assert!(resample_grid(&m, (8, 1)).is_err());
    }

    #[test]
    fn reconstruct_scaled_mixture_close_to_original() {
        // Two-tone mixture through the full scale/resample/unscale/istft
        // path; only resampling loss remains.
        let a = sine(440.0, 11025, 66150, 0.4);
        let b = sine(967.0, 11025, 66150, 0.4);
        let mix_samples: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect();
        let mix = Waveform::new(mix_samples, 11025).unwrap();
        let (scaled, spec) = waveform_to_scaled(&mix, 1022, 256, 0.15, (256, 256)).unwrap();
        let rec = reconstruct_waveform(&scaled, &spec).unwrap();
        let snr = snr_db(mix.samples(), rec.samples(), 1022);
        assert!(snr > 3.0, "pipeline SNR {snr} dB");
        assert!(
            (mix.len() as i64 - rec.len() as i64).unsigned_abs() as usize <= 1022,
            "length {} vs {}",
            rec.len(),
            mix.len()
        );
    }

    #[test]
    fn reconstruct_zeros_is_silent() {
        let mix = stft(&noise(66150, 9, 0.5), 1022, 256).unwrap();
        let sep = ScaledMagnitude {
            values: Array2::zeros((256, 256)),
            sigma: 0.15,
            source_shape: mix.shape(),
        };
        let w = reconstruct_waveform(&sep, &mix).unwrap();
        assert!(w.samples().iter().all(|&s| s.abs() < 1e-6));
    }

    #[test]
    fn reconstruct_rejects_shape_mismatch() {
        let mix = stft(&noise(66150, 9, 0.5), 1022, 256).unwrap();
        let sep = ScaledMagnitude {
            values: Array2::zeros((256, 256)),
            sigma: 0.15,
            source_shape: (100, 100),
        };
        assert!(reconstruct_waveform(&sep, &mix).is_err());
    }

    #[test]
    fn sign_flip_keeps_magnitude_shifts_phase() {
        let w = noise(8192, 21, 0.6);
        let flipped = Waveform::new(w.samples().iter().map(|s| -s).collect(), 11025).unwrap();
        let a = stft(&w, 1022, 256).unwrap();
        let b = stft(&flipped, 1022, 256).unwrap();
        let peak = a.magnitude.iter().cloned().fold(0.0, f64::max);
        for ((m1, m2), (p1, p2)) in a
            .magnitude
            .iter()
            .zip(b.magnitude.iter())
            .zip(a.phase.iter().zip(b.phase.iter()))
        {
            assert!((m1 - m2).abs() < 1e-9 * (1.0 + m1));
            if *m1 > 1e-6 * peak {
                let mut d = (p1 - p2).abs() % (2.0 * std::f64::consts::PI);
                if d > std::f64::consts::PI {
                    d = 2.0 * std::f64::consts::PI - d;
                }
                assert!((d - std::f64::consts::PI).abs() < 1e-6, "phase delta {d}");
            }
        }
    }

    #[test]
    fn fit_length_pads_and_crops() {
        let w = Waveform::new(vec![1.0; 10], 11025).unwrap();
        assert_eq!(w.fit_length(14).len(), 14);
        assert_eq!(w.fit_length(6).len(), 6);
        assert_eq!(w.fit_length(14).samples()[0], 0.0);
        assert_eq!(w.fit_length(14).samples()[2], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scale_is_monotone(a in 0.0..500.0f64, b in 0.0..500.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = Array2::from_shape_vec((1, 2), vec![lo, hi]).unwrap();
            let s = scale_magnitude(&m, 0.15, (1, 2)).unwrap();
            prop_assert!(s.values[[0, 0]] <= s.values[[0, 1]] + 1e-15);
        }

        #[test]
        fn stft_istft_interior_snr(seed in 0u64..1000) {
            let w = noise(6000, seed, 0.8);
            let rec = istft(&stft(&w, 1022, 256).unwrap()).unwrap();
            let snr = snr_db(w.samples(), rec.samples(), 1022);
            prop_assert!(snr > 50.0, "SNR {} dB", snr);
        }
    }
}

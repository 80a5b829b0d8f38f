//! Pre-processing and spectral features.
//!
//! Frames are never padded: frame `k` covers samples `k * hop .. k * hop + win`,
//! so a signal of `n >= win` samples yields `1 + (n - win) / hop` frames.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::tensorio::{AudioBuffer, EmbeddingSequence};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const HIGHPASS_CUTOFF_HZ: f64 = 50.0;

pub const MEL_BINS: usize = 64;
pub const MEL_WINDOW: usize = 1024;
pub const MEL_HOP: usize = 256;

pub const HFCC_WINDOW: usize = 640;
pub const HFCC_HOP: usize = 160;
pub const HFCC_FFT: usize = 1024;
pub const HFCC_FILTERS: usize = 29;
pub const HFCC_COEFFS: usize = 13;

/// Power floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Peak amplitude below which a signal counts as silent.
pub const SILENCE_PEAK: f64 = 1e-8;

const KAISER_BETA: f64 = 8.0;
const SINC_TAPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrogramKind {
    LogMel,
    Hfcc,
}

impl SpectrogramKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectrogramKind::LogMel => "log_mel",
            SpectrogramKind::Hfcc => "hfcc",
        }
    }
}

impl FromStr for SpectrogramKind {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_mel" => Ok(SpectrogramKind::LogMel),
            "hfcc" => Ok(SpectrogramKind::Hfcc),
            other => Err(KwsError::Config(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// A `T x M` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f32>,
    bins: usize,
    hop_seconds: f64,
    kind: SpectrogramKind,
}

impl Spectrogram {
    pub fn new(data: Vec<f32>, bins: usize, hop_seconds: f64, kind: SpectrogramKind) -> Result<Self> {
        if bins == 0 || data.is_empty() || !data.len().is_multiple_of(bins) {
            return Err(KwsError::Parameter(format!(
                "{} values do not form frames of {bins} bins",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::DegenerateInput("non-finite spectrogram value".into()));
        }
        Ok(Self {
            data,
            bins,
            hop_seconds,
            kind,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.bins
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_seconds
    }

    pub fn kind(&self) -> SpectrogramKind {
        self.kind
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Stores the matrix as an embedding sequence labelled with its kind.
    pub fn to_raw_sequence(&self) -> Result<EmbeddingSequence> {
        EmbeddingSequence::new(
            self.data.clone(),
            self.bins,
            self.hop_seconds,
            Some(self.kind.as_str().to_string()),
        )
    }
}

pub fn frame_count(n: usize, win: usize, hop: usize) -> Option<usize> {
    (n >= win).then(|| 1 + (n - win) / hop)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc resampling (Kaiser window, 64 taps at the lower of the two rates).
pub fn resample(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let cutoff = ratio.min(1.0);
    let half_width = (SINC_TAPS / 2) as f64 / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    let n = samples.len() as isize;
    (0..out_len)
        .map(|k| {
            let x = k as f64 / ratio;
            let lo = (x - half_width).ceil() as isize;
            let hi = (x + half_width).floor() as isize;
            let mut acc = 0.0;
            for m in lo.max(0)..=hi.min(n - 1) {
                let u = x - m as f64;
                let r = u / half_width;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += samples[m as usize] as f64 * cutoff * sinc(cutoff * u) * w;
            }
            acc as f32
        })
        .collect()
}

/// Second-order Butterworth high-pass, forward only.
///
/// The filter state starts in steady state for the first input sample, so a
/// constant signal maps to zeros without a start-up transient.
pub fn highpass(samples: &[f32], sample_rate_hz: u32, cutoff_hz: f64) -> Vec<f32> {
    let w0 = 2.0 * PI * cutoff_hz / sample_rate_hz as f64;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
    let a0 = 1.0 + alpha;
    let b0 = (1.0 + cos) / 2.0 / a0;
    let b1 = -(1.0 + cos) / a0;
    let b2 = b0;
    let a1 = -2.0 * cos / a0;
    let a2 = (1.0 - alpha) / a0;
    let x0 = samples.first().copied().unwrap_or(0.0) as f64;
    let mut z1 = -b0 * x0;
    let mut z2 = b2 * x0;
    samples
        .iter()
        .map(|&x| {
            let x = x as f64;
            let y = b0 * x + z1;
            z1 = b1 * x - a1 * y + z2;
            z2 = b2 * x - a2 * y;
            y as f32
        })
        .collect()
}

/// Output of [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub audio: AudioBuffer,
    /// Set when nothing survived the high-pass; the audio is then all zeros.
    pub silent: bool,
}

/// Resample to 16 kHz, high-pass at 50 Hz and normalize the peak to 1.
pub fn preprocess(audio: &AudioBuffer) -> Result<Preprocessed> {
    if audio.is_empty() {
        return Err(KwsError::DegenerateInput("empty audio".into()));
    }
    let resampled = resample(audio.samples(), audio.sample_rate_hz(), TARGET_SAMPLE_RATE);
    let mut filtered = highpass(&resampled, TARGET_SAMPLE_RATE, HIGHPASS_CUTOFF_HZ);
    let peak = filtered.iter().fold(0.0f64, |m, &s| m.max(s.abs() as f64));
    let silent = peak < SILENCE_PEAK;
    if silent {
        filtered.iter_mut().for_each(|s| *s = 0.0);
    } else {
        filtered.iter_mut().for_each(|s| *s = (*s as f64 / peak) as f32);
    }
    Ok(Preprocessed {
        audio: AudioBuffer::new(filtered, TARGET_SAMPLE_RATE)?,
        silent,
    })
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect()
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Windowed power spectra (`n_fft / 2 + 1` bins per frame).
struct PowerFrames {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
}

impl PowerFrames {
    fn new(window: Vec<f64>, n_fft: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            fft,
            window,
            n_fft,
            hop,
        }
    }

    fn frame(&self, samples: &[f32], k: usize, buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        let start = k * self.hop;
        buf.clear();
        buf.extend(
            self.window
                .iter()
                .zip(&samples[start..start + self.window.len()])
                .map(|(w, &s)| Complex::new(w * s as f64, 0.0)),
        );
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// A unit-peak triangular filter over FFT bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub lower_hz: f64,
    pub center_hz: f64,
    pub upper_hz: f64,
}

impl Triangle {
    pub fn weight(&self, f: f64) -> f64 {
        if f <= self.lower_hz || f >= self.upper_hz {
            0.0
        } else if f <= self.center_hz {
            (f - self.lower_hz) / (self.center_hz - self.lower_hz)
        } else {
            (self.upper_hz - f) / (self.upper_hz - self.center_hz)
        }
    }
}

/// HTK mel filterbank: `n` triangles with mel-equidistant edges on `[f_min, f_max]`.
pub fn mel_filterbank(n: usize, f_min: f64, f_max: f64) -> Vec<Triangle> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n + 2)
        .map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (n + 1) as f64))
        .collect();
    edges
        .windows(3)
        .map(|w| Triangle {
            lower_hz: w[0],
            center_hz: w[1],
            upper_hz: w[2],
        })
        .collect()
}

/// Moore-Glasberg equivalent rectangular bandwidth in Hz.
pub fn erb_hz(f_hz: f64) -> f64 {
    let f = f_hz / 1000.0;
    6.23 * f * f + 93.39 * f + 28.52
}

/// HFCC triangle centred (on the mel scale) at `center_hz` whose
/// equivalent rectangular bandwidth (half its base) equals the ERB.
fn hfcc_triangle(center_hz: f64) -> Triangle {
    let m = hz_to_mel(center_hz);
    let target = 2.0 * erb_hz(center_hz);
    // base width grows monotonically with the mel half-width
    let base = |d: f64| mel_to_hz(m + d) - mel_to_hz(m - d);
    let (mut a, mut b) = (0.0, 1.0);
    while base(b) < target {
        b *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if base(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let d = 0.5 * (a + b);
    Triangle {
        lower_hz: mel_to_hz(m - d),
        center_hz,
        upper_hz: mel_to_hz(m + d),
    }
}

fn bisect_center(f_lo: f64, f_hi: f64, pred: impl Fn(&Triangle) -> bool) -> f64 {
    // pred is false at f_lo and true at f_hi
    let (mut a, mut b) = (f_lo, f_hi);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if pred(&hfcc_triangle(mid)) {
            b = mid;
        } else {
            a = mid;
        }
    }
    0.5 * (a + b)
}

/// HFCC filterbank: mel-equidistant centres with ERB-derived bandwidths,
/// the outermost filters touching `0` Hz and `f_max`.
pub fn hfcc_filterbank(n: usize, f_max: f64) -> Vec<Triangle> {
    let first = bisect_center(1.0, f_max / 2.0, |t| t.lower_hz >= 0.0);
    let last = bisect_center(f_max / 2.0, f_max, |t| t.upper_hz >= f_max);
    let last = last - 1e-9 * f_max;
    let (m0, m1) = (hz_to_mel(first), hz_to_mel(last));
    (0..n)
        .map(|k| {
            let m = if n == 1 {
                m0
            } else {
                m0 + (m1 - m0) * k as f64 / (n - 1) as f64
            };
            hfcc_triangle(mel_to_hz(m))
        })
        .collect()
}

/// Filter weights over FFT bin frequencies, one row per filter.
fn filter_weights(filters: &[Triangle], n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    filters
        .iter()
        .map(|t| {
            (0..bins)
                .map(|k| t.weight(k as f64 * sample_rate / n_fft as f64))
                .collect()
        })
        .collect()
}

fn require_rate(audio: &AudioBuffer) -> Result<()> {
    if audio.sample_rate_hz() != TARGET_SAMPLE_RATE {
        return Err(KwsError::Parameter(format!(
            "features expect {TARGET_SAMPLE_RATE} Hz audio, got {} Hz",
            audio.sample_rate_hz()
        )));
    }
    Ok(())
}

/// Log power spectrum binned into 64 mel bands (window 1024, hop 256).
pub fn log_mel(audio: &AudioBuffer) -> Result<Spectrogram> {
    require_rate(audio)?;
    let n_frames = frame_count(audio.len(), MEL_WINDOW, MEL_HOP).ok_or_else(|| {
        KwsError::TooShort(format!(
            "{} samples is shorter than one {MEL_WINDOW}-sample window",
            audio.len()
        ))
    })?;
    let sr = TARGET_SAMPLE_RATE as f64;
    let weights = filter_weights(&mel_filterbank(MEL_BINS, 0.0, sr / 2.0), MEL_WINDOW, sr);
    let frames = PowerFrames::new(periodic_hann(MEL_WINDOW), MEL_WINDOW, MEL_HOP);
    let mut buf = Vec::with_capacity(MEL_WINDOW);
    let mut data = Vec::with_capacity(n_frames * MEL_BINS);
    for k in 0..n_frames {
        let power = frames.frame(audio.samples(), k, &mut buf);
        for w in &weights {
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            data.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Spectrogram::new(
        data,
        MEL_BINS,
        MEL_HOP as f64 / sr,
        SpectrogramKind::LogMel,
    )
}

/// Human-factor cepstral coefficients (40 ms window, 10 ms hop, 29 filters,
/// 13 coefficients with `c0` replaced by the log frame energy).
pub fn hfcc(audio: &AudioBuffer) -> Result<Spectrogram> {
    require_rate(audio)?;
    let n_frames = frame_count(audio.len(), HFCC_WINDOW, HFCC_HOP).ok_or_else(|| {
        KwsError::TooShort(format!(
            "{} samples is shorter than one {HFCC_WINDOW}-sample window",
            audio.len()
        ))
    })?;
    let sr = TARGET_SAMPLE_RATE as f64;
    let weights = filter_weights(&hfcc_filterbank(HFCC_FILTERS, sr / 2.0), HFCC_FFT, sr);
    let frames = PowerFrames::new(hamming(HFCC_WINDOW), HFCC_FFT, HFCC_HOP);
    let dct = dct2_matrix(HFCC_FILTERS, HFCC_COEFFS);
    let mut buf = Vec::with_capacity(HFCC_FFT);
    let mut data = Vec::with_capacity(n_frames * HFCC_COEFFS);
    for k in 0..n_frames {
        let power = frames.frame(audio.samples(), k, &mut buf);
        let log_e: Vec<f64> = weights
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let raw = &audio.samples()[k * HFCC_HOP..k * HFCC_HOP + HFCC_WINDOW];
        let energy: f64 = raw.iter().map(|&s| s as f64 * s as f64).sum();
        data.push(energy.max(LOG_FLOOR).ln() as f32);
        for row in &dct[1..] {
            let c: f64 = row.iter().zip(&log_e).map(|(a, b)| a * b).sum();
            data.push(c as f32);
        }
    }
    Spectrogram::new(
        data,
        HFCC_COEFFS,
        HFCC_HOP as f64 / sr,
        SpectrogramKind::Hfcc,
    )
}

/// Orthonormal DCT-II basis, `n_out` rows of length `n_in`.
fn dct2_matrix(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n_in as f64).sqrt()
            } else {
                (2.0 / n_in as f64).sqrt()
            };
            (0..n_in)
                .map(|n| scale * (PI * k as f64 * (n as f64 + 0.5) / n_in as f64).cos())
                .collect()
        })
        .collect()
}

/// Standardizes each feature over the recording, then unit-normalizes rows,
/// so hand-crafted features can be aligned like embeddings.
pub fn spectrogram_to_sequence(spec: &Spectrogram) -> Result<EmbeddingSequence> {
    let (t, m) = (spec.frames(), spec.bins());
    if t < 2 {
        return Err(KwsError::DegenerateInput(
            "standardization needs at least two frames".into(),
        ));
    }
    let mut mean = vec![0.0f64; m];
    for k in 0..t {
        for (acc, &v) in mean.iter_mut().zip(spec.frame(k)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= t as f64);
    let mut var = vec![0.0f64; m];
    for k in 0..t {
        for ((acc, &v), mu) in var.iter_mut().zip(spec.frame(k)).zip(&mean) {
            *acc += (v as f64 - mu).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / t as f64).sqrt()).collect();
    let mut data = Vec::with_capacity(t * m);
    for k in 0..t {
        for ((&v, mu), sd) in spec.frame(k).iter().zip(&mean).zip(&std) {
            // constant features carry no information and are zeroed
            let z = if *sd > 1e-12 { (v as f64 - mu) / sd } else { 0.0 };
            data.push(z as f32);
        }
    }
    EmbeddingSequence::new(data, m, spec.hop_seconds(), Some(spec.kind().as_str().into()))?
        .normalize_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, rate: u32, amp: f64) -> Vec<f32> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|k| (amp * (2.0 * PI * freq * k as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn resample_length_contract() {
        let x = tone(440.0, 2.0, 32000, 0.5);
        let y = resample(&x, 32000, 16000);
        assert!((y.len() as i64 - 32000).abs() <= 1);
        let p = preprocess(&AudioBuffer::new(x, 48000).unwrap()).unwrap();
        assert!((p.audio.len() as i64 - 2 * 32000 / 3).abs() <= 1);
    }

    #[test]
    fn resample_preserves_passband_tone() {
        let x = tone(1000.0, 1.0, 48000, 0.5);
        let y = resample(&x, 48000, 16000);
        let expect = tone(1000.0, 1.0, 16000, 0.5);
        let err = y[200..15800]
            .iter()
            .zip(&expect[200..15800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 5e-3, "max error {err}");
    }

    #[test]
    fn resample_rejects_alias() {
        // 10 kHz is above the output Nyquist frequency
        let x = tone(10000.0, 0.5, 44100, 0.5);
        let y = resample(&x, 44100, 16000);
        let rms = (y[500..7500].iter().map(|&v| v as f64 * v as f64).sum::<f64>() / 7000.0).sqrt();
        assert!(rms < 5e-3, "alias rms {rms}");
    }

    #[test]
    fn highpass_removes_dc() {
        let y = highpass(&[0.5; 16000], 16000, 50.0);
        let peak = y.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak < 0.01, "residual {peak}");
    }

    #[test]
    fn highpass_passes_speech_band() {
        let x = tone(1000.0, 1.0, 16000, 0.5);
        let y = highpass(&x, 16000, 50.0);
        let ratio = y[8000..].iter().map(|v| v.abs()).fold(0.0, f32::max) / 0.5;
        assert!((ratio - 1.0).abs() < 0.01);
        let x = tone(50.0, 2.0, 16000, 0.5);
        let y = highpass(&x, 16000, 50.0);
        let ratio = y[16000..].iter().map(|v| v.abs()).fold(0.0, f32::max) / 0.5;
        // -3 dB at the cutoff
        assert!((ratio - std::f32::consts::FRAC_1_SQRT_2).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn preprocess_zero_and_dc_inputs_are_silent() {
        let z = preprocess(&AudioBuffer::new(vec![0.0; 8000], 16000).unwrap()).unwrap();
        assert!(z.silent && z.audio.samples().iter().all(|&s| s == 0.0));
        let dc = preprocess(&AudioBuffer::new(vec![0.5; 8000], 16000).unwrap()).unwrap();
        assert!(dc.silent);
        assert!(preprocess(&AudioBuffer::new(vec![], 16000).unwrap()).is_err());
    }

    #[test]
    fn preprocess_normalizes_peak() {
        let p = preprocess(&AudioBuffer::new(tone(300.0, 0.5, 16000, 0.1), 16000).unwrap()).unwrap();
        assert!(!p.silent);
        assert!((p.audio.peak() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_mel_shape_and_floor() {
        let z = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        let s = log_mel(&z).unwrap();
        assert_eq!((s.frames(), s.bins()), (59, 64));
        assert_eq!(s.hop_seconds(), 0.016);
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(s.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn log_mel_too_short() {
        let a = AudioBuffer::new(vec![0.1; 1023], 16000).unwrap();
        assert!(matches!(log_mel(&a), Err(KwsError::TooShort(_))));
    }

    #[test]
    fn log_mel_tone_argmax_matches_filter_geometry() {
        // Oracle: the filter whose triangle weights 1 kHz highest.
        let lo = 0.0f64;
        let hi = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let edge = |k: usize| 700.0 * (10f64.powf((lo + (hi - lo) * k as f64 / 65.0) / 2595.0) - 1.0);
        let expect = (0..64)
            .map(|m| {
                let (l, c, u) = (edge(m), edge(m + 1), edge(m + 2));
                let f = 1000.0;
                let w = if f <= l || f >= u { 0.0 } else if f <= c { (f - l) / (c - l) } else { (u - f) / (u - c) };
                (m, w)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        let a = AudioBuffer::new(tone(1000.0, 1.0, 16000, 0.5), 16000).unwrap();
        let s = log_mel(&a).unwrap();
        for t in 0..s.frames() {
            let f = s.frame(t);
            let arg = (0..64).max_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap()).unwrap();
            assert_eq!(arg, expect, "frame {t}");
        }
    }

    #[test]
    fn log_mel_scaling_shifts_by_two_log_alpha() {
        let x = tone(700.0, 0.5, 16000, 0.2);
        let a = log_mel(&AudioBuffer::new(x.clone(), 16000).unwrap()).unwrap();
        let alpha = 3.0f64;
        let xs: Vec<f32> = x.iter().map(|&v| (v as f64 * alpha) as f32).collect();
        let b = log_mel(&AudioBuffer::new(xs, 16000).unwrap()).unwrap();
        let floor = LOG_FLOOR.ln() as f32 + 1.0;
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            if *u > floor {
                assert!(((v - u) as f64 - 2.0 * alpha.ln()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn mel_weights_never_exceed_the_power_spectrum() {
        let weights = filter_weights(&mel_filterbank(64, 0.0, 8000.0), 1024, 16000.0);
        for k in 0..513 {
            let s: f64 = weights.iter().map(|w| w[k]).sum();
            assert!(s <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn hfcc_shape() {
        let a = AudioBuffer::new(tone(440.0, 1.0, 16000, 0.5), 16000).unwrap();
        let s = hfcc(&a).unwrap();
        assert_eq!((s.frames(), s.bins()), (97, 13));
        assert_eq!(s.hop_seconds(), 0.01);
    }

    #[test]
    fn hfcc_filterbank_geometry() {
        let fb = hfcc_filterbank(29, 8000.0);
        assert_eq!(fb.len(), 29);
        assert!(fb[0].lower_hz.abs() < 1e-6);
        assert!(fb[28].upper_hz <= 8000.0 && fb[28].upper_hz > 7999.0);
        for t in &fb {
            let ebw = (t.upper_hz - t.lower_hz) / 2.0;
            assert!((ebw - erb_hz(t.center_hz)).abs() < 1e-6 * erb_hz(t.center_hz));
            let mid = 0.5 * (hz_to_mel(t.lower_hz) + hz_to_mel(t.upper_hz));
            assert!((mid - hz_to_mel(t.center_hz)).abs() < 1e-6);
        }
        for w in fb.windows(2) {
            assert!(w[1].center_hz > w[0].center_hz);
        }
    }

    #[test]
    fn hfcc_one_hop_shift() {
        let mut x = tone(523.0, 1.0, 16000, 0.3);
        for (k, v) in x.iter_mut().enumerate() {
            *v += (0.2 * (2.0 * PI * 1700.0 * k as f64 / 16000.0).sin() * (k as f64 / 3000.0).sin()) as f32;
        }
        let mut shifted = vec![0.0f32; HFCC_HOP];
        shifted.extend_from_slice(&x);
        let a = hfcc(&AudioBuffer::new(x, 16000).unwrap()).unwrap();
        let b = hfcc(&AudioBuffer::new(shifted, 16000).unwrap()).unwrap();
        for t in 1..a.frames() - 1 {
            for (u, v) in a.frame(t).iter().zip(b.frame(t + 1)) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sequence_from_spectrogram() {
        let spec = Spectrogram::new(vec![1.0, 5.0, 2.0, 6.0, 3.0, 9.0], 2, 0.01, SpectrogramKind::Hfcc).unwrap();
        let seq = spectrogram_to_sequence(&spec).unwrap();
        assert!(seq.is_unit_norm());
        // first column standardizes to (-1.2247, 0, 1.2247); second to (-0.9258, -0.4629, 1.3887)
        let r1 = seq.row(1);
        assert!(r1[0].abs() < 1e-7 && (r1[1] + 1.0).abs() < 1e-6);
        assert_eq!(spectrogram_to_sequence(&spec).unwrap(), seq);
        let single = Spectrogram::new(vec![1.0, 2.0], 2, 0.01, SpectrogramKind::Hfcc).unwrap();
        assert!(matches!(spectrogram_to_sequence(&single), Err(KwsError::DegenerateInput(_))));
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(16000, 1024, 256), Some(59));
        assert_eq!(frame_count(16000, 640, 160), Some(97));
        assert_eq!(frame_count(1024, 1024, 256), Some(1));
        assert_eq!(frame_count(1023, 1024, 256), None);
    }
}

//! HF radio channel simulation: a Watterson two-path fading model followed
//! by additive white Gaussian noise.
//!
//! Each path `p` multiplies the analytic signal, delayed by `tau_p`, with a
//! complex Gaussian tap gain `a_p(t)` whose Doppler power spectrum is
//! Gaussian with standard deviation `doppler_spread / 2`. The tap
//! autocorrelation is therefore `exp(-2 pi^2 sigma^2 tau^2)`.
//!
//! Tap gains are produced at a low rate by filtering white complex noise
//! with a Gaussian FIR and are then interpolated to the audio rate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::tensorio::AudioBuffer;

/// Lowest sampling rate of the tap-gain processes.
const MIN_TAP_RATE_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub differential_delay_seconds: f64,
    pub doppler_spread_hz: f64,
    pub num_paths: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    /// ITU-R moderate mid-latitude conditions: 1 ms, 0.5 Hz, two equal paths.
    fn default() -> Self {
        Self {
            differential_delay_seconds: 0.001,
            doppler_spread_hz: 0.5,
            num_paths: 2,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.differential_delay_seconds >= 0.0 && self.differential_delay_seconds.is_finite()) {
            return Err(KwsError::Parameter(format!(
                "differential delay must be >= 0, got {}",
                self.differential_delay_seconds
            )));
        }
        if !(self.doppler_spread_hz > 0.0 && self.doppler_spread_hz.is_finite()) {
            return Err(KwsError::Parameter(format!(
                "Doppler spread must be > 0, got {}",
                self.doppler_spread_hz
            )));
        }
        if self.num_paths == 0 {
            return Err(KwsError::Parameter("channel needs at least one path".into()));
        }
        Ok(())
    }

    /// Delay of path `p`: 0 for the first path, the differential delay for
    /// the second, and further paths spaced evenly beyond that.
    pub fn path_delay(&self, p: usize) -> f64 {
        p as f64 * self.differential_delay_seconds
    }
}

/// Target signal-to-noise ratio in dB; `+inf` means no noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub snr_db: f64,
}

impl SnrSpec {
    pub fn new(snr_db: f64) -> Self {
        Self { snr_db }
    }

    pub fn clean() -> Self {
        Self {
            snr_db: f64::INFINITY,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.snr_db == f64::INFINITY
    }
}

/// SNRs from -12 dB to 30 dB in steps of 3 dB.
pub fn snr_grid() -> Vec<SnrSpec> {
    (0..15).map(|k| SnrSpec::new(-12.0 + 3.0 * k as f64)).collect()
}

/// Derives an independent seed for one recording, so results never depend
/// on processing order.
pub fn stream_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Unit-power complex Gaussian process with a Gaussian Doppler spectrum of
/// two-sided width `doppler_spread_hz` (`sigma = spread / 2`), sampled at
/// `rate_hz` for `n` samples.
pub fn doppler_taps(n: usize, rate_hz: f64, doppler_spread_hz: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    if n == 0 {
        return Vec::new();
    }
    let sigma_f = doppler_spread_hz / 2.0;
    let duration = n as f64 / rate_hz;
    // the process barely decorrelates over the whole span: one frozen gain
    if (-2.0 * PI * PI * sigma_f * sigma_f * duration * duration).exp() > 1.0 - 1e-4 {
        let g = complex_gaussian(rng, 1.0);
        return vec![g; n];
    }
    let tap_rate = MIN_TAP_RATE_HZ.max(20.0 * doppler_spread_hz).min(rate_hz);
    // |H(f)|^2 = exp(-f^2 / (2 sigma_f^2)) for h(t) = exp(-t^2 / (2 s^2))
    let s = 1.0 / (2.0 * std::f64::consts::SQRT_2 * PI * sigma_f) * tap_rate;
    let half = (4.0 * s).ceil() as usize;
    let mut fir: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let t = k as f64 - half as f64;
            (-t * t / (2.0 * s * s)).exp()
        })
        .collect();
    let energy = fir.iter().map(|h| h * h).sum::<f64>().sqrt();
    fir.iter_mut().for_each(|h| *h /= energy);

    // low-rate samples covering [-1, n_low + 2] for cubic interpolation
    let n_low = ((n as f64 - 1.0) * tap_rate / rate_hz).ceil() as usize + 4;
    let white: Vec<Complex64> = (0..n_low + 2 * half).map(|_| complex_gaussian(rng, 1.0)).collect();
    let low: Vec<Complex64> = (0..n_low)
        .map(|k| {
            fir.iter()
                .zip(&white[k..k + 2 * half + 1])
                .map(|(h, w)| w * *h)
                .sum()
        })
        .collect();
    (0..n)
        .map(|k| {
            let u = k as f64 * tap_rate / rate_hz + 1.0;
            let i = u.floor() as usize;
            let f = u - i as f64;
            catmull_rom(low[i - 1], low[i], low[i + 1], low[i + 2], f)
        })
        .collect()
}

fn catmull_rom(p0: Complex64, p1: Complex64, p2: Complex64, p3: Complex64, t: f64) -> Complex64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0
        + (p2 - p0) * t
        + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
        + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
        * 0.5
}

/// Analytic signal of `x` delayed by each of `delays` seconds, via FFT.
fn delayed_analytic(x: &[f32], sample_rate: f64, delays: &[f64]) -> Vec<Vec<Complex64>> {
    let n = x.len();
    let max_delay = delays.iter().copied().fold(0.0, f64::max);
    let len = (n + (max_delay * sample_rate).ceil() as usize + 1024).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    spec.resize(len, Complex64::new(0.0, 0.0));
    fwd.process(&mut spec);
    // one-sided spectrum of the analytic signal
    for (k, v) in spec.iter_mut().enumerate() {
        if k == 0 || k == len / 2 {
            continue;
        } else if k < len / 2 {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    delays
        .iter()
        .map(|&tau| {
            let mut s: Vec<Complex64> = spec
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let f = k as f64 * sample_rate / len as f64;
                    v * Complex64::from_polar(1.0, -2.0 * PI * f * tau)
                })
                .collect();
            inv.process(&mut s);
            s.truncate(n);
            s.iter_mut().for_each(|v| *v /= len as f64);
            s
        })
        .collect()
}

/// Watterson channel output before peak re-normalization.
pub fn watterson_unnormalized(audio: &AudioBuffer, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(KwsError::DegenerateInput("empty audio".into()));
    }
    let fs = audio.sample_rate_hz() as f64;
    let max_delay = cfg.path_delay(cfg.num_paths - 1);
    if max_delay >= audio.duration_seconds() {
        return Err(KwsError::Parameter(format!(
            "path delay {max_delay} s is not shorter than the recording ({} s)",
            audio.duration_seconds()
        )));
    }
    let delays: Vec<f64> = (0..cfg.num_paths).map(|p| cfg.path_delay(p)).collect();
    let paths = delayed_analytic(audio.samples(), fs, &delays);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gain = (1.0 / cfg.num_paths as f64).sqrt();
    let mut out = vec![0.0f64; audio.len()];
    for path in &paths {
        let taps = doppler_taps(audio.len(), fs, cfg.doppler_spread_hz, &mut rng);
        for ((o, x), a) in out.iter_mut().zip(path).zip(&taps) {
            *o += (a * x).re * gain;
        }
    }
    Ok(out)
}

/// Watterson fading channel, re-normalized to a peak amplitude of 1.
pub fn watterson(audio: &AudioBuffer, cfg: &ChannelConfig) -> Result<AudioBuffer> {
    let raw = watterson_unnormalized(audio, cfg)?;
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    AudioBuffer::new(
        raw.iter().map(|v| (v * scale) as f32).collect(),
        audio.sample_rate_hz(),
    )
}

/// Output of [`add_awgn`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAudio {
    pub audio: AudioBuffer,
    /// Noise variance that was added.
    pub noise_power: f64,
    /// Samples that left `[-1, 1]` and were clipped.
    pub clipped: usize,
}

/// White Gaussian noise of the given variance.
pub fn gaussian_noise(n: usize, power: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, power.sqrt()).expect("finite non-negative power");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Adds noise of power `P_signal / 10^(snr/10)`, where `P_signal` is the mean
/// squared sample of the whole recording.
pub fn add_awgn(audio: &AudioBuffer, snr: SnrSpec, seed: u64) -> Result<NoisyAudio> {
    if snr.is_clean() {
        return Ok(NoisyAudio {
            audio: audio.clone(),
            noise_power: 0.0,
            clipped: 0,
        });
    }
    if !snr.snr_db.is_finite() {
        return Err(KwsError::Parameter(format!("invalid SNR {}", snr.snr_db)));
    }
    let p_signal = audio.power();
    if p_signal <= 0.0 {
        return Err(KwsError::DegenerateInput(
            "SNR is undefined for a silent recording".into(),
        ));
    }
    let noise_power = p_signal / 10f64.powf(snr.snr_db / 10.0);
    let noise = gaussian_noise(audio.len(), noise_power, seed);
    let mut clipped = 0;
    let samples = audio
        .samples()
        .iter()
        .zip(&noise)
        .map(|(&s, n)| {
            let v = s as f64 + n;
            if v.abs() > 1.0 {
                clipped += 1;
                v.signum() as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok(NoisyAudio {
        audio: AudioBuffer::new(samples, audio.sample_rate_hz())?,
        noise_power,
        clipped,
    })
}

/// Watterson channel followed by AWGN at `snr`, noise seeded independently.
pub fn simulate(audio: &AudioBuffer, cfg: &ChannelConfig, snr: SnrSpec) -> Result<NoisyAudio> {
    let faded = watterson(audio, cfg)?;
    add_awgn(&faded, snr, stream_seed(cfg.seed, "awgn"))
}

/// Measured SNR in dB of `noisy` against `clean`.
pub fn measured_snr_db(clean: &[f32], noisy: &[f32]) -> f64 {
    let ps: f64 = clean.iter().map(|&s| s as f64 * s as f64).sum();
    let pn: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(&c, &n)| (n as f64 - c as f64).powi(2))
        .sum();
    10.0 * (ps / pn).log10()
}

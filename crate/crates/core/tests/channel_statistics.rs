use kws_core::channel::{watterson_unnormalized, ChannelConfig};
use kws_core::AudioBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[test]
fn fading_preserves_mean_power() {
    let fs = 16000;
    let n = 60 * fs as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f32> = (0..n)
        .map(|k| {
            let t = k as f64 / fs as f64;
            (0.3 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + rng.random_range(-0.2..0.2)) as f32
        })
        .collect();
    let p_in = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
    let audio = AudioBuffer::new(x, fs).unwrap();
    let ratios: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = ChannelConfig {
                seed,
                ..ChannelConfig::default()
            };
            let y = watterson_unnormalized(&audio, &cfg).unwrap();
            y.iter().map(|v| v * v).sum::<f64>() / n as f64 / p_in
        })
        .collect();
    let mean_db = 10.0 * (ratios.iter().sum::<f64>() / ratios.len() as f64).log10();
    assert!(mean_db.abs() <= 1.0, "mean output power {mean_db:.2} dB from input");
}

//! Synthetic series generators used by the test suites, benches, and the
//! CLI's demo data command: pure tones, tone mixtures, AR(1) noise, and an
//! hourly-style strongly periodic series.

use rand::Rng;

use crate::rng::stream_rng;

/// `amp * sin(2*pi*freq*t + phase)` for `t = 0..n`, `freq` in cycles/sample.
pub fn tone(n: usize, freq: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|t| amp * (2.0 * std::f64::consts::PI * freq * t as f64 + phase).sin())
        .collect()
}

/// Sum of tones given as `(freq, amp)` pairs, all with zero phase.
pub fn multi_tone(n: usize, components: &[(f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &(freq, amp) in components {
        for (t, v) in out.iter_mut().enumerate() {
            *v += amp * (2.0 * std::f64::consts::PI * freq * t as f64).sin();
        }
    }
    out
}

/// Stationary AR(1) noise `x_t = rho * x_{t-1} + e_t`, `e_t ~ N(0, sigma^2)`,
/// started from the stationary distribution.
pub fn ar1_noise(n: usize, rho: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "synthetic-ar1", 0);
    let mut out = Vec::with_capacity(n);
    let stationary_sd = sigma / (1.0 - rho * rho).sqrt();
    let mut x = stationary_sd * gaussian(&mut rng);
    for _ in 0..n {
        out.push(x);
        x = rho * x + sigma * gaussian(&mut rng);
    }
    out
}

/// Uniform white noise on [-1, 1].
pub fn uniform_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "synthetic-uniform", 0);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Strongly periodic hourly-style series: a daily and a weekly sinusoid plus
/// AR(1) noise. `noise_scale` sets the innovation sd of the AR(1) term.
pub fn periodic_hourly(n: usize, noise_scale: f64, seed: u64) -> Vec<f64> {
    let daily = tone(n, 1.0 / 24.0, 1.0, 0.3);
    let weekly = tone(n, 1.0 / 168.0, 0.7, 1.1);
    let noise = ar1_noise(n, 0.85, noise_scale, seed);
    (0..n).map(|t| daily[t] + weekly[t] + noise[t]).collect()
}

/// Three oscillatory components near 0.01, 0.07, and 0.2 cycles/sample plus
/// broadband noise. The carriers are detuned a few percent off the round
/// values: exactly rational frequency ratios (0.07/0.01 = 7) make the tones
/// functionally dependent, which corrupts any histogram-MI comparison of
/// their modes.
pub fn three_tone(n: usize, noise_amp: f64, seed: u64) -> Vec<f64> {
    let mut x = multi_tone(n, &[(0.0103, 1.0), (0.0689, 0.8), (0.1997, 0.6)]);
    for (v, w) in x.iter_mut().zip(uniform_noise(n, seed)) {
        *v += noise_amp * w;
    }
    x
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_is_deterministic_and_roughly_stationary() {
        let a = ar1_noise(4096, 0.9, 0.1, 5);
        let b = ar1_noise(4096, 0.9, 0.1, 5);
        assert_eq!(a, b);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        let expect = 0.1f64.powi(2) / (1.0 - 0.81);
        assert!((var - expect).abs() < expect, "var={var} expect={expect}");
    }

    #[test]
    fn tone_peaks_at_unit_amp() {
        let x = tone(1000, 0.05, 2.0, 0.0);
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 2.0).abs() < 1e-2);
    }
}

//! Synthetic shot generator.
//!
//! Each shot carries a latent AR(1) state `z_t = rho·z_{t-1} + sqrt(1-rho²)·η`
//! observed through a fixed random mixing matrix with additive noise,
//! `x_t = A z_t + obs_noise·ε_t`. Targets are smooth profiles over a
//! normalized radial coordinate, built from latent-weighted cosine basis
//! functions of a projected latent `B z_t`. With rho near 1 and visible
//! observation noise, averaging recent samples recovers the latent state
//! better than any single sample can, which is what makes history windows
//! informative downstream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ShotSeries;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, named_stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_shots: usize,
    pub samples_per_shot: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub latent_dim: usize,
    /// AR(1) coefficient in [0, 1).
    pub rho: f64,
    /// Observation noise scale (>= 0); signal variance is about 1 per input
    /// coordinate, so this is roughly a noise-to-signal ratio.
    pub obs_noise: f64,
    /// Sampling cadence in milliseconds.
    pub dt_ms: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_shots == 0
            || self.samples_per_shot == 0
            || self.in_dim == 0
            || self.out_dim == 0
            || self.latent_dim == 0
        {
            return Err(Error::Config(format!("synth extents must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        if self.obs_noise < 0.0 {
            return Err(Error::Config(format!(
                "obs_noise must be nonnegative, got {}",
                self.obs_noise
            )));
        }
        if !(self.dt_ms > 0.0) {
            return Err(Error::Config(format!("dt_ms must be positive, got {}", self.dt_ms)));
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * standard_normal(rng)).collect()
}

/// Smooth profile over out_dim radial points: q_k = Σ_j c_j cos(jπ r_k) with
/// r_k in [0, 1]. The scale puts target std around 2, large enough that the
/// default SGD setting (lr 1e-3, batch 16) fits the corpus within tens of
/// epochs.
fn smooth_profile(coeffs: &[f64], out_dim: usize) -> Vec<f64> {
    let norm = 3.0 / (coeffs.len() as f64).sqrt();
    (0..out_dim)
        .map(|k| {
            let r = if out_dim > 1 { k as f64 / (out_dim - 1) as f64 } else { 0.0 };
            coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| c * (j as f64 * std::f64::consts::PI * r).cos())
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Generates the corpus together with per-shot latent trajectories
/// ([T × latent_dim] per shot); the latents exist for verification only and
/// are not part of the corpus format.
pub fn synth_generate_full(spec: &SynthSpec) -> Result<(Vec<ShotSeries>, Vec<Vec<Vec<f64>>>)> {
    spec.validate()?;
    let l = spec.latent_dim;
    // mixing matrices are fixed per generator instance
    let mut mat_rng = named_stream(spec.seed, "mixing-matrices");
    let a = normal_matrix(&mut mat_rng, spec.in_dim, l, 1.0 / (l as f64).sqrt());
    let b = normal_matrix(&mut mat_rng, l, l, 1.0 / (l as f64).sqrt());

    let mut shots = Vec::with_capacity(spec.n_shots);
    let mut latents = Vec::with_capacity(spec.n_shots);
    for s in 0..spec.n_shots {
        // per-shot stream keyed by (seed, shot index): schedule independent
        let mut rng = indexed_stream(spec.seed, s as u64);
        let mut z: Vec<f64> = (0..l).map(|_| standard_normal(&mut rng)).collect();
        let innovation = (1.0 - spec.rho * spec.rho).sqrt();

        let t_len = spec.samples_per_shot;
        let mut shot = ShotSeries {
            shot_id: format!("{s:03}"),
            timestamps_ms: Vec::with_capacity(t_len),
            inputs: Vec::with_capacity(t_len),
            targets: Vec::with_capacity(t_len),
        };
        let mut shot_latents = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t > 0 {
                for zi in z.iter_mut() {
                    *zi = spec.rho * *zi + innovation * standard_normal(&mut rng);
                }
            }
            let mut x = vec![0.0; spec.in_dim];
            for (i, xi) in x.iter_mut().enumerate() {
                let mut s = 0.0;
                for (j, zj) in z.iter().enumerate() {
                    s += a[i * l + j] * zj;
                }
                *xi = s + spec.obs_noise * standard_normal(&mut rng);
            }
            let mut coeffs = vec![0.0; l];
            for (j, c) in coeffs.iter_mut().enumerate() {
                *c = z.iter().enumerate().map(|(k, zk)| b[j * l + k] * zk).sum();
            }
            shot.timestamps_ms.push(t as f64 * spec.dt_ms);
            shot.inputs.push(x);
            shot.targets.push(smooth_profile(&coeffs, spec.out_dim));
            shot_latents.push(z.clone());
        }
        shots.push(shot);
        latents.push(shot_latents);
    }
    Ok((shots, latents))
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<ShotSeries>> {
    synth_generate_full(spec).map(|(shots, _)| shots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64) -> SynthSpec {
        SynthSpec {
            n_shots: 1,
            samples_per_shot: 2000,
            in_dim: 8,
            out_dim: 5,
            latent_dim: 3,
            rho,
            obs_noise: 0.5,
            dt_ms: 10.0,
            seed: 42,
        }
    }

    fn lag1_autocorr(series: &[f64]) -> f64 {
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
        let cov: f64 = series
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum();
        cov / var
    }

    #[test]
    fn rho_zero_latents_are_uncorrelated() {
        let (_, latents) = synth_generate_full(&spec(0.0)).unwrap();
        for dim in 0..3 {
            let series: Vec<f64> = latents[0].iter().map(|z| z[dim]).collect();
            let ac = lag1_autocorr(&series);
            assert!(ac.abs() < 0.1, "dim {dim}: autocorr {ac}");
        }
    }

    #[test]
    fn rho_095_latents_are_strongly_correlated() {
        let (_, latents) = synth_generate_full(&spec(0.95)).unwrap();
        for dim in 0..3 {
            let series: Vec<f64> = latents[0].iter().map(|z| z[dim]).collect();
            let ac = lag1_autocorr(&series);
            assert!((0.90..=0.99).contains(&ac), "dim {dim}: autocorr {ac}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_bit_identical_corpus() {
        let s = SynthSpec { n_shots: 3, samples_per_shot: 40, ..spec(0.7) };
        let a = synth_generate(&s).unwrap();
        let b = synth_generate(&s).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shot_id, y.shot_id);
            for (rx, ry) in x.inputs.iter().zip(&y.inputs) {
                let bits_x: Vec<u64> = rx.iter().map(|v| v.to_bits()).collect();
                let bits_y: Vec<u64> = ry.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_x, bits_y);
            }
        }
        let c = synth_generate(&SynthSpec { seed: 43, ..s }).unwrap();
        assert_ne!(a[0].inputs[0], c[0].inputs[0]);
    }

    #[test]
    fn shots_are_valid_and_timestamps_follow_cadence() {
        let shots = synth_generate(&SynthSpec { n_shots: 2, samples_per_shot: 30, ..spec(0.9) })
            .unwrap();
        assert_eq!(shots.len(), 2);
        for shot in &shots {
            shot.validate().unwrap();
            assert_eq!(shot.len(), 30);
            assert_eq!(shot.timestamps_ms[1] - shot.timestamps_ms[0], 10.0);
            assert_eq!(shot.inputs[0].len(), 8);
            assert_eq!(shot.targets[0].len(), 5);
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(synth_generate(&SynthSpec { rho: 1.0, ..spec(0.0) }).is_err());
        assert!(synth_generate(&SynthSpec { rho: -0.1, ..spec(0.0) }).is_err());
        assert!(synth_generate(&SynthSpec { obs_noise: -1.0, ..spec(0.5) }).is_err());
        assert!(synth_generate(&SynthSpec { n_shots: 0, ..spec(0.5) }).is_err());
        assert!(synth_generate(&SynthSpec { dt_ms: 0.0, ..spec(0.5) }).is_err());
    }

    #[test]
    fn targets_are_smooth_profiles() {
        // adjacent radial points differ much less than the profile range
        let shots = synth_generate(&SynthSpec {
            out_dim: 33,
            samples_per_shot: 50,
            ..spec(0.9)
        })
        .unwrap();
        for target in &shots[0].targets {
            let range = target.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - target.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_step = target
                .windows(2)
                .map(|w| (w[1] - w[0]).abs())
                .fold(0.0, f64::max);
            if range > 1e-9 {
                assert!(max_step < 0.5 * range, "step {max_step} vs range {range}");
            }
        }
    }

    /// Solves the 4x4-at-most normal equations (AᵀA) w = Aᵀx by Gaussian
    /// elimination; test-side pseudo-inverse for latent recovery.
    fn least_squares(a: &[f64], in_dim: usize, l: usize, x: &[f64]) -> Vec<f64> {
        let mut ata = vec![0.0; l * l];
        let mut atx = vec![0.0; l];
        for i in 0..in_dim {
            for j in 0..l {
                atx[j] += a[i * l + j] * x[i];
                for k in 0..l {
                    ata[j * l + k] += a[i * l + j] * a[i * l + k];
                }
            }
        }
        let mut m = ata;
        let mut v = atx;
        for col in 0..l {
            let pivot = (col..l).max_by(|&p, &q| {
                m[p * l + col].abs().partial_cmp(&m[q * l + col].abs()).unwrap()
            }).unwrap();
            if pivot != col {
                for c in 0..l {
                    m.swap(col * l + c, pivot * l + c);
                }
                v.swap(col, pivot);
            }
            let d = m[col * l + col];
            for r in 0..l {
                if r != col && m[r * l + col] != 0.0 {
                    let f = m[r * l + col] / d;
                    for c in 0..l {
                        m[r * l + c] -= f * m[col * l + c];
                    }
                    v[r] -= f * v[col];
                }
            }
        }
        (0..l).map(|i| v[i] / m[i * l + i]).collect()
    }

    #[test]
    fn window_average_recovers_latent_better_than_single_sample() {
        // the designed-in memory signal: rho >= 0.9, obs_noise >= 0.5
        let s = SynthSpec {
            n_shots: 1,
            samples_per_shot: 1000,
            in_dim: 16,
            out_dim: 5,
            latent_dim: 4,
            rho: 0.95,
            obs_noise: 1.0,
            dt_ms: 10.0,
            seed: 11,
        };
        let (shots, latents) = synth_generate_full(&s).unwrap();
        let mut mat_rng = named_stream(s.seed, "mixing-matrices");
        let a = normal_matrix(&mut mat_rng, s.in_dim, s.latent_dim, 1.0 / (s.latent_dim as f64).sqrt());

        let window = 5;
        let mut err_single = 0.0;
        let mut err_avg = 0.0;
        for t in window..1000 {
            let z = &latents[0][t];
            let single = least_squares(&a, s.in_dim, s.latent_dim, &shots[0].inputs[t]);
            let mut mean_x = vec![0.0; s.in_dim];
            for u in t + 1 - window..=t {
                for (m, v) in mean_x.iter_mut().zip(&shots[0].inputs[u]) {
                    *m += v / window as f64;
                }
            }
            let averaged = least_squares(&a, s.in_dim, s.latent_dim, &mean_x);
            err_single += z.iter().zip(&single).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            err_avg += z.iter().zip(&averaged).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        assert!(
            err_avg < err_single,
            "averaged {err_avg} should beat single-sample {err_single}"
        );
    }
}

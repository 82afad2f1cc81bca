//! Synthetic signature corpora.
//!
//! Each user has a latent style: a few sinusoid harmonics per axis and a
//! typical writing length. Genuine samples jitter the style slightly.
//! Forgeries start from the target user's style, blend in part of another
//! user's style (the forger's own hand), and add the artifacts of careful
//! copying: larger shape distortion, slower writing (more frames), and
//! high-frequency tremor.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Label, Point, Provenance, RawSignature};
use crate::error::{Error, Result};
use crate::seed;

const HARMONICS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: u32,
    pub genuine_per_user: u32,
    pub forged_per_user: u32,
    pub min_length: usize,
    pub max_length: usize,
    /// Longest sequence the model accepts; `max_length` may not exceed it.
    pub length_limit: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 10,
            genuine_per_user: 20,
            forged_per_user: 20,
            min_length: 24,
            max_length: 64,
            length_limit: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Style {
    amp: [[f64; HARMONICS]; 2],
    freq: [[f64; HARMONICS]; 2],
    phase: [[f64; HARMONICS]; 2],
    length: f64,
}

impl Style {
    fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Style {
            amp: [[0.0; HARMONICS]; 2],
            freq: [[0.0; HARMONICS]; 2],
            phase: [[0.0; HARMONICS]; 2],
            length: 0.0,
        };
        for axis in 0..2 {
            for h in 0..HARMONICS {
                let order = (h + 1) as f64;
                s.amp[axis][h] = rng.random_range(0.4..1.4) / order;
                s.freq[axis][h] = order + rng.random_range(-0.25..0.25);
                s.phase[axis][h] = rng.random_range(0.0..TAU);
            }
        }
        // genuine writing stays in the lower part of the length range; forgeries stretch it
        let lo = cfg.min_length as f64;
        let hi = lo + (cfg.max_length - cfg.min_length) as f64 * 0.6;
        s.length = rng.random_range(lo..=hi);
        s
    }

    fn blend(&self, other: &Style, weight: f64) -> Style {
        let mut out = self.clone();
        for axis in 0..2 {
            for h in 0..HARMONICS {
                out.amp[axis][h] = (1.0 - weight) * self.amp[axis][h] + weight * other.amp[axis][h];
                out.phase[axis][h] = (1.0 - weight) * self.phase[axis][h] + weight * other.phase[axis][h];
            }
        }
        out
    }
}

struct Distortion {
    amp_sigma: f64,
    phase_sigma: f64,
    noise_sigma: f64,
    tremor_amp: f64,
    stretch: (f64, f64),
}

const GENUINE: Distortion = Distortion {
    amp_sigma: 0.04,
    phase_sigma: 0.05,
    noise_sigma: 0.004,
    tremor_amp: 0.0,
    stretch: (0.92, 1.08),
};

const FORGERY: Distortion = Distortion {
    amp_sigma: 0.12,
    phase_sigma: 0.25,
    noise_sigma: 0.015,
    tremor_amp: 0.03,
    stretch: (1.08, 1.45),
};

fn render(style: &Style, d: &Distortion, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let gauss = |sigma: f64| Normal::new(0.0, sigma).expect("finite sigma");
    let amp_noise = gauss(d.amp_sigma);
    let phase_noise = gauss(d.phase_sigma);
    let point_noise = gauss(d.noise_sigma);

    let stretch = rng.random_range(d.stretch.0..=d.stretch.1);
    let len = ((style.length * stretch).round() as usize).clamp(cfg.min_length.max(2), cfg.max_length);

    let mut amp = style.amp;
    let mut phase = style.phase;
    for axis in 0..2 {
        for h in 0..HARMONICS {
            amp[axis][h] *= 1.0 + amp_noise.sample(rng);
            phase[axis][h] += phase_noise.sample(rng);
        }
    }
    let tremor_freq = rng.random_range(0.3..0.45); // cycles per frame
    let tremor_phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];

    // placement on the tablet; normalization removes both
    let scale = rng.random_range(800.0..1200.0);
    let offset = [rng.random_range(2000.0..6000.0), rng.random_range(2000.0..6000.0)];

    (0..len)
        .map(|i| {
            let t = i as f64 / (len - 1) as f64;
            let mut xy = [0.0; 2];
            for axis in 0..2 {
                let mut v: f64 = (0..HARMONICS)
                    .map(|h| amp[axis][h] * (TAU * style.freq[axis][h] * t + phase[axis][h]).sin())
                    .sum();
                v += d.tremor_amp * (TAU * tremor_freq * i as f64 + tremor_phase[axis]).sin();
                v += point_noise.sample(rng);
                xy[axis] = (v * scale + offset[axis]).round();
            }
            Point {
                x: xy[0] as i64,
                y: xy[1] as i64,
                timestamp: 10 * i as i64,
                button: 1,
                pen: None,
            }
        })
        .collect()
}

/// Generates `users * (genuine + forged)` signatures, deterministic under `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.users == 0 || cfg.genuine_per_user == 0 || cfg.forged_per_user == 0 {
        return Err(Error::Config("synthetic corpus counts must be at least 1".into()));
    }
    if cfg.min_length < 2 || cfg.min_length > cfg.max_length {
        return Err(Error::Config(format!(
            "synthetic length range {}..={} is invalid",
            cfg.min_length, cfg.max_length
        )));
    }
    if cfg.max_length > cfg.length_limit {
        return Err(Error::Config(format!(
            "synthetic max length {} exceeds the model limit {}",
            cfg.max_length, cfg.length_limit
        )));
    }
    let styles: Vec<Style> = (0..cfg.users)
        .map(|u| Style::sample(cfg, &mut seed::rng_for(cfg.seed, &[0, u as u64])))
        .collect();

    let mut signatures = Vec::with_capacity((cfg.users * (cfg.genuine_per_user + cfg.forged_per_user)) as usize);
    for (u, style) in styles.iter().enumerate() {
        let user_id = u as u32 + 1;
        for g in 0..cfg.genuine_per_user {
            let mut rng = seed::rng_for(cfg.seed, &[1, u as u64, g as u64]);
            signatures.push(RawSignature {
                user_id,
                sample_index: g + 1,
                label: Label::Genuine,
                points: render(style, &GENUINE, cfg, &mut rng),
            });
        }
        for f in 0..cfg.forged_per_user {
            let mut rng = seed::rng_for(cfg.seed, &[2, u as u64, f as u64]);
            let forger = if styles.len() > 1 {
                let pick = rng.random_range(0..styles.len() - 1);
                if pick >= u {
                    pick + 1
                } else {
                    pick
                }
            } else {
                u
            };
            let blended = style.blend(&styles[forger], rng.random_range(0.1..0.3));
            signatures.push(RawSignature {
                user_id,
                sample_index: cfg.genuine_per_user + f + 1,
                label: Label::Forged,
                points: render(&blended, &FORGERY, cfg, &mut rng),
            });
        }
    }
    Ok(Corpus::new(signatures, vec![Provenance::Synthetic]))
}

//! Seeded synthetic data: clustered windows for retrieval benchmarks and a
//! shared-motif forecasting corpus.
//!
//! Forecasting corpus: a bank of periodic motifs (a fundamental plus one
//! harmonic) is shared by all domains; each domain draws a few motifs from the
//! bank. A series is `level + slope * t + amp * motif(t + phase) + noise`.
//! The knowledge-base series and the target series are drawn from separate
//! random streams, so no target value ever appears in the knowledge base.

use std::f64::consts::TAU;

use chronorag_core::series::{normalize, SeriesWindow};
use chronorag_core::storage::StoreRecord;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const DOMAIN_NAMES: [&str; 8] = [
    "Energy", "Traffic", "Web", "Nature", "Sales", "Health", "Econ", "IoT",
];

pub fn domain_name(i: usize) -> String {
    match DOMAIN_NAMES.get(i) {
        Some(name) => (*name).to_string(),
        None => format!("Domain{i}"),
    }
}

fn smooth_curve(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    (0..len)
        .map(|t| {
            let x = t as f64 / len as f64;
            parts.iter().map(|(f, p, a)| a * (TAU * f * x + p).sin()).sum()
        })
        .collect()
}

/// Windows scattered around per-domain centers.
#[derive(Debug, Clone)]
pub struct ClusteredCorpus {
    pub window: usize,
    pub noise: f64,
    /// `(domain, center)` pairs.
    pub centers: Vec<(String, Vec<f64>)>,
}

impl ClusteredCorpus {
    pub fn new(window: usize, domains: usize, centers_per_domain: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Vec::with_capacity(domains * centers_per_domain);
        for d in 0..domains {
            for _ in 0..centers_per_domain {
                centers.push((domain_name(d), smooth_curve(&mut rng, window)));
            }
        }
        Self {
            window,
            noise,
            centers,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, center: usize) -> Vec<f64> {
        let normal = Normal::new(0.0, self.noise).expect("finite noise");
        let raw: Vec<f64> = self.centers[center]
            .1
            .iter()
            .map(|v| v + normal.sample(rng))
            .collect();
        normalize(&raw).0
    }

    /// `n` z-normalized windows, assigned to centers round-robin so every
    /// domain gets the same share.
    pub fn windows(&self, n: usize, seed: u64) -> Vec<SeriesWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = i % self.centers.len();
                let values = self.sample(&mut rng, c);
                SeriesWindow::new(format!("syn{i:05}"), 0, 0, self.centers[c].0.clone(), values)
            })
            .collect()
    }

    /// Fresh noisy draws around random centers, with their domains.
    pub fn queries(&self, n: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.centers.len());
                (self.centers[c].0.clone(), self.sample(&mut rng, c))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotifSpec {
    pub period: f64,
    pub harmonic: f64,
    pub phase: f64,
}

impl MotifSpec {
    pub fn value(&self, t: f64) -> f64 {
        let x = TAU * t / self.period;
        x.sin() + self.harmonic * (2.0 * x + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub domains: usize,
    pub motifs: usize,
    pub motifs_per_domain: usize,
    pub kb_series_per_domain: usize,
    pub target_series_per_domain: usize,
    pub kb_length: usize,
    pub target_length: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            motifs: 8,
            motifs_per_domain: 3,
            kb_series_per_domain: 12,
            target_series_per_domain: 6,
            kb_length: 512,
            target_length: 400,
            noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub motifs: Vec<MotifSpec>,
    pub kb: Vec<StoreRecord>,
    pub targets: Vec<StoreRecord>,
}

fn motif_series(
    rng: &mut ChaCha8Rng,
    motif: &MotifSpec,
    len: usize,
    noise: &Normal<f64>,
) -> Vec<f64> {
    let level = rng.gen_range(-2.0..2.0);
    let slope = rng.gen_range(-0.004..0.004);
    let amp = rng.gen_range(0.7..1.5);
    let phase = rng.gen_range(0.0..motif.period);
    (0..len)
        .map(|t| {
            let t = t as f64;
            level + slope * t + amp * motif.value(t + phase) + noise.sample(rng)
        })
        .collect()
}

pub fn shared_motif_benchmark(cfg: &BenchmarkConfig) -> Benchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motifs: Vec<MotifSpec> = (0..cfg.motifs)
        .map(|_| MotifSpec {
            period: rng.gen_range(6.0..40.0),
            harmonic: rng.gen_range(0.0..0.8),
            phase: rng.gen_range(0.0..TAU),
        })
        .collect();
    let bank: Vec<usize> = (0..cfg.motifs).collect();
    let per_domain: Vec<Vec<usize>> = (0..cfg.domains)
        .map(|_| {
            bank.choose_multiple(&mut rng, cfg.motifs_per_domain.min(cfg.motifs))
                .copied()
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let mut kb_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b62_5f73_7472_6d31);
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7467_745f_7374_726d);
    let mut kb = Vec::new();
    let mut targets = Vec::new();
    for (d, chosen) in per_domain.iter().enumerate() {
        let domain = domain_name(d);
        for i in 0..cfg.kb_series_per_domain {
            let m = chosen[i % chosen.len()];
            let values = motif_series(&mut kb_rng, &motifs[m], cfg.kb_length, &noise);
            kb.push(StoreRecord::new(
                domain.clone(),
                format!("kb_{d}_{i}"),
                "2020-01-01 00:00:00",
                "Hourly",
                values,
            ));
        }
        for i in 0..cfg.target_series_per_domain {
            let m = chosen[i % chosen.len()];
            let values = motif_series(&mut target_rng, &motifs[m], cfg.target_length, &noise);
            targets.push(StoreRecord::new(
                domain.clone(),
                format!("target_{d}_{i}"),
                "2020-01-01 00:00:00",
                "Hourly",
                values,
            ));
        }
    }
    Benchmark {
        motifs,
        kb,
        targets,
    }
}

//! Seeded synthetic multi-view data.
//!
//! Each class owns a Gaussian centroid in every view. A sample's signal
//! coordinates are the mean of its classes' centroids plus isotropic
//! Gaussian spread. A configurable share of each view's coordinates (at
//! random positions) carries label-independent noise instead; with
//! `noise_correlation > 0` that noise is partly driven by a per-sample latent
//! shared across views, so noise dimensions co-vary like real nuisance
//! factors.

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Labels, MultiViewDataset, Split, View};
use crate::error::{Error, Result};
use crate::nd::Tensor;

const LATENT_DIM: usize = 8;

/// Inclusive range of positive labels drawn per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsPerSample {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub labels_per_sample: LabelsPerSample,
    /// Share of each view's coordinates that carry no label information.
    pub noise_fraction: Vec<f64>,
    /// Fraction of noise variance explained by the shared latent, in `[0, 1]`.
    pub noise_correlation: f64,
    /// Scale of the class centroids.
    pub separation: f64,
    /// Within-class standard deviation on signal coordinates.
    pub spread: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `n_views` views of width `dim` with a shared noise fraction.
    pub fn uniform(n_samples: usize, n_views: usize, dim: usize, n_classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_samples,
            dims: vec![dim; n_views],
            n_classes,
            labels_per_sample: LabelsPerSample { min: 1, max: 1 },
            noise_fraction: vec![noise; n_views],
            noise_correlation: 0.0,
            separation: 1.0,
            spread: 1.0,
            seed,
        }
    }

    pub fn n_views(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.is_empty() {
            return bad("at least one view is required".into());
        }
        if let Some(m) = self.dims.iter().position(|&d| d == 0) {
            return bad(format!("view {m} has dimension 0"));
        }
        if self.noise_fraction.len() != self.dims.len() {
            return bad(format!(
                "{} noise fractions for {} views",
                self.noise_fraction.len(),
                self.dims.len()
            ));
        }
        if let Some(f) = self
            .noise_fraction
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return bad(format!("noise fraction {f} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return bad(format!(
                "noise correlation {} outside [0, 1]",
                self.noise_correlation
            ));
        }
        if self.n_classes == 0 {
            return bad("at least one class is required".into());
        }
        let lps = self.labels_per_sample;
        if lps.min == 0 || lps.min > lps.max || lps.max > self.n_classes {
            return bad(format!(
                "labels per sample {}..={} invalid for {} classes",
                lps.min, lps.max, self.n_classes
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0)
            || !(self.spread.is_finite() && self.spread >= 0.0)
        {
            return bad("separation and spread must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Generates a dataset whose content is a pure function of `cfg`. The
/// returned split is empty.
pub fn synth(cfg: &SynthConfig) -> Result<MultiViewDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_samples;
    let c = cfg.n_classes;

    let mut label_data = vec![0u8; n * c];
    let classes: Vec<usize> = (0..c).collect();
    for i in 0..n {
        let lps = cfg.labels_per_sample;
        let count = rng.random_range(lps.min..=lps.max);
        for &k in classes.choose_multiple(&mut rng, count) {
            label_data[i * c + k] = 1;
        }
    }
    let labels = Labels::new(n, c, label_data)?;

    let latent: Vec<f64> = (0..n * LATENT_DIM).map(|_| gauss(&mut rng)).collect();
    let noise_scale = (cfg.separation * cfg.separation + cfg.spread * cfg.spread).sqrt();
    let rho = cfg.noise_correlation;

    let mut views = Vec::with_capacity(cfg.n_views());
    for (m, (&dim, &frac)) in cfg.dims.iter().zip(&cfg.noise_fraction).enumerate() {
        let n_noise = ((frac * dim as f64).round() as usize).min(dim);
        let noise_pos = index::sample(&mut rng, dim, n_noise).into_vec();
        let mut is_noise = vec![false; dim];
        noise_pos.iter().for_each(|&p| is_noise[p] = true);

        let centroids: Vec<f64> = (0..c * dim)
            .map(|_| cfg.separation * gauss(&mut rng))
            .collect();
        let mixing: Vec<f64> = (0..dim * LATENT_DIM)
            .map(|_| gauss(&mut rng) / (LATENT_DIM as f64).sqrt())
            .collect();

        let mut x = Tensor::zeros(n, dim);
        for i in 0..n {
            let active: Vec<usize> = (0..c).filter(|&k| labels.row(i)[k] == 1).collect();
            let z = &latent[i * LATENT_DIM..(i + 1) * LATENT_DIM];
            for j in 0..dim {
                let v = if is_noise[j] {
                    let shared: f64 = mixing[j * LATENT_DIM..(j + 1) * LATENT_DIM]
                        .iter()
                        .zip(z)
                        .map(|(a, b)| a * b)
                        .sum();
                    noise_scale * (rho.sqrt() * shared + (1.0 - rho).sqrt() * gauss(&mut rng))
                } else {
                    let mean = active.iter().map(|&k| centroids[k * dim + j]).sum::<f64>()
                        / active.len() as f64;
                    mean + cfg.spread * gauss(&mut rng)
                };
                x.set(i, j, v);
            }
        }
        views.push(View {
            name: format!("view{m}"),
            features: x,
            zscore: true,
        });
    }
    MultiViewDataset::new(format!("synth-{}", cfg.seed), views, labels, Split::default())
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

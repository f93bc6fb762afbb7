//! Synthetic imbalanced binary datasets.
//!
//! Both geometries draw a latent signal vector per sample: the first
//! coordinate separates the classes (means at +-separation/2), the second
//! picks one of two blob families per class (+-separation), the rest is
//! within-class spread. Every latent coordinate gets Gaussian jitter of
//! standard deviation `overlap_scale`, so the classes overlap whenever it is
//! positive.
//!
//! In image mode the latent coordinates are coefficients of the three
//! lowest-frequency 2-D cosine patterns of a single-channel patch, added to a
//! mid-frequency random texture and a little pixel noise around grey 0.5.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, SpatialShape};
use crate::error::{Error, Result};
use crate::rng::seeded;

const PIXEL_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthGeometry {
    /// Gaussian blobs in `dim` dimensions, features centred on 0.5.
    Blobs { dim: usize },
    /// Single-channel `height x width` patches with values in [0, 1].
    Image { height: usize, width: usize, texture: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub positive_fraction: f64,
    pub geometry: SynthGeometry,
    pub separation: f64,
    pub overlap_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            positive_fraction: 0.03,
            geometry: SynthGeometry::Image { height: 16, width: 16, texture: 0.15 },
            separation: 0.4,
            overlap_scale: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn image(n_samples: usize, height: usize, width: usize, overlap_scale: f64, seed: u64) -> Self {
        Self {
            n_samples,
            geometry: SynthGeometry::Image { height, width, texture: 0.15 },
            overlap_scale,
            seed,
            ..Self::default()
        }
    }

    pub fn blobs(n_samples: usize, dim: usize, overlap_scale: f64, seed: u64) -> Self {
        Self {
            n_samples,
            geometry: SynthGeometry::Blobs { dim },
            overlap_scale,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 0.5) {
            return Err(Error::Config(format!(
                "positive_fraction must lie in (0, 0.5), got {}",
                self.positive_fraction
            )));
        }
        for (name, v) in [("separation", self.separation), ("overlap_scale", self.overlap_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.separation == 0.0 && self.overlap_scale == 0.0 {
            return Err(Error::Config(
                "degenerate geometry: zero separation and zero overlap scale make every sample identical".into(),
            ));
        }
        match self.geometry {
            SynthGeometry::Blobs { dim } if dim < 2 => {
                Err(Error::Config("blob geometry needs at least 2 dimensions".into()))
            }
            SynthGeometry::Image { height, width, texture } if height < 2 || width < 2 || !(texture >= 0.0) => {
                Err(Error::Config("image geometry needs height, width >= 2 and texture >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self.geometry {
            SynthGeometry::Blobs { dim } => dim,
            SynthGeometry::Image { height, width, .. } => height * width,
        }
    }

    pub fn positives(&self) -> usize {
        (self.n_samples as f64 * self.positive_fraction).round() as usize
    }
}

/// Orthonormal 2-D DCT-II basis pattern `(u, v)` on a `height x width` grid.
fn cosine_pattern(u: usize, v: usize, height: usize, width: usize) -> Vec<f64> {
    let norm = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let (cu, cv) = (norm(u, width), norm(v, height));
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let fx = (PI * (x as f64 + 0.5) * u as f64 / width as f64).cos();
            let fy = (PI * (y as f64 + 0.5) * v as f64 / height as f64).cos();
            out.push(cu * cv * fx * fy);
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_samples;
    let mut rng = seeded(spec.seed);
    let mut labels = vec![0usize; n];
    for y in labels.iter_mut().take(spec.positives()) {
        *y = 1;
    }
    labels.shuffle(&mut rng);

    let dim = spec.dim();
    let mut features = Array2::<f64>::zeros((n, dim));
    let normal = |rng: &mut crate::rng::SeededRng| rng.sample::<f64, _>(StandardNormal);
    let sep = spec.separation;
    let spread = spec.overlap_scale;

    match spec.geometry {
        SynthGeometry::Blobs { .. } => {
            for (mut row, &y) in features.rows_mut().into_iter().zip(&labels) {
                let family = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (d, v) in row.iter_mut().enumerate() {
                    let centre = match d {
                        0 => (y as f64 - 0.5) * sep,
                        1 => family * sep,
                        _ => 0.0,
                    };
                    *v = 0.5 + centre + spread * normal(&mut rng);
                }
            }
        }
        SynthGeometry::Image { height, width, texture } => {
            let signal = [(1, 0), (0, 1), (1, 1)].map(|(u, v)| cosine_pattern(u, v, height, width));
            let nuisance: Vec<Vec<f64>> = (0..width)
                .flat_map(|u| (0..height).map(move |v| (u, v)))
                .filter(|&(u, v)| u + v == 0 || (3..=7).contains(&(u + v)))
                .map(|(u, v)| cosine_pattern(u, v, height, width))
                .collect();
            let mut pixels = vec![0.0; dim];
            for (mut row, &y) in features.rows_mut().into_iter().zip(&labels) {
                let family = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let latent = [
                    (y as f64 - 0.5) * sep + spread * normal(&mut rng),
                    family * sep + spread * normal(&mut rng),
                    spread * normal(&mut rng),
                ];
                pixels.fill(0.5);
                for (coef, pattern) in latent.iter().zip(&signal) {
                    for (p, b) in pixels.iter_mut().zip(pattern) {
                        *p += coef * b;
                    }
                }
                for pattern in &nuisance {
                    let coef = texture * normal(&mut rng);
                    for (p, b) in pixels.iter_mut().zip(pattern) {
                        *p += coef * b;
                    }
                }
                for (v, p) in row.iter_mut().zip(&pixels) {
                    *v = (p + PIXEL_NOISE * normal(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }

    let spatial = match spec.geometry {
        SynthGeometry::Image { height, width, .. } => Some(SpatialShape { height, width, channels: 1 }),
        SynthGeometry::Blobs { .. } => None,
    };
    let note = format!(
        "synthetic {:?} n={} positive_fraction={} separation={} overlap_scale={} seed={}",
        spec.geometry, n, spec.positive_fraction, spec.separation, spec.overlap_scale, spec.seed
    );
    Dataset::new(features, labels, spatial, note)
}

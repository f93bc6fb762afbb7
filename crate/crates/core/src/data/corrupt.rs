//! Test-time corruptions: additive Gaussian noise and Gaussian blur at five
//! severity levels (level 0 is the identity).

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Noise,
    Blur,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
        }
    }
}

/// Per-level parameters: noise standard deviation on the [0, 1] scale and
/// blur standard deviation in pixels, for levels 1..=5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionLevels {
    pub noise_sigma: [f64; 5],
    pub blur_sigma: [f64; 5],
}

impl Default for CorruptionLevels {
    fn default() -> Self {
        Self {
            noise_sigma: [0.04, 0.08, 0.12, 0.16, 0.20],
            blur_sigma: [0.5, 1.0, 1.5, 2.0, 2.5],
        }
    }
}

impl CorruptionLevels {
    pub fn validate(&self) -> Result<()> {
        for values in [&self.noise_sigma, &self.blur_sigma] {
            if values[0] <= 0.0 || values.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!(
                    "corruption levels must be positive and strictly increasing: {values:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
    /// Noise sigma or blur sigma; 0 at level 0.
    pub parameter: f64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8, levels: &CorruptionLevels) -> Result<Self> {
        if level > 5 {
            return Err(Error::Config(format!("corruption level must be 0..=5, got {level}")));
        }
        let parameter = match (level, kind) {
            (0, _) => 0.0,
            (l, CorruptionKind::Noise) => levels.noise_sigma[l as usize - 1],
            (l, CorruptionKind::Blur) => levels.blur_sigma[l as usize - 1],
        };
        Ok(Self { kind, level, parameter })
    }
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur of one row-major `height x width` plane with
/// reflect padding. Linear in the input; preserves constants.
pub fn gaussian_blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(plane.len(), height * width);
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as i64;
    let mut horizontal = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            horizontal[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * width + reflect(x as i64 + k as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * horizontal[reflect(y as i64 + k as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Corrupts every test row (every row, if the dataset is unsplit). Labels,
/// split tags and all other rows are untouched, and the noise draw for a
/// given seed is shared across levels so each level degrades the same images.
///
/// Noise is clamped to [0, 1] only for image-shaped data.
pub fn corrupt(dataset: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    if spec.kind == CorruptionKind::Blur && dataset.spatial_shape().is_none() {
        return Err(Error::UnsupportedCorruption(
            "blur needs image-shaped data (no spatial shape on this dataset)".into(),
        ));
    }
    if spec.level == 0 {
        return Ok(dataset.clone());
    }
    let rows: Vec<usize> = match dataset.splits() {
        Some(_) => dataset.indices(SplitTag::Test)?,
        None => (0..dataset.len()).collect(),
    };
    let mut features: Array2<f64> = dataset.features().to_owned();
    match spec.kind {
        CorruptionKind::Noise => {
            let clamp = dataset.spatial_shape().is_some();
            let mut rng = seeded(seed);
            for &i in &rows {
                for v in features.row_mut(i).iter_mut() {
                    let eps: f64 = rng.sample(StandardNormal);
                    let noisy = *v + spec.parameter * eps;
                    *v = if clamp { noisy.clamp(0.0, 1.0) } else { noisy };
                }
            }
        }
        CorruptionKind::Blur => {
            let shape = dataset.spatial_shape().expect("checked above");
            let plane_len = shape.height * shape.width;
            for &i in &rows {
                let mut row = features.row_mut(i);
                let slice = row.as_slice_mut().expect("standard layout");
                for c in 0..shape.channels {
                    let plane = &mut slice[c * plane_len..(c + 1) * plane_len];
                    let blurred = gaussian_blur_plane(plane, shape.height, shape.width, spec.parameter);
                    plane.copy_from_slice(&blurred);
                }
            }
        }
    }
    let note = format!(
        "{} | {} level {} (sigma {}) seed {}",
        dataset.note(),
        spec.kind.name(),
        spec.level,
        spec.parameter,
        seed
    );
    Ok(dataset.with_features(features, note))
}

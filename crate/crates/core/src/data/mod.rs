//! Datasets, stratified splitting, oversampling weights, the DFD1 file
//! format and CSV import. Synthetic generation and test-time corruption live
//! in the submodules.

mod corrupt;
mod format;
mod synth;

pub use corrupt::{corrupt, gaussian_blur_plane, gaussian_kernel, CorruptionKind, CorruptionLevels, CorruptionSpec};
pub use format::{read_csv, read_dfd, write_dfd, DFD_MAGIC, DFD_VERSION};
pub use synth::{generate, SynthGeometry, SynthSpec};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Train / validation / test fractions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub(crate) fn code(self) -> u8 {
        match self {
            SplitTag::Train => 1,
            SplitTag::Val => 2,
            SplitTag::Test => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SplitTag::Train),
            2 => Some(SplitTag::Val),
            3 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// `(height, width, channels)` of an image-shaped feature row; channel planes
/// are stored one after the other, each row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SpatialShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    spatial_shape: Option<SpatialShape>,
    labels: Vec<usize>,
    splits: Option<Vec<SplitTag>>,
    note: String,
}

impl Dataset {
    /// Builds a dataset. Feature values are rounded to `f32` precision so the
    /// in-memory dataset equals its DFD1 serialization exactly.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        spatial_shape: Option<SpatialShape>,
        note: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InputShape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Label(format!("label {bad} is not binary")));
        }
        if let Some(shape) = spatial_shape {
            if shape.len() != features.ncols() {
                return Err(Error::InputShape(format!(
                    "spatial shape {}x{}x{} does not match {} feature columns",
                    shape.height,
                    shape.width,
                    shape.channels,
                    features.ncols()
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let mut features = features;
        features.mapv_inplace(|v| v as f32 as f64);
        Ok(Self {
            features,
            spatial_shape,
            labels,
            splits: None,
            note: note.into(),
        })
    }

    pub fn with_splits(mut self, splits: Vec<SplitTag>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(Error::InputShape(format!(
                "{} split tags for {} rows",
                splits.len(),
                self.len()
            )));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn spatial_shape(&self) -> Option<SpatialShape> {
        self.spatial_shape
    }

    pub fn splits(&self) -> Option<&[SplitTag]> {
        self.splits.as_deref()
    }

    pub fn note(&self) -> &str {
        &self.note
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Row indices tagged `tag`; errors if the dataset has not been split.
    pub fn indices(&self, tag: SplitTag) -> Result<Vec<usize>> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset has no split assignment".into()))?;
        Ok(splits
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect())
    }

    /// The rows of one split as a standalone (unsplit) dataset.
    pub fn subset(&self, tag: SplitTag) -> Result<Dataset> {
        let idx = self.indices(tag)?;
        Ok(Dataset {
            features: self.features.select(Axis(0), &idx),
            spatial_shape: self.spatial_shape,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: None,
            note: format!("{} [{tag:?}]", self.note),
        })
    }

    pub(crate) fn with_features(&self, features: Array2<f64>, note: String) -> Dataset {
        let mut features = features;
        features.mapv_inplace(|v| v as f32 as f64);
        Dataset {
            features,
            spatial_shape: self.spatial_shape,
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            note,
        }
    }
}

/// Stratified 70/20/10 split.
///
/// Rows of each class are shuffled and given evenly spaced keys in (0, 1);
/// sorting all rows by key and cutting at the split totals keeps every
/// split's class counts within one sample of proportional.
pub fn split(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    let n_train = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let n_val = (n as f64 * SPLIT_FRACTIONS[1]).round() as usize;
    let mut rng = seeded(seed);
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
    for class in 0..2 {
        let mut rows: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
        rows.shuffle(&mut rng);
        let count = rows.len() as f64;
        for (r, &row) in rows.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / count, rng.random(), row));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut tags = vec![SplitTag::Test; n];
    for (pos, &(_, _, row)) in keyed.iter().enumerate() {
        tags[row] = if pos < n_train {
            SplitTag::Train
        } else if pos < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    for tag in SplitTag::ALL {
        for class in 0..2 {
            let present = tags
                .iter()
                .zip(&dataset.labels)
                .any(|(&t, &y)| t == tag && y == class);
            if !present {
                return Err(Error::Stratification(format!(
                    "{tag:?} split has no samples of class {class}"
                )));
            }
        }
    }
    dataset.clone().with_splits(tags)
}

/// `1 / count(label_i)` for every sample, so each class carries total weight 1.
pub fn oversample_weights(labels: &[usize]) -> Result<Vec<f64>> {
    let mut counts = [0usize; 2];
    for &y in labels {
        if y > 1 {
            return Err(Error::Label(format!("label {y} is not binary")));
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("class {class} has no samples")));
    }
    Ok(labels.iter().map(|&y| 1.0 / counts[y] as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(n: usize, positives: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64 / n as f64);
        let labels = (0..n).map(|i| usize::from(i < positives)).collect();
        Dataset::new(features, labels, None, "test").unwrap()
    }

    fn sizes(d: &Dataset) -> [usize; 3] {
        SplitTag::ALL.map(|t| d.indices(t).unwrap().len())
    }

    #[test]
    fn split_sizes_exact_for_divisible_n() {
        let d = split(&labelled(100, 50), 1).unwrap();
        assert_eq!(sizes(&d), [70, 20, 10]);
    }

    #[test]
    fn split_sizes_round_for_odd_n() {
        let d = split(&labelled(101, 30), 2).unwrap();
        let s = sizes(&d);
        assert_eq!(s.iter().sum::<usize>(), 101);
        for (got, frac) in s.iter().zip(SPLIT_FRACTIONS) {
            assert!((*got as f64 - 101.0 * frac).abs() <= 1.0, "{s:?}");
        }
    }

    #[test]
    fn split_is_stratified_and_partitions_rows() {
        let d = split(&labelled(1000, 31), 3).unwrap();
        let global = 31.0 / 1000.0;
        let mut seen = vec![0; 1000];
        for tag in SplitTag::ALL {
            let idx = d.indices(tag).unwrap();
            for &i in &idx {
                seen[i] += 1;
            }
            let pos = idx.iter().filter(|&&i| d.labels()[i] == 1).count() as f64;
            assert!((pos - global * idx.len() as f64).abs() <= 1.0, "{tag:?}: {pos}");
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(d.labels(), labelled(1000, 31).labels());
    }

    #[test]
    fn split_errors_when_a_class_cannot_reach_every_split() {
        assert!(matches!(split(&labelled(100, 2), 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn oversample_weights_match_inverse_counts() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 97)).collect();
        let w = oversample_weights(&labels).unwrap();
        assert_eq!(w[0], 1.0 / 97.0);
        assert_eq!(w[99], 1.0 / 3.0);
        let per_class = |c| labels.iter().zip(&w).filter(|(&y, _)| y == c).map(|(_, w)| w).sum::<f64>();
        assert!((per_class(0) - 1.0).abs() < 1e-12);
        assert!((per_class(1) - 1.0).abs() < 1e-12);

        let balanced = oversample_weights(&[0, 1, 1, 0]).unwrap();
        assert!(balanced.iter().all(|&v| v == balanced[0]));
        assert!(oversample_weights(&[0, 0, 0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let f = Array2::<f64>::zeros((2, 4));
        assert!(Dataset::new(f.clone(), vec![0, 2], None, "").is_err());
        assert!(Dataset::new(f.clone(), vec![0], None, "").is_err());
        let bad_shape = SpatialShape { height: 3, width: 1, channels: 1 };
        assert!(Dataset::new(f.clone(), vec![0, 1], Some(bad_shape), "").is_err());
        let d = Dataset::new(f, vec![0, 1], None, "").unwrap();
        assert!(d.indices(SplitTag::Train).is_err());
    }
}

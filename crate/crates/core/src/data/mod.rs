//! Point clouds, synthetic indoor scenes, file formats and segmentation
//! metrics.

mod io;
mod metrics;
mod scene;

pub use io::{read_cloud, read_ptbin, read_ptxt, write_cloud, write_ptbin, write_ptxt, PTBIN_MAGIC};
pub use metrics::{ConfusionMatrix, Metrics};
pub use scene::{generate_dataset, FEATURE_DIM, CLASS_NAMES, generate_scene, scene_seed, Primitive, Recipe, RoomSpec, SceneSpec};

use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `N x C_in`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// Class index per point, or -1 when unlabeled.
    pub labels: Vec<i64>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, features: Vec<f64>, feature_dim: usize, labels: Vec<i64>) -> Result<Self, Error> {
        let cloud = Self { coords, features, feature_dim, labels };
        cloud.validate(None)?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Checks shapes, finiteness and, if `num_classes` is given, label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<(), Error> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::EmptyPointCloud);
        }
        if self.features.len() != n * self.feature_dim || self.labels.len() != n {
            return Err(Error::Data(format!(
                "{} points with {} feature values (width {}) and {} labels",
                n,
                self.features.len(),
                self.feature_dim,
                self.labels.len()
            )));
        }
        if let Some(i) = self.coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("non-finite coordinate at point {i}")));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature at point {}", i / self.feature_dim.max(1))));
        }
        let bad = |&l: &i64| l < -1 || num_classes.is_some_and(|k| l >= k as i64);
        if let Some(i) = self.labels.iter().position(bad) {
            return Err(Error::Data(format!("label {} at point {i} is out of range", self.labels[i])));
        }
        Ok(())
    }

    /// Points per class, ignoring unlabeled points.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l >= 0 && (l as usize) < num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

use serde::{Deserialize, Serialize};

use crate::Error;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub allacc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        Self { num_classes: k, counts: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Accumulates labeled points; `-1` labels are skipped.
    pub fn add(&mut self, labels: &[i64], preds: &[usize]) -> Result<(), Error> {
        if labels.len() != preds.len() {
            return Err(Error::Data(format!("{} labels but {} predictions", labels.len(), preds.len())));
        }
        for (&l, &p) in labels.iter().zip(preds) {
            if l < 0 {
                continue;
            }
            let l = l as usize;
            if l >= self.num_classes || p >= self.num_classes {
                return Err(Error::Data(format!("class index out of range: label {l}, prediction {p}")));
            }
            self.counts[l * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "confusion matrices of different sizes");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Means run over classes present in the ground truth.
    pub fn metrics(&self) -> Result<Metrics, Error> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("confusion matrix is empty".into()));
        }
        let k = self.num_classes;
        let mut ious = Vec::with_capacity(k);
        let (mut iou_sum, mut acc_sum, mut present, mut correct) = (0.0, 0.0, 0usize, 0u64);
        for c in 0..k {
            let tp = self.get(c, c);
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..k).map(|t| self.get(t, c)).sum();
            correct += tp;
            if gt == 0 {
                ious.push(None);
                continue;
            }
            let iou = tp as f64 / (gt + pred - tp) as f64;
            ious.push(Some(iou));
            iou_sum += iou;
            acc_sum += tp as f64 / gt as f64;
            present += 1;
        }
        Ok(Metrics {
            miou: iou_sum / present as f64,
            macc: acc_sum / present as f64,
            allacc: correct as f64 / total as f64,
            per_class_iou: ious,
            confusion: self.rows(),
        })
    }
}

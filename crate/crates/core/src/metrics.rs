//! Confusion matrices, per-class IoU and mIoU.

use crate::error::{Error, Result};

/// `C × C` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truths: &[u32], preds: &[u32]) -> Result<()> {
        if truths.len() != preds.len() {
            return Err(Error::invalid(format!(
                "{} truths vs {} predictions",
                truths.len(),
                preds.len()
            )));
        }
        let c = self.n_classes as u32;
        if let Some(bad) = truths.iter().chain(preds).find(|&&v| v >= c) {
            return Err(Error::invalid(format!("class id {bad} out of range 0..{c}")));
        }
        for (&t, &p) in truths.iter().zip(preds) {
            self.counts[t as usize * self.n_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::invalid("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both truth and prediction)
    /// and their mean over the present classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let n = self.n_classes;
        let ious: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::invalid("no class is present in truth or prediction"));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok((ious, mean))
    }
}

/// Convenience: mIoU of one labeling.
pub fn miou_of(truths: &[u32], preds: &[u32], n_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.accumulate(truths, preds)?;
    Ok(cm.miou()?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accumulate_basics() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        cm.accumulate(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert!(cm.accumulate(&[2], &[0]).is_err());
        assert!(cm.accumulate(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn worked_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        let (ious, m) = cm.miou().unwrap();
        assert_eq!(ious, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent() {
        assert_eq!(miou_of(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        // class 1 never appears: excluded from the mean
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(cm.miou().unwrap(), (vec![Some(1.0), None], 1.0));
        assert!(ConfusionMatrix::new(2).miou().is_err());
    }

    proptest! {
        #[test]
        fn bounds_and_relabeling(truth in prop::collection::vec(0u32..3, 1..200), pred_seed in prop::collection::vec(0u32..3, 200)) {
            let pred: Vec<u32> = pred_seed[..truth.len()].to_vec();
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&truth, &pred).unwrap();
            let (ious, m) = cm.miou().unwrap();
            let maxiou = ious.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            prop_assert!(m <= maxiou + 1e-15);
            for v in ious.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let perm = [2u32, 0, 1];
            let t2: Vec<u32> = truth.iter().map(|&v| perm[v as usize]).collect();
            let p2: Vec<u32> = pred.iter().map(|&v| perm[v as usize]).collect();
            prop_assert!((miou_of(&t2, &p2, 3).unwrap() - m).abs() < 1e-12);
        }
    }
}

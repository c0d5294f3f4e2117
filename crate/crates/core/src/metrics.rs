//! Segmentation metrics over confusion counts.
//!
//! With `n_ij` the number of pixels of true class `i` predicted as `j` and
//! `t_i = Σ_j n_ij`:
//!
//! * pixel accuracy `Σ_i n_ii / Σ_i t_i`
//! * mean accuracy `(1/n_cl) Σ_i n_ii / t_i`
//! * mean IU `(1/n_cl) Σ_i n_ii / (t_i + Σ_j n_ji − n_ii)`
//! * frequency weighted IU `(Σ_k t_k)⁻¹ Σ_i t_i n_ii / (t_i + Σ_j n_ji − n_ii)`
//!
//! Classes with `t_i = 0` are left out of the mean accuracy, and classes that
//! appear in neither truth nor prediction are left out of the mean IU.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_cl: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cl: usize) -> Self {
        ConfusionMatrix {
            n_cl,
            counts: vec![0; n_cl * n_cl],
        }
    }

    /// Row-major counts, rows indexed by true class.
    pub fn from_counts(n_cl: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_cl * n_cl {
            return Err(Error::Shape(format!("{} counts for {n_cl} classes", counts.len())));
        }
        Ok(ConfusionMatrix { n_cl, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_cl
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_cl + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(Error::Shape(format!(
                "prediction {}×{}×{} vs truth {}×{}×{}",
                pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
            )));
        }
        truth.validate(self.n_cl)?;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE {
                continue;
            }
            if p as usize >= self.n_cl {
                return Err(Error::InvalidLabel {
                    label: p,
                    n_classes: self.n_cl,
                });
            }
            self.counts[t as usize * self.n_cl + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cl != self.n_cl {
            return Err(Error::Shape(format!("merging {} and {} classes", self.n_cl, other.n_cl)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IU of each class, `None` when the class is absent from truth and prediction.
    pub fn per_class_iu(&self) -> Vec<Option<f64>> {
        (0..self.n_cl)
            .map(|i| {
                let nii = self.get(i, i);
                let union = self.row_sum(i) + self.col_sum(i) - nii;
                (union > 0).then(|| nii as f64 / union as f64)
            })
            .collect()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.n_cl).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_cl).map(|i| self.get(i, j)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    pub fw_iu: f64,
}

/// The four metrics. `exclude_background` leaves class 0 out of mean
/// accuracy, mean IU and frequency weighted IU; pixel accuracy always counts
/// every pixel.
pub fn compute_metrics(cm: &ConfusionMatrix, exclude_background: bool) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    let diag: u64 = (0..cm.n_cl).map(|i| cm.get(i, i)).sum();
    let first = usize::from(exclude_background);
    let ius = cm.per_class_iu();

    let accs: Vec<f64> = (first..cm.n_cl)
        .filter(|&i| cm.row_sum(i) > 0)
        .map(|i| cm.get(i, i) as f64 / cm.row_sum(i) as f64)
        .collect();
    let present: Vec<f64> = ius[first..].iter().flatten().copied().collect();
    let weight: u64 = (first..cm.n_cl).map(|i| cm.row_sum(i)).sum();
    if accs.is_empty() || present.is_empty() || weight == 0 {
        return Err(Error::UndefinedMetric("no counted classes".into()));
    }
    let fw: f64 = (first..cm.n_cl)
        .filter_map(|i| ius[i].map(|iu| cm.row_sum(i) as f64 * iu))
        .sum::<f64>()
        / weight as f64;
    Ok(Metrics {
        pixel_acc: diag as f64 / total as f64,
        mean_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        mean_iu: present.iter().sum::<f64>() / present.len() as f64,
        fw_iu: fw,
    })
}

/// Mode of each `f × f` cell (ignoring [`IGNORE`], lowest class on ties),
/// enlarged back by nearest neighbour to the original extent.
pub fn downsample_upsample(truth: &LabelMap, f: usize) -> Result<LabelMap> {
    if f == 0 {
        return Err(Error::InvalidParameter("downsampling factor must be at least 1".into()));
    }
    let ch = truth.h.div_ceil(f);
    let cw = truth.w.div_ceil(f);
    let mut out = truth.clone();
    let mut hist = [0u32; 256];
    for n in 0..truth.n {
        for ci in 0..ch {
            for cj in 0..cw {
                hist.fill(0);
                let rows = ci * f..((ci + 1) * f).min(truth.h);
                let cols = cj * f..((cj + 1) * f).min(truth.w);
                for i in rows.clone() {
                    for j in cols.clone() {
                        hist[truth.at(n, i, j) as usize] += 1;
                    }
                }
                let mut mode = IGNORE;
                let mut best = 0;
                for (class, &count) in hist[..IGNORE as usize].iter().enumerate() {
                    if count > best {
                        best = count;
                        mode = class as u8;
                    }
                }
                for i in rows.clone() {
                    for j in cols.clone() {
                        out.set(n, i, j, mode);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean IU obtained by predicting the downsampled-then-upsampled truth.
pub fn iu_upper_bound(truth: &[LabelMap], f: usize, n_cl: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(n_cl);
    for t in truth {
        let mut pred = downsample_upsample(t, f)?;
        // Cells with no counted pixel only cover ignored truth, so any class will do.
        pred.data.iter_mut().filter(|v| **v == IGNORE).for_each(|v| *v = 0);
        cm.accumulate(&pred, t)?;
    }
    Ok(compute_metrics(&cm, false)?.mean_iu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let m = compute_metrics(&cm, false).unwrap();
        assert!((m.pixel_acc - 0.7).abs() < 1e-12);
        assert!((m.mean_acc - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((m.mean_iu - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
        assert!((m.fw_iu - (4.0 * 0.5 + 6.0 * 4.0 / 7.0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        let m = compute_metrics(&cm, false).unwrap();
        assert_eq!((m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu), (1.0, 1.0, 1.0, 1.0));
        assert!(matches!(
            compute_metrics(&ConfusionMatrix::new(2), false),
            Err(Error::UndefinedMetric(_))
        ));
        let single = ConfusionMatrix::from_counts(1, vec![7]).unwrap();
        let m = compute_metrics(&single, false).unwrap();
        assert_eq!(m.pixel_acc, m.mean_acc);
        assert_eq!(m.mean_iu, m.fw_iu);
    }

    #[test]
    fn accumulate_ignores() {
        let mut cm = ConfusionMatrix::new(3);
        let truth = LabelMap::new_filled(1, 2, 2, IGNORE).unwrap();
        let pred = LabelMap::new_filled(1, 2, 2, 1).unwrap();
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
        let bad = LabelMap::new_filled(1, 2, 2, 3).unwrap();
        assert!(matches!(cm.accumulate(&pred, &bad), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn mode_tie_break_and_identity() {
        let t = LabelMap::from_vec(1, 2, 2, vec![2, 1, IGNORE, IGNORE]).unwrap();
        let d = downsample_upsample(&t, 2).unwrap();
        assert_eq!(d.data, vec![1, 1, 1, 1]);
        assert_eq!(iu_upper_bound(&[t.clone()], 1, 3).unwrap(), 1.0);
        let all_ignored = LabelMap::new_filled(1, 2, 2, IGNORE).unwrap();
        assert!(downsample_upsample(&all_ignored, 2).unwrap().data.iter().all(|&v| v == IGNORE));
    }
}

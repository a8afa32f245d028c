//! Confusion-matrix metrics: mean per-class accuracy and mean IoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How classes with a zero denominator enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroClass {
    /// Dropped from the mean.
    #[default]
    Skip,
    /// Counted as 0.
    Zero,
}

impl std::str::FromStr for ZeroClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(ZeroClass::Skip),
            "zero" => Ok(ZeroClass::Zero),
            _ => Err(Error::Config(format!("unknown zero-class rule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricOptions {
    pub zero_class: ZeroClass,
    pub include_unlabeled: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            zero_class: ZeroClass::Skip,
            include_unlabeled: true,
        }
    }
}

/// `counts[t][p]`: pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion matrix", &[counts.len()], &[classes * classes]));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u32], truth: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("accumulate", &[pred.len()], &[truth.len()]));
        }
        let k = self.classes as u32;
        if let Some(&v) = pred.iter().chain(truth).find(|&&v| v >= k) {
            return Err(Error::InvalidArgument(format!("class {v} out of range for {k} classes")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, j)).sum()
    }

    /// Per-class recall; `None` when the class has no true pixels.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let d = self.row_sum(i);
                (d > 0).then(|| self.count(i, i) as f64 / d as f64)
            })
            .collect()
    }

    /// Per-class IoU; `None` when the class is neither present nor predicted.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let d = self.row_sum(i) + self.col_sum(i) - self.count(i, i);
                (d > 0).then(|| self.count(i, i) as f64 / d as f64)
            })
            .collect()
    }

    fn mean(&self, per_class: &[Option<f64>], opts: &MetricOptions) -> f64 {
        let start = if opts.include_unlabeled { 0 } else { 1 };
        let (mut s, mut n) = (0.0, 0usize);
        for v in &per_class[start.min(per_class.len())..] {
            match (v, opts.zero_class) {
                (Some(x), _) => {
                    s += x;
                    n += 1;
                }
                (None, ZeroClass::Zero) => n += 1,
                (None, ZeroClass::Skip) => {}
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn macc(&self, opts: &MetricOptions) -> f64 {
        self.mean(&self.class_accuracy(), opts)
    }

    pub fn miou(&self, opts: &MetricOptions) -> f64 {
        self.mean(&self.class_iou(), opts)
    }

    /// Fixed-width per-class table followed by `key=value` lines.
    pub fn report(&self, names: &[String], opts: &MetricOptions) -> String {
        let acc = self.class_accuracy();
        let iou = self.class_iou();
        let fmt = |v: Option<f64>| v.map_or_else(|| "     -".to_string(), |x| format!("{:6.2}", 100.0 * x));
        let mut out = format!("{:<4} {:<16} {:>6} {:>6}\n", "id", "class", "Acc", "IoU");
        for i in 0..self.classes {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
            let _ = writeln!(out, "{i:<4} {name:<16} {} {}", fmt(acc[i]), fmt(iou[i]));
        }
        let _ = writeln!(out, "macc={:.6}", self.macc(opts));
        let _ = writeln!(out, "miou={:.6}", self.miou(opts));
        for i in 0..self.classes {
            let _ = writeln!(out, "acc.{i}={}", acc[i].map_or("nan".into(), |v| format!("{v:.6}")));
            let _ = writeln!(out, "iou.{i}={}", iou[i].map_or("nan".into(), |v| format!("{v:.6}")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 0, 1]).unwrap();
        let o = MetricOptions::default();
        assert!((cm.macc(&o) - 5.0 / 6.0).abs() < 1e-15);
        assert!((cm.miou(&o) - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn zero_class_rule() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 1], &[1, 1]).unwrap();
        let skip = MetricOptions::default();
        let zero = MetricOptions {
            zero_class: ZeroClass::Zero,
            ..skip
        };
        assert_eq!(cm.miou(&skip), 1.0);
        assert!((cm.miou(&zero) - 1.0 / 3.0).abs() < 1e-15);
    }
}

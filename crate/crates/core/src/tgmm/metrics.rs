//! Masked error metrics. Entries with a zero mask are skipped outright, so
//! whatever sits at those positions can never influence the result.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const MAPE_GUARD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mape: f64,
    pub mse: f64,
    pub count: usize,
}

/// Running sums, merged in a fixed order for reproducible totals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    pub abs: f64,
    pub pct: f64,
    pub sq: f64,
    pub weight: f64,
    pub count: usize,
}

impl MetricSums {
    #[inline]
    pub fn push(&mut self, pred: f64, truth: f64, mask: f64) {
        if mask == 0.0 {
            return;
        }
        let e = (pred - truth).abs();
        self.abs += mask * e;
        self.pct += mask * e / truth.abs().max(MAPE_GUARD);
        self.sq += mask * e * e;
        self.weight += mask;
        self.count += 1;
    }

    pub fn extend(&mut self, pred: &[f64], truth: &[f64], mask: &[f64]) {
        assert!(pred.len() == truth.len() && pred.len() == mask.len(), "metric inputs differ in length");
        for i in 0..pred.len() {
            self.push(pred[i], truth[i], mask[i]);
        }
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.abs += other.abs;
        self.pct += other.pct;
        self.sq += other.sq;
        self.weight += other.weight;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<Metrics> {
        ensure!(self.weight > 0.0, "no eligible entries to score");
        Ok(Metrics {
            mae: self.abs / self.weight,
            mape: 100.0 * self.pct / self.weight,
            mse: self.sq / self.weight,
            count: self.count,
        })
    }
}

fn score(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<Metrics> {
    let mut s = MetricSums::default();
    s.extend(pred, truth, mask);
    s.finish()
}

pub fn masked_mae(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<f64> {
    Ok(score(pred, truth, mask)?.mae)
}

pub fn masked_mape(pred: &[f64], truth: &[f64], mask: &[f64], guard: f64) -> Result<f64> {
    ensure!(guard > 0.0, "MAPE guard must be positive");
    let mut pct = 0.0;
    let mut weight = 0.0;
    for i in 0..pred.len() {
        if mask[i] != 0.0 {
            pct += mask[i] * (pred[i] - truth[i]).abs() / truth[i].abs().max(guard);
            weight += mask[i];
        }
    }
    ensure!(weight > 0.0, "no eligible entries to score");
    Ok(100.0 * pct / weight)
}

pub fn masked_mse(pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<f64> {
    Ok(score(pred, truth, mask)?.mse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(masked_mae(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
        assert!((masked_mape(&[110.0], &[100.0], &[1.0], MAPE_GUARD).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(masked_mse(&[1.0, 3.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 5.0);
        // guard kicks in near zero
        assert!((masked_mape(&[0.01], &[0.0], &[1.0], MAPE_GUARD).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(masked_mae(&[1.0], &[2.0], &[0.0]).is_err());
        assert!(masked_mape(&[1.0], &[2.0], &[0.0], MAPE_GUARD).is_err());
    }

    #[test]
    fn masked_positions_do_not_matter() {
        let mask = [1.0, 0.0, 1.0, 0.0];
        let y = [0.5, 2.0, -1.0, 3.0];
        let p = [0.0, 1.0, 2.0, 3.0];
        let mut y2 = y;
        let mut p2 = p;
        y2[1] = 1e3;
        p2[3] = f64::NAN;
        let a = score(&p, &y, &mask).unwrap();
        let b = score(&p2, &y2, &mask).unwrap();
        assert_eq!(a.mae.to_bits(), b.mae.to_bits());
        assert_eq!(a.mape.to_bits(), b.mape.to_bits());
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
    }
}

//! Accuracy, confusion matrices, MAE/R² and QQ points.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k x k` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Label(format!("label {} outside 0..{k}", t.max(p))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred, 1)?;
    Ok(y_true.iter().zip(y_pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / y_true.len() as f64)
}

/// `(MAE, R²)` with `R² = 1 - SS_res / SS_tot`.
pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, f64)> {
    check_pair(y_true, y_pred, 2)?;
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok((mae(y_true, y_pred)?, 1.0 - ss_res / ss_tot))
}

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} targets but {} predictions", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::Empty(format!("need at least {min} samples")));
    }
    Ok(())
}

/// Sorted targets paired with sorted predictions.
pub fn qq_points(y_true: &[f64], y_pred: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pair(y_true, y_pred, 0)?;
    let mut t = y_true.to_vec();
    let mut p = y_pred.to_vec();
    t.sort_by(f64::total_cmp);
    p.sort_by(f64::total_cmp);
    Ok(t.into_iter().zip(p).collect())
}

pub fn write_qq_csv<W: Write>(points: &[(f64, f64)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["true", "pred"]).map_err(csv_err)?;
    for &(t, p) in points {
        wr.write_record([t.to_string(), p.to_string()]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Metrics file contents. Fields that do not apply to the task are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
}

impl MetricsReport {
    pub fn classification(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Self> {
        let cm = confusion(y_true, y_pred, k)?;
        Ok(MetricsReport {
            accuracy: Some(accuracy(&cm)?),
            confusion: Some(cm),
            ..Default::default()
        })
    }

    /// R² is left `null` when the targets are constant.
    pub fn regression(y_true: &[f64], y_pred: &[f64]) -> Result<Self> {
        let (mae, r2) = match regression_metrics(y_true, y_pred) {
            Ok((m, r)) => (m, Some(r)),
            Err(Error::UndefinedR2) => (mae(y_true, y_pred)?, None),
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            mae: Some(mae),
            r2,
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::rng::stream_rng;

    #[test]
    fn table_seven_matrices() {
        let test = ConfusionMatrix::from_counts(vec![vec![147, 3], vec![6, 144]]).unwrap();
        assert!((accuracy(&test).unwrap() - 0.970).abs() < 1e-12);
        let train = ConfusionMatrix::from_counts(vec![vec![343, 7], vec![18, 332]]).unwrap();
        assert!((accuracy(&train).unwrap() - 675.0 / 700.0).abs() < 1e-12);
        assert!((accuracy(&train).unwrap() - 0.964).abs() < 5e-4);
    }

    #[test]
    fn confusion_edge_cases() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let cm = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        assert!(matches!(confusion(&[0, 2], &[0, 1], 2), Err(Error::Label(_))));
        assert!(accuracy(&confusion(&[], &[], 2).unwrap()).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = stream_rng(0, "metrics", 0);
        let t: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let cm = confusion(&t, &p, 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let mut n = 0;
                for i in 0..500 {
                    if t[i] == a && p[i] == b {
                        n += 1;
                    }
                }
                assert_eq!(cm.get(a, b), n);
            }
        }
    }

    #[test]
    fn regression_examples() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(regression_metrics(&y, &y).unwrap(), (0.0, 1.0));
        let mean = [3.5; 4];
        assert!(regression_metrics(&y, &mean).unwrap().1.abs() < 1e-15);
        assert!(matches!(regression_metrics(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::UndefinedR2)));
        assert!(regression_metrics(&[1.0], &[1.0]).is_err());
        assert!(regression_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn regression_matches_loop() {
        let mut rng = stream_rng(1, "metrics", 0);
        let y: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let p: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let (m, r2) = regression_metrics(&y, &p).unwrap();
        let mut abs = 0.0;
        let mut mean = 0.0;
        for i in 0..200 {
            abs += (y[i] - p[i]).abs();
            mean += y[i];
        }
        mean /= 200.0;
        let (mut res, mut tot) = (0.0, 0.0);
        for i in 0..200 {
            res += (y[i] - p[i]) * (y[i] - p[i]);
            tot += (y[i] - mean) * (y[i] - mean);
        }
        assert!((m - abs / 200.0).abs() < 1e-12);
        assert!((r2 - (1.0 - res / tot)).abs() < 1e-12);
    }

    #[test]
    fn qq_examples() {
        let y = [3.0, 1.0, 2.0];
        assert_eq!(qq_points(&y, &y).unwrap(), vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        assert_eq!(qq_points(&y, &shifted).unwrap(), vec![(1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]);
        let mut buf = Vec::new();
        write_qq_csv(&[(1.0, 2.5)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "true,pred\n1,2.5\n");
    }

    #[test]
    fn report_json_layout() {
        let r = MetricsReport::classification(&[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"accuracy":0.5,"confusion":[[1,0],[1,0]],"mae":null,"r2":null}"#
        );
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn accuracy_in_unit_interval(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&t, &p, 3).unwrap();
            let acc = accuracy(&cm).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            for (c, &s) in cm.row_sums().iter().enumerate() {
                prop_assert_eq!(s, t.iter().filter(|&&x| x == c).count() as u64);
            }
        }

        #[test]
        fn r2_at_most_one(y in prop::collection::vec(-10.0f64..10.0, 2..40), noise in prop::collection::vec(-1.0f64..1.0, 40)) {
            let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
            if let Ok((_, r2)) = regression_metrics(&y, &p) {
                prop_assert!(r2 <= 1.0);
                if p != y {
                    prop_assert!(r2 < 1.0);
                }
            }
        }

        #[test]
        fn qq_is_monotone(y in prop::collection::vec(-5.0f64..5.0, 0..50), seed in 0u64..100) {
            let mut rng = stream_rng(seed, "qq", 0);
            let p: Vec<f64> = y.iter().map(|_| rng.random::<f64>()).collect();
            let pts = qq_points(&y, &p).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
        }
    }
}

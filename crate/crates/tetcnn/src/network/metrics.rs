//! Evaluation metrics: ACC/SEN/SPE for classification, RMSE for regression,
//! aggregated as mean and sample standard deviation across folds.

/// Confusion-matrix counts with the positive class = label 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn record(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, 0) => self.fp += 1,
            (0, 1) => self.fn_ += 1,
            _ => unreachable!("binary labels"),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// TP / (TP + FN).
    pub fn sensitivity(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// TN / (TN + FP).
    pub fn specificity(&self) -> f64 {
        if self.tn + self.fp == 0 {
            0.0
        } else {
            self.tn as f64 / (self.tn + self.fp) as f64
        }
    }
}

/// Per-fold metrics for either task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMetrics {
    Classification { acc: f64, sen: f64, spe: f64 },
    Regression { rmse: f64 },
}

impl EvalMetrics {
    pub fn primary(&self) -> f64 {
        match self {
            EvalMetrics::Classification { acc, .. } => *acc,
            EvalMetrics::Regression { rmse } => *rmse,
        }
    }
}

/// Mean and sample standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
}

pub fn mean_sd(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, sd }
}

/// Aggregate per-fold metrics into named (metric, summary) rows.
pub fn summarize_folds(folds: &[EvalMetrics]) -> Vec<(&'static str, MetricSummary)> {
    assert!(!folds.is_empty());
    match folds[0] {
        EvalMetrics::Classification { .. } => {
            let pick = |f: fn(&EvalMetrics) -> f64| -> Vec<f64> { folds.iter().map(f).collect() };
            vec![
                ("ACC", mean_sd(&pick(|m| match m {
                    EvalMetrics::Classification { acc, .. } => *acc,
                    _ => unreachable!(),
                }))),
                ("SEN", mean_sd(&pick(|m| match m {
                    EvalMetrics::Classification { sen, .. } => *sen,
                    _ => unreachable!(),
                }))),
                ("SPE", mean_sd(&pick(|m| match m {
                    EvalMetrics::Classification { spe, .. } => *spe,
                    _ => unreachable!(),
                }))),
            ]
        }
        EvalMetrics::Regression { .. } => {
            let values: Vec<f64> = folds
                .iter()
                .map(|m| match m {
                    EvalMetrics::Regression { rmse } => *rmse,
                    _ => unreachable!(),
                })
                .collect();
            vec![("RMSE", mean_sd(&values))]
        }
    }
}

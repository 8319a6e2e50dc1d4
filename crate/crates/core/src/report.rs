//! Accuracy tables shared by experiment runs and session metrics.

use serde::{Deserialize, Serialize};

use crate::saliency::SensitivityReport;

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"M±S"` with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    /// Accuracy in percent.
    pub mean: f64,
    pub std: f64,
    pub display: String,
    pub per_seed: Vec<f64>,
}

impl Cell {
    /// Build from per-seed accuracies given as fractions.
    pub fn from_fractions(dataset: &str, fractions: &[f64]) -> Self {
        let per_seed: Vec<f64> = fractions.iter().map(|a| a * 100.0).collect();
        let (mean, std) = mean_std(&per_seed);
        Cell {
            dataset: dataset.to_string(),
            mean,
            std,
            display: format_cell(mean, std),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub dataset: String,
    pub rationale_share: f64,
    pub nonrationale_share: f64,
    pub per_seed: Vec<SensitivityReport>,
}

impl SensitivityCell {
    pub fn from_reports(dataset: &str, reports: Vec<SensitivityReport>) -> Self {
        let shares: Vec<f64> = reports.iter().map(|r| r.rationale_share).collect();
        let (mean, _) = mean_std(&shares);
        let milli = (mean * 1000.0).round() as u32;
        SensitivityCell {
            dataset: dataset.to_string(),
            rationale_share: f64::from(milli) / 1000.0,
            nonrationale_share: f64::from(1000 - milli.min(1000)) / 1000.0,
            per_seed: reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    /// Training set size (the same for every seed of a successful arm).
    pub train_size: Option<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

impl ArmReport {
    pub fn cell(&self, dataset: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.dataset == dataset)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: Vec<String>,
    pub arms: Vec<ArmReport>,
}

impl Report {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Training data |");
        for d in &self.datasets {
            out.push_str(&format!(" {d} |"));
        }
        out.push_str(" Sensitivity (rationale / other) |\n|---|");
        for _ in &self.datasets {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        for arm in &self.arms {
            let label = match arm.train_size {
                Some(n) => format!("{} ({n})", arm.name),
                None => arm.name.clone(),
            };
            out.push_str(&format!("| {label} |"));
            for d in &self.datasets {
                match (&arm.failed, arm.cell(d)) {
                    (Some(_), _) | (_, None) => out.push_str(" failed |"),
                    (None, Some(c)) => out.push_str(&format!(" {} |", c.display)),
                }
            }
            match &arm.sensitivity {
                Some(s) => out.push_str(&format!(" {:.3} / {:.3} |\n", s.rationale_share, s.nonrationale_share)),
                None => out.push_str(" - |\n"),
            }
        }
        for arm in self.arms.iter().filter(|a| a.failed.is_some()) {
            out.push_str(&format!(
                "\n{} failed: {}\n",
                arm.name,
                arm.failed.as_deref().unwrap_or_default()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_formatting() {
        assert_eq!(format_cell(88.6012, 1.1149), "88.60±1.11");
        let single = Cell::from_fractions("in", &[0.9]);
        assert_eq!(single.display, "90.00±0.00");
        let two = Cell::from_fractions("in", &[0.8, 0.9]);
        assert_eq!(two.display, "85.00±5.00");
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }

    #[test]
    fn markdown_marks_failures() {
        let report = Report {
            datasets: vec!["in".into()],
            arms: vec![ArmReport {
                name: "Static".into(),
                train_size: None,
                seeds: vec![1],
                cells: vec![],
                sensitivity: None,
                failed: Some("boom".into()),
            }],
        };
        let md = report.to_markdown();
        assert!(md.contains("| Static | failed |"));
        assert!(md.contains("Static failed: boom"));
    }
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::roc::{roc_curve, RocCurve};
use super::EvalError;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: String,
    /// `None` when the class is absent from (or the only class in) the labels.
    pub curve: Option<RocCurve>,
    pub flag: Option<String>,
}

impl ClassRoc {
    pub fn auc(&self) -> Option<f64> {
        self.curve.as_ref().map(|c| c.auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsRestReport {
    pub classes: Vec<ClassRoc>,
}

impl OneVsRestReport {
    pub fn aucs(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(ClassRoc::auc).collect()
    }

    /// Mean over the classes that have a curve.
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self.aucs().into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// One ROC curve per class, scoring each sample by its probability for that
/// class. Classes without both positives and negatives are flagged rather
/// than failing the whole report.
pub fn one_vs_rest_report(probs: &[Vec<f64>], labels: &[usize], class_names: &[&str]) -> Result<OneVsRestReport, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: probs.len(), labels: labels.len() });
    }
    if probs.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = class_names.len();
    for (index, p) in probs.iter().enumerate() {
        if p.len() != k {
            return Err(EvalError::BadProbabilities { index, message: format!("{} entries, expected {k}", p.len()) });
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(EvalError::BadProbabilities { index, message: "entries must lie in [0, 1]".into() });
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(EvalError::BadProbabilities { index, message: format!("entries sum to {s}") });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(EvalError::LabelOutOfRange { label, classes: k });
    }
    let classes = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match roc_curve(&scores, &pos) {
                Ok(curve) => ClassRoc { class: name.to_string(), curve: Some(curve), flag: None },
                Err(e) => ClassRoc { class: name.to_string(), curve: None, flag: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(OneVsRestReport { classes })
}

/// One table per class: rows are models, columns are data conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub class: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

impl AucTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("model,{}\n", self.columns.join(","));
        for (model, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| cell(*v)).collect();
            let _ = writeln!(s, "{model},{}", cells.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut grid = vec![header];
        for (model, vals) in &self.rows {
            let mut row = vec![model.clone()];
            row.extend(vals.iter().map(|v| cell(*v)));
            grid.push(row);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut s = format!("{} class AUC\n", self.class);
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(s, "{}", "-".repeat(total));
            }
        }
        s
    }
}

/// Arrange `(model, condition, report)` entries into per-class tables.
/// Column and row order follow first appearance.
pub fn auc_tables(entries: &[(&str, &str, &OneVsRestReport)]) -> Vec<AucTable> {
    let mut models: Vec<&str> = Vec::new();
    let mut conditions: Vec<&str> = Vec::new();
    let mut classes: Vec<&str> = Vec::new();
    for (m, c, r) in entries {
        if !models.contains(m) {
            models.push(m);
        }
        if !conditions.contains(c) {
            conditions.push(c);
        }
        for cr in &r.classes {
            if !classes.contains(&cr.class.as_str()) {
                classes.push(&cr.class);
            }
        }
    }
    classes
        .iter()
        .map(|&class| AucTable {
            class: class.to_string(),
            columns: conditions.iter().map(|c| c.to_string()).collect(),
            rows: models
                .iter()
                .map(|&m| {
                    let vals = conditions
                        .iter()
                        .map(|&c| {
                            entries
                                .iter()
                                .find(|(em, ec, _)| *em == m && *ec == c)
                                .and_then(|(_, _, r)| r.classes.iter().find(|cr| cr.class == class))
                                .and_then(ClassRoc::auc)
                        })
                        .collect();
                    (m.to_string(), vals)
                })
                .collect(),
        })
        .collect()
}

/// ROC points as `class,threshold,fpr,tpr` rows.
pub fn roc_csv(report: &OneVsRestReport) -> String {
    let mut s = String::from("class,threshold,fpr,tpr\n");
    for cr in &report.classes {
        if let Some(curve) = &cr.curve {
            for p in &curve.points {
                let _ = writeln!(s, "{},{},{},{}", cr.class, p.threshold, p.fpr, p.tpr);
            }
        }
    }
    s
}

//! Transfer-matrix evaluation and report serialization.
//!
//! Attack success rate follows the clean-correct convention: for each
//! target, the denominator is the subset of evaluation examples the target
//! classifies correctly on the clean input, and a cell is the percentage of
//! that subset misclassified after perturbation. The raw misclassification
//! rate over all examples is emitted alongside for comparison. Cells where
//! substitute and target are the same trained model are flagged white-box.

use serde_json::json;

use crate::attack::AdversarialSet;
use crate::error::{Error, Result};
use crate::nn::{Model, QuantState};
use crate::tensor::Tensor;

/// A target model with its identifier and inference state.
pub struct TargetRef<'a> {
    pub id: String,
    pub model: &'a Model,
    pub state: QuantState,
}

#[derive(Clone, Debug)]
pub struct TransferCell {
    pub target: String,
    /// Success rate in percent over the clean-correct subset; `None` when
    /// that subset is empty.
    pub asr: Option<f64>,
    /// Misclassification rate in percent over all examples.
    pub raw_misclass: f64,
    /// Denominator of `asr` (clean-correct count).
    pub clean_correct: usize,
    /// Total evaluation examples.
    pub n: usize,
    pub white_box: bool,
}

#[derive(Clone, Debug)]
pub struct TransferRow {
    pub substitute: String,
    pub attack: String,
    pub cells: Vec<TransferCell>,
    /// Arithmetic mean of the defined cells.
    pub avg: Option<f64>,
}

impl TransferRow {
    pub fn cell(&self, target: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.target == target)
    }

    /// Mean ASR over a subset of targets (by id predicate).
    pub fn mean_over<F: Fn(&str) -> bool>(&self, keep: F) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| keep(&c.target))
            .filter_map(|c| c.asr)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Substitute x target matrix of attack success rates plus the clean
/// accuracy of every target.
#[derive(Clone, Debug, Default)]
pub struct TransferReport {
    pub targets: Vec<String>,
    /// Percent clean accuracy per target, aligned with `targets`.
    pub clean_accuracy: Vec<f64>,
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    pub fn new(targets: Vec<String>, clean_accuracy: Vec<f64>) -> Self {
        TransferReport {
            targets,
            clean_accuracy,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, substitute: &str, attack: &str) -> Option<&TransferRow> {
        self.rows
            .iter()
            .find(|r| r.substitute == substitute && r.attack == attack)
    }

    /// Consistency: rates within [0, 100], numerators within denominators,
    /// and every `avg` equal to the mean of its row's defined cells.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let mut vals = Vec::new();
            for c in &row.cells {
                if let Some(a) = c.asr {
                    if !(0.0..=100.0).contains(&a) {
                        return Err(Error::InvalidArgument(format!(
                            "asr {a} out of range in row {}",
                            row.substitute
                        )));
                    }
                    vals.push(a);
                }
                if c.clean_correct > c.n {
                    return Err(Error::InvalidArgument(
                        "clean-correct count exceeds sample count".into(),
                    ));
                }
            }
            let expect = if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            match (row.avg, expect) {
                (Some(a), Some(b)) if (a - b).abs() < 1e-9 => {}
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "avg column inconsistent in row {}",
                        row.substitute
                    )))
                }
            }
        }
        Ok(())
    }

    /// Matrix CSV mirroring the transfer-table layout: one row per
    /// (substitute, attack) with per-target columns and a trailing `Avg.`
    /// column; white-box cells carry a `*` suffix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("substitute,attack");
        for t in &self.targets {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",Avg.\n");
        for row in &self.rows {
            out.push_str(&row.substitute);
            out.push(',');
            out.push_str(&row.attack);
            for t in &self.targets {
                out.push(',');
                if let Some(c) = row.cell(t) {
                    if let Some(a) = c.asr {
                        out.push_str(&format!("{a:.4}"));
                        if c.white_box {
                            out.push('*');
                        }
                    }
                }
            }
            out.push(',');
            if let Some(a) = row.avg {
                out.push_str(&format!("{a:.4}"));
            }
            out.push('\n');
        }
        out
    }

    /// Clean-accuracy vector as CSV.
    pub fn clean_accuracy_csv(&self) -> String {
        let mut out = String::from("target,clean_accuracy_pct\n");
        for (t, a) in self.targets.iter().zip(self.clean_accuracy.iter()) {
            out.push_str(&format!("{t},{a:.4}\n"));
        }
        out
    }

    /// One JSON object per cell (the event-log form of the matrix).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            for c in &row.cells {
                let record = json!({
                    "substitute": row.substitute,
                    "attack": row.attack,
                    "target": c.target,
                    "asr": c.asr,
                    "raw_misclass": c.raw_misclass,
                    "clean_correct": c.clean_correct,
                    "n": c.n,
                    "white_box": c.white_box,
                });
                out.push_str(&record.to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Percent clean accuracy of each target on a batch.
pub fn clean_accuracy(targets: &[TargetRef<'_>], x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|t| Ok(t.model.accuracy(x, labels, t.state)? * 100.0))
        .collect()
}

/// Evaluates one adversarial set against a target list, producing a report
/// row. `substitute_id` is compared with target ids for white-box flagging.
pub fn evaluate_transfer(
    adv: &AdversarialSet,
    substitute_id: &str,
    attack_id: &str,
    targets: &[TargetRef<'_>],
) -> Result<TransferRow> {
    adv.check_budget()?;
    let mut cells = Vec::with_capacity(targets.len());
    for t in targets {
        let clean_pred = t.model.predict(&adv.clean, t.state)?;
        let adv_pred = t.model.predict(&adv.adversarial, t.state)?;
        let n = adv.len();
        let mut clean_correct = 0usize;
        let mut fooled_among_correct = 0usize;
        let mut raw_misclass = 0usize;
        for i in 0..n {
            let y = adv.labels[i];
            if adv_pred[i] != y {
                raw_misclass += 1;
            }
            if clean_pred[i] == y {
                clean_correct += 1;
                if adv_pred[i] != y {
                    fooled_among_correct += 1;
                }
            }
        }
        let asr = if clean_correct > 0 {
            Some(100.0 * fooled_among_correct as f64 / clean_correct as f64)
        } else {
            None
        };
        cells.push(TransferCell {
            target: t.id.clone(),
            asr,
            raw_misclass: 100.0 * raw_misclass as f64 / n as f64,
            clean_correct,
            n,
            white_box: t.id == substitute_id,
        });
    }
    let vals: Vec<f64> = cells.iter().filter_map(|c| c.asr).collect();
    let avg = if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(TransferRow {
        substitute: substitute_id.to_string(),
        attack: attack_id.to_string(),
        cells,
        avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{pgd, AttackSpec};
    use crate::data::synth_dataset;
    use crate::nn::Architecture;
    use crate::train::{train_standard, TrainConfig};

    #[test]
    fn unperturbed_examples_never_count_as_success() {
        let data = synth_dataset(3, 64, 8, 8, 0.1, 90, "train").unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            seed: 91,
            ..Default::default()
        };
        let model = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let (x, y) = data.head(16);
        let adv = pgd(&model, &x, &y, &AttackSpec::pgd(0.0, 1, 1), QuantState::FULL).unwrap();
        let targets = [TargetRef {
            id: "mlp-3-w32".into(),
            model: &model,
            state: QuantState::FULL,
        }];
        let row = evaluate_transfer(&adv, "mlp-3-w32", "pgd", &targets).unwrap();
        assert_eq!(row.cells[0].asr, Some(0.0));
        assert!(row.cells[0].white_box);
        assert_eq!(row.avg, Some(0.0));
    }

    #[test]
    fn white_box_pgd_on_separable_set_is_strong() {
        let data = synth_dataset(10, 2000, 8, 8, 0.1, 92, "train").unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            seed: 93,
            ..Default::default()
        };
        let model = train_standard(Architecture::Mlp3, &data, &cfg).unwrap();
        let eval = synth_dataset(10, 200, 8, 8, 0.1, 94, "eval").unwrap();
        let (x, y) = eval.head(200);
        let spec = AttackSpec::pgd(16.0 / 255.0, 20, 95);
        let adv = pgd(&model, &x, &y, &spec, QuantState::FULL).unwrap();
        let targets = [TargetRef {
            id: "self".into(),
            model: &model,
            state: QuantState::FULL,
        }];
        let row = evaluate_transfer(&adv, "self", "pgd", &targets).unwrap();
        let asr = row.cells[0].asr.unwrap();
        assert!(asr >= 95.0, "white-box asr {asr}");
    }

    #[test]
    fn csv_layout_and_consistency() {
        let report = {
            let mut r = TransferReport::new(
                vec!["t1".into(), "t2".into()],
                vec![98.0, 97.5],
            );
            r.rows.push(TransferRow {
                substitute: "a-w2".into(),
                attack: "mim".into(),
                cells: vec![
                    TransferCell {
                        target: "t1".into(),
                        asr: Some(50.0),
                        raw_misclass: 52.0,
                        clean_correct: 100,
                        n: 104,
                        white_box: false,
                    },
                    TransferCell {
                        target: "t2".into(),
                        asr: Some(70.0),
                        raw_misclass: 71.0,
                        clean_correct: 90,
                        n: 104,
                        white_box: true,
                    },
                ],
                avg: Some(60.0),
            });
            r
        };
        report.validate().unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "substitute,attack,t1,t2,Avg.");
        assert_eq!(lines.next().unwrap(), "a-w2,mim,50.0000,70.0000*,60.0000");
        let jsonl = report.to_jsonl();
        assert_eq!(jsonl.lines().count(), 2);
        assert!(jsonl.contains("\"raw_misclass\""));
        assert!(report.clean_accuracy_csv().contains("t1,98.0000"));
    }

    #[test]
    fn validate_catches_bad_avg() {
        let mut r = TransferReport::new(vec!["t".into()], vec![99.0]);
        r.rows.push(TransferRow {
            substitute: "s".into(),
            attack: "pgd".into(),
            cells: vec![TransferCell {
                target: "t".into(),
                asr: Some(10.0),
                raw_misclass: 10.0,
                clean_correct: 10,
                n: 10,
                white_box: false,
            }],
            avg: Some(55.0),
        });
        assert!(r.validate().is_err());
    }
}

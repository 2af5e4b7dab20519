//! Per-step scalar logging with a fixed CSV schema.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,pref_loss,reg_value,value_loss,mean_abs_implicit_reward,max_abs_implicit_reward,gt_return,oracle_reward_gap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub pref_loss: f64,
    pub reg_value: f64,
    pub value_loss: f64,
    pub mean_abs_implicit_reward: f64,
    pub max_abs_implicit_reward: f64,
    pub gt_return: f64,
    /// Blank in the CSV when no oracle is attached.
    pub oracle_reward_gap: Option<f64>,
}

/// Ordered rows keyed by strictly increasing step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "metrics steps must be strictly increasing");
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Render the fixed-schema CSV. Leading `#` lines carry metadata and are
    /// skipped by the reader.
    pub fn to_csv_string(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let gap = match r.oracle_reward_gap {
                Some(g) => g.to_string(),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.pref_loss,
                r.reg_value,
                r.value_loss,
                r.mean_abs_implicit_reward,
                r.max_abs_implicit_reward,
                r.gt_return,
                gap
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_csv_string(comment))?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut log = MetricsLog::new();
        let mut saw_header = false;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != CSV_HEADER {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("unexpected CSV header: {line}"),
                    });
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })
            };
            log.push(MetricsRow {
                step: fields[0].parse().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("{e}"),
                })?,
                pref_loss: parse(fields[1])?,
                reg_value: parse(fields[2])?,
                value_loss: parse(fields[3])?,
                mean_abs_implicit_reward: parse(fields[4])?,
                max_abs_implicit_reward: parse(fields[5])?,
                gt_return: parse(fields[6])?,
                oracle_reward_gap: if fields[7].is_empty() {
                    None
                } else {
                    Some(parse(fields[7])?)
                },
            });
        }
        Ok(log)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, ret: f64) -> MetricsRow {
        MetricsRow {
            step,
            pref_loss: 0.5,
            reg_value: 0.1,
            value_loss: 0.01,
            mean_abs_implicit_reward: 1.0,
            max_abs_implicit_reward: 2.0,
            gt_return: ret,
            oracle_reward_gap: None,
        }
    }

    #[test]
    fn csv_round_trip_including_blank_gap() {
        let mut log = MetricsLog::new();
        log.push(MetricsRow {
            oracle_reward_gap: Some(0.25),
            ..row(10, 3.5)
        });
        log.push(row(20, 4.0));
        let text = log.to_csv_string(Some("config_hash: abc"));
        let back = MetricsLog::from_csv_str(&text).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn steps_must_increase() {
        let mut log = MetricsLog::new();
        log.push(row(10, 0.0));
        log.push(row(10, 0.0));
    }
}

//! Per-split accuracy tables, relative performance drops and the
//! seen-versus-unseen shift experiment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{make_seen_domain_splits, make_splits, DataError, Dataset};
use crate::trainer::{evaluate, train, ModeFlags, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("out-of-domain accuracy must be positive, got {0}")]
    Domain(f64),
    #[error("cannot average an empty list")]
    Empty,
    #[error("row {row} has {got} values for {want} splits")]
    Shape {
        row: String,
        got: usize,
        want: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv: {0}")]
    Csv(String),
}

/// Rounds half away from zero to one decimal.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Relative drop `(acc_star - acc) / acc × 100`, unrounded.
pub fn compute_drop(acc_star: f64, acc: f64) -> Result<f64, ReportError> {
    if acc.is_nan() || acc <= 0.0 {
        return Err(ReportError::Domain(acc));
    }
    Ok((acc_star - acc) / acc * 100.0)
}

/// Arithmetic mean of per-split drops, unrounded.
pub fn mean_drop(drops: &[f64]) -> Result<f64, ReportError> {
    if drops.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

/// One table row; values are percentages in split order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub values: Vec<f64>,
}

impl ReportRow {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub splits: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Recorded in rendered headers when set.
    pub dataset_hash: Option<String>,
}

impl Report {
    pub fn new(splits: Vec<String>) -> Self {
        Self {
            splits,
            rows: Vec::new(),
            dataset_hash: None,
        }
    }

    pub fn push(
        &mut self,
        method: &str,
        setting: &str,
        values: Vec<f64>,
    ) -> Result<(), ReportError> {
        if values.len() != self.splits.len() {
            return Err(ReportError::Shape {
                row: format!("{method} / {setting}"),
                got: values.len(),
                want: self.splits.len(),
            });
        }
        self.rows.push(ReportRow {
            method: method.into(),
            setting: setting.into(),
            values,
        });
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Markdown,
}

fn header(report: &Report) -> Vec<String> {
    let mut h = vec!["method".to_string(), "setting".to_string()];
    h.extend(report.splits.iter().cloned());
    h.push("Mean".into());
    h
}

fn cells(row: &ReportRow) -> Vec<String> {
    let mut c = vec![row.method.clone(), row.setting.clone()];
    c.extend(row.values.iter().map(|v| format!("{:.1}", round1(*v))));
    c.push(format!("{:.1}", round1(row.mean())));
    c
}

/// Renders rows in insertion order with splits in report order, then Mean.
pub fn render_report(report: &Report, format: Format) -> Result<String, ReportError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
            w.write_record(header(report)).map_err(csv_err)?;
            for row in &report.rows {
                w.write_record(cells(row)).map_err(csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| ReportError::Csv(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("utf-8 input"))
        }
        Format::Markdown => {
            let mut out = String::new();
            if let Some(h) = &report.dataset_hash {
                out.push_str(&format!("<!-- dataset {h} -->\n"));
            }
            let h = header(report);
            out.push_str(&format!("| {} |\n", h.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(h.len())));
            for row in &report.rows {
                out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
            }
            Ok(out)
        }
    }
}

/// In-domain versus out-of-domain accuracy for one modality setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropAnalysis {
    pub setting: String,
    pub splits: Vec<String>,
    /// Percent, training set includes part of the test domain.
    pub acc_star: Vec<f64>,
    /// Percent, training set shares neither scenario nor location.
    pub acc: Vec<f64>,
    pub drops: Vec<f64>,
    pub mean_drop: f64,
}

impl DropAnalysis {
    pub fn from_accuracies(
        setting: &str,
        splits: Vec<String>,
        acc_star: Vec<f64>,
        acc: Vec<f64>,
    ) -> Result<Self, ReportError> {
        let drops = acc_star
            .iter()
            .zip(&acc)
            .map(|(s, a)| compute_drop(*s, *a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            setting: setting.into(),
            mean_drop: mean_drop(&drops)?,
            splits,
            acc_star,
            acc,
            drops,
        })
    }

    pub fn mean_acc(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len() as f64
    }

    pub fn mean_acc_star(&self) -> f64 {
        self.acc_star.iter().sum::<f64>() / self.acc_star.len() as f64
    }
}

/// Renders drop analyses in the layout of a shift table: a starred row, an
/// unstarred row and a drop row per setting.
pub fn drop_report(analyses: &[DropAnalysis]) -> Report {
    let splits = analyses
        .first()
        .map(|a| a.splits.clone())
        .unwrap_or_default();
    let mut report = Report::new(splits);
    for a in analyses {
        report.rows.push(ReportRow {
            method: format!("{}*", a.setting),
            setting: "seen".into(),
            values: a.acc_star.clone(),
        });
        report.rows.push(ReportRow {
            method: a.setting.clone(),
            setting: "unseen".into(),
            values: a.acc.clone(),
        });
        report.rows.push(ReportRow {
            method: a.setting.clone(),
            setting: "drop %".into(),
            values: a.drops.clone(),
        });
    }
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySetting {
    pub name: String,
    pub mode: ModeFlags,
}

impl ModalitySetting {
    /// Audio, motion, appearance and all three, each with the plain
    /// cross-entropy objective.
    pub fn standard() -> Vec<Self> {
        let s = |name: &str, mode| ModalitySetting {
            name: name.into(),
            mode,
        };
        vec![
            s("Audio", ModeFlags::single(false, false, true)),
            s("Motion", ModeFlags::single(false, true, false)),
            s("Appearance", ModeFlags::single(true, false, false)),
            s("Multimodal", ModeFlags::baseline()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Mode flags are replaced per setting; everything else applies to every run.
    pub train: TrainConfig,
    /// Share of each test domain held out when part of it is seen in training.
    pub test_fraction: f64,
    /// Accuracies are averaged over these seeds before drops are computed.
    pub seeds: Vec<u64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            test_fraction: 0.5,
            seeds: vec![0],
        }
    }
}

/// Trains every setting on seen and unseen splits of each test domain.
///
/// Both models of a split are scored on the same held-out clips so the drop
/// isolates the effect of seeing the domain during training.
pub fn shift_experiment(
    dataset: &Dataset,
    settings: &[ModalitySetting],
    cfg: &ShiftConfig,
) -> Result<Vec<DropAnalysis>, ReportError> {
    if cfg.seeds.is_empty() {
        return Err(ReportError::Empty);
    }
    let unseen = make_splits(&dataset.manifest, &dataset.records)?;
    let mut out = Vec::new();
    for setting in settings {
        let mut acc_star = vec![0.0; unseen.len()];
        let mut acc = vec![0.0; unseen.len()];
        for &seed in &cfg.seeds {
            let seen = make_seen_domain_splits(
                &dataset.manifest,
                &dataset.records,
                cfg.test_fraction,
                seed,
            )?;
            let run_cfg = TrainConfig {
                mode: setting.mode,
                seed,
                checkpoint_dir: None,
                ..cfg.train.clone()
            };
            for (k, (s, u)) in seen.iter().zip(&unseen).enumerate() {
                let star = train(dataset, s, &run_cfg, None)?;
                acc_star[k] += 100.0 * evaluate(&star.params, dataset, &s.test_ids)?.top1;
                let plain = train(dataset, u, &run_cfg, None)?;
                acc[k] += 100.0 * evaluate(&plain.params, dataset, &s.test_ids)?.top1;
                log::info!("{} {} seed {seed} done", setting.name, u.name());
            }
        }
        let n = cfg.seeds.len() as f64;
        acc_star.iter_mut().for_each(|v| *v /= n);
        acc.iter_mut().for_each(|v| *v /= n);
        out.push(DropAnalysis::from_accuracies(
            &setting.name,
            unseen.iter().map(|s| s.name()).collect(),
            acc_star,
            acc,
        )?);
    }
    Ok(out)
}

//! CSV and JSON serialization of run metrics.
//!
//! `metrics.csv` has one row per iteration and the fixed column order of
//! [`COLUMNS`]. Columns that a regime does not produce (kernel diagnostics
//! outside SVPG, critic loss without a critic) are left empty. List-valued
//! columns join their entries with `;`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{IterationRecord, RunMetrics, TrainConfig};

pub const COLUMNS: [&str; 19] = [
    "iteration",
    "transitions",
    "cumulative_transitions",
    "episodes",
    "cumulative_episodes",
    "agent_transitions",
    "mean_train_return",
    "mean_eval_return",
    "best_eval_return",
    "best_particle",
    "particle_returns",
    "grad_samples",
    "grad_norm",
    "direction_norm",
    "bandwidth",
    "mean_offdiag_gram",
    "repulsion_ratio",
    "alpha",
    "critic_loss",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn to_row(r: &IterationRecord) -> [String; 19] {
    [
        r.iteration.to_string(),
        r.transitions.to_string(),
        r.cumulative_transitions.to_string(),
        r.episodes.to_string(),
        r.cumulative_episodes.to_string(),
        join(&r.agent_transitions),
        r.mean_train_return.to_string(),
        opt(r.mean_eval_return),
        opt(r.best_eval_return),
        opt(r.best_particle),
        join(&r.particle_returns),
        r.grad_samples.to_string(),
        r.grad_norm.to_string(),
        opt(r.direction_norm),
        opt(r.bandwidth),
        opt(r.mean_offdiag_gram),
        opt(r.repulsion_ratio),
        opt(r.alpha),
        opt(r.critic_loss),
    ]
}

/// Streams metrics rows; the header is written on construction.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(COLUMNS)?;
        Ok(MetricsWriter { inner })
    }

    /// Writes and flushes one row, so partial runs leave complete rows.
    pub fn write(&mut self, record: &IterationRecord) -> csv::Result<()> {
        self.inner.write_record(to_row(record))?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> std::result::Result<W, csv::IntoInnerError<csv::Writer<W>>> {
        self.inner.into_inner()
    }
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[IterationRecord]) -> csv::Result<()> {
    let mut w = MetricsWriter::new(out)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, column: &str, row: usize) -> std::result::Result<T, String> {
    field
        .parse()
        .map_err(|_| format!("row {row}: cannot parse {column} value {field:?}"))
}

fn parse_opt<T: std::str::FromStr>(field: &str, column: &str, row: usize) -> std::result::Result<Option<T>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, column, row).map(Some)
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, column: &str, row: usize) -> std::result::Result<Vec<T>, String> {
    if field.is_empty() {
        return Ok(vec![]);
    }
    field.split(';').map(|f| parse(f, column, row)).collect()
}

fn from_row(rec: &csv::StringRecord, row: usize) -> std::result::Result<IterationRecord, String> {
    if rec.len() != COLUMNS.len() {
        return Err(format!("row {row}: expected {} fields, got {}", COLUMNS.len(), rec.len()));
    }
    let f = |k: usize| &rec[k];
    Ok(IterationRecord {
        iteration: parse(f(0), COLUMNS[0], row)?,
        transitions: parse(f(1), COLUMNS[1], row)?,
        cumulative_transitions: parse(f(2), COLUMNS[2], row)?,
        episodes: parse(f(3), COLUMNS[3], row)?,
        cumulative_episodes: parse(f(4), COLUMNS[4], row)?,
        agent_transitions: parse_list(f(5), COLUMNS[5], row)?,
        mean_train_return: parse(f(6), COLUMNS[6], row)?,
        mean_eval_return: parse_opt(f(7), COLUMNS[7], row)?,
        best_eval_return: parse_opt(f(8), COLUMNS[8], row)?,
        best_particle: parse_opt(f(9), COLUMNS[9], row)?,
        particle_returns: parse_list(f(10), COLUMNS[10], row)?,
        grad_samples: parse(f(11), COLUMNS[11], row)?,
        grad_norm: parse(f(12), COLUMNS[12], row)?,
        direction_norm: parse_opt(f(13), COLUMNS[13], row)?,
        bandwidth: parse_opt(f(14), COLUMNS[14], row)?,
        mean_offdiag_gram: parse_opt(f(15), COLUMNS[15], row)?,
        repulsion_ratio: parse_opt(f(16), COLUMNS[16], row)?,
        alpha: parse_opt(f(17), COLUMNS[17], row)?,
        critic_loss: parse_opt(f(18), COLUMNS[18], row)?,
    })
}

/// Parses rows written by [`MetricsWriter`]. `origin` names the source in
/// error messages.
pub fn read_metrics_csv<R: Read>(input: R, origin: &Path) -> Result<Vec<IterationRecord>> {
    let format = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| format(e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(format(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| format(e.to_string()))?;
            from_row(&rec, i + 1).map_err(format)
        })
        .collect()
}

pub fn load_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics_csv(file, path)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env: String,
    pub regime: String,
    pub estimator: String,
    pub particles: usize,
    pub transitions: usize,
    pub iterations: usize,
    pub seed: u64,
    pub total_transitions: usize,
    pub total_episodes: usize,
    pub best_particle: Option<usize>,
    pub best_test_return: Option<f64>,
    pub mean_test_return: Option<f64>,
    pub final_returns: Vec<f64>,
    pub episodes_to_95: Option<usize>,
}

impl Summary {
    pub fn new(config: &TrainConfig, metrics: &RunMetrics) -> Self {
        let last = metrics.records.last();
        Summary {
            env: config.env.to_string(),
            regime: config.regime.as_str().to_string(),
            estimator: config.estimator.kind.as_str().to_string(),
            particles: config.particles,
            transitions: config.transitions,
            iterations: metrics.records.len(),
            seed: config.seed,
            total_transitions: last.map_or(0, |r| r.cumulative_transitions),
            total_episodes: last.map_or(0, |r| r.cumulative_episodes),
            best_particle: metrics.best_particle,
            best_test_return: metrics.best_test_return,
            mean_test_return: metrics.mean_test_return,
            final_returns: metrics.final_returns.clone(),
            episodes_to_95: metrics.episodes_to_95,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

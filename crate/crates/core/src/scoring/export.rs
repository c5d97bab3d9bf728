//! Plot-ready text exports: learned channel graphs, temporal affinities,
//! score matrices and metrics.
//!
//! Every file starts with a `# darts-<kind> v1` line, followed by a
//! comma-separated header and rows.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use super::eval::{AnomalyReport, Metrics};
use super::score::ScoreSet;
use crate::autodiff::{Tape, Tensor};
use crate::data::TrainingSample;
use crate::error::{DartsError, Result};
use crate::model::{Batch, Darts, Sampling};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub probability: f64,
    pub sampled: bool,
}

/// Graphs learned for one sample with deterministic sampling.
#[derive(Clone, Debug)]
pub struct GraphSnapshot {
    pub origin: usize,
    /// Off-diagonal edges of every head.
    pub heads: Vec<Vec<Edge>>,
    /// `[T, T]` decayed temporal affinity, absent when the long-term path is disabled.
    pub affinity: Option<Tensor>,
}

pub fn capture_graphs(model: &Darts, sample: &TrainingSample<'_>) -> Result<GraphSnapshot> {
    let batch = Batch::from_samples(std::slice::from_ref(sample))?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let fwd = model.forward(&mut tape, &p, &batch, &Sampling::Argmax)?;
    let probs = tape.value(fwd.graphs.probs);
    let adj = tape.value(fwd.graphs.adjacency);
    let n = model.n_channels();
    let heads = (0..model.config().heads)
        .map(|h| {
            let mut edges = Vec::with_capacity(n * (n - 1));
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let k = (h * n + i) * n + j;
                    edges.push(Edge {
                        source: i,
                        target: j,
                        probability: probs.data()[k],
                        sampled: adj.data()[k] > 0.5,
                    });
                }
            }
            edges
        })
        .collect();
    let affinity = match fwd.affinity {
        Some(a) => {
            let v = tape.value(a.weights);
            let t = v.shape()[1];
            Some(v.reshape(&[t, t])?)
        }
        None => None,
    };
    Ok(GraphSnapshot {
        origin: sample.origin,
        heads,
        affinity,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| DartsError::io(path, e))
}

fn finish(path: &Path, r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| DartsError::io(path, e))
}

pub fn write_edges<W: Write>(mut out: W, head: usize, origin: usize, edges: &[Edge]) -> std::io::Result<()> {
    writeln!(out, "# darts-graph v1 head={head} origin={origin}")?;
    writeln!(out, "source,target,probability,sampled")?;
    for e in edges {
        writeln!(out, "{},{},{:e},{}", e.source, e.target, e.probability, u8::from(e.sampled))?;
    }
    out.flush()
}

pub fn write_matrix<W: Write>(mut out: W, kind: &str, m: &Tensor) -> std::io::Result<()> {
    let s = m.shape();
    writeln!(out, "# darts-{kind} v1 rows={} cols={}", s[0], s[1])?;
    for row in m.data().chunks(s[1]) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()
}

/// Writes `<prefix>_head<h>.csv` per head and `<prefix>_affinity.csv`; returns the paths.
pub fn save_snapshot(dir: &Path, prefix: &str, snap: &GraphSnapshot) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for (h, edges) in snap.heads.iter().enumerate() {
        let path = dir.join(format!("{prefix}_head{h}.csv"));
        finish(&path, write_edges(create(&path)?, h, snap.origin, edges))?;
        paths.push(path);
    }
    if let Some(a) = &snap.affinity {
        let path = dir.join(format!("{prefix}_affinity.csv"));
        finish(&path, write_matrix(create(&path)?, "affinity", a))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Rows `t, channel scores..., global` for the timesteps in `span`.
pub fn write_scores<W: Write>(
    mut out: W,
    scores: &ScoreSet,
    names: &[String],
    span: Range<usize>,
) -> std::io::Result<()> {
    writeln!(out, "# darts-scores v1 first_scored={}", scores.first_scored)?;
    writeln!(out, "t,{},global", names.join(","))?;
    for t in span {
        write!(out, "{t}")?;
        for v in scores.row(t) {
            write!(out, ",{v:e}")?;
        }
        writeln!(out, ",{:e}", scores.global[t])?;
    }
    out.flush()
}

pub fn save_scores(path: &Path, scores: &ScoreSet, names: &[String]) -> Result<()> {
    finish(path, write_scores(create(path)?, scores, names, 0..scores.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsFile {
    pub format: String,
    pub mode: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub scored_timesteps: usize,
}

impl MetricsFile {
    pub fn new(report: &AnomalyReport, mode: &str) -> Self {
        let Metrics { precision, recall, f1 } = report.metrics;
        Self {
            format: "darts-metrics v1".into(),
            mode: mode.into(),
            threshold: report.threshold,
            precision,
            recall,
            f1,
            scored_timesteps: report.decisions.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct serializes");
        std::fs::write(path, text + "\n").map_err(|e| DartsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DartsError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DartsError::format(path.display().to_string(), e.to_string()))
    }
}

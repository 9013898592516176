//! Run artifacts: metrics JSONL, team traces and intention CSV dumps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::{train_until, MetricsRecord, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEAM_TRACE_FILE: &str = "team_trace.jsonl";
pub const INTENTIONS_FILE: &str = "intentions.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

/// One intention vector tagged with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionRow {
    pub episode: usize,
    pub t: usize,
    /// Agent id for individual intentions, team index for team intentions.
    pub id: usize,
    pub values: Vec<f64>,
}

/// Intentions captured while dumps are enabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentionDump {
    pub dim: usize,
    pub individual: Vec<IntentionRow>,
    pub team: Vec<IntentionRow>,
}

impl IntentionDump {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            individual: Vec::new(),
            team: Vec::new(),
        }
    }

    pub fn extend(&mut self, other: IntentionDump) {
        self.individual.extend(other.individual);
        self.team.extend(other.team);
    }
}

/// Appends metrics to a JSONL sink, one flushed line per record.
pub struct MetricsWriter<W: Write> {
    sink: W,
    path: PathBuf,
    last_episode: Option<usize>,
    bytes: usize,
}

impl MetricsWriter<BufWriter<File>> {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufWriter::new(f), path))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, path: &Path) -> Self {
        Self {
            sink,
            path: path.to_path_buf(),
            last_episode: None,
            bytes: 0,
        }
    }

    /// Writes one record; episode indices must strictly increase.
    pub fn write(&mut self, record: &MetricsRecord) -> Result<usize> {
        if self.last_episode.is_some_and(|e| record.episode <= e) {
            return Err(Error::usage(format!(
                "metrics episode {} after {}",
                record.episode,
                self.last_episode.unwrap_or_default()
            )));
        }
        let mut line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        self.sink
            .write_all(line.as_bytes())
            .and_then(|_| self.sink.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_episode = Some(record.episode);
        self.bytes += line.len();
        Ok(line.len())
    }

    pub fn bytes_written(&self) -> usize {
        self.bytes
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

/// Writes every record to `sink`; returns the bytes written.
pub fn emit_metrics_jsonl<W: Write>(records: &[MetricsRecord], sink: W, path: &Path) -> Result<usize> {
    let mut w = MetricsWriter::new(sink, path);
    for r in records {
        w.write(r)?;
    }
    Ok(w.bytes_written())
}

/// Parses a metrics JSONL stream.
pub fn read_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

/// CSV text with a header and one row per intention; values use the
/// shortest representation that parses back to the same `f64`.
pub fn intention_csv(rows: &[IntentionRow], dim: usize) -> Result<String> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["episode".to_string(), "t".to_string(), "id".to_string()];
    header.extend((0..dim).map(|d| format!("v{d}")));
    w.write_record(&header).map_err(fmt)?;
    for r in rows {
        if r.values.len() != dim {
            return Err(Error::usage(format!(
                "intention row of width {} in a dump of width {dim}",
                r.values.len()
            )));
        }
        let mut rec = vec![r.episode.to_string(), r.t.to_string(), r.id.to_string()];
        rec.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_intention_csv(text: &str) -> Result<Vec<IntentionRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let width = r.headers().map_err(|e| Error::Format(e.to_string()))?.len();
    if width < 3 {
        return Err(Error::Format("intention CSV header too short".into()));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let bad = |e: String| Error::Format(format!("row {}: {e}", i + 1));
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(IntentionRow {
                episode: int(&rec[0])?,
                t: int(&rec[1])?,
                id: int(&rec[2])?,
                values: rec
                    .iter()
                    .skip(3)
                    .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Writes `individual.csv` and `team.csv` under `dir`; returns the number of
/// data rows written.
pub fn dump_intentions_csv(dump: Option<&IntentionDump>, dir: &Path) -> Result<usize> {
    let dump = dump.ok_or_else(|| Error::usage("no data: intention dumps were not enabled for this run"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, rows) in [("individual.csv", &dump.individual), ("team.csv", &dump.team)] {
        let path = dir.join(name);
        fs::write(&path, intention_csv(rows, dump.dim)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(dump.individual.len() + dump.team.len())
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the intention dump a run left in `dir`. A run without dumps
/// yields a "no data" usage error.
pub fn load_intention_dump(dir: &Path) -> Result<IntentionDump> {
    let path = dir.join(INTENTIONS_FILE);
    if !path.exists() {
        return Err(Error::usage(format!(
            "no data: {} has no intention dump; train with intention dumps enabled",
            dir.display()
        )));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    bincode::deserialize(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Trains into `out`: metrics and team traces are appended per episode,
/// periodic and final checkpoints are written, and the intention dump is
/// saved at the end. With `resume` the run continues from that checkpoint
/// and `config` only supplies the target episode count.
pub fn run_to_dir(config: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(ckpt) => Trainer::load_checkpoint(ckpt)?,
        None => {
            if metrics_path.exists() {
                return Err(Error::io(
                    &metrics_path,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "a run already exists here; resume it or choose another directory",
                    ),
                ));
            }
            Trainer::new(config)?
        }
    };
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, trainer.config().to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut metrics = MetricsWriter::append(&metrics_path)?;
    let trace_path = out.join(TEAM_TRACE_FILE);
    let every = trainer.config().run.checkpoint_every;
    let mut dump: Option<IntentionDump> = match resume {
        Some(_) if out.join(INTENTIONS_FILE).exists() => Some(load_intention_dump(out)?),
        _ => None,
    };
    train_until(&mut trainer, config.algo.episodes, |t, o| {
        metrics.write(&o.metrics)?;
        append_lines(&trace_path, &o.team_traces)?;
        if let Some(d) = &o.intentions {
            dump.get_or_insert_with(|| IntentionDump::new(d.dim)).extend(d.clone());
        }
        if every > 0 && t.episode() % every == 0 {
            t.save_checkpoint(&out.join(format!("checkpoint-ep{}.bin", t.episode())))?;
        }
        Ok(())
    })?;
    if trainer.config().run.dump_intentions {
        let d = dump.unwrap_or_else(|| IntentionDump::new(trainer.config().algo.intention_dim));
        let path = out.join(INTENTIONS_FILE);
        let bytes = bincode::serialize(&d).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    trainer.save_checkpoint(&out.join(CHECKPOINT_FILE))?;
    Ok(trainer)
}

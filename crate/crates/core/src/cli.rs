//! The `kstt` command line.
//!
//! Settings are layered: defaults, then `--config`, then `--set` lines,
//! then the dedicated flags. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{load_attributes, load_sessions, session_items, write_attributes, write_sessions, AttributeMap, Click, Session};
use crate::error::{KsttError, Result};
use crate::eval::{evaluate, MetricReport};
use crate::pipeline::{prepare, Prepared};
use crate::synth::{generate, CorpusKind, SynthConfig};
use crate::training::{train, EpochRecord, Kstt};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kstt", version, about = "Session-based next-item recommendation over a knowledge graph")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sessions CSV; overrides sessions_path.
    #[arg(long, global = true)]
    sessions: Option<PathBuf>,
    /// Attributes CSV; overrides attributes_path.
    #[arg(long, global = true)]
    attributes: Option<PathBuf>,
    /// Random seed; overrides seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ranking cutoff; overrides k.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest the data, build the graph over the training split, dump triplets as TSV.
    BuildKg {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the training split; writes the epoch log and checkpoints.
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Epoch log destination (stdout by default).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report as TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the catalog for one session read as `item_id,timestamp` lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Session file (stdin by default).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Prediction time in epoch seconds (defaults to the last click).
        #[arg(long)]
        at: Option<i64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus as sessions.csv and attributes.csv.
    GenSynth {
        /// markov, temporal or knowledge.
        #[arg(long)]
        kind: CorpusKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process streams, injectable for tests.
pub struct Streams<'a> {
    pub stdin: &'a mut dyn Read,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, io: &mut Streams<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { io.stderr } else { io.stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match execute(cli, io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &KsttError) -> i32 {
    if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| KsttError::io(path, e))?,
        None => String::new(),
    };
    for kv in &cli.overrides {
        if !kv.contains('=') {
            return Err(KsttError::Config(format!("--set expects KEY=VALUE, got {kv:?}")));
        }
        text.push('\n');
        text.push_str(kv);
    }
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(p) = &cli.sessions {
        cfg.sessions_path = Some(p.clone());
    }
    if let Some(p) = &cli.attributes {
        cfg.attributes_path = Some(p.clone());
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, io: &mut Streams<'_>) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::BuildKg { out } => {
            let p = load_prepared(&cfg, io)?;
            emit(out.as_deref(), io, |w| w.write_all(p.graph.to_tsv().as_bytes()))
        }
        Command::Train { checkpoint, out } => run_train(&cfg, &checkpoint, out.as_deref(), io),
        Command::Eval { checkpoint, out } => {
            let p = load_prepared(&cfg, io)?;
            if p.test_samples.is_empty() {
                return Err(KsttError::Ingestion("the held-out split has no usable samples".into()));
            }
            let model = load_model(&cfg, &p, &checkpoint)?;
            let report = evaluate(&model.scorer()?, &p.test_samples, cfg.k)?;
            writeln!(io.stdout, "{report}").map_err(stdout_err)?;
            if let Some(path) = out {
                let text = format!("{}\n{}\n", MetricReport::TSV_HEADER, report.to_tsv());
                fs::write(&path, text).map_err(|e| KsttError::io(&path, e))?;
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            input,
            at,
            out,
        } => {
            let clicks = match &input {
                Some(path) => {
                    let bytes = fs::read(path).map_err(|e| KsttError::io(path, e))?;
                    parse_query(&bytes, &path.display().to_string())?
                }
                None => {
                    let mut bytes = Vec::new();
                    io.stdin
                        .read_to_end(&mut bytes)
                        .map_err(|e| KsttError::io("<stdin>", e))?;
                    parse_query(&bytes, "<stdin>")?
                }
            };
            let t_hat = at.unwrap_or_else(|| clicks.last().map_or(0, |c| c.timestamp));
            let p = load_prepared(&cfg, io)?;
            let model = load_model(&cfg, &p, &checkpoint)?;
            let ranked = model.predict(&clicks, t_hat)?;
            emit(out.as_deref(), io, |w| {
                for (item, prob) in ranked.iter().take(cfg.k) {
                    writeln!(w, "{item}\t{prob:.6}")?;
                }
                Ok(())
            })
        }
        Command::GenSynth { kind, out } => {
            let corpus = generate(kind, &SynthConfig::defaults(kind), cfg.train.seed);
            fs::create_dir_all(&out).map_err(|e| KsttError::io(&out, e))?;
            write_file(&out.join("sessions.csv"), |w| write_sessions(w, &corpus.sessions))?;
            write_file(&out.join("attributes.csv"), |w| write_attributes(w, &corpus.attributes))?;
            let _ = writeln!(
                io.stderr,
                "{kind}: {} sessions written to {}",
                corpus.sessions.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn run_train(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>, io: &mut Streams<'_>) -> Result<()> {
    let p = load_prepared(cfg, io)?;
    if p.train_samples.is_empty() {
        return Err(KsttError::Ingestion("the training split has no prefix samples".into()));
    }
    let mut model = Kstt::new(p.graph.clone(), cfg.model.clone(), cfg.train.seed)?;
    let _ = writeln!(
        io.stderr,
        "training on {} samples, {} items, {} entities, {} triplets",
        p.train_samples.len(),
        model.num_items(),
        model.graph.num_entities(),
        model.graph.triplets().len()
    );
    let (mut log, log_name): (Box<dyn Write + '_>, String) = match out {
        Some(path) => (
            Box::new(BufWriter::new(File::create(path).map_err(|e| KsttError::io(path, e))?)),
            path.display().to_string(),
        ),
        None => (Box::new(&mut *io.stdout), "<stdout>".into()),
    };
    let log_err = |e| KsttError::io(&log_name, e);
    writeln!(log, "{}", EpochRecord::TSV_HEADER).map_err(log_err)?;
    let every = cfg.checkpoint_every;
    train(&mut model, &p.train_samples, &cfg.train, |record, m| {
        writeln!(log, "{}", record.to_tsv()).and_then(|_| log.flush()).map_err(log_err)?;
        if every > 0 && record.epoch % every == 0 {
            m.save(&periodic_path(checkpoint, record.epoch))?;
        }
        Ok(())
    })?;
    drop(log);
    model.save(checkpoint)?;
    let _ = writeln!(io.stderr, "checkpoint written to {}", checkpoint.display());
    Ok(())
}

/// Where the epoch-`epoch` checkpoint of a run saving to `base` goes.
pub fn periodic_path(base: &Path, epoch: usize) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(format!(".epoch{epoch}"));
    PathBuf::from(name)
}

fn load_data(cfg: &RunConfig, io: &mut Streams<'_>) -> Result<(Vec<Session>, AttributeMap)> {
    let path = cfg
        .sessions_path
        .as_ref()
        .ok_or_else(|| KsttError::Config("no sessions file: set sessions_path or pass --sessions".into()))?;
    let (sessions, summary) = load_sessions(path)?;
    let _ = writeln!(
        io.stderr,
        "{}: {} rows, {} sessions kept, {} too short, {} truncated",
        path.display(),
        summary.rows,
        summary.sessions_kept,
        summary.sessions_dropped_short,
        summary.sessions_truncated
    );
    let attributes = match &cfg.attributes_path {
        Some(apath) => {
            let (map, s) = load_attributes(apath, Some(&session_items(&sessions)))?;
            let _ = writeln!(
                io.stderr,
                "{}: {} rows, {} duplicates, {} for unknown items",
                apath.display(),
                s.rows,
                s.duplicates,
                s.dropped_unknown_item
            );
            map
        }
        None => AttributeMap::new(),
    };
    Ok((sessions, attributes))
}

fn load_prepared(cfg: &RunConfig, io: &mut Streams<'_>) -> Result<Prepared> {
    let (sessions, attributes) = load_data(cfg, io)?;
    if sessions.is_empty() {
        return Err(KsttError::Ingestion("no sessions with at least two clicks".into()));
    }
    prepare(&sessions, &attributes, cfg.test_fraction, cfg.use_attributes)
}

fn load_model(cfg: &RunConfig, p: &Prepared, checkpoint: &Path) -> Result<Kstt> {
    let mut model = Kstt::new(p.graph.clone(), cfg.model.clone(), cfg.train.seed)?;
    model.load(checkpoint)?;
    Ok(model)
}

/// Parses `item_id,timestamp` lines; a leading header line is optional.
pub fn parse_query(bytes: &[u8], source: &str) -> Result<Vec<Click>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut clicks = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| KsttError::Ingestion(format!("{source}: malformed row: {e}")))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        let fields: Vec<&str> = rec.iter().map(str::trim).collect();
        if i == 0 && fields == ["item_id", "timestamp"] {
            continue;
        }
        let [item, ts] = fields[..] else {
            return Err(KsttError::Ingestion(format!(
                "{source} line {line}: expected item_id,timestamp"
            )));
        };
        let ts = ts
            .parse()
            .map_err(|_| KsttError::Ingestion(format!("{source} line {line}: timestamp {ts:?} is not an integer")))?;
        clicks.push(Click::new(item, ts));
    }
    if clicks.is_empty() {
        return Err(KsttError::Ingestion(format!("{source}: no clicks to predict from")));
    }
    clicks.sort_by_key(|c| c.timestamp);
    Ok(clicks)
}

fn stdout_err(e: std::io::Error) -> KsttError {
    KsttError::io("<stdout>", e)
}

fn emit(
    out: Option<&Path>,
    io: &mut Streams<'_>,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    match out {
        Some(path) => write_file(path, |w| body(w)),
        None => body(io.stdout).map_err(stdout_err),
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| KsttError::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| KsttError::io(path, e))
}

//! Command-line front end of `tagnio-bench`.

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use clap::{Parser, ValueEnum};

use crate::bench::{
    self, BenchError, BenchServer, BenchmarkConfig, Mode, Role, RunResult, Summary,
};
use crate::channel::{ChannelConfig, Provider};
use crate::transport::Backend;

pub const MAX_CONNECTIONS: usize = 1024;

pub const CSV_HEADER: [&str; 16] = [
    "mode",
    "backend",
    "connections",
    "message_size",
    "message_count",
    "flush_interval",
    "run_index",
    "elapsed_s",
    "bytes_total",
    "ops_total",
    "throughput_MBps",
    "ops_per_s",
    "rtt_mean_us",
    "rtt_p50_us",
    "rtt_p99_us",
    "rtt_p999_us",
];

/// Connection count or inclusive sweep `A..B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sweep {
    pub min: usize,
    pub max: usize,
}

impl Sweep {
    pub fn counts(self) -> std::ops::RangeInclusive<usize> {
        self.min..=self.max
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.min == self.max {
            write!(f, "{}", self.min)
        } else {
            write!(f, "{}..{}", self.min, self.max)
        }
    }
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{s}` is not a count or a range A..B"))
        };
        match s.split_once("..") {
            Some((a, b)) => Ok(Sweep {
                min: num(a)?,
                max: num(b)?,
            }),
            None => {
                let n = num(s)?;
                Ok(Sweep { min: n, max: n })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Loopback,
    Stream,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Loopback => Backend::Loopback,
            BackendArg::Stream => Backend::Stream,
        }
    }
}

/// Two-sided channel benchmark.
///
/// Start the server role first, then the client with the same parameters.
/// With `--backend loopback` both roles run inside one process.
#[derive(Debug, Clone, Parser)]
#[command(name = "tagnio-bench", version)]
pub struct RawArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long, value_enum)]
    pub role: Role,
    #[arg(long, default_value = "127.0.0.1")]
    pub address: String,
    #[arg(long, default_value_t = 2998)]
    pub port: u16,
    #[arg(long, value_enum, default_value = "stream")]
    pub backend: BackendArg,
    /// Connection count, or a sweep A..B.
    #[arg(long, default_value = "1")]
    pub connections: Sweep,
    /// Message size in bytes.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Timed messages per connection; a tenth more is sent as warmup.
    #[arg(long, default_value_t = 100_000)]
    pub count: u64,
    /// Messages per flush (throughput mode). Defaults to 64.
    #[arg(long)]
    pub flush: Option<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    pub runs: usize,
    /// CSV or report file; standard output if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Seconds without progress before a run fails.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliArgs {
    pub config: BenchmarkConfig,
    pub sweep: Sweep,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError {
    pub problems: Vec<String>,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for UsageError {}

pub const DEFAULT_FLUSH: usize = 64;

/// Parses and validates `argv` (including the program name).
pub fn parse<I, T>(argv: I) -> Result<CliArgs, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let raw = RawArgs::try_parse_from(argv).map_err(|e| UsageError {
        problems: vec![e.render().to_string().trim_end().to_string()],
    })?;
    validate(raw)
}

pub fn validate(raw: RawArgs) -> Result<CliArgs, UsageError> {
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    let sweep = raw.connections;
    if !(1 <= sweep.min && sweep.min <= sweep.max && sweep.max <= MAX_CONNECTIONS) {
        problems.push(format!(
            "--connections {sweep}: need 1 <= min <= max <= {MAX_CONNECTIONS}"
        ));
    }
    if raw.size == 0 {
        problems.push("--size must be at least 1".to_string());
    }
    if raw.count == 0 {
        problems.push("--count must be at least 1".to_string());
    }
    if raw.runs == 0 {
        problems.push("--runs must be at least 1".to_string());
    }
    if raw.timeout == 0 {
        problems.push("--timeout must be at least 1".to_string());
    }
    let flush = match (raw.mode, raw.flush) {
        (Mode::Latency, Some(_)) => {
            warnings.push("--flush has no effect in latency mode and is ignored".to_string());
            DEFAULT_FLUSH
        }
        (_, Some(0)) => {
            problems.push("--flush must be at least 1".to_string());
            DEFAULT_FLUSH
        }
        (_, Some(n)) => n,
        (_, None) => DEFAULT_FLUSH,
    };
    if !problems.is_empty() {
        return Err(UsageError { problems });
    }
    let backend = Backend::from(raw.backend);
    let address = match backend {
        Backend::Stream => format!("{}:{}", raw.address, raw.port),
        Backend::Loopback => raw.address.clone(),
    };
    Ok(CliArgs {
        config: BenchmarkConfig {
            mode: raw.mode,
            role: raw.role,
            address,
            connections: sweep.min,
            message_size: raw.size,
            message_count: raw.count,
            flush_interval: flush,
            runs: raw.runs,
            backend,
            timeout: Duration::from_secs(raw.timeout),
        },
        sweep,
        output: raw.output,
        format: raw.format,
        warnings,
    })
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub mode: Mode,
    pub backend: Backend,
    pub connections: usize,
    pub message_size: usize,
    pub message_count: u64,
    pub flush_interval: usize,
    pub run_index: usize,
    pub elapsed_s: f64,
    pub bytes_total: u64,
    pub ops_total: u64,
    pub throughput_mbps: f64,
    pub ops_per_s: f64,
    pub rtt: Option<bench::LatencyStats>,
}

impl Row {
    pub fn new(cfg: &BenchmarkConfig, run_index: usize, result: &RunResult) -> Self {
        Self {
            mode: cfg.mode,
            backend: cfg.backend,
            connections: cfg.connections,
            message_size: cfg.message_size,
            message_count: cfg.message_count,
            flush_interval: cfg.flush_interval,
            run_index,
            elapsed_s: result.elapsed().as_secs_f64(),
            bytes_total: result.bytes_total(),
            ops_total: result.ops_total(),
            throughput_mbps: result.throughput_mbps(),
            ops_per_s: result.ops_per_s(),
            rtt: result.latency(),
        }
    }

    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        vec![
            self.mode.to_string(),
            self.backend.to_string(),
            self.connections.to_string(),
            self.message_size.to_string(),
            self.message_count.to_string(),
            self.flush_interval.to_string(),
            self.run_index.to_string(),
            format!("{:.6}", self.elapsed_s),
            self.bytes_total.to_string(),
            self.ops_total.to_string(),
            format!("{:.3}", self.throughput_mbps),
            format!("{:.1}", self.ops_per_s),
            opt(self.rtt.map(|r| r.mean_us)),
            opt(self.rtt.map(|r| r.p50_us)),
            opt(self.rtt.map(|r| r.p99_us)),
            opt(self.rtt.map(|r| r.p999_us)),
        ]
    }
}

/// Writes rows as they complete; CSV header exactly once.
pub struct Sink {
    format: Format,
    csv: Option<csv::Writer<Box<dyn Write>>>,
    out: Option<Box<dyn Write>>,
}

impl Sink {
    pub fn new(format: Format, out: Box<dyn Write>) -> io::Result<Self> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(CSV_HEADER)?;
                w.flush()?;
                Ok(Self {
                    format,
                    csv: Some(w),
                    out: None,
                })
            }
            Format::Human => Ok(Self {
                format,
                csv: None,
                out: Some(out),
            }),
        }
    }

    pub fn row(&mut self, row: &Row) -> io::Result<()> {
        match self.format {
            Format::Csv => {
                let w = self.csv.as_mut().expect("csv sink");
                w.write_record(row.record())?;
                w.flush()
            }
            Format::Human => {
                let w = self.out.as_mut().expect("human sink");
                write!(
                    w,
                    "{} {} conns={} size={} run={} elapsed={:.3}s {:.3} MB/s {:.0} ops/s",
                    row.mode,
                    row.backend,
                    row.connections,
                    row.message_size,
                    row.run_index,
                    row.elapsed_s,
                    row.throughput_mbps,
                    row.ops_per_s
                )?;
                if let Some(r) = row.rtt {
                    write!(
                        w,
                        " rtt mean={:.2}us p50={:.2}us p99={:.2}us p999={:.2}us",
                        r.mean_us, r.p50_us, r.p99_us, r.p999_us
                    )?;
                }
                writeln!(w)?;
                w.flush()
            }
        }
    }

    /// Mean and deviation over the runs of one connection count (human only).
    pub fn summary(&mut self, connections: usize, results: &[RunResult]) -> io::Result<()> {
        let Some(w) = self.out.as_mut() else {
            return Ok(());
        };
        let Ok(s) = bench::aggregate_runs(results) else {
            return Ok(());
        };
        write!(
            w,
            "  conns={connections}: {:.3} ± {:.3} MB/s, {:.0} ± {:.0} ops/s",
            s.throughput_mbps.mean, s.throughput_mbps.stddev, s.ops_per_s.mean, s.ops_per_s.stddev
        )?;
        if let Some(Summary { mean, stddev, .. }) = s.rtt_mean_us {
            write!(w, ", rtt {mean:.2} ± {stddev:.2} us")?;
        }
        writeln!(w)?;
        w.flush()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("connections={connections} run={run}: {source}")]
    Run {
        connections: usize,
        run: usize,
        #[source]
        source: BenchError,
    },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
    #[error("output: {0}")]
    Io(#[from] io::Error),
}

/// Runs every (connection count, run) pair and streams rows into `sink`.
pub fn run_sweep(args: &CliArgs, sink: &mut Sink) -> Result<usize, SweepError> {
    let provider = Provider::new(args.config.backend, ChannelConfig::from_env()?)?;
    run_sweep_with(&provider, args, sink)
}

pub fn run_sweep_with(
    provider: &Provider,
    args: &CliArgs,
    sink: &mut Sink,
) -> Result<usize, SweepError> {
    let base = &args.config;
    let in_process = base.backend == Backend::Loopback;
    let server = if in_process || base.role == Role::Server {
        Some(BenchServer::bind(provider, &base.address)?)
    } else {
        None
    };
    let mut rows = 0;
    for connections in args.sweep.counts() {
        let cfg = BenchmarkConfig {
            connections,
            ..base.clone()
        };
        let mut results = Vec::with_capacity(cfg.runs);
        for run in 0..cfg.runs {
            let outcome = match (&server, in_process, cfg.role) {
                (Some(s), true, _) => bench::run_pair_with(provider, s, &cfg).map(|p| p.server),
                (Some(s), false, _) => s.run(&cfg),
                (None, _, _) => bench::run_client(provider, &cfg),
            };
            let result = outcome.map_err(|source| SweepError::Run {
                connections,
                run,
                source,
            })?;
            sink.row(&Row::new(&cfg, run, &result))?;
            rows += 1;
            results.push(result);
        }
        sink.summary(connections, &results)?;
    }
    if let Some(s) = server {
        s.close()?;
    }
    Ok(rows)
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match parse(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    for w in &args.warnings {
        eprintln!("warning: {w}");
    }
    let out: Box<dyn Write> = match &args.output {
        Some(path) => match File::create(path) {
            Ok(f) => Box::new(io::BufWriter::new(f)),
            Err(e) => {
                eprintln!("cannot create {}: {e}", path.display());
                return 1;
            }
        },
        None => Box::new(io::stdout()),
    };
    let mut sink = match Sink::new(args.format, out) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("output: {e}");
            return 1;
        }
    };
    match run_sweep(&args, &mut sink) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("tagnio-bench: {e}");
            1
        }
    }
}

//! `negpos` command-line front end.
//!
//! [`run`] takes the argument vector and output streams so the whole CLI can
//! be driven from tests without spawning a process.

mod params;

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use negpos_core::attack::protocol::serve;
use negpos_core::attack::{
    evaluate_key_protocol, make_external_oracle, make_synthetic_oracle, swap_attack, AttackError, AttackOptions,
    Endpoint, Oracle, SyntheticAccuracy, SyntheticOracleParams,
};
use negpos_core::codec::OutputFormat;
use negpos_core::pipeline::{transform_dataset, verify_manifest, EntryStatus, Manifest, PipelineOptions, MANIFEST_FILE};
use negpos_core::{
    generate_key, hamming_distance, key_space, parse_key, random_incorrect_key, serialize_key, CropMode, Key, KeyError,
};

pub use params::OracleParamsFile;

/// Environment variable holding the default `transform` worker count.
pub const WORKERS_ENV: &str = "NEGPOS_WORKERS";

const AFTER_HELP: &str = "\
Key bit order: bit k covers intra-block position k = ch*M*M + row*M + col
(zero-based; channel-major, then row, then column). The same key is applied
to every M x M block; a set bit inverts that sample (s -> 255 - s).

Key file format version 1: \"NPKY\" | 0x01 | channels | block size | 0x00 |
bits packed MSB-first, zero-padded | first 4 bytes of SHA-256 of all
preceding bytes.

The transform is its own inverse: running `transform` again with the same key
restores the original images.

Errors are reported on stderr as one line starting with \"error:\". Exit
status is 2 for usage errors and 1 for operational failures.";

#[derive(Debug, Parser)]
#[command(name = "negpos", version, about = "Keyed block-wise negative/positive image transformation", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a secret key file.
    Keygen {
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        block_size: usize,
        /// Hex seed for reproducible keys. Never use for production keys.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact number of keys for a shape.
    Keyspace {
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        block_size: usize,
    },
    /// Transform (or, with the same key, restore) every image in a directory tree.
    Transform {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Worker threads [default: $NEGPOS_WORKERS or the number of CPUs]
        #[arg(long)]
        workers: Option<usize>,
        /// Crop non-divisible images instead of failing.
        #[arg(long, value_enum)]
        crop: Option<CropArg>,
        #[arg(long, value_enum, default_value_t = FormatArg::Png)]
        format: FormatArg,
    },
    /// Check an output tree against its manifest.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
    },
    /// Run the pairwise-swap key-estimation attack against an oracle.
    Attack {
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 100)]
        max_passes: usize,
        /// Starting key; a fresh random key by default.
        #[arg(long)]
        init_key: Option<PathBuf>,
        /// Hex seed for the random starting key.
        #[arg(long)]
        seed: Option<String>,
        /// Also try single-bit flips in each pass (not part of the swap attack).
        #[arg(long)]
        allow_flips: bool,
        #[arg(long)]
        trace_out: PathBuf,
    },
    /// Score the correct key, a random incorrect key and plain images.
    EvalProtocol {
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        key: PathBuf,
        /// Hex seed for the incorrect key.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Hamming distance between two key files.
    Distance {
        #[arg(long)]
        key_a: PathBuf,
        #[arg(long)]
        key_b: PathBuf,
    },
    /// Serve a synthetic oracle over stdio or TCP.
    ServeOracle {
        #[arg(long)]
        oracle_params: PathBuf,
        /// HOST:PORT to listen on; stdio when omitted.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// `synthetic`, `exec CMD` or `tcp HOST:PORT`.
    #[arg(long)]
    oracle: String,
    /// JSON parameters for the synthetic oracle.
    #[arg(long)]
    oracle_params: Option<PathBuf>,
    /// Key shape for external oracles when no key file fixes it.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Seconds to wait for each external reply.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CropArg {
    Center,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Png,
    Ppm,
}

enum Failure {
    Usage(String),
    Op(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Op(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the CLI and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error:").trim();
            let _ = writeln!(err, "error: usage: {}", one_line(first));
            return 2;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: usage: {}", one_line(&msg));
            2
        }
        Err(Failure::Op(msg)) => {
            let _ = writeln!(err, "error: {}", one_line(&msg));
            1
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Keygen { channels, block_size, seed, out: path } => keygen(channels, block_size, seed, &path, out),
        Command::Keyspace { channels, block_size } => {
            let space = key_space(channels, block_size).map_err(usage_if_parameter)?;
            writeln!(out, "2^{} = {space}", channels * block_size * block_size)?;
            Ok(())
        }
        Command::Transform { key, input, output, workers, crop, format } => {
            transform(&key, &input, &output, workers, crop, format, out)
        }
        Command::Verify { manifest, root } => verify(&manifest, &root, out),
        Command::Attack { oracle, budget, max_passes, init_key, seed, allow_flips, trace_out } => attack(
            &oracle,
            budget,
            AttackOptions { max_passes, allow_flips },
            init_key.as_deref(),
            seed,
            &trace_out,
            out,
        ),
        Command::EvalProtocol { oracle, key, seed } => eval_protocol(&oracle, &key, seed, out),
        Command::Distance { key_a, key_b } => {
            let d = hamming_distance(&read_key(&key_a)?, &read_key(&key_b)?)?;
            writeln!(out, "{d}")?;
            Ok(())
        }
        Command::ServeOracle { oracle_params, listen } => serve_oracle(&oracle_params, listen.as_deref()),
    }
}

fn usage_if_parameter(e: KeyError) -> Failure {
    match e {
        KeyError::Parameter(msg) => Failure::Usage(msg),
        other => Failure::Op(other.to_string()),
    }
}

fn decode_seed(seed: Option<String>) -> Result<Option<Vec<u8>>, Failure> {
    seed.map(|s| hex::decode(s.trim()).map_err(|e| Failure::Usage(format!("--seed must be hex: {e}"))))
        .transpose()
}

fn read_key(path: &Path) -> Result<Key, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Op(format!("{}: {e}", path.display())))?;
    parse_key(&bytes).map_err(|e| Failure::Op(format!("{}: {e}", path.display())))
}

fn write_secret(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)?.write_all(bytes)
}

fn keygen(channels: usize, block_size: usize, seed: Option<String>, path: &Path, out: &mut dyn Write) -> CmdResult {
    let seed = decode_seed(seed)?;
    let key = generate_key(channels, block_size, seed.as_deref()).map_err(usage_if_parameter)?;
    write_secret(path, &serialize_key(&key)).map_err(|e| Failure::Op(format!("{}: {e}", path.display())))?;
    writeln!(out, "wrote {}-bit key to {}", key.len(), path.display())?;
    writeln!(out, "fingerprint {}", key.fingerprint())?;
    Ok(())
}

fn default_workers() -> Result<usize, Failure> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{WORKERS_ENV}={v:?} is not a worker count"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn transform(
    key_path: &Path,
    input: &Path,
    output: &Path,
    workers: Option<usize>,
    crop: Option<CropArg>,
    format: FormatArg,
    out: &mut dyn Write,
) -> CmdResult {
    let worker_count = match workers {
        Some(n) => n,
        None => default_workers()?,
    };
    if worker_count == 0 {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    let key = read_key(key_path)?;
    let options = PipelineOptions {
        block_size: key.block_size(),
        crop_mode: match crop {
            Some(CropArg::Center) => CropMode::CenterCrop,
            None => CropMode::Error,
        },
        worker_count,
        output_format: match format {
            FormatArg::Png => OutputFormat::Png,
            FormatArg::Ppm => OutputFormat::Ppm,
        },
    };
    let manifest = transform_dataset(input, output, &key, &options)?;
    writeln!(out, "transformed {} images into {}", manifest.entries.len(), output.display())?;
    writeln!(out, "manifest {}", output.join(MANIFEST_FILE).display())?;
    Ok(())
}

fn verify(manifest_path: &Path, root: &Path, out: &mut dyn Write) -> CmdResult {
    let manifest = Manifest::read(manifest_path)?;
    let report = verify_manifest(root, &manifest);
    for (path, status) in &report.entries {
        match status {
            EntryStatus::Ok => writeln!(out, "ok {path}")?,
            EntryStatus::Missing => writeln!(out, "missing {path}")?,
            EntryStatus::Modified => writeln!(out, "modified {path}")?,
            EntryStatus::Unreadable(msg) => writeln!(out, "unreadable {path}: {msg}")?,
        }
    }
    let ok = report.count(&EntryStatus::Ok);
    writeln!(out, "verified {ok}/{} entries", report.entries.len())?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Op(format!("{} of {} entries failed verification", report.entries.len() - ok, report.entries.len())))
    }
}

/// An oracle plus the synthetic law behind it, when there is one.
struct OpenedOracle {
    oracle: Oracle,
    truth: Option<Key>,
}

fn open_oracle(args: &OracleArgs, shape_hint: Option<(usize, usize)>, budget: Option<usize>) -> Result<OpenedOracle, Failure> {
    if budget == Some(0) {
        return Err(Failure::Usage("--budget must be at least 1".into()));
    }
    if args.oracle.trim() == "synthetic" {
        let path = args
            .oracle_params
            .as_deref()
            .ok_or_else(|| Failure::Usage("--oracle synthetic requires --oracle-params".into()))?;
        let params = OracleParamsFile::load(path)?;
        let truth = params.true_key.clone();
        return Ok(OpenedOracle { oracle: make_synthetic_oracle(params, budget)?, truth: Some(truth) });
    }
    let endpoint = Endpoint::parse(&args.oracle).map_err(|e| Failure::Usage(e.to_string()))?;
    let (channels, block_size) = match (args.channels, args.block_size, shape_hint) {
        (Some(c), Some(m), _) => (c, m),
        (None, None, Some(shape)) => shape,
        _ => return Err(Failure::Usage("external oracles need --channels and --block-size or a key file".into())),
    };
    let timeout = Duration::from_secs(args.timeout.max(1));
    let oracle = make_external_oracle(&endpoint, channels, block_size, budget, timeout)?;
    Ok(OpenedOracle { oracle, truth: None })
}

fn attack(
    oracle_args: &OracleArgs,
    budget: Option<usize>,
    options: AttackOptions,
    init_key: Option<&Path>,
    seed: Option<String>,
    trace_out: &Path,
    out: &mut dyn Write,
) -> CmdResult {
    if options.max_passes == 0 {
        return Err(Failure::Usage("--max-passes must be at least 1".into()));
    }
    let seed = decode_seed(seed)?;
    let init = init_key.map(read_key).transpose()?;
    let shape_hint = init.as_ref().map(|k| (k.channels(), k.block_size()));
    let OpenedOracle { mut oracle, truth } = open_oracle(oracle_args, shape_hint, budget)?;
    let initial = match init {
        Some(k) => k,
        None => {
            let (c, m) = oracle.shape();
            generate_key(c, m, seed.as_deref())?
        }
    };

    match swap_attack(&mut oracle, &initial, options) {
        Ok(trace) => {
            fs::write(trace_out, trace.to_jsonl()).map_err(|e| Failure::Op(format!("{}: {e}", trace_out.display())))?;
            writeln!(out, "queries {}", trace.queries.len())?;
            writeln!(out, "accepted {}", trace.accepted_count())?;
            writeln!(out, "passes {}", trace.passes_completed)?;
            writeln!(out, "stop {}", serde_json::to_value(trace.stop_reason)?.as_str().unwrap_or_default())?;
            writeln!(out, "best_accuracy {}", trace.best_accuracy)?;
            writeln!(out, "best_key {}", hex::encode(serialize_key(&trace.best_key)))?;
            if let Some(truth) = truth {
                writeln!(out, "distance_to_true_key {}", hamming_distance(&trace.best_key, &truth)?)?;
            }
            Ok(())
        }
        Err(AttackError::Oracle { query_index, source, partial }) => {
            // keep whatever was observed before the failure
            let _ = fs::write(trace_out, partial.to_jsonl());
            Err(Failure::Op(format!("oracle failed at query {query_index}: {source}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_protocol(oracle_args: &OracleArgs, key_path: &Path, seed: Option<String>, out: &mut dyn Write) -> CmdResult {
    let seed = decode_seed(seed)?;
    let correct = read_key(key_path)?;
    let mut opened = open_oracle(oracle_args, Some((correct.channels(), correct.block_size())), None)?;
    let incorrect = random_incorrect_key(&correct, seed.as_deref());
    let report = evaluate_key_protocol(&mut opened.oracle, &correct, &incorrect)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn serve_oracle(params_path: &Path, listen: Option<&str>) -> CmdResult {
    let params: SyntheticOracleParams = OracleParamsFile::load(params_path)?;
    let shape = Some((params.true_key.channels(), params.true_key.block_size()));
    let scorer = SyntheticAccuracy::new(params)?;
    let score = |k: &Key| scorer.score(k).map_err(|e| e.to_string());
    match listen {
        None => {
            let stdin = io::stdin();
            serve(stdin.lock(), io::stdout(), shape, score)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = BufReader::new(stream.try_clone()?);
                if let Err(e) = serve(reader, stream, shape, score) {
                    eprintln!("session ended: {e}");
                }
            }
        }
    }
    Ok(())
}

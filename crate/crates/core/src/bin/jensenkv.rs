use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use jensenkv::attention::{attend, AttendOptions, AttentionResult, CostCounters, KvCache};
use jensenkv::correction::CorrectionMode;
use jensenkv::diagnostics::DiagnosticsReport;
use jensenkv::harness::experiment::{
    curve_csv, diagnose_runs, histogram_csv, parse_alpha_range, rotation_for, run_reference, sweep,
    total_cost, SCHEMA_VERSION,
};
use jensenkv::harness::suites::{run_oracle_suites, SuiteSettings};
use jensenkv::harness::{generate_workload, TensorFile, Workload, WorkloadConfig};
use jensenkv::{Error, Matrix};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "jensenkv", version, about = "Quantized KV-cache attention with score bias correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Workload config (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["2", "4"])]
    bits: Option<String>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_parser = ["none", "exact", "taylor", "per-channel"])]
    mode: Option<String>,
    /// Force the Hadamard rotation on.
    #[arg(long, conflicts_with = "no_rotate")]
    rotate: bool,
    /// Force the Hadamard rotation off.
    #[arg(long)]
    no_rotate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload directory.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize the cached block of a workload into cache.json.
    Quantize {
        workload: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run attention over a workload and write the output and a report.
    Attend {
        workload: PathBuf,
        /// Directory written by `quantize`; quantizes on the fly when absent.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write weights.jkvt and scores.jkvt (needed by `diagnose`).
        #[arg(long)]
        emit_weights: bool,
    },
    /// Compare attend runs against the full-precision reference.
    Diagnose {
        workload: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte Carlo oracle suites.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the closed-form sample count.
        #[arg(long)]
        samples: Option<usize>,
        /// Exit with status 3 if any suite misses its tolerance.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact vs Taylor per-channel correction as CSV.
    Curve {
        #[arg(long, default_value = "0:5:0.1")]
        alphas: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Storage/quality trade-off over group size, bits and mode.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version
    Version,
}

enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

impl RunArgs {
    fn apply(&self, mut c: WorkloadConfig) -> CliResult<WorkloadConfig> {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = &self.bits {
            c.spec.bits = b.parse().expect("validated by clap");
        }
        if let Some(g) = self.group_size {
            c.spec.group_size = g;
        }
        if let Some(m) = &self.mode {
            c.mode = m.parse().map_err(Failure::from)?;
        }
        if self.rotate {
            c.spec.rotation = true;
        }
        if self.no_rotate {
            c.spec.rotation = false;
        }
        c.validate()?;
        Ok(c)
    }

    fn config(&self) -> CliResult<WorkloadConfig> {
        let base = match &self.config {
            Some(p) => WorkloadConfig::load(p)?,
            None => WorkloadConfig::default(),
        };
        self.apply(base)
    }
}

/// Workload directories carry their own config; run flags may change the
/// spec and mode but not the tensor shapes or seed.
fn load_workload(dir: &Path, run: &RunArgs) -> CliResult<(Workload, WorkloadConfig)> {
    if run.config.is_some() || run.seed.is_some() {
        return Err(Failure::Usage(
            "--config and --seed apply to `gen`; a workload directory carries its own".into(),
        ));
    }
    let workload = Workload::load(dir)?;
    let config = run.apply(workload.config.clone())?;
    Ok((workload, config))
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    schema_version: u32,
    config: WorkloadConfig,
    heads: Vec<KvCache>,
}

#[derive(Serialize, Deserialize)]
struct AttendReport {
    schema_version: u32,
    config: WorkloadConfig,
    mode: CorrectionMode,
    cost: CostCounters,
}

#[derive(Serialize)]
struct RunDiagnostics {
    run: String,
    diagnostics: DiagnosticsReport,
}

#[derive(Serialize)]
struct DiagnoseReport {
    schema_version: u32,
    config: WorkloadConfig,
    runs: Vec<RunDiagnostics>,
    /// Whether every run produced bit-identical current-block scores.
    current_block_identical: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_gen(run: &RunArgs, out: &Path) -> CliResult {
    let config = run.config()?;
    generate_workload(&config)?.save(out)?;
    println!("wrote workload to {}", out.display());
    Ok(())
}

fn cmd_quantize(dir: &Path, run: &RunArgs, out: &Path) -> CliResult {
    let (workload, config) = load_workload(dir, run)?;
    let rotation = rotation_for(&config.spec, config.d)?;
    let heads = workload
        .heads
        .iter()
        .map(|h| h.build_cache(&config, rotation.as_ref()))
        .collect::<jensenkv::Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let storage: u64 = heads
        .iter()
        .flat_map(|c| c.key_blocks())
        .map(|b| match b {
            jensenkv::attention::KeyBlock::Quantized(q) => q.storage_bits(),
            jensenkv::attention::KeyBlock::Passthrough(m) => m.as_slice().len() as u64 * 32,
        })
        .sum();
    write_json(
        &out.join("cache.json"),
        &CacheFile {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            heads,
        },
    )?;
    println!(
        "quantized {} heads x {} tokens; key storage {} bits ({:.4} bits/element)",
        config.heads,
        config.cached,
        storage,
        storage as f64 / (config.heads * config.cached.max(1) * config.d) as f64
    );
    Ok(())
}

fn cmd_attend(dir: &Path, cache: Option<&Path>, run: &RunArgs, out: &Path, emit: bool) -> CliResult {
    let (workload, mut config) = load_workload(dir, run)?;
    let caches = match cache {
        Some(c) => {
            let file: CacheFile = serde_json::from_str(&fs::read_to_string(c.join("cache.json"))?)?;
            if file.heads.len() != workload.heads.len() {
                return Err(Failure::Data("cache head count does not match the workload".into()));
            }
            for h in &file.heads {
                h.validate()?;
            }
            let mode = config.mode;
            config = file.config;
            config.mode = mode;
            file.heads
        }
        None => {
            let rotation = rotation_for(&config.spec, config.d)?;
            workload
                .heads
                .iter()
                .map(|h| h.build_cache(&config, rotation.as_ref()))
                .collect::<jensenkv::Result<Vec<_>>>()?
        }
    };
    let rotation = rotation_for(&config.spec, config.d)?;
    let mut opts = AttendOptions::new(config.mode);
    if emit {
        opts = opts.recording();
    }
    let results = workload
        .heads
        .iter()
        .zip(caches)
        .map(|(h, c)| attend(&h.attention_workload(c), rotation.as_ref(), &opts))
        .collect::<jensenkv::Result<Vec<AttentionResult>>>()?;

    fs::create_dir_all(out)?;
    let stack = |f: fn(&AttentionResult) -> Option<&Matrix>| -> CliResult<TensorFile> {
        let ms: Vec<&Matrix> = results.iter().filter_map(f).collect();
        Ok(TensorFile::from_matrices(&ms)?)
    };
    stack(|r| Some(&r.output))?.write(out.join("output.jkvt"))?;
    if emit {
        stack(|r| r.weights.as_ref())?.write(out.join("weights.jkvt"))?;
        stack(|r| r.scores.as_ref())?.write(out.join("scores.jkvt"))?;
    }
    let cost = total_cost(&results);
    write_json(
        &out.join("report.json"),
        &AttendReport {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            mode: config.mode,
            cost,
        },
    )?;
    println!(
        "mode {}: score_ops {} correction_ops {} (ratio {:.5})",
        config.mode,
        cost.score_ops,
        cost.correction_ops,
        cost.ratio()
    );
    Ok(())
}

fn read_matrices(path: &Path) -> CliResult<Vec<Matrix>> {
    Ok(TensorFile::read(path)?.to_matrices()?)
}

fn cmd_diagnose(dir: &Path, runs: &[PathBuf], out: Option<&Path>) -> CliResult {
    let workload = Workload::load(dir)?;
    let reference = run_reference(&workload)?;
    let split = workload.config.cached;
    let mut reports = Vec::new();
    let mut current_scores: Vec<Vec<f64>> = Vec::new();
    for run in runs {
        let report: AttendReport = serde_json::from_str(&fs::read_to_string(run.join("report.json"))?)?;
        let outputs = read_matrices(&run.join("output.jkvt"))?;
        let weights = read_matrices(&run.join("weights.jkvt"))
            .map_err(|_| Failure::Data(format!("{} has no weights; rerun attend with --emit-weights", run.display())))?;
        let scores = read_matrices(&run.join("scores.jkvt"))?;
        let results: Vec<AttentionResult> = outputs
            .into_iter()
            .zip(weights)
            .map(|(output, w)| AttentionResult {
                output,
                weights: Some(w),
                scores: None,
                cost: CostCounters::default(),
            })
            .collect();
        let mut diagnostics = diagnose_runs(
            &reference,
            &results,
            split,
            Some(report.config.spec.clone()),
            report.mode,
            report.config.seed,
        )?;
        diagnostics.cost = report.cost;
        let mut cur = Vec::new();
        for s in &scores {
            for row in s.iter_rows() {
                cur.extend_from_slice(&row[split..]);
            }
        }
        current_scores.push(cur);
        println!(
            "{}: mode {} median dP_S {:.5} mean JSD {:.4e} output MSE {:.4e}",
            run.display(),
            report.mode,
            diagnostics.delta_p_s.median,
            diagnostics.jsd.mean,
            diagnostics.output_mse
        );
        reports.push(RunDiagnostics {
            run: run.display().to_string(),
            diagnostics,
        });
    }
    let identical = current_scores
        .windows(2)
        .all(|w| w[0].iter().map(|x| x.to_bits()).eq(w[1].iter().map(|x| x.to_bits())));
    println!("current-block scores identical across runs: {identical}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        for (i, r) in reports.iter().enumerate() {
            fs::write(
                out.join(format!("run{i}_delta_p_s_hist.csv")),
                histogram_csv(&r.diagnostics.delta_p_s.histogram),
            )?;
        }
        write_json(
            &out.join("diagnostics.json"),
            &DiagnoseReport {
                schema_version: SCHEMA_VERSION,
                config: workload.config,
                runs: reports,
                current_block_identical: identical,
            },
        )?;
    }
    Ok(())
}

fn cmd_oracle(seed: u64, samples: Option<usize>, check: bool, out: Option<&Path>) -> CliResult {
    let mut settings = SuiteSettings {
        seed,
        ..Default::default()
    };
    if let Some(n) = samples {
        if n == 0 {
            return Err(Failure::Usage("--samples must be positive".into()));
        }
        settings.closed_form_samples = n;
    }
    let r = run_oracle_suites(settings)?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "closed form: {} configs, max |z| {:.3} (limit 3)  {}",
        r.closed_form.len(),
        r.closed_form_max_z,
        verdict(r.closed_form_pass)
    );
    println!(
        "partition sum: uncorrected {:.5} +- {:.5}, exact-corrected {:.5} +- {:.5}  {}",
        r.unbiasedness.uncorrected.mean,
        r.unbiasedness.uncorrected.std_error,
        r.unbiasedness.corrected.mean,
        r.unbiasedness.corrected.std_error,
        verdict(r.unbiasedness_pass)
    );
    println!(
        "rounding residuals: mean {:.5}, variance {:.5} (uniform 0.08333), max |r| {:.4}  {}",
        r.residuals.mean,
        r.residuals.variance,
        r.residuals.max_abs,
        verdict(r.residuals_pass)
    );
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_json(&out.join("oracle.json"), &r)?;
    }
    if check && !r.passed() {
        return Err(Failure::Check("oracle suite outside tolerance".into()));
    }
    Ok(())
}

fn cmd_curve(alphas: &str, out: Option<&Path>) -> CliResult {
    let csv = curve_csv(&parse_alpha_range(alphas)?);
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, out: Option<&Path>) -> CliResult {
    let config = run.config()?;
    let report = sweep(&config)?;
    print!("{}", report.table());
    println!(
        "reference scores: mean {:.3} median {:.3} p5 {:.3} p95 {:.3}",
        report.scores.mean, report.scores.median, report.scores.p5, report.scores.p95
    );
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_json(&out.join("sweep.json"), &report)?;
        fs::write(out.join("sweep.txt"), report.table())?;
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("JENSENKV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("JENSENKV_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Gen { run, out } => cmd_gen(&run, &out),
        Command::Quantize { workload, run, out } => cmd_quantize(&workload, &run, &out),
        Command::Attend {
            workload,
            cache,
            run,
            out,
            emit_weights,
        } => cmd_attend(&workload, cache.as_deref(), &run, &out, emit_weights),
        Command::Diagnose { workload, runs, out } => cmd_diagnose(&workload, &runs, out.as_deref()),
        Command::Oracle {
            seed,
            samples,
            check,
            out,
        } => cmd_oracle(seed, samples, check, out.as_deref()),
        Command::Curve { alphas, out } => cmd_curve(&alphas, out.as_deref()),
        Command::Sweep { run, out } => cmd_sweep(&run, out.as_deref()),
        Command::Version => {
            println!("jensenkv {} (report schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

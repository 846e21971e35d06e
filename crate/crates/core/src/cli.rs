//! Command-line front end. Exit codes: 0 success, 1 verification or bound
//! failure, 2 usage error, 3 infeasible design.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::estimator::EstimatorDesign;
use crate::language::{
    build_prefix_tree, event_matrix, parse_language, reduce_language, DelayLanguage, DelayWord,
};
use crate::model::{parse_model, SystemModel};
use crate::rows;
use crate::sim::{batch_run, export_batch, BatchSummary};
use crate::synthesis::{
    assemble_robust_lp, verify_certificate, Certificate, CostWeights, FixedDesign, Mu1Search,
    SynthesisOptions, VerificationReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

const BATCH_REACTOR_MODEL: &str = include_str!("../fixtures/batch_reactor.json");
const BATCH_REACTOR_LANGUAGE: &str = include_str!("../fixtures/batch_reactor_language.json");
const BATCH_REACTOR_REDUCED_LANGUAGE: &str =
    include_str!("../fixtures/batch_reactor_reduced_language.json");

/// Published recovery levels of the batch-reactor design.
pub const REFERENCE_MU1: f64 = 0.33;
pub const REFERENCE_MAX_MU2: f64 = 0.6912;
pub const MU1_RANGE: (f64, f64) = (0.297, 0.363);
pub const MAX_MU2_REL_TOL: f64 = 0.10;

#[derive(Debug, Parser)]
#[command(name = "eqrec", version, about = "Equalized-recovery estimators for delayed measurements")]
pub struct Cli {
    /// Worker threads (default: logical processors).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a delay language and print its reduced event form.
    Language {
        #[arg(long)]
        language: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize an estimator and write its certificate.
    Synth(SynthArgs),
    /// Re-check a certificate against its model and language.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        language: PathBuf,
        #[arg(long)]
        cert: PathBuf,
    },
    /// Monte-Carlo runs of a certified estimator.
    Simulate(SimulateArgs),
    /// End-to-end run of a built-in experiment.
    Reproduce {
        #[arg(value_enum)]
        target: Target,
        /// Use the one-step maximum-delay language (32 words).
        #[arg(long)]
        reduced: bool,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    BatchReactor,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub language: PathBuf,
    /// Certificate output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires = "mu1_hi")]
    pub mu1_lo: Option<f64>,
    #[arg(long, requires = "mu1_lo")]
    pub mu1_hi: Option<f64>,
    /// Grid points of the recovery-level search.
    #[arg(long, default_value_t = 40)]
    pub mu1_grid: usize,
    /// Points of the refinement pass.
    #[arg(long, default_value_t = 20)]
    pub mu1_refine: usize,
    /// Prescribed recovery level; skips the search.
    #[arg(long, conflicts_with_all = ["mu1_lo", "mu1_hi"])]
    pub mu1: Option<f64>,
    /// JSON cost weights `{"mu1": w, "mu2": [w_0, ..., w_T]}`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write the program at the selected level in CPLEX LP format.
    #[arg(long)]
    pub lp_dump: Option<PathBuf>,
    /// JSON list of T row-major `n x p` Luenberger blocks.
    #[arg(long = "fix-L")]
    pub fix_l: Option<PathBuf>,
    /// Comma-separated initial auxiliary state.
    #[arg(long, allow_hyphen_values = true)]
    pub s0: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cert: PathBuf,
    /// Required with `--all-words`; checked against the certificate when given.
    #[arg(long)]
    pub language: Option<PathBuf>,
    /// Delay word, e.g. `21210`.
    #[arg(long, required_unless_present = "all_words")]
    pub word: Option<String>,
    /// Audit every word of the language.
    #[arg(long, requires = "language")]
    pub all_words: bool,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated true initial state (default all ones).
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<String>,
    /// Directory for per-trial CSV traces and summaries.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::AllInfeasible { .. }) => EXIT_INFEASIBLE,
            Some(Error::FingerprintMismatch { .. } | Error::CertificateRejected(_)) => EXIT_FAILED,
            _ => EXIT_USAGE,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w.max(1));
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command, out)),
        Err(e) => Err(anyhow!("thread pool: {e}").into()),
    };
    match result {
        Ok(code) => code,
        Err(Failure { code, error }) => {
            if let Some(Error::AllInfeasible { table }) = error.downcast_ref::<Error>() {
                let _ = print_grid(out, table);
            }
            eprintln!("error: {error:#}");
            code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Language { language, out: path } => cmd_language(&language, path.as_deref(), out),
        Command::Synth(args) => cmd_synth(&args, out),
        Command::Verify {
            model,
            language,
            cert,
        } => cmd_verify(&model, &language, &cert, out),
        Command::Simulate(args) => cmd_simulate(&args, out),
        Command::Reproduce {
            target: Target::BatchReactor,
            reduced,
            trials,
            seed,
            out: dir,
        } => cmd_reproduce(reduced, trials, seed, dir.as_deref(), out),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SystemModel> {
    parse_model(&read(path)?).with_context(|| format!("model {}", path.display()))
}

fn load_language(path: &Path) -> anyhow::Result<DelayLanguage> {
    parse_language(&read(path)?).with_context(|| format!("language {}", path.display()))
}

fn parse_vector(text: &str, len: usize, what: &str) -> anyhow::Result<DVector<f64>> {
    let vals = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("{what} must be comma-separated numbers"))?;
    if vals.len() != len {
        bail!("{what} needs {len} entries, got {}", vals.len());
    }
    Ok(DVector::from_vec(vals))
}

fn io_err(e: std::io::Error) -> Failure {
    anyhow::Error::from(e).into()
}

#[derive(Serialize)]
struct LanguageReport {
    horizon: usize,
    tau_bar: usize,
    words: Vec<String>,
    sequences: Vec<Vec<u64>>,
    word_to_sequence: Vec<usize>,
    prefix_tree_nodes: usize,
    event_matrices: Vec<Vec<Vec<u8>>>,
}

fn cmd_language(path: &Path, json: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let lang = load_language(path)?;
    let ev = reduce_language(&lang);
    let tree = build_prefix_tree(&ev);
    let report = LanguageReport {
        horizon: lang.horizon(),
        tau_bar: lang.tau_bar(),
        words: lang.words().iter().map(|w| w.to_string()).collect(),
        sequences: ev.sequences().iter().map(|s| s.indices().to_vec()).collect(),
        word_to_sequence: ev.word_map().to_vec(),
        prefix_tree_nodes: tree.len(),
        event_matrices: ev.sequences().iter().map(|s| event_matrix(s).to_rows()).collect(),
    };
    (|| -> std::io::Result<()> {
        writeln!(out, "T = {}, tau_bar = {}", report.horizon, report.tau_bar)?;
        writeln!(out, "words: {}", lang.len())?;
        writeln!(out, "event sequences: {}", ev.len())?;
        writeln!(out, "prefix tree nodes: {}", tree.len())?;
        for (a, seq) in ev.sequences().iter().enumerate() {
            let members: Vec<String> = lang
                .words()
                .iter()
                .zip(ev.word_map())
                .filter(|(_, &m)| m == a)
                .map(|(w, _)| w.to_string())
                .collect();
            writeln!(out, "  alpha {a}: events {seq}  words {}", members.join(" "))?;
        }
        if ev.len() <= 16 {
            for (a, seq) in ev.sequences().iter().enumerate() {
                writeln!(out, "E_{a} =\n{}", event_matrix(seq))?;
            }
        }
        Ok(())
    })()
    .map_err(io_err)?;
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(&report).map_err(Error::from)?).map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn synthesis_options(args: &SynthArgs, model: &SystemModel) -> anyhow::Result<SynthesisOptions> {
    let mu1 = match (args.mu1, args.mu1_lo, args.mu1_hi) {
        (Some(m), _, _) => Mu1Search::Fixed(m),
        (None, Some(lo), Some(hi)) => Mu1Search::Range {
            lo,
            hi,
            points: args.mu1_grid,
            refine_points: args.mu1_refine,
        },
        _ => Mu1Search::Auto {
            points: args.mu1_grid,
            refine_points: args.mu1_refine,
        },
    };
    if args.mu1.is_none() && args.mu1_grid < 2 {
        bail!("--mu1-grid must be at least 2");
    }
    let weights = match &args.weights {
        None => None,
        Some(p) => {
            let w: CostWeights = serde_json::from_str(&read(p)?).context("cost weights")?;
            w.check(model.horizon())?;
            Some(w)
        }
    };
    let l_blocks = match &args.fix_l {
        None => None,
        Some(p) => {
            let raw: Vec<Vec<Vec<f64>>> = serde_json::from_str(&read(p)?).context("fixed L blocks")?;
            let blocks = raw
                .iter()
                .map(|m| rows::from_rows(m, model.p()).ok_or_else(|| anyhow!("L block is not {}x{}", model.n(), model.p())))
                .collect::<anyhow::Result<Vec<DMatrix<f64>>>>()?;
            Some(blocks)
        }
    };
    let s0 = args
        .s0
        .as_deref()
        .map(|s| parse_vector(s, model.n(), "--s0"))
        .transpose()?;
    let design = FixedDesign { l_blocks, s0 };
    design.l_blocks(model)?;
    Ok(SynthesisOptions {
        mu1,
        weights,
        design,
        ..Default::default()
    })
}

fn print_grid(out: &mut dyn Write, table: &[crate::error::GridPoint]) -> std::io::Result<()> {
    writeln!(out, "{:>14}  {:>18}  status", "mu1", "objective")?;
    let mut sorted: Vec<_> = table.iter().collect();
    sorted.sort_by(|a, b| a.mu1.total_cmp(&b.mu1));
    for g in sorted {
        let obj = g.objective.map_or("-".to_string(), |j| format!("{j:.9}"));
        writeln!(out, "{:>14.9}  {:>18}  {}", g.mu1, obj, g.status)?;
    }
    Ok(())
}

fn print_certificate(out: &mut dyn Write, cert: &Certificate) -> std::io::Result<()> {
    writeln!(out, "mu1 = {:.9}", cert.mu1)?;
    writeln!(out, "max mu2 = {:.9}", cert.max_mu2())?;
    writeln!(out, "J = {:.9}", cert.objective)?;
    writeln!(
        out,
        "sequences = {}, LP: {} variables, {} equalities, {} inequalities",
        cert.sequences.len(),
        cert.solver.variables,
        cert.solver.equalities,
        cert.solver.inequalities
    )
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let model = load_model(&args.model)?;
    let lang = load_language(&args.language)?;
    let opts = synthesis_options(args, &model)?;
    let started = Instant::now();
    let cert = crate::synthesis::synthesize(&model, &lang, &opts)?;
    print_grid(out, &cert.solver.mu1_search).map_err(io_err)?;
    print_certificate(out, &cert).map_err(io_err)?;
    writeln!(out, "elapsed {:.1} s", started.elapsed().as_secs_f64()).map_err(io_err)?;
    cert.save(&args.out)?;
    if let Some(p) = &args.lp_dump {
        let weights = opts.weights.clone().unwrap_or_else(|| CostWeights::uniform(model.horizon()));
        let prog = assemble_robust_lp(&model, &reduce_language(&lang), cert.mu1, &opts.design, &weights)?;
        let mut f = std::io::BufWriter::new(fs::File::create(p).map_err(io_err)?);
        prog.lp.write_cplex_lp(&mut f).map_err(io_err)?;
        f.flush().map_err(io_err)?;
    }
    let report = verify_certificate(&model, &lang, &cert)?;
    print_report(out, &report).map_err(io_err)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILED })
}

fn print_report(out: &mut dyn Write, report: &VerificationReport) -> std::io::Result<()> {
    if report.passed() {
        return writeln!(
            out,
            "verification passed: {} row bounds, min slack {:.3e}",
            report.checked_rows, report.min_slack
        );
    }
    writeln!(
        out,
        "verification FAILED: {} bound violations, {} structural problems",
        report.violations.len(),
        report.structural.len()
    )?;
    for v in &report.violations {
        writeln!(out, "  {v}")?;
    }
    for s in &report.structural {
        writeln!(out, "  {s}")?;
    }
    Ok(())
}

fn cmd_verify(model: &Path, language: &Path, cert: &Path, out: &mut dyn Write) -> CmdResult {
    let model = load_model(model)?;
    let lang = load_language(language)?;
    let cert = Certificate::load(cert).with_context(|| format!("certificate {}", cert.display()))?;
    let report = verify_certificate(&model, &lang, &cert)?;
    print_report(out, &report).map_err(io_err)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILED })
}

fn print_summary(out: &mut dyn Write, s: &BatchSummary) -> std::io::Result<()> {
    writeln!(
        out,
        "word {}: {} trials, {} violations, max terminal error {:.6} (mu1 {:.6})",
        s.word, s.trials, s.violations, s.terminal_max_error, s.mu1
    )?;
    for (k, (m, b)) in s.max_error.iter().zip(&s.bound).enumerate() {
        writeln!(out, "  k={k}: max |err| {m:.6}  bound {b:.6}")?;
    }
    Ok(())
}

fn simulate_words(
    design: &EstimatorDesign<'_>,
    words: &[DelayWord],
    trials: usize,
    seed: u64,
    x0: &DVector<f64>,
    dir: Option<&Path>,
    verbose: bool,
    out: &mut dyn Write,
) -> std::result::Result<Vec<BatchSummary>, Failure> {
    let mut summaries = Vec::with_capacity(words.len());
    for word in words {
        let (summary, traces) = batch_run(design, word, trials, seed, x0)?;
        if verbose || summary.violations > 0 {
            print_summary(out, &summary).map_err(io_err)?;
        }
        if let Some(d) = dir {
            let sub = if words.len() == 1 { d.to_path_buf() } else { d.join(word.to_string()) };
            export_batch(&sub, &summary, &traces)?;
        }
        summaries.push(summary);
    }
    Ok(summaries)
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> CmdResult {
    let model = load_model(&args.model)?;
    let cert = Certificate::load(&args.cert).with_context(|| format!("certificate {}", args.cert.display()))?;
    let lang = args.language.as_deref().map(load_language).transpose()?;
    if let Some(l) = &lang {
        cert.check_language(l)?;
    }
    let design = EstimatorDesign::new(&cert, &model)?;
    let x0 = match &args.x0 {
        Some(s) => parse_vector(s, model.n(), "--x0")?,
        None => DVector::from_element(model.n(), 1.0),
    };
    let words: Vec<DelayWord> = match (&args.word, args.all_words) {
        (_, true) => lang.as_ref().expect("clap requires --language").words().to_vec(),
        (Some(w), false) => vec![DelayWord::parse(w)?],
        (None, false) => unreachable!("clap requires --word"),
    };
    let summaries = simulate_words(
        &design,
        &words,
        args.trials,
        args.seed,
        &x0,
        args.out.as_deref(),
        words.len() == 1,
        out,
    )?;
    let violations: usize = summaries.iter().map(|s| s.violations).sum();
    writeln!(
        out,
        "{} words x {} trials: {violations} bound violations",
        words.len(),
        args.trials
    )
    .map_err(io_err)?;
    Ok(if violations == 0 { EXIT_OK } else { EXIT_FAILED })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproductionReport {
    pub variant: String,
    pub words: usize,
    pub sequences: usize,
    pub mu1: f64,
    pub max_mu2: f64,
    pub objective: f64,
    pub reference_mu1: f64,
    pub reference_max_mu2: f64,
    pub mu1_in_range: Option<bool>,
    pub max_mu2_within_tolerance: Option<bool>,
    pub verification_passed: bool,
    pub min_slack: f64,
    pub simulated_word: String,
    pub trials: usize,
    pub seed: u64,
    pub violations: usize,
    pub synthesis_seconds: f64,
}

/// Synthesis, verification and simulation of the batch-reactor example.
pub fn reproduce_batch_reactor(
    reduced: bool,
    trials: usize,
    seed: u64,
    dir: Option<&Path>,
) -> crate::error::Result<(ReproductionReport, Certificate, BatchSummary)> {
    let model = parse_model(BATCH_REACTOR_MODEL)?;
    let lang = parse_language(if reduced {
        BATCH_REACTOR_REDUCED_LANGUAGE
    } else {
        BATCH_REACTOR_LANGUAGE
    })?;
    let started = Instant::now();
    let cert = crate::synthesis::synthesize(&model, &lang, &SynthesisOptions::default())?;
    let synthesis_seconds = started.elapsed().as_secs_f64();
    let report = verify_certificate(&model, &lang, &cert)?;
    let design = EstimatorDesign::new(&cert, &model)?;
    let word = DelayWord::parse(if reduced { "10110" } else { "21210" })?;
    let x0 = DVector::from_element(model.n(), 1.0);
    let (summary, traces) = batch_run(&design, &word, trials, seed, &x0)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        cert.save(d.join("certificate.json"))?;
        export_batch(d.join(word.to_string()), &summary, &traces)?;
    }
    let max_mu2 = cert.max_mu2();
    let rep = ReproductionReport {
        variant: if reduced { "tau_bar = 1" } else { "tau_bar = 2" }.into(),
        words: lang.len(),
        sequences: cert.sequences.len(),
        mu1: cert.mu1,
        max_mu2,
        objective: cert.objective,
        reference_mu1: REFERENCE_MU1,
        reference_max_mu2: REFERENCE_MAX_MU2,
        mu1_in_range: (!reduced).then(|| (MU1_RANGE.0..=MU1_RANGE.1).contains(&cert.mu1)),
        max_mu2_within_tolerance: (!reduced)
            .then(|| ((max_mu2 - REFERENCE_MAX_MU2) / REFERENCE_MAX_MU2).abs() <= MAX_MU2_REL_TOL),
        verification_passed: report.passed(),
        min_slack: report.min_slack,
        simulated_word: word.to_string(),
        trials,
        seed,
        violations: summary.violations,
        synthesis_seconds,
    };
    if let Some(d) = dir {
        fs::write(d.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
    }
    Ok((rep, cert, summary))
}

fn cmd_reproduce(reduced: bool, trials: usize, seed: u64, dir: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    if trials == 0 {
        return Err(anyhow!("--trials must be at least 1").into());
    }
    let (rep, cert, summary) = reproduce_batch_reactor(reduced, trials, seed, dir)?;
    let ok = |b: Option<bool>| match b {
        Some(true) => "ok",
        Some(false) => "OUT OF TOLERANCE",
        None => "n/a",
    };
    (|| -> std::io::Result<()> {
        writeln!(out, "batch reactor ({}): {} words, {} event sequences", rep.variant, rep.words, rep.sequences)?;
        print_grid(out, &cert.solver.mu1_search)?;
        writeln!(
            out,
            "mu1     = {:.6}  reference {:.4}, accepted [{}, {}]  {}",
            rep.mu1,
            REFERENCE_MU1,
            MU1_RANGE.0,
            MU1_RANGE.1,
            ok(rep.mu1_in_range)
        )?;
        writeln!(
            out,
            "max mu2 = {:.6}  reference {:.4}, accepted within {:.0}%  {}",
            rep.max_mu2,
            REFERENCE_MAX_MU2,
            MAX_MU2_REL_TOL * 100.0,
            ok(rep.max_mu2_within_tolerance)
        )?;
        writeln!(out, "J = {:.6}, synthesis {:.1} s", rep.objective, rep.synthesis_seconds)?;
        writeln!(
            out,
            "verification {} (min slack {:.3e})",
            if rep.verification_passed { "passed" } else { "FAILED" },
            rep.min_slack
        )?;
        print_summary(out, &summary)
    })()
    .map_err(io_err)?;
    let within = rep.mu1_in_range != Some(false) && rep.max_mu2_within_tolerance != Some(false);
    Ok(if rep.verification_passed && rep.violations == 0 && within {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

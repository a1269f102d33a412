//! `overwhelm`: command-line front end to the verifier.
//!
//! Exit status is 0 when the input space is certified overwhelmed, 1 when
//! the bound is inconclusive and 2 on any error, including a failed oracle
//! check or a refused enumeration.

mod args;
mod error;
mod report;
mod tokens;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use overwhelm_core::bounds::{verify_overwhelmed, InputRestriction, SamplePolicy, Verdict, VerifyOptions};
use overwhelm_core::convergence::{convergence_scan, FreeSlots};
use overwhelm_core::format::decode_model;
use overwhelm_core::oracle::{
    cross_check, enumerate_designed_space, enumerate_permutation_class, SweepResult, Violation,
    CROSS_CHECK_TOL, DEFAULT_CLASS_LIMIT, DEFAULT_SPACE_LIMIT,
};
use overwhelm_core::perm::{verify_overwhelmed_perm, PermutationClass};
use overwhelm_core::{Model, TokenId, VerificationReport};
use serde::Serialize;

use args::{Cli, Command, Common, ConvergeArgs, OracleArgs, PermArgs, VerifyArgs};
use error::{CliError, Result};
use report::{ConfigEcho, ModelInfo, Outcome, Report, REPORT_VERSION};
use tokens::{TokenReader, Vocab};

struct Loaded {
    model: Model,
    info: ModelInfo,
    vocab: Option<Vocab>,
}

impl Loaded {
    fn reader(&self) -> TokenReader<'_> {
        TokenReader { vocab: self.vocab.as_ref() }
    }

    fn outcome(&self, verdict: Verdict, greedy: Option<TokenId>) -> Outcome {
        let mut o = Outcome::new(verdict);
        o.greedy_token = greedy;
        o.greedy_text = greedy.and_then(|t| self.vocab.as_ref()?.text(t).map(str::to_owned));
        o
    }
}

fn load(common: &Common) -> Result<Loaded> {
    let bytes = std::fs::read(&common.model).map_err(|source| CliError::Io {
        path: common.model.clone(),
        source,
    })?;
    let weights = decode_model(&bytes)?;
    let vocab = common.vocab.as_deref().map(Vocab::load).transpose()?;
    if let Some(v) = &vocab {
        if v.len() != weights.d_vocab {
            return Err(CliError::Usage(format!(
                "vocab map has {} entries, model has d_vocab = {}",
                v.len(),
                weights.d_vocab
            )));
        }
    }
    let info = ModelInfo::new(common.model.display().to_string(), &bytes, &weights);
    Ok(Loaded {
        model: Model::new(weights)?,
        info,
        vocab,
    })
}

fn emit<T: Serialize>(
    common: &Common,
    command: &'static str,
    mut config: ConfigEcho,
    loaded: Loaded,
    result: T,
    outcome: Outcome,
    start: Instant,
) -> Result<u8> {
    config.vocab = common.vocab.as_ref().map(|p| p.display().to_string());
    config.slack = common.slack;
    let code = outcome.exit_code;
    let report = Report {
        report_version: REPORT_VERSION,
        command,
        config,
        model: loaded.info,
        result,
        outcome,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    match &common.out {
        Some(path) => {
            let io_err = |source| CliError::Io { path: path.clone(), source };
            let mut sink = BufWriter::new(File::create(path).map_err(io_err)?);
            report::write(&report, common.format, &mut sink)?;
            sink.flush().map_err(io_err)?;
        }
        None => report::write(&report, common.format, io::stdout().lock())?,
    }
    Ok(code)
}

fn summary(verdict: Verdict, w: f64, ptp: f64) {
    let word = match verdict {
        Verdict::Overwhelmed => "overwhelmed",
        Verdict::Inconclusive => "inconclusive",
    };
    eprintln!("{word}: W = {w:.6e}, PTP/2 = {:.6e}", ptp / 2.0);
}

fn sample_policy(fill: &Option<Vec<TokenId>>) -> SamplePolicy {
    fill.clone().map_or(SamplePolicy::QueryFill, SamplePolicy::Filler)
}

fn verify(a: &VerifyArgs, start: Instant) -> Result<u8> {
    let l = load(&a.common)?;
    let r = l.reader();
    let fixed = r.list(&a.fixed)?;
    let query = r.one(&a.query)?;
    let fill = a.fill.as_deref().map(|f| r.list(f)).transpose()?;
    let restriction = InputRestriction::new(fixed.clone(), a.n_free, query);
    let opts = VerifyOptions { slack: a.common.slack, sample: sample_policy(&fill) };
    let rep = verify_overwhelmed(&l.model, &restriction, &opts)?;
    summary(rep.verdict, rep.w, rep.ptp);
    let outcome = l.outcome(rep.verdict, Some(rep.sample_greedy));
    let config = ConfigEcho {
        fixed: Some(fixed),
        n_free: Some(a.n_free),
        fill,
        ..ConfigEcho::new(query)
    };
    emit(&a.common, "verify", config, l, rep, outcome, start)
}

fn verify_perm(a: &PermArgs, start: Instant) -> Result<u8> {
    let l = load(&a.common)?;
    let r = l.reader();
    let fixed = r.list(&a.fixed)?;
    let perm = r.list(&a.perm)?;
    let query = r.one(&a.query)?;
    let fill = a.fill.as_deref().map(|f| r.list(f)).transpose()?;
    let cls = PermutationClass::new(fixed.clone(), perm.clone(), query);
    let opts = VerifyOptions { slack: a.common.slack, sample: sample_policy(&fill) };
    let rep = verify_overwhelmed_perm(&l.model, &cls, a.method.into(), &opts)?;
    summary(rep.report.verdict, rep.report.w, rep.report.ptp);
    let outcome = l.outcome(rep.report.verdict, Some(rep.report.sample_greedy));
    let config = ConfigEcho {
        fixed: Some(fixed),
        perm: Some(perm),
        method: Some(a.method.into()),
        fill,
        ..ConfigEcho::new(query)
    };
    emit(&a.common, "verify-perm", config, l, rep, outcome, start)
}

#[derive(Serialize)]
struct OracleResult<V: Serialize> {
    verification: V,
    enumeration: SweepResult,
    violations: Vec<Violation>,
}

fn oracle_check(a: &OracleArgs, start: Instant) -> Result<u8> {
    let l = load(&a.common)?;
    let r = l.reader();
    let fixed = r.list(&a.fixed)?;
    let query = r.one(&a.query)?;
    let fill = a.fill.as_deref().map(|f| r.list(f)).transpose()?;
    let opts = VerifyOptions { slack: a.common.slack, sample: sample_policy(&fill) };
    let mut config = ConfigEcho { fixed: Some(fixed.clone()), fill, ..ConfigEcho::new(query) };

    let check = |report: &VerificationReport, sweep: &SweepResult| {
        let violations = cross_check(report, sweep, CROSS_CHECK_TOL);
        for v in &violations {
            eprintln!("ORACLE VIOLATION: {v}");
        }
        summary(report.verdict, report.w, report.ptp);
        eprintln!(
            "enumerated {} inputs: realized deviation {:.6e}, {} distinct greedy token(s)",
            sweep.count,
            sweep.max_pairwise_deviation,
            sweep.greedy_tokens.len()
        );
        violations
    };

    match &a.perm {
        Some(perm) => {
            let perm = r.list(perm)?;
            let limit = a.limit.unwrap_or(DEFAULT_CLASS_LIMIT);
            let cls = PermutationClass::new(fixed, perm.clone(), query);
            let rep = verify_overwhelmed_perm(&l.model, &cls, a.method.into(), &opts)?;
            let sweep = enumerate_permutation_class(&l.model, &cls, limit)?;
            let violations = check(&rep.report, &sweep);
            let failed = !violations.is_empty();
            let outcome = l.outcome(rep.report.verdict, Some(rep.report.sample_greedy));
            config.perm = Some(perm);
            config.method = Some(a.method.into());
            config.limit = Some(limit);
            let result = OracleResult { verification: rep, enumeration: sweep, violations };
            let code = emit(&a.common, "oracle-check", config, l, result, outcome, start)?;
            Ok(if failed { 2 } else { code })
        }
        None => {
            let n_free = a.n_free.expect("clap requires --n-free or --perm");
            let limit = a.limit.unwrap_or(DEFAULT_SPACE_LIMIT);
            let restriction = InputRestriction::new(fixed, n_free, query);
            let rep = verify_overwhelmed(&l.model, &restriction, &opts)?;
            let sweep = enumerate_designed_space(&l.model, &restriction, limit)?;
            let violations = check(&rep, &sweep);
            let failed = !violations.is_empty();
            let outcome = l.outcome(rep.verdict, Some(rep.sample_greedy));
            config.n_free = Some(n_free);
            config.limit = Some(limit);
            let result = OracleResult { verification: rep, enumeration: sweep, violations };
            let code = emit(&a.common, "oracle-check", config, l, result, outcome, start)?;
            Ok(if failed { 2 } else { code })
        }
    }
}

fn parse_ratio(s: &str) -> Result<FreeSlots> {
    let bad = || CliError::Usage(format!("--free-ratio expects `num/den` with 0 <= num < den, got `{s}`"));
    let (num, den) = s.split_once('/').ok_or_else(bad)?;
    let (num, den): (usize, usize) = (num.trim().parse().map_err(|_| bad())?, den.trim().parse().map_err(|_| bad())?);
    if den == 0 || num >= den {
        return Err(bad());
    }
    Ok(FreeSlots::Fraction { num, den })
}

fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("--schedule expects `a,b,c` or `2^i..2^j`, got `{s}`"));
    if let Some((lo, hi)) = s.split_once("..") {
        let exp = |part: &str| -> Result<u32> {
            part.trim().strip_prefix("2^").and_then(|e| e.parse().ok()).filter(|&e| e < 63).ok_or_else(bad)
        };
        let (lo, hi) = (exp(lo)?, exp(hi)?);
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).map(|e| 1usize << e).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn converge(a: &ConvergeArgs, start: Instant) -> Result<u8> {
    let l = load(&a.common)?;
    let rep = l.reader().one(&a.query)?;
    let free = match (a.n_free, &a.free_ratio) {
        (Some(n), _) => FreeSlots::Constant(n),
        (None, Some(ratio)) => parse_ratio(ratio)?,
        (None, None) => unreachable!("clap requires --n-free or --free-ratio"),
    };
    let schedule = parse_schedule(&a.schedule)?;
    let scan = convergence_scan(&l.model, rep, free, &schedule, a.common.slack)?;
    let verdict = if scan.first_certified.is_some() { Verdict::Overwhelmed } else { Verdict::Inconclusive };
    match scan.first_certified {
        Some(n) => eprintln!("overwhelmed from n_ctx = {n} on"),
        None => eprintln!("inconclusive at every scheduled n_ctx"),
    }
    let outcome = l.outcome(verdict, None);
    let config = ConfigEcho {
        free_slots: Some(free),
        schedule: Some(schedule),
        ..ConfigEcho::new(rep)
    };
    emit(&a.common, "converge", config, l, scan, outcome, start)
}

fn dispatch(command: &Command) -> Result<u8> {
    let start = Instant::now();
    match command {
        Command::Verify(a) => verify(a, start),
        Command::VerifyPerm(a) => verify_perm(a, start),
        Command::OracleCheck(a) => oracle_check(a, start),
        Command::Converge(a) => converge(a, start),
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let common = match &cli.command {
        Command::Verify(a) => &a.common,
        Command::VerifyPerm(a) => &a.common,
        Command::OracleCheck(a) => &a.common,
        Command::Converge(a) => &a.common,
    };
    match common.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

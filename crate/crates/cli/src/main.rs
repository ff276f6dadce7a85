//! `pmpatch`: rewrite `clflush` to `clwb` in x86-64 ELF binaries and reason
//! about flush/fence traces.
//!
//! Exit codes: 0 success, 1 usage or input parse error, 2 operation or
//! verification failure, 3 crash-state sets differ.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use pmpatch_core::census::census;
use pmpatch_core::crash::{crash_equivalent, enumerate_crash_states, Bounds, Verdict};
use pmpatch_core::elf::{
    apply_patches, check_report, load_elf, plan_patches, verify_patch, ElfImage, PatchOptions, PatchPlan,
    PatchReport, Strategy,
};
use pmpatch_core::mccs::{exhaustive_optimum, minimize, parse_predicate, CostModel, MinimizeResult, Outcome};
use pmpatch_core::rewrite::{rewrite_trace, RewriteRule};
use pmpatch_core::trace::{parse_trace, TraceProgram};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pmpatch", version, about = "clflush-to-clwb binary rewriter and persistency trace tools")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite flushes in an ELF binary and verify the result.
    Patch {
        input: PathBuf,
        output: PathBuf,
        /// Where to write the JSON patch report [default: <OUTPUT>.report.json].
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
    },
    /// List flush sites and the strategy `patch` would use for each.
    Inspect {
        input: PathBuf,
        #[command(flatten)]
        patch: PatchFlags,
    },
    /// Count redundant flushes and eviction refetches in a trace.
    Census { trace: PathBuf },
    /// Print every crash state reachable by a trace.
    Simulate {
        trace: PathBuf,
        #[command(flatten)]
        bounds: BoundFlags,
    },
    /// Compare two traces' crash states, a trace against its rewrite, or a
    /// patched binary against its original.
    Verify {
        first: PathBuf,
        /// Second trace, or the patched binary. Omitted: compare the trace with its rewrite.
        second: Option<PathBuf>,
        /// Rewrite applied when SECOND is omitted.
        #[arg(long, value_enum, default_value_t = RuleArg::ClflushToClwbSfence)]
        rule: RuleArg,
        /// Patch report to cross-check in binary mode.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        bounds: BoundFlags,
    },
    /// Find the cheapest flushes and fences that keep a predicate true.
    Minimize {
        trace: PathBuf,
        predicate: PathBuf,
        /// Use the exhaustive search instead of greedy descent.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        costs: CostFlags,
        #[command(flatten)]
        bounds: BoundFlags,
    },
}

#[derive(Args)]
struct PatchFlags {
    /// Also rewrite clflushopt to clwb.
    #[arg(long)]
    patch_clflushopt: bool,
    /// Instructions after a clflush searched for an existing fence.
    #[arg(long, default_value_t = 1)]
    dedup_window: usize,
}

impl PatchFlags {
    fn options(&self) -> PatchOptions {
        PatchOptions { patch_clflushopt: self.patch_clflushopt, dedup_window: self.dedup_window }
    }
}

#[derive(Args)]
struct BoundFlags {
    #[arg(long, default_value_t = Bounds::default().max_ops)]
    max_ops: usize,
    #[arg(long, default_value_t = Bounds::default().max_lines)]
    max_lines: usize,
    #[arg(long, default_value_t = Bounds::default().max_states)]
    max_states: usize,
}

impl BoundFlags {
    fn bounds(&self) -> Bounds {
        Bounds { max_ops: self.max_ops, max_lines: self.max_lines, max_states: self.max_states }
    }
}

#[derive(Args)]
struct CostFlags {
    #[arg(long, default_value_t = CostModel::default().clflush)]
    cost_clflush: u64,
    #[arg(long, default_value_t = CostModel::default().clflushopt)]
    cost_clflushopt: u64,
    #[arg(long, default_value_t = CostModel::default().clwb)]
    cost_clwb: u64,
    #[arg(long, default_value_t = CostModel::default().mfence)]
    cost_mfence: u64,
    #[arg(long, default_value_t = CostModel::default().sfence)]
    cost_sfence: u64,
}

impl CostFlags {
    fn model(&self) -> CostModel {
        CostModel {
            clflush: self.cost_clflush,
            clflushopt: self.cost_clflushopt,
            clwb: self.cost_clwb,
            mfence: self.cost_mfence,
            sfence: self.cost_sfence,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    ClflushToClwbSfence,
    ClflushoptToClwb,
    MfenceToSfence,
}

enum Failure {
    /// Bad arguments or unreadable/unparsable input.
    Usage(String),
    /// The operation itself failed.
    Op(String),
}

type CmdResult = Result<u8, Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn op(e: impl ToString) -> Failure {
    Failure::Op(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("pmpatch: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Op(msg)) => {
            eprintln!("pmpatch: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let json = cli.json;
    match cli.command {
        Command::Patch { input, output, report, patch } => cmd_patch(&input, &output, report, &patch, json),
        Command::Inspect { input, patch } => cmd_inspect(&input, &patch, json),
        Command::Census { trace } => {
            let report = census(&read_trace(&trace)?);
            emit(if json { report.to_json() + "\n" } else { report.to_string() })
        }
        Command::Simulate { trace, bounds } => cmd_simulate(&trace, &bounds, json),
        Command::Verify { first, second, rule, report, patch, bounds } => {
            if is_elf(&first)? {
                let second = second.ok_or_else(|| usage("binary verify needs the patched binary"))?;
                cmd_verify_binary(&first, &second, report, &patch, json)
            } else {
                cmd_verify_traces(&first, second.as_deref(), rule, patch.dedup_window, &bounds, json)
            }
        }
        Command::Minimize { trace, predicate, exhaustive, costs, bounds } => {
            cmd_minimize(&trace, &predicate, exhaustive, &costs, &bounds, json)
        }
    }
}

fn emit(text: String) -> CmdResult {
    io::stdout().write_all(text.as_bytes()).map_err(op)?;
    Ok(0)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_trace(path: &Path) -> Result<TraceProgram, Failure> {
    parse_trace(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_elf(path: &Path) -> Result<ElfImage, Failure> {
    load_elf(path).map_err(usage)
}

fn is_elf(path: &Path) -> Result<bool, Failure> {
    let bytes = fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(bytes.starts_with(b"\x7fELF"))
}

fn site_line(vaddr: &str, kind: &str, strategy: Strategy, reason: Option<String>) -> String {
    match reason {
        Some(r) => format!("{vaddr:<18} {kind:<11} {strategy} {r}\n"),
        None => format!("{vaddr:<18} {kind:<11} {strategy}\n"),
    }
}

fn report_text(report: &PatchReport) -> String {
    let mut out = String::new();
    for s in &report.sites {
        out += &site_line(&s.vaddr, &s.kind, s.strategy, s.reason.map(|r| r.to_string()));
    }
    out += &format!("patched {}, skipped {}", report.patched, report.skipped);
    if let Some(seg) = &report.segment {
        out += &format!(", segment {} ({} bytes)", seg.vaddr, seg.size);
    }
    out + "\n"
}

fn patch_and_check(img: &ElfImage, plan: &PatchPlan) -> Result<(Vec<u8>, PatchReport), Failure> {
    let (bytes, report) = apply_patches(img, plan);
    let patched = ElfImage::parse(bytes.clone()).map_err(|e| op(format!("patched output does not parse: {e}")))?;
    let mut failures = verify_patch(img, &patched, plan).failures;
    failures.extend(check_report(plan, &report));
    if !failures.is_empty() {
        let list: Vec<String> = failures.iter().map(ToString::to_string).collect();
        return Err(op(format!("verification failed:\n  {}", list.join("\n  "))));
    }
    Ok((bytes, report))
}

fn cmd_patch(input: &Path, output: &Path, report_path: Option<PathBuf>, flags: &PatchFlags, json: bool) -> CmdResult {
    let img = read_elf(input)?;
    let plan = plan_patches(&img, flags.options());
    let (bytes, report) = patch_and_check(&img, &plan)?;
    let report_path = report_path.unwrap_or_else(|| {
        let mut name = output.as_os_str().to_owned();
        name.push(".report.json");
        PathBuf::from(name)
    });
    let write_err = |p: &Path, e: io::Error| op(format!("{}: {e}", p.display()));
    fs::write(output, &bytes).map_err(|e| write_err(output, e))?;
    let perms = fs::metadata(input).map_err(|e| write_err(input, e))?.permissions();
    fs::set_permissions(output, perms).map_err(|e| write_err(output, e))?;
    fs::write(&report_path, report.to_json() + "\n").map_err(|e| write_err(&report_path, e))?;
    emit(if json { report.to_json() + "\n" } else { report_text(&report) })
}

fn cmd_inspect(input: &Path, flags: &PatchFlags, json: bool) -> CmdResult {
    let img = read_elf(input)?;
    let plan = plan_patches(&img, flags.options());
    let rows: Vec<_> = plan
        .sites
        .iter()
        .map(|s| {
            let run = &plan.sweeps[s.region].runs[s.run];
            let next = run.instructions.get(s.position + 1).map_or("-", |i| i.class.name());
            (s, next)
        })
        .collect();
    if json {
        let v: Vec<_> = rows
            .iter()
            .map(|(s, next)| {
                let mut row = json!({
                    "vaddr": format!("{:#x}", s.vaddr),
                    "kind": s.kind.name(),
                    "next": next,
                    "strategy": s.strategy,
                });
                if let Some(r) = s.reason {
                    row["reason"] = json!(r);
                }
                row
            })
            .collect();
        return emit(serde_json::to_string_pretty(&v).map_err(op)? + "\n");
    }
    let mut out = String::new();
    for (s, next) in rows {
        let kind = format!("{} -> {next}", s.kind.name());
        out += &site_line(&format!("{:#x}", s.vaddr), &kind, s.strategy, s.reason.map(|r| r.to_string()));
    }
    emit(out)
}

fn cmd_simulate(trace: &Path, bounds: &BoundFlags, json: bool) -> CmdResult {
    let program = read_trace(trace)?;
    let states = enumerate_crash_states(&program, bounds.bounds()).map_err(op)?;
    if json {
        return emit(serde_json::to_string_pretty(&states).map_err(op)? + "\n");
    }
    let mut out = format!("{} crash states\n", states.len());
    for s in states.iter() {
        out += &format!("{s}\n");
    }
    emit(out)
}

fn cmd_verify_traces(
    first: &Path,
    second: Option<&Path>,
    rule: RuleArg,
    dedup_window: usize,
    bounds: &BoundFlags,
    json: bool,
) -> CmdResult {
    let a = read_trace(first)?;
    let b = match second {
        Some(path) => read_trace(path)?,
        None => {
            let rule = match rule {
                RuleArg::ClflushToClwbSfence => RewriteRule::ClflushToClwbSfence { dedup_window },
                RuleArg::ClflushoptToClwb => RewriteRule::ClflushoptToClwb,
                RuleArg::MfenceToSfence => RewriteRule::MfenceToSfence,
            };
            rewrite_trace(&a, rule)
        }
    };
    let eq = crash_equivalent(&a, &b, bounds.bounds()).map_err(op)?;
    let text = if json {
        serde_json::to_string_pretty(&eq).map_err(op)? + "\n"
    } else {
        let mut out = format!("{}\n", eq.verdict);
        for s in &eq.only_in_first {
            out += &format!("only in first:  {s}\n");
        }
        for s in &eq.only_in_second {
            out += &format!("only in second: {s}\n");
        }
        out
    };
    emit(text)?;
    Ok(if eq.verdict == Verdict::Equal { 0 } else { 3 })
}

fn cmd_verify_binary(
    original: &Path,
    patched: &Path,
    report: Option<PathBuf>,
    flags: &PatchFlags,
    json: bool,
) -> CmdResult {
    let orig = read_elf(original)?;
    let new = read_elf(patched)?;
    let plan = plan_patches(&orig, flags.options());
    let mut result = verify_patch(&orig, &new, &plan);
    if let Some(path) = report {
        let parsed: PatchReport = serde_json::from_str(&read_text(&path)?)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        result.failures.extend(check_report(&plan, &parsed));
    }
    let text = if json {
        serde_json::to_string_pretty(&result).map_err(op)? + "\n"
    } else {
        let mut out = String::new();
        for f in &result.failures {
            out += &format!("FAIL {f}\n");
        }
        out += &format!(
            "{}: {} sites checked, {} patched, {} failures\n",
            if result.is_ok() { "OK" } else { "FAILED" },
            result.sites_checked,
            result.patched,
            result.failures.len()
        );
        out
    };
    emit(text)?;
    Ok(if result.is_ok() { 0 } else { 2 })
}

fn minimize_text(r: &MinimizeResult) -> String {
    let mut out = r.program.to_string();
    out += &format!("cost {} (input {}), {} oracle calls\n", r.total_cost, r.input_cost, r.oracle_calls);
    for entry in &r.log {
        let what = match &entry.outcome {
            Outcome::Kept => "kept".to_string(),
            Outcome::Removed => "removed".to_string(),
            Outcome::Downgraded(ops) => {
                let names: Vec<_> = ops.iter().map(|k| k.mnemonic()).collect();
                format!("downgraded to {}", names.join("+"))
            }
        };
        out += &format!("op {} {}: {what}\n", entry.index + 1, entry.op);
    }
    out
}

fn cmd_minimize(
    trace: &Path,
    predicate: &Path,
    exhaustive: bool,
    costs: &CostFlags,
    bounds: &BoundFlags,
    json: bool,
) -> CmdResult {
    let program = read_trace(trace)?;
    let pred =
        parse_predicate(&read_text(predicate)?).map_err(|e| usage(format!("{}: {e}", predicate.display())))?;
    let search = if exhaustive { exhaustive_optimum } else { minimize };
    let result = search(&program, &pred, &costs.model(), bounds.bounds()).map_err(op)?;
    emit(if json { result.to_json() + "\n" } else { minimize_text(&result) })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crossflow::harness::fixtures;
use crossflow::harness::scenario::{verify_exactly_once, ScenarioSpec};
use crossflow::harness::{diff_values, run_scenario, HarnessError};
use crossflow::runtime::{Coordination, ProtocolMutation, RuntimeConfig};

const PASS: u8 = 0;
const ASSERTION_FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(
    name = "crossflow",
    version,
    about = "Run workflow scenarios on the simulated multi-cloud"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or `fixture:<name>`) and evaluate its assertions.
    Run {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Exhaustively enumerate crash schedules of a small workflow.
    Verify {
        /// Workflow file or fixture name.
        workflow: String,
        #[arg(long, default_value_t = 2)]
        budget: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "atomic")]
        coordination: String,
        /// Seed the protocol fault that skips invocation-list appends.
        #[arg(long)]
        mutant: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Write bundled workflows, topologies and scenarios (`all` or one name).
    Fixtures {
        #[arg(default_value = "all")]
        name: String,
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
    /// Compare two report files; exits 1 when they differ.
    ReportDiff { a: PathBuf, b: PathBuf },
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let text = serde_json::to_string_pretty(v).expect("fixture serializes") + "\n";
    emit(&text, Some(&dir.join(format!("{name}.json"))))
}

fn fixtures_cmd(name: &str, out: &Path) -> Result<u8, HarnessError> {
    let mut written = 0;
    let all = name == "all";
    for w in fixtures::WORKFLOW_FIXTURES
        .iter()
        .copied()
        .filter(|w| all || *w == name)
    {
        write_json(&out.join("workflows"), w, &fixtures::workflow(w).expect("bundled"))?;
        written += 1;
    }
    if !all && written == 0 {
        if let Some(v) = fixtures::workflow(name) {
            write_json(&out.join("workflows"), name, &v)?;
            written += 1;
        }
    }
    for t in fixtures::TOPOLOGY_FIXTURES
        .iter()
        .copied()
        .filter(|t| all || *t == name)
    {
        let v = serde_json::to_value(fixtures::topology(t).expect("bundled")).expect("topology serializes");
        write_json(&out.join("topologies"), t, &v)?;
        written += 1;
    }
    for s in fixtures::SCENARIO_FIXTURES
        .iter()
        .copied()
        .filter(|s| all || *s == name)
    {
        write_json(&out.join("scenarios"), s, &fixtures::scenario(s).expect("bundled"))?;
        written += 1;
    }
    if written == 0 {
        return Err(HarnessError::UnknownFixture(name.to_string()));
    }
    eprintln!("wrote {written} fixture files under {}", out.display());
    Ok(PASS)
}

fn read_json(p: &Path) -> Result<serde_json::Value, HarnessError> {
    let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: p.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn execute(cmd: Command) -> Result<u8, HarnessError> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => {
            let (mut spec, base) = ScenarioSpec::load(&scenario)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let report = run_scenario(&spec, &base)?;
            let text = match format {
                Format::Json => report.to_json(),
                Format::Table => report.to_table(),
            };
            emit(&text, out.as_deref())?;
            Ok(if report.passed { PASS } else { ASSERTION_FAILED })
        }
        Command::Verify {
            workflow,
            budget,
            seed,
            coordination,
            mutant,
            out,
            format,
        } => {
            let coordination: Coordination = serde_json::from_value(serde_json::Value::String(coordination.clone()))
                .map_err(|_| HarnessError::Invalid(format!("unknown coordination `{coordination}`")))?;
            let cfg = RuntimeConfig {
                coordination,
                mutation: mutant.then_some(ProtocolMutation::SkipInvocationAppend),
                ..RuntimeConfig::default()
            };
            let verdict = verify_exactly_once(&workflow, Path::new("."), budget, seed, cfg)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&verdict).expect("verdict serializes") + "\n",
                Format::Table => {
                    let mut s = format!(
                        "{workflow}: {} runs, {} violations\n",
                        verdict.runs,
                        verdict.violations.len()
                    );
                    for v in &verdict.violations {
                        s.push_str(&format!("  [{}] {}: {}\n", v.observable, v.schedule, v.detail));
                    }
                    s.push_str(if verdict.passed() {
                        "result  PASS\n"
                    } else {
                        "result  FAIL\n"
                    });
                    s
                }
            };
            emit(&text, out.as_deref())?;
            Ok(if verdict.passed() { PASS } else { ASSERTION_FAILED })
        }
        Command::Fixtures { name, out } => fixtures_cmd(&name, &out),
        Command::ReportDiff { a, b } => {
            let diffs = diff_values(&read_json(&a)?, &read_json(&b)?);
            for d in &diffs {
                println!("{d}");
            }
            if diffs.is_empty() {
                println!("identical");
                Ok(PASS)
            } else {
                Ok(ASSERTION_FAILED)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { CONFIG_ERROR } else { PASS };
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}

//! Drivers for the `chorlam` binary: `check`, `run`, `project`,
//! `simulate`, and `conform` over `.chor` files.
//!
//! Exit codes are fixed so CI can tell failures apart: `0` success,
//! `1` type or theorem errors, `2` IO/parse errors, `3` fuel exhaustion,
//! `4` merge (knowledge-of-choice) errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ast::Role;
use crate::conform::{self, CheckReport, CorrespondenceBudget, GenConfig, Verdict};
use crate::process::{self, print_behaviour};
use crate::project;
use crate::runtime::{self, ExternTable, RunEnv, Scheduler};
use crate::surface;
use crate::typecheck::{self, CheckedProgram, ErrorSite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TYPE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_FUEL: i32 = 3;
pub const EXIT_MERGE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "chorlam",
    about = "Type-check, run, project and simulate choreographies",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for all randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum number of reduction steps.
    #[arg(long, default_value_t = runtime::DEFAULT_FUEL)]
    pub fuel: u64,
    /// Bound on the rewriting closure per step.
    #[arg(long = "rewrite-fuel", default_value_t = runtime::DEFAULT_REWRITE_FUEL)]
    pub rewrite_fuel: usize,
    /// Search depth for bounded correspondence checks.
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Output directory for generated files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the execution trace (JSON lines).
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Type-check files and print the principal types of definitions.
    Check {
        paths: Vec<PathBuf>,
        /// Also report the minimal role annotation of every abstraction.
        #[arg(long = "infer-rho")]
        infer_rho: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the main choreography of a file.
    Run {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Project a file onto its roles, writing one `.proc` file per role.
    Project {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Project the main choreography and run the resulting network.
    Simulate {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the conformance suite on files and/or generated choreographies.
    Conform {
        paths: Vec<PathBuf>,
        /// Also check generated well-typed choreographies.
        #[arg(long)]
        gen: bool,
        /// Number of generated samples.
        #[arg(long, default_value_t = 25)]
        samples: u64,
        #[command(flatten)]
        common: Common,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Check {
            paths,
            infer_rho,
            common,
        } => cmd_check(&paths, infer_rho, &common),
        Command::Run { path, common } => cmd_run(&path, &common),
        Command::Project { path, common } => cmd_project(&path, &common),
        Command::Simulate { path, common } => cmd_simulate(&path, &common),
        Command::Conform {
            paths,
            gen,
            samples,
            common,
        } => cmd_conform(&paths, gen, samples, &common),
    }
}

/// Corpus directory: `CHORLAM_CORPUS` when set, the bundled corpus
/// otherwise.
pub fn corpus_dir() -> PathBuf {
    match std::env::var_os("CHORLAM_CORPUS") {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus"),
    }
}

fn read_file(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

struct Loaded {
    source: surface::SourceFile,
    program: CheckedProgram,
}

enum LoadError {
    Io(String),
    Parse(String),
    Type(String),
}

fn site_position(sf: &surface::SourceFile, site: &ErrorSite) -> (usize, usize) {
    match site {
        ErrorSite::Decls => (1, 1),
        ErrorSite::Def(name) => sf
            .defs
            .iter()
            .find(|d| &d.name == name)
            .map(|d| (d.line, d.col))
            .unwrap_or((1, 1)),
        ErrorSite::Main => sf.main_pos.unwrap_or((1, 1)),
    }
}

fn load(path: &Path) -> Result<Loaded, LoadError> {
    let text = read_file(path).map_err(LoadError::Io)?;
    let source = surface::parse(&text).map_err(|e| {
        LoadError::Parse(format!(
            "{}:{}:{}: parse: {}",
            path.display(),
            e.line,
            e.col,
            e.message
        ))
    })?;
    let program = typecheck::check_program(&source).map_err(|e| {
        let (line, col) = site_position(&source, &e.site);
        LoadError::Type(format!(
            "{}:{line}:{col}: type: {}",
            path.display(),
            e.inner
        ))
    })?;
    Ok(Loaded { source, program })
}

fn report_load_error(err: &LoadError, format: Format) -> i32 {
    let (code, kind, message) = match err {
        LoadError::Io(m) => (EXIT_IO, "io", m),
        LoadError::Parse(m) => (EXIT_IO, "parse", m),
        LoadError::Type(m) => (EXIT_TYPE, "type", m),
    };
    match format {
        Format::Text => eprintln!("{message}"),
        Format::Json => println!(
            "{}",
            serde_json::json!({"error": {"kind": kind, "message": message}})
        ),
    }
    code
}

pub fn cmd_check(paths: &[PathBuf], infer_rho: bool, common: &Common) -> i32 {
    let mut out = Vec::new();
    for path in paths {
        let loaded = match load(path) {
            Ok(l) => l,
            Err(e) => return report_load_error(&e, common.format),
        };
        for def in &loaded.source.defs {
            out.push((def.name.to_string(), surface::print_type(&def.sig)));
        }
        if let Some(main) = &loaded.program.main {
            out.push(("main".to_string(), surface::print_type(&main.ty)));
        }
        if infer_rho {
            for typed in loaded.program.typed_defs.values() {
                for (term, rho) in typecheck::infer_rho(typed) {
                    if let crate::ast::Term::Abs { param, .. } = &term {
                        let roles: Vec<_> = rho.iter().map(Role::as_str).collect();
                        out.push((
                            format!("rho(fun {param} . ...)"),
                            format!("{{{}}}", roles.join(",")),
                        ));
                    }
                }
            }
        }
    }
    match common.format {
        Format::Text => {
            for (name, ty) in &out {
                println!("{name} : {ty}");
            }
        }
        Format::Json => {
            let map: serde_json::Map<String, serde_json::Value> = out
                .into_iter()
                .map(|(k, v)| (k, serde_json::Value::String(v)))
                .collect();
            println!("{}", serde_json::Value::Object(map));
        }
    }
    EXIT_OK
}

pub fn cmd_run(path: &Path, common: &Common) -> i32 {
    let loaded = match load(path) {
        Ok(l) => l,
        Err(e) => return report_load_error(&e, common.format),
    };
    let Some(main) = &loaded.program.main else {
        eprintln!("{}: no main choreography", path.display());
        return EXIT_IO;
    };
    let externs = ExternTable::standard();
    for name in loaded.program.ctx.externs.keys() {
        if !externs.contains(name) {
            eprintln!("{}: no evaluator for extern {name}", path.display());
            return EXIT_IO;
        }
    }
    let env = RunEnv {
        defs: &loaded.program.defs,
        externs: &externs,
    };
    let result = runtime::run(
        &main.node,
        &env,
        Scheduler::Seeded(common.seed),
        common.fuel,
        common.rewrite_fuel,
    );
    if common.trace {
        let jsonl = result.trace.to_jsonl();
        match &common.out {
            Some(dir) => {
                if std::fs::create_dir_all(dir).is_err()
                    || std::fs::write(dir.join("run.trace.jsonl"), jsonl).is_err()
                {
                    eprintln!("cannot write trace to {}", dir.display());
                    return EXIT_IO;
                }
            }
            None => print!("{jsonl}"),
        }
    }
    match result.outcome {
        runtime::Outcome::Value(v) => {
            match common.format {
                Format::Text => println!("{}", surface::print_term(&v)),
                Format::Json => println!(
                    "{}",
                    serde_json::json!({"value": surface::print_term(&v), "steps": result.trace.steps.len()})
                ),
            }
            EXIT_OK
        }
        runtime::Outcome::Stuck(report) => {
            eprintln!(
                "stuck (this should be impossible for well-typed programs): {}",
                surface::print_term(&report.term)
            );
            EXIT_TYPE
        }
        runtime::Outcome::FuelExhausted => {
            eprintln!("fuel exhausted after {} steps", common.fuel);
            EXIT_FUEL
        }
    }
}

pub fn cmd_project(path: &Path, common: &Common) -> i32 {
    let loaded = match load(path) {
        Ok(l) => l,
        Err(e) => return report_load_error(&e, common.format),
    };
    let projected = match project::project_defs(&loaded.program.typed_defs, &loaded.program.defs)
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return EXIT_MERGE;
        }
    };
    let outdir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("projection"));
    if std::fs::create_dir_all(&outdir).is_err() {
        eprintln!("cannot create {}", outdir.display());
        return EXIT_IO;
    }
    let mut defs_text = String::new();
    for (name, (params, body)) in &projected {
        let params: Vec<_> = params.iter().map(Role::as_str).collect();
        defs_text.push_str(&format!(
            "def {name}({}) = {}\n",
            params.join(", "),
            print_behaviour(body)
        ));
    }
    if std::fs::write(outdir.join("defs.proc"), defs_text).is_err() {
        eprintln!("cannot write {}", outdir.join("defs.proc").display());
        return EXIT_IO;
    }
    let mut roles: BTreeSet<Role> = BTreeSet::new();
    if let Some(main) = &loaded.program.main {
        roles = main.derivation_roles();
        for role in &roles {
            let behaviour = match project::project_term(main, role) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("{}: {e}", path.display());
                    return EXIT_MERGE;
                }
            };
            let text = format!("-- projection at {role}\nmain = {}\n", print_behaviour(&behaviour));
            if std::fs::write(outdir.join(format!("{role}.proc")), text).is_err() {
                eprintln!("cannot write role file for {role}");
                return EXIT_IO;
            }
        }
    }
    let manifest = serde_json::json!({
        "source": path.display().to_string(),
        "roles": roles.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
        "definitions": projected.keys().map(|k| k.to_string()).collect::<Vec<_>>(),
    });
    if std::fs::write(
        outdir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )
    .is_err()
    {
        eprintln!("cannot write manifest");
        return EXIT_IO;
    }
    if common.format == Format::Text {
        println!(
            "projected {} definition(s) and {} role(s) to {}",
            projected.len(),
            roles.len(),
            outdir.display()
        );
    } else {
        println!("{manifest}");
    }
    EXIT_OK
}

pub fn cmd_simulate(path: &Path, common: &Common) -> i32 {
    let loaded = match load(path) {
        Ok(l) => l,
        Err(e) => return report_load_error(&e, common.format),
    };
    let Some(main) = &loaded.program.main else {
        eprintln!("{}: no main choreography", path.display());
        return EXIT_IO;
    };
    let projected = match project::project_defs(&loaded.program.typed_defs, &loaded.program.defs)
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return EXIT_MERGE;
        }
    };
    let network = match project::project_network(main) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return EXIT_MERGE;
        }
    };
    let externs = ExternTable::standard();
    let env = process::NetEnv {
        defs: &projected,
        externs: &externs,
    };
    let result = process::run_network(
        &network,
        &env,
        Scheduler::Seeded(common.seed),
        common.fuel,
        common.rewrite_fuel,
    );
    if common.trace {
        print!("{}", result.trace.to_jsonl());
    }
    match result.outcome {
        process::NetOutcome::Terminal(final_net) => {
            match common.format {
                Format::Text => {
                    for (role, behaviour) in &final_net.procs {
                        println!("{role}: {}", print_behaviour(behaviour));
                    }
                }
                Format::Json => println!(
                    "{}",
                    serde_json::json!({
                        "terminal": final_net.procs.iter()
                            .map(|(r, b)| (r.to_string(), print_behaviour(b)))
                            .collect::<std::collections::BTreeMap<_,_>>(),
                        "steps": result.trace.steps.len(),
                    })
                ),
            }
            EXIT_OK
        }
        process::NetOutcome::Deadlock(report) => {
            eprint!("{}", report.render());
            EXIT_TYPE
        }
        process::NetOutcome::FuelExhausted => {
            eprintln!("fuel exhausted after {} network steps", common.fuel);
            EXIT_FUEL
        }
    }
}

/// Run the full conformance suite over one checked program's main term.
pub fn conform_program(
    name: &str,
    loaded: &CheckedProgram,
    common: &Common,
    seeds: &[u64],
) -> Vec<CheckReport> {
    let externs = ExternTable::standard();
    let mut reports = Vec::new();
    let Some(main) = &loaded.main else {
        return reports;
    };
    let sample = conform::Sample {
        ctx: loaded
            .ctx
            .with_theta(main.derivation_roles().into_iter().collect()),
        defs: loaded.defs.clone(),
        term: main.node.clone(),
        typed: main.clone(),
    };
    let budget = CorrespondenceBudget {
        depth: common.depth,
        rewrite_fuel: common.rewrite_fuel,
        ..CorrespondenceBudget::default()
    };
    reports.push(CheckReport {
        check: "progress-preservation".into(),
        subject: name.into(),
        verdict: conform::check_progress_preservation(&sample, &externs, common.rewrite_fuel),
    });
    reports.push(CheckReport {
        check: "completeness".into(),
        subject: name.into(),
        verdict: conform::check_completeness(&sample, &externs, &budget),
    });
    reports.push(CheckReport {
        check: "soundness".into(),
        subject: name.into(),
        verdict: conform::check_soundness(&sample, &externs, &budget),
    });
    reports.push(CheckReport {
        check: "deadlock-freedom".into(),
        subject: name.into(),
        verdict: conform::check_deadlock_freedom(
            &sample,
            &externs,
            seeds,
            common.fuel,
            common.rewrite_fuel,
        ),
    });
    reports.push(CheckReport {
        check: "onesynch".into(),
        subject: name.into(),
        verdict: conform::check_onesynch(
            &sample,
            &externs,
            common.depth,
            common.rewrite_fuel,
            runtime::DEFAULT_STATE_CAP,
        ),
    });
    reports
}

pub fn cmd_conform(paths: &[PathBuf], gen: bool, samples: u64, common: &Common) -> i32 {
    let externs = ExternTable::standard();
    let seeds: Vec<u64> = (0..5).collect();
    let mut reports = Vec::new();
    for path in paths {
        let loaded = match load(path) {
            Ok(l) => l,
            Err(e) => return report_load_error(&e, common.format),
        };
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("file")
            .to_string();
        reports.extend(conform_program(&name, &loaded.program, common, &seeds));
    }
    if gen {
        let budget = CorrespondenceBudget {
            depth: common.depth,
            rewrite_fuel: common.rewrite_fuel,
            ..CorrespondenceBudget::default()
        };
        for i in 0..samples {
            let cfg = GenConfig {
                seed: common.seed.wrapping_add(i),
                max_depth: 4,
                ..GenConfig::default()
            };
            let sample = conform::gen_well_typed(&cfg);
            let subject = format!("gen-{}", cfg.seed);
            reports.push(CheckReport {
                check: "progress-preservation".into(),
                subject: subject.clone(),
                verdict: conform::check_progress_preservation(
                    &sample,
                    &externs,
                    common.rewrite_fuel,
                ),
            });
            reports.push(CheckReport {
                check: "completeness".into(),
                subject: subject.clone(),
                verdict: conform::check_completeness(&sample, &externs, &budget),
            });
            reports.push(CheckReport {
                check: "soundness".into(),
                subject: subject.clone(),
                verdict: conform::check_soundness(&sample, &externs, &budget),
            });
            reports.push(CheckReport {
                check: "deadlock-freedom".into(),
                subject: subject.clone(),
                verdict: conform::check_deadlock_freedom(
                    &sample,
                    &externs,
                    &seeds,
                    common.fuel,
                    common.rewrite_fuel,
                ),
            });
            reports.push(CheckReport {
                check: "onesynch".into(),
                subject,
                verdict: conform::check_onesynch(
                    &sample,
                    &externs,
                    common.depth,
                    common.rewrite_fuel,
                    runtime::DEFAULT_STATE_CAP,
                ),
            });
        }
    }
    let outdir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("conformance"));
    let _ = std::fs::create_dir_all(&outdir);
    let _ = std::fs::create_dir_all(outdir.join("witnesses"));
    let xml = conform::junit_xml("conformance", &reports);
    let _ = std::fs::write(outdir.join("conformance.xml"), xml);
    let mut failures = 0usize;
    for (i, report) in reports.iter().enumerate() {
        let line = match &report.verdict {
            Verdict::Pass => format!("PASS {} {}", report.check, report.subject),
            Verdict::Fail(m) => {
                failures += 1;
                let _ = std::fs::write(
                    outdir.join(format!("witnesses/{i:04}.json")),
                    serde_json::to_string_pretty(&conform::witness_json(report))
                        .expect("witness serialises"),
                );
                format!("FAIL {} {} — {m}", report.check, report.subject)
            }
            Verdict::Inconclusive(m) => {
                format!("INCONCLUSIVE {} {} — {m}", report.check, report.subject)
            }
        };
        println!("{line}");
    }
    if failures > 0 {
        EXIT_TYPE
    } else {
        EXIT_OK
    }
}

//! Command-line surface: scenario documents in, laws, trajectories and
//! reports out.
//!
//! Verbs: `check`, `synth`, `simulate`, `demo`, `oracle`. Exit codes are a
//! stable contract: 0 success, 1 usage or parse error, 2 incompatible
//! targets, 3 numeric failure (including an oracle disagreement).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::approach::{
    predict_terminal_large_f, ApproachLaw, ApproachOptions, CoreMode, DEFAULT_PENALTY,
};
use crate::error::Error;
use crate::feedback::{default_switch_time, FeedbackLaw, GramianRoute, HybridFamily};
use crate::model::{
    compatibility_residual, default_tolerance, generator_set, independent_constraint_count,
    LinearSystem, Scenario, TargetTensor,
};
use crate::numerics::{gramian, Matrix, Vector};
use crate::openloop::{synthesize, synthesize_with_pivot, OpenLoopLaw};
use crate::oracle::{
    arbitrate_modes, discretized_solve, kkt_solve, penalized_solve, stationarity_check,
};
use crate::scenarios::{self, compare_hybrid, DEMO_SEED, DEMO_SEED_COUNT};
use crate::sim::{
    run_ensemble, AffineFamily, EnsembleReport, NoiseConfig, OpenLoopFamily, SimOptions,
    DEFAULT_STEPS,
};

pub const DOCUMENT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INCOMPATIBLE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CHOICECTL_THREADS";

/// Tolerances of the `oracle` verb.
pub const ORACLE_PARAM_TOL: f64 = 1e-8;
pub const ORACLE_OBJECTIVE_TOL: f64 = 1e-10;
pub const ORACLE_PIVOT_TOL: f64 = 1e-9;
pub const ORACLE_STATIONARITY_TOL: f64 = 1e-7;
pub const ORACLE_DISCRETIZED_TOL: f64 = 1e-2;
pub const ORACLE_INITIAL_GAP_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => exit_code(e),
            CliError::Io { .. } | CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => EXIT_USAGE,
        Error::Incompatible { .. } => EXIT_INCOMPATIBLE,
        Error::Numeric(_)
        | Error::Singular { .. }
        | Error::Uncontrollable { .. }
        | Error::HorizonExhausted { .. }
        | Error::Consistency(_) => EXIT_NUMERIC,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// Scenario documents

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    OpenLoop,
    FeedbackHybrid,
    Approach,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::OpenLoop => "open_loop",
            ControllerKind::FeedbackHybrid => "feedback_hybrid",
            ControllerKind::Approach => "approach",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    /// Rows of `A`.
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    /// Rows of each agent's input matrix.
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonDoc {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsDoc {
    pub dims: Vec<usize>,
    /// Target vectors in row-major tuple order.
    pub entries: Vec<Vec<f64>>,
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub version: u32,
    pub system: SystemDoc,
    pub horizon: HorizonDoc,
    pub x0: Vec<f64>,
    pub targets: TargetsDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_f: Option<f64>,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<ApproachOptions>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> crate::Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::Dimension(format!(
            "{what} must be a nonempty matrix"
        )));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!(
            "{what} has rows of different lengths"
        )));
    }
    Ok(Matrix::from_row_iterator(
        r,
        c,
        rows.iter().flatten().copied(),
    ))
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ScenarioDocument {
    /// Parses and validates a document; errors carry line and column.
    pub fn parse(text: &str) -> crate::Result<Self> {
        let doc: ScenarioDocument =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::Config(format!(
                "unsupported document version {}, expected {DOCUMENT_VERSION}",
                doc.version
            )));
        }
        doc.to_scenario()?;
        Ok(doc)
    }

    pub fn from_scenario(
        s: &Scenario,
        controller: ControllerKind,
        approach: Option<ApproachOptions>,
    ) -> Self {
        ScenarioDocument {
            version: DOCUMENT_VERSION,
            system: SystemDoc {
                a: matrix_rows(s.system.a()),
                b: s.system.inputs().iter().map(matrix_rows).collect(),
            },
            horizon: HorizonDoc {
                t0: s.t0,
                t_final: s.t_final,
                switch_time: s.switch_time,
            },
            x0: s.x0.iter().copied().collect(),
            targets: TargetsDoc {
                dims: s.targets.dims().to_vec(),
                entries: s
                    .targets
                    .entries()
                    .iter()
                    .map(|v| v.iter().copied().collect())
                    .collect(),
            },
            noise: s.noise.clone(),
            penalty_f: s.penalty_weight,
            controller,
            approach,
        }
    }

    pub fn to_scenario(&self) -> crate::Result<Scenario> {
        let a = matrix_from_rows(&self.system.a, "A")?;
        let inputs = self
            .system
            .b
            .iter()
            .enumerate()
            .map(|(l, rows)| matrix_from_rows(rows, &format!("B[{l}]")))
            .collect::<crate::Result<Vec<_>>>()?;
        let system = LinearSystem::new(a, inputs)?;
        let entries = self
            .targets
            .entries
            .iter()
            .map(|v| Vector::from_vec(v.clone()))
            .collect();
        let targets = TargetTensor::new(self.targets.dims.clone(), entries)?;
        let scenario = Scenario {
            system,
            t0: self.horizon.t0,
            t_final: self.horizon.t_final,
            x0: Vector::from_vec(self.x0.clone()),
            targets,
            switch_time: self.horizon.switch_time,
            penalty_weight: self.penalty_f,
            noise: self.noise.clone(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical pretty-printed form, newline terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents always serialize");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "choicectl",
    version,
    about = "Choice-based cooperative control synthesis and simulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// RK4 steps per horizon.
    #[arg(long, global = true)]
    pub steps: Option<usize>,

    /// Noise seed, replacing the scenario's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Compatibility tolerance.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,

    /// Approach-law core interpretation: product or as-printed.
    #[arg(long, global = true)]
    pub mode: Option<CoreMode>,

    /// Output file (synth) or directory (simulate, demo).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report target compatibility and the generator set.
    Check { scenario: PathBuf },
    /// Synthesize the scenario's control law.
    Synth { scenario: PathBuf },
    /// Simulate every choice tuple and write CSV trajectories.
    Simulate { scenario: PathBuf },
    /// Run a canned demo: rendezvous_fig2 or rendezvous_noisy.
    Demo { name: String },
    /// Verify the synthesized laws against the optimization oracles.
    Oracle { scenario: PathBuf },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Core(Error::Incompatible { .. }) = e {
                let _ = writeln!(
                    err,
                    "hint: use controller: approach for incompatible targets"
                );
            }
            e.exit_code()
        }
    }
}

/// Builds the global thread pool from `CHOICECTL_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got '{value}'"
            ))
        })?;
    // A pool that already exists (repeated in-process runs) is left as is.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<i32> {
    configure_threads()?;
    match &cli.command {
        Command::Check { scenario } => cmd_check(cli, scenario, out),
        Command::Synth { scenario } => cmd_synth(cli, scenario, out),
        Command::Simulate { scenario } => cmd_simulate(cli, scenario, out),
        Command::Demo { name } => cmd_demo(cli, name, out),
        Command::Oracle { scenario } => cmd_oracle(cli, scenario, out),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn read_document(path: &Path) -> CliResult<ScenarioDocument> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioDocument::parse(&text).map_err(|e| match e {
        Error::Config(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => CliError::Core(other),
    })
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require_out(cli: &Cli, verb: &str) -> CliResult<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{verb} needs --out <DIR>")))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values always serialize");
    s.push('\n');
    s
}

fn vec_json(v: &Vector) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn mat_json(m: &Matrix) -> Value {
    json!(matrix_rows(m))
}

fn one_based(choices: &[usize]) -> Vec<usize> {
    choices.iter().map(|i| i + 1).collect()
}

/// A document resolved against the command-line flags and CLI defaults.
struct Resolved {
    doc: ScenarioDocument,
    scenario: Scenario,
    approach: ApproachOptions,
    penalty: f64,
    penalty_source: &'static str,
    switch_source: &'static str,
}

fn resolve(cli: &Cli, doc: ScenarioDocument) -> CliResult<Resolved> {
    let mut scenario = doc.to_scenario()?;
    let mut approach = doc.approach.unwrap_or_default();
    if let Some(mode) = cli.mode {
        approach.core = mode;
    }
    let (penalty, penalty_source) = match scenario.penalty_weight {
        Some(f) => (f, "document"),
        None => (DEFAULT_PENALTY, "default"),
    };
    let mut switch_source = "document";
    if doc.controller == ControllerKind::FeedbackHybrid && scenario.switch_time.is_none() {
        scenario.switch_time = Some(default_switch_time(scenario.t0, scenario.t_final));
        switch_source = "default";
    }
    if let (Some(seed), Some(noise)) = (cli.seed, scenario.noise.as_mut()) {
        noise.seed = seed;
    }
    Ok(Resolved {
        doc,
        scenario,
        approach,
        penalty,
        penalty_source,
        switch_source,
    })
}

fn steps(cli: &Cli) -> CliResult<usize> {
    match cli.steps {
        Some(0) => Err(CliError::Usage("--steps must be positive".into())),
        Some(n) => Ok(n),
        None => Ok(DEFAULT_STEPS),
    }
}

fn compatibility_guard(cli: &Cli, targets: &TargetTensor) -> CliResult<()> {
    let residual = compatibility_residual(targets);
    let tol = cli.tolerance.unwrap_or_else(|| default_tolerance(targets));
    if residual > tol {
        return Err(Error::Incompatible { residual }.into());
    }
    Ok(())
}

fn provenance(r: &Resolved) -> Value {
    let mut p = json!({
        "scenario_sha256": r.doc.hash(),
        "controller": r.doc.controller.name(),
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    match r.doc.controller {
        ControllerKind::Approach => {
            p["approach_core"] = json!(r.approach.core.name());
            p["approach_offsets"] = json!(r.approach.offsets.name());
            p["penalty_f"] = json!(r.penalty);
            p["penalty_source"] = json!(r.penalty_source);
        }
        ControllerKind::FeedbackHybrid => {
            p["switch_time"] = json!(r.scenario.switch_time);
            p["switch_time_source"] = json!(r.switch_source);
        }
        ControllerKind::OpenLoop => {}
    }
    p
}

// ---------------------------------------------------------------------------
// check

fn cmd_check(cli: &Cli, path: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let doc = read_document(path)?;
    let scenario = doc.to_scenario()?;
    let h = &scenario.targets;
    let residual = compatibility_residual(h);
    let tol = cli.tolerance.unwrap_or_else(|| default_tolerance(h));
    let compatible = residual <= tol;
    let mut text = String::new();
    let verdict = if compatible {
        "compatible"
    } else {
        "incompatible"
    };
    let _ = writeln!(text, "{verdict}, residual {residual}");
    let _ = writeln!(text, "tolerance {tol:e}");
    let g = generator_set(h);
    let _ = writeln!(text, "generator set ({} entries):", g.len());
    let base_idx = vec![1; h.order()];
    let _ = writeln!(text, "  H{base_idx:?} = {:?}", g.base.as_slice());
    for (l, rays) in g.rays.iter().enumerate() {
        for (k, v) in rays.iter().enumerate() {
            let mut idx = base_idx.clone();
            idx[l] = k + 2;
            let _ = writeln!(text, "  H{idx:?} = {:?}", v.as_slice());
        }
    }
    let _ = writeln!(
        text,
        "independent constraints: {} per state component",
        independent_constraint_count(h.dims())
    );
    write_stdout(out, &text)?;
    Ok(if compatible {
        EXIT_OK
    } else {
        EXIT_INCOMPATIBLE
    })
}

fn write_stdout(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
}

// ---------------------------------------------------------------------------
// synth

fn open_loop_json(law: &OpenLoopLaw) -> Value {
    let params: Vec<Vec<Value>> = law
        .params()
        .iter()
        .map(|ps| ps.iter().map(vec_json).collect())
        .collect();
    json!({
        "form": "u_l^i(t) = B_l^T exp(-A^T t) P_l^i",
        "params": params,
        "average_cost": law.average_cost(),
    })
}

/// The law document for a resolved scenario.
fn law_document(cli: &Cli, r: &Resolved) -> CliResult<Value> {
    let s = &r.scenario;
    let mut doc = json!({
        "format": "choicectl-law",
        "version": DOCUMENT_VERSION,
        "provenance": provenance(r),
        "horizon": { "t0": s.t0, "T": s.t_final },
    });
    match r.doc.controller {
        ControllerKind::OpenLoop => {
            compatibility_guard(cli, &s.targets)?;
            doc["open_loop"] = open_loop_json(&synthesize(s)?);
        }
        ControllerKind::FeedbackHybrid => {
            compatibility_guard(cli, &s.targets)?;
            let law = synthesize(s)?;
            let fb = FeedbackLaw::new(s)?;
            doc["open_loop"] = open_loop_json(&law);
            doc["feedback"] = json!({
                "form": "u_i = -B^T K(t) x + L_ui(t), v_j = -C^T K(t) x + L_vj(t)",
                "switch_time": s.switch_time,
                "horizon_guard": fb.guard(),
                "gain_at_t0": mat_json(&fb.gain_k(s.t0)?),
            });
        }
        ControllerKind::Approach => {
            let law = ApproachLaw::new(s, r.penalty, r.approach)?;
            let sys = &s.system;
            let wb = gramian(sys.a(), sys.input(0), s.t0, s.t_final)?.value;
            let wc = gramian(sys.a(), sys.input(1), s.t0, s.t_final)?.value;
            let (nu, nv) = law.choice_counts();
            let mut large_f = Vec::new();
            for i in 0..nu {
                let row: Vec<Value> = (0..nv)
                    .map(|j| predict_terminal_large_f(&s.targets, i, j).map(|v| vec_json(&v)))
                    .collect::<crate::Result<_>>()?;
                large_f.push(row);
            }
            doc["approach"] = json!({
                "penalty_f": r.penalty,
                "core": r.approach.core.name(),
                "offsets": r.approach.offsets.name(),
                "core_matrix": mat_json(law.core()),
                "gramian_b": mat_json(&wb),
                "gramian_c": mat_json(&wc),
                "predicted_terminal_sum": vec_json(&law.predict_terminal_sum(&s.x0)?),
                "large_f_terminal_predictions": large_f,
            });
        }
    }
    Ok(doc)
}

fn cmd_synth(cli: &Cli, path: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let r = resolve(cli, read_document(path)?)?;
    let text = pretty(&law_document(cli, &r)?);
    match &cli.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => write_stdout(out, &text)?,
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// simulate

/// Runs the resolved controller over every choice tuple.
fn simulate_resolved(
    cli: &Cli,
    r: &Resolved,
    steps: usize,
    record: bool,
) -> CliResult<EnsembleReport> {
    let s = &r.scenario;
    let opts = SimOptions { steps, record };
    let noise = s.noise.as_ref();
    let report = match r.doc.controller {
        ControllerKind::OpenLoop => {
            compatibility_guard(cli, &s.targets)?;
            run_ensemble(
                s,
                &OpenLoopFamily::scheduled(synthesize(s)?, steps)?,
                noise,
                &opts,
            )?
        }
        ControllerKind::FeedbackHybrid => {
            compatibility_guard(cli, &s.targets)?;
            run_ensemble(s, &HybridFamily::scheduled(s, steps)?, noise, &opts)?
        }
        ControllerKind::Approach => {
            let law = ApproachLaw::new(s, r.penalty, r.approach)?.with_route(GramianRoute::Block);
            let family = AffineFamily::scheduled(Arc::new(law), s.t0, s.t_final, steps)?;
            run_ensemble(s, &family, noise, &opts)?
        }
    };
    Ok(report)
}

/// CSV with header `t,x_1..x_n,u_agent1_1..,u_agent2_1..` and 17 significant digits.
pub fn trajectory_csv(traj: &crate::sim::Trajectory) -> String {
    let mut s = String::from("t");
    let n = traj.states.first().map_or(0, Vector::len);
    for k in 1..=n {
        let _ = write!(s, ",x_{k}");
    }
    if let Some(us) = traj.controls.first() {
        for (l, u) in us.iter().enumerate() {
            for k in 1..=u.len() {
                let _ = write!(s, ",u_agent{}_{k}", l + 1);
            }
        }
    }
    s.push('\n');
    for ((t, x), us) in traj.times.iter().zip(&traj.states).zip(&traj.controls) {
        let _ = write!(s, "{t:.16e}");
        for v in x.iter().chain(us.iter().flat_map(|u| u.iter())) {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

fn tuple_file_name(choices: &[usize]) -> String {
    let idx: Vec<String> = one_based(choices).iter().map(usize::to_string).collect();
    format!("tuple_{}.csv", idx.join("_"))
}

fn summary_json(r: &Resolved, report: &EnsembleReport, steps: usize) -> Value {
    let tuples: Vec<Value> = report
        .tuples
        .iter()
        .map(|t| {
            json!({
                "choices": one_based(&t.choices),
                "file": tuple_file_name(&t.choices),
                "terminal_state": vec_json(&t.terminal_state),
                "terminal_error": vec_json(&t.terminal_error),
                "measured_cost": t.measured_cost,
                "seed": t.seed,
            })
        })
        .collect();
    json!({
        "format": "choicectl-summary",
        "version": DOCUMENT_VERSION,
        "provenance": provenance(r),
        "steps": steps,
        "noise": r.scenario.noise,
        "average_cost": report.average_cost,
        "max_terminal_error": report.max_terminal_error,
        "tuples": tuples,
    })
}

fn write_run(dir: &Path, r: &Resolved, report: &EnsembleReport, steps: usize) -> CliResult<()> {
    ensure_dir(dir)?;
    for traj in &report.trajectories {
        write_atomic(
            &dir.join(tuple_file_name(&traj.choices)),
            trajectory_csv(traj).as_bytes(),
        )?;
    }
    write_atomic(
        &dir.join("summary.json"),
        pretty(&summary_json(r, report, steps)).as_bytes(),
    )
}

fn cmd_simulate(cli: &Cli, path: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let dir = require_out(cli, "simulate")?;
    let r = resolve(cli, read_document(path)?)?;
    let steps = steps(cli)?;
    let report = simulate_resolved(cli, &r, steps, true)?;
    write_run(&dir, &r, &report, steps)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "controller {}, {} tuples, {steps} steps",
        r.doc.controller.name(),
        report.tuples.len()
    );
    for t in &report.tuples {
        let _ = writeln!(
            text,
            "  tuple {:?}: terminal error {:.6e}, cost {:.6e}",
            one_based(&t.choices),
            t.terminal_error.amax(),
            t.measured_cost
        );
    }
    let _ = writeln!(text, "average cost {:.12e}", report.average_cost);
    let _ = writeln!(text, "max terminal error {:.6e}", report.max_terminal_error);
    write_stdout(out, &text)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// demo

fn demo_scenario(name: &str, seed: u64) -> CliResult<Scenario> {
    match name {
        "rendezvous_fig2" => Ok(scenarios::rendezvous_fig2()),
        "rendezvous_noisy" => Ok(scenarios::rendezvous_noisy(seed)),
        other => Err(CliError::Usage(format!(
            "unknown demo '{other}', expected rendezvous_fig2 or rendezvous_noisy"
        ))),
    }
}

fn cmd_demo(cli: &Cli, name: &str, out: &mut dyn Write) -> CliResult<i32> {
    let dir = require_out(cli, "demo")?;
    let seed = cli.seed.unwrap_or(DEMO_SEED);
    let scenario = demo_scenario(name, seed)?;
    let steps = steps(cli)?;
    ensure_dir(&dir)?;

    let mut text = String::new();
    let mut modes = serde_json::Map::new();
    for kind in [ControllerKind::OpenLoop, ControllerKind::FeedbackHybrid] {
        let doc = ScenarioDocument::from_scenario(&scenario, kind, None);
        write_atomic(
            &dir.join(format!("scenario_{}.json", kind.name())),
            doc.to_json().as_bytes(),
        )?;
        let r = resolve(cli, doc)?;
        let law = law_document(cli, &r)?;
        write_atomic(
            &dir.join(format!("law_{}.json", kind.name())),
            pretty(&law).as_bytes(),
        )?;
        let report = simulate_resolved(cli, &r, steps, true)?;
        write_run(&dir.join(kind.name()), &r, &report, steps)?;
        let _ = writeln!(
            text,
            "{:<16} average cost {:>14.6e}   max terminal error {:>12.6e}   mean terminal error {:>12.6e}",
            kind.name(),
            report.average_cost,
            report.max_terminal_error,
            scenarios::mean_terminal_error(&report)
        );
        for t in &report.tuples {
            let _ = writeln!(
                text,
                "    tuple {:?}: e(T) = {:.9}, terminal error {:.3e}",
                one_based(&t.choices),
                t.terminal_state[0],
                t.terminal_error.amax()
            );
        }
        modes.insert(
            kind.name().to_string(),
            json!({
                "average_cost": report.average_cost,
                "max_terminal_error": report.max_terminal_error,
                "mean_terminal_error": scenarios::mean_terminal_error(&report),
            }),
        );
    }

    let mut comparison = json!({
        "format": "choicectl-demo",
        "demo": name,
        "steps": steps,
        "seed": scenario.noise.as_ref().map(|n| n.seed),
        "runs": Value::Object(modes),
    });
    if scenario.noise.is_some() {
        let seeds: Vec<u64> = (0..DEMO_SEED_COUNT as u64).map(|k| seed + k).collect();
        let cmp = compare_hybrid(&scenario, &seeds, steps)?;
        let per_seed: Vec<Value> = cmp
            .outcomes
            .iter()
            .map(|o| {
                json!({
                    "seed": o.seed,
                    "open_loop_error": o.open_loop_error,
                    "hybrid_error": o.hybrid_error,
                    "open_loop_cost": o.open_loop_cost,
                    "hybrid_cost": o.hybrid_cost,
                })
            })
            .collect();
        comparison["monte_carlo"] = json!({
            "seeds": seeds,
            "median_open_loop_error": cmp.median_open_loop_error(),
            "median_hybrid_error": cmp.median_hybrid_error(),
            "median_open_loop_cost": cmp.median_open_loop_cost(),
            "median_hybrid_cost": cmp.median_hybrid_cost(),
            "per_seed": per_seed,
        });
        let _ = writeln!(
            text,
            "monte carlo over {} seeds starting at {seed}:",
            seeds.len()
        );
        let _ = writeln!(
            text,
            "  median terminal error: open_loop {:.6e}, feedback_hybrid {:.6e}",
            cmp.median_open_loop_error(),
            cmp.median_hybrid_error()
        );
        let _ = writeln!(
            text,
            "  median measured cost:  open_loop {:.6e}, feedback_hybrid {:.6e}",
            cmp.median_open_loop_cost(),
            cmp.median_hybrid_cost()
        );
    }
    write_atomic(&dir.join("comparison.json"), pretty(&comparison).as_bytes())?;
    write_stdout(out, &text)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// oracle

fn rel_diff(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

struct Checks {
    text: String,
    all_pass: bool,
}

impl Checks {
    fn new() -> Self {
        Checks {
            text: String::new(),
            all_pass: true,
        }
    }

    fn record(&mut self, label: &str, value: f64, tol: f64) {
        let pass = value <= tol;
        self.all_pass &= pass;
        let verdict = if pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            self.text,
            "{verdict} {label}: {value:.3e} (tolerance {tol:.0e})"
        );
    }

    fn note(&mut self, line: &str) {
        let _ = writeln!(self.text, "{line}");
    }
}

fn cmd_oracle(cli: &Cli, path: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let r = resolve(cli, read_document(path)?)?;
    let s = &r.scenario;
    let mut checks = Checks::new();
    let residual = compatibility_residual(&s.targets);
    let tol = cli
        .tolerance
        .unwrap_or_else(|| default_tolerance(&s.targets));
    let compatible = residual <= tol;

    if r.doc.controller != ControllerKind::Approach {
        if !compatible {
            checks.note(&format!(
                "closed form: not applicable, targets incompatible (residual {residual}); use controller: approach"
            ));
            write_stdout(out, &checks.text)?;
            return Ok(EXIT_INCOMPATIBLE);
        }
        let law = synthesize(s)?;
        let kkt = kkt_solve(s)?;
        let z = crate::oracle::ParamLayout::new(s.system.state_dim(), s.targets.dims())
            .flatten(law.params());
        checks.record(
            "closed form vs kkt: relative parameter difference",
            rel_diff(&z, &kkt.z),
            ORACLE_PARAM_TOL,
        );
        let cost = law.average_cost();
        let obj_diff = (cost - kkt.objective).abs() / kkt.objective.abs().max(1.0);
        checks.record(
            "closed form vs kkt: objective difference relative to max(1, |J|)",
            obj_diff,
            ORACLE_OBJECTIVE_TOL,
        );
        let mut pivot_gap: f64 = 0.0;
        for pivot in 0..s.system.agents() {
            let other = synthesize_with_pivot(s, pivot)?;
            for (ps, qs) in other.params().iter().zip(law.params()) {
                for (p, q) in ps.iter().zip(qs) {
                    pivot_gap = pivot_gap.max(rel_diff(p, q));
                }
            }
        }
        checks.record(
            "pivot invariance: relative parameter difference",
            pivot_gap,
            ORACLE_PIVOT_TOL,
        );
        checks.record(
            "stationarity: directional derivative along constraint tangents",
            stationarity_check(&law, s, 8)?,
            ORACLE_STATIONARITY_TOL,
        );
        let disc = discretized_solve(s, 20)?;
        let excess = (disc.objective - kkt.objective) / kkt.objective.abs().max(1.0);
        checks.record(
            "piecewise-constant oracle: excess over optimum relative to max(1, |J|)",
            excess,
            ORACLE_DISCRETIZED_TOL,
        );
        checks.note(&format!(
            "kkt objective {:.12e}, constraint rank {}",
            kkt.objective, kkt.constraint_rank
        ));
    }

    if s.system.agents() == 2 && (r.doc.controller == ControllerKind::Approach || !compatible) {
        let f = r.penalty;
        let oracle = penalized_solve(s, f)?;
        let law = ApproachLaw::new(s, f, r.approach)?;
        checks.record(
            &format!(
                "approach ({}/{}) vs penalized oracle: control gap at t0",
                r.approach.core, r.approach.offsets
            ),
            crate::oracle::initial_control_gap(s, &law, &oracle)?,
            ORACLE_INITIAL_GAP_TOL,
        );
        let report = arbitrate_modes(s, f, steps(cli)?)?;
        checks.note(report.render().trim_end());
        checks.note("note: trajectory-level gaps reflect the feedback law re-solving from each tuple's own state");
    }
    write_stdout(out, &checks.text)?;
    Ok(if checks.all_pass {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    })
}

//! JSON run configuration and the experiment driver behind the CLI.
//!
//! Parsing is strict: unknown keys are rejected, and semantic validation
//! reports every problem it finds rather than stopping at the first.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::coupling::{
    check_flux_conservation, conservation_mode, run_simulation, DiscreteProblem, RunOptions, SolverKind,
    Trajectory, WindowConfig,
};
use crate::dgit::QuadratureFlags;
use crate::error::{Error, Result};
use crate::fespace::{assemble_on_grid, Advection, ProblemSpec, SpaceFn};
use crate::timepoly::{build_dtilde, SchemeSpec};
use crate::verify::{
    convergence_study, energy_report, reference_solve_default, ManufacturedCase, MmsPreset, RateTable,
    RateTarget, ReferenceScheme, StudySetup,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub problem: ProblemConfig,
    pub scheme: SchemeConfig,
    pub window: WindowSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub quadrature: QuadratureChoice,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub nx: usize,
    pub ny: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub nu: [f64; 2],
    #[serde(default = "default_advection")]
    pub advection: [AdvectionConfig; 2],
    /// Rows of `B`.
    pub coupling: [[f64; 2]; 2],
    /// `"zero"` or `"mms:<preset>"`.
    #[serde(default = "default_forcing")]
    pub forcing: String,
    #[serde(default)]
    pub initial: Option<InitialChoice>,
}

fn default_advection() -> [AdvectionConfig; 2] {
    [AdvectionConfig::Zero, AdvectionConfig::Zero]
}

fn default_forcing() -> String {
    "zero".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdvectionConfig {
    Zero,
    Tangential { sx: f64 },
    Vortex { amplitude: f64 },
}

impl From<AdvectionConfig> for Advection {
    fn from(a: AdvectionConfig) -> Self {
        match a {
            AdvectionConfig::Zero => Advection::Zero,
            AdvectionConfig::Tangential { sx } => Advection::Tangential { sx },
            AdvectionConfig::Vortex { amplitude } => Advection::Vortex { amplitude },
        }
    }
}

/// Initial data. Defaults: `bump` for unforced problems, `prepared` for
/// manufactured ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialChoice {
    Zero,
    /// `sin(πx)(1 - y²)` on the upper subdomain, half of it on the lower one.
    Bump,
    /// Interpolant of the manufactured solution.
    Exact,
    /// Discrete state without a fast transient (manufactured problems only).
    Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SchemeConfig {
    CrankNicolson,
    Dg {
        q: usize,
        #[serde(default)]
        n_s: Option<usize>,
        #[serde(default)]
        thetas: Option<Vec<f64>>,
        /// Rows of `D`.
        #[serde(default)]
        side_matrix: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub t_final: f64,
    pub windows: usize,
    pub substeps: [usize; 2],
    pub flux_orders: [usize; 2],
    #[serde(default = "one")]
    pub init_windows: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SolverConfig {
    #[default]
    Direct,
    FixedPoint {
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureChoice {
    /// Trapezoid for Crank–Nicolson, exact otherwise.
    #[default]
    Default,
    Exact,
    Trapezoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetChoice {
    #[default]
    L2,
    Nodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceChoice {
    #[default]
    CrankNicolson,
    DgQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    #[default]
    Run,
    Convergence {
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default)]
        target: TargetChoice,
        #[serde(default)]
        reference: ReferenceChoice,
    },
    Conservation,
    Energy,
}

fn default_levels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output")]
    pub directory: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("mrcouple-out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_output(),
        }
    }
}

/// Forcing named in a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    Zero,
    Manufactured(MmsPreset),
}

fn parse_forcing(s: &str) -> Option<Forcing> {
    match s {
        "zero" => Some(Forcing::Zero),
        _ => s
            .strip_prefix("mms:")
            .and_then(MmsPreset::parse)
            .map(Forcing::Manufactured),
    }
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let errors = cfg.validation_errors();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config(&text)
}

impl RunConfig {
    /// Every validation problem, each naming its field.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let g = &self.geometry;
        if g.nx == 0 {
            errs.push("geometry.nx must be at least 1".into());
        }
        for i in 0..2 {
            if g.ny[i] == 0 {
                errs.push(format!("geometry.ny[{i}] must be at least 1"));
            }
        }
        let p = &self.problem;
        for i in 0..2 {
            if !(p.nu[i].is_finite() && p.nu[i] > 0.0) {
                errs.push(format!("problem.nu[{i}] must be positive, got {}", p.nu[i]));
            }
        }
        if p.coupling.iter().flatten().any(|b| !b.is_finite()) {
            errs.push("problem.coupling has non-finite entries".into());
        }
        match parse_forcing(&p.forcing) {
            None => errs.push(format!(
                "problem.forcing: unknown preset `{}` (expected zero, mms:smooth, mms:polynomial or mms:antisymmetric)",
                p.forcing
            )),
            Some(Forcing::Manufactured(_)) => {
                if p.advection.iter().any(|a| matches!(a, AdvectionConfig::Vortex { .. })) {
                    errs.push("problem.advection: manufactured forcing supports zero or tangential advection only".into());
                }
            }
            Some(Forcing::Zero) => {
                if matches!(p.initial, Some(InitialChoice::Exact | InitialChoice::Prepared)) {
                    errs.push("problem.initial: `exact` and `prepared` need a manufactured forcing".into());
                }
            }
        }
        if let Err(e) = self.scheme_spec() {
            errs.push(e);
        }
        let w = &self.window;
        if !(w.t_final.is_finite() && w.t_final > 0.0) {
            errs.push(format!("window.t_final must be positive, got {}", w.t_final));
        }
        if w.windows == 0 {
            errs.push("window.windows must be at least 1".into());
        }
        for i in 0..2 {
            if w.substeps[i] == 0 {
                errs.push(format!("window.substeps[{i}] must be at least 1"));
            }
        }
        if w.init_windows == 0 || w.init_windows > w.windows.max(1) {
            errs.push(format!(
                "window.init_windows must lie in 1..={}, got {}",
                w.windows.max(1),
                w.init_windows
            ));
        }
        if let SolverConfig::FixedPoint { tol, max_iter } = self.solver {
            if !(tol.is_finite() && tol > 0.0) {
                errs.push(format!("solver.tol must be positive, got {tol}"));
            }
            if max_iter == 0 {
                errs.push("solver.max_iter must be at least 1".into());
            }
        }
        if let ExperimentConfig::Convergence { levels, .. } = self.experiment {
            if levels < 3 {
                errs.push(format!("experiment.levels must be at least 3, got {levels}"));
            }
            if !matches!(parse_forcing(&p.forcing), Some(Forcing::Manufactured(_))) {
                errs.push(
                    "experiment: convergence studies need a manufactured forcing (mms:<preset>)".into(),
                );
            }
        }
        errs
    }

    /// The scheme, with the side-condition check applied.
    pub fn scheme_spec(&self) -> std::result::Result<SchemeSpec, String> {
        match &self.scheme {
            SchemeConfig::CrankNicolson => Ok(SchemeSpec::crank_nicolson()),
            SchemeConfig::Dg {
                q,
                n_s,
                thetas,
                side_matrix,
            } => {
                let (thetas, d) = match (thetas, side_matrix) {
                    (None, None) => (vec![1.0], DMatrix::from_element(1, 1, 1.0)),
                    (Some(t), Some(rows)) => {
                        let ncols = rows.first().map_or(0, Vec::len);
                        if rows.iter().any(|r| r.len() != ncols) {
                            return Err("scheme.side_matrix rows must have equal length".into());
                        }
                        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                        (t.clone(), DMatrix::from_row_slice(rows.len(), ncols, &flat))
                    }
                    _ => return Err("scheme: thetas and side_matrix must be given together".into()),
                };
                if let Some(n) = n_s {
                    if *n != thetas.len() {
                        return Err(format!(
                            "scheme.n_s = {n} does not match the {} side-condition nodes",
                            thetas.len()
                        ));
                    }
                }
                let name = format!("dg{q}");
                let raw = SchemeSpec::new_unchecked(name.clone(), *q, thetas.clone(), d.clone())
                    .map_err(|e| format!("scheme: {e}"))?;
                let report = build_dtilde(&raw);
                if !report.nonsingular {
                    return Err(format!(
                        "scheme.thetas: side-condition check failed, D̃ is singular (det = {:.3e}) for thetas {:?}",
                        report.determinant, thetas
                    ));
                }
                SchemeSpec::new(name, *q, thetas, d).map_err(|e| format!("scheme: {e}"))
            }
        }
    }

    pub fn forcing(&self) -> Forcing {
        parse_forcing(&self.problem.forcing).unwrap_or(Forcing::Zero)
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        let w = &self.window;
        WindowConfig::new(w.t_final, w.windows, w.substeps, w.flux_orders)?.with_init_windows(w.init_windows)
    }

    pub fn coupling(&self) -> Matrix2<f64> {
        let b = self.problem.coupling;
        Matrix2::new(b[0][0], b[0][1], b[1][0], b[1][1])
    }

    pub fn run_options(&self, spec: &SchemeSpec) -> RunOptions {
        let quadrature = match self.quadrature {
            QuadratureChoice::Default => QuadratureFlags::default_for(spec),
            QuadratureChoice::Exact => QuadratureFlags::exact(),
            QuadratureChoice::Trapezoid => QuadratureFlags::trapezoid(),
        };
        let solver = match self.solver {
            SolverConfig::Direct => SolverKind::Direct,
            SolverConfig::FixedPoint { tol, max_iter } => SolverKind::FixedPoint { tol, max_iter },
        };
        RunOptions { quadrature, solver }
    }
}

/// Everything needed to run a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub problem: DiscreteProblem,
    pub spec: SchemeSpec,
    pub window: WindowConfig,
    pub options: RunOptions,
    pub case: Option<ManufacturedCase>,
}

/// Builds operators, loads and initial data of a validated configuration.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let spec = cfg.scheme_spec().map_err(|e| Error::Config(vec![e]))?;
    let window = cfg.window_config()?;
    let options = cfg.run_options(&spec);
    let advection = cfg.problem.advection.map(Advection::from);
    let b = cfg.coupling();
    let (nx, ny) = (cfg.geometry.nx, cfg.geometry.ny);
    let (problem, case) = match cfg.forcing() {
        Forcing::Zero => {
            let bump: [SpaceFn; 2] = [
                Arc::new(|x: f64, y: f64| (std::f64::consts::PI * x).sin() * (1.0 - y * y)),
                Arc::new(|x: f64, y: f64| 0.5 * (std::f64::consts::PI * x).sin() * (1.0 - y * y)),
            ];
            let mut pspec = ProblemSpec::new(cfg.problem.nu, advection, b)?;
            if cfg.problem.initial != Some(InitialChoice::Zero) {
                pspec = pspec.with_initial(bump);
            }
            let ops = assemble_on_grid(nx, ny, &pspec)?;
            let loads = ops.loads(&pspec)?;
            let initial = ops.initial_state(&pspec)?;
            (DiscreteProblem { ops, loads, initial }, None)
        }
        Forcing::Manufactured(preset) => {
            let case = ManufacturedCase::new(preset, cfg.problem.nu, advection, b)?;
            let mut problem = case.discretize(nx, ny)?;
            match cfg.problem.initial.unwrap_or(InitialChoice::Prepared) {
                InitialChoice::Prepared => problem.initial = case.prepared_initial(&problem)?,
                InitialChoice::Zero => problem.initial = problem.initial.clone().map(|v| v * 0.0),
                InitialChoice::Exact | InitialChoice::Bump => {}
            }
            (problem, Some(case))
        }
    };
    if let Some(h) = problem.ops.mesh_size() {
        let spec_p = ProblemSpec::new(cfg.problem.nu, advection, b)?;
        if spec_p.advection_dominated(h) {
            log::warn!(
                "advection dominates diffusion on this mesh (cell Péclet > 2); no stabilization is applied"
            );
        }
    }
    Ok(Prepared {
        problem,
        spec,
        window,
        options,
        case,
    })
}

/// Summary of a single run, written next to the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scheme: String,
    pub windows: usize,
    pub substeps: [usize; 2],
    pub flux_orders: [usize; 2],
    pub dofs: [usize; 2],
    pub interface_dofs: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub energy_non_increasing: bool,
    pub max_conservation_residual: Option<f64>,
    pub max_interfacial_energy_term: Option<f64>,
    pub max_iterations: usize,
    pub max_window_residual: f64,
}

pub fn summarize(prepared: &Prepared, traj: &Trajectory) -> RunSummary {
    let ops = &prepared.problem.ops;
    let report = energy_report(traj);
    let max_opt = |v: &[Option<f64>]| v.iter().flatten().copied().reduce(f64::max);
    RunSummary {
        scheme: prepared.spec.name().into(),
        windows: traj.windows.len(),
        substeps: prepared.window.substeps,
        flux_orders: prepared.window.flux_orders,
        dofs: [ops.dim(0), ops.dim(1)],
        interface_dofs: ops.interface_dim(),
        initial_energy: report.energies[0],
        final_energy: *report.energies.last().expect("initial energy present"),
        energy_non_increasing: report.non_increasing,
        max_conservation_residual: max_opt(&traj.conservation),
        max_interfacial_energy_term: max_opt(&traj.interfacial),
        max_iterations: traj
            .windows
            .iter()
            .map(|w| w.diagnostics.iterations)
            .max()
            .unwrap_or(0),
        max_window_residual: traj
            .windows
            .iter()
            .map(|w| w.diagnostics.residual)
            .fold(0.0, f64::max),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Runs a simulation and writes `trajectory.csv`, `summary.json` and the mesh
/// dumps into `out`.
pub fn run_and_write(prepared: &Prepared, out: &Path) -> Result<RunSummary> {
    let traj = run_simulation(
        &prepared.problem,
        &prepared.spec,
        &prepared.window,
        &prepared.options,
        None,
    )?;
    traj.write_csv(create(out, "trajectory.csv")?)?;
    let summary = summarize(prepared, &traj);
    serde_json::to_writer_pretty(create(out, "summary.json")?, &summary).map_err(|e| Error::Io(e.into()))?;
    if let Some(geo) = prepared.problem.ops.geometry() {
        for (i, mesh) in geo.meshes.iter().enumerate() {
            mesh.write_dump(create(out, &format!("mesh_{}.txt", i + 1))?)?;
        }
    }
    log::info!(
        "{} windows, energy {:.6e} -> {:.6e}",
        summary.windows,
        summary.initial_energy,
        summary.final_energy
    );
    Ok(summary)
}

/// Convergence study of a manufactured problem against an overkill reference.
pub fn run_convergence(
    prepared: &Prepared,
    levels: usize,
    target: TargetChoice,
    reference: ReferenceChoice,
    jobs: usize,
) -> Result<RateTable> {
    if prepared.case.is_none() {
        return Err(Error::Config(vec![
            "experiment: convergence studies need a manufactured forcing (mms:<preset>)".into(),
        ]));
    }
    let scheme = match reference {
        ReferenceChoice::CrankNicolson => ReferenceScheme::CrankNicolson,
        ReferenceChoice::DgQuadratic => ReferenceScheme::DgQuadratic,
    };
    let oracle = reference_solve_default(&prepared.problem, prepared.window.t_final, scheme)?;
    let setup = StudySetup {
        problem: &prepared.problem,
        spec: &prepared.spec,
        options: &prepared.options,
        oracle: &oracle,
    };
    let target = match target {
        TargetChoice::L2 => RateTarget::L2,
        TargetChoice::Nodal => RateTarget::Nodal,
    };
    let table = convergence_study(setup, &prepared.window, levels, target, jobs)?;
    for note in &table.notes {
        log::warn!("{note}");
    }
    Ok(table)
}

/// Outcome of a property check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub holds: bool,
    pub message: String,
}

/// Relative tolerance of the conservation check.
pub const CONSERVATION_TOL: f64 = 1e-11;
/// Energy tolerance, relative to the initial energy.
pub const ENERGY_TOL: f64 = 1e-12;

pub fn check_conservation(prepared: &Prepared) -> Result<CheckOutcome> {
    let ops = &prepared.problem.ops;
    let mut asm = crate::coupling::WindowAssembler::new(
        ops,
        &prepared.spec,
        &prepared.window,
        &prepared.options.quadrature,
        &prepared.problem.loads,
    )?;
    let mut history: crate::coupling::History =
        std::array::from_fn(|i| std::collections::VecDeque::from(vec![prepared.problem.initial[i].clone()]));
    let depth = asm.history_depth().max(1);
    let mode = conservation_mode(&prepared.window);
    let mut worst: f64 = 0.0;
    for window in 1..=prepared.window.windows {
        let sol = asm.solve_direct(window, &history)?;
        let report =
            match check_flux_conservation(&sol, &ops.coupling(), prepared.problem.loads.interface_kind, mode)
            {
                Ok(r) => r,
                Err(Error::Precondition(msg)) => {
                    return Ok(CheckOutcome {
                        holds: false,
                        message: format!("conservation does not apply: {msg}"),
                    })
                }
                Err(e) => return Err(e),
            };
        worst = worst.max(report.relative());
        for i in 0..2 {
            for u in sol.sides[i].iter().skip(1) {
                history[i].push_front(u.clone());
            }
            history[i].truncate(depth);
        }
    }
    let holds = worst <= CONSERVATION_TOL;
    Ok(CheckOutcome {
        holds,
        message: format!(
            "{mode:?} flux conservation: max relative residual {worst:.3e} (tolerance {CONSERVATION_TOL:.0e})"
        ),
    })
}

pub fn check_energy(prepared: &Prepared) -> Result<CheckOutcome> {
    if !prepared.problem.loads.is_unforced() {
        return Ok(CheckOutcome {
            holds: false,
            message: "energy check needs f = g = 0".into(),
        });
    }
    let traj = run_simulation(
        &prepared.problem,
        &prepared.spec,
        &prepared.window,
        &prepared.options,
        None,
    )?;
    let report = energy_report(&traj);
    let e0 = report.energies[0];
    let worst_term = report.interfacial.iter().flatten().copied().reduce(f64::max);
    let term_ok = worst_term.is_none_or(|v| v <= ENERGY_TOL * e0);
    let mut message = format!(
        "energy {:.6e} -> {:.6e}, non-increasing: {}",
        e0,
        report.energies.last().copied().unwrap_or(e0),
        report.non_increasing
    );
    match worst_term {
        Some(v) => message.push_str(&format!(", max interfacial energy term {v:.3e}")),
        None => message.push_str(", interfacial term not evaluated (coupling matrix not PSD)"),
    }
    Ok(CheckOutcome {
        holds: report.non_increasing && term_ok,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "geometry": {"nx": 4, "ny": [4, 4]},
        "problem": {"nu": [1.0, 0.5], "coupling": [[1.0, -1.0], [-1.0, 1.0]]},
        "scheme": {"kind": "crank-nicolson"},
        "window": {"t_final": 0.5, "windows": 2, "substeps": [2, 3], "flux_orders": [1, 1]}
    }"#;

    fn with(patch: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        patch(&mut v);
        v.to_string()
    }

    fn errors(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.solver, SolverConfig::Direct);
        assert_eq!(cfg.experiment, ExperimentConfig::Run);
        assert_eq!(cfg.forcing(), Forcing::Zero);
        assert_eq!(cfg.window.init_windows, 1);
        assert_eq!(cfg.scheme_spec().unwrap().name(), "crank-nicolson");
    }

    #[test]
    fn zero_substeps_named() {
        let e = errors(&with(|v| v["window"]["substeps"][0] = 0.into()));
        assert_eq!(e.len(), 1);
        assert!(e[0].contains("window.substeps[0]"), "{e:?}");
    }

    #[test]
    fn all_errors_reported() {
        let e = errors(&with(|v| {
            v["window"]["substeps"][1] = 0.into();
            v["geometry"]["nx"] = 0.into();
            v["problem"]["nu"][0] = (-1.0).into();
            v["problem"]["forcing"] = "mms:nope".into();
        }));
        assert_eq!(e.len(), 4, "{e:?}");
    }

    #[test]
    fn repeated_thetas_fail_the_side_condition_check() {
        let e = errors(&with(|v| {
            v["scheme"] = serde_json::json!({
                "kind": "dg", "q": 1, "thetas": [0.5, 0.5], "side_matrix": [[1.0], [1.0]]
            });
        }));
        assert!(
            e[0].contains("side-condition check") && e[0].contains("singular"),
            "{e:?}"
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = errors(&with(|v| v["window"]["substep"] = 2.into()));
        assert!(e[0].contains("unknown field"), "{e:?}");
        let e = errors(&with(|v| v["extra"] = 1.into()));
        assert!(e[0].contains("unknown field"), "{e:?}");
    }

    #[test]
    fn custom_dg_scheme_and_fixed_point_solver() {
        let text = with(|v| {
            v["scheme"] = serde_json::json!({
                "kind": "dg", "q": 1, "n_s": 2, "thetas": [0.0, 1.0], "side_matrix": [[0.0, 1.0], [1.0, 0.0]]
            });
            v["solver"] = serde_json::json!({"kind": "fixed-point", "tol": 1e-9});
        });
        let cfg = parse_config(&text).unwrap();
        let spec = cfg.scheme_spec().unwrap();
        assert_eq!((spec.q(), spec.n_s()), (1, 2));
        assert_eq!(
            cfg.run_options(&spec).solver,
            SolverKind::FixedPoint {
                tol: 1e-9,
                max_iter: 200
            }
        );
    }

    #[test]
    fn convergence_needs_manufactured_forcing() {
        let e = errors(&with(|v| {
            v["experiment"] = serde_json::json!({"kind": "convergence", "levels": 3})
        }));
        assert!(e[0].contains("manufactured"), "{e:?}");
    }

    #[test]
    fn checks_on_conservative_unforced_problem() {
        let cfg = parse_config(MINIMAL).unwrap();
        let prepared = prepare(&cfg).unwrap();
        let c = check_conservation(&prepared).unwrap();
        assert!(c.holds, "{}", c.message);
        let e = check_energy(&prepared).unwrap();
        assert!(e.holds, "{}", e.message);
    }

    #[test]
    fn run_writes_outputs_deterministically() {
        let cfg = parse_config(MINIMAL).unwrap();
        let prepared = prepare(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_and_write(&prepared, dir.path()).unwrap();
        assert!(s.energy_non_increasing);
        let first = fs::read(dir.path().join("trajectory.csv")).unwrap();
        run_and_write(&prepared, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("trajectory.csv")).unwrap());
        assert!(dir.path().join("mesh_2.txt").exists());
        assert!(dir.path().join("summary.json").exists());
    }
}

//! Coupling windows.
//!
//! On window `ñ` both subdomains take `M_i` substeps. The interface traces of
//! the substep polynomials are L²-projected onto a single polynomial of order
//! `r_i` over the window, the fluxes `F_i = Π_{r_i}(b_{i1} u_{Γ,1} + b_{i2} u_{Γ,2} - g_i)`
//! are formed from the projections, and everything is solved together.
//!
//! Unknown layout of a window system: the substeps of subdomain 1 in order,
//! each `(c_0, …, c_q, U^n)`, then those of subdomain 2, then the flux modes of
//! `F_1`, then those of `F_2`. The projected traces are eliminated: the flux
//! rows for mode `k` read
//!
//! `M_Γ F_{i,k} - Σ_j b_{ij} (2k+1)/Δt Σ_n Σ_m W^{j,n}_{m,k} M_Γ T_j c^{j,n}_m = -(2k+1)/Δt G_{i,k}`,
//!
//! for `k ≤ min(r_i, r_j)` in the coupling sum, where `W` is the substep/window
//! Gram matrix and `G_{i,k} = ∫ (g_i, μ) ψ_k dt`.

use std::collections::VecDeque;
use std::io::Write;

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Matrix2};

use crate::dgit::{
    assemble_substep, coupling_gram, data_moments, window_mode_averages, FluxCoupling, Op, Quadrature,
    QuadratureFlags, SubstepBlock, SystemOperators, Var,
};
use crate::error::{Error, Result};
use crate::fespace::{conservation_compatible, coupling_psd, FeOperators, InterfaceKind, Loads};
use crate::linalg::{csr_to_dense, matvec, Csr, SparseLu, SparseSystemMatrix, TripletBuilder};
use crate::timepoly::{gauss_rule, project_l2, project_l2_broken, GaussRule, Interval, SchemeSpec, TimePoly};

/// The multirate clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub t_final: f64,
    /// Number of coupling windows `N`.
    pub windows: usize,
    /// Substeps per window `M_i`.
    pub substeps: [usize; 2],
    /// Trace/flux polynomial orders `r_i`.
    pub flux_orders: [usize; 2],
    /// Windows `ñ < N₀` are filled by an initializer.
    pub init_windows: usize,
}

impl WindowConfig {
    pub fn new(t_final: f64, windows: usize, substeps: [usize; 2], flux_orders: [usize; 2]) -> Result<Self> {
        let cfg = Self {
            t_final,
            windows,
            substeps,
            flux_orders,
            init_windows: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_init_windows(mut self, n0: usize) -> Result<Self> {
        self.init_windows = n0;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            errs.push(format!("t_final must be positive, got {}", self.t_final));
        }
        if self.windows == 0 {
            errs.push("windows (N) must be at least 1".into());
        }
        for i in 0..2 {
            if self.substeps[i] == 0 {
                errs.push(format!("substeps M{} must be at least 1", i + 1));
            }
        }
        if self.init_windows == 0 {
            errs.push("init_windows (N0) must be at least 1".into());
        } else if self.init_windows > self.windows.max(1) {
            errs.push(format!(
                "init_windows (N0 = {}) exceeds the window count {}",
                self.init_windows, self.windows
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Window length `Δt`.
    pub fn dt(&self) -> f64 {
        self.t_final / self.windows as f64
    }

    /// Substep length `Δt_i = Δt / M_i`.
    pub fn dt_sub(&self, i: usize) -> f64 {
        self.dt() / self.substeps[i] as f64
    }

    /// Synchronization time `t^ñ = t_f ñ / N`.
    pub fn sync_time(&self, window: usize) -> f64 {
        if window == self.windows {
            self.t_final
        } else {
            self.t_final * window as f64 / self.windows as f64
        }
    }

    /// `I^ñ`, `ñ ≥ 1`.
    pub fn window_interval(&self, window: usize) -> Interval {
        Interval::new(self.sync_time(window - 1), self.sync_time(window)).expect("valid window")
    }

    /// `t_i^n` inside window `ñ`, `0 ≤ n ≤ M_i`.
    pub fn substep_time(&self, window: usize, i: usize, n: usize) -> f64 {
        let w = self.window_interval(window);
        if n == self.substeps[i] {
            w.end()
        } else {
            w.start() + w.len() * n as f64 / self.substeps[i] as f64
        }
    }

    /// `I_i^n` inside window `ñ`, `1 ≤ n ≤ M_i`.
    pub fn substep_interval(&self, window: usize, i: usize, n: usize) -> Interval {
        Interval::new(
            self.substep_time(window, i, n - 1),
            self.substep_time(window, i, n),
        )
        .expect("valid substep")
    }
}

/// `Δt (h⁻² + h⁻¹)`; the existence theory asks for this to stay below an
/// unquantified constant.
pub fn step_restriction_ratio(cfg: &WindowConfig, h: f64) -> f64 {
    cfg.dt() * (h.powi(-2) + h.recip())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    Direct,
    FixedPoint { tol: f64, max_iter: usize },
}

impl SolverKind {
    pub fn fixed_point() -> Self {
        SolverKind::FixedPoint {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub quadrature: QuadratureFlags,
    pub solver: SolverKind,
}

impl RunOptions {
    pub fn direct(spec: &SchemeSpec) -> Self {
        Self {
            quadrature: QuadratureFlags::default_for(spec),
            solver: SolverKind::Direct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Relative residual of the direct solve, or the last fixed-point increment.
    pub residual: f64,
    pub iterations: usize,
    /// Last observed contraction ratio of the fixed-point iteration.
    pub contraction: Option<f64>,
    /// The window was filled by the initializer instead of being solved.
    pub initialized: bool,
}

/// Solution on one coupling window.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub window: usize,
    pub interval: Interval,
    /// `u_i^n`, `n = 1..=M_i`.
    pub substeps: [Vec<TimePoly>; 2],
    /// `U_i^n`, `n = 0..=M_i` (`U_i^0` is the incoming state).
    pub sides: [Vec<DVector<f64>>; 2],
    /// `u_{Γ,i}`, in interface coefficients.
    pub traces: [TimePoly; 2],
    /// `F_i`, in interface coefficients.
    pub fluxes: [TimePoly; 2],
    pub diagnostics: Diagnostics,
}

impl WindowSolution {
    /// `|u_i^1(t^{ñ-1}) - U_i^0|_∞` per subdomain: zero for continuous schemes.
    pub fn entry_jumps(&self) -> [f64; 2] {
        std::array::from_fn(|i| (self.substeps[i][0].eval(self.interval.start()) - &self.sides[i][0]).amax())
    }

    pub fn final_state(&self, i: usize) -> &DVector<f64> {
        self.sides[i].last().expect("at least the incoming state")
    }
}

/// Newest-first side values carried between windows.
pub type History = [VecDeque<DVector<f64>>; 2];

/// Index bookkeeping of a window system.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub dims: [usize; 2],
    pub interface_dim: usize,
    pub q: usize,
    pub substeps: [usize; 2],
    pub flux_orders: [usize; 2],
}

impl WindowLayout {
    pub fn substep_stride(&self, i: usize) -> usize {
        (self.q + 2) * self.dims[i]
    }

    /// First unknown of substep `n ≥ 1` of subdomain `i`.
    pub fn substep_offset(&self, i: usize, n: usize) -> usize {
        let base = if i == 0 {
            0
        } else {
            self.substeps[0] * self.substep_stride(0)
        };
        base + (n - 1) * self.substep_stride(i)
    }

    pub fn side_offset(&self, i: usize, n: usize) -> usize {
        self.substep_offset(i, n) + (self.q + 1) * self.dims[i]
    }

    pub fn flux_offset(&self, i: usize) -> usize {
        let base = self.substeps[0] * self.substep_stride(0) + self.substeps[1] * self.substep_stride(1);
        if i == 0 {
            base
        } else {
            base + (self.flux_orders[0] + 1) * self.interface_dim
        }
    }

    pub fn total(&self) -> usize {
        self.flux_offset(1) + (self.flux_orders[1] + 1) * self.interface_dim
    }
}

/// `u_{Γ}` from broken substep traces: the L² projection onto order `order`
/// over the union of the pieces, with the right side integrated exactly or by
/// product of averages.
pub fn trace_projection(
    pieces: &[TimePoly],
    window: Interval,
    order: usize,
    quadrature: Quadrature,
) -> Result<TimePoly> {
    if quadrature == Quadrature::Exact {
        let p = project_l2_broken(pieces, order)?;
        return TimePoly::new(window, p.into_coeffs());
    }
    let first = pieces
        .first()
        .ok_or_else(|| Error::Structure("no pieces to project".into()))?;
    let mut coeffs = DMatrix::zeros(order + 1, first.ncols());
    let tol = 1e-12 * window.len().max(window.end().abs()).max(1.0);
    let mut covered = window.start();
    for piece in pieces {
        if (piece.interval().start() - covered).abs() > tol {
            return Err(Error::Structure("trace pieces do not tile the window".into()));
        }
        covered = piece.interval().end();
        let w = coupling_gram(piece.interval(), piece.order(), window, order, quadrature);
        coeffs += w.transpose() * piece.coeffs();
    }
    if (covered - window.end()).abs() > tol {
        return Err(Error::Structure("trace pieces do not tile the window".into()));
    }
    for k in 0..=order {
        coeffs.row_mut(k).scale_mut((2 * k + 1) as f64 / window.len());
    }
    TimePoly::new(window, coeffs)
}

/// `F_i = Π_{r_i}(b_{i1} u_{Γ,1} + b_{i2} u_{Γ,2} - g_i)`, where `g_i` is given as
/// a window polynomial in interface coefficients.
pub fn flux_solve(
    traces: [&TimePoly; 2],
    b: &Matrix2<f64>,
    g: [Option<&TimePoly>; 2],
    orders: [usize; 2],
) -> Result<[TimePoly; 2]> {
    if traces[0].interval() != traces[1].interval() {
        return Err(Error::Dimension("traces live on different windows".into()));
    }
    let mut out = Vec::with_capacity(2);
    for i in 0..2 {
        let mut f = traces[0].scaled(b[(i, 0)]).add(&traces[1].scaled(b[(i, 1)]))?;
        if let Some(gi) = g[i] {
            f = f.add(&gi.scaled(-1.0))?;
        }
        out.push(f.truncated(orders[i]));
    }
    let second = out.pop().expect("two fluxes");
    Ok([out.pop().expect("two fluxes"), second])
}

/// Conservation check flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConservationMode {
    /// `F_1 + F_2 = 0` coefficientwise.
    Strong,
    /// `∫ (F_1 + F_2) λ dt = 0` for `λ` of order `min(r_1, r_2)`.
    Weak,
    /// `Σ_i Δt_i Σ_n (F_i)^{n-1/2} = 0` (order-zero tests, trapezoid form).
    Cn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservationReport {
    pub mode: ConservationMode,
    /// Largest absolute residual entry.
    pub residual: f64,
    /// Flux magnitude the residual is compared with.
    pub scale: f64,
}

impl ConservationReport {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.residual / self.scale
        } else {
            self.residual
        }
    }
}

pub fn check_flux_conservation(
    sol: &WindowSolution,
    coupling: &Matrix2<f64>,
    interface: InterfaceKind,
    mode: ConservationMode,
) -> Result<ConservationReport> {
    if !conservation_compatible(coupling, interface) {
        let b = coupling;
        let mut violated = Vec::new();
        if b[(0, 0)] != -b[(1, 0)] {
            violated.push("b11 = -b21");
        }
        if b[(0, 1)] != -b[(1, 1)] {
            violated.push("b12 = -b22");
        }
        if interface == InterfaceKind::General {
            violated.push("g1 = -g2");
        }
        return Err(Error::Precondition(format!(
            "flux conservation requires {}",
            violated.join(", ")
        )));
    }
    let [f1, f2] = &sol.fluxes;
    let scale_coeffs = f1.coeffs().amax().max(f2.coeffs().amax());
    let report = match mode {
        ConservationMode::Strong | ConservationMode::Weak => {
            let order = f1.order().max(f2.order());
            let top = if mode == ConservationMode::Strong {
                order
            } else {
                f1.order().min(f2.order())
            };
            let sum = f1.truncated(order).coeffs() + f2.truncated(order).coeffs();
            ConservationReport {
                mode,
                residual: sum.rows(0, top + 1).amax(),
                scale: scale_coeffs,
            }
        }
        ConservationMode::Cn => {
            let mut total = DVector::zeros(f1.ncols());
            let mut scale: f64 = 0.0;
            for (i, f) in sol.fluxes.iter().enumerate() {
                let mut part = DVector::zeros(f.ncols());
                for piece in &sol.substeps[i] {
                    let sub = piece.interval();
                    let avg = 0.5 * (f.eval(sub.start()) + f.eval(sub.end()));
                    part += avg * sub.len();
                }
                scale = scale.max(part.amax());
                total += part;
            }
            ConservationReport {
                mode,
                residual: total.amax(),
                scale: scale.max(scale_coeffs * sol.interval.len()),
            }
        }
    };
    Ok(report)
}

/// Interfacial energy term evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMode {
    /// `-Σ_i Σ_n ∫ (F_i, u_i^n)_Γ dt`.
    Exact,
    /// `-Σ_i Δt_i Σ_n ((F_i)^{n-1/2}, U_i^{n-1/2})_Γ`.
    Cn,
}

impl EnergyMode {
    pub fn for_quadrature(flags: &QuadratureFlags) -> Self {
        match flags.trace {
            Quadrature::Exact => EnergyMode::Exact,
            Quadrature::Trapezoid => EnergyMode::Cn,
        }
    }
}

pub fn interfacial_energy_term(
    sol: &WindowSolution,
    ops: &FeOperators,
    interface: InterfaceKind,
    mode: EnergyMode,
) -> Result<f64> {
    if interface != InterfaceKind::Zero {
        return Err(Error::Precondition(
            "the interfacial energy bound needs g1 = g2 = 0".into(),
        ));
    }
    if !coupling_psd(&ops.coupling()) {
        return Err(Error::Precondition(
            "the interfacial energy bound needs a positive semidefinite coupling matrix".into(),
        ));
    }
    let mg = ops.interface_mass();
    let mut total = 0.0;
    for i in 0..2 {
        let trace = &ops.subdomain(i).trace;
        let f = &sol.fluxes[i];
        for (n, piece) in sol.substeps[i].iter().enumerate() {
            let sub = piece.interval();
            match mode {
                EnergyMode::Exact => {
                    let rule = GaussRule::exact_for(f.order() + piece.order());
                    for (t, w) in rule.mapped(sub) {
                        let u = matvec(trace, &piece.eval(t));
                        total -= w * f.eval(t).dot(&matvec(mg, &u));
                    }
                }
                EnergyMode::Cn => {
                    let favg = 0.5 * (f.eval(sub.start()) + f.eval(sub.end()));
                    let uavg = 0.5 * (&sol.sides[i][n] + &sol.sides[i][n + 1]);
                    let u = matvec(trace, &uavg);
                    total -= sub.len() * favg.dot(&matvec(mg, &u));
                }
            }
        }
    }
    Ok(total)
}

/// Assembled window system with its right-hand side.
#[derive(Debug, Clone)]
pub struct WindowSystem {
    pub window: usize,
    pub layout: WindowLayout,
    pub matrix: SparseSystemMatrix,
    pub rhs: DVector<f64>,
}

/// Monolithic system of window `window` given the incoming side values.
#[allow(clippy::too_many_arguments)]
pub fn assemble_window(
    ops: &FeOperators,
    spec: &SchemeSpec,
    cfg: &WindowConfig,
    flags: &QuadratureFlags,
    loads: &Loads,
    window: usize,
    incoming: &History,
) -> Result<WindowSystem> {
    let asm = WindowAssembler::new(ops, spec, cfg, flags, loads)?;
    let blocks = asm.blocks(window)?;
    Ok(WindowSystem {
        window,
        layout: asm.layout.clone(),
        matrix: asm.matrix.clone(),
        rhs: asm.rhs(window, &blocks, incoming)?,
    })
}

/// Sparse direct solve of an assembled window system.
pub fn solve_window_direct(
    system: &WindowSystem,
    ops: &FeOperators,
    spec: &SchemeSpec,
    cfg: &WindowConfig,
    flags: &QuadratureFlags,
    incoming: &History,
) -> Result<WindowSolution> {
    let lu = system
        .matrix
        .factorize()
        .map_err(|e| Error::from(e).in_window(system.window))?;
    let (x, residual) = lu
        .solve(&system.rhs)
        .map_err(|e| Error::from(e).in_window(system.window))?;
    let asm = Unpacker {
        ops,
        spec,
        cfg,
        flags,
        layout: &system.layout,
    };
    asm.unpack(system.window, &x, incoming, residual)
}

/// Window assembly state shared by all windows of a run: the system matrix
/// (identical on every window) and its factorization.
pub struct WindowAssembler<'a> {
    ops: &'a FeOperators,
    spec: SchemeSpec,
    cfg: WindowConfig,
    flags: QuadratureFlags,
    loads: &'a Loads,
    layout: WindowLayout,
    /// `M_Γ T_j`.
    gamma_trace: [Csr; 2],
    /// `W^{j,n}`: substep/window Gram matrices of the trace projection.
    trace_weights: [Vec<DMatrix<f64>>; 2],
    matrix: SparseSystemMatrix,
    lu: Option<SparseLu>,
    /// Local matrices of the fixed-point sweeps, per subdomain.
    local_lu: [Option<SparseLu>; 2],
    interface_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl std::fmt::Debug for WindowAssembler<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WindowAssembler")
            .field("layout", &self.layout)
            .field("factorized", &self.lu.is_some())
            .finish_non_exhaustive()
    }
}

impl<'a> WindowAssembler<'a> {
    pub fn new(
        ops: &'a FeOperators,
        spec: &SchemeSpec,
        cfg: &WindowConfig,
        flags: &QuadratureFlags,
        loads: &'a Loads,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = WindowLayout {
            dims: [ops.dim(0), ops.dim(1)],
            interface_dim: ops.interface_dim(),
            q: spec.q(),
            substeps: cfg.substeps,
            flux_orders: cfg.flux_orders,
        };
        let mg = ops.interface_mass();
        let gamma_trace = [mg * &ops.subdomain(0).trace, mg * &ops.subdomain(1).trace];
        let window = cfg.window_interval(1);
        let trace_weights = std::array::from_fn(|j| {
            (1..=cfg.substeps[j])
                .map(|n| {
                    coupling_gram(
                        cfg.substep_interval(1, j, n),
                        spec.q(),
                        window,
                        cfg.flux_orders[j],
                        flags.trace,
                    )
                })
                .collect()
        });
        let interface_chol = if ops.interface_dim() > 0 {
            Some(
                csr_to_dense(mg)
                    .cholesky()
                    .ok_or_else(|| Error::NotSpd("M_Γ".into()))?,
            )
        } else {
            None
        };
        let mut asm = Self {
            ops,
            spec: spec.clone(),
            cfg: *cfg,
            flags: *flags,
            loads,
            layout,
            gamma_trace,
            trace_weights,
            matrix: TripletBuilder::new(0, 0).build()?,
            lu: None,
            local_lu: [None, None],
            interface_chol,
        };
        let blocks = asm.blocks(1)?;
        asm.matrix = asm.build_matrix(&blocks)?;
        Ok(asm)
    }

    pub fn layout(&self) -> &WindowLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &SparseSystemMatrix {
        &self.matrix
    }

    /// Substep blocks of a window, per subdomain.
    pub fn blocks(&self, window: usize) -> Result<[Vec<SubstepBlock>; 2]> {
        let w = self.cfg.window_interval(window);
        let mut out: [Vec<SubstepBlock>; 2] = [Vec::new(), Vec::new()];
        for (i, blocks) in out.iter_mut().enumerate() {
            for n in 1..=self.cfg.substeps[i] {
                let fc = FluxCoupling {
                    order: self.cfg.flux_orders[i],
                    window: w,
                };
                blocks.push(assemble_substep(
                    self.ops,
                    i,
                    &self.spec,
                    self.cfg.substep_interval(window, i, n),
                    n,
                    Some(fc),
                    &self.flags,
                    self.loads,
                )?);
            }
        }
        Ok(out)
    }

    /// Number of earlier side values needed at the start of a window.
    pub fn history_depth(&self) -> usize {
        let l = self.spec.k_s();
        l.max(1)
    }

    fn build_matrix(&self, blocks: &[Vec<SubstepBlock>; 2]) -> Result<SparseSystemMatrix> {
        let lay = &self.layout;
        let n = lay.total();
        let mut b = TripletBuilder::new(n, n);
        let dg = lay.interface_dim;
        for i in 0..2 {
            let sys = SystemOperators::of(self.ops, i);
            let d = lay.dims[i];
            for block in &blocks[i] {
                let nn = block.index;
                let base = lay.substep_offset(i, nn);
                for t in &block.terms {
                    let row = base + t.row * d;
                    let col = match t.var {
                        Var::Coeff(_) | Var::Side => base + block.local_column(t.var).expect("unknown"),
                        Var::History(l) if l < nn => lay.side_offset(i, nn - l),
                        Var::History(_) => continue,
                        Var::Flux(k) => lay.flux_offset(i) + k * dg,
                    };
                    sys.add_to(&mut b, row, col, t.op, t.scale);
                }
            }
        }
        let b_mat = self.ops.coupling();
        let dt = self.cfg.dt();
        for i in 0..2 {
            for k in 0..=lay.flux_orders[i] {
                let row = lay.flux_offset(i) + k * dg;
                b.add_csr(row, row, 1.0, self.ops.interface_mass());
                let factor = (2 * k + 1) as f64 / dt;
                for j in 0..2 {
                    if k > lay.flux_orders[j] || b_mat[(i, j)] == 0.0 {
                        continue;
                    }
                    for (n, w) in self.trace_weights[j].iter().enumerate() {
                        for m in 0..=lay.q {
                            let s = -b_mat[(i, j)] * factor * w[(m, k)];
                            if s != 0.0 {
                                let col = lay.substep_offset(j, n + 1) + m * lay.dims[j];
                                b.add_csr(row, col, s, &self.gamma_trace[j]);
                            }
                        }
                    }
                }
            }
        }
        b.build()
    }

    /// `G_{i,k} = ∫ (g_i, μ) ψ_k dt` on the window, `k = 0..=r_i`.
    fn interface_moments(&self, window: usize, i: usize) -> Option<Vec<DVector<f64>>> {
        let g = self.loads.interface[i].as_ref()?;
        let w = self.cfg.window_interval(window);
        let r = self.cfg.flux_orders[i];
        Some(match self.flags.interface_forcing {
            Quadrature::Exact => data_moments(g.as_ref(), w, r, Quadrature::Exact),
            Quadrature::Trapezoid => {
                let mut out = vec![DVector::zeros(self.layout.interface_dim); r + 1];
                for n in 1..=self.cfg.substeps[i] {
                    let sub = self.cfg.substep_interval(window, i, n);
                    let avg = 0.5 * (g(sub.start()) + g(sub.end()));
                    for (k, a) in window_mode_averages(sub, w, r).into_iter().enumerate() {
                        out[k].axpy(sub.len() * a, &avg, 1.0);
                    }
                }
                out
            }
        })
    }

    /// `Π_{r_i} g_i` as a window polynomial in interface coefficients.
    pub fn interface_forcing_poly(&self, window: usize, i: usize) -> Option<TimePoly> {
        let moments = self.interface_moments(window, i)?;
        let chol = self.interface_chol.as_ref()?;
        let w = self.cfg.window_interval(window);
        let mut coeffs = DMatrix::zeros(moments.len(), self.layout.interface_dim);
        for (k, g) in moments.iter().enumerate() {
            let c = chol.solve(g) * ((2 * k + 1) as f64 / w.len());
            coeffs.set_row(k, &c.transpose());
        }
        Some(TimePoly::new(w, coeffs).expect("non-empty"))
    }

    fn rhs(
        &self,
        window: usize,
        blocks: &[Vec<SubstepBlock>; 2],
        incoming: &History,
    ) -> Result<DVector<f64>> {
        let lay = &self.layout;
        let mut rhs = DVector::zeros(lay.total());
        for i in 0..2 {
            let sys = SystemOperators::of(self.ops, i);
            let d = lay.dims[i];
            for block in &blocks[i] {
                let nn = block.index;
                let base = lay.substep_offset(i, nn);
                rhs.rows_mut(base, block.rows()).copy_from(&block.load);
                for t in &block.terms {
                    if let Var::History(l) = t.var {
                        if l >= nn {
                            let u = incoming[i].get(l - nn).ok_or_else(|| {
                                Error::Precondition(format!(
                                    "window {window}: missing side value {} steps back on subdomain {}",
                                    l - nn,
                                    i + 1
                                ))
                            })?;
                            let mut rows = rhs.rows_mut(base + t.row * d, d);
                            rows -= sys.apply(t.op, u) * t.scale;
                        }
                    }
                }
            }
            if let Some(g) = self.interface_moments(window, i) {
                let dt = self.cfg.dt();
                for (k, gk) in g.iter().enumerate() {
                    let row = lay.flux_offset(i) + k * lay.interface_dim;
                    let mut rows = rhs.rows_mut(row, lay.interface_dim);
                    rows -= gk * ((2 * k + 1) as f64 / dt);
                }
            }
        }
        Ok(rhs)
    }

    /// Assembles and solves window `window` with the cached factorization.
    pub fn solve_direct(&mut self, window: usize, incoming: &History) -> Result<WindowSolution> {
        let blocks = self.blocks(window)?;
        let rhs = self.rhs(window, &blocks, incoming)?;
        if self.lu.is_none() {
            self.lu = Some(
                self.matrix
                    .factorize()
                    .map_err(|e| Error::from(e).in_window(window))?,
            );
        }
        let lu = self.lu.as_ref().expect("factorized");
        let (x, residual) = lu.solve(&rhs).map_err(|e| Error::from(e).in_window(window))?;
        self.unpacker().unpack(window, &x, incoming, residual)
    }

    fn unpacker(&self) -> Unpacker<'_> {
        Unpacker {
            ops: self.ops,
            spec: &self.spec,
            cfg: &self.cfg,
            flags: &self.flags,
            layout: &self.layout,
        }
    }

    /// Traces and fluxes of given substep polynomials (the flux definition
    /// evaluated explicitly).
    pub fn traces_and_fluxes(
        &self,
        window: usize,
        substeps: &[Vec<TimePoly>; 2],
    ) -> Result<([TimePoly; 2], [TimePoly; 2])> {
        let traces = self.unpacker().traces(window, substeps)?;
        let g: [Option<TimePoly>; 2] = std::array::from_fn(|i| self.interface_forcing_poly(window, i));
        let fluxes = flux_solve(
            [&traces[0], &traces[1]],
            &self.ops.coupling(),
            [g[0].as_ref(), g[1].as_ref()],
            self.cfg.flux_orders,
        )?;
        Ok((traces, fluxes))
    }

    /// The lagged iteration: substeps solved with `L u` and `F` from the
    /// previous iterate on the right side, then traces and fluxes updated.
    pub fn solve_fixed_point(
        &mut self,
        window: usize,
        incoming: &History,
        initial_flux: Option<&[TimePoly; 2]>,
        tol: f64,
        max_iter: usize,
    ) -> Result<WindowSolution> {
        let w = self.cfg.window_interval(window);
        let blocks = self.blocks(window)?;
        for i in 0..2 {
            if self.local_lu[i].is_none() {
                let sys = SystemOperators::of(self.ops, i);
                let lu = blocks[i][0].local_matrix(&sys, true).build()?.factorize();
                self.local_lu[i] = Some(lu.map_err(|e| Error::from(e).in_window(window))?);
            }
        }
        let dg = self.layout.interface_dim;
        let mut flux: [TimePoly; 2] = std::array::from_fn(|i| match initial_flux {
            Some(f) => {
                TimePoly::new(w, f[i].truncated(self.cfg.flux_orders[i]).into_coeffs()).expect("non-empty")
            }
            None => TimePoly::zeros(w, self.cfg.flux_orders[i], dg),
        });
        let q = self.spec.q();
        let mut polys: [Vec<TimePoly>; 2] = std::array::from_fn(|i| {
            blocks[i]
                .iter()
                .map(|b| TimePoly::constant(b.interval, &incoming[i][0]).truncated(q))
                .collect()
        });
        let mut sides: [Vec<DVector<f64>>; 2] =
            std::array::from_fn(|i| vec![incoming[i][0].clone(); self.cfg.substeps[i] + 1]);
        let step_ratio = self
            .ops
            .mesh_size()
            .map_or(f64::NAN, |h| step_restriction_ratio(&self.cfg, h));
        let mut last_delta = f64::NAN;
        let mut first_delta = f64::NAN;
        let mut contraction = None;
        for iter in 1..=max_iter {
            let mut delta = 0.0;
            let mut new_polys: [Vec<TimePoly>; 2] = [Vec::new(), Vec::new()];
            let mut new_sides: [Vec<DVector<f64>>; 2] =
                [vec![incoming[0][0].clone()], vec![incoming[1][0].clone()]];
            for i in 0..2 {
                let sys = SystemOperators::of(self.ops, i);
                let lu = self.local_lu[i].as_ref().expect("factorized");
                for (n0, block) in blocks[i].iter().enumerate() {
                    let n = n0 + 1;
                    // U^{n-1}, U^{n-2}, …: current iterate inside the window, then incoming
                    let depth = block.history_depth();
                    let mut history = Vec::with_capacity(depth);
                    for l in 1..=depth {
                        if l < n {
                            history.push(new_sides[i][n - l].clone());
                        } else {
                            let u = incoming[i].get(l - n).ok_or_else(|| {
                                Error::Precondition(format!(
                                    "window {window}: missing side value {} steps back",
                                    l - n
                                ))
                            })?;
                            history.push(u.clone());
                        }
                    }
                    let rhs = block.local_rhs(&sys, &history, Some(&flux[i]), Some(&polys[i][n0]))?;
                    let (x, _) = lu.solve(&rhs).map_err(|e| Error::from(e).in_window(window))?;
                    let state = block.unpack(&x);
                    let du = state.poly.coeffs() - polys[i][n0].coeffs();
                    let du = TimePoly::new(block.interval, du).expect("non-empty");
                    delta += du.squared_l2_with(|c| self.ops.energy_norm_sq(i, c));
                    let ds = &state.side - &sides[i][n];
                    delta += block.interval.len() * self.ops.energy_norm_sq(i, &ds);
                    new_polys[i].push(state.poly);
                    new_sides[i].push(state.side);
                }
            }
            polys = new_polys;
            sides = new_sides;
            let (_, fluxes) = self.traces_and_fluxes(window, &polys)?;
            flux = fluxes;

            if iter == 1 {
                first_delta = delta;
            } else if last_delta > 0.0 {
                contraction = Some((delta / last_delta).sqrt());
            }
            debug!(
                "window {window} fixed-point iteration {iter}: delta {:.3e}",
                delta.sqrt()
            );
            if delta.sqrt() < tol {
                let (traces, fluxes) = self.traces_and_fluxes(window, &polys)?;
                return Ok(WindowSolution {
                    window,
                    interval: w,
                    substeps: polys,
                    sides,
                    traces,
                    fluxes,
                    diagnostics: Diagnostics {
                        residual: delta.sqrt(),
                        iterations: iter,
                        contraction,
                        initialized: false,
                    },
                });
            }
            let diverging =
                !delta.is_finite() || (iter >= 4 && delta > 1e12 * first_delta.max(f64::MIN_POSITIVE));
            if diverging || iter == max_iter {
                return Err(Error::Contraction {
                    iterations: iter,
                    contraction: contraction.unwrap_or(f64::NAN),
                    step_ratio,
                }
                .in_window(window));
            }
            last_delta = delta;
        }
        unreachable!("loop returns on the last iteration")
    }

    /// Window filled from an initializer `state(i, t)`: side values sampled at
    /// the substep times, substep polynomials projected.
    pub fn initialize_window(
        &self,
        window: usize,
        state: &dyn Fn(usize, f64) -> DVector<f64>,
    ) -> Result<WindowSolution> {
        let q = self.spec.q();
        let substeps: [Vec<TimePoly>; 2] = std::array::from_fn(|i| {
            (1..=self.cfg.substeps[i])
                .map(|n| project_l2(|t| state(i, t), self.cfg.substep_interval(window, i, n), q))
                .collect()
        });
        let sides = std::array::from_fn(|i| {
            (0..=self.cfg.substeps[i])
                .map(|n| state(i, self.cfg.substep_time(window, i, n)))
                .collect()
        });
        let (traces, fluxes) = self.traces_and_fluxes(window, &substeps)?;
        Ok(WindowSolution {
            window,
            interval: self.cfg.window_interval(window),
            substeps,
            sides,
            traces,
            fluxes,
            diagnostics: Diagnostics {
                initialized: true,
                ..Diagnostics::default()
            },
        })
    }
}

struct Unpacker<'a> {
    ops: &'a FeOperators,
    spec: &'a SchemeSpec,
    cfg: &'a WindowConfig,
    flags: &'a QuadratureFlags,
    layout: &'a WindowLayout,
}

impl Unpacker<'_> {
    fn traces(&self, window: usize, substeps: &[Vec<TimePoly>; 2]) -> Result<[TimePoly; 2]> {
        let w = self.cfg.window_interval(window);
        let mut out = Vec::with_capacity(2);
        for (i, polys) in substeps.iter().enumerate() {
            let t = csr_to_dense(&self.ops.subdomain(i).trace);
            let pieces: Vec<TimePoly> = polys.iter().map(|p| p.map_columns(&t)).collect();
            out.push(trace_projection(
                &pieces,
                w,
                self.cfg.flux_orders[i],
                self.flags.trace,
            )?);
        }
        let second = out.pop().expect("two traces");
        Ok([out.pop().expect("two traces"), second])
    }

    fn unpack(
        &self,
        window: usize,
        x: &DVector<f64>,
        incoming: &History,
        residual: f64,
    ) -> Result<WindowSolution> {
        let lay = self.layout;
        let q = self.spec.q();
        let w = self.cfg.window_interval(window);
        let mut substeps: [Vec<TimePoly>; 2] = [Vec::new(), Vec::new()];
        let mut sides: [Vec<DVector<f64>>; 2] = [vec![incoming[0][0].clone()], vec![incoming[1][0].clone()]];
        for i in 0..2 {
            let d = lay.dims[i];
            for n in 1..=lay.substeps[i] {
                let base = lay.substep_offset(i, n);
                let coeffs = DMatrix::from_fn(q + 1, d, |j, c| x[base + j * d + c]);
                substeps[i].push(TimePoly::new(self.cfg.substep_interval(window, i, n), coeffs)?);
                sides[i].push(x.rows(lay.side_offset(i, n), d).into_owned());
            }
        }
        let dg = lay.interface_dim;
        let fluxes = std::array::from_fn(|i| {
            let r = lay.flux_orders[i];
            let base = lay.flux_offset(i);
            let coeffs = DMatrix::from_fn(r + 1, dg, |k, c| x[base + k * dg + c]);
            TimePoly::new(w, coeffs).expect("non-empty")
        });
        let traces = self.traces(window, &substeps)?;
        Ok(WindowSolution {
            window,
            interval: w,
            substeps,
            sides,
            traces,
            fluxes,
            diagnostics: Diagnostics {
                residual,
                iterations: 1,
                contraction: None,
                initialized: false,
            },
        })
    }
}

/// Spatial problem with its forcing and initial state.
#[derive(Debug, Clone)]
pub struct DiscreteProblem {
    pub ops: FeOperators,
    pub loads: Loads,
    pub initial: [DVector<f64>; 2],
}

/// Result of a simulation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: WindowConfig,
    pub windows: Vec<WindowSolution>,
    /// `½‖U_i(t^ñ)‖²_M`, `ñ = 0..=N`.
    pub energies: Vec<[f64; 2]>,
    /// Relative conservation residual per window (compatible problems only).
    pub conservation: Vec<Option<f64>>,
    /// Interfacial energy term per window (unforced interface, PSD coupling only).
    pub interfacial: Vec<Option<f64>>,
}

impl Trajectory {
    pub fn total_energy(&self, window: usize) -> f64 {
        self.energies[window][0] + self.energies[window][1]
    }

    /// Trajectory CSV: `window,t_sync,energy_1,energy_2,flux_conservation_residual,interfacial_energy_term`.
    /// Window 0 is the initial state; unavailable entries are `NaN`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "window,t_sync,energy_1,energy_2,flux_conservation_residual,interfacial_energy_term"
        )?;
        for (n, e) in self.energies.iter().enumerate() {
            let (cons, inter) = if n == 0 {
                (None, None)
            } else {
                (self.conservation[n - 1], self.interfacial[n - 1])
            };
            writeln!(
                out,
                "{n},{},{},{},{},{}",
                fmt17(self.config.sync_time(n)),
                fmt17(e[0]),
                fmt17(e[1]),
                fmt17(cons.unwrap_or(f64::NAN)),
                fmt17(inter.unwrap_or(f64::NAN))
            )?;
        }
        Ok(())
    }
}

/// 17 significant digits.
pub fn fmt17(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

/// Conservation mode matching a configuration.
pub fn conservation_mode(cfg: &WindowConfig) -> ConservationMode {
    if cfg.flux_orders[0] == cfg.flux_orders[1] {
        ConservationMode::Strong
    } else {
        ConservationMode::Weak
    }
}

/// Runs windows `1..=N`. Windows before `N₀` come from `init(i, t)`.
pub fn run_simulation(
    problem: &DiscreteProblem,
    spec: &SchemeSpec,
    cfg: &WindowConfig,
    options: &RunOptions,
    init: Option<&dyn Fn(usize, f64) -> DVector<f64>>,
) -> Result<Trajectory> {
    let ops = &problem.ops;
    for i in 0..2 {
        if problem.initial[i].len() != ops.dim(i) {
            return Err(Error::Dimension(format!(
                "initial state of subdomain {} has length {}, expected {}",
                i + 1,
                problem.initial[i].len(),
                ops.dim(i)
            )));
        }
    }
    let mut asm = WindowAssembler::new(ops, spec, cfg, &options.quadrature, &problem.loads)?;
    if let (SolverKind::FixedPoint { .. }, Some(h)) = (options.solver, ops.mesh_size()) {
        info!(
            "fixed-point solver: step restriction ratio dt*(h^-2+h^-1) = {:.3e}",
            step_restriction_ratio(cfg, h)
        );
    }
    let depth = asm.history_depth();
    if cfg.init_windows > 1 && init.is_none() {
        return Err(Error::Precondition(format!(
            "{} initialization windows requested but no initializer given",
            cfg.init_windows - 1
        )));
    }
    let available = 1 + (cfg.init_windows - 1) * cfg.substeps[0].min(cfg.substeps[1]);
    if depth > available {
        return Err(Error::Precondition(format!(
            "scheme `{}` reaches back {depth} side values but only {available} are available \
             before the first solved window; raise init_windows",
            spec.name()
        )));
    }
    let mut history: History = std::array::from_fn(|i| VecDeque::from(vec![problem.initial[i].clone()]));
    let energy = |u: &[DVector<f64>; 2]| {
        [
            0.5 * ops.energy_norm_sq(0, &u[0]),
            0.5 * ops.energy_norm_sq(1, &u[1]),
        ]
    };
    let mut traj = Trajectory {
        config: *cfg,
        windows: Vec::with_capacity(cfg.windows),
        energies: vec![energy(&problem.initial)],
        conservation: Vec::with_capacity(cfg.windows),
        interfacial: Vec::with_capacity(cfg.windows),
    };
    let compatible = conservation_compatible(&ops.coupling(), problem.loads.interface_kind);
    let energy_ok = problem.loads.interface_is_zero() && coupling_psd(&ops.coupling());
    let cons_mode = conservation_mode(cfg);
    let energy_mode = EnergyMode::for_quadrature(&options.quadrature);
    for window in 1..=cfg.windows {
        let sol = if window < cfg.init_windows {
            asm.initialize_window(window, init.expect("checked above"))?
        } else {
            match options.solver {
                SolverKind::Direct => asm.solve_direct(window, &history)?,
                SolverKind::FixedPoint { tol, max_iter } => {
                    let guess = traj.windows.last().map(|w: &WindowSolution| &w.fluxes);
                    asm.solve_fixed_point(window, &history, guess, tol, max_iter)?
                }
            }
        };
        for i in 0..2 {
            for u in sol.sides[i].iter().skip(1) {
                history[i].push_front(u.clone());
            }
            history[i].truncate(depth.max(1));
        }
        traj.conservation.push(if compatible {
            Some(
                check_flux_conservation(&sol, &ops.coupling(), problem.loads.interface_kind, cons_mode)?
                    .relative(),
            )
        } else {
            None
        });
        traj.interfacial.push(if energy_ok {
            Some(interfacial_energy_term(
                &sol,
                ops,
                problem.loads.interface_kind,
                energy_mode,
            )?)
        } else {
            None
        });
        traj.energies
            .push(energy(&[sol.final_state(0).clone(), sol.final_state(1).clone()]));
        traj.windows.push(sol);
    }
    Ok(traj)
}

/// Default number of Gauss points used when comparing polynomials against
/// non-polynomial references.
pub fn comparison_rule() -> GaussRule {
    gauss_rule(8)
}

/// Total energy after each window is non-increasing within `rel_tol · E(0)`.
pub fn energy_non_increasing(traj: &Trajectory, rel_tol: f64) -> bool {
    let e0 = traj.total_energy(0);
    (1..traj.energies.len()).all(|n| traj.total_energy(n) <= traj.total_energy(n - 1) + rel_tol * e0)
}

/// The operator of a window system for the given block term, mainly for tests.
pub fn op_name(op: Op) -> &'static str {
    match op {
        Op::Identity => "I",
        Op::Mass => "M",
        Op::Operator => "L",
        Op::Lift => "TᵀM_Γ",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cons_b() -> Matrix2<f64> {
        Matrix2::new(1.0, -1.0, -1.0, 1.0)
    }

    fn toy_problem(l: [f64; 2], b: Matrix2<f64>, u0: [f64; 2]) -> DiscreteProblem {
        DiscreteProblem {
            ops: FeOperators::scalar_toy(l, b),
            loads: Loads::zero(),
            initial: [DVector::from_element(1, u0[0]), DVector::from_element(1, u0[1])],
        }
    }

    fn incoming(p: &DiscreteProblem) -> History {
        std::array::from_fn(|i| VecDeque::from(vec![p.initial[i].clone()]))
    }

    #[test]
    fn window_clock() {
        let cfg = WindowConfig::new(1.0, 3, [2, 3], [1, 1]).unwrap();
        assert_eq!(cfg.sync_time(3), 1.0);
        assert_eq!(cfg.substep_time(2, 1, 3), cfg.sync_time(2));
        assert_relative_eq!(cfg.dt_sub(1) * 3.0, cfg.dt(), epsilon = 1e-15);
        let bad = WindowConfig::new(1.0, 0, [0, 1], [0, 0]);
        match bad {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_ratio_formula() {
        let cfg = WindowConfig::new(1.0, 100, [1, 1], [0, 0]).unwrap();
        assert_relative_eq!(step_restriction_ratio(&cfg, 1.0), 0.02, epsilon = 1e-15);
        assert_relative_eq!(step_restriction_ratio(&cfg, 0.1), 1.1, epsilon = 1e-13);
        let coarse = WindowConfig::new(1.0, 50, [1, 1], [0, 0]).unwrap();
        assert!(step_restriction_ratio(&coarse, 0.3) > step_restriction_ratio(&cfg, 0.3));
    }

    #[test]
    fn layout_dimension_count() {
        // scalar toy, CN (q = 1), M = (1, 2), r = 1: 3 substeps of 3 unknowns
        // and 2 fluxes of 2 modes
        let p = toy_problem([1.0, 1.0], cons_b(), [1.0, 0.0]);
        let cfg = WindowConfig::new(1.0, 1, [1, 2], [1, 1]).unwrap();
        let spec = SchemeSpec::crank_nicolson();
        let sys = assemble_window(
            &p.ops,
            &spec,
            &cfg,
            &QuadratureFlags::trapezoid(),
            &p.loads,
            1,
            &incoming(&p),
        )
        .unwrap();
        assert_eq!(sys.layout.total(), 3 * 3 + 2 * 2);
        assert_eq!(sys.matrix.nrows(), 13);
    }

    #[test]
    fn trace_projection_cases() {
        let w = Interval::new(0.0, 1.0).unwrap();
        let a = Interval::new(0.0, 0.5).unwrap();
        let b = Interval::new(0.5, 1.0).unwrap();
        let c2 = TimePoly::constant(a, &DVector::from_element(1, 2.0));
        let c4 = TimePoly::constant(b, &DVector::from_element(1, 4.0));
        for quad in [Quadrature::Exact, Quadrature::Trapezoid] {
            let p = trace_projection(&[c2.clone(), c4.clone()], w, 0, quad).unwrap();
            assert_relative_eq!(p.coeffs()[(0, 0)], 3.0, epsilon = 1e-15);
        }
        let single = TimePoly::new(w, DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5])).unwrap();
        let p = trace_projection(std::slice::from_ref(&single), w, 2, Quadrature::Exact).unwrap();
        assert!((p.coeffs() - single.coeffs()).amax() < 1e-14);
        assert!(trace_projection(&[c4, c2], w, 0, Quadrature::Trapezoid).is_err());
    }

    #[test]
    fn trapezoid_trace_matches_midpoint_least_squares() {
        // Δt Σ_n u(t^{n-1/2}) p(t^{n-1/2}) for piecewise-linear traces
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Interval::new(0.3, 0.9).unwrap();
        for m in 1..5 {
            let dt = w.len() / m as f64;
            let pieces: Vec<TimePoly> = (0..m)
                .map(|n| {
                    let i =
                        Interval::new(w.start() + n as f64 * dt, w.start() + (n + 1) as f64 * dt).unwrap();
                    TimePoly::new(i, DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap()
                })
                .collect();
            let p = trace_projection(&pieces, w, 1, Quadrature::Trapezoid).unwrap();
            // oracle: solve the 2×2 system ∫ u_Γ ψ_k = Δt Σ u(mid) ψ_k(mid)
            let gram = DMatrix::from_diagonal(&DVector::from_vec(vec![w.len(), w.len() / 3.0]));
            let mut rhs = DMatrix::zeros(2, 3);
            for piece in &pieces {
                let mid = piece.interval().midpoint();
                let s = w.to_reference(mid);
                let u = piece.eval(mid);
                for c in 0..3 {
                    rhs[(0, c)] += dt * u[c];
                    rhs[(1, c)] += dt * u[c] * s;
                }
            }
            let oracle = gram.lu().solve(&rhs).unwrap();
            assert!((p.coeffs() - oracle).amax() < 1e-13);
        }
    }

    #[test]
    fn equal_traces_give_zero_flux() {
        let w = Interval::new(0.0, 1.0).unwrap();
        let c = TimePoly::constant(w, &DVector::from_element(2, 1.7));
        let f = flux_solve([&c, &c], &cons_b(), [None, None], [1, 1]).unwrap();
        assert_eq!(f[0].coeffs().amax(), 0.0);
        assert_eq!(f[1].coeffs().amax(), 0.0);
    }

    #[test]
    fn decoupled_windows_match_single_domain_runs() {
        let p = toy_problem([1.0, 2.0], Matrix2::zeros(), [1.0, -0.5]);
        let spec = SchemeSpec::crank_nicolson();
        let cfg = WindowConfig::new(1.0, 4, [2, 3], [1, 1]).unwrap();
        let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        for (i, l) in [1.0, 2.0].into_iter().enumerate() {
            let steps = 4 * cfg.substeps[i];
            let dt = 1.0 / steps as f64;
            let g = (1.0 - 0.5 * dt * l) / (1.0 + 0.5 * dt * l);
            let expected = p.initial[i][0] * g.powi(steps as i32);
            assert_relative_eq!(traj.windows[3].final_state(i)[0], expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn fluxes_agree_with_explicit_flux_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Matrix2::new(1.3, -0.4, 0.2, 0.9);
        for spec in [
            SchemeSpec::crank_nicolson(),
            SchemeSpec::discontinuous_galerkin(1),
        ] {
            for flags in [QuadratureFlags::exact(), QuadratureFlags::trapezoid()] {
                let mut p = toy_problem([0.7, 1.4], b, [rng.random(), rng.random()]);
                p.loads.interface = [
                    Some(Arc::new(|t: f64| DVector::from_element(1, (3.0 * t).cos()))),
                    Some(Arc::new(|t: f64| DVector::from_element(1, t * t))),
                ];
                p.loads.interface_kind = InterfaceKind::General;
                let cfg = WindowConfig::new(0.6, 2, [2, 3], [1, 2]).unwrap();
                let mut asm = WindowAssembler::new(&p.ops, &spec, &cfg, &flags, &p.loads).unwrap();
                let sol = asm.solve_direct(1, &incoming(&p)).unwrap();
                let (traces, fluxes) = asm.traces_and_fluxes(1, &sol.substeps).unwrap();
                for i in 0..2 {
                    assert!((traces[i].coeffs() - sol.traces[i].coeffs()).amax() < 1e-14);
                    assert!(
                        (fluxes[i].coeffs() - sol.fluxes[i].coeffs()).amax() < 1e-12,
                        "{} {:?}",
                        spec.name(),
                        flags
                    );
                }
            }
        }
    }

    #[test]
    fn strong_and_weak_conservation() {
        let p = toy_problem([1.0, 3.0], cons_b(), [1.0, -0.3]);
        let spec = SchemeSpec::crank_nicolson();
        for (orders, mode) in [
            ([1, 1], ConservationMode::Strong),
            ([1, 0], ConservationMode::Weak),
        ] {
            let cfg = WindowConfig::new(1.0, 5, [2, 3], orders).unwrap();
            let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
            for sol in &traj.windows {
                let r = check_flux_conservation(sol, &cons_b(), InterfaceKind::Zero, mode).unwrap();
                assert!(r.relative() <= 1e-12, "{r:?}");
                let cn = check_flux_conservation(sol, &cons_b(), InterfaceKind::Zero, ConservationMode::Cn)
                    .unwrap();
                assert!(cn.relative() <= 1e-12, "{cn:?}");
            }
            if orders[0] != orders[1] {
                let r = check_flux_conservation(
                    &traj.windows[0],
                    &cons_b(),
                    InterfaceKind::Zero,
                    ConservationMode::Strong,
                )
                .unwrap();
                assert!(r.relative() > 1e-6);
            }
        }
        let bad = Matrix2::new(1.0, 0.0, 1.0, 0.0);
        let p = toy_problem([1.0, 1.0], bad, [1.0, 0.0]);
        let cfg = WindowConfig::new(1.0, 1, [1, 1], [1, 1]).unwrap();
        let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        assert!(traj.conservation[0].is_none());
        let err = check_flux_conservation(
            &traj.windows[0],
            &bad,
            InterfaceKind::Zero,
            ConservationMode::Strong,
        );
        assert!(matches!(err, Err(Error::Precondition(m)) if m.contains("b11 = -b21")));
    }

    #[test]
    fn interfacial_energy_signs() {
        let spec = SchemeSpec::crank_nicolson();
        let cfg = WindowConfig::new(1.0, 4, [2, 3], [1, 0]).unwrap();
        for b in [cons_b(), Matrix2::identity()] {
            let p = toy_problem([0.5, 1.0], b, [1.0, -2.0]);
            let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
            assert!(traj.interfacial.iter().all(|v| v.unwrap() <= 1e-14));
        }
        let skew = Matrix2::new(0.0, 1.0, -1.0, 0.0);
        let p = toy_problem([0.5, 1.0], skew, [1.0, -2.0]);
        let cfg = WindowConfig::new(1.0, 4, [2, 2], [1, 1]).unwrap();
        for flags in [QuadratureFlags::exact(), QuadratureFlags::trapezoid()] {
            let opts = RunOptions {
                quadrature: flags,
                solver: SolverKind::Direct,
            };
            let traj = run_simulation(&p, &spec, &cfg, &opts, None).unwrap();
            for v in &traj.interfacial {
                assert!(v.unwrap().abs() < 1e-14);
            }
        }
        let neg = toy_problem([0.5, 1.0], -Matrix2::identity(), [1.0, 0.0]);
        let sol = run_simulation(&neg, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        assert!(sol.interfacial[0].is_none());
        assert!(
            interfacial_energy_term(&sol.windows[0], &neg.ops, InterfaceKind::Zero, EnergyMode::Cn).is_err()
        );
    }

    #[test]
    fn fixed_point_matches_direct_and_detects_divergence() {
        let p = toy_problem([1.0, 2.0], cons_b(), [1.0, -1.0]);
        let spec = SchemeSpec::crank_nicolson();
        let cfg = WindowConfig::new(1.0, 10, [1, 2], [1, 1]).unwrap();
        let direct = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        let fp_opts = RunOptions {
            quadrature: QuadratureFlags::default_for(&spec),
            solver: SolverKind::fixed_point(),
        };
        let fp = run_simulation(&p, &spec, &cfg, &fp_opts, None).unwrap();
        for (a, b) in direct.windows.iter().zip(&fp.windows) {
            assert!(b.diagnostics.iterations <= 50);
            for i in 0..2 {
                assert!((a.final_state(i) - b.final_state(i)).amax() <= 1e-9);
            }
        }
        let stiff = WindowConfig::new(1000.0, 10, [1, 2], [1, 1]).unwrap();
        let err = run_simulation(&p, &spec, &stiff, &fp_opts, None).unwrap_err();
        match err {
            Error::Window { window: 1, source } => {
                assert!(matches!(*source, Error::Contraction { .. }), "{source}")
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn fixed_point_trivial_case_converges_immediately() {
        let p = toy_problem([0.0, 0.0], Matrix2::zeros(), [1.0, 2.0]);
        for spec in [
            SchemeSpec::crank_nicolson(),
            SchemeSpec::discontinuous_galerkin(1),
        ] {
            let cfg = WindowConfig::new(1.0, 3, [2, 3], [1, 1]).unwrap();
            let opts = RunOptions {
                quadrature: QuadratureFlags::default_for(&spec),
                solver: SolverKind::fixed_point(),
            };
            let traj = run_simulation(&p, &spec, &cfg, &opts, None).unwrap();
            assert!(traj.windows.iter().all(|w| w.diagnostics.iterations <= 2));
        }
    }

    #[test]
    fn continuous_scheme_has_no_window_jumps() {
        let p = toy_problem([1.0, 2.0], cons_b(), [1.0, -1.0]);
        let spec = SchemeSpec::crank_nicolson();
        let cfg = WindowConfig::new(1.0, 4, [2, 3], [1, 1]).unwrap();
        let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        for w in &traj.windows {
            assert!(w.entry_jumps().iter().all(|j| *j < 1e-12));
            for i in 0..2 {
                for (n, u) in w.substeps[i].iter().enumerate() {
                    let s = u.interval();
                    assert!((u.eval(s.start()) - &w.sides[i][n]).amax() < 1e-11);
                    assert!((u.eval(s.end()) - &w.sides[i][n + 1]).amax() < 1e-11);
                }
            }
        }
        let dg = SchemeSpec::discontinuous_galerkin(1);
        let traj = run_simulation(&p, &dg, &cfg, &RunOptions::direct(&dg), None).unwrap();
        assert!(traj
            .windows
            .iter()
            .any(|w| w.entry_jumps().iter().any(|j| *j > 0.0)));
    }

    #[test]
    fn multistep_needs_initialization() {
        let spec = SchemeSpec::new(
            "bdf-like",
            2,
            vec![-1.0, 0.0],
            DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let p = toy_problem([1.0, 1.0], cons_b(), [1.0, 0.5]);
        let cfg = WindowConfig::new(1.0, 4, [2, 2], [1, 1]).unwrap();
        let opts = RunOptions::direct(&spec);
        assert!(matches!(
            run_simulation(&p, &spec, &cfg, &opts, None),
            Err(Error::Precondition(_))
        ));
        let cfg = cfg.with_init_windows(2).unwrap();
        let exact = |i: usize, t: f64| DVector::from_element(1, [1.0, 0.5][i] * (-t).exp());
        let traj = run_simulation(&p, &spec, &cfg, &opts, Some(&exact)).unwrap();
        assert!(traj.windows[0].diagnostics.initialized);
        assert!(!traj.windows[1].diagnostics.initialized);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let p = toy_problem([1.0, 1.0], cons_b(), [1.0, 0.0]);
        let spec = SchemeSpec::crank_nicolson();
        let cfg = WindowConfig::new(1.0, 3, [1, 2], [1, 1]).unwrap();
        let traj = run_simulation(&p, &spec, &cfg, &RunOptions::direct(&spec), None).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[0],
            "window,t_sync,energy_1,energy_2,flux_conservation_residual,interfacial_energy_term"
        );
        assert!(lines[1].ends_with("NaN,NaN"));
        assert_eq!(lines[3].split(',').count(), 6);
    }
}

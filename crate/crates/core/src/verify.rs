//! Manufactured solutions, overkill reference solves of the semi-discrete
//! system, error norms and empirical convergence rates.
//!
//! Temporal errors are measured against the semi-discrete solution (the
//! exact-in-time solution of the spatially discretized system), approximated
//! by a fine single-rate solve and cubic Hermite interpolation of its nodal
//! values. Spatial error never enters.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::{DVector, Matrix2};
use nalgebra_sparse::CooMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupling::{fmt17, run_simulation, DiscreteProblem, RunOptions, Trajectory, WindowConfig};
use crate::dgit::{march, Quadrature, SubstepState, SystemOperators};
use crate::error::{Error, Result};
use crate::fespace::{
    assemble_on_grid, Advection, FeOperators, InterfaceSource, InteriorSource, Loads, ProblemSpec, SpaceFn,
    SpaceTimeFn,
};
use crate::linalg::{matvec, Csr, SparseLu, TripletBuilder};
use crate::timepoly::{gauss_rule, Interval, SchemeSpec};

/// Least-squares slope of `log y` against `log x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Forward-mode jets

/// Value with first derivatives in `(x, y, t)` and the diagonal second
/// derivatives. Enough to evaluate `u_t - ν Δu + s·∇u` of a closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    /// `∂_x, ∂_y, ∂_t`.
    pub d: [f64; 3],
    /// `∂_xx, ∂_yy, ∂_tt`.
    pub dd: [f64; 3],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            d: [0.0; 3],
            dd: [0.0; 3],
        }
    }

    /// Independent variable number `axis` (0 = x, 1 = y, 2 = t).
    pub fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d, dd: [0.0; 3] }
    }

    fn chain(self, f: f64, f1: f64, f2: f64) -> Self {
        Self {
            v: f,
            d: self.d.map(|a| f1 * a),
            dd: std::array::from_fn(|k| f2 * self.d[k] * self.d[k] + f1 * self.dd[k]),
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn scale(self, a: f64) -> Self {
        Self {
            v: a * self.v,
            d: self.d.map(|x| a * x),
            dd: self.dd.map(|x| a * x),
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: std::array::from_fn(|k| self.d[k] + o.d[k]),
            dd: std::array::from_fn(|k| self.dd[k] + o.dd[k]),
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]),
            dd: std::array::from_fn(|k| self.dd[k] * o.v + 2.0 * self.d[k] * o.d[k] + self.v * o.dd[k]),
        }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, a: f64) -> Jet {
        self.v += a;
        self
    }
}

// ---------------------------------------------------------------------------
// Manufactured solutions

/// Shipped manufactured solutions, all of the separable form
/// `u_i = sin(πx) p_i(y) θ(t)` with quadratic `p_i` vanishing on the outer
/// boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsPreset {
    /// `θ = e^{-t}`, generic `p_i`.
    Smooth,
    /// `θ = 1 + t/2`.
    Polynomial,
    /// `u_2(x, y, t) = -u_1(x, -y, t)`, `θ = e^{-t}`.
    Antisymmetric,
}

impl MmsPreset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "smooth" => Some(Self::Smooth),
            "polynomial" => Some(Self::Polynomial),
            "antisymmetric" => Some(Self::Antisymmetric),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Smooth => "smooth",
            Self::Polynomial => "polynomial",
            Self::Antisymmetric => "antisymmetric",
        }
    }

    pub fn all() -> [Self; 3] {
        [Self::Smooth, Self::Polynomial, Self::Antisymmetric]
    }
}

/// Exact solution with the forcing that makes it solve the coupled problem.
#[derive(Debug, Clone, Copy)]
pub struct ManufacturedCase {
    pub preset: MmsPreset,
    pub nu: [f64; 2],
    /// Constant tangential advection speeds.
    pub sx: [f64; 2],
    pub coupling: Matrix2<f64>,
    /// `p_i(y) = a_0 + a_1 y + a_2 y²`.
    profiles: [[f64; 3]; 2],
}

/// Samples used by the construction-time residual check.
pub const MMS_CHECK_POINTS: usize = 20;
/// Residual tolerance of the construction-time check.
pub const MMS_CHECK_TOL: f64 = 1e-10;

impl ManufacturedCase {
    /// Builds the case and checks it against automatic differentiation at
    /// [`MMS_CHECK_POINTS`] random points. Only zero and tangential advection
    /// are supported.
    pub fn new(
        preset: MmsPreset,
        nu: [f64; 2],
        advection: [Advection; 2],
        coupling: Matrix2<f64>,
    ) -> Result<Self> {
        let mut sx = [0.0; 2];
        for i in 0..2 {
            sx[i] = match advection[i] {
                Advection::Zero => 0.0,
                Advection::Tangential { sx } => sx,
                Advection::Vortex { .. } => {
                    return Err(Error::Precondition(
                        "manufactured solutions support zero or tangential advection only".into(),
                    ))
                }
            };
        }
        // (1 - y)(1 + 2y), (1 + y)(2 - y), 1 - y²
        let profiles = match preset {
            MmsPreset::Smooth | MmsPreset::Polynomial => [[1.0, 1.0, -2.0], [2.0, 1.0, -1.0]],
            MmsPreset::Antisymmetric => [[1.0, 0.0, -1.0], [-1.0, 0.0, 1.0]],
        };
        let case = Self {
            preset,
            nu,
            sx,
            coupling,
            profiles,
        };
        let worst = case.residual_check(MMS_CHECK_POINTS, 0x6d6d73);
        if worst.is_nan() || worst > MMS_CHECK_TOL {
            return Err(Error::Structure(format!(
                "manufactured solution `{}` fails its residual check ({worst:.3e})",
                preset.name()
            )));
        }
        Ok(case)
    }

    /// Temporal degree of the exact solution, `None` if not polynomial.
    pub fn temporal_degree(&self) -> Option<usize> {
        match self.preset {
            MmsPreset::Polynomial => Some(1),
            _ => None,
        }
    }

    fn theta(&self, t: f64) -> (f64, f64) {
        match self.preset {
            MmsPreset::Polynomial => (1.0 + 0.5 * t, 0.5),
            _ => ((-t).exp(), -(-t).exp()),
        }
    }

    fn profile(&self, i: usize, y: f64) -> (f64, f64, f64) {
        let [a0, a1, a2] = self.profiles[i];
        (a0 + a1 * y + a2 * y * y, a1 + 2.0 * a2 * y, 2.0 * a2)
    }

    pub fn exact(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        self.exact_jet(i, Jet::constant(x), Jet::constant(y), Jet::constant(t))
            .v
    }

    /// Exact solution evaluated on jets.
    pub fn exact_jet(&self, i: usize, x: Jet, y: Jet, t: Jet) -> Jet {
        let [a0, a1, a2] = self.profiles[i];
        let p = y * y.scale(a2) + y.scale(a1) + a0;
        let theta = match self.preset {
            MmsPreset::Polynomial => t.scale(0.5) + 1.0,
            _ => (-t).exp(),
        };
        x.scale(PI).sin() * p * theta
    }

    /// `f_i = u_t - ν Δu + s·∇u`, written out by hand.
    pub fn interior_forcing(&self, i: usize, x: f64, y: f64, t: f64) -> f64 {
        let (s, c) = (PI * x).sin_cos();
        let (p, _, p2) = self.profile(i, y);
        let (th, dth) = self.theta(t);
        let nu = self.nu[i];
        s * p * dth + nu * (PI * PI * s * p * th - s * p2 * th) + self.sx[i] * PI * c * p * th
    }

    /// `g_i = b_{i1} u_1 + b_{i2} u_2 + ν_i n_i·∇u_i` on `Γ`, by hand.
    pub fn interface_forcing(&self, i: usize, x: f64, t: f64) -> f64 {
        let s = (PI * x).sin();
        let (th, _) = self.theta(t);
        let normal = [-1.0, 1.0];
        let mut g = 0.0;
        for j in 0..2 {
            g += self.coupling[(i, j)] * s * self.profile(j, 0.0).0 * th;
        }
        g + self.nu[i] * normal[i] * s * self.profile(i, 0.0).1 * th
    }

    /// True when `g₁ + g₂ ≡ 0`.
    pub fn opposite_interface_forcing(&self) -> bool {
        let b = &self.coupling;
        let (p1, p2) = (self.profile(0, 0.0), self.profile(1, 0.0));
        let c = (b[(0, 0)] + b[(1, 0)]) * p1.0 + (b[(0, 1)] + b[(1, 1)]) * p2.0 - self.nu[0] * p1.1
            + self.nu[1] * p2.1;
        c.abs() <= 1e-14
    }

    /// Largest residual of the PDE, the interface conditions and the outer
    /// boundary condition at `n` random space-time points.
    pub fn residual_check(&self, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = [-1.0, 1.0];
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let x: f64 = rng.random();
            let t: f64 = 2.0 * rng.random::<f64>();
            for i in 0..2 {
                let y: f64 = if i == 0 {
                    rng.random()
                } else {
                    -rng.random::<f64>()
                };
                let u = self.exact_jet(i, Jet::var(x, 0), Jet::var(y, 1), Jet::var(t, 2));
                let pde = u.d[2] - self.nu[i] * (u.dd[0] + u.dd[1]) + self.sx[i] * u.d[0]
                    - self.interior_forcing(i, x, y, t);
                let on_gamma: [Jet; 2] = std::array::from_fn(|j| {
                    self.exact_jet(j, Jet::var(x, 0), Jet::var(0.0, 1), Jet::var(t, 2))
                });
                let robin = self.coupling[(i, 0)] * on_gamma[0].v
                    + self.coupling[(i, 1)] * on_gamma[1].v
                    + self.nu[i] * normal[i] * on_gamma[i].d[1]
                    - self.interface_forcing(i, x, t);
                let outer = if i == 0 { 1.0 } else { -1.0 };
                let boundary = self
                    .exact(i, 0.0, y, t)
                    .abs()
                    .max(self.exact(i, 1.0, y, t).abs())
                    .max(self.exact(i, x, outer, t).abs());
                worst = worst.max(pde.abs()).max(robin.abs()).max(boundary);
            }
        }
        worst
    }

    /// Continuous problem data of the case.
    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let advection = self.sx.map(|sx| {
            if sx == 0.0 {
                Advection::Zero
            } else {
                Advection::Tangential { sx }
            }
        });
        let case = *self;
        let f: [SpaceTimeFn; 2] = std::array::from_fn(|i| {
            Arc::new(move |x, y, t| case.interior_forcing(i, x, y, t)) as SpaceTimeFn
        });
        let g0 = Arc::new(move |x, t| case.interface_forcing(0, x, t));
        let g1 = Arc::new(move |x, t| case.interface_forcing(1, x, t));
        let interface = if self.opposite_interface_forcing() {
            InterfaceSource::Opposite(g0)
        } else {
            InterfaceSource::General([g0, g1])
        };
        let initial: [SpaceFn; 2] =
            std::array::from_fn(|i| Arc::new(move |x, y| case.exact(i, x, y, 0.0)) as SpaceFn);
        Ok(ProblemSpec::new(self.nu, advection, self.coupling)?
            .with_interior_source(InteriorSource::Given(f))
            .with_interface_source(interface)
            .with_initial(initial))
    }

    /// Discrete initial state with no fast transient: the semi-discrete
    /// solution started from it has the same temporal profile as the exact
    /// solution (`e^{-t} a` or `α + t β`).
    pub fn prepared_initial(&self, problem: &DiscreteProblem) -> Result<[DVector<f64>; 2]> {
        let g = GlobalSystem::new(&problem.ops, &problem.loads);
        let a = match self.preset {
            MmsPreset::Polynomial => g.affine_solution()?.0,
            MmsPreset::Smooth | MmsPreset::Antisymmetric => g.exponential_solution(1.0)?,
        };
        Ok([g.part(0, &a), g.part(1, &a)])
    }

    /// Spatial discretization on an `nx × ny_i` grid per subdomain.
    pub fn discretize(&self, nx: usize, ny: [usize; 2]) -> Result<DiscreteProblem> {
        let spec = self.problem_spec()?;
        let ops = assemble_on_grid(nx, ny, &spec)?;
        let loads = ops.loads(&spec)?;
        let initial = ops.initial_state(&spec)?;
        Ok(DiscreteProblem { ops, loads, initial })
    }
}

// ---------------------------------------------------------------------------
// Monolithic semi-discrete system

/// The coupled semi-discrete system `M u̇ = -K u + F(t)` on the stacked
/// unknowns `(u_1, u_2)`, with `K_ij = δ_ij L_i + T_iᵀ M_Γ b_ij T_j` and
/// `F_i = f_i + T_iᵀ (g_i, μ)_Γ`.
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    pub dims: [usize; 2],
    pub mass: Csr,
    pub operator: Csr,
    trace_t: [Csr; 2],
    loads: Loads,
    interface_dim: usize,
}

fn place(coo: &mut CooMatrix<f64>, row: usize, col: usize, scale: f64, block: &Csr) {
    for (r, c, v) in block.triplet_iter() {
        coo.push(row + r, col + c, scale * v);
    }
}

impl GlobalSystem {
    pub fn new(ops: &FeOperators, loads: &Loads) -> Self {
        let dims = [ops.dim(0), ops.dim(1)];
        let n = dims[0] + dims[1];
        let off = [0, dims[0]];
        let b = ops.coupling();
        let mut mass = CooMatrix::new(n, n);
        let mut op = CooMatrix::new(n, n);
        for i in 0..2 {
            let s = ops.subdomain(i);
            place(&mut mass, off[i], off[i], 1.0, &s.mass);
            place(&mut op, off[i], off[i], 1.0, &s.operator);
            for j in 0..2 {
                if b[(i, j)] != 0.0 {
                    let block = &s.lift * &ops.subdomain(j).trace;
                    place(&mut op, off[i], off[j], b[(i, j)], &block);
                }
            }
        }
        Self {
            dims,
            mass: Csr::from(&mass),
            operator: Csr::from(&op),
            trace_t: std::array::from_fn(|i| ops.subdomain(i).trace.transpose()),
            loads: loads.clone(),
            interface_dim: ops.interface_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims[0] + self.dims[1]
    }

    pub fn operators(&self) -> SystemOperators<'_> {
        SystemOperators {
            mass: &self.mass,
            operator: &self.operator,
            lift: None,
        }
    }

    /// `F(t)`.
    pub fn load(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut off = 0;
        for i in 0..2 {
            let d = self.dims[i];
            let mut part = self.loads.interior_at(i, t, d);
            if self.loads.interface[i].is_some() {
                part += matvec(
                    &self.trace_t[i],
                    &self.loads.interface_at(i, t, self.interface_dim),
                );
            }
            out.rows_mut(off, d).copy_from(&part);
            off += d;
        }
        out
    }

    pub fn is_unforced(&self) -> bool {
        self.loads.is_unforced()
    }

    pub fn join(&self, u: &[DVector<f64>; 2]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.dims[0]).copy_from(&u[0]);
        out.rows_mut(self.dims[0], self.dims[1]).copy_from(&u[1]);
        out
    }

    pub fn part(&self, i: usize, v: &DVector<f64>) -> DVector<f64> {
        let off = if i == 0 { 0 } else { self.dims[0] };
        v.rows(off, self.dims[i]).into_owned()
    }

    fn factor(m: &Csr) -> Result<SparseLu> {
        let mut b = TripletBuilder::new(m.nrows(), m.ncols());
        b.add_csr(0, 0, 1.0, m);
        Ok(b.build()?.factorize()?)
    }

    /// For loads affine in time, the state `α` such that `α + t β` solves the
    /// system exactly (`K β = F₁`, `K α = F₀ - M β`).
    pub fn affine_solution(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let f0 = self.load(0.0);
        let f1 = self.load(1.0) - &f0;
        let k = Self::factor(&self.operator)?;
        let (beta, _) = k.solve(&f1)?;
        let (alpha, _) = k.solve(&(f0 - matvec(&self.mass, &beta)))?;
        Ok((alpha, beta))
    }

    /// For loads of the form `e^{-λt} F(0)`, the state `a` such that
    /// `e^{-λt} a` solves the system exactly (`(K - λM) a = F(0)`).
    pub fn exponential_solution(&self, decay: f64) -> Result<DVector<f64>> {
        let mut b = TripletBuilder::new(self.dim(), self.dim());
        b.add_csr(0, 0, 1.0, &self.operator);
        b.add_csr(0, 0, -decay, &self.mass);
        let (a, _) = b.build()?.factorize()?.solve(&self.load(0.0))?;
        Ok(a)
    }
}

/// Single-rate DGiT solve of the coupled system without any splitting:
/// `steps` steps of size `dt` from `t0`, returning every solved step.
pub fn monolithic_solve(
    problem: &DiscreteProblem,
    spec: &SchemeSpec,
    t0: f64,
    dt: f64,
    steps: usize,
    quadrature: Quadrature,
) -> Result<Vec<SubstepState>> {
    let global = GlobalSystem::new(&problem.ops, &problem.loads);
    let source = |t: f64| global.load(t);
    let src: Option<&dyn Fn(f64) -> DVector<f64>> = if global.is_unforced() { None } else { Some(&source) };
    let mut out = Vec::with_capacity(steps);
    march(
        &global.operators(),
        spec,
        t0,
        dt,
        steps,
        vec![global.join(&problem.initial)],
        src,
        quadrature,
        |_, s| out.push(s.clone()),
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reference solutions

/// Time integrator behind a reference solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceScheme {
    CrankNicolson,
    /// Discontinuous Galerkin of order 2; nodal values are fifth-order accurate.
    DgQuadratic,
}

impl ReferenceScheme {
    /// Default steps per unit time.
    pub fn default_steps_per_unit(self) -> usize {
        match self {
            Self::CrankNicolson => 1 << 12,
            Self::DgQuadratic => 1 << 9,
        }
    }

    fn spec(self) -> SchemeSpec {
        match self {
            Self::CrankNicolson => SchemeSpec::crank_nicolson(),
            Self::DgQuadratic => SchemeSpec::discontinuous_galerkin(2),
        }
    }
}

/// Dense-in-time approximation of the semi-discrete solution: nodal values
/// of a fine single-rate solve joined by cubic Hermite interpolation, with
/// nodal slopes taken from the ODE itself.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub scheme: ReferenceScheme,
    pub dims: [usize; 2],
    t0: f64,
    dt: f64,
    values: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
}

/// Reference solve on `[0, t_final]` with `n_steps` uniform steps.
pub fn reference_solve(
    problem: &DiscreteProblem,
    t_final: f64,
    n_steps: usize,
    scheme: ReferenceScheme,
) -> Result<ReferenceSolution> {
    if n_steps == 0 || t_final.is_nan() || t_final <= 0.0 {
        return Err(Error::Precondition(format!(
            "reference solve needs t_final > 0 and at least one step, got {t_final} and {n_steps}"
        )));
    }
    let global = GlobalSystem::new(&problem.ops, &problem.loads);
    let dt = t_final / n_steps as f64;
    let u0 = global.join(&problem.initial);
    let mut values = Vec::with_capacity(n_steps + 1);
    values.push(u0.clone());
    let source = |t: f64| global.load(t);
    let src: Option<&dyn Fn(f64) -> DVector<f64>> = if global.is_unforced() { None } else { Some(&source) };
    march(
        &global.operators(),
        &scheme.spec(),
        0.0,
        dt,
        n_steps,
        vec![u0],
        src,
        Quadrature::Exact,
        |_, s| values.push(s.side.clone()),
    )?;
    let m = GlobalSystem::factor(&global.mass)?;
    let mut slopes = Vec::with_capacity(values.len());
    for (k, u) in values.iter().enumerate() {
        let mut r = -matvec(&global.operator, u);
        if src.is_some() {
            r += global.load(k as f64 * dt);
        }
        slopes.push(m.solve(&r)?.0);
    }
    Ok(ReferenceSolution {
        scheme,
        dims: global.dims,
        t0: 0.0,
        dt,
        values,
        slopes,
    })
}

/// Reference solve with the scheme's default resolution.
pub fn reference_solve_default(
    problem: &DiscreteProblem,
    t_final: f64,
    scheme: ReferenceScheme,
) -> Result<ReferenceSolution> {
    let n = ((scheme.default_steps_per_unit() as f64 * t_final).ceil() as usize).max(1);
    reference_solve(problem, t_final, n, scheme)
}

impl ReferenceSolution {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.dt
    }

    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.node_time(self.steps())
    }

    pub fn node_value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    fn segment(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt).floor();
        (k.max(0.0) as usize).min(self.steps() - 1)
    }

    fn eval_on(&self, k: usize, t: f64) -> DVector<f64> {
        let h = self.dt;
        let s = (t - self.node_time(k)) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = self.values[k].scale(h00);
        out.axpy(h * h10, &self.slopes[k], 1.0);
        out.axpy(h01, &self.values[k + 1], 1.0);
        out.axpy(h * h11, &self.slopes[k + 1], 1.0);
        out
    }

    /// Stacked state at time `t`.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        self.eval_on(self.segment(t), t)
    }

    /// State of subdomain `i` at time `t`.
    pub fn eval_sub(&self, i: usize, t: f64) -> DVector<f64> {
        let off = if i == 0 { 0 } else { self.dims[0] };
        self.eval(t).rows(off, self.dims[i]).into_owned()
    }

    /// Oracle nodes strictly inside `interval`, with the interval ends, sorted.
    fn breakpoints(&self, interval: Interval) -> Vec<f64> {
        let (a, b) = (interval.start(), interval.end());
        let eps = 1e-9 * self.dt;
        let mut pts = vec![a];
        let first = ((a - self.t0) / self.dt).floor() as i64 + 1;
        let mut k = first.max(0) as usize;
        while k <= self.steps() && self.node_time(k) < b - eps {
            if self.node_time(k) > a + eps {
                pts.push(self.node_time(k));
            }
            k += 1;
        }
        pts.push(b);
        pts
    }

    /// `∫_I φ(t, u_ref(t)) dt`, split at the oracle nodes so that the
    /// `points`-point Gauss rule integrates polynomial integrands exactly.
    pub fn integrate(
        &self,
        interval: Interval,
        points: usize,
        mut phi: impl FnMut(f64, &DVector<f64>) -> f64,
    ) -> Result<f64> {
        let rule = gauss_rule(points);
        let pts = self.breakpoints(interval);
        let mut sum = 0.0;
        for w in pts.windows(2) {
            let piece = Interval::new(w[0], w[1])?;
            let k = self.segment(piece.midpoint());
            for (t, wt) in rule.mapped(piece) {
                sum += wt * phi(t, &self.eval_on(k, t));
            }
        }
        Ok(sum)
    }

    /// Largest mass-norm change of the nodal values when this solution is
    /// compared with `finer` (which must refine it by an integer factor).
    pub fn drift(&self, finer: &ReferenceSolution, mass: &Csr) -> f64 {
        let ratio = (finer.steps() / self.steps()).max(1);
        (0..=self.steps())
            .map(|k| {
                let e = &self.values[k] - &finer.values[k * ratio];
                e.dot(&matvec(mass, &e)).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Error norms

/// Errors of a multirate run against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Broken space-time error `|||e_i|||`.
    pub l2: [f64; 2],
    /// Contribution of each window to `|||e_i|||²`.
    pub window_l2_sq: Vec<[f64; 2]>,
    /// `‖u_ref(t_i^n) - U_i^n‖_M` at every substep end, in time order.
    pub nodal: [Vec<f64>; 2],
    /// `E_ñ = (Σ_i ‖u_ref(t^ñ) - U_i(t^ñ)‖²_M)^{1/2}`, `ñ = 1..N`.
    pub sync: Vec<f64>,
    /// `(Σ_ñ ∫ ‖F_i^ref - F_i‖²_{M_Γ} dt)^{1/2}`.
    pub flux_l2: [f64; 2],
}

impl ErrorReport {
    /// `(|||e_1|||² + |||e_2|||²)^{1/2}`.
    pub fn l2_total(&self) -> f64 {
        self.l2[0].hypot(self.l2[1])
    }

    pub fn max_nodal(&self) -> f64 {
        self.nodal.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn max_sync(&self) -> f64 {
        self.sync.iter().copied().fold(0.0, f64::max)
    }
}

/// Error norms of `traj` against `oracle`, in the mass norms of `problem`.
/// Integrals are split at the oracle nodes and evaluated with Gauss rules
/// exact for the polynomial differences.
pub fn error_norms(
    traj: &Trajectory,
    oracle: &ReferenceSolution,
    problem: &DiscreteProblem,
) -> Result<ErrorReport> {
    let ops = &problem.ops;
    let dims = [ops.dim(0), ops.dim(1)];
    if dims != oracle.dims {
        return Err(Error::Dimension(format!(
            "oracle dimensions {:?} do not match the problem {dims:?}",
            oracle.dims
        )));
    }
    let last = traj.config.sync_time(traj.windows.len());
    if last > oracle.t_final() * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "oracle ends at {} but the trajectory reaches {last}",
            oracle.t_final()
        )));
    }
    let split = |v: &DVector<f64>, i: usize| -> DVector<f64> {
        v.rows(if i == 0 { 0 } else { dims[0] }, dims[i]).into_owned()
    };
    let mass_sq = |i: usize, e: &DVector<f64>| e.dot(&matvec(&ops.subdomain(i).mass, e));
    let m_gamma = ops.interface_mass();
    let m_gamma_lu = GlobalSystem::factor(m_gamma)?;
    let b = ops.coupling();
    let d_gamma = ops.interface_dim();

    let mut report = ErrorReport {
        l2: [0.0; 2],
        window_l2_sq: Vec::with_capacity(traj.windows.len()),
        nodal: [Vec::new(), Vec::new()],
        sync: Vec::with_capacity(traj.windows.len()),
        flux_l2: [0.0; 2],
    };
    let mut flux_sq = [0.0; 2];
    for sol in &traj.windows {
        let mut win = [0.0; 2];
        for i in 0..2 {
            for (n, poly) in sol.substeps[i].iter().enumerate() {
                let points = poly.order().max(3) + 1;
                win[i] += oracle.integrate(poly.interval(), points, |t, u| {
                    let e = split(u, i) - poly.eval(t);
                    mass_sq(i, &e)
                })?;
                let t_end = poly.interval().end();
                let e = oracle.eval_sub(i, t_end) - &sol.sides[i][n + 1];
                report.nodal[i].push(mass_sq(i, &e).sqrt());
            }
            let flux = &sol.fluxes[i];
            flux_sq[i] += oracle.integrate(sol.interval, 8, |t, u| {
                let mut fr = DVector::zeros(d_gamma);
                for j in 0..2 {
                    if b[(i, j)] != 0.0 {
                        fr += matvec(&ops.subdomain(j).trace, &split(u, j)).scale(b[(i, j)]);
                    }
                }
                if problem.loads.interface[i].is_some() {
                    let gvec = problem.loads.interface_at(i, t, d_gamma);
                    fr -= m_gamma_lu.solve(&gvec).map(|s| s.0).unwrap_or(gvec);
                }
                let e = fr - flux.eval(t);
                e.dot(&matvec(m_gamma, &e))
            })?;
        }
        let t_sync = sol.interval.end();
        let u_ref = oracle.eval(t_sync);
        let e_sync: f64 = (0..2)
            .map(|i| mass_sq(i, &(split(&u_ref, i) - sol.final_state(i))))
            .sum();
        report.sync.push(e_sync.sqrt());
        report.l2[0] += win[0];
        report.l2[1] += win[1];
        report.window_l2_sq.push(win);
    }
    report.l2 = report.l2.map(f64::sqrt);
    report.flux_l2 = flux_sq.map(f64::sqrt);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Convergence studies

/// Quantity whose rate a study reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateTarget {
    /// Broken space-time L² error of both subdomains.
    L2,
    /// Largest synchronization-time nodal error.
    Nodal,
    /// Space-time L² error of both interface fluxes.
    Flux,
}

/// Errors below this are treated as roundoff and excluded from slopes.
pub const ERROR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub level: usize,
    pub dt: f64,
    pub dt_sub: [f64; 2],
    pub err_l2: [f64; 2],
    pub err_sync: f64,
    /// Flux errors (not part of the CSV).
    pub err_flux: [f64; 2],
    /// Rate of the target quantity against the previous level; `NaN` on level 0.
    pub rate_running: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub target: RateTarget,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of the target over the levels above the floor.
    pub observed_rate: f64,
    /// Levels excluded because the target error sits at the roundoff floor.
    pub excluded: Vec<usize>,
    pub notes: Vec<String>,
}

impl RateRow {
    pub fn value(&self, target: RateTarget) -> f64 {
        match target {
            RateTarget::L2 => self.err_l2[0].hypot(self.err_l2[1]),
            RateTarget::Nodal => self.err_sync,
            RateTarget::Flux => self.err_flux[0].hypot(self.err_flux[1]),
        }
    }
}

impl RateTable {
    /// Slope of another quantity over the same levels.
    pub fn rate_of(&self, target: RateTarget) -> f64 {
        let (dt, err): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.value(target) > ERROR_FLOOR)
            .map(|r| (r.dt, r.value(target)))
            .unzip();
        if dt.len() < 2 {
            f64::NAN
        } else {
            fit_slope(&dt, &err)
        }
    }

    /// CSV: `level,dt,dt1,dt2,err_l2_u1,err_l2_u2,err_sync,rate_running`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "level,dt,dt1,dt2,err_l2_u1,err_l2_u2,err_sync,rate_running")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.level,
                fmt17(r.dt),
                fmt17(r.dt_sub[0]),
                fmt17(r.dt_sub[1]),
                fmt17(r.err_l2[0]),
                fmt17(r.err_l2[1]),
                fmt17(r.err_sync),
                fmt17(r.rate_running)
            )?;
        }
        Ok(())
    }
}

/// Everything a convergence study needs besides the refinement schedule.
#[derive(Clone, Copy)]
pub struct StudySetup<'a> {
    pub problem: &'a DiscreteProblem,
    pub spec: &'a SchemeSpec,
    pub options: &'a RunOptions,
    pub oracle: &'a ReferenceSolution,
}

/// Errors of one refinement level: `base` with `2^level` times the windows.
/// Initialization windows are filled from the oracle.
pub fn study_level(
    setup: StudySetup<'_>,
    base: &WindowConfig,
    level: usize,
) -> Result<(WindowConfig, ErrorReport)> {
    let mut cfg = *base;
    cfg.windows = base.windows << level;
    cfg.init_windows = if base.init_windows > 1 {
        ((base.init_windows - 1) << level) + 1
    } else {
        1
    };
    cfg.validate()?;
    let oracle = setup.oracle;
    let init = |i: usize, t: f64| oracle.eval_sub(i, t);
    let init_ref: Option<&dyn Fn(usize, f64) -> DVector<f64>> =
        if cfg.init_windows > 1 { Some(&init) } else { None };
    let traj = run_simulation(setup.problem, setup.spec, &cfg, setup.options, init_ref)?;
    let report = error_norms(&traj, oracle, setup.problem)?;
    Ok((cfg, report))
}

/// Convergence study over `levels` halvings of `Δt` (substep counts and flux
/// orders fixed). Levels are distributed over `jobs` threads.
pub fn convergence_study(
    setup: StudySetup<'_>,
    base: &WindowConfig,
    levels: usize,
    target: RateTarget,
    jobs: usize,
) -> Result<RateTable> {
    if levels < 3 {
        return Err(Error::Precondition(format!(
            "a convergence study needs at least 3 levels, got {levels}"
        )));
    }
    let jobs = jobs.clamp(1, levels);
    let mut results: Vec<Option<Result<(WindowConfig, ErrorReport)>>> = (0..levels).map(|_| None).collect();
    if jobs == 1 {
        for (level, slot) in results.iter_mut().enumerate() {
            *slot = Some(study_level(setup, base, level));
        }
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<_> = results.chunks_mut(levels.div_ceil(jobs)).collect();
            let mut start = 0;
            for chunk in chunks {
                let first = start;
                start += chunk.len();
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(study_level(setup, base, first + k));
                    }
                });
            }
        });
    }
    let mut rows = Vec::with_capacity(levels);
    for (level, r) in results.into_iter().enumerate() {
        let (cfg, report) = r.expect("every level ran")?;
        log::info!(
            "level {level}: dt = {:.3e}, l2 = {:.3e}, sync = {:.3e}",
            cfg.dt(),
            report.l2_total(),
            report.max_sync()
        );
        rows.push(RateRow {
            level,
            dt: cfg.dt(),
            dt_sub: [cfg.dt_sub(0), cfg.dt_sub(1)],
            err_l2: report.l2,
            err_sync: report.max_sync(),
            err_flux: report.flux_l2,
            rate_running: f64::NAN,
        });
    }
    for k in 1..rows.len() {
        let (a, b) = (rows[k - 1].value(target), rows[k].value(target));
        rows[k].rate_running = (a / b).ln() / (rows[k - 1].dt / rows[k].dt).ln();
    }
    let mut table = RateTable {
        target,
        rows,
        observed_rate: f64::NAN,
        excluded: Vec::new(),
        notes: Vec::new(),
    };
    for r in &table.rows {
        if r.value(target) <= ERROR_FLOOR {
            table.excluded.push(r.level);
            table.notes.push(format!(
                "level {} excluded: error {:.3e} at the roundoff floor",
                r.level,
                r.value(target)
            ));
        }
    }
    table.observed_rate = table.rate_of(target);
    Ok(table)
}

// ---------------------------------------------------------------------------
// Energy

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// `Σ_i ½‖U_i(t^ñ)‖²_M`, `ñ = 0..N`.
    pub energies: Vec<f64>,
    /// Interfacial energy term per window, where defined.
    pub interfacial: Vec<Option<f64>>,
    /// Energies non-increasing within `1e-12 E(0)`.
    pub non_increasing: bool,
}

pub fn energy_report(traj: &Trajectory) -> EnergyReport {
    let energies: Vec<f64> = (0..traj.energies.len()).map(|n| traj.total_energy(n)).collect();
    let tol = 1e-12 * energies[0];
    let non_increasing = energies.windows(2).all(|w| w[1] <= w[0] + tol);
    EnergyReport {
        energies,
        interfacial: traj.interfacial.clone(),
        non_increasing,
    }
}

//! One DGiT substep: `n_s` side conditions plus the variational equations
//! tested against polynomials of order `q + 1 - n_s`.
//!
//! Unknowns of a substep are the Legendre coefficients `c_0, …, c_q` of the
//! substep polynomial and the side value `U^n`, each of length `d_Ω`, so a
//! block has `(q + 2) d_Ω` rows. Rows and couplings are stored symbolically
//! as [`Term`]s (a scalar times one of the operators `I`, `M`, `L`, `T_iᵀM_Γ`
//! acting on a variable), which lets the window assembler place them in the
//! monolithic system and lets the fixed-point solver move selected terms to
//! the right-hand side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fespace::{FeOperators, Loads};
use crate::linalg::{matvec, Csr, SparseLu, TripletBuilder};
use crate::timepoly::{
    build_dtilde, cross_gram, gauss_rule, legendre_derivatives, legendre_values, Interval, SchemeSpec,
    TimePoly,
};

/// Treatment of one family of time integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    /// Gauss quadrature; exact for every polynomial integrand.
    Exact,
    /// "Product of averages": `∫ a b dt ≈ |I| (a)^{avg} (b)^{avg}` with endpoint
    /// averages. For Crank–Nicolson this is the classical trapezoidal form.
    Trapezoid,
}

/// Quadrature choice per integral family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureFlags {
    /// `∫ (f_i, v) dt` in the substep equations.
    pub forcing: Quadrature,
    /// `∫ (F_i, v)_Γ dt` in the substep equations.
    pub flux: Quadrature,
    /// The trace projection right side `Σ_n ∫ (u_i^n, λ)_Γ dt`.
    pub trace: Quadrature,
    /// `∫ (g_i, λ)_Γ dt` in the flux definition.
    pub interface_forcing: Quadrature,
}

impl QuadratureFlags {
    pub fn exact() -> Self {
        Self {
            forcing: Quadrature::Exact,
            flux: Quadrature::Exact,
            trace: Quadrature::Exact,
            interface_forcing: Quadrature::Exact,
        }
    }

    pub fn trapezoid() -> Self {
        Self {
            forcing: Quadrature::Trapezoid,
            flux: Quadrature::Trapezoid,
            trace: Quadrature::Trapezoid,
            interface_forcing: Quadrature::Trapezoid,
        }
    }

    /// Trapezoid for the Crank–Nicolson scheme (its classical multirate form),
    /// exact otherwise.
    pub fn default_for(spec: &SchemeSpec) -> Self {
        if spec.q() == 1 && spec.n_s() == 2 && spec.is_continuous() {
            Self::trapezoid()
        } else {
            Self::exact()
        }
    }
}

/// Gauss points beyond the test order used for non-polynomial data.
const DATA_POINTS_EXTRA: usize = 6;

/// Operator applied to a variable in a [`Term`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Identity,
    Mass,
    /// `L = A + B_adv`.
    Operator,
    /// `T_iᵀ M_Γ`, mapping trace coefficients to subdomain loads.
    Lift,
}

/// Variable a [`Term`] acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Legendre coefficient `c_j` of the substep polynomial.
    Coeff(usize),
    /// Current side value `U^n`.
    Side,
    /// Earlier side value `U^{n-l}`, `l ≥ 1`.
    History(usize),
    /// Mode `k` of the window flux polynomial `F_i`.
    Flux(usize),
}

/// `scale · op · var`, contributing to block row `row` (rows of length `d_Ω`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub row: usize,
    pub var: Var,
    pub op: Op,
    pub scale: f64,
}

/// How the flux of the owning subdomain enters a substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxCoupling {
    pub order: usize,
    pub window: Interval,
}

/// Matrices a block's operators resolve to.
#[derive(Debug, Clone, Copy)]
pub struct SystemOperators<'a> {
    pub mass: &'a Csr,
    pub operator: &'a Csr,
    pub lift: Option<&'a Csr>,
}

impl<'a> SystemOperators<'a> {
    pub fn of(ops: &'a FeOperators, subdomain: usize) -> Self {
        let s = ops.subdomain(subdomain);
        Self {
            mass: &s.mass,
            operator: &s.operator,
            lift: Some(&s.lift),
        }
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    fn matrix(&self, op: Op) -> Option<&'a Csr> {
        match op {
            Op::Identity => None,
            Op::Mass => Some(self.mass),
            Op::Operator => Some(self.operator),
            Op::Lift => Some(self.lift.expect("flux terms need a lift operator")),
        }
    }

    /// `op · x`.
    pub fn apply(&self, op: Op, x: &DVector<f64>) -> DVector<f64> {
        match self.matrix(op) {
            None => x.clone(),
            Some(m) => matvec(m, x),
        }
    }

    /// Adds `scale · op` at `(row, col)` of a triplet system.
    pub fn add_to(&self, b: &mut TripletBuilder, row: usize, col: usize, op: Op, scale: f64) {
        match self.matrix(op) {
            None => b.add_identity(row, col, self.dim(), scale),
            Some(m) => b.add_csr(row, col, scale, m),
        }
    }
}

/// Linear equations of one substep.
#[derive(Debug, Clone)]
pub struct SubstepBlock {
    pub subdomain: usize,
    /// Substep index `n ≥ 1` within its window.
    pub index: usize,
    pub interval: Interval,
    pub q: usize,
    pub n_s: usize,
    pub dim: usize,
    pub flux: Option<FluxCoupling>,
    pub terms: Vec<Term>,
    /// Right-hand side, `(q + 2) d_Ω` entries (the forcing moments).
    pub load: DVector<f64>,
}

/// Solved substep.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstepState {
    pub poly: TimePoly,
    pub side: DVector<f64>,
}

impl SubstepBlock {
    pub fn rows(&self) -> usize {
        (self.q + 2) * self.dim
    }

    /// Number of earlier side values the block refers to.
    pub fn history_depth(&self) -> usize {
        self.terms
            .iter()
            .filter_map(|t| match t.var {
                Var::History(l) => Some(l),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Local column of an unknown (`Coeff` or `Side`).
    pub fn local_column(&self, var: Var) -> Option<usize> {
        match var {
            Var::Coeff(j) => Some(j * self.dim),
            Var::Side => Some((self.q + 1) * self.dim),
            _ => None,
        }
    }

    /// Local matrix over `(c_0, …, c_q, U^n)`. With `lag_operator`, the `L`
    /// terms are left out (they go to the right-hand side).
    pub fn local_matrix(&self, sys: &SystemOperators, lag_operator: bool) -> TripletBuilder {
        let n = self.rows();
        let mut b = TripletBuilder::new(n, n);
        for t in &self.terms {
            if lag_operator && t.op == Op::Operator {
                continue;
            }
            if let Some(col) = self.local_column(t.var) {
                sys.add_to(&mut b, t.row * self.dim, col, t.op, t.scale);
            }
        }
        b
    }

    /// Right-hand side given earlier side values (`history[l - 1] = U^{n-l}`),
    /// a flux polynomial, and, when the operator is lagged, the previous iterate.
    pub fn local_rhs(
        &self,
        sys: &SystemOperators,
        history: &[DVector<f64>],
        flux: Option<&TimePoly>,
        lagged: Option<&TimePoly>,
    ) -> Result<DVector<f64>> {
        let mut rhs = self.load.clone();
        for t in &self.terms {
            let value = match t.var {
                Var::History(l) => history
                    .get(l - 1)
                    .cloned()
                    .ok_or_else(|| Error::Precondition(format!("substep needs side value U^(n-{l})")))?,
                Var::Flux(k) => match flux {
                    Some(f) => f.mode(k),
                    None => continue,
                },
                Var::Coeff(j) if t.op == Op::Operator => match lagged {
                    Some(u) => u.mode(j),
                    None => continue,
                },
                _ => continue,
            };
            let contrib = sys.apply(t.op, &value) * t.scale;
            let mut rows = rhs.rows_mut(t.row * self.dim, self.dim);
            rows -= contrib;
        }
        Ok(rhs)
    }

    /// Unpacks a local solution vector.
    pub fn unpack(&self, x: &DVector<f64>) -> SubstepState {
        let d = self.dim;
        let coeffs = DMatrix::from_fn(self.q + 1, d, |j, c| x[j * d + c]);
        SubstepState {
            poly: TimePoly::new(self.interval, coeffs).expect("at least one mode"),
            side: x.rows((self.q + 1) * d, d).into_owned(),
        }
    }

    /// Solves the block in isolation: flux given, everything else implicit.
    pub fn solve(
        &self,
        sys: &SystemOperators,
        history: &[DVector<f64>],
        flux: Option<&TimePoly>,
    ) -> Result<SubstepState> {
        let lu = self.local_matrix(sys, false).build()?.factorize()?;
        self.solve_with(&lu, sys, history, flux)
    }

    /// As [`SubstepBlock::solve`] with a factorization of [`SubstepBlock::local_matrix`].
    pub fn solve_with(
        &self,
        lu: &SparseLu,
        sys: &SystemOperators,
        history: &[DVector<f64>],
        flux: Option<&TimePoly>,
    ) -> Result<SubstepState> {
        let rhs = self.local_rhs(sys, history, flux, None)?;
        let (x, _) = lu.solve(&rhs)?;
        Ok(self.unpack(&x))
    }
}

/// `∫_{-1}^{1} ψ_j ψ_p' ds`, rows `p = 0..=test_order`, columns `j = 0..=q`.
pub fn derivative_matrix(q: usize, test_order: usize) -> DMatrix<f64> {
    let rule = gauss_rule((q + test_order) / 2 + 1);
    let mut out = DMatrix::zeros(test_order + 1, q + 1);
    for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
        let psi = legendre_values(q, s);
        let dpsi = legendre_derivatives(test_order, s);
        for p in 0..=test_order {
            for j in 0..=q {
                out[(p, j)] += w * psi[j] * dpsi[p];
            }
        }
    }
    out
}

/// `(1 + (-1)^j) / 2`: endpoint average of `ψ_j` on its own interval.
fn own_average(j: usize) -> f64 {
    if j.is_multiple_of(2) {
        1.0
    } else {
        0.0
    }
}

/// Endpoint averages over `sub` of the window modes `ψ_0, …, ψ_order`.
pub fn window_mode_averages(sub: Interval, window: Interval, order: usize) -> Vec<f64> {
    let a = legendre_values(order, window.to_reference(sub.start()));
    let b = legendre_values(order, window.to_reference(sub.end()));
    a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// `∫_sub ψ_m^{sub} ψ_k^{win} dt` (exact), or its product-of-averages approximation.
pub fn coupling_gram(
    sub: Interval,
    sub_order: usize,
    window: Interval,
    win_order: usize,
    quadrature: Quadrature,
) -> DMatrix<f64> {
    match quadrature {
        Quadrature::Exact => cross_gram(sub, sub_order, window, win_order),
        Quadrature::Trapezoid => {
            let avg = window_mode_averages(sub, window, win_order);
            DMatrix::from_fn(sub_order + 1, win_order + 1, |m, k| {
                sub.len() * own_average(m) * avg[k]
            })
        }
    }
}

/// `∫_I f(t) ψ_p(t) dt` for `p = 0..=order`, by Gauss quadrature or product of averages.
pub fn data_moments(
    f: &dyn Fn(f64) -> DVector<f64>,
    interval: Interval,
    order: usize,
    quadrature: Quadrature,
) -> Vec<DVector<f64>> {
    match quadrature {
        Quadrature::Exact => {
            let rule = gauss_rule(order + DATA_POINTS_EXTRA);
            let mut out: Vec<DVector<f64>> = Vec::new();
            for (t, w) in rule.mapped(interval) {
                let v = f(t);
                if out.is_empty() {
                    out = vec![DVector::zeros(v.len()); order + 1];
                }
                let psi = legendre_values(order, interval.to_reference(t));
                for (p, m) in out.iter_mut().enumerate() {
                    m.axpy(w * psi[p], &v, 1.0);
                }
            }
            out
        }
        Quadrature::Trapezoid => {
            let avg = 0.5 * (f(interval.start()) + f(interval.end()));
            (0..=order)
                .map(|p| &avg * (interval.len() * own_average(p)))
                .collect()
        }
    }
}

/// Equations of substep `index` of subdomain `subdomain` on `interval`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_substep(
    ops: &FeOperators,
    subdomain: usize,
    spec: &SchemeSpec,
    interval: Interval,
    index: usize,
    flux: Option<FluxCoupling>,
    flags: &QuadratureFlags,
    loads: &Loads,
) -> Result<SubstepBlock> {
    let dim = ops.dim(subdomain);
    let load = loads.interior[subdomain].clone();
    let source = load.as_ref().map(|f| f.as_ref() as &dyn Fn(f64) -> DVector<f64>);
    let mut block = assemble_block(dim, spec, interval, index, flux, flags, source)?;
    block.subdomain = subdomain;
    Ok(block)
}

/// [`assemble_substep`] for an arbitrary system of dimension `dim` with load `source`.
pub fn assemble_block(
    dim: usize,
    spec: &SchemeSpec,
    interval: Interval,
    index: usize,
    flux: Option<FluxCoupling>,
    flags: &QuadratureFlags,
    source: Option<&dyn Fn(f64) -> DVector<f64>>,
) -> Result<SubstepBlock> {
    if !build_dtilde(spec).nonsingular {
        return Err(Error::SingularSideConditions {
            det: build_dtilde(spec).determinant,
        });
    }
    if let Some(fc) = flux {
        if !fc.window.contains_interval(&interval) {
            return Err(Error::Structure(format!(
                "substep ({}, {}) is not inside window ({}, {})",
                interval.start(),
                interval.end(),
                fc.window.start(),
                fc.window.end()
            )));
        }
    }
    let (q, n_s) = (spec.q(), spec.n_s());
    let p_max = spec.test_order();
    let d = spec.side_matrix();
    let mut terms = Vec::new();

    for (k, &theta) in spec.thetas().iter().enumerate() {
        let psi = legendre_values(q, 2.0 * theta - 1.0);
        for (j, &v) in psi.iter().enumerate() {
            terms.push(Term {
                row: k,
                var: Var::Coeff(j),
                op: Op::Identity,
                scale: v,
            });
        }
        for l in 0..d.ncols() {
            let var = if l == 0 { Var::Side } else { Var::History(l) };
            terms.push(Term {
                row: k,
                var,
                op: Op::Identity,
                scale: -d[(k, l)],
            });
        }
    }

    let deriv = derivative_matrix(q, p_max);
    let len = interval.len();
    let flux_gram = flux.map(|fc| coupling_gram(interval, p_max, fc.window, fc.order, flags.flux));
    for p in 0..=p_max {
        let row = n_s + p;
        let sign_left = if p % 2 == 0 { 1.0 } else { -1.0 };
        terms.push(Term {
            row,
            var: Var::Side,
            op: Op::Mass,
            scale: 1.0,
        });
        terms.push(Term {
            row,
            var: Var::History(1),
            op: Op::Mass,
            scale: -sign_left,
        });
        for j in 0..=q {
            if deriv[(p, j)] != 0.0 {
                terms.push(Term {
                    row,
                    var: Var::Coeff(j),
                    op: Op::Mass,
                    scale: -deriv[(p, j)],
                });
            }
        }
        if p <= q {
            let gram = len / (2 * p + 1) as f64;
            terms.push(Term {
                row,
                var: Var::Coeff(p),
                op: Op::Operator,
                scale: gram,
            });
        }
        if let (Some(fc), Some(x)) = (flux, &flux_gram) {
            for k in 0..=fc.order {
                if x[(p, k)] != 0.0 {
                    terms.push(Term {
                        row,
                        var: Var::Flux(k),
                        op: Op::Lift,
                        scale: x[(p, k)],
                    });
                }
            }
        }
    }
    terms.retain(|t| t.scale != 0.0);

    let mut load = DVector::zeros((q + 2) * dim);
    if let Some(f) = source {
        for (p, m) in data_moments(f, interval, p_max, flags.forcing).iter().enumerate() {
            load.rows_mut((n_s + p) * dim, dim).copy_from(m);
        }
    }
    Ok(SubstepBlock {
        subdomain: 0,
        index,
        interval,
        q,
        n_s,
        dim,
        flux,
        terms,
        load,
    })
}

/// Classical Crank–Nicolson substep in the layout of [`assemble_substep`]:
///
/// `(M + Δt L / 2) U^n = (M - Δt L / 2) U^{n-1} - Δt T_iᵀ M_Γ (F_i)^{n-1/2} + Δt (f_i)^{n-1/2}`,
///
/// with the side conditions pinning the linear polynomial to `U^{n-1}` and `U^n`.
pub fn cn_substep(
    ops: &FeOperators,
    subdomain: usize,
    interval: Interval,
    index: usize,
    flux: Option<FluxCoupling>,
    loads: &Loads,
) -> Result<SubstepBlock> {
    let dim = ops.dim(subdomain);
    let dt = interval.len();
    let mut terms = vec![
        Term {
            row: 0,
            var: Var::Coeff(0),
            op: Op::Identity,
            scale: 1.0,
        },
        Term {
            row: 0,
            var: Var::Coeff(1),
            op: Op::Identity,
            scale: -1.0,
        },
        Term {
            row: 0,
            var: Var::History(1),
            op: Op::Identity,
            scale: -1.0,
        },
        Term {
            row: 1,
            var: Var::Coeff(0),
            op: Op::Identity,
            scale: 1.0,
        },
        Term {
            row: 1,
            var: Var::Coeff(1),
            op: Op::Identity,
            scale: 1.0,
        },
        Term {
            row: 1,
            var: Var::Side,
            op: Op::Identity,
            scale: -1.0,
        },
        Term {
            row: 2,
            var: Var::Side,
            op: Op::Mass,
            scale: 1.0,
        },
        Term {
            row: 2,
            var: Var::Side,
            op: Op::Operator,
            scale: 0.5 * dt,
        },
        Term {
            row: 2,
            var: Var::History(1),
            op: Op::Mass,
            scale: -1.0,
        },
        Term {
            row: 2,
            var: Var::History(1),
            op: Op::Operator,
            scale: 0.5 * dt,
        },
    ];
    if let Some(fc) = flux {
        for (k, avg) in window_mode_averages(interval, fc.window, fc.order)
            .into_iter()
            .enumerate()
        {
            terms.push(Term {
                row: 2,
                var: Var::Flux(k),
                op: Op::Lift,
                scale: dt * avg,
            });
        }
    }
    let mut load = DVector::zeros(3 * dim);
    if let Some(f) = &loads.interior[subdomain] {
        let avg = 0.5 * (f(interval.start()) + f(interval.end()));
        load.rows_mut(2 * dim, dim).copy_from(&(avg * dt));
    }
    Ok(SubstepBlock {
        subdomain,
        index,
        interval,
        q: 1,
        n_s: 2,
        dim,
        flux,
        terms,
        load,
    })
}

/// Largest side-condition violation `|u^n(t^{n,k}) - Σ_l D_{k,l} U^{n+1-l}|`
/// of a solved substep, `history[l - 1] = U^{n-l}`.
pub fn side_condition_residual(spec: &SchemeSpec, state: &SubstepState, history: &[DVector<f64>]) -> f64 {
    let d = spec.side_matrix();
    let mut worst: f64 = 0.0;
    for (k, &theta) in spec.thetas().iter().enumerate() {
        let mut r = state.poly.eval_reference(2.0 * theta - 1.0);
        r.axpy(-d[(k, 0)], &state.side, 1.0);
        for l in 1..d.ncols() {
            r.axpy(-d[(k, l)], &history[l - 1], 1.0);
        }
        worst = worst.max(r.amax());
    }
    worst
}

/// Time marching of a single (uncoupled) system with a fixed step.
///
/// `history` holds `U^0, U^{-1}, …` (newest first) and must cover the scheme's
/// reach-back. `visit` sees every solved step.
#[allow(clippy::too_many_arguments)]
pub fn march(
    sys: &SystemOperators,
    spec: &SchemeSpec,
    t0: f64,
    dt: f64,
    steps: usize,
    mut history: Vec<DVector<f64>>,
    source: Option<&dyn Fn(f64) -> DVector<f64>>,
    quadrature: Quadrature,
    mut visit: impl FnMut(usize, &SubstepState),
) -> Result<Vec<DVector<f64>>> {
    if steps == 0 {
        return Ok(history);
    }
    let flags = QuadratureFlags {
        forcing: quadrature,
        ..QuadratureFlags::exact()
    };
    let first = Interval::new(t0, t0 + dt)?;
    let template = assemble_block(sys.dim(), spec, first, 1, None, &flags, source)?;
    let depth = template.history_depth();
    if history.len() < depth {
        return Err(Error::Precondition(format!(
            "scheme needs {depth} starting values, got {}",
            history.len()
        )));
    }
    let lu = template.local_matrix(sys, false).build()?.factorize()?;
    for n in 1..=steps {
        let interval = Interval::new(t0 + (n - 1) as f64 * dt, t0 + n as f64 * dt)?;
        let block = if n == 1 {
            template.clone()
        } else {
            assemble_block(sys.dim(), spec, interval, n, None, &flags, source)?
        };
        let state = block.solve_with(&lu, sys, &history, None)?;
        visit(n, &state);
        history.insert(0, state.side);
        history.truncate(depth.max(1));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn toy(l: f64) -> FeOperators {
        FeOperators::scalar_toy([l, l], Matrix2::zeros())
    }

    fn unit(a: f64, b: f64) -> Interval {
        Interval::new(a, b).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn derivative_matrix_small_cases() {
        // ∫ ψ_0 ψ_1' = 2, ∫ ψ_1 ψ_2' = ∫ x · 3x = 2
        let d = derivative_matrix(2, 2);
        assert_relative_eq!(d[(1, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(d[(2, 1)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(d[(2, 0)], 0.0, epsilon = 1e-14);
        assert_eq!(d.row(0).amax(), 0.0);
    }

    #[test]
    fn steady_state_preserved_by_dg0() {
        let ops = toy(0.0);
        let spec = SchemeSpec::discontinuous_galerkin(0);
        let block = assemble_substep(
            &ops,
            0,
            &spec,
            unit(0.0, 0.3),
            1,
            None,
            &QuadratureFlags::exact(),
            &Loads::zero(),
        )
        .unwrap();
        let s = block
            .solve(&SystemOperators::of(&ops, 0), &[v(2.5)], None)
            .unwrap();
        assert_relative_eq!(s.side[0], 2.5, epsilon = 1e-15);
        assert_relative_eq!(s.poly.eval(0.1)[0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn crank_nicolson_decay_closed_form() {
        let ops = toy(1.0);
        let spec = SchemeSpec::crank_nicolson();
        let block = assemble_substep(
            &ops,
            0,
            &spec,
            unit(0.0, 0.1),
            1,
            None,
            &QuadratureFlags::exact(),
            &Loads::zero(),
        )
        .unwrap();
        let s = block
            .solve(&SystemOperators::of(&ops, 0), &[v(1.0)], None)
            .unwrap();
        assert_relative_eq!(s.side[0], 0.95 / 1.05, epsilon = 1e-15);
        // continuity: linear interpolant of the end values
        assert_relative_eq!(s.poly.eval(0.0)[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.poly.eval(0.1)[0], s.side[0], epsilon = 1e-15);
    }

    #[test]
    fn block_sizes() {
        let d = DMatrix::<f64>::identity(3, 3);
        let m = crate::linalg::csr_from_dense(&d);
        let ops = FeOperators::from_matrices(
            m.clone(),
            m.clone(),
            crate::linalg::csr_from_dense(&DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
            m.clone(),
            m,
            crate::linalg::csr_from_dense(&DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
            crate::linalg::csr_from_dense(&DMatrix::identity(1, 1)),
            Matrix2::zeros(),
        )
        .unwrap();
        let spec = SchemeSpec::discontinuous_galerkin(2);
        let block = assemble_substep(
            &ops,
            1,
            &spec,
            unit(0.0, 1.0),
            1,
            None,
            &QuadratureFlags::exact(),
            &Loads::zero(),
        )
        .unwrap();
        assert_eq!(block.rows(), 12);
        assert_eq!(
            block.local_matrix(&SystemOperators::of(&ops, 1), false).nrows(),
            12
        );
        for q in 0..4 {
            for n_s in 0..=q + 1 {
                let thetas: Vec<f64> = (0..n_s).map(|k| (k + 1) as f64 / n_s as f64).collect();
                let d = DMatrix::from_fn(n_s, 1, |_, _| 1.0);
                let Ok(spec) = SchemeSpec::new("probe", q, thetas, d) else {
                    continue;
                };
                let b = assemble_block(2, &spec, unit(0.0, 1.0), 1, None, &QuadratureFlags::exact(), None)
                    .unwrap();
                let max_row = b.terms.iter().map(|t| t.row).max().unwrap();
                assert_eq!(max_row + 1, q + 2);
                assert_eq!(b.rows(), (q + 2) * 2);
            }
        }
    }

    #[test]
    fn cn_classical_form_matches_trapezoid_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = SchemeSpec::crank_nicolson();
        for _ in 0..20 {
            let d = 4;
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose() + DMatrix::identity(d, d);
            let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let t = DMatrix::from_fn(2, d, |i, j| if i == j { 1.0 } else { 0.0 });
            let mg = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
            let ops = FeOperators::from_dense(&m, &l, &t, &m, &l, &t, &mg, Matrix2::zeros()).unwrap();
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loads = Loads {
                interior: [
                    Some(Arc::new(move |t: f64| {
                        DVector::from_iterator(d, c.iter().map(|c| c * (1.0 + t * t)))
                    })),
                    None,
                ],
                ..Loads::zero()
            };
            let window = unit(0.0, 0.4);
            let sub = unit(0.1, 0.2);
            let fc = FluxCoupling { order: 2, window };
            let flux =
                TimePoly::new(window, DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap();
            let u0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let sys = SystemOperators::of(&ops, 0);
            let a = assemble_substep(
                &ops,
                0,
                &spec,
                sub,
                1,
                Some(fc),
                &QuadratureFlags::trapezoid(),
                &loads,
            )
            .unwrap()
            .solve(&sys, &[u0.clone()], Some(&flux))
            .unwrap();
            let b = cn_substep(&ops, 0, sub, 1, Some(fc), &loads)
                .unwrap()
                .solve(&sys, &[u0], Some(&flux))
                .unwrap();
            let scale = a.side.amax().max(1e-300);
            assert!((&a.side - &b.side).amax() <= 1e-11 * scale);
            assert!((a.poly.coeffs() - b.poly.coeffs()).amax() <= 1e-11 * scale);
        }
    }

    #[test]
    fn cn_energy_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let l = &a * a.transpose();
        let m = DMatrix::identity(d, d) * 0.5;
        let t = DMatrix::from_fn(1, d, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let one = DMatrix::identity(1, 1);
        let ops = FeOperators::from_dense(&m, &l, &t, &m, &l, &t, &one, Matrix2::zeros()).unwrap();
        let sys = SystemOperators::of(&ops, 0);
        let mut u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut e = ops.energy_norm_sq(0, &u);
        for n in 0..30 {
            let i = unit(n as f64 * 0.2, (n + 1) as f64 * 0.2);
            let s = cn_substep(&ops, 0, i, 1, None, &Loads::zero())
                .unwrap()
                .solve(&sys, &[u], None)
                .unwrap();
            let e_new = ops.energy_norm_sq(0, &s.side);
            assert!(e_new <= e * (1.0 + 1e-14));
            e = e_new;
            u = s.side;
        }
    }

    #[test]
    fn cn_local_error_is_third_order() {
        // u' = -u + sin(3t), one step from the exact solution
        let ops = toy(1.0);
        let exact = |t: f64| {
            let c = 1.0 - (-3.0 / 10.0);
            c * (-t).exp() + ((3.0 * t).sin() - 3.0 * (3.0 * t).cos()) / 10.0
        };
        let loads = Loads {
            interior: [Some(Arc::new(|t: f64| v((3.0 * t).sin()))), None],
            ..Loads::zero()
        };
        let sys = SystemOperators::of(&ops, 0);
        let mut errs = Vec::new();
        let mut dts = Vec::new();
        for k in 0..5 {
            let dt = 0.2 / 2f64.powi(k);
            let t0 = 0.3;
            let s = cn_substep(&ops, 0, unit(t0, t0 + dt), 1, None, &loads)
                .unwrap()
                .solve(&sys, &[v(exact(t0))], None)
                .unwrap();
            errs.push((s.side[0] - exact(t0 + dt)).abs());
            dts.push(dt);
        }
        let slope = crate::verify::fit_slope(&dts, &errs);
        assert!((slope - 3.0).abs() < 0.2, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn polynomial_solutions_reproduced_with_zero_operator() {
        // u(t) = 1 + 2t - t² + t³/3 solves M u' = f with f = M u'.
        let ops = toy(0.0);
        let sys = SystemOperators::of(&ops, 0);
        let u = |t: f64| 1.0 + 2.0 * t - t * t + t * t * t / 3.0;
        let du = |t: f64| 2.0 - 2.0 * t + t * t;
        let loads = Loads {
            interior: [Some(Arc::new(move |t: f64| v(du(t)))), None],
            ..Loads::zero()
        };
        for spec in [
            SchemeSpec::discontinuous_galerkin(3),
            SchemeSpec::continuous_galerkin(3).unwrap(),
        ] {
            let i = unit(0.2, 0.5);
            let block =
                assemble_substep(&ops, 0, &spec, i, 1, None, &QuadratureFlags::exact(), &loads).unwrap();
            let s = block.solve(&sys, &[v(u(0.2))], None).unwrap();
            for t in [0.2, 0.31, 0.5] {
                assert_relative_eq!(s.poly.eval(t)[0], u(t), epsilon = 1e-12);
            }
            assert_relative_eq!(s.side[0], u(0.5), epsilon = 1e-12);
            assert!(side_condition_residual(&spec, &s, &[v(u(0.2))]) < 1e-12);
        }
    }

    #[test]
    fn singular_side_conditions_rejected() {
        let spec = SchemeSpec::new_unchecked(
            "repeated",
            2,
            vec![0.5, 0.5],
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        let r = assemble_block(1, &spec, unit(0.0, 1.0), 1, None, &QuadratureFlags::exact(), None);
        assert!(matches!(r, Err(Error::SingularSideConditions { .. })));
    }

    #[test]
    fn substep_outside_window_rejected() {
        let spec = SchemeSpec::crank_nicolson();
        let fc = FluxCoupling {
            order: 1,
            window: unit(0.0, 1.0),
        };
        let r = assemble_block(
            1,
            &spec,
            unit(0.5, 1.5),
            1,
            Some(fc),
            &QuadratureFlags::exact(),
            None,
        );
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn march_dg_matches_exponential() {
        let ops = toy(1.0);
        let sys = SystemOperators::of(&ops, 0);
        let spec = SchemeSpec::discontinuous_galerkin(2);
        let h = march(
            &sys,
            &spec,
            0.0,
            0.05,
            20,
            vec![v(1.0)],
            None,
            Quadrature::Exact,
            |_, _| {},
        )
        .unwrap();
        assert!((h[0][0] - (-1.0f64).exp()).abs() < 1e-9);
    }
}

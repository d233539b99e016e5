//! Polynomials in time.
//!
//! Every time-dependent quantity of the scheme (substep states, interface
//! traces, fluxes) is a vector-valued polynomial on some interval, stored in
//! the Legendre modal basis mapped from `[-1, 1]`. In that basis the L²
//! projection onto a lower order is a truncation and mass matrices in time
//! are diagonal, `∫ ψ_j ψ_k dt = |I| / (2j + 1) δ_jk`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Value of the degree-`j` Legendre polynomial at `x`, normalized so that `ψ_j(1) = 1`.
pub fn legendre_eval(j: usize, x: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for n in 1..j {
                let nf = n as f64;
                let p2 = ((2.0 * nf + 1.0) * x * p1 - nf * p0) / (nf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// `ψ_0(x), …, ψ_order(x)`.
pub fn legendre_values(order: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    if order >= 1 {
        out.push(x);
    }
    for n in 1..order {
        let nf = n as f64;
        let next = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
        out.push(next);
    }
    out
}

/// `ψ_0'(x), …, ψ_order'(x)` with respect to the reference variable.
pub fn legendre_derivatives(order: usize, x: f64) -> Vec<f64> {
    let vals = legendre_values(order, x);
    let mut out = vec![0.0; order + 1];
    if order >= 1 {
        out[1] = 1.0;
    }
    // ψ'_{n+1} = ψ'_{n-1} + (2n + 1) ψ_n
    for n in 1..order {
        out[n + 1] = out[n - 1] + (2.0 * n as f64 + 1.0) * vals[n];
    }
    out
}

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `n`-point Gauss–Legendre rule, exact for polynomials of degree `2n - 1`.
///
/// Nodes are returned in increasing order.
pub fn gauss_rule(n: usize) -> GaussRule {
    assert!(n >= 1, "a Gauss rule needs at least one point");
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let dx = legendre_values(n, x)[n] / legendre_derivatives(n, x)[n];
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre_derivatives(n, x)[n];
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    let mut pairs: Vec<_> = nodes.into_iter().zip(weights).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    GaussRule { nodes, weights }
}

impl GaussRule {
    /// Smallest rule integrating degree `degree` exactly.
    pub fn exact_for(degree: usize) -> Self {
        gauss_rule(degree / 2 + 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `interval`.
    pub fn mapped(&self, interval: Interval) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * interval.len();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&s, &w)| (interval.from_reference(s), w * half))
    }
}

/// Open time interval `(a, b)` with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let scale = a.abs().max(b.abs()).max(1.0);
        if !(a.is_finite() && b.is_finite()) || b - a <= 1e-14 * scale {
            return Err(Error::InvalidInterval { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn start(&self) -> f64 {
        self.a
    }

    pub fn end(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// Affine map `t ↦ s ∈ [-1, 1]`.
    pub fn to_reference(&self, t: f64) -> f64 {
        (2.0 * t - self.a - self.b) / (self.b - self.a)
    }

    pub fn from_reference(&self, s: f64) -> f64 {
        self.a + 0.5 * (s + 1.0) * (self.b - self.a)
    }

    /// Whether `other` lies inside `self` up to a relative tolerance.
    pub fn contains_interval(&self, other: &Interval) -> bool {
        let tol = 1e-12 * self.len().max(1.0);
        other.a >= self.a - tol && other.b <= self.b + tol
    }
}

/// Vector-valued polynomial on an interval in the Legendre modal basis.
///
/// Row `j` of `coeffs` holds the coefficient vector of mode `j`; columns index
/// spatial degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePoly {
    interval: Interval,
    coeffs: DMatrix<f64>,
}

impl TimePoly {
    pub fn new(interval: Interval, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.nrows() == 0 {
            return Err(Error::Dimension(
                "a time polynomial needs at least one mode".into(),
            ));
        }
        Ok(Self { interval, coeffs })
    }

    pub fn zeros(interval: Interval, order: usize, ncols: usize) -> Self {
        Self {
            interval,
            coeffs: DMatrix::zeros(order + 1, ncols),
        }
    }

    pub fn constant(interval: Interval, value: &DVector<f64>) -> Self {
        Self {
            interval,
            coeffs: DMatrix::from_row_slice(1, value.len(), value.as_slice()),
        }
    }

    /// Polynomial interpolating `start` at the left end and `end` at the right end.
    pub fn linear(interval: Interval, start: &DVector<f64>, end: &DVector<f64>) -> Self {
        let mut coeffs = DMatrix::zeros(2, start.len());
        coeffs.set_row(0, &(0.5 * (start + end)).transpose());
        coeffs.set_row(1, &(0.5 * (end - start)).transpose());
        Self { interval, coeffs }
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn order(&self) -> usize {
        self.coeffs.nrows() - 1
    }

    pub fn ncols(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> DMatrix<f64> {
        self.coeffs
    }

    /// Coefficient vector of mode `j` (zero beyond the order).
    pub fn mode(&self, j: usize) -> DVector<f64> {
        if j <= self.order() {
            self.coeffs.row(j).transpose()
        } else {
            DVector::zeros(self.ncols())
        }
    }

    /// Evaluation at `t`; points outside the interval use the polynomial extension.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        self.eval_reference(self.interval.to_reference(t))
    }

    pub fn eval_reference(&self, s: f64) -> DVector<f64> {
        let psi = legendre_values(self.order(), s);
        let mut out = DVector::zeros(self.ncols());
        for (j, p) in psi.iter().enumerate() {
            out.axpy(*p, &self.coeffs.row(j).transpose(), 1.0);
        }
        out
    }

    pub fn eval_derivative(&self, t: f64) -> DVector<f64> {
        let s = self.interval.to_reference(t);
        let dpsi = legendre_derivatives(self.order(), s);
        let scale = 2.0 / self.interval.len();
        let mut out = DVector::zeros(self.ncols());
        for (j, p) in dpsi.iter().enumerate() {
            out.axpy(*p * scale, &self.coeffs.row(j).transpose(), 1.0);
        }
        out
    }

    /// Average of the two endpoint values, `(v(a) + v(b)) / 2`.
    pub fn endpoint_average(&self) -> DVector<f64> {
        0.5 * (self.eval_reference(-1.0) + self.eval_reference(1.0))
    }

    pub fn add(&self, other: &TimePoly) -> Result<TimePoly> {
        if self.interval != other.interval || self.ncols() != other.ncols() {
            return Err(Error::Dimension(
                "time polynomials must share interval and column count to be added".into(),
            ));
        }
        let order = self.order().max(other.order());
        let mut coeffs = DMatrix::zeros(order + 1, self.ncols());
        {
            let mut head = coeffs.rows_mut(0, self.order() + 1);
            head += &self.coeffs;
        }
        {
            let mut head = coeffs.rows_mut(0, other.order() + 1);
            head += &other.coeffs;
        }
        Ok(TimePoly {
            interval: self.interval,
            coeffs,
        })
    }

    pub fn scaled(&self, factor: f64) -> TimePoly {
        TimePoly {
            interval: self.interval,
            coeffs: &self.coeffs * factor,
        }
    }

    /// L² projection onto a lower (or equal) order: drop the high modes.
    /// Raising the order pads with zero modes.
    pub fn truncated(&self, order: usize) -> TimePoly {
        let mut coeffs = DMatrix::zeros(order + 1, self.ncols());
        let keep = (order + 1).min(self.coeffs.nrows());
        coeffs.rows_mut(0, keep).copy_from(&self.coeffs.rows(0, keep));
        TimePoly {
            interval: self.interval,
            coeffs,
        }
    }

    /// Restriction of the columns through a linear map `v ↦ map * v`.
    pub fn map_columns(&self, map: &DMatrix<f64>) -> TimePoly {
        TimePoly {
            interval: self.interval,
            coeffs: &self.coeffs * map.transpose(),
        }
    }

    /// `∫ |v(t)|² dt` with the Euclidean norm on columns.
    pub fn squared_l2(&self) -> f64 {
        self.squared_l2_with(|c| c.norm_squared())
    }

    /// `∫ ‖v(t)‖² dt` for the quadratic form `norm_sq` on coefficient vectors.
    pub fn squared_l2_with(&self, norm_sq: impl Fn(&DVector<f64>) -> f64) -> f64 {
        let len = self.interval.len();
        (0..=self.order())
            .map(|j| len / (2 * j + 1) as f64 * norm_sq(&self.mode(j)))
            .sum()
    }
}

/// `X[m][k] = ∫_sub ψ_m(s_sub(t)) ψ_k(s_win(t)) dt`, computed exactly.
pub fn cross_gram(sub: Interval, sub_order: usize, win: Interval, win_order: usize) -> DMatrix<f64> {
    let rule = GaussRule::exact_for(sub_order + win_order);
    let mut out = DMatrix::zeros(sub_order + 1, win_order + 1);
    for (t, w) in rule.mapped(sub) {
        let a = legendre_values(sub_order, sub.to_reference(t));
        let b = legendre_values(win_order, win.to_reference(t));
        for m in 0..=sub_order {
            for k in 0..=win_order {
                out[(m, k)] += w * a[m] * b[k];
            }
        }
    }
    out
}

/// L² projection of a vector-valued function onto polynomials of order `order`,
/// using `order + 8` Gauss points (exact when `f` is a polynomial of degree up
/// to `order + 15`).
pub fn project_l2<F>(f: F, interval: Interval, order: usize) -> TimePoly
where
    F: Fn(f64) -> DVector<f64>,
{
    project_l2_with_rule(f, interval, order, &gauss_rule(order + 8))
}

pub fn project_l2_with_rule<F>(f: F, interval: Interval, order: usize, rule: &GaussRule) -> TimePoly
where
    F: Fn(f64) -> DVector<f64>,
{
    let mut coeffs: Option<DMatrix<f64>> = None;
    for (t, w) in rule.mapped(interval) {
        let value = f(t);
        let c = coeffs.get_or_insert_with(|| DMatrix::zeros(order + 1, value.len()));
        let psi = legendre_values(order, interval.to_reference(t));
        for (j, p) in psi.iter().enumerate() {
            let mut row = c.row_mut(j);
            row += (w * p) * value.transpose();
        }
    }
    let mut coeffs = coeffs.unwrap_or_else(|| DMatrix::zeros(order + 1, 0));
    let len = interval.len();
    for j in 0..=order {
        let scale = (2 * j + 1) as f64 / len;
        coeffs.row_mut(j).scale_mut(scale);
    }
    TimePoly { interval, coeffs }
}

/// L² projection of a broken (piecewise) polynomial onto a single polynomial of
/// order `order` on the union of the pieces. Each piece is integrated exactly.
pub fn project_l2_broken(pieces: &[TimePoly], order: usize) -> Result<TimePoly> {
    let first = pieces
        .first()
        .ok_or_else(|| Error::Structure("no pieces to project".into()))?;
    let last = pieces.last().expect("non-empty");
    let window = Interval::new(first.interval.a, last.interval.b)?;
    let tol = 1e-12 * window.len().max(window.b.abs()).max(1.0);
    for pair in pieces.windows(2) {
        if (pair[0].interval.b - pair[1].interval.a).abs() > tol {
            return Err(Error::Structure(format!(
                "pieces are not contiguous: ({}, {}) followed by ({}, {})",
                pair[0].interval.a, pair[0].interval.b, pair[1].interval.a, pair[1].interval.b
            )));
        }
    }
    let ncols = first.ncols();
    if pieces.iter().any(|p| p.ncols() != ncols) {
        return Err(Error::Dimension("pieces differ in column count".into()));
    }
    let mut coeffs = DMatrix::zeros(order + 1, ncols);
    for piece in pieces {
        let x = cross_gram(piece.interval, piece.order(), window, order);
        // coeffs[k] += Σ_m X[m][k] c_m
        coeffs += x.transpose() * &piece.coeffs;
    }
    for j in 0..=order {
        let scale = (2 * j + 1) as f64 / window.len();
        coeffs.row_mut(j).scale_mut(scale);
    }
    Ok(TimePoly {
        interval: window,
        coeffs,
    })
}

/// Definition of a DGiT substep method: trial order `q`, `n_s` pointwise side
/// conditions at nodes `θ_k`, and the side-condition matrix `D` relating the
/// substep polynomial to the current and `k_s` previous side values,
///
/// `u^n(t^{n-1} + θ_k Δt) = Σ_{l=1}^{k_s+1} D_{k,l} U^{n+1-l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSpec {
    name: String,
    q: usize,
    k_s: usize,
    thetas: Vec<f64>,
    side_matrix: DMatrix<f64>,
}

impl SchemeSpec {
    /// Validated scheme; rejects a singular `D̃`.
    pub fn new(
        name: impl Into<String>,
        q: usize,
        thetas: Vec<f64>,
        side_matrix: DMatrix<f64>,
    ) -> Result<Self> {
        let spec = Self::new_unchecked(name, q, thetas, side_matrix)?;
        for pair in spec.thetas.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Structure(format!(
                    "side-condition nodes must be strictly increasing, got {:?}",
                    spec.thetas
                )));
            }
        }
        if let Some(&last) = spec.thetas.last() {
            if last > 1.0 {
                return Err(Error::Structure(format!(
                    "side-condition nodes must not exceed 1, got {last}"
                )));
            }
        }
        let report = build_dtilde(&spec);
        if !report.nonsingular {
            return Err(Error::SingularSideConditions {
                det: report.determinant,
            });
        }
        Ok(spec)
    }

    /// Diagnostic constructor: only dimensions are checked, so schemes with
    /// repeated nodes or a singular `D̃` can be built and inspected.
    pub fn new_unchecked(
        name: impl Into<String>,
        q: usize,
        thetas: Vec<f64>,
        side_matrix: DMatrix<f64>,
    ) -> Result<Self> {
        let n_s = thetas.len();
        if n_s > q + 1 {
            return Err(Error::Structure(format!(
                "at most q + 1 = {} side conditions are allowed, got {n_s}",
                q + 1
            )));
        }
        if side_matrix.nrows() != n_s || side_matrix.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "side-condition matrix must be {n_s} x (k_s + 1), got {} x {}",
                side_matrix.nrows(),
                side_matrix.ncols()
            )));
        }
        if thetas.iter().any(|t| !t.is_finite()) || side_matrix.iter().any(|d| !d.is_finite()) {
            return Err(Error::Structure("non-finite scheme data".into()));
        }
        Ok(Self {
            name: name.into(),
            q,
            k_s: side_matrix.ncols() - 1,
            thetas,
            side_matrix,
        })
    }

    /// Continuous Galerkin of order `q` (Crank–Nicolson for `q = 1`): the
    /// polynomial matches the side values at both ends of the substep.
    pub fn continuous_galerkin(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::Structure("continuous Galerkin needs q >= 1".into()));
        }
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        Self::new(format!("cg{q}"), q, vec![0.0, 1.0], d)
    }

    pub fn crank_nicolson() -> Self {
        let mut spec = Self::continuous_galerkin(1).expect("valid preset");
        spec.name = "crank-nicolson".into();
        spec
    }

    /// Discontinuous Galerkin of order `q` with the side value taken as the
    /// right-end limit of the substep polynomial.
    pub fn discontinuous_galerkin(q: usize) -> Self {
        Self::new(format!("dg{q}"), q, vec![1.0], DMatrix::from_element(1, 1, 1.0)).expect("valid preset")
    }

    /// The shipped presets.
    pub fn presets() -> Vec<Self> {
        vec![
            Self::crank_nicolson(),
            Self::discontinuous_galerkin(0),
            Self::discontinuous_galerkin(1),
            Self::discontinuous_galerkin(2),
            Self::continuous_galerkin(2).expect("valid preset"),
        ]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_s(&self) -> usize {
        self.thetas.len()
    }

    pub fn k_s(&self) -> usize {
        self.k_s
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn side_matrix(&self) -> &DMatrix<f64> {
        &self.side_matrix
    }

    /// Order of the variational test space, `q + 1 - n_s`.
    pub fn test_order(&self) -> usize {
        self.q + 1 - self.n_s()
    }

    /// Whether the polynomial is pinned to the previous side value at the left end
    /// (continuous-in-time schemes such as Crank–Nicolson).
    pub fn is_continuous(&self) -> bool {
        self.thetas.first() == Some(&0.0)
            && self.side_matrix.ncols() >= 2
            && self.side_matrix[(0, 1)] == 1.0
            && self
                .side_matrix
                .row(0)
                .iter()
                .enumerate()
                .all(|(l, &d)| l == 1 || d == 0.0)
    }
}

/// The `n_s × n_s` matrix `(D̃)_{j,k} = ψ_{m_k}(2θ_j - 1)`, `m_k = k + q - n_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DtildeReport {
    pub matrix: DMatrix<f64>,
    pub determinant: f64,
    pub nonsingular: bool,
}

pub fn build_dtilde(spec: &SchemeSpec) -> DtildeReport {
    let n_s = spec.n_s();
    if n_s == 0 {
        return DtildeReport {
            matrix: DMatrix::zeros(0, 0),
            determinant: 1.0,
            nonsingular: true,
        };
    }
    let base = spec.q + 1 - n_s;
    let matrix = DMatrix::from_fn(n_s, n_s, |j, k| {
        legendre_eval(base + k, 2.0 * spec.thetas[j] - 1.0)
    });
    let determinant = matrix.determinant();
    let scale = matrix.norm().powi(n_s as i32).max(f64::MIN_POSITIVE);
    DtildeReport {
        nonsingular: determinant.abs() > 1e-12 * scale,
        matrix,
        determinant,
    }
}

/// Image of a polynomial under the J mapping: its projection onto order
/// `q - n_s` (absent when `n_s = q + 1`) and its values at the side-condition
/// times.
#[derive(Debug, Clone, PartialEq)]
pub struct JComponents {
    pub projection: Option<TimePoly>,
    pub samples: Vec<DVector<f64>>,
}

pub fn j_decompose(v: &TimePoly, spec: &SchemeSpec) -> Result<JComponents> {
    if v.order() != spec.q {
        return Err(Error::Dimension(format!(
            "J mapping expects order {}, got {}",
            spec.q,
            v.order()
        )));
    }
    let projection = (spec.n_s() <= spec.q).then(|| v.truncated(spec.q - spec.n_s()));
    let samples = spec
        .thetas
        .iter()
        .map(|&theta| v.eval_reference(2.0 * theta - 1.0))
        .collect();
    Ok(JComponents { projection, samples })
}

/// Inverse of [`j_decompose`]; fails when `D̃` is singular.
pub fn j_reconstruct(parts: &JComponents, interval: Interval, spec: &SchemeSpec) -> Result<TimePoly> {
    let n_s = spec.n_s();
    let q = spec.q;
    if parts.samples.len() != n_s {
        return Err(Error::Dimension(format!(
            "expected {n_s} samples, got {}",
            parts.samples.len()
        )));
    }
    let ncols = match (&parts.projection, parts.samples.first()) {
        (Some(p), _) => p.ncols(),
        (None, Some(s)) => s.len(),
        (None, None) => return Err(Error::Dimension("empty J components".into())),
    };
    let mut coeffs = DMatrix::zeros(q + 1, ncols);
    let low = q + 1 - n_s;
    if low > 0 {
        let p = parts
            .projection
            .as_ref()
            .ok_or_else(|| Error::Dimension("missing projection component".into()))?;
        if p.order() + 1 != low || p.ncols() != ncols {
            return Err(Error::Dimension("projection component has wrong shape".into()));
        }
        coeffs.rows_mut(0, low).copy_from(p.coeffs());
    }
    if n_s == 0 {
        return TimePoly::new(interval, coeffs);
    }
    let report = build_dtilde(spec);
    let lu = report.matrix.clone().lu();
    if !report.nonsingular {
        return Err(Error::SingularSideConditions {
            det: report.determinant,
        });
    }
    // Right-hand side: samples minus the contribution of the known low modes.
    let mut rhs = DMatrix::zeros(n_s, ncols);
    for (k, &theta) in spec.thetas.iter().enumerate() {
        let psi = legendre_values(q, 2.0 * theta - 1.0);
        let mut row = parts.samples[k].transpose();
        for (j, p) in psi.iter().enumerate().take(low) {
            row -= *p * coeffs.row(j);
        }
        rhs.set_row(k, &row);
    }
    let high = lu.solve(&rhs).ok_or(Error::SingularSideConditions {
        det: report.determinant,
    })?;
    coeffs.rows_mut(low, n_s).copy_from(&high);
    TimePoly::new(interval, coeffs)
}

/// `|||J(v)|||`: the L² norm of the projection plus the sampled values, the
/// latter weighted by the interval length when `weighted` is set.
pub fn j_norm(parts: &JComponents, interval: Interval, weighted: bool) -> f64 {
    let proj = parts.projection.as_ref().map_or(0.0, |p| p.squared_l2());
    let weight = if weighted { interval.len() } else { 1.0 };
    let samples: f64 = parts.samples.iter().map(|s| s.norm_squared()).sum();
    (proj + weight * samples).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn legendre_values_match_closed_forms() {
        assert_eq!(legendre_eval(0, 0.3), 1.0);
        assert_eq!(legendre_eval(1, -1.0), -1.0);
        assert_relative_eq!(legendre_eval(2, 0.5), -0.125, epsilon = 1e-15);
        for &x in &[-1.0, -0.4, 0.0, 0.7, 1.0] {
            let p3 = 0.5 * (5.0 * x * x * x - 3.0 * x);
            assert_relative_eq!(legendre_eval(3, x), p3, epsilon = 1e-14);
            assert_relative_eq!(legendre_values(3, x)[3], p3, epsilon = 1e-14);
            assert_relative_eq!(
                legendre_derivatives(3, x)[3],
                0.5 * (15.0 * x * x - 3.0),
                epsilon = 1e-13
            );
        }
        for j in 0..8 {
            assert_relative_eq!(legendre_eval(j, 1.0), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn gauss_rules() {
        let r1 = gauss_rule(1);
        assert_eq!(r1.nodes, vec![0.0]);
        assert_relative_eq!(r1.weights[0], 2.0);
        let r2 = gauss_rule(2);
        assert_relative_eq!(r2.nodes[0], -1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r2.nodes[1], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r2.weights[0], 1.0, epsilon = 1e-15);
        let r3 = gauss_rule(3);
        let x4: f64 = r3.nodes.iter().zip(&r3.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(x4, 0.4, epsilon = 1e-15);
        for n in 1..12 {
            let r = gauss_rule(n);
            for deg in 0..2 * n {
                let exact = if deg % 2 == 0 {
                    2.0 / (deg as f64 + 1.0)
                } else {
                    0.0
                };
                let got: f64 = r
                    .nodes
                    .iter()
                    .zip(&r.weights)
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                assert!((got - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn degenerate_interval_rejected() {
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(1.0, 0.0).is_err());
        assert!(Interval::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = project_l2(|t| DVector::from_element(1, t), unit(), 0);
        assert_relative_eq!(p.coeffs()[(0, 0)], 0.5, epsilon = 1e-15);

        let p = project_l2(|t| DVector::from_element(1, t * t), unit(), 2);
        for &t in &[0.0, 0.3, 0.9] {
            assert_relative_eq!(p.eval(t)[0], t * t, epsilon = 1e-14);
        }
    }

    #[test]
    fn broken_projection_examples() {
        let a = Interval::new(0.0, 0.5).unwrap();
        let b = Interval::new(0.5, 1.0).unwrap();
        let pieces = vec![
            TimePoly::constant(a, &DVector::from_element(1, 2.0)),
            TimePoly::constant(b, &DVector::from_element(1, 4.0)),
        ];
        let p = project_l2_broken(&pieces, 0).unwrap();
        assert_relative_eq!(p.coeffs()[(0, 0)], 3.0, epsilon = 1e-15);

        let single = TimePoly::new(unit(), DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5])).unwrap();
        let p = project_l2_broken(std::slice::from_ref(&single), 2).unwrap();
        assert_relative_eq!(p.coeffs(), single.coeffs(), epsilon = 1e-14);

        let gap = vec![
            TimePoly::constant(a, &DVector::from_element(1, 1.0)),
            TimePoly::constant(Interval::new(0.6, 1.0).unwrap(), &DVector::from_element(1, 1.0)),
        ];
        assert!(matches!(project_l2_broken(&gap, 0), Err(Error::Structure(_))));
    }

    #[test]
    fn piecewise_step_projection_matches_gram_solve() {
        // f = 1 on (0, 1/2), 0 on (1/2, 1). Monomial Gram system on (0, 1):
        // [1 1/2; 1/2 1/3] c = [1/2, 1/8] gives f ≈ c0 + c1 t.
        let a = Interval::new(0.0, 0.5).unwrap();
        let b = Interval::new(0.5, 1.0).unwrap();
        let pieces = vec![
            TimePoly::constant(a, &DVector::from_element(1, 1.0)),
            TimePoly::constant(b, &DVector::from_element(1, 0.0)),
        ];
        let p = project_l2_broken(&pieces, 1).unwrap();
        let (c0, c1) = (1.25, -1.5);
        for &t in &[0.0, 0.25, 0.8, 1.0] {
            assert_relative_eq!(p.eval(t)[0], c0 + c1 * t, epsilon = 1e-14);
        }
    }

    #[test]
    fn dtilde_examples() {
        let cn = build_dtilde(&SchemeSpec::crank_nicolson());
        assert_eq!(cn.matrix, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]));
        assert_relative_eq!(cn.determinant, 2.0, epsilon = 1e-14);
        assert!(cn.nonsingular);

        let dg1 = build_dtilde(&SchemeSpec::discontinuous_galerkin(1));
        assert_eq!(dg1.matrix, DMatrix::from_element(1, 1, 1.0));
        assert_relative_eq!(dg1.determinant, 1.0);

        let d = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let repeated = SchemeSpec::new_unchecked("repeated", 2, vec![0.5, 0.5], d.clone()).unwrap();
        assert!(!build_dtilde(&repeated).nonsingular);
        assert!(SchemeSpec::new("repeated", 2, vec![0.5, 0.5], d).is_err());

        let none = SchemeSpec::new("free", 1, vec![], DMatrix::zeros(0, 1)).unwrap();
        let r = build_dtilde(&none);
        assert!(r.nonsingular && r.matrix.is_empty());
    }

    #[test]
    fn singular_scheme_reconstruction_fails() {
        // Nodes symmetric about the midpoint with q = 1, n_s = 1: ψ_1(0) = 0.
        let spec = SchemeSpec::new_unchecked("mid", 1, vec![0.5], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let v = TimePoly::new(unit(), DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let parts = j_decompose(&v, &spec).unwrap();
        assert!(matches!(
            j_reconstruct(&parts, unit(), &spec),
            Err(Error::SingularSideConditions { .. })
        ));
    }

    #[test]
    fn cn_reconstruction_is_the_endpoint_interpolant() {
        let spec = SchemeSpec::crank_nicolson();
        let i = Interval::new(0.2, 0.7).unwrap();
        let u0 = DVector::from_vec(vec![1.0, -3.0]);
        let u1 = DVector::from_vec(vec![2.5, 0.5]);
        let parts = JComponents {
            projection: None,
            samples: vec![u0.clone(), u1.clone()],
        };
        let v = j_reconstruct(&parts, i, &spec).unwrap();
        for &t in &[0.2, 0.35, 0.7] {
            let lagrange = &u0 * ((0.7 - t) / 0.5) + &u1 * ((t - 0.2) / 0.5);
            assert_relative_eq!(v.eval(t), lagrange, epsilon = 1e-14);
        }
    }

    #[test]
    fn cross_gram_matches_dense_quadrature() {
        let sub = Interval::new(0.25, 0.5).unwrap();
        let win = unit();
        let x = cross_gram(sub, 2, win, 3);
        let n = 20000;
        let h = sub.len() / n as f64;
        for m in 0..=2 {
            for k in 0..=3 {
                let mut s = 0.0;
                for i in 0..n {
                    let t = sub.start() + (i as f64 + 0.5) * h;
                    s += h * legendre_eval(m, sub.to_reference(t)) * legendre_eval(k, win.to_reference(t));
                }
                assert!((s - x[(m, k)]).abs() < 1e-8);
            }
        }
    }
}

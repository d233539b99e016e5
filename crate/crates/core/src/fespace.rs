//! Spatial discretization: bilinear finite element operators on the two
//! subdomains, the interface trace space, and the problem data.
//!
//! Conventions. Matrices are indexed `[test, trial]`. The semi-discrete
//! system on subdomain `i` reads
//!
//! `M_i u̇_i = -L_i u_i - T_iᵀ M_Γ F_i + f_i`,
//!
//! with `F_i = b_{i1} T_1 u_1 + b_{i2} T_2 u_2 - g_i` in trace coefficients.
//! The advection form is `b(v, w) = ∫ ∇·(s v) w`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use nalgebra_sparse::CooMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{csr_from_dense, is_spd, matvec, Csr};
use crate::mesh::{InterfaceMap, Mesh, NodeKind, Subdomain};
use crate::timepoly::gauss_rule;

/// `(x, y, t) ↦ value`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
/// `(x, y) ↦ value`.
pub type SpaceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `t ↦ load vector`.
pub type VectorSource = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Steady advection fields. All are divergence free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advection {
    Zero,
    /// Constant field `(s_x, 0)`, tangential to the interface.
    Tangential {
        sx: f64,
    },
    /// Curl of the bilinear interpolant of `A sin²(πx) sin²(πy)`; vanishes
    /// normal to every edge of the unit squares.
    Vortex {
        amplitude: f64,
    },
}

impl Advection {
    pub fn is_zero(&self) -> bool {
        match *self {
            Advection::Zero => true,
            Advection::Tangential { sx } => sx == 0.0,
            Advection::Vortex { amplitude } => amplitude == 0.0,
        }
    }
}

/// Structure of the interface forcing `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterfaceKind {
    #[default]
    Zero,
    /// `g_2 = -g_1`.
    Opposite,
    General,
}

#[derive(Clone, Default)]
pub enum InteriorSource {
    #[default]
    Zero,
    Given([SpaceTimeFn; 2]),
}

/// Interface forcing, as functions of `(x, t)` on `Γ`.
#[derive(Clone, Default)]
pub enum InterfaceSource {
    #[default]
    Zero,
    /// `g_1 = g`, `g_2 = -g`.
    Opposite(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
    General([Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>; 2]),
}

impl InterfaceSource {
    pub fn kind(&self) -> InterfaceKind {
        match self {
            InterfaceSource::Zero => InterfaceKind::Zero,
            InterfaceSource::Opposite(_) => InterfaceKind::Opposite,
            InterfaceSource::General(_) => InterfaceKind::General,
        }
    }
}

/// Continuous model data.
#[derive(Clone)]
pub struct ProblemSpec {
    nu: [f64; 2],
    advection: [Advection; 2],
    coupling: Matrix2<f64>,
    interior: InteriorSource,
    interface: InterfaceSource,
    initial: [SpaceFn; 2],
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("nu", &self.nu)
            .field("advection", &self.advection)
            .field("coupling", &self.coupling)
            .field("interface", &self.interface.kind())
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Zero forcing and zero initial data.
    pub fn new(nu: [f64; 2], advection: [Advection; 2], coupling: Matrix2<f64>) -> Result<Self> {
        if nu.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Structure(format!(
                "diffusivities must be positive, got {nu:?}"
            )));
        }
        if coupling.iter().any(|b| !b.is_finite()) {
            return Err(Error::Structure("coupling matrix has non-finite entries".into()));
        }
        let zero: SpaceFn = Arc::new(|_, _| 0.0);
        Ok(Self {
            nu,
            advection,
            coupling,
            interior: InteriorSource::Zero,
            interface: InterfaceSource::Zero,
            initial: [zero.clone(), zero],
        })
    }

    pub fn with_interior_source(mut self, source: InteriorSource) -> Self {
        self.interior = source;
        self
    }

    pub fn with_interface_source(mut self, source: InterfaceSource) -> Self {
        self.interface = source;
        self
    }

    pub fn with_initial(mut self, initial: [SpaceFn; 2]) -> Self {
        self.initial = initial;
        self
    }

    pub fn nu(&self) -> [f64; 2] {
        self.nu
    }

    pub fn advection(&self) -> [Advection; 2] {
        self.advection
    }

    pub fn coupling(&self) -> Matrix2<f64> {
        self.coupling
    }

    pub fn interior_source(&self) -> &InteriorSource {
        &self.interior
    }

    pub fn interface_source(&self) -> &InterfaceSource {
        &self.interface
    }

    pub fn initial(&self) -> &[SpaceFn; 2] {
        &self.initial
    }

    pub fn conservation_compatible(&self) -> bool {
        conservation_compatible(&self.coupling, self.interface.kind())
    }

    pub fn coupling_psd(&self) -> bool {
        coupling_psd(&self.coupling)
    }

    /// True when the advection is strong relative to diffusion on a mesh of
    /// size `h` (cell Péclet number above 2); such runs are allowed but
    /// unstabilized.
    pub fn advection_dominated(&self, h: f64) -> bool {
        (0..2).any(|i| {
            let speed = match self.advection[i] {
                Advection::Zero => 0.0,
                Advection::Tangential { sx } => sx.abs(),
                Advection::Vortex { amplitude } => 2.0 * std::f64::consts::PI * amplitude.abs(),
            };
            speed * h / self.nu[i] > 2.0
        })
    }
}

/// `b₁₁ = -b₂₁`, `b₁₂ = -b₂₂` and `g₁ = -g₂`.
pub fn conservation_compatible(b: &Matrix2<f64>, g: InterfaceKind) -> bool {
    let tol = 1e-14 * b.amax().max(1.0);
    (b[(0, 0)] + b[(1, 0)]).abs() <= tol
        && (b[(0, 1)] + b[(1, 1)]).abs() <= tol
        && g != InterfaceKind::General
}

/// Symmetric part of `B` positive semidefinite (eigenvalues `≥ -1e-12`).
pub fn coupling_psd(b: &Matrix2<f64>) -> bool {
    let sym = 0.5 * (b + b.transpose());
    sym.symmetric_eigenvalues().iter().all(|&l| l >= -1e-12)
}

/// Discrete forcing: load vectors as functions of time.
#[derive(Clone, Default)]
pub struct Loads {
    /// `t ↦ (f_i(t), φ)`, length `d_Ω,i`.
    pub interior: [Option<VectorSource>; 2],
    /// `t ↦ (g_i(t), μ)_Γ`, length `d_Γ`.
    pub interface: [Option<VectorSource>; 2],
    pub interface_kind: InterfaceKind,
}

impl std::fmt::Debug for Loads {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Loads")
            .field(
                "interior",
                &[self.interior[0].is_some(), self.interior[1].is_some()],
            )
            .field(
                "interface",
                &[self.interface[0].is_some(), self.interface[1].is_some()],
            )
            .field("interface_kind", &self.interface_kind)
            .finish()
    }
}

impl Loads {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn interior_at(&self, i: usize, t: f64, dim: usize) -> DVector<f64> {
        self.interior[i]
            .as_ref()
            .map_or_else(|| DVector::zeros(dim), |f| f(t))
    }

    pub fn interface_at(&self, i: usize, t: f64, dim: usize) -> DVector<f64> {
        self.interface[i]
            .as_ref()
            .map_or_else(|| DVector::zeros(dim), |g| g(t))
    }

    pub fn is_unforced(&self) -> bool {
        self.interior.iter().all(Option::is_none) && self.interface.iter().all(Option::is_none)
    }

    pub fn interface_is_zero(&self) -> bool {
        self.interface.iter().all(Option::is_none)
    }
}

/// Operators of one subdomain.
#[derive(Debug, Clone)]
pub struct SubdomainOperators {
    pub mass: Csr,
    /// Diffusion `A_i`.
    pub stiffness: Csr,
    /// Advection `B_adv,i`.
    pub advection: Csr,
    /// `L_i = A_i + B_adv,i`.
    pub operator: Csr,
    /// Trace restriction `T_i`, `d_Γ × d_Ω`.
    pub trace: Csr,
    /// `T_iᵀ M_Γ`, `d_Ω × d_Γ`.
    pub lift: Csr,
}

impl SubdomainOperators {
    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }
}

/// Meshes behind an assembled operator set.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub meshes: [Mesh; 2],
    pub interface: InterfaceMap,
}

/// Assembled spatial operators of the coupled problem.
#[derive(Debug, Clone)]
pub struct FeOperators {
    subdomains: [SubdomainOperators; 2],
    interface_mass: Csr,
    coupling: Matrix2<f64>,
    mesh_size: Option<f64>,
    geometry: Option<Arc<Geometry>>,
}

impl FeOperators {
    pub fn subdomain(&self, i: usize) -> &SubdomainOperators {
        &self.subdomains[i]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.subdomains[i].dim()
    }

    /// `d_Γ`.
    pub fn interface_dim(&self) -> usize {
        self.interface_mass.nrows()
    }

    pub fn interface_mass(&self) -> &Csr {
        &self.interface_mass
    }

    pub fn coupling(&self) -> Matrix2<f64> {
        self.coupling
    }

    /// Maximum element diameter, when the operators come from meshes or one was set.
    pub fn mesh_size(&self) -> Option<f64> {
        self.mesh_size
    }

    pub fn with_mesh_size(mut self, h: f64) -> Self {
        self.mesh_size = Some(h);
        self
    }

    pub fn with_coupling(mut self, b: Matrix2<f64>) -> Self {
        self.coupling = b;
        self
    }

    pub fn geometry(&self) -> Option<&Geometry> {
        self.geometry.as_deref()
    }

    /// `‖v‖²_M` on subdomain `i`.
    pub fn energy_norm_sq(&self, i: usize, v: &DVector<f64>) -> f64 {
        v.dot(&matvec(&self.subdomains[i].mass, v))
    }

    /// Operators given directly as matrices, bypassing the mesh.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        m1: Csr,
        l1: Csr,
        t1: Csr,
        m2: Csr,
        l2: Csr,
        t2: Csr,
        m_gamma: Csr,
        coupling: Matrix2<f64>,
    ) -> Result<Self> {
        let d_gamma = m_gamma.nrows();
        if m_gamma.ncols() != d_gamma {
            return Err(Error::Dimension("interface mass must be square".into()));
        }
        if !is_spd(&m_gamma) {
            return Err(Error::NotSpd("M_Γ".into()));
        }
        let mut subs = Vec::with_capacity(2);
        for (i, (m, l, t)) in [(m1, l1, t1), (m2, l2, t2)].into_iter().enumerate() {
            let d = m.nrows();
            if m.ncols() != d || l.nrows() != d || l.ncols() != d {
                return Err(Error::Dimension(format!(
                    "subdomain {}: mass and operator must both be {d} x {d}",
                    i + 1
                )));
            }
            if t.nrows() != d_gamma || t.ncols() != d {
                return Err(Error::Dimension(format!(
                    "subdomain {}: trace must be {d_gamma} x {d}, got {} x {}",
                    i + 1,
                    t.nrows(),
                    t.ncols()
                )));
            }
            if !is_spd(&m) {
                return Err(Error::NotSpd(format!("M_{}", i + 1)));
            }
            let lift = t.transpose() * &m_gamma;
            subs.push(SubdomainOperators {
                stiffness: l.clone(),
                advection: Csr::zeros(d, d),
                operator: l,
                mass: m,
                trace: t,
                lift,
            });
        }
        let second = subs.pop().expect("two subdomains");
        let first = subs.pop().expect("two subdomains");
        Ok(Self {
            subdomains: [first, second],
            interface_mass: m_gamma,
            coupling,
            mesh_size: None,
            geometry: None,
        })
    }

    /// Dense convenience wrapper around [`FeOperators::from_matrices`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_dense(
        m1: &DMatrix<f64>,
        l1: &DMatrix<f64>,
        t1: &DMatrix<f64>,
        m2: &DMatrix<f64>,
        l2: &DMatrix<f64>,
        t2: &DMatrix<f64>,
        m_gamma: &DMatrix<f64>,
        coupling: Matrix2<f64>,
    ) -> Result<Self> {
        Self::from_matrices(
            csr_from_dense(m1),
            csr_from_dense(l1),
            csr_from_dense(t1),
            csr_from_dense(m2),
            csr_from_dense(l2),
            csr_from_dense(t2),
            csr_from_dense(m_gamma),
            coupling,
        )
    }

    /// The scalar two-ODE, one-interface toy: `M = T = M_Γ = 1`, `L_i = l_i`.
    pub fn scalar_toy(l: [f64; 2], coupling: Matrix2<f64>) -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        Self::from_dense(
            &one,
            &DMatrix::from_element(1, 1, l[0]),
            &one,
            &one,
            &DMatrix::from_element(1, 1, l[1]),
            &one,
            &one,
            coupling,
        )
        .expect("valid toy operators")
    }

    /// Load vectors of the continuous forcing; requires mesh-based operators.
    pub fn loads(&self, spec: &ProblemSpec) -> Result<Loads> {
        let geo = self
            .geometry
            .clone()
            .ok_or_else(|| Error::Precondition("load assembly needs mesh-based operators".into()))?;
        let mut loads = Loads {
            interface_kind: spec.interface.kind(),
            ..Loads::default()
        };
        if let InteriorSource::Given(f) = &spec.interior {
            for i in 0..2 {
                let (geo, f) = (geo.clone(), f[i].clone());
                loads.interior[i] = Some(Arc::new(move |t| {
                    assemble_interior_load(&geo.meshes[i], |x, y| f(x, y, t))
                }));
            }
        }
        let interface_fns: Option<[SpaceFn; 2]> = match &spec.interface {
            InterfaceSource::Zero => None,
            InterfaceSource::Opposite(g) => {
                let g2 = g.clone();
                Some([g.clone(), Arc::new(move |x, t| -g2(x, t))])
            }
            InterfaceSource::General(g) => Some(g.clone()),
        };
        if let Some(g) = interface_fns {
            for (i, gi) in g.into_iter().enumerate() {
                let geo = geo.clone();
                loads.interface[i] = Some(Arc::new(move |t| {
                    assemble_interface_load(&geo.meshes[0], &geo.interface, |x| gi(x, t))
                }));
            }
        }
        Ok(loads)
    }

    /// Nodal interpolant of `u` on subdomain `i`; requires mesh-based operators.
    pub fn interpolate(&self, i: usize, u: impl Fn(f64, f64) -> f64) -> Result<DVector<f64>> {
        let geo = self
            .geometry
            .as_ref()
            .ok_or_else(|| Error::Precondition("interpolation needs mesh-based operators".into()))?;
        let coords = geo.meshes[i].dof_coordinates();
        Ok(DVector::from_iterator(
            coords.len(),
            coords.iter().map(|p| u(p[0], p[1])),
        ))
    }

    /// Initial state vectors of a problem.
    pub fn initial_state(&self, spec: &ProblemSpec) -> Result<[DVector<f64>; 2]> {
        Ok([
            self.interpolate(0, |x, y| spec.initial[0](x, y))?,
            self.interpolate(1, |x, y| spec.initial[1](x, y))?,
        ])
    }
}

/// Full operator set on a pair of matched meshes.
pub fn assemble(upper: &Mesh, lower: &Mesh, map: &InterfaceMap, spec: &ProblemSpec) -> Result<FeOperators> {
    if upper.subdomain() != Subdomain::Upper || lower.subdomain() != Subdomain::Lower {
        return Err(Error::Match("expected the upper mesh first".into()));
    }
    if map.dofs[0].len() != map.len() || map.dofs[1].len() != map.len() {
        return Err(Error::Match("inconsistent interface map".into()));
    }
    let interface_mass = assemble_interface_mass(upper, map);
    let mut subs = Vec::with_capacity(2);
    for (i, mesh) in [upper, lower].into_iter().enumerate() {
        let (mass, stiffness, advection) = assemble_volume(mesh, spec.nu[i], spec.advection[i]);
        let operator = &stiffness + &advection;
        let mut coo = CooMatrix::new(map.len(), mesh.n_dofs());
        for (slot, &dof) in map.dofs[i].iter().enumerate() {
            coo.push(slot, dof, 1.0);
        }
        let trace = Csr::from(&coo);
        let lift = trace.transpose() * &interface_mass;
        subs.push(SubdomainOperators {
            mass,
            stiffness,
            advection,
            operator,
            trace,
            lift,
        });
    }
    let second = subs.pop().expect("two subdomains");
    let first = subs.pop().expect("two subdomains");
    Ok(FeOperators {
        subdomains: [first, second],
        interface_mass,
        coupling: spec.coupling,
        mesh_size: Some(upper.h().max(lower.h())),
        geometry: Some(Arc::new(Geometry {
            meshes: [upper.clone(), lower.clone()],
            interface: map.clone(),
        })),
    })
}

/// Builds meshes, matches them and assembles, in one call.
pub fn assemble_on_grid(nx: usize, ny: [usize; 2], spec: &ProblemSpec) -> Result<FeOperators> {
    let upper = crate::mesh::build_mesh(Subdomain::Upper, nx, ny[0])?;
    let lower = crate::mesh::build_mesh(Subdomain::Lower, nx, ny[1])?;
    let map = crate::mesh::match_interfaces(&upper, &lower)?;
    assemble(&upper, &lower, &map, spec)
}

/// Bilinear shape functions on the unit square, nodes counterclockwise from `(0,0)`.
fn shape(xi: f64, eta: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    let v = [
        (1.0 - xi) * (1.0 - eta),
        xi * (1.0 - eta),
        xi * eta,
        (1.0 - xi) * eta,
    ];
    let d = [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [eta, xi],
        [-eta, 1.0 - xi],
    ];
    (v, d)
}

/// Gauss points and weights on `[0, 1]`.
fn unit_rule(n: usize) -> Vec<(f64, f64)> {
    let rule = gauss_rule(n);
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&s, &w)| (0.5 * (s + 1.0), 0.5 * w))
        .collect()
}

fn vortex_stream(amplitude: f64, x: f64, y: f64) -> f64 {
    let (sx, sy) = ((std::f64::consts::PI * x).sin(), (std::f64::consts::PI * y).sin());
    amplitude * sx * sx * sy * sy
}

fn assemble_volume(mesh: &Mesh, nu: f64, advection: Advection) -> (Csr, Csr, Csr) {
    let n = mesh.n_dofs();
    let mut mass = CooMatrix::new(n, n);
    let mut stiff = CooMatrix::new(n, n);
    let mut adv = CooMatrix::new(n, n);
    // 2×2 Gauss integrates every bilinear-form integrand here exactly.
    let rule = unit_rule(2);
    let nodes = mesh.nodes();
    for elem in mesh.elements() {
        let p0 = nodes[elem[0]];
        let p2 = nodes[elem[2]];
        let (hx, hy) = (p2[0] - p0[0], p2[1] - p0[1]);
        let area = hx * hy;
        let stream: [f64; 4] = match advection {
            Advection::Vortex { amplitude } => {
                std::array::from_fn(|a| vortex_stream(amplitude, nodes[elem[a]][0], nodes[elem[a]][1]))
            }
            _ => [0.0; 4],
        };
        let mut me = [[0.0; 4]; 4];
        let mut ae = [[0.0; 4]; 4];
        let mut be = [[0.0; 4]; 4];
        for &(xi, wx) in &rule {
            for &(eta, wy) in &rule {
                let w = wx * wy * area;
                let (v, d) = shape(xi, eta);
                let grad: [[f64; 2]; 4] = std::array::from_fn(|a| [d[a][0] / hx, d[a][1] / hy]);
                let s = match advection {
                    Advection::Zero => [0.0, 0.0],
                    Advection::Tangential { sx } => [sx, 0.0],
                    Advection::Vortex { .. } => {
                        let (mut px, mut py) = (0.0, 0.0);
                        for a in 0..4 {
                            px += stream[a] * grad[a][0];
                            py += stream[a] * grad[a][1];
                        }
                        [py, -px]
                    }
                };
                for a in 0..4 {
                    for b in 0..4 {
                        me[a][b] += w * v[a] * v[b];
                        ae[a][b] += w * nu * (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]);
                        // test a, trial b: ∫ (s·∇φ_b) φ_a, the divergence term vanishes
                        be[a][b] += w * (s[0] * grad[b][0] + s[1] * grad[b][1]) * v[a];
                    }
                }
            }
        }
        for a in 0..4 {
            let Some(ra) = mesh.dof(elem[a]) else { continue };
            for b in 0..4 {
                let Some(cb) = mesh.dof(elem[b]) else { continue };
                mass.push(ra, cb, me[a][b]);
                stiff.push(ra, cb, ae[a][b]);
                if be[a][b] != 0.0 {
                    adv.push(ra, cb, be[a][b]);
                }
            }
        }
    }
    (Csr::from(&mass), Csr::from(&stiff), Csr::from(&adv))
}

/// Interface edges of the upper mesh, `(x_left, x_right, slot_left, slot_right)`.
fn interface_edges(upper: &Mesh, map: &InterfaceMap) -> Vec<(f64, f64, Option<usize>, Option<usize>)> {
    let nodes = upper.nodes();
    let mut out = Vec::new();
    for elem in upper.elements() {
        let (a, b) = (elem[0], elem[1]);
        if nodes[a][1] != 0.0 || nodes[b][1] != 0.0 {
            continue;
        }
        let slot = |n: usize| {
            (upper.kind(n) == NodeKind::Interface)
                .then(|| upper.dof(n).and_then(|d| map.slot_of(0, d)))
                .flatten()
        };
        out.push((nodes[a][0], nodes[b][0], slot(a), slot(b)));
    }
    out
}

fn assemble_interface_mass(upper: &Mesh, map: &InterfaceMap) -> Csr {
    let n = map.len();
    let mut coo = CooMatrix::new(n, n);
    for (x0, x1, sa, sb) in interface_edges(upper, map) {
        let len = x1 - x0;
        let slots = [sa, sb];
        let local = [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]];
        for a in 0..2 {
            let Some(ra) = slots[a] else { continue };
            for b in 0..2 {
                let Some(cb) = slots[b] else { continue };
                coo.push(ra, cb, local[a][b]);
            }
        }
    }
    Csr::from(&coo)
}

/// `(f, φ_a)` for every free dof, 3×3 Gauss per element.
pub fn assemble_interior_load(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
    let mut out = DVector::zeros(mesh.n_dofs());
    let rule = unit_rule(3);
    let nodes = mesh.nodes();
    for elem in mesh.elements() {
        let p0 = nodes[elem[0]];
        let p2 = nodes[elem[2]];
        let (hx, hy) = (p2[0] - p0[0], p2[1] - p0[1]);
        for &(xi, wx) in &rule {
            for &(eta, wy) in &rule {
                let (v, _) = shape(xi, eta);
                let fx = f(p0[0] + xi * hx, p0[1] + eta * hy) * wx * wy * hx * hy;
                for a in 0..4 {
                    if let Some(r) = mesh.dof(elem[a]) {
                        out[r] += fx * v[a];
                    }
                }
            }
        }
    }
    out
}

/// `(g, μ_j)_Γ` for every interface slot, 3-point Gauss per edge.
pub fn assemble_interface_load(upper: &Mesh, map: &InterfaceMap, g: impl Fn(f64) -> f64) -> DVector<f64> {
    let mut out = DVector::zeros(map.len());
    let rule = unit_rule(3);
    for (x0, x1, sa, sb) in interface_edges(upper, map) {
        let len = x1 - x0;
        for &(s, w) in &rule {
            let gx = g(x0 + s * len) * w * len;
            if let Some(a) = sa {
                out[a] += gx * (1.0 - s);
            }
            if let Some(b) = sb {
                out[b] += gx * s;
            }
        }
    }
    out
}

/// Minimum Rayleigh quotient `vᵀ L v / vᵀ v` over 50 seeded random vectors,
/// taken over both subdomains; only the symmetric part of `L` contributes.
pub fn coercivity_probe(ops: &FeOperators) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = f64::INFINITY;
    for i in 0..2 {
        let d = ops.dim(i);
        if d == 0 {
            continue;
        }
        let l = &ops.subdomain(i).operator;
        for _ in 0..50 {
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let q = v.dot(&matvec(l, &v)) / v.norm_squared();
            best = best.min(q);
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Precondition(
            "coercivity probe needs at least one degree of freedom".into(),
        ))
    }
}

//! Structured bilinear quadrilateral meshes of the two subdomains
//! `Ω₁ = (0,1) × (0,1)` and `Ω₂ = (0,1) × (-1,0)`, which share the interface
//! `Γ = (0,1) × {0}`.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subdomain {
    /// Upper subdomain, `y ∈ (0, 1)`.
    Upper,
    /// Lower subdomain, `y ∈ (-1, 0)`.
    Lower,
}

impl Subdomain {
    pub fn index(self) -> usize {
        match self {
            Subdomain::Upper => 0,
            Subdomain::Lower => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Subdomain::Upper
        } else {
            Subdomain::Lower
        }
    }

    /// Outward unit normal on `Γ`, y-component (x-component is zero).
    pub fn interface_normal_y(self) -> f64 {
        match self {
            Subdomain::Upper => -1.0,
            Subdomain::Lower => 1.0,
        }
    }

    fn y_range(self) -> (f64, f64) {
        match self {
            Subdomain::Upper => (0.0, 1.0),
            Subdomain::Lower => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// On the exterior boundary `Γ_i` (including the endpoints of `Γ`); no unknown.
    Exterior,
    Interface,
    Interior,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    subdomain: Subdomain,
    nx: usize,
    ny: usize,
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 4]>,
    kinds: Vec<NodeKind>,
    dof_of_node: Vec<Option<usize>>,
    n_dofs: usize,
    h: f64,
}

/// Uniform `nx × ny` grid of bilinear elements on one subdomain.
pub fn build_mesh(subdomain: Subdomain, nx: usize, ny: usize) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Structure(format!(
            "element counts must be positive, got nx = {nx}, ny = {ny}"
        )));
    }
    let (y0, y1) = subdomain.y_range();
    let interface_row = match subdomain {
        Subdomain::Upper => 0,
        Subdomain::Lower => ny,
    };
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut kinds = Vec::with_capacity(nodes.capacity());
    for j in 0..=ny {
        // The interface row is pinned to y = 0 exactly.
        let y = if j == interface_row {
            0.0
        } else {
            y0 + (y1 - y0) * j as f64 / ny as f64
        };
        for i in 0..=nx {
            let x = i as f64 / nx as f64;
            let lateral = i == 0 || i == nx;
            let kind = if lateral || (j != interface_row && (j == 0 || j == ny)) {
                NodeKind::Exterior
            } else if j == interface_row {
                NodeKind::Interface
            } else {
                NodeKind::Interior
            };
            nodes.push([x, y]);
            kinds.push(kind);
        }
    }
    let stride = nx + 1;
    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let n0 = j * stride + i;
            elements.push([n0, n0 + 1, n0 + stride + 1, n0 + stride]);
        }
    }
    let mut n_dofs = 0;
    let dof_of_node = kinds
        .iter()
        .map(|k| {
            (*k != NodeKind::Exterior).then(|| {
                n_dofs += 1;
                n_dofs - 1
            })
        })
        .collect();
    let (hx, hy) = (1.0 / nx as f64, 1.0 / ny as f64);
    Ok(Mesh {
        subdomain,
        nx,
        ny,
        nodes,
        elements,
        kinds,
        dof_of_node,
        n_dofs,
        h: (hx * hx + hy * hy).sqrt(),
    })
}

impl Mesh {
    pub fn subdomain(&self) -> Subdomain {
        self.subdomain
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn dof(&self, node: usize) -> Option<usize> {
        self.dof_of_node[node]
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn element_area(&self, e: usize) -> f64 {
        let [n0, _, n2, _] = self.elements[e];
        let (a, c) = (self.nodes[n0], self.nodes[n2]);
        (c[0] - a[0]) * (c[1] - a[1])
    }

    /// Node coordinates of every degree of freedom, in dof order.
    pub fn dof_coordinates(&self) -> Vec<[f64; 2]> {
        self.nodes
            .iter()
            .zip(&self.dof_of_node)
            .filter_map(|(p, d)| d.map(|_| *p))
            .collect()
    }

    /// Interface nodes ordered by increasing x.
    pub fn interface_nodes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.nodes.len())
            .filter(|&n| self.kinds[n] == NodeKind::Interface)
            .collect();
        out.sort_by(|&a, &b| self.nodes[a][0].total_cmp(&self.nodes[b][0]));
        out
    }

    /// Plain-text dump: a header line, then one `node` line per node and one
    /// `elem` line per element, whitespace separated.
    pub fn write_dump(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "# mesh subdomain={} nx={} ny={} nodes={} elements={} dofs={} (node id x y kind dof | elem id n0 n1 n2 n3)",
            self.subdomain.index() + 1,
            self.nx,
            self.ny,
            self.nodes.len(),
            self.elements.len(),
            self.n_dofs
        )?;
        for (i, (p, k)) in self.nodes.iter().zip(&self.kinds).enumerate() {
            let kind = match k {
                NodeKind::Exterior => "exterior",
                NodeKind::Interface => "interface",
                NodeKind::Interior => "interior",
            };
            let dof = self.dof_of_node[i].map_or("-".to_string(), |d| d.to_string());
            writeln!(out, "node {i} {:.17e} {:.17e} {kind} {dof}", p[0], p[1])?;
        }
        for (e, c) in self.elements.iter().enumerate() {
            writeln!(out, "elem {e} {} {} {} {}", c[0], c[1], c[2], c[3])?;
        }
        Ok(())
    }
}

/// Shared numbering of the interface degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceMap {
    /// x-coordinate of each interface slot, increasing.
    pub coordinates: Vec<f64>,
    /// Degree of freedom of each slot in the upper and lower subdomain.
    pub dofs: [Vec<usize>; 2],
}

impl InterfaceMap {
    /// `d_Γ`.
    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    /// Interface slot of a subdomain degree of freedom.
    pub fn slot_of(&self, subdomain: usize, dof: usize) -> Option<usize> {
        self.dofs[subdomain].iter().position(|&d| d == dof)
    }
}

pub fn match_interfaces(upper: &Mesh, lower: &Mesh) -> Result<InterfaceMap> {
    if upper.subdomain != Subdomain::Upper || lower.subdomain != Subdomain::Lower {
        return Err(Error::Match(
            "expected the upper mesh first and the lower mesh second".into(),
        ));
    }
    let a = upper.interface_nodes();
    let b = lower.interface_nodes();
    if a.len() != b.len() {
        return Err(Error::Match(format!(
            "interface node counts differ ({} vs {}); nonmatching traces are unsupported",
            a.len(),
            b.len()
        )));
    }
    let mut coordinates = Vec::with_capacity(a.len());
    for (&na, &nb) in a.iter().zip(&b) {
        let (xa, xb) = (upper.nodes[na][0], lower.nodes[nb][0]);
        if (xa - xb).abs() > 1e-12 {
            return Err(Error::Match(format!(
                "interface node coordinates differ: {xa} vs {xb}"
            )));
        }
        coordinates.push(xa);
    }
    if coordinates.is_empty() {
        log::warn!("interface has no degrees of freedom; the subdomains are decoupled");
    }
    let dofs = [
        a.iter()
            .map(|&n| upper.dof_of_node[n].expect("interface dof"))
            .collect(),
        b.iter()
            .map(|&n| lower.dof_of_node[n].expect("interface dof"))
            .collect(),
    ];
    Ok(InterfaceMap { coordinates, dofs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_has_no_unknowns() {
        let m = build_mesh(Subdomain::Upper, 1, 1).unwrap();
        assert_eq!(m.nodes().len(), 4);
        assert_eq!(m.elements().len(), 1);
        assert_eq!(m.n_dofs(), 0);
    }

    #[test]
    fn two_by_two_grid_classification() {
        let m = build_mesh(Subdomain::Upper, 2, 2).unwrap();
        assert_eq!(m.nodes().len(), 9);
        let interior = (0..9).filter(|&n| m.kind(n) == NodeKind::Interior).count();
        let interface = (0..9).filter(|&n| m.kind(n) == NodeKind::Interface).count();
        assert_eq!((interior, interface), (1, 1));
        let iface = m.interface_nodes();
        assert_eq!(m.nodes()[iface[0]], [0.5, 0.0]);
    }

    #[test]
    fn mesh_size_formula() {
        let m = build_mesh(Subdomain::Lower, 4, 4).unwrap();
        assert!((m.h() - (1.0f64 / 16.0 + 1.0 / 16.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(build_mesh(Subdomain::Upper, 0, 3).is_err());
        assert!(build_mesh(Subdomain::Upper, 3, 0).is_err());
    }

    #[test]
    fn areas_sum_to_one_and_are_positive() {
        for sub in [Subdomain::Upper, Subdomain::Lower] {
            let m = build_mesh(sub, 7, 3).unwrap();
            let total: f64 = (0..m.elements().len()).map(|e| m.element_area(e)).sum();
            assert!((0..m.elements().len()).all(|e| m.element_area(e) > 0.0));
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interface_matching() {
        let a = build_mesh(Subdomain::Upper, 4, 3).unwrap();
        let b = build_mesh(Subdomain::Lower, 4, 5).unwrap();
        let map = match_interfaces(&a, &b).unwrap();
        assert_eq!(map.len(), 3);
        for s in 0..map.len() {
            for (sub, mesh) in [(0, &a), (1, &b)] {
                let dof = map.dofs[sub][s];
                assert_eq!(map.slot_of(sub, dof), Some(s));
                let p = mesh.dof_coordinates()[dof];
                assert_eq!(p, [map.coordinates[s], 0.0]);
            }
        }

        let c = build_mesh(Subdomain::Lower, 5, 4).unwrap();
        assert!(matches!(match_interfaces(&a, &c), Err(Error::Match(_))));

        let d = build_mesh(Subdomain::Upper, 1, 2).unwrap();
        let e = build_mesh(Subdomain::Lower, 1, 2).unwrap();
        assert!(match_interfaces(&d, &e).unwrap().is_empty());
    }

    #[test]
    fn dump_has_header_and_all_entities() {
        let m = build_mesh(Subdomain::Lower, 2, 1).unwrap();
        let mut buf = Vec::new();
        m.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# mesh subdomain=2 nx=2 ny=1"));
        assert_eq!(text.lines().filter(|l| l.starts_with("node ")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("elem ")).count(), 2);
    }
}

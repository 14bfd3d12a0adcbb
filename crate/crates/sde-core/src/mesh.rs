//! Structured triangulations of axis-aligned rectangles, nested uniform
//! refinement, and the matched two-subdomain geometry used by the coupled
//! problem: a free-flow rectangle above `y = 0` and a porous rectangle below,
//! sharing interface nodes exactly.
//!
//! Meshes are deterministic: the same inputs always produce the same vertex
//! ordering and coordinates bit-for-bit, which the reproducibility guarantees
//! of the experiment runner rely on.

use crate::{Error, Result};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;

/// Classification of a boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    /// Exterior boundary carrying Dirichlet data.
    ExteriorDirichlet,
    /// Edge on the coupling interface `y = 0`.
    Interface,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryTag::ExteriorDirichlet => write!(f, "exterior_dirichlet"),
            BoundaryTag::Interface => write!(f, "interface"),
        }
    }
}

/// Boundary edge: a vertex pair plus its tag.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub v: [usize; 2],
    pub tag: BoundaryTag,
}

/// Triangulation of a planar domain.
///
/// Triangles are counterclockwise. `h` is the maximum edge length actually
/// present in the mesh; `level` counts uniform refinements since construction.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub h: f64,
    pub level: u32,
}

impl TriMesh {
    /// Twice the signed area of triangle `t` (positive for CCW orientation).
    fn double_signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let pa = self.vertices[a];
        let pb = self.vertices[b];
        let pc = self.vertices[c];
        (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
    }

    /// Area of triangle `t`.
    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.double_signed_area(t)
    }

    /// Sum of all triangle areas.
    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Maximum edge length over all triangles.
    pub fn max_edge_length(&self) -> f64 {
        let mut h: f64 = 0.0;
        for tri in &self.triangles {
            for k in 0..3 {
                let p = self.vertices[tri[k]];
                let q = self.vertices[tri[(k + 1) % 3]];
                h = h.max(((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Structural sanity check: positive areas, interior edges shared by
    /// exactly two triangles, boundary edges by exactly one and present in the
    /// tagged list, and interface edges lying exactly on `y = 0`.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.triangles.len() {
            if self.double_signed_area(t) <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "triangle {t} has nonpositive signed area"
                )));
            }
        }
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (i, j) = (tri[k], tri[(k + 1) % 3]);
                let key = (i.min(j), i.max(j));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        let mut tagged: HashMap<(usize, usize), BoundaryTag> = HashMap::new();
        for be in &self.boundary_edges {
            let key = (be.v[0].min(be.v[1]), be.v[0].max(be.v[1]));
            if tagged.insert(key, be.tag).is_some() {
                return Err(Error::InvalidInput(format!(
                    "boundary edge {key:?} listed twice"
                )));
            }
        }
        for (key, count) in &edge_count {
            match count {
                1 => {
                    let tag = tagged.get(key).ok_or_else(|| {
                        Error::InvalidInput(format!("boundary edge {key:?} missing a tag"))
                    })?;
                    if *tag == BoundaryTag::Interface {
                        let (i, j) = *key;
                        if self.vertices[i][1] != 0.0 || self.vertices[j][1] != 0.0 {
                            return Err(Error::InvalidInput(format!(
                                "interface edge {key:?} is not on y = 0"
                            )));
                        }
                    }
                }
                2 => {
                    if tagged.contains_key(key) {
                        return Err(Error::InvalidInput(format!(
                            "interior edge {key:?} carries a boundary tag"
                        )));
                    }
                }
                n => {
                    return Err(Error::InvalidInput(format!(
                        "edge {key:?} shared by {n} triangles"
                    )));
                }
            }
        }
        if tagged.len() != self.boundary_edges.len() {
            return Err(Error::InvalidInput(
                "duplicate boundary edges after normalization".into(),
            ));
        }
        Ok(())
    }

    /// Plain-text dump for debugging: `v x y`, `t i j k`, `b i j tag` lines.
    pub fn dump_debug<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {}", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t[0], t[1], t[2])?;
        }
        for b in &self.boundary_edges {
            writeln!(w, "b {} {} {}", b.v[0], b.v[1], b.tag)?;
        }
        Ok(())
    }
}

/// Structured triangulation of `x_range × y_range` with `nx × ny` cells, each
/// split along its SW–NE diagonal. Boundary edges lying exactly on `y = 0`
/// are tagged [`BoundaryTag::Interface`]; all others are exterior Dirichlet.
pub fn build_rect_mesh(
    x_range: [f64; 2],
    y_range: [f64; 2],
    nx: usize,
    ny: usize,
) -> Result<TriMesh> {
    if nx < 1 || ny < 1 {
        return Err(Error::InvalidInput(format!(
            "cell counts must be at least 1 (got nx={nx}, ny={ny})"
        )));
    }
    if !(x_range[0] < x_range[1]) || !(y_range[0] < y_range[1]) {
        return Err(Error::InvalidInput(format!(
            "degenerate ranges x={x_range:?}, y={y_range:?}"
        )));
    }

    let lx = x_range[1] - x_range[0];
    let ly = y_range[1] - y_range[0];
    let vid = |i: usize, j: usize| j * (nx + 1) + i;

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // Endpoints are taken exactly from the range so shared boundaries of
        // separately built meshes coincide bit-for-bit.
        let y = if j == ny {
            y_range[1]
        } else {
            y_range[0] + (j as f64) * ly / (ny as f64)
        };
        for i in 0..=nx {
            let x = if i == nx {
                x_range[1]
            } else {
                x_range[0] + (i as f64) * lx / (nx as f64)
            };
            vertices.push([x, y]);
        }
    }

    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // SW–NE diagonal: lower-right and upper-left triangle, both CCW.
            triangles.push([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
            triangles.push([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }

    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    let push_edge = |mesh_edges: &mut Vec<BoundaryEdge>, a: usize, b: usize,
                         verts: &[[f64; 2]]| {
        let tag = if verts[a][1] == 0.0 && verts[b][1] == 0.0 {
            BoundaryTag::Interface
        } else {
            BoundaryTag::ExteriorDirichlet
        };
        mesh_edges.push(BoundaryEdge { v: [a, b], tag });
    };
    for i in 0..nx {
        push_edge(&mut boundary_edges, vid(i, 0), vid(i + 1, 0), &vertices);
        push_edge(&mut boundary_edges, vid(i, ny), vid(i + 1, ny), &vertices);
    }
    for j in 0..ny {
        push_edge(&mut boundary_edges, vid(0, j), vid(0, j + 1), &vertices);
        push_edge(&mut boundary_edges, vid(nx, j), vid(nx, j + 1), &vertices);
    }

    let mut mesh = TriMesh {
        vertices,
        triangles,
        boundary_edges,
        h: 0.0,
        level: 0,
    };
    mesh.h = mesh.max_edge_length();
    Ok(mesh)
}

/// Uniform refinement: each triangle splits into four via edge midpoints.
/// Coarse vertices keep their indices (and exact coordinates), so nestedness
/// holds by construction; boundary children inherit their parent's tag.
pub fn refine(mesh: &TriMesh) -> TriMesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = midpoint.get(&key) {
            return m;
        }
        let pa = vertices[a];
        let pb = vertices[b];
        let m = vertices.len();
        vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        midpoint.insert(key, m);
        m
    };

    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let mab = mid(a, b, &mut vertices);
        let mbc = mid(b, c, &mut vertices);
        let mca = mid(c, a, &mut vertices);
        triangles.push([a, mab, mca]);
        triangles.push([b, mbc, mab]);
        triangles.push([c, mca, mbc]);
        triangles.push([mab, mbc, mca]);
    }

    let mut boundary_edges = Vec::with_capacity(2 * mesh.boundary_edges.len());
    for be in &mesh.boundary_edges {
        let [a, b] = be.v;
        let key = (a.min(b), a.max(b));
        let m = *midpoint
            .get(&key)
            .expect("boundary edge must have been split");
        boundary_edges.push(BoundaryEdge { v: [a, m], tag: be.tag });
        boundary_edges.push(BoundaryEdge { v: [m, b], tag: be.tag });
    }

    let mut out = TriMesh {
        vertices,
        triangles,
        boundary_edges,
        h: 0.0,
        level: mesh.level + 1,
    };
    out.h = out.max_edge_length();
    out
}

/// Node-level correspondence between the two sides of the interface `y = 0`,
/// plus the fixed interface geometry (normals and tangent).
#[derive(Debug, Clone)]
pub struct InterfaceMap {
    /// Fluid-mesh vertex indices on Γ, sorted by x.
    pub fluid_nodes: Vec<usize>,
    /// Porous-mesh vertex indices on Γ, sorted by x; `porous_nodes[s]` has the
    /// same x-coordinate as `fluid_nodes[s]`, exactly.
    pub porous_nodes: Vec<usize>,
    /// Shared interface x-coordinates, ascending.
    pub xs: Vec<f64>,
    /// Porous triangle adjacent to segment `s` (between nodes `s` and `s+1`).
    pub porous_tri: Vec<usize>,
    /// Fluid triangle adjacent to segment `s`.
    pub fluid_tri: Vec<usize>,
    /// Unit outward normal of the fluid domain on Γ.
    pub n_f: [f64; 2],
    /// Unit outward normal of the porous domain on Γ (`n_p = −n_f`).
    pub n_p: [f64; 2],
    /// Unit tangent on Γ.
    pub tau: [f64; 2],
}

impl InterfaceMap {
    /// Number of interface nodes per side.
    pub fn n_nodes(&self) -> usize {
        self.xs.len()
    }

    /// Number of interface segments.
    pub fn n_segments(&self) -> usize {
        self.xs.len() - 1
    }

    /// Length of segment `s`.
    pub fn segment_length(&self, s: usize) -> f64 {
        self.xs[s + 1] - self.xs[s]
    }

    /// Total interface length.
    pub fn length(&self) -> f64 {
        *self.xs.last().unwrap() - self.xs[0]
    }

    fn interface_nodes_sorted(mesh: &TriMesh) -> Vec<usize> {
        let mut on_iface = vec![false; mesh.vertices.len()];
        for be in &mesh.boundary_edges {
            if be.tag == BoundaryTag::Interface {
                on_iface[be.v[0]] = true;
                on_iface[be.v[1]] = true;
            }
        }
        let mut nodes: Vec<usize> = (0..mesh.vertices.len()).filter(|&v| on_iface[v]).collect();
        nodes.sort_by(|&a, &b| mesh.vertices[a][0].total_cmp(&mesh.vertices[b][0]));
        nodes
    }

    /// Triangle adjacent to each interface segment of `mesh`, in sorted-node
    /// order (interface edges are boundary edges, so the triangle is unique).
    fn adjacent_triangles(mesh: &TriMesh, nodes: &[usize]) -> Vec<usize> {
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (tri[k], tri[(k + 1) % 3]);
                owner.insert((i.min(j), i.max(j)), t);
            }
        }
        nodes
            .windows(2)
            .map(|w| {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                *owner
                    .get(&key)
                    .expect("interface segment must belong to a triangle")
            })
            .collect()
    }

    /// Build the map from a matched mesh pair, verifying exact coordinate
    /// agreement across the interface.
    pub fn build(fluid: &TriMesh, porous: &TriMesh) -> Result<Self> {
        let fluid_nodes = Self::interface_nodes_sorted(fluid);
        let porous_nodes = Self::interface_nodes_sorted(porous);
        if fluid_nodes.len() != porous_nodes.len() || fluid_nodes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "interface node counts differ or are degenerate: fluid {}, porous {}",
                fluid_nodes.len(),
                porous_nodes.len()
            )));
        }
        for (&vf, &vp) in fluid_nodes.iter().zip(&porous_nodes) {
            let pf = fluid.vertices[vf];
            let pp = porous.vertices[vp];
            if pf[0] != pp[0] || pf[1] != 0.0 || pp[1] != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "interface nodes mismatch: fluid {pf:?} vs porous {pp:?}"
                )));
            }
        }
        let xs: Vec<f64> = fluid_nodes.iter().map(|&v| fluid.vertices[v][0]).collect();
        let fluid_tri = Self::adjacent_triangles(fluid, &fluid_nodes);
        let porous_tri = Self::adjacent_triangles(porous, &porous_nodes);
        Ok(InterfaceMap {
            fluid_nodes,
            porous_nodes,
            xs,
            porous_tri,
            fluid_tri,
            n_f: [0.0, -1.0],
            n_p: [0.0, 1.0],
            tau: [1.0, 0.0],
        })
    }
}

/// The coupled two-subdomain geometry: fluid rectangle `[0,π]×[0,1]`, porous
/// rectangle `[0,π]×[−1,0]`, matched on `y = 0`.
#[derive(Debug, Clone)]
pub struct CoupledMesh {
    pub fluid: TriMesh,
    pub porous: TriMesh,
    pub interface: InterfaceMap,
    /// Nominal mesh size `1/2^k` this pair was requested at.
    pub h_nominal: f64,
}

impl CoupledMesh {
    /// One uniform refinement of both subdomains, interface map rebuilt.
    pub fn refine(&self) -> CoupledMesh {
        let fluid = refine(&self.fluid);
        let porous = refine(&self.porous);
        let interface =
            InterfaceMap::build(&fluid, &porous).expect("refinement preserves interface matching");
        CoupledMesh {
            fluid,
            porous,
            interface,
            h_nominal: 0.5 * self.h_nominal,
        }
    }
}

/// Horizontal cell count for the coupled domain of length π at `ny` vertical
/// cells, chosen so cells stay near-square. Anchored at ny = 8 (where
/// `round(8π) = 25`) and doubled with ny from there, so that direct
/// construction at a finer level coincides with uniform refinement of a
/// coarser one.
fn coupled_nx(ny: usize) -> usize {
    if ny <= 8 {
        (std::f64::consts::PI * ny as f64).round() as usize
    } else {
        // ny is a power of two > 8 here; scale the anchor count along.
        25 * (ny / 8)
    }
}

/// Build the matched fluid/porous mesh pair at nominal size `h_target`,
/// which must be `1/2^k`. Vertical cell count is `1/h_target` per subdomain;
/// horizontal count keeps cells near-square (see [`coupled_nx`]). Meshes at
/// `h/2` are exactly the uniform refinement of the meshes at `h`.
pub fn build_coupled_meshes(h_target: f64) -> Result<CoupledMesh> {
    if !(h_target > 0.0) {
        return Err(Error::InvalidInput(format!(
            "h_target must be positive (got {h_target})"
        )));
    }
    let ny_f = 1.0 / h_target;
    let ny = ny_f.round() as usize;
    if ny == 0 || (ny & (ny - 1)) != 0 || (ny as f64 - ny_f).abs() > 1e-9 * ny_f {
        return Err(Error::InvalidInput(format!(
            "h_target must be 1/2^k (got {h_target})"
        )));
    }

    // Build at the anchor resolution and refine up, so meshes at successive
    // levels are bitwise nested regardless of which level was requested.
    let ny_base = ny.min(8);
    let refinements = (ny / ny_base).trailing_zeros();
    let pi = std::f64::consts::PI;
    let mut fluid = build_rect_mesh([0.0, pi], [0.0, 1.0], coupled_nx(ny_base), ny_base)?;
    let mut porous = build_rect_mesh([0.0, pi], [-1.0, 0.0], coupled_nx(ny_base), ny_base)?;
    for _ in 0..refinements {
        fluid = refine(&fluid);
        porous = refine(&porous);
    }
    let interface = InterfaceMap::build(&fluid, &porous)?;
    Ok(CoupledMesh {
        fluid,
        porous,
        interface,
        h_nominal: h_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_rect_mesh_counts() {
        let m = build_rect_mesh([0.0, 1.0], [0.0, 1.0], 1, 1).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles.len(), 2);
        m.validate().unwrap();

        let m = build_rect_mesh([0.0, std::f64::consts::PI], [0.0, 1.0], 4, 4).unwrap();
        assert_eq!(m.vertices.len(), 25);
        assert_eq!(m.triangles.len(), 32);
        m.validate().unwrap();
    }

    #[test]
    fn mesh_size_is_cell_hypotenuse() {
        let pi = std::f64::consts::PI;
        let m = build_rect_mesh([0.0, pi], [0.0, 1.0], 50, 16).unwrap();
        let expect = ((pi / 50.0).powi(2) + (1.0f64 / 16.0).powi(2)).sqrt();
        assert!((m.h - expect).abs() < 1e-14);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(build_rect_mesh([0.0, 1.0], [0.0, 1.0], 0, 1).is_err());
        assert!(build_rect_mesh([1.0, 1.0], [0.0, 1.0], 1, 1).is_err());
        assert!(build_coupled_meshes(0.0).is_err());
        assert!(build_coupled_meshes(-0.25).is_err());
        assert!(build_coupled_meshes(0.3).is_err());
    }

    #[test]
    fn total_area_matches_domain() {
        for &h in &[0.125, 0.0625] {
            let cm = build_coupled_meshes(h).unwrap();
            let pi = std::f64::consts::PI;
            assert!((cm.fluid.total_area() - pi).abs() < 1e-12 * pi);
            assert!((cm.porous.total_area() - pi).abs() < 1e-12 * pi);
        }
    }

    #[test]
    fn coupled_meshes_match_on_interface() {
        let cm = build_coupled_meshes(1.0 / 16.0).unwrap();
        cm.fluid.validate().unwrap();
        cm.porous.validate().unwrap();
        // ny = 16, nx = 50 → 51 matched interface nodes per side.
        assert_eq!(cm.interface.n_nodes(), 51);
        assert_eq!(cm.interface.n_segments(), 50);
        for (&vf, &vp) in cm.interface.fluid_nodes.iter().zip(&cm.interface.porous_nodes) {
            let pf = cm.fluid.vertices[vf];
            let pp = cm.porous.vertices[vp];
            assert_eq!(pf[0], pp[0]);
            assert_eq!(pf[1], 0.0);
            assert_eq!(pp[1], 0.0);
        }
        assert_eq!(cm.interface.n_f, [0.0, -1.0]);
        assert_eq!(cm.interface.n_p, [0.0, 1.0]);
        assert!((cm.interface.length() - std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn coarse_coupled_mesh_triangle_count() {
        let cm = build_coupled_meshes(0.125).unwrap();
        // nx = 25, ny = 8 → 2·25·8 triangles.
        assert_eq!(cm.fluid.triangles.len(), 400);
        assert_eq!(cm.porous.triangles.len(), 400);
    }

    #[test]
    fn refine_quarters_triangles_and_halves_h() {
        let m = build_rect_mesh([0.0, 1.0], [0.0, 1.0], 1, 1).unwrap();
        let f = refine(&m);
        assert_eq!(f.triangles.len(), 8);
        assert_eq!(f.vertices.len(), 9);
        assert_eq!(f.level, 1);
        assert!((f.h - 0.5 * m.h).abs() < 1e-15);
        f.validate().unwrap();

        // Vertex count = old vertices + old edges (each edge gains a midpoint).
        let m2 = build_rect_mesh([0.0, 2.0], [0.0, 1.0], 4, 2).unwrap();
        let mut edges = std::collections::HashSet::new();
        for tri in &m2.triangles {
            for k in 0..3 {
                let (i, j) = (tri[k], tri[(k + 1) % 3]);
                edges.insert((i.min(j), i.max(j)));
            }
        }
        let f2 = refine(&m2);
        assert_eq!(f2.vertices.len(), m2.vertices.len() + edges.len());
        assert_eq!(f2.triangles.len(), 4 * m2.triangles.len());
    }

    #[test]
    fn refinement_is_nested() {
        let m = build_rect_mesh([0.0, std::f64::consts::PI], [-1.0, 0.0], 5, 3).unwrap();
        let f = refine(&m);
        // Coarse vertices keep their indices and exact coordinates.
        for (i, v) in m.vertices.iter().enumerate() {
            assert_eq!(f.vertices[i], *v);
        }
    }

    #[test]
    fn refined_interface_edges_bisect_coarse_ones() {
        let cm = build_coupled_meshes(0.125).unwrap();
        let fine = cm.refine();
        let seg_set = |mesh: &TriMesh| -> std::collections::HashSet<(u64, u64)> {
            mesh.boundary_edges
                .iter()
                .filter(|be| be.tag == BoundaryTag::Interface)
                .map(|be| {
                    let a = mesh.vertices[be.v[0]][0];
                    let b = mesh.vertices[be.v[1]][0];
                    ((a.min(b)).to_bits(), (a.max(b)).to_bits())
                })
                .collect()
        };
        let coarse = seg_set(&cm.fluid);
        let refined = seg_set(&fine.fluid);
        assert_eq!(refined.len(), 2 * coarse.len());
        for &(a, b) in &coarse {
            let (a, b) = (f64::from_bits(a), f64::from_bits(b));
            let mid = 0.5 * (a + b);
            assert!(refined.contains(&(a.to_bits(), mid.to_bits())));
            assert!(refined.contains(&(mid.to_bits(), b.to_bits())));
        }
    }

    #[test]
    fn direct_build_at_half_h_equals_refinement() {
        let coarse = build_coupled_meshes(1.0 / 16.0).unwrap();
        let direct = build_coupled_meshes(1.0 / 32.0).unwrap();
        let refined = coarse.refine();
        // Compare canonically sorted vertex sets for exact equality.
        let canon = |mesh: &TriMesh| -> Vec<(u64, u64)> {
            let mut v: Vec<(u64, u64)> = mesh
                .vertices
                .iter()
                .map(|p| (p[0].to_bits(), p[1].to_bits()))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(canon(&refined.fluid), canon(&direct.fluid));
        assert_eq!(canon(&refined.porous), canon(&direct.porous));
        assert_eq!(refined.fluid.triangles.len(), direct.fluid.triangles.len());
        assert_eq!(direct.fluid.level, refined.fluid.level);
    }

    #[test]
    fn validate_rejects_flipped_triangle() {
        let mut m = build_rect_mesh([0.0, 1.0], [0.0, 1.0], 2, 2).unwrap();
        m.triangles[0].swap(0, 1);
        assert!(m.validate().is_err());
    }

    #[test]
    fn debug_dump_format() {
        let m = build_rect_mesh([0.0, 1.0], [-1.0, 0.0], 1, 1).unwrap();
        let mut buf = Vec::new();
        m.dump_debug(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4 + 2 + 4);
        assert_eq!(lines[0], "v 0 -1");
        assert!(lines[4].starts_with("t "));
        assert!(lines.iter().any(|l| l.ends_with("interface")));
        assert!(lines.iter().any(|l| l.ends_with("exterior_dirichlet")));
    }
}

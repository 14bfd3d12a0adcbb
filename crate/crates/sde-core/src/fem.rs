//! Finite element spaces and assembly for the decoupled Robin subproblems.
//!
//! The fluid velocity uses the MINI element (vector P1 enriched with one
//! cubic bubble per triangle per component), pressure and piezometric head
//! use continuous P1. Interface traces of velocity and head are exactly
//! piecewise linear because the bubbles vanish on element edges, so trace
//! extraction is nodal.
//!
//! Operators are assembled once per ensemble (they depend only on the
//! ensemble means `η̄`, `K̄` and the Robin parameters) and come in two forms:
//! the full unconstrained Galerkin matrix, used for Dirichlet lifts and
//! residual checks, and the reduced matrix with Dirichlet rows and columns
//! eliminated, which is what gets factorized.

use crate::ddm::{TraceField, TraceKind};
use crate::linalg::SparseSystem;
use crate::mesh::{BoundaryTag, CoupledMesh, TriMesh};
use crate::randfield::ConductivitySample;
use crate::{Error, Result};

/// Which function space a coefficient vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// MINI velocity on the fluid mesh: `[u1 vertices | u2 vertices | u1
    /// bubbles | u2 bubbles]`.
    Velocity,
    /// P1 pressure on the fluid mesh (vertex values).
    Pressure,
    /// P1 head on the porous mesh (vertex values).
    Head,
}

/// Coefficient vector tagged with its space. Dirichlet-constrained entries
/// carry the prescribed boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVector {
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl FieldVector {
    pub fn zeros(kind: FieldKind, len: usize) -> Self {
        FieldVector {
            kind,
            values: vec![0.0; len],
        }
    }
}

/// Degrees-of-freedom bookkeeping for the coupled spaces on one mesh pair.
///
/// Packed Stokes layout (dimension `3·nv_f + 2·nt_f`):
/// `[u1 vertices | u2 vertices | u1 bubbles | u2 bubbles | pressure]`.
/// Velocity components at exterior-Dirichlet fluid vertices are constrained;
/// bubbles and pressure never are. The head space is P1 on the porous mesh
/// with exterior-Dirichlet vertices constrained.
#[derive(Debug, Clone)]
pub struct FeSpaces {
    pub n_fluid_vertices: usize,
    pub n_fluid_triangles: usize,
    pub n_porous_vertices: usize,
    /// Fluid vertices on the exterior Dirichlet boundary Γ_f.
    pub fluid_dirichlet: Vec<bool>,
    /// Porous vertices on the exterior Dirichlet boundary Γ_p.
    pub porous_dirichlet: Vec<bool>,
    /// Free (unconstrained) packed-Stokes DOFs, ascending.
    pub stokes_free: Vec<usize>,
    /// Free head DOFs, ascending.
    pub head_free: Vec<usize>,
}

impl FeSpaces {
    pub fn build(mesh: &CoupledMesh) -> FeSpaces {
        let mark = |m: &TriMesh| {
            let mut d = vec![false; m.vertices.len()];
            for be in &m.boundary_edges {
                if be.tag == BoundaryTag::ExteriorDirichlet {
                    d[be.v[0]] = true;
                    d[be.v[1]] = true;
                }
            }
            d
        };
        let fluid_dirichlet = mark(&mesh.fluid);
        let porous_dirichlet = mark(&mesh.porous);
        let nv = mesh.fluid.vertices.len();
        let nt = mesh.fluid.triangles.len();
        let stokes_dim = 3 * nv + 2 * nt;
        let mut stokes_free = Vec::with_capacity(stokes_dim);
        for dof in 0..stokes_dim {
            let constrained = if dof < 2 * nv {
                fluid_dirichlet[dof % nv]
            } else {
                false
            };
            if !constrained {
                stokes_free.push(dof);
            }
        }
        let head_free = (0..mesh.porous.vertices.len())
            .filter(|&v| !porous_dirichlet[v])
            .collect();
        FeSpaces {
            n_fluid_vertices: nv,
            n_fluid_triangles: nt,
            n_porous_vertices: mesh.porous.vertices.len(),
            fluid_dirichlet,
            porous_dirichlet,
            stokes_free,
            head_free,
        }
    }

    /// Packed-Stokes index of `u1` at fluid vertex `v`.
    pub fn u1(&self, v: usize) -> usize {
        v
    }
    /// Packed-Stokes index of `u2` at fluid vertex `v`.
    pub fn u2(&self, v: usize) -> usize {
        self.n_fluid_vertices + v
    }
    /// Packed-Stokes index of the `u1` bubble on triangle `t`.
    pub fn bubble1(&self, t: usize) -> usize {
        2 * self.n_fluid_vertices + t
    }
    /// Packed-Stokes index of the `u2` bubble on triangle `t`.
    pub fn bubble2(&self, t: usize) -> usize {
        2 * self.n_fluid_vertices + self.n_fluid_triangles + t
    }
    /// Packed-Stokes index of the pressure DOF at fluid vertex `v`.
    pub fn pressure(&self, v: usize) -> usize {
        2 * self.n_fluid_vertices + 2 * self.n_fluid_triangles + v
    }

    /// Dimension of the velocity space alone.
    pub fn velocity_dim(&self) -> usize {
        2 * self.n_fluid_vertices + 2 * self.n_fluid_triangles
    }
    /// Dimension of the packed Stokes system (velocity + pressure).
    pub fn stokes_dim(&self) -> usize {
        self.velocity_dim() + self.n_fluid_vertices
    }
    /// Dimension of the head space.
    pub fn head_dim(&self) -> usize {
        self.n_porous_vertices
    }

    pub fn expected_len(&self, kind: FieldKind) -> usize {
        match kind {
            FieldKind::Velocity => self.velocity_dim(),
            FieldKind::Pressure => self.n_fluid_vertices,
            FieldKind::Head => self.head_dim(),
        }
    }

    fn check(&self, field: &FieldVector, kind: FieldKind) -> Result<()> {
        if field.kind != kind || field.values.len() != self.expected_len(kind) {
            return Err(Error::InvalidInput(format!(
                "expected a {:?} vector of length {}, got {:?} of length {}",
                kind,
                self.expected_len(kind),
                field.kind,
                field.values.len()
            )));
        }
        Ok(())
    }

    /// Split a packed Stokes solution into velocity and pressure fields.
    pub fn split_stokes(&self, packed: &[f64]) -> (FieldVector, FieldVector) {
        assert_eq!(packed.len(), self.stokes_dim());
        let nvel = self.velocity_dim();
        (
            FieldVector {
                kind: FieldKind::Velocity,
                values: packed[..nvel].to_vec(),
            },
            FieldVector {
                kind: FieldKind::Pressure,
                values: packed[nvel..].to_vec(),
            },
        )
    }
}

/// Quadrature exact to degree 5: a 7-point triangle rule and a 3-point
/// Gauss rule on the unit segment. Sufficient to integrate every polynomial
/// integrand in the forms exactly (the stiffest is bubble-gradient ×
/// bubble-gradient, degree 4).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Barycentric coordinates of triangle points.
    pub tri_bary: Vec<[f64; 3]>,
    /// Triangle weights (relative to unit total measure; multiply by area).
    pub tri_w: Vec<f64>,
    /// Segment points in [0, 1].
    pub seg_t: Vec<f64>,
    /// Segment weights summing to 1.
    pub seg_w: Vec<f64>,
}

/// The degree-5 rule used throughout assembly and error integration.
pub fn quadrature_degree5() -> QuadratureRule {
    let s15 = 15.0f64.sqrt();
    let a = (6.0 - s15) / 21.0;
    let b = (6.0 + s15) / 21.0;
    let wa = (155.0 - s15) / 1200.0;
    let wb = (155.0 + s15) / 1200.0;
    let third = 1.0 / 3.0;
    let tri_bary = vec![
        [third, third, third],
        [a, a, 1.0 - 2.0 * a],
        [a, 1.0 - 2.0 * a, a],
        [1.0 - 2.0 * a, a, a],
        [b, b, 1.0 - 2.0 * b],
        [b, 1.0 - 2.0 * b, b],
        [1.0 - 2.0 * b, b, b],
    ];
    let tri_w = vec![9.0 / 40.0, wa, wa, wa, wb, wb, wb];
    let g = 0.5 * (3.0f64 / 5.0).sqrt();
    QuadratureRule {
        tri_bary,
        tri_w,
        seg_t: vec![0.5 - g, 0.5, 0.5 + g],
        seg_w: vec![5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
    }
}

/// Constant P1 barycentric gradients and the (positive) area of triangle `t`.
pub(crate) fn p1_gradients(mesh: &TriMesh, t: usize) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = mesh.triangles[t];
    let pa = mesh.vertices[a];
    let pb = mesh.vertices[b];
    let pc = mesh.vertices[c];
    let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
    let g = [
        [(pb[1] - pc[1]) / det, (pc[0] - pb[0]) / det],
        [(pc[1] - pa[1]) / det, (pa[0] - pc[0]) / det],
        [(pa[1] - pb[1]) / det, (pb[0] - pa[0]) / det],
    ];
    (g, 0.5 * det)
}

/// Point inside triangle `t` at barycentric coordinates `l`.
fn bary_point(mesh: &TriMesh, t: usize, l: [f64; 3]) -> [f64; 2] {
    let [a, b, c] = mesh.triangles[t];
    let pa = mesh.vertices[a];
    let pb = mesh.vertices[b];
    let pc = mesh.vertices[c];
    [
        l[0] * pa[0] + l[1] * pb[0] + l[2] * pc[0],
        l[0] * pa[1] + l[1] * pb[1] + l[2] * pc[1],
    ]
}

/// Values and gradients of the four MINI shape functions (three barycentric
/// hats plus the cubic bubble `27·λ0λ1λ2`) at barycentric point `l`.
fn mini_shapes(l: [f64; 3], grads: &[[f64; 2]; 3]) -> ([f64; 4], [[f64; 2]; 4]) {
    let bubble = 27.0 * l[0] * l[1] * l[2];
    let vals = [l[0], l[1], l[2], bubble];
    let mut gb = [0.0, 0.0];
    for k in 0..2 {
        gb[k] = 27.0
            * (l[1] * l[2] * grads[0][k]
                + l[0] * l[2] * grads[1][k]
                + l[0] * l[1] * grads[2][k]);
    }
    let g = [grads[0], grads[1], grads[2], gb];
    (vals, g)
}

/// Assembled operator: the full unconstrained Galerkin matrix plus the
/// reduced system with Dirichlet rows/columns eliminated, and the index maps
/// between them.
pub struct OperatorPair {
    /// Full matrix over all DOFs (no boundary conditions applied).
    pub full: SparseSystem,
    /// Matrix restricted to free rows and columns; this is what is factorized.
    pub reduced: SparseSystem,
    /// Free DOF list: `free[r]` is the full index of reduced index `r`.
    pub free: Vec<usize>,
    /// Inverse map: full index → reduced index.
    reduced_of: Vec<Option<usize>>,
}

impl OperatorPair {
    pub(crate) fn from_triplets(
        n_full: usize,
        triplets: &[(usize, usize, f64)],
        free: &[usize],
        symmetric: bool,
    ) -> Result<OperatorPair> {
        let mut reduced_of = vec![None; n_full];
        for (r, &dof) in free.iter().enumerate() {
            reduced_of[dof] = Some(r);
        }
        let mut full = SparseSystem::new(n_full, n_full, symmetric);
        let mut reduced = SparseSystem::new(free.len(), free.len(), symmetric);
        for &(i, j, v) in triplets {
            full.push(i, j, v);
            if let (Some(ri), Some(rj)) = (reduced_of[i], reduced_of[j]) {
                reduced.push(ri, rj, v);
            }
        }
        full.finalize()?;
        reduced.finalize()?;
        Ok(OperatorPair {
            full,
            reduced,
            free: free.to_vec(),
            reduced_of,
        })
    }

    /// Restrict a full right-hand side to free DOFs, folding Dirichlet data
    /// in through the lift: `b_I = rhs_I − (A·x_D)_I` where `x_D` carries the
    /// prescribed values at constrained DOFs and zeros elsewhere.
    pub fn reduce_rhs(&self, full_rhs: &[f64], dirichlet: &[f64]) -> Vec<f64> {
        assert_eq!(full_rhs.len(), self.full.n_rows());
        assert_eq!(dirichlet.len(), self.full.n_rows());
        let mut lifted = full_rhs.to_vec();
        self.full.matvec_acc(dirichlet, &mut lifted, -1.0);
        self.free.iter().map(|&dof| lifted[dof]).collect()
    }

    /// Merge an interior solution with the Dirichlet values into a full
    /// coefficient vector.
    pub fn expand_solution(&self, interior: &[f64], dirichlet: &[f64]) -> Vec<f64> {
        assert_eq!(interior.len(), self.free.len());
        let mut full = dirichlet.to_vec();
        for (r, &dof) in self.free.iter().enumerate() {
            full[dof] = interior[r];
        }
        full
    }

    /// Max-norm residual `‖(A x − b)_I‖_∞` of the full system over free rows,
    /// for a full-length candidate solution (Dirichlet slots filled with
    /// their prescribed values).
    pub fn residual_at(&self, x_full: &[f64], full_rhs: &[f64]) -> f64 {
        let mut r = full_rhs.to_vec();
        self.full.matvec_acc(x_full, &mut r, -1.0);
        self.free
            .iter()
            .map(|&dof| r[dof].abs())
            .fold(0.0, f64::max)
    }

    /// Reduced index of a full DOF, if it is free.
    pub fn reduced_index(&self, full_dof: usize) -> Option<usize> {
        self.reduced_of[full_dof]
    }
}

/// Fluid-side interface segments as (segment index, vertex pair, x-range).
fn fluid_interface_segments(mesh: &CoupledMesh) -> Vec<([usize; 2], [f64; 2])> {
    let iface = &mesh.interface;
    (0..iface.n_segments())
        .map(|s| {
            (
                [iface.fluid_nodes[s], iface.fluid_nodes[s + 1]],
                [iface.xs[s], iface.xs[s + 1]],
            )
        })
        .collect()
}

/// Assemble the shared Stokes operator: `a_f(u,v) + b_f(v,p) + b_f(u,q) +
/// γ_f⟨u·n_f, v·n_f⟩_Γ + ⟨η̄ u·τ, v·τ⟩_Γ` with `a_f = 2ν(D(u),D(v))` and
/// `b_f(v,q) = −(∇·v, q)`, over the packed Stokes DOFs. `eta_bar` is the
/// ensemble-mean friction coefficient as a function of `x` on the interface.
pub fn assemble_stokes_operator(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    nu: f64,
    gamma_f: f64,
    eta_bar: &dyn Fn(f64) -> f64,
) -> Result<OperatorPair> {
    if !(nu > 0.0) || !(gamma_f > 0.0) {
        return Err(Error::InvalidInput(format!(
            "viscosity and Robin parameter must be positive (ν={nu}, γ_f={gamma_f})"
        )));
    }
    let triplets = stokes_triplets(mesh, spaces, nu, gamma_f, eta_bar)?;
    OperatorPair::from_triplets(spaces.stokes_dim(), &triplets, &spaces.stokes_free, true)
}

/// Raw Galerkin triplets of the Stokes form. `gamma_f = 0` drops the normal
/// Robin term, which is how the monolithic coupled reference assembles its
/// fluid block.
pub(crate) fn stokes_triplets(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    nu: f64,
    gamma_f: f64,
    eta_bar: &dyn Fn(f64) -> f64,
) -> Result<Vec<(usize, usize, f64)>> {
    let quad = quadrature_degree5();
    let fluid = &mesh.fluid;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();

    for t in 0..fluid.triangles.len() {
        let (grads, area) = p1_gradients(fluid, t);
        let [v0, v1, v2] = fluid.triangles[t];
        // Scalar shape functions 0..3 = hats at v0,v1,v2 + bubble; their
        // velocity DOFs per component.
        let dof = |s: usize, comp: usize| -> usize {
            match (s, comp) {
                (3, 0) => spaces.bubble1(t),
                (3, 1) => spaces.bubble2(t),
                (_, 0) => spaces.u1([v0, v1, v2][s]),
                (_, 1) => spaces.u2([v0, v1, v2][s]),
                _ => unreachable!(),
            }
        };
        let pdof = [
            spaces.pressure(v0),
            spaces.pressure(v1),
            spaces.pressure(v2),
        ];

        // Element blocks: 8×8 velocity (4 shapes × 2 components) and 8×3
        // velocity-pressure.
        let mut a_el = [[0.0f64; 8]; 8];
        let mut b_el = [[0.0f64; 3]; 8];
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let (vals, g) = mini_shapes(*l, &grads);
            for sa in 0..4 {
                for alpha in 0..2 {
                    let row = 2 * sa + alpha;
                    for sb in 0..4 {
                        for beta in 0..2 {
                            // 2ν D(φ_b e_β) : D(φ_a e_α) = ν (δ_αβ ∇φ_a·∇φ_b
                            //   + ∂_β φ_a ∂_α φ_b)
                            let mut val = g[sa][beta] * g[sb][alpha];
                            if alpha == beta {
                                val += g[sa][0] * g[sb][0] + g[sa][1] * g[sb][1];
                            }
                            a_el[row][2 * sb + beta] += w * nu * val;
                        }
                    }
                    // b_f(v, q) = −(∇·v, q): row = velocity test, col = pressure.
                    for pb in 0..3 {
                        b_el[row][pb] -= w * g[sa][alpha] * vals[pb];
                    }
                }
            }
        }
        for sa in 0..4 {
            for alpha in 0..2 {
                let ra = dof(sa, alpha);
                for sb in 0..4 {
                    for beta in 0..2 {
                        let v = a_el[2 * sa + alpha][2 * sb + beta];
                        if v != 0.0 {
                            triplets.push((ra, dof(sb, beta), v));
                        }
                    }
                }
                for pb in 0..3 {
                    let v = b_el[2 * sa + alpha][pb];
                    if v != 0.0 {
                        // Momentum row and its symmetric continuity partner.
                        triplets.push((ra, pdof[pb], v));
                        triplets.push((pdof[pb], ra, v));
                    }
                }
            }
        }
    }

    // Interface terms: γ_f⟨u·n_f, v·n_f⟩ couples u2–u2 ((−u2)(−v2) = u2 v2),
    // ⟨η̄ u·τ, v·τ⟩ couples u1–u1. Only vertex DOFs appear (bubbles vanish
    // on edges).
    for ([va, vb], [xa, xb]) in fluid_interface_segments(mesh) {
        let len = xb - xa;
        let mut m = [[0.0f64; 2]; 2];
        let mut me = [[0.0f64; 2]; 2];
        for (q, &t) in quad.seg_t.iter().enumerate() {
            let w = quad.seg_w[q] * len;
            let eta = eta_bar(xa + t * (xb - xa));
            if !(eta > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "interface friction coefficient must be positive (η̄ = {eta})"
                )));
            }
            let phi = [1.0 - t, t];
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] += w * phi[i] * phi[j];
                    me[i][j] += w * eta * phi[i] * phi[j];
                }
            }
        }
        let vs = [va, vb];
        for i in 0..2 {
            for j in 0..2 {
                triplets.push((spaces.u2(vs[i]), spaces.u2(vs[j]), gamma_f * m[i][j]));
                triplets.push((spaces.u1(vs[i]), spaces.u1(vs[j]), me[i][j]));
            }
        }
    }

    Ok(triplets)
}

/// Assemble the shared Darcy operator `γ_p(K̄∇φ, ∇ψ) + g⟨φ, ψ⟩_Γ` on the
/// porous mesh. Symmetric positive definite after Dirichlet reduction.
pub fn assemble_darcy_operator(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    gamma_p: f64,
    kbar: &ConductivitySample,
    g: f64,
) -> Result<OperatorPair> {
    if !(gamma_p > 0.0) {
        return Err(Error::InvalidInput(format!(
            "Robin parameter must be positive (γ_p = {gamma_p})"
        )));
    }
    if g < 0.0 {
        return Err(Error::InvalidInput(format!(
            "gravity must be nonnegative (g = {g})"
        )));
    }
    let triplets = darcy_triplets(mesh, gamma_p, kbar, g)?;
    OperatorPair::from_triplets(spaces.head_dim(), &triplets, &spaces.head_free, true)
}

/// Raw Galerkin triplets of the Darcy form. `g = 0` drops the interface mass
/// term (the monolithic coupled reference scales this block by the
/// gravitational constant instead of adding the Robin mass).
pub(crate) fn darcy_triplets(
    mesh: &CoupledMesh,
    gamma_p: f64,
    kbar: &ConductivitySample,
    g: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    let quad = quadrature_degree5();
    let porous = &mesh.porous;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();

    for t in 0..porous.triangles.len() {
        let (grads, area) = p1_gradients(porous, t);
        let verts = porous.triangles[t];
        let mut k_el = [[0.0f64; 3]; 3];
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let pt = bary_point(porous, t, *l);
            let (k11, k22) = (kbar.k11(pt), kbar.k22(pt));
            if !(k11 > 0.0) || !(k22 > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "conductivity must be positive definite (k11={k11}, k22={k22} at {pt:?})"
                )));
            }
            for i in 0..3 {
                for j in 0..3 {
                    k_el[i][j] += w
                        * gamma_p
                        * (k11 * grads[i][0] * grads[j][0] + k22 * grads[i][1] * grads[j][1]);
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if k_el[i][j] != 0.0 {
                    triplets.push((verts[i], verts[j], k_el[i][j]));
                }
            }
        }
    }

    // Interface mass term g⟨φ, ψ⟩ on the porous side of Γ.
    if g > 0.0 {
        let iface = &mesh.interface;
        for s in 0..iface.n_segments() {
            let (va, vb) = (iface.porous_nodes[s], iface.porous_nodes[s + 1]);
            let len = iface.segment_length(s);
            let vs = [va, vb];
            for (q, &t) in quad.seg_t.iter().enumerate() {
                let w = quad.seg_w[q] * len * g;
                let phi = [1.0 - t, t];
                for i in 0..2 {
                    for j in 0..2 {
                        triplets.push((vs[i], vs[j], w * phi[i] * phi[j]));
                    }
                }
            }
        }
    }

    Ok(triplets)
}

/// Assemble the Stokes load vector for one sample:
/// `(f_j, v) − ⟨(η_j − η̄) u_prev·τ, v·τ⟩ + ⟨δ_f, v·n_f⟩`, over packed
/// Stokes DOFs (continuity rows are zero).
pub fn assemble_stokes_rhs(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    f: &dyn Fn([f64; 2]) -> [f64; 2],
    delta_f: &TraceField,
    u_prev: &FieldVector,
    eta_j: &dyn Fn(f64) -> f64,
    eta_bar: &dyn Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    spaces.check(u_prev, FieldKind::Velocity)?;
    if delta_f.values.len() != mesh.interface.n_nodes() {
        return Err(Error::InvalidInput(format!(
            "trace length {} does not match interface ({} nodes)",
            delta_f.values.len(),
            mesh.interface.n_nodes()
        )));
    }
    let quad = quadrature_degree5();
    let fluid = &mesh.fluid;
    let mut rhs = vec![0.0; spaces.stokes_dim()];

    // Body force (f_j, v).
    for t in 0..fluid.triangles.len() {
        let (grads, area) = p1_gradients(fluid, t);
        let [v0, v1, v2] = fluid.triangles[t];
        let vdofs = [
            [spaces.u1(v0), spaces.u1(v1), spaces.u1(v2), spaces.bubble1(t)],
            [spaces.u2(v0), spaces.u2(v1), spaces.u2(v2), spaces.bubble2(t)],
        ];
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let pt = bary_point(fluid, t, *l);
            let fv = f(pt);
            let (vals, _) = mini_shapes(*l, &grads);
            for s in 0..4 {
                rhs[vdofs[0][s]] += w * fv[0] * vals[s];
                rhs[vdofs[1][s]] += w * fv[1] * vals[s];
            }
        }
    }

    // Interface terms. u_prev·τ on Γ is the P1 trace of u1 (bubbles vanish).
    for (s, ([va, vb], [xa, xb])) in fluid_interface_segments(mesh).into_iter().enumerate() {
        let len = xb - xa;
        let u1a = u_prev.values[spaces.u1(va)];
        let u1b = u_prev.values[spaces.u1(vb)];
        for (q, &t) in quad.seg_t.iter().enumerate() {
            let w = quad.seg_w[q] * len;
            let x = xa + t * (xb - xa);
            let phi = [1.0 - t, t];
            let deta = eta_j(x) - eta_bar(x);
            let u_tau = (1.0 - t) * u1a + t * u1b;
            let df = delta_f.eval_on_segment(s, t);
            for (i, &v) in [va, vb].iter().enumerate() {
                // −⟨(η_j−η̄) u_prev·τ, v·τ⟩ acts on u1; ⟨δ_f, v·n_f⟩ acts on
                // u2 with v·n_f = −v2.
                rhs[spaces.u1(v)] -= w * deta * u_tau * phi[i];
                rhs[spaces.u2(v)] -= w * df * phi[i];
            }
        }
    }
    Ok(rhs)
}

/// Assemble the Darcy load vector for one sample:
/// `γ_p(f_p, ψ) + ⟨δ_p, ψ⟩ − γ_p((K_j − K̄)∇φ_prev, ∇ψ)`.
///
/// The iteration in the source papers is stated with a zero Darcy source;
/// the `γ_p` scaling of `f_p` follows from multiplying the subproblem by
/// `γ_p` like every other term.
pub fn assemble_darcy_rhs(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    f_p: &dyn Fn([f64; 2]) -> f64,
    delta_p: &TraceField,
    phi_prev: &FieldVector,
    k_j: &ConductivitySample,
    kbar: &ConductivitySample,
    gamma_p: f64,
) -> Result<Vec<f64>> {
    spaces.check(phi_prev, FieldKind::Head)?;
    if delta_p.values.len() != mesh.interface.n_nodes() {
        return Err(Error::InvalidInput(format!(
            "trace length {} does not match interface ({} nodes)",
            delta_p.values.len(),
            mesh.interface.n_nodes()
        )));
    }
    let quad = quadrature_degree5();
    let porous = &mesh.porous;
    let mut rhs = vec![0.0; spaces.head_dim()];

    for t in 0..porous.triangles.len() {
        let (grads, area) = p1_gradients(porous, t);
        let verts = porous.triangles[t];
        // ∇φ_prev is constant on the triangle.
        let mut gphi = [0.0, 0.0];
        for (i, &v) in verts.iter().enumerate() {
            gphi[0] += phi_prev.values[v] * grads[i][0];
            gphi[1] += phi_prev.values[v] * grads[i][1];
        }
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let pt = bary_point(porous, t, *l);
            let src = gamma_p * f_p(pt);
            let dk11 = k_j.k11(pt) - kbar.k11(pt);
            let dk22 = k_j.k22(pt) - kbar.k22(pt);
            for (i, &v) in verts.iter().enumerate() {
                rhs[v] += w * src * l[i];
                rhs[v] -=
                    w * gamma_p * (dk11 * gphi[0] * grads[i][0] + dk22 * gphi[1] * grads[i][1]);
            }
        }
    }

    // Robin datum ⟨δ_p, ψ⟩ on the porous interface.
    let iface = &mesh.interface;
    for s in 0..iface.n_segments() {
        let (va, vb) = (iface.porous_nodes[s], iface.porous_nodes[s + 1]);
        let len = iface.segment_length(s);
        for (q, &t) in quad.seg_t.iter().enumerate() {
            let w = quad.seg_w[q] * len;
            let dp = delta_p.eval_on_segment(s, t);
            rhs[va] += w * dp * (1.0 - t);
            rhs[vb] += w * dp * t;
        }
    }
    Ok(rhs)
}

/// Full-length packed Stokes vector carrying prescribed velocity values at
/// Dirichlet-constrained DOFs (zeros elsewhere, including pressure).
pub fn stokes_dirichlet_values(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    g: &dyn Fn([f64; 2]) -> [f64; 2],
) -> Vec<f64> {
    let mut x = vec![0.0; spaces.stokes_dim()];
    for (v, &constrained) in spaces.fluid_dirichlet.iter().enumerate() {
        if constrained {
            let gv = g(mesh.fluid.vertices[v]);
            x[spaces.u1(v)] = gv[0];
            x[spaces.u2(v)] = gv[1];
        }
    }
    x
}

/// Full-length head vector with prescribed values at Dirichlet DOFs.
pub fn head_dirichlet_values(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    g: &dyn Fn([f64; 2]) -> f64,
) -> Vec<f64> {
    let mut x = vec![0.0; spaces.head_dim()];
    for (v, &constrained) in spaces.porous_dirichlet.iter().enumerate() {
        if constrained {
            x[v] = g(mesh.porous.vertices[v]);
        }
    }
    x
}

/// Nodal values of `u·n_f = −u2` on the interface (exact: the velocity trace
/// is P1). Endpoints are zeroed to stay in the discrete trace space.
pub fn normal_trace(mesh: &CoupledMesh, spaces: &FeSpaces, u: &FieldVector) -> Result<TraceField> {
    spaces.check(u, FieldKind::Velocity)?;
    let values: Vec<f64> = mesh
        .interface
        .fluid_nodes
        .iter()
        .map(|&v| -u.values[spaces.u2(v)])
        .collect();
    Ok(TraceField::from_values(values, TraceKind::NormalVelocity))
}

/// Nodal values of the head `φ` on the interface, endpoints zeroed.
pub fn head_trace(mesh: &CoupledMesh, spaces: &FeSpaces, phi: &FieldVector) -> Result<TraceField> {
    spaces.check(phi, FieldKind::Head)?;
    let values: Vec<f64> = mesh
        .interface
        .porous_nodes
        .iter()
        .map(|&v| phi.values[v])
        .collect();
    Ok(TraceField::from_values(values, TraceKind::Head))
}

/// Absolute and relative L2/H1 errors of a field against an exact solution.
/// Relative values are `None` when the exact norm vanishes.
#[derive(Debug, Clone, Copy)]
pub struct ErrorNorms {
    pub l2_abs: f64,
    pub h1_abs: f64,
    pub l2_rel: Option<f64>,
    pub h1_rel: Option<f64>,
}

fn finish_norms(err_l2: f64, err_h1: f64, exact_l2: f64, exact_h1: f64) -> ErrorNorms {
    let (el2, eh1) = (err_l2.sqrt(), err_h1.sqrt());
    let (xl2, xh1) = (exact_l2.sqrt(), exact_h1.sqrt());
    let rel = |e: f64, x: f64| if x > 1e-300 { Some(e / x) } else { None };
    ErrorNorms {
        l2_abs: el2,
        h1_abs: eh1,
        l2_rel: rel(el2, xl2),
        h1_rel: rel(eh1, xh1),
    }
}

/// Errors of a MINI velocity field against an exact vector field with known
/// gradient. The H1 norm is the full norm `(‖·‖_0² + |·|_1²)^{1/2}` and the
/// relative H1 uses the full norm of the exact field.
pub fn velocity_error(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    u: &FieldVector,
    exact: &dyn Fn([f64; 2]) -> [f64; 2],
    exact_grad: &dyn Fn([f64; 2]) -> [[f64; 2]; 2],
) -> Result<ErrorNorms> {
    spaces.check(u, FieldKind::Velocity)?;
    let quad = quadrature_degree5();
    let fluid = &mesh.fluid;
    let (mut err_l2, mut err_h1, mut ex_l2, mut ex_h1) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..fluid.triangles.len() {
        let (grads, area) = p1_gradients(fluid, t);
        let [v0, v1, v2] = fluid.triangles[t];
        let coef = [
            [
                u.values[spaces.u1(v0)],
                u.values[spaces.u1(v1)],
                u.values[spaces.u1(v2)],
                u.values[spaces.bubble1(t)],
            ],
            [
                u.values[spaces.u2(v0)],
                u.values[spaces.u2(v1)],
                u.values[spaces.u2(v2)],
                u.values[spaces.bubble2(t)],
            ],
        ];
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let pt = bary_point(fluid, t, *l);
            let (vals, g) = mini_shapes(*l, &grads);
            let ex = exact(pt);
            let exg = exact_grad(pt);
            for comp in 0..2 {
                let mut uh = 0.0;
                let mut guh = [0.0, 0.0];
                for s in 0..4 {
                    uh += coef[comp][s] * vals[s];
                    guh[0] += coef[comp][s] * g[s][0];
                    guh[1] += coef[comp][s] * g[s][1];
                }
                let d = uh - ex[comp];
                err_l2 += w * d * d;
                ex_l2 += w * ex[comp] * ex[comp];
                for k in 0..2 {
                    let dg = guh[k] - exg[comp][k];
                    err_h1 += w * dg * dg;
                    ex_h1 += w * exg[comp][k] * exg[comp][k];
                }
            }
        }
    }
    Ok(finish_norms(
        err_l2,
        err_l2 + err_h1,
        ex_l2,
        ex_l2 + ex_h1,
    ))
}

/// Errors of a P1 scalar field (pressure or head) on `mesh` against an exact
/// function. Pass `exact_grad: None` to skip the H1 seminorm (pressure
/// errors in the experiment tables are L2 only).
pub fn scalar_error(
    mesh: &TriMesh,
    field: &[f64],
    exact: &dyn Fn([f64; 2]) -> f64,
    exact_grad: Option<&dyn Fn([f64; 2]) -> [f64; 2]>,
) -> Result<ErrorNorms> {
    if field.len() != mesh.vertices.len() {
        return Err(Error::InvalidInput(format!(
            "scalar field has {} values for {} vertices",
            field.len(),
            mesh.vertices.len()
        )));
    }
    let quad = quadrature_degree5();
    let (mut err_l2, mut err_h1, mut ex_l2, mut ex_h1) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..mesh.triangles.len() {
        let (grads, area) = p1_gradients(mesh, t);
        let verts = mesh.triangles[t];
        let mut gh = [0.0, 0.0];
        for (i, &v) in verts.iter().enumerate() {
            gh[0] += field[v] * grads[i][0];
            gh[1] += field[v] * grads[i][1];
        }
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let pt = bary_point(mesh, t, *l);
            let fh = l[0] * field[verts[0]] + l[1] * field[verts[1]] + l[2] * field[verts[2]];
            let ex = exact(pt);
            let d = fh - ex;
            err_l2 += w * d * d;
            ex_l2 += w * ex * ex;
            if let Some(gex) = exact_grad {
                let ge = gex(pt);
                for k in 0..2 {
                    let dg = gh[k] - ge[k];
                    err_h1 += w * dg * dg;
                    ex_h1 += w * ge[k] * ge[k];
                }
            }
        }
    }
    Ok(finish_norms(
        err_l2,
        err_l2 + err_h1,
        ex_l2,
        ex_l2 + ex_h1,
    ))
}

/// Vertex interpolant of a vector field into the velocity space (bubble
/// coefficients zero).
pub fn interpolate_velocity(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    f: &dyn Fn([f64; 2]) -> [f64; 2],
) -> FieldVector {
    let mut u = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
    for (v, p) in mesh.fluid.vertices.iter().enumerate() {
        let fv = f(*p);
        u.values[spaces.u1(v)] = fv[0];
        u.values[spaces.u2(v)] = fv[1];
    }
    u
}

/// Vertex interpolant of a scalar field as P1 values on a mesh.
pub fn interpolate_scalar(mesh: &TriMesh, f: &dyn Fn([f64; 2]) -> f64) -> Vec<f64> {
    mesh.vertices.iter().map(|p| f(*p)).collect()
}

/// Pointwise interface mass-conservation mismatch `|u·n_f − K_j∇φ·n_p|` at
/// the interface quadrature points (three per segment, ascending x). The
/// head gradient is taken from the porous element adjacent to each segment.
pub fn interface_flux_mismatch(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    u: &FieldVector,
    phi: &FieldVector,
    k_j: &ConductivitySample,
) -> Result<Vec<f64>> {
    spaces.check(u, FieldKind::Velocity)?;
    spaces.check(phi, FieldKind::Head)?;
    let quad = quadrature_degree5();
    let iface = &mesh.interface;
    let mut out = Vec::with_capacity(3 * iface.n_segments());
    for s in 0..iface.n_segments() {
        let (fa, fb) = (iface.fluid_nodes[s], iface.fluid_nodes[s + 1]);
        let tp = iface.porous_tri[s];
        let (grads, _) = p1_gradients(&mesh.porous, tp);
        let verts = mesh.porous.triangles[tp];
        let mut gphi = [0.0, 0.0];
        for (i, &v) in verts.iter().enumerate() {
            gphi[0] += phi.values[v] * grads[i][0];
            gphi[1] += phi.values[v] * grads[i][1];
        }
        let (xa, xb) = (iface.xs[s], iface.xs[s + 1]);
        for &t in &quad.seg_t {
            let x = xa + t * (xb - xa);
            // u·n_f = −u2 (P1 trace); K∇φ·n_p = k22 ∂_y φ at y = 0.
            let un = -((1.0 - t) * u.values[spaces.u2(fa)] + t * u.values[spaces.u2(fb)]);
            let darcy_flux = k_j.k22([x, 0.0]) * gphi[1];
            out.push((un - darcy_flux).abs());
        }
    }
    Ok(out)
}

/// Discrete inf-sup constant of the velocity/pressure pair: the square root
/// of the smallest eigenvalue of `M_p^{-1/2} B A^{-1} Bᵀ M_p^{-1/2}`, where
/// `A` is the velocity block (viscous + interface terms, Dirichlet-reduced),
/// `B` the divergence coupling, and `M_p` the pressure mass matrix. Bounded
/// away from zero uniformly in `h` for an inf-sup stable pair.
pub fn inf_sup_constant(mesh: &CoupledMesh, spaces: &FeSpaces, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!(
            "viscosity must be positive (ν = {nu})"
        )));
    }
    let nvel = spaces.velocity_dim();
    let np = spaces.n_fluid_vertices;
    // Free velocity DOFs and their reduced indices within the velocity block.
    let vel_free: Vec<usize> = spaces
        .stokes_free
        .iter()
        .copied()
        .filter(|&d| d < nvel)
        .collect();
    let mut vel_red = vec![None; nvel];
    for (r, &d) in vel_free.iter().enumerate() {
        vel_red[d] = Some(r);
    }

    // Extract A (velocity–velocity) and B (pressure–velocity) from the full
    // operator's reduced system by probing its CSC structure via matvec is
    // wasteful; instead reassemble element-wise into the two blocks.
    let quad = quadrature_degree5();
    let fluid = &mesh.fluid;
    let mut a_sys = SparseSystem::new(vel_free.len(), vel_free.len(), true);
    let mut b = faer::Mat::<f64>::zeros(np, vel_free.len());
    let mut m_p = faer::Mat::<f64>::zeros(np, np);
    for t in 0..fluid.triangles.len() {
        let (grads, area) = p1_gradients(fluid, t);
        let [v0, v1, v2] = fluid.triangles[t];
        let dof = |s: usize, comp: usize| -> usize {
            match (s, comp) {
                (3, 0) => spaces.bubble1(t),
                (3, 1) => spaces.bubble2(t),
                (_, 0) => spaces.u1([v0, v1, v2][s]),
                (_, 1) => spaces.u2([v0, v1, v2][s]),
                _ => unreachable!(),
            }
        };
        for (q, l) in quad.tri_bary.iter().enumerate() {
            let w = quad.tri_w[q] * area;
            let (vals, g) = mini_shapes(*l, &grads);
            for sa in 0..4 {
                for alpha in 0..2 {
                    let Some(ra) = vel_red[dof(sa, alpha)] else {
                        continue;
                    };
                    for sb in 0..4 {
                        for beta in 0..2 {
                            let Some(cb) = vel_red[dof(sb, beta)] else {
                                continue;
                            };
                            let mut val = g[sa][beta] * g[sb][alpha];
                            if alpha == beta {
                                val += g[sa][0] * g[sb][0] + g[sa][1] * g[sb][1];
                            }
                            a_sys.push(ra, cb, w * nu * val);
                        }
                    }
                    for pb in 0..3 {
                        b[([v0, v1, v2][pb], ra)] -= w * g[sa][alpha] * vals[pb];
                    }
                }
            }
            for pa in 0..3 {
                for pb in 0..3 {
                    m_p[([v0, v1, v2][pa], [v0, v1, v2][pb])] += w * vals[pa] * vals[pb];
                }
            }
        }
    }
    // Interface contributions to A (they are part of the velocity norm the
    // operator induces; they only strengthen coercivity).
    for ([va, vb], [xa, xb]) in fluid_interface_segments(mesh) {
        let len = xb - xa;
        let vs = [va, vb];
        for (q, &t) in quad.seg_t.iter().enumerate() {
            let w = quad.seg_w[q] * len;
            let phi = [1.0 - t, t];
            for i in 0..2 {
                for j in 0..2 {
                    let (r1, c1) = (vel_red[spaces.u1(vs[i])], vel_red[spaces.u1(vs[j])]);
                    if let (Some(r), Some(c)) = (r1, c1) {
                        a_sys.push(r, c, w * phi[i] * phi[j]);
                    }
                    let (r2, c2) = (vel_red[spaces.u2(vs[i])], vel_red[spaces.u2(vs[j])]);
                    if let (Some(r), Some(c)) = (r2, c2) {
                        a_sys.push(r, c, w * phi[i] * phi[j]);
                    }
                }
            }
        }
    }
    a_sys.finalize()?;
    let a_fact = crate::linalg::factorize_spd(&a_sys)?;
    // X = A^{-1} Bᵀ, S = B X (np × np), then the generalized eigenvalues of
    // S q = λ M_p q via the Cholesky congruence of M_p.
    let bt = b.transpose().to_owned();
    let x = crate::linalg::solve_many(&a_fact, &bt)?;
    let s = &b * &x;

    // Dense Cholesky of the pressure mass matrix (small: one DOF per fluid
    // vertex), then C = L⁻¹ S L⁻ᵀ by two forward substitutions. Hand-rolled
    // so the congruence transform is explicit.
    let n = np;
    let mut lfac = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m_p[(i, j)];
            for k in 0..j {
                sum -= lfac[i * n + k] * lfac[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Singular(
                        "pressure mass matrix is not positive definite".into(),
                    ));
                }
                lfac[i * n + i] = sum.sqrt();
            } else {
                lfac[i * n + j] = sum / lfac[j * n + j];
            }
        }
    }
    let forward_solve = |w: &mut faer::Mat<f64>| {
        for col in 0..n {
            for i in 0..n {
                let mut sum = w[(i, col)];
                for k in 0..i {
                    sum -= lfac[i * n + k] * w[(k, col)];
                }
                w[(i, col)] = sum / lfac[i * n + i];
            }
        }
    };
    // W = L⁻¹ S, then C = (L⁻¹ Wᵀ)ᵀ = L⁻¹ S L⁻ᵀ (symmetric since S is).
    let mut w = s;
    forward_solve(&mut w);
    let mut c = w.transpose().to_owned();
    forward_solve(&mut c);

    let eigs = c
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Singular(format!("eigenvalue computation failed: {e:?}")))?;
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::Singular(format!(
            "divergence coupling has nonpositive smallest eigenvalue {min}"
        )));
    }
    Ok(min.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::factorize_spd;
    use crate::mesh::{build_coupled_meshes, build_rect_mesh, InterfaceMap};

    /// Unit-square coupled fixture: one cell per side, interface on y = 0.
    fn tiny_coupled() -> CoupledMesh {
        let fluid = build_rect_mesh([0.0, 1.0], [0.0, 1.0], 1, 1).unwrap();
        let porous = build_rect_mesh([0.0, 1.0], [-1.0, 0.0], 1, 1).unwrap();
        let interface = InterfaceMap::build(&fluid, &porous).unwrap();
        CoupledMesh {
            fluid,
            porous,
            interface,
            h_nominal: 1.0,
        }
    }

    fn dense_of(sys: &SparseSystem) -> Vec<Vec<f64>> {
        let (nr, nc) = (sys.n_rows(), sys.n_cols());
        let mut a = vec![vec![0.0; nc]; nr];
        let mut e = vec![0.0; nc];
        for j in 0..nc {
            e[j] = 1.0;
            let mut col = vec![0.0; nr];
            sys.matvec_acc(&e, &mut col, 1.0);
            for i in 0..nr {
                a[i][j] = col[i];
            }
            e[j] = 0.0;
        }
        a
    }

    /// 12-point Gauss–Legendre nodes/weights on [0, 1].
    fn gauss12() -> (Vec<f64>, Vec<f64>) {
        let x = [
            0.981560634246719f64,
            0.904117256370475,
            0.769902674194305,
            0.587317954286617,
            0.367831498998180,
            0.125233408511469,
        ];
        let w = [
            0.047175336386512f64,
            0.106939325995318,
            0.160078328543346,
            0.203167426723066,
            0.233492536538355,
            0.249147045813403,
        ];
        let mut t = Vec::new();
        let mut wt = Vec::new();
        for k in 0..6 {
            t.push(0.5 * (1.0 - x[k]));
            t.push(0.5 * (1.0 + x[k]));
            wt.push(0.5 * w[k]);
            wt.push(0.5 * w[k]);
        }
        (t, wt)
    }

    /// Independent dense-quadrature assembly of the Stokes operator on the
    /// tiny fixture: Duffy-collapsed 12×12 tensor Gauss per triangle, the
    /// deformation contraction evaluated from first principles
    /// (2ν D(φ_b e_β) : D(φ_a e_α) with explicit symmetric-gradient
    /// matrices), plus analytic interface edge masses.
    fn oracle_stokes_dense(
        mesh: &CoupledMesh,
        spaces: &FeSpaces,
        nu: f64,
        gamma_f: f64,
        eta: f64,
    ) -> Vec<Vec<f64>> {
        let n = spaces.stokes_dim();
        let mut a = vec![vec![0.0; n]; n];
        let (gp, gw) = gauss12();
        let fluid = &mesh.fluid;
        for t in 0..fluid.triangles.len() {
            let [v0, v1, v2] = fluid.triangles[t];
            let (grads, area) = p1_gradients(fluid, t);
            let dof = |s: usize, comp: usize| -> usize {
                match (s, comp) {
                    (3, 0) => spaces.bubble1(t),
                    (3, 1) => spaces.bubble2(t),
                    (_, 0) => spaces.u1([v0, v1, v2][s]),
                    (_, 1) => spaces.u2([v0, v1, v2][s]),
                    _ => unreachable!(),
                }
            };
            let pdof = [
                spaces.pressure(v0),
                spaces.pressure(v1),
                spaces.pressure(v2),
            ];
            for (i, &s) in gp.iter().enumerate() {
                for (j, &tt) in gp.iter().enumerate() {
                    // Duffy collapse of the unit square onto the reference
                    // triangle in barycentric form.
                    let l1 = s * (1.0 - tt);
                    let l2 = tt;
                    let l0 = 1.0 - l1 - l2;
                    let w = gw[i] * gw[j] * (1.0 - tt) * 2.0 * area;
                    let lam = [l0, l1, l2];
                    let mut vals = [lam[0], lam[1], lam[2], 27.0 * l0 * l1 * l2];
                    let mut g = [grads[0], grads[1], grads[2], [0.0, 0.0]];
                    for k in 0..2 {
                        g[3][k] = 27.0
                            * (l1 * l2 * grads[0][k]
                                + l0 * l2 * grads[1][k]
                                + l0 * l1 * grads[2][k]);
                    }
                    vals[3] = 27.0 * l0 * l1 * l2;
                    // Gradient matrix of φ e_α has row α equal to ∇φ.
                    let grad_mat = |sh: usize, comp: usize| -> [[f64; 2]; 2] {
                        let mut m = [[0.0; 2]; 2];
                        m[comp] = g[sh];
                        m
                    };
                    for sa in 0..4 {
                        for alpha in 0..2 {
                            let ra = dof(sa, alpha);
                            let ga = grad_mat(sa, alpha);
                            let da = [
                                [ga[0][0], 0.5 * (ga[0][1] + ga[1][0])],
                                [0.5 * (ga[0][1] + ga[1][0]), ga[1][1]],
                            ];
                            for sb in 0..4 {
                                for beta in 0..2 {
                                    let gb = grad_mat(sb, beta);
                                    let db = [
                                        [gb[0][0], 0.5 * (gb[0][1] + gb[1][0])],
                                        [0.5 * (gb[0][1] + gb[1][0]), gb[1][1]],
                                    ];
                                    let mut contract = 0.0;
                                    for p in 0..2 {
                                        for q in 0..2 {
                                            contract += da[p][q] * db[p][q];
                                        }
                                    }
                                    a[ra][dof(sb, beta)] += w * 2.0 * nu * contract;
                                }
                            }
                            for pb in 0..3 {
                                let val = -w * g[sa][alpha] * vals[pb];
                                a[ra][pdof[pb]] += val;
                                a[pdof[pb]][ra] += val;
                            }
                        }
                    }
                }
            }
        }
        // Interface: exact P1 edge mass [[L/3, L/6], [L/6, L/3]].
        let iface = &mesh.interface;
        for s in 0..iface.n_segments() {
            let (va, vb) = (iface.fluid_nodes[s], iface.fluid_nodes[s + 1]);
            let len = iface.segment_length(s);
            let m = [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]];
            let vs = [va, vb];
            for i in 0..2 {
                for j in 0..2 {
                    a[spaces.u2(vs[i])][spaces.u2(vs[j])] += gamma_f * m[i][j];
                    a[spaces.u1(vs[i])][spaces.u1(vs[j])] += eta * m[i][j];
                }
            }
        }
        a
    }

    #[test]
    fn quadrature_integrates_degree_five_exactly() {
        let quad = quadrature_degree5();
        let wsum: f64 = quad.tri_w.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-15, "triangle weights sum to 1");
        // Reference triangle (0,0),(1,0),(0,1): ∫ x^a y^b = a! b! / (a+b+2)!.
        let fact = |k: usize| -> f64 { (1..=k).map(|v| v as f64).product::<f64>().max(1.0) };
        for a in 0..=5usize {
            for b in 0..=(5 - a) {
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                let mut got = 0.0;
                for (q, l) in quad.tri_bary.iter().enumerate() {
                    // Area of the reference triangle is 1/2.
                    let (x, y) = (l[1], l[2]);
                    got += 0.5 * quad.tri_w[q] * x.powi(a as i32) * y.powi(b as i32);
                }
                assert!(
                    (got - exact).abs() < 1e-15,
                    "x^{a} y^{b}: got {got}, want {exact}"
                );
            }
        }
        for k in 0..=5usize {
            let got: f64 = quad
                .seg_t
                .iter()
                .zip(&quad.seg_w)
                .map(|(&t, &w)| w * t.powi(k as i32))
                .sum();
            let exact = 1.0 / (k as f64 + 1.0);
            assert!((got - exact).abs() < 1e-15, "t^{k}: got {got}, want {exact}");
        }
    }

    #[test]
    fn stokes_operator_matches_dense_quadrature_oracle() {
        let mesh = tiny_coupled();
        let spaces = FeSpaces::build(&mesh);
        let (nu, gamma_f, eta) = (0.7, 1.3, 2.5);
        let op = assemble_stokes_operator(&mesh, &spaces, nu, gamma_f, &|_| eta).unwrap();
        let got = dense_of(&op.full);
        let want = oracle_stokes_dense(&mesh, &spaces, nu, gamma_f, eta);
        let n = spaces.stokes_dim();
        assert_eq!(n, 16);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((got[i][j] - want[i][j]).abs());
            }
        }
        assert!(worst < 1e-12, "max entry deviation {worst}");
    }

    #[test]
    fn stokes_operator_is_symmetric() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let op = assemble_stokes_operator(&mesh, &spaces, 0.5, 2.0, &|x| 1.0 + 0.1 * x).unwrap();
        assert!(op.full.max_symmetry_defect() < 1e-12);
        assert!(op.reduced.max_symmetry_defect() < 1e-12);
    }

    #[test]
    fn tangential_rows_ignore_the_normal_robin_parameter() {
        let mesh = tiny_coupled();
        let spaces = FeSpaces::build(&mesh);
        let a1 = dense_of(
            &assemble_stokes_operator(&mesh, &spaces, 1.0, 1.0, &|_| 1.0)
                .unwrap()
                .full,
        );
        let a2 = dense_of(
            &assemble_stokes_operator(&mesh, &spaces, 1.0, 6.0, &|_| 1.0)
                .unwrap()
                .full,
        );
        let n = spaces.stokes_dim();
        // Interface vertices of the tiny fixture are fluid vertices 0 and 1.
        let (ia, ib) = (0usize, 1usize);
        for i in 0..n {
            for j in 0..n {
                let d = a2[i][j] - a1[i][j];
                let u2_pair = (i == spaces.u2(ia) || i == spaces.u2(ib))
                    && (j == spaces.u2(ia) || j == spaces.u2(ib));
                if u2_pair {
                    continue;
                }
                assert!(
                    d.abs() < 1e-13,
                    "γ_f leaked into entry ({i}, {j}): delta {d}"
                );
            }
        }
        // Normal–normal entries grow by Δγ_f times the exact edge mass L/3.
        let want = 5.0 / 3.0;
        let got = a2[spaces.u2(ia)][spaces.u2(ia)] - a1[spaces.u2(ia)][spaces.u2(ia)];
        assert!((got - want).abs() < 1e-13, "got {got}, want {want}");
    }

    #[test]
    fn darcy_stiffness_annihilates_constants_without_gravity_term() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let k = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        let op = assemble_darcy_operator(&mesh, &spaces, 1.0, &k, 0.0).unwrap();
        let ones = vec![1.0; spaces.head_dim()];
        let mut out = vec![0.0; spaces.head_dim()];
        op.full.matvec_acc(&ones, &mut out, 1.0);
        let worst = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-12, "row-sum defect {worst}");
    }

    #[test]
    fn darcy_operator_is_positive_definite() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let k = ConductivitySample::Constant { k11: 2.0, k22: 0.5 };
        let op = assemble_darcy_operator(&mesh, &spaces, 1.5, &k, 1.0).unwrap();
        assert!(op.reduced.max_symmetry_defect() < 1e-12);
        // Cholesky succeeding certifies positive definiteness; confirm with
        // the spectrum of the dense reduction.
        factorize_spd(&op.reduced).unwrap();
        let dense = dense_of(&op.reduced);
        let n = op.reduced.n_rows();
        let m = faer::Mat::from_fn(n, n, |i, j| dense[i][j]);
        let eigs = m.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "smallest eigenvalue {min}");
    }

    #[test]
    fn doubling_conductivity_doubles_the_diffusion_block() {
        let mesh = tiny_coupled();
        let spaces = FeSpaces::build(&mesh);
        let k1 = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        let k2 = ConductivitySample::Constant { k11: 2.0, k22: 2.0 };
        let s1 = dense_of(&assemble_darcy_operator(&mesh, &spaces, 1.0, &k1, 0.0).unwrap().full);
        let s2 = dense_of(&assemble_darcy_operator(&mesh, &spaces, 1.0, &k2, 0.0).unwrap().full);
        let g1 = dense_of(&assemble_darcy_operator(&mesh, &spaces, 1.0, &k1, 0.8).unwrap().full);
        let g2 = dense_of(&assemble_darcy_operator(&mesh, &spaces, 1.0, &k2, 0.8).unwrap().full);
        let n = spaces.head_dim();
        for i in 0..n {
            for j in 0..n {
                assert!((s2[i][j] - 2.0 * s1[i][j]).abs() < 1e-13);
                // The gravity interface mass is independent of K.
                assert!(((g2[i][j] - s2[i][j]) - (g1[i][j] - s1[i][j])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_data_yields_zero_loads() {
        let mesh = build_coupled_meshes(0.25).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let u0 = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
        let df = TraceField::zeros(mesh.interface.n_nodes(), TraceKind::RobinFluid);
        let rhs = assemble_stokes_rhs(
            &mesh,
            &spaces,
            &|_| [0.0, 0.0],
            &df,
            &u0,
            &|_| 1.0,
            &|_| 1.0,
        )
        .unwrap();
        assert!(rhs.iter().all(|&v| v == 0.0));
        let phi0 = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
        let dp = TraceField::zeros(mesh.interface.n_nodes(), TraceKind::RobinPorous);
        let k = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        let rhs = assemble_darcy_rhs(&mesh, &spaces, &|_| 0.0, &dp, &phi0, &k, &k, 1.0).unwrap();
        assert!(rhs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matched_sample_coefficients_drop_the_ensemble_corrections() {
        let mesh = build_coupled_meshes(0.25).unwrap();
        let spaces = FeSpaces::build(&mesh);
        // Deterministic "random" previous iterates.
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64) - 0.5
        };
        let mut u_prev = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
        for v in u_prev.values.iter_mut() {
            *v = next();
        }
        let df = TraceField::zeros(mesh.interface.n_nodes(), TraceKind::RobinFluid);
        let eta = |x: f64| 1.0 + 0.3 * x;
        let rhs = assemble_stokes_rhs(&mesh, &spaces, &|_| [0.0, 0.0], &df, &u_prev, &eta, &eta)
            .unwrap();
        let worst = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-15, "tangential correction should vanish: {worst}");

        let mut phi_prev = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
        for v in phi_prev.values.iter_mut() {
            *v = next();
        }
        let dp = TraceField::zeros(mesh.interface.n_nodes(), TraceKind::RobinPorous);
        let k = ConductivitySample::Constant { k11: 3.0, k22: 2.0 };
        let rhs =
            assemble_darcy_rhs(&mesh, &spaces, &|_| 0.0, &dp, &phi_prev, &k, &k, 1.7).unwrap();
        let worst = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-15, "conductivity correction should vanish: {worst}");
    }

    #[test]
    fn robin_data_enters_loads_with_interface_signs() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let n = mesh.interface.n_nodes();
        let c = 0.9;
        let df = TraceField::from_values(vec![c; n], TraceKind::RobinFluid);
        let u0 = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
        let rhs = assemble_stokes_rhs(
            &mesh,
            &spaces,
            &|_| [0.0, 0.0],
            &df,
            &u0,
            &|_| 1.0,
            &|_| 1.0,
        )
        .unwrap();
        // An interior interface vertex: full hat integral is one segment
        // length; ⟨δ_f, v·n_f⟩ lands on u2 with a minus sign.
        let mid = n / 2;
        let v = mesh.interface.fluid_nodes[mid];
        let len = mesh.interface.segment_length(mid);
        assert!((rhs[spaces.u2(v)] - (-c * len)).abs() < 1e-13);
        assert_eq!(rhs[spaces.u1(v)], 0.0);

        let dp = TraceField::from_values(vec![c; n], TraceKind::RobinPorous);
        let phi0 = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
        let k = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        let rhs = assemble_darcy_rhs(&mesh, &spaces, &|_| 0.0, &dp, &phi0, &k, &k, 1.0).unwrap();
        let vp = mesh.interface.porous_nodes[mid];
        assert!((rhs[vp] - c * len).abs() < 1e-13);
    }

    #[test]
    fn linear_head_patch_test_is_exact() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let (gamma_p, g, slope) = (1.7, 2.0, 0.5);
        let k = ConductivitySample::Constant { k11: 2.0, k22: 3.0 };
        // φ*(x, y) = a + b·y with a chosen so the consistent Robin datum
        // δ_p = γ_p k22 b + g a vanishes identically; then the discrete
        // trace-space endpoint convention is harmless and the interpolant is
        // the exact discrete solution.
        let a0 = -gamma_p * 3.0 * slope / g;
        let exact = move |p: [f64; 2]| a0 + slope * p[1];

        let op = assemble_darcy_operator(&mesh, &spaces, gamma_p, &k, g).unwrap();
        let dp = TraceField::zeros(mesh.interface.n_nodes(), TraceKind::RobinPorous);
        let phi0 = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
        let rhs = assemble_darcy_rhs(&mesh, &spaces, &|_| 0.0, &dp, &phi0, &k, &k, gamma_p).unwrap();
        let dirichlet = head_dirichlet_values(&mesh, &spaces, &exact);
        let reduced_rhs = op.reduce_rhs(&rhs, &dirichlet);
        let fact = factorize_spd(&op.reduced).unwrap();
        let interior = crate::linalg::solve_one(&fact, &reduced_rhs).unwrap();
        let phi = op.expand_solution(&interior, &dirichlet);

        let mut worst = 0.0f64;
        for (v, p) in mesh.porous.vertices.iter().enumerate() {
            worst = worst.max((phi[v] - exact(*p)).abs());
        }
        assert!(worst < 1e-10, "patch test defect {worst}");
        assert!(op.residual_at(&phi, &rhs) < 1e-10);
    }

    #[test]
    fn traces_extract_nodal_interface_values() {
        let mesh = build_coupled_meshes(0.125).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let u0 = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
        let tr = normal_trace(&mesh, &spaces, &u0).unwrap();
        assert!(tr.values.iter().all(|&v| v == 0.0));

        let c = 2.0;
        let uc = interpolate_velocity(&mesh, &spaces, &|_| [0.0, c]);
        let tr = normal_trace(&mesh, &spaces, &uc).unwrap();
        let n = tr.values.len();
        assert_eq!(tr.values[0], 0.0);
        assert_eq!(tr.values[n - 1], 0.0);
        for &v in &tr.values[1..n - 1] {
            assert!((v - (-c)).abs() < 1e-15);
        }

        // Manufactured velocity with constant conductivity: u·n_f on y = 0
        // is 2 k22 sin x.
        let (k11, k22) = (2.21, 2.21);
        let uman = interpolate_velocity(&mesh, &spaces, &|p| {
            let (x, y) = (p[0], p[1]);
            [
                k11 / std::f64::consts::PI * (2.0 * std::f64::consts::PI * y).sin() * x.cos(),
                (-2.0 * k22
                    + k22 / (std::f64::consts::PI * std::f64::consts::PI)
                        * (std::f64::consts::PI * y).sin().powi(2))
                    * x.sin(),
            ]
        });
        let tr = normal_trace(&mesh, &spaces, &uman).unwrap();
        for (i, &x) in mesh.interface.xs.iter().enumerate() {
            if i == 0 || i + 1 == mesh.interface.n_nodes() {
                continue;
            }
            assert!((tr.values[i] - 2.0 * k22 * x.sin()).abs() < 1e-13);
        }

        // The manufactured head vanishes on the interface.
        let phiman = interpolate_scalar(&mesh.porous, &|p| (p[1].exp() - (-p[1]).exp()) * p[0].sin());
        let phif = FieldVector {
            kind: FieldKind::Head,
            values: phiman,
        };
        let tr = head_trace(&mesh, &spaces, &phif).unwrap();
        assert!(tr.values.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn p1_interpolation_error_quarters_under_refinement() {
        let coarse = build_coupled_meshes(0.125).unwrap();
        let fine = build_coupled_meshes(0.0625).unwrap();
        let f = |p: [f64; 2]| p[0].sin() * (std::f64::consts::PI * p[1]).sin();
        let ec = scalar_error(
            &coarse.fluid,
            &interpolate_scalar(&coarse.fluid, &f),
            &f,
            None,
        )
        .unwrap();
        let ef = scalar_error(&fine.fluid, &interpolate_scalar(&fine.fluid, &f), &f, None).unwrap();
        let ratio = ec.l2_abs / ef.l2_abs;
        assert!(
            (3.6..=4.4).contains(&ratio),
            "L2 interpolation ratio {ratio}"
        );
    }

    #[test]
    fn error_norms_vanish_for_reproduced_linear_fields() {
        let mesh = build_coupled_meshes(0.25).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let exact = |p: [f64; 2]| [1.0 + 2.0 * p[0] + 3.0 * p[1], 4.0 + 5.0 * p[0] - 6.0 * p[1]];
        let grad = |_: [f64; 2]| [[2.0, 3.0], [5.0, -6.0]];
        let u = interpolate_velocity(&mesh, &spaces, &exact);
        let e = velocity_error(&mesh, &spaces, &u, &exact, &grad).unwrap();
        assert!(e.l2_abs < 1e-13 && e.h1_abs < 1e-12);
        assert!(e.l2_rel.unwrap() < 1e-13);
    }

    #[test]
    fn flux_mismatch_flags_only_incompatible_pairs() {
        let mesh = build_coupled_meshes(0.25).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let k = ConductivitySample::Constant { k11: 1.0, k22: 2.0 };
        let u0 = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
        let phi0 = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
        let mm = interface_flux_mismatch(&mesh, &spaces, &u0, &phi0, &k).unwrap();
        assert!(mm.iter().all(|&v| v == 0.0));

        // Compatible pair: u = (0, −c), φ = (c / k22) y.
        let c = 1.4;
        let u = interpolate_velocity(&mesh, &spaces, &|_| [0.0, -c]);
        let phi = FieldVector {
            kind: FieldKind::Head,
            values: interpolate_scalar(&mesh.porous, &|p| c / 2.0 * p[1]),
        };
        let mm = interface_flux_mismatch(&mesh, &spaces, &u, &phi, &k).unwrap();
        assert!(mm.iter().all(|&v| v.abs() < 1e-13));

        // Incompatible: zero velocity against unit vertical head gradient.
        let phi = FieldVector {
            kind: FieldKind::Head,
            values: interpolate_scalar(&mesh.porous, &|p| p[1]),
        };
        let mm = interface_flux_mismatch(&mesh, &spaces, &u0, &phi, &k).unwrap();
        assert!(mm.iter().all(|&v| (v - 2.0).abs() < 1e-13));
    }

    #[test]
    fn dirichlet_reduction_round_trips() {
        let mesh = build_coupled_meshes(0.25).unwrap();
        let spaces = FeSpaces::build(&mesh);
        let k = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        let op = assemble_darcy_operator(&mesh, &spaces, 1.0, &k, 1.0).unwrap();
        let dirichlet = head_dirichlet_values(&mesh, &spaces, &|p| p[0] + 2.0 * p[1]);
        let interior: Vec<f64> = (0..op.free.len()).map(|i| i as f64 * 0.1).collect();
        let full = op.expand_solution(&interior, &dirichlet);
        for (r, &dof) in op.free.iter().enumerate() {
            assert_eq!(full[dof], interior[r]);
            assert_eq!(op.reduced_index(dof), Some(r));
        }
        for (v, &constrained) in spaces.porous_dirichlet.iter().enumerate() {
            if constrained {
                assert_eq!(full[v], dirichlet[v]);
                assert_eq!(op.reduced_index(v), None);
            }
        }
    }

    #[test]
    fn inf_sup_constant_stays_bounded_under_refinement() {
        let coarse = build_coupled_meshes(0.125).unwrap();
        let fine = build_coupled_meshes(0.0625).unwrap();
        let bc = inf_sup_constant(&coarse, &FeSpaces::build(&coarse), 1.0).unwrap();
        let bf = inf_sup_constant(&fine, &FeSpaces::build(&fine), 1.0).unwrap();
        assert!(bc > 0.05, "coarse inf-sup constant {bc}");
        assert!(bf > 0.05, "fine inf-sup constant {bf}");
        assert!(bf / bc > 0.8, "inf-sup degenerating: {bc} -> {bf}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mesh = tiny_coupled();
        let spaces = FeSpaces::build(&mesh);
        assert!(assemble_stokes_operator(&mesh, &spaces, 0.0, 1.0, &|_| 1.0).is_err());
        assert!(assemble_stokes_operator(&mesh, &spaces, 1.0, -2.0, &|_| 1.0).is_err());
        assert!(assemble_stokes_operator(&mesh, &spaces, 1.0, 1.0, &|_| -1.0).is_err());
        let k = ConductivitySample::Constant { k11: 1.0, k22: 1.0 };
        assert!(assemble_darcy_operator(&mesh, &spaces, 0.0, &k, 1.0).is_err());
        let bad = ConductivitySample::Constant { k11: -1.0, k22: 1.0 };
        assert!(assemble_darcy_operator(&mesh, &spaces, 1.0, &bad, 1.0).is_err());
        assert!(scalar_error(&mesh.porous, &[1.0, 2.0], &|_| 0.0, None).is_err());
    }
}

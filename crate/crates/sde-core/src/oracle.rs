//! Independent references for validation: manufactured solutions with
//! hand-derived forcing, a strong-form residual checker built on finite
//! differences, and a monolithic coupled solver that bypasses the domain
//! decomposition entirely.
//!
//! Everything here exists to catch defects in the main solver path, so it
//! deliberately avoids reusing the iteration machinery: the monolithic
//! solver assembles the fully coupled system and solves it in one shot, and
//! the residual checker differentiates the closed-form fields numerically
//! instead of trusting the transcribed forcing.

use crate::fem::{
    self, assemble_darcy_rhs, assemble_stokes_rhs, darcy_triplets, head_dirichlet_values,
    stokes_dirichlet_values, stokes_triplets, FeSpaces, FieldKind, FieldVector, OperatorPair,
};
use crate::ddm::{TraceField, TraceKind};
use crate::mesh::CoupledMesh;
use crate::randfield::ConductivitySample;
use crate::{Error, Result};

/// Closed-form solution fields with analytic gradients.
pub struct ExactFields {
    pub velocity: Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
    /// Gradient rows are components, columns derivatives: `[comp][∂x, ∂y]`.
    pub velocity_grad: Box<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>,
    pub pressure: Box<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    pub head: Box<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    pub head_grad: Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
}

/// A fully specified test problem: conductivity, physical parameters,
/// forcing, Dirichlet data, and (when a closed form exists) the exact
/// solution. The random-field benchmark has no closed-form solution, so
/// `exact` is optional there.
pub struct ManufacturedCase {
    pub nu: f64,
    pub gravity: f64,
    pub alpha: f64,
    pub conductivity: ConductivitySample,
    pub f_fluid: Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
    pub f_porous: Box<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    pub fluid_dirichlet: Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
    pub porous_dirichlet: Box<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    pub exact: Option<ExactFields>,
}

impl ManufacturedCase {
    /// Interface friction coefficient η = α / √k11 of this case's sample
    /// (constant along the interface: the conductivity varies only in y).
    pub fn friction(&self) -> f64 {
        self.conductivity.interface_friction(self.alpha)
    }
}

use std::f64::consts::PI;

/// Constant-conductivity benchmark: head `(e^y − e^{−y}) sin x`, zero
/// pressure, and the matching velocity. ν = g = α = 1. The Stokes forcing
/// is derived by hand from `f = −∇·T(u, p)` and frozen here, gated by
/// [`strong_residual_check`].
///
/// For `k11 ≠ k22` the porous source is nonzero and the velocity is not
/// divergence-free; the fields still satisfy momentum, the Darcy equation,
/// mass flux continuity, and the normal-stress balance, which is what the
/// anisotropic iteration-count experiments rely on.
pub fn test1_case(k11: f64, k22: f64) -> Result<ManufacturedCase> {
    if !(k11 > 0.0) || !(k22 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "conductivity must be positive (k11={k11}, k22={k22})"
        )));
    }
    let nu = 1.0;
    let u = move |p: [f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        [
            k11 / PI * (2.0 * PI * y).sin() * x.cos(),
            (-2.0 * k22 + k22 / (PI * PI) * (PI * y).sin().powi(2)) * x.sin(),
        ]
    };
    let grad_u = move |p: [f64; 2]| -> [[f64; 2]; 2] {
        let (x, y) = (p[0], p[1]);
        [
            [
                -k11 / PI * (2.0 * PI * y).sin() * x.sin(),
                2.0 * k11 * (2.0 * PI * y).cos() * x.cos(),
            ],
            [
                (-2.0 * k22 + k22 / (PI * PI) * (PI * y).sin().powi(2)) * x.cos(),
                k22 / PI * (2.0 * PI * y).sin() * x.sin(),
            ],
        ]
    };
    let phi = |p: [f64; 2]| -> f64 { (p[1].exp() - (-p[1]).exp()) * p[0].sin() };
    let grad_phi = |p: [f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        [(y.exp() - (-y).exp()) * x.cos(), (y.exp() + (-y).exp()) * x.sin()]
    };
    // f = −∇·T(u, p) = −ν(Δu + ∇(∇·u)) + ∇p with p ≡ 0, derived by hand:
    //   f1 = (ν/π)[(2 + 4π²) k11 − k22] sin(2πy) cos x
    //   f2 = ν u2 − 2ν(2 k22 − k11) cos(2πy) sin x
    let f_fluid = move |p: [f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        let u2 = (-2.0 * k22 + k22 / (PI * PI) * (PI * y).sin().powi(2)) * x.sin();
        [
            nu / PI * ((2.0 + 4.0 * PI * PI) * k11 - k22) * (2.0 * PI * y).sin() * x.cos(),
            nu * u2 - 2.0 * nu * (2.0 * k22 - k11) * (2.0 * PI * y).cos() * x.sin(),
        ]
    };
    // f_p = −∇·(K∇φ) = (k11 − k22)(e^y − e^{−y}) sin x; zero when isotropic.
    let f_porous = move |p: [f64; 2]| -> f64 {
        (k11 - k22) * (p[1].exp() - (-p[1]).exp()) * p[0].sin()
    };
    Ok(ManufacturedCase {
        nu,
        gravity: 1.0,
        alpha: 1.0,
        conductivity: ConductivitySample::constant(k11, k22),
        f_fluid: Box::new(f_fluid),
        f_porous: Box::new(f_porous),
        fluid_dirichlet: Box::new(u),
        porous_dirichlet: Box::new(phi),
        exact: Some(ExactFields {
            velocity: Box::new(u),
            velocity_grad: Box::new(grad_u),
            pressure: Box::new(|_| 0.0),
            head: Box::new(phi),
            head_grad: Box::new(grad_phi),
        }),
    })
}

/// Random-conductivity benchmark: the literal forcing and Dirichlet data of
/// the stochastic experiment, parameterized by one conductivity sample. No
/// closed-form solution exists (the conductivity varies in y), so errors are
/// measured against fine-sampling reference means instead.
pub fn test2_case(sample: &ConductivitySample) -> ManufacturedCase {
    let nu = 1.0;
    let k_f = sample.clone();
    let f_fluid = move |p: [f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        let (k11, k22) = (k_f.k11(p), k_f.k22(p));
        [
            (1.0 + nu + 4.0 * nu * PI * PI) * k11 / PI * (2.0 * PI * y).sin() * x.cos(),
            -2.0 * nu * k22 * (2.0 * PI * y).cos() * x.sin()
                + (1.0 + nu) * (-2.0 * k22 + k22 / (PI * PI) * (PI * y).sin().powi(2)) * x.sin(),
        ]
    };
    let f_porous = |p: [f64; 2]| -> f64 { (p[1].exp() - (-p[1]).exp()) * p[0].sin() };
    let k_d = sample.clone();
    let fluid_dirichlet = move |p: [f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        let (k11, k22) = (k_d.k11(p), k_d.k22(p));
        [
            k11 / PI * (2.0 * PI * y).sin() * x.cos(),
            (-2.0 * k22 + k22 / (PI * PI) * (PI * y).sin().powi(2)) * x.sin(),
        ]
    };
    let porous_dirichlet = |p: [f64; 2]| -> f64 { (p[1].exp() - (-p[1]).exp()) * p[0].sin() };
    ManufacturedCase {
        nu,
        gravity: 1.0,
        alpha: 1.0,
        conductivity: sample.clone(),
        f_fluid: Box::new(f_fluid),
        f_porous: Box::new(f_porous),
        fluid_dirichlet: Box::new(fluid_dirichlet),
        porous_dirichlet: Box::new(porous_dirichlet),
        exact: None,
    }
}

/// Velocity, pressure, and head fields of one coupled solve.
pub struct SolutionFields {
    pub velocity: FieldVector,
    pub pressure: FieldVector,
    pub head: FieldVector,
}

/// Assemble and solve the fully coupled discrete system in one linear solve:
/// Stokes block (no Robin term; the interface data enters through the
/// coupling), Darcy block scaled by the gravitational constant, and the
/// skew-symmetric interface coupling `g⟨φ, v·n_f⟩ / −g⟨u·n_f, ψ⟩`. Dirichlet
/// data is taken from the case. Intended as a reference at moderate mesh
/// sizes, not a production path.
pub fn monolithic_coupled_solve(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    case: &ManufacturedCase,
) -> Result<SolutionFields> {
    let eta = case.friction();
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "interface friction must be positive (η = {eta})"
        )));
    }
    let g = case.gravity;
    let off = spaces.stokes_dim();
    let n_total = off + spaces.head_dim();

    let mut triplets = stokes_triplets(mesh, spaces, case.nu, 0.0, &|_| eta)?;
    for (i, j, v) in darcy_triplets(mesh, g, &case.conductivity, 0.0)? {
        triplets.push((off + i, off + j, v));
    }
    // Skew coupling over interface segments with the exact P1 edge mass.
    let iface = &mesh.interface;
    for s in 0..iface.n_segments() {
        let len = iface.segment_length(s);
        let fl = [iface.fluid_nodes[s], iface.fluid_nodes[s + 1]];
        let po = [iface.porous_nodes[s], iface.porous_nodes[s + 1]];
        let m = [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                // ⟨gφ, v·n_f⟩ = −g ∫ φ v2 in the fluid momentum rows;
                // −g⟨u·n_f, ψ⟩ = +g ∫ u2 ψ in the head rows.
                triplets.push((spaces.u2(fl[i]), off + po[j], -g * m[i][j]));
                triplets.push((off + po[i], spaces.u2(fl[j]), g * m[i][j]));
            }
        }
    }
    let mut free = spaces.stokes_free.clone();
    free.extend(spaces.head_free.iter().map(|&v| off + v));
    let op = OperatorPair::from_triplets(n_total, &triplets, &free, false)?;

    // Loads: reuse the subproblem assemblers with the coupling data zeroed.
    let zero_u = FieldVector::zeros(FieldKind::Velocity, spaces.velocity_dim());
    let zero_phi = FieldVector::zeros(FieldKind::Head, spaces.head_dim());
    let no_trace_f = TraceField::zeros(iface.n_nodes(), TraceKind::RobinFluid);
    let no_trace_p = TraceField::zeros(iface.n_nodes(), TraceKind::RobinPorous);
    let mut rhs = assemble_stokes_rhs(
        mesh,
        spaces,
        case.f_fluid.as_ref(),
        &no_trace_f,
        &zero_u,
        &|_| eta,
        &|_| eta,
    )?;
    rhs.extend(assemble_darcy_rhs(
        mesh,
        spaces,
        case.f_porous.as_ref(),
        &no_trace_p,
        &zero_phi,
        &case.conductivity,
        &case.conductivity,
        g,
    )?);

    let mut dirichlet = stokes_dirichlet_values(mesh, spaces, case.fluid_dirichlet.as_ref());
    dirichlet.extend(head_dirichlet_values(
        mesh,
        spaces,
        case.porous_dirichlet.as_ref(),
    ));

    let reduced_rhs = op.reduce_rhs(&rhs, &dirichlet);
    let fact = crate::linalg::factorize(&op.reduced)?;
    let interior = crate::linalg::solve_one(&fact, &reduced_rhs)?;
    let full = op.expand_solution(&interior, &dirichlet);

    let residual = op.residual_at(&full, &rhs);
    if !(residual < 1e-8) {
        return Err(Error::Singular(format!(
            "coupled solve left a residual of {residual:.3e}"
        )));
    }

    let (velocity, pressure) = spaces.split_stokes(&full[..off]);
    Ok(SolutionFields {
        velocity,
        pressure,
        head: FieldVector {
            kind: FieldKind::Head,
            values: full[off..].to_vec(),
        },
    })
}

/// Max absolute strong-form residuals of a case's exact fields, one per
/// equation: interior momentum and continuity (fluid), the Darcy equation
/// (porous), and the three interface conditions on y = 0.
#[derive(Debug, Clone, Copy)]
pub struct StrongResiduals {
    /// −∇·T(u, p) − f_f, max over interior fluid points and components.
    pub momentum: f64,
    /// ∇·u, max over interior fluid points.
    pub continuity: f64,
    /// −∇·(K∇φ) − f_p, max over interior porous points.
    pub darcy: f64,
    /// u·n_f − K∇φ·n_p on the interface.
    pub interface_mass: f64,
    /// −n_f·(T·n_f) − gφ on the interface.
    pub interface_normal_stress: f64,
    /// −τ·(T·n_f) − η u·τ on the interface.
    pub interface_tangential: f64,
}

impl StrongResiduals {
    /// Largest of the six residuals.
    pub fn max(&self) -> f64 {
        self.momentum
            .max(self.continuity)
            .max(self.darcy)
            .max(self.interface_mass)
            .max(self.interface_normal_stress)
            .max(self.interface_tangential)
    }
}

/// Deterministic pseudo-random point stream for residual sampling.
fn lcg_points(seed: u64, n: usize, x_range: [f64; 2], y_range: [f64; 2]) -> Vec<[f64; 2]> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    };
    (0..n)
        .map(|_| {
            [
                x_range[0] + (x_range[1] - x_range[0]) * next(),
                y_range[0] + (y_range[1] - y_range[0]) * next(),
            ]
        })
        .collect()
}

/// Check the case's exact fields against the strong form of the coupled
/// problem by central finite differences: the stress `T` and Darcy flux
/// `K∇φ` are built from the analytic gradients, then their divergences are
/// differenced with step `fd_step`. Errors if the case has no exact fields.
pub fn strong_residual_check(
    case: &ManufacturedCase,
    n_points: usize,
    fd_step: f64,
) -> Result<StrongResiduals> {
    let exact = case.exact.as_ref().ok_or_else(|| {
        Error::InvalidInput("strong-form check requires closed-form exact fields".into())
    })?;
    if !(fd_step > 0.0) || n_points == 0 {
        return Err(Error::InvalidInput(format!(
            "need a positive step and at least one point (step={fd_step}, n={n_points})"
        )));
    }
    let h = fd_step;
    let nu = case.nu;
    let margin = 0.05;
    let fluid_pts = lcg_points(17, n_points, [margin, PI - margin], [margin, 1.0 - margin]);
    let porous_pts = lcg_points(29, n_points, [margin, PI - margin], [-1.0 + margin, -margin]);
    let iface_pts = lcg_points(43, n_points, [margin, PI - margin], [0.0, 0.0]);

    // Stress from the analytic gradient and pressure closures.
    let stress = |p: [f64; 2]| -> [[f64; 2]; 2] {
        let g = (exact.velocity_grad)(p);
        let pr = (exact.pressure)(p);
        let d12 = 0.5 * (g[0][1] + g[1][0]);
        [
            [2.0 * nu * g[0][0] - pr, 2.0 * nu * d12],
            [2.0 * nu * d12, 2.0 * nu * g[1][1] - pr],
        ]
    };
    let flux = |p: [f64; 2]| -> [f64; 2] {
        let g = (exact.head_grad)(p);
        [
            case.conductivity.k11(p) * g[0],
            case.conductivity.k22(p) * g[1],
        ]
    };

    let mut momentum = 0.0f64;
    let mut continuity = 0.0f64;
    for &p in &fluid_pts {
        let (xp, xm) = ([p[0] + h, p[1]], [p[0] - h, p[1]]);
        let (yp, ym) = ([p[0], p[1] + h], [p[0], p[1] - h]);
        let f = (case.f_fluid)(p);
        for i in 0..2 {
            let div_t = (stress(xp)[i][0] - stress(xm)[i][0]) / (2.0 * h)
                + (stress(yp)[i][1] - stress(ym)[i][1]) / (2.0 * h);
            momentum = momentum.max((-div_t - f[i]).abs());
        }
        let div_u = ((exact.velocity)(xp)[0] - (exact.velocity)(xm)[0]) / (2.0 * h)
            + ((exact.velocity)(yp)[1] - (exact.velocity)(ym)[1]) / (2.0 * h);
        continuity = continuity.max(div_u.abs());
    }

    let mut darcy = 0.0f64;
    for &p in &porous_pts {
        let div_q = (flux([p[0] + h, p[1]])[0] - flux([p[0] - h, p[1]])[0]) / (2.0 * h)
            + (flux([p[0], p[1] + h])[1] - flux([p[0], p[1] - h])[1]) / (2.0 * h);
        darcy = darcy.max((-div_q - (case.f_porous)(p)).abs());
    }

    let eta = case.friction();
    let g = case.gravity;
    let mut interface_mass = 0.0f64;
    let mut interface_normal_stress = 0.0f64;
    let mut interface_tangential = 0.0f64;
    for &p in &iface_pts {
        let u = (exact.velocity)(p);
        let t = stress(p);
        let q = flux(p);
        // n_f = (0, −1), n_p = (0, 1), τ = (1, 0).
        interface_mass = interface_mass.max((-u[1] - q[1]).abs());
        interface_normal_stress =
            interface_normal_stress.max((-t[1][1] - g * (exact.head)(p)).abs());
        interface_tangential = interface_tangential.max((t[0][1] - eta * u[0]).abs());
    }

    Ok(StrongResiduals {
        momentum,
        continuity,
        darcy,
        interface_mass,
        interface_normal_stress,
        interface_tangential,
    })
}

/// Max deviation between the case's analytic gradients and central finite
/// differences of its fields, over deterministic interior points.
pub fn gradient_consistency(case: &ManufacturedCase, n_points: usize, fd_step: f64) -> Result<f64> {
    let exact = case.exact.as_ref().ok_or_else(|| {
        Error::InvalidInput("gradient check requires closed-form exact fields".into())
    })?;
    let h = fd_step;
    let mut worst = 0.0f64;
    for &p in &lcg_points(61, n_points, [0.05, PI - 0.05], [0.05, 0.95]) {
        let g = (exact.velocity_grad)(p);
        for comp in 0..2 {
            let fdx = ((exact.velocity)([p[0] + h, p[1]])[comp]
                - (exact.velocity)([p[0] - h, p[1]])[comp])
                / (2.0 * h);
            let fdy = ((exact.velocity)([p[0], p[1] + h])[comp]
                - (exact.velocity)([p[0], p[1] - h])[comp])
                / (2.0 * h);
            worst = worst.max((g[comp][0] - fdx).abs()).max((g[comp][1] - fdy).abs());
        }
    }
    for &p in &lcg_points(71, n_points, [0.05, PI - 0.05], [-0.95, -0.05]) {
        let g = (exact.head_grad)(p);
        let fdx = ((exact.head)([p[0] + h, p[1]]) - (exact.head)([p[0] - h, p[1]])) / (2.0 * h);
        let fdy = ((exact.head)([p[0], p[1] + h]) - (exact.head)([p[0], p[1] - h])) / (2.0 * h);
        worst = worst.max((g[0] - fdx).abs()).max((g[1] - fdy).abs());
    }
    Ok(worst)
}

/// Build-time gate run before experiments that rely on a closed-form case:
/// momentum, the Darcy equation, mass flux continuity, and the
/// normal-stress balance must hold for every case; incompressibility and the
/// tangential (slip) condition additionally hold only for isotropic
/// conductivity, so they are enforced only there.
pub fn gate_manufactured_case(case: &ManufacturedCase) -> Result<StrongResiduals> {
    let r = strong_residual_check(case, 100, 1e-5)?;
    let tol = 1e-6;
    let isotropic = {
        let p = [1.0, -0.5];
        (case.conductivity.k11(p) - case.conductivity.k22(p)).abs() < 1e-14
    };
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, value: f64| {
        if !(value < tol) {
            failures.push(format!("{name} residual {value:.3e}"));
        }
    };
    check("momentum", r.momentum);
    check("darcy", r.darcy);
    check("interface mass", r.interface_mass);
    check("normal stress", r.interface_normal_stress);
    if isotropic {
        check("continuity", r.continuity);
        check("tangential slip", r.interface_tangential);
    }
    if failures.is_empty() {
        Ok(r)
    } else {
        Err(Error::InvalidInput(format!(
            "manufactured case fails its strong-form gate: {}",
            failures.join(", ")
        )))
    }
}

/// Relative/absolute error summary of one coupled solution against a case's
/// exact fields: `(u_L2_rel, u_H1_rel, p_L2_abs, φ_L2_rel, φ_H1_rel)`.
pub fn solution_errors(
    mesh: &CoupledMesh,
    spaces: &FeSpaces,
    sol: &SolutionFields,
    case: &ManufacturedCase,
) -> Result<[f64; 5]> {
    let exact = case.exact.as_ref().ok_or_else(|| {
        Error::InvalidInput("error evaluation requires closed-form exact fields".into())
    })?;
    let eu = fem::velocity_error(
        mesh,
        spaces,
        &sol.velocity,
        exact.velocity.as_ref(),
        exact.velocity_grad.as_ref(),
    )?;
    let ep = fem::scalar_error(
        &mesh.fluid,
        &sol.pressure.values,
        exact.pressure.as_ref(),
        None,
    )?;
    let ephi = fem::scalar_error(
        &mesh.porous,
        &sol.head.values,
        exact.head.as_ref(),
        Some(exact.head_grad.as_ref()),
    )?;
    Ok([
        eu.l2_rel.unwrap_or(eu.l2_abs),
        eu.h1_rel.unwrap_or(eu.h1_abs),
        // The exact pressure is zero, so its error is reported absolutely.
        ep.l2_abs,
        ephi.l2_rel.unwrap_or(ephi.l2_abs),
        ephi.h1_rel.unwrap_or(ephi.h1_abs),
    ])
}

//! Cell-centred finite volumes for `-∇·(κ ∇p) = b` with `κ = exp(a)`, plus
//! discrete adjoints and gradients of output KL coefficients with respect to
//! the coefficients of a KL-expanded log-permeability.
//!
//! Fluxes use two-point transmissibilities with harmonic face averaging, so
//! the system matrix is a symmetric M-matrix. Boundary data:
//! * Dirichlet `p = g`: half-cell transmissibility `T_b = L κ / d`,
//! * Neumann: prescribed inflow `h` (flux per unit length entering the domain).
//!
//! For an output `f_i = σ_i⁻¹ ⟨Q p - f̄, φ_i⟩` the adjoint `A q = -σ_i⁻¹ Qᵀ W φ_i`
//! yields `∂f_i/∂a_c = Σ_faces ∂T/∂a_c (Δp)(Δq) + Σ_dirichlet ∂T_b/∂a_c (p_c - g) q_c`,
//! and the chain rule through `a = ā + Σ_j √λ_j θ_j e_j` gives every `∂f_i/∂θ_j`
//! from that single adjoint field.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_midpoint_grid, SpatialGrid};
use crate::kle::{kle_from_kernel, kle_from_separable_kernel, nystrom_extend, InputFieldKLE, KLExpansion};
use crate::linalg::{pcg, CholeskyPattern, CsrMatrix, IncompleteCholesky, SparseCholesky};
use crate::model::{FunctionalModel, ModeGradientModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    Dirichlet(f64),
    /// Inflow flux per unit boundary length.
    Neumann(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorFace {
    pub cells: [usize; 2],
    pub length: f64,
    /// Distance from each cell centre to the face.
    pub dist: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub side: Side,
    pub length: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshShape {
    /// Cell `(i, j)` (x index `i`, y index `j`) has index `i * ny + j`.
    Rectangle { x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize },
    /// Cell `(ring i, angle k)` has index `k * nr + i`; centres at angle `kΔφ`.
    Annulus { r_faces: Vec<f64>, nphi: usize },
}

#[derive(Debug, Clone)]
pub struct FvMesh {
    pub shape: MeshShape,
    pub centers: Vec<[f64; 2]>,
    pub areas: Vec<f64>,
    pub faces: Vec<InteriorFace>,
    pub boundary: Vec<BoundaryFace>,
}

impl FvMesh {
    pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || nx < 1 || ny < 1 {
            return Err(Error::invalid(format!(
                "rectangle mesh needs x0 < x1, y0 < y1, nx, ny >= 1 (got [{x0},{x1}]x[{y0},{y1}], {nx}x{ny})"
            )));
        }
        let hx = (x1 - x0) / nx as f64;
        let hy = (y1 - y0) / ny as f64;
        let idx = |i: usize, j: usize| i * ny + j;
        let mut centers = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                centers.push([x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy]);
            }
        }
        let mut faces = Vec::new();
        let mut boundary = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                if i + 1 < nx {
                    faces.push(InteriorFace {
                        cells: [idx(i, j), idx(i + 1, j)],
                        length: hy,
                        dist: [hx / 2.0, hx / 2.0],
                    });
                }
                if j + 1 < ny {
                    faces.push(InteriorFace {
                        cells: [idx(i, j), idx(i, j + 1)],
                        length: hx,
                        dist: [hy / 2.0, hy / 2.0],
                    });
                }
            }
        }
        for j in 0..ny {
            boundary.push(BoundaryFace { cell: idx(0, j), side: Side::Left, length: hy, dist: hx / 2.0 });
            boundary.push(BoundaryFace { cell: idx(nx - 1, j), side: Side::Right, length: hy, dist: hx / 2.0 });
        }
        for i in 0..nx {
            boundary.push(BoundaryFace { cell: idx(i, 0), side: Side::Bottom, length: hx, dist: hy / 2.0 });
            boundary.push(BoundaryFace { cell: idx(i, ny - 1), side: Side::Top, length: hx, dist: hy / 2.0 });
        }
        Ok(Self {
            shape: MeshShape::Rectangle { x0, x1, y0, y1, nx, ny },
            areas: vec![hx * hy; nx * ny],
            centers,
            faces,
            boundary,
        })
    }

    /// Polar mesh of the annulus `r_in < r < r_out`; radial faces either
    /// uniform or geometric (`log_spacing`, nearly square cells).
    pub fn annulus(r_in: f64, r_out: f64, nr: usize, nphi: usize, log_spacing: bool) -> Result<Self> {
        if !(0.0 < r_in && r_in < r_out) || nr < 1 || nphi < 3 {
            return Err(Error::invalid(format!(
                "annulus mesh needs 0 < r_in < r_out, nr >= 1, nphi >= 3 (got {r_in}, {r_out}, {nr}, {nphi})"
            )));
        }
        let r_faces: Vec<f64> = (0..=nr)
            .map(|i| {
                let t = i as f64 / nr as f64;
                if i == nr {
                    r_out
                } else if log_spacing {
                    r_in * (r_out / r_in).powf(t)
                } else {
                    r_in + (r_out - r_in) * t
                }
            })
            .collect();
        let dphi = 2.0 * PI / nphi as f64;
        let rho: Vec<f64> = (0..nr).map(|i| (r_faces[i] * r_faces[i + 1]).sqrt()).collect();
        let idx = |i: usize, k: usize| k * nr + i;
        let mut centers = Vec::with_capacity(nr * nphi);
        let mut areas = Vec::with_capacity(nr * nphi);
        for k in 0..nphi {
            let phi = k as f64 * dphi;
            for i in 0..nr {
                centers.push([rho[i] * phi.cos(), rho[i] * phi.sin()]);
                areas.push(0.5 * dphi * (r_faces[i + 1].powi(2) - r_faces[i].powi(2)));
            }
        }
        let mut faces = Vec::new();
        let mut boundary = Vec::new();
        let half_chord = (dphi / 2.0).sin();
        for k in 0..nphi {
            let kn = (k + 1) % nphi;
            for i in 0..nr {
                if i + 1 < nr {
                    faces.push(InteriorFace {
                        cells: [idx(i, k), idx(i + 1, k)],
                        length: r_faces[i + 1] * dphi,
                        dist: [r_faces[i + 1] - rho[i], rho[i + 1] - r_faces[i + 1]],
                    });
                }
                faces.push(InteriorFace {
                    cells: [idx(i, k), idx(i, kn)],
                    length: r_faces[i + 1] - r_faces[i],
                    dist: [rho[i] * half_chord, rho[i] * half_chord],
                });
            }
            boundary.push(BoundaryFace {
                cell: idx(0, k),
                side: Side::Inner,
                length: r_faces[0] * dphi,
                dist: rho[0] - r_faces[0],
            });
            boundary.push(BoundaryFace {
                cell: idx(nr - 1, k),
                side: Side::Outer,
                length: r_out * dphi,
                dist: r_out - rho[nr - 1],
            });
        }
        Ok(Self {
            shape: MeshShape::Annulus { r_faces, nphi },
            centers,
            areas,
            faces,
            boundary,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    /// Cell-centre quadrature over the domain (cell areas as weights).
    pub fn cell_grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::from_parts(2, self.centers.clone(), self.areas.clone())
    }

    /// Area-weighted inner product of two cell fields.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.areas.iter().zip(u.iter().zip(v)).map(|(a, (x, y))| a * x * y).sum()
    }

    /// Radius of every ring's cell centres (annulus meshes only).
    pub fn ring_radii(&self) -> Option<Vec<f64>> {
        match &self.shape {
            MeshShape::Annulus { r_faces, .. } => {
                Some(r_faces.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect())
            }
            _ => None,
        }
    }
}

/// Which values of the pressure field form the output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QoiKind {
    /// Restriction to a set of cells (area weights).
    Restriction,
    /// Trace on a Neumann boundary side, represented by the adjacent cell
    /// values (face-length weights).
    Trace(Side),
}

#[derive(Debug, Clone)]
pub struct QoiExtractor {
    pub kind: QoiKind,
    pub cells: Vec<usize>,
    pub grid: SpatialGrid,
}

impl QoiExtractor {
    /// Restriction to the cells whose centres satisfy `keep`.
    pub fn restriction<F: Fn(&[f64; 2]) -> bool>(mesh: &FvMesh, keep: F) -> Result<Self> {
        let cells: Vec<usize> = (0..mesh.n_cells()).filter(|&c| keep(&mesh.centers[c])).collect();
        if cells.is_empty() {
            return Err(Error::invalid("restriction selects no cells"));
        }
        let grid = SpatialGrid::from_parts(
            2,
            cells.iter().map(|&c| mesh.centers[c]).collect(),
            cells.iter().map(|&c| mesh.areas[c]).collect(),
        )?;
        Ok(Self {
            kind: QoiKind::Restriction,
            cells,
            grid,
        })
    }

    /// Trace on the top side of a rectangle mesh, as a 1-D grid in x.
    pub fn top_trace(mesh: &FvMesh) -> Result<Self> {
        let faces: Vec<&BoundaryFace> = mesh.boundary.iter().filter(|f| f.side == Side::Top).collect();
        if faces.is_empty() {
            return Err(Error::invalid("mesh has no top boundary"));
        }
        let grid = SpatialGrid::from_parts(
            1,
            faces.iter().map(|f| [mesh.centers[f.cell][0], 0.0]).collect(),
            faces.iter().map(|f| f.length).collect(),
        )?;
        Ok(Self {
            kind: QoiKind::Trace(Side::Top),
            cells: faces.iter().map(|f| f.cell).collect(),
            grid,
        })
    }

    pub fn extract(&self, p: &[f64]) -> Vec<f64> {
        self.cells.iter().map(|&c| p[c]).collect()
    }

    /// `Q* φ`: the output-grid function extended by zero to a cell field.
    pub fn adjoint_extend(&self, phi: &[f64], n_cells: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_cells];
        for (&c, v) in self.cells.iter().zip(phi) {
            out[c] = *v;
        }
        out
    }
}

/// Linear solver used for forward solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinearSolver {
    /// Sparse Cholesky with a fill-reducing ordering.
    Direct,
    /// IC(0)-preconditioned conjugate gradients to the given relative residual.
    Pcg { tol: f64, max_iter: usize },
}

impl LinearSolver {
    pub const PCG: LinearSolver = LinearSolver::Pcg { tol: 1e-10, max_iter: 5000 };
}

impl Default for LinearSolver {
    fn default() -> Self {
        LinearSolver::Direct
    }
}

/// Discrete elliptic boundary-value problem with a log-permeability input.
#[derive(Debug)]
pub struct EllipticProblem {
    pub mesh: FvMesh,
    pub bcs: Vec<(Side, BoundaryCondition)>,
    /// Source density `b` at cell centres.
    pub source: Vec<f64>,
    system: SystemPattern,
    solves: AtomicUsize,
}

impl Clone for EllipticProblem {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            bcs: self.bcs.clone(),
            source: self.source.clone(),
            system: self.system.clone(),
            solves: AtomicUsize::new(0),
        }
    }
}

/// Sparsity pattern of the system matrix with its symbolic factorisation;
/// only the values change with the coefficient field.
#[derive(Debug, Clone)]
struct SystemPattern {
    template: CsrMatrix,
    diag: Vec<usize>,
    /// Storage positions of `(a, b)` and `(b, a)` for each interior face.
    off: Vec<[usize; 2]>,
    cholesky: CholeskyPattern,
}

impl SystemPattern {
    fn new(mesh: &FvMesh) -> Result<Self> {
        let n = mesh.n_cells();
        let mut trip: Vec<(usize, usize, f64)> = (0..n).map(|c| (c, c, 1.0)).collect();
        for f in &mesh.faces {
            let [a, b] = f.cells;
            trip.push((a, b, -1.0));
            trip.push((b, a, -1.0));
            trip.push((a, a, 1.0));
            trip.push((b, b, 1.0));
        }
        let template = CsrMatrix::from_triplets(n, trip);
        let pos = |i, j| template.position(i, j).expect("entry is in the assembled pattern");
        let diag = (0..n).map(|c| pos(c, c)).collect();
        let off = mesh.faces.iter().map(|f| [pos(f.cells[0], f.cells[1]), pos(f.cells[1], f.cells[0])]).collect();
        let cholesky = CholeskyPattern::new(&template)?;
        Ok(Self {
            template,
            diag,
            off,
            cholesky,
        })
    }
}

/// Transmissibilities for one coefficient field.
#[derive(Debug, Clone)]
pub struct Transmissibilities {
    pub kappa: Vec<f64>,
    pub interior: Vec<f64>,
    /// Per boundary face; zero for Neumann faces.
    pub boundary: Vec<f64>,
}

/// A factorised system matrix for repeated solves.
pub struct Factorization<'a> {
    problem: &'a EllipticProblem,
    chol: SparseCholesky,
    pub trans: Transmissibilities,
}

impl Factorization<'_> {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.problem.solves.fetch_add(1, Ordering::Relaxed);
        self.chol.solve(rhs)
    }
}

impl EllipticProblem {
    pub fn new(mesh: FvMesh, bcs: Vec<(Side, BoundaryCondition)>, source: Vec<f64>) -> Result<Self> {
        if source.len() != mesh.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_cells(),
                got: source.len(),
                context: "source field",
            });
        }
        for f in &mesh.boundary {
            if !bcs.iter().any(|(s, _)| *s == f.side) {
                return Err(Error::invalid(format!("no boundary condition for side {:?}", f.side)));
            }
        }
        let has_dirichlet = mesh.boundary.iter().any(|f| {
            matches!(bcs.iter().find(|(s, _)| *s == f.side), Some((_, BoundaryCondition::Dirichlet(_))))
        });
        if !has_dirichlet {
            return Err(Error::invalid("at least one Dirichlet boundary is required"));
        }
        let system = SystemPattern::new(&mesh)?;
        Ok(Self {
            mesh,
            bcs,
            source,
            system,
            solves: AtomicUsize::new(0),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    /// Number of linear solves performed so far.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn reset_solve_count(&self) {
        self.solves.store(0, Ordering::Relaxed);
    }

    fn bc(&self, side: Side) -> BoundaryCondition {
        self.bcs
            .iter()
            .find(|(s, _)| *s == side)
            .map(|(_, b)| *b)
            .expect("validated at construction")
    }

    fn check_field(&self, a: &[f64], what: &'static str) -> Result<()> {
        if a.len() != self.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: self.n_cells(),
                got: a.len(),
                context: what,
            });
        }
        Ok(())
    }

    pub fn transmissibilities(&self, log_kappa: &[f64]) -> Result<Transmissibilities> {
        self.check_field(log_kappa, "log-permeability field")?;
        let kappa: Vec<f64> = log_kappa.iter().map(|a| a.exp()).collect();
        if let Some(k) = kappa.iter().find(|k| !(**k > 0.0) || !k.is_finite()) {
            return Err(Error::invalid(format!("permeability {k} is not positive and finite")));
        }
        let interior = self
            .mesh
            .faces
            .iter()
            .map(|f| f.length / (f.dist[0] / kappa[f.cells[0]] + f.dist[1] / kappa[f.cells[1]]))
            .collect();
        let boundary = self
            .mesh
            .boundary
            .iter()
            .map(|f| match self.bc(f.side) {
                BoundaryCondition::Dirichlet(_) => f.length * kappa[f.cell] / f.dist,
                BoundaryCondition::Neumann(_) => 0.0,
            })
            .collect();
        Ok(Transmissibilities {
            kappa,
            interior,
            boundary,
        })
    }

    fn matrix(&self, t: &Transmissibilities) -> CsrMatrix {
        let sys = &self.system;
        let mut vals = vec![0.0; sys.template.nnz()];
        for ((f, &tf), [ab, ba]) in self.mesh.faces.iter().zip(&t.interior).zip(&sys.off) {
            let [a, b] = f.cells;
            vals[sys.diag[a]] += tf;
            vals[sys.diag[b]] += tf;
            vals[*ab] -= tf;
            vals[*ba] -= tf;
        }
        for (f, &tb) in self.mesh.boundary.iter().zip(&t.boundary) {
            vals[sys.diag[f.cell]] += tb;
        }
        sys.template.with_values(vals)
    }

    /// System matrix and forward right-hand side.
    pub fn assemble(&self, log_kappa: &[f64]) -> Result<(CsrMatrix, Vec<f64>, Transmissibilities)> {
        let t = self.transmissibilities(log_kappa)?;
        let a = self.matrix(&t);
        let mut rhs: Vec<f64> = self.source.iter().zip(&self.mesh.areas).map(|(b, a)| b * a).collect();
        for (f, &tb) in self.mesh.boundary.iter().zip(&t.boundary) {
            match self.bc(f.side) {
                BoundaryCondition::Dirichlet(g) => rhs[f.cell] += tb * g,
                BoundaryCondition::Neumann(h) => rhs[f.cell] += h * f.length,
            }
        }
        Ok((a, rhs, t))
    }

    pub fn factor(&self, log_kappa: &[f64]) -> Result<Factorization<'_>> {
        let t = self.transmissibilities(log_kappa)?;
        let chol = self.system.cholesky.factor(&self.matrix(&t))?;
        Ok(Factorization {
            problem: self,
            chol,
            trans: t,
        })
    }

    /// Solve `A(a) x = rhs` for an arbitrary right-hand side.
    pub fn solve_with(&self, log_kappa: &[f64], rhs: &[f64], solver: LinearSolver) -> Result<Vec<f64>> {
        self.check_field(rhs, "right-hand side")?;
        match solver {
            LinearSolver::Direct => self.factor(log_kappa)?.solve(rhs),
            LinearSolver::Pcg { tol, max_iter } => {
                let t = self.transmissibilities(log_kappa)?;
                let a = self.matrix(&t);
                let pre = IncompleteCholesky::new(&a)?;
                self.solves.fetch_add(1, Ordering::Relaxed);
                Ok(pcg(&a, rhs, &pre, tol, max_iter)?.0)
            }
        }
    }

    /// Pressure field for the log-permeability `log_kappa`.
    pub fn solve_forward(&self, log_kappa: &[f64], solver: LinearSolver) -> Result<Vec<f64>> {
        let (_, rhs, _) = self.assemble(log_kappa)?;
        self.solve_with(log_kappa, &rhs, solver)
    }

    /// Adjoint right-hand side `-σ⁻¹ Qᵀ W φ` for a restriction or trace output.
    pub fn adjoint_rhs(&self, qoi: &QoiExtractor, phi: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::Degenerate(format!("adjoint scaling σ must be positive, got {sigma}")));
        }
        if phi.len() != qoi.cells.len() {
            return Err(Error::DimensionMismatch {
                expected: qoi.cells.len(),
                got: phi.len(),
                context: "output mode",
            });
        }
        let mut rhs = vec![0.0; self.n_cells()];
        match qoi.kind {
            QoiKind::Restriction => {
                for ((&c, v), w) in qoi.cells.iter().zip(phi).zip(qoi.grid.weights()) {
                    rhs[c] -= w * v / sigma;
                }
            }
            QoiKind::Trace(side) => {
                // Neumann data -φ/σ on the output boundary, as a boundary flux.
                let mut h = vec![0.0; self.n_cells()];
                for (&c, v) in qoi.cells.iter().zip(phi) {
                    h[c] = -v / sigma;
                }
                for f in self.mesh.boundary.iter().filter(|f| f.side == side) {
                    rhs[f.cell] += h[f.cell] * f.length;
                }
            }
        }
        Ok(rhs)
    }

    pub fn solve_adjoint_restriction(
        &self,
        log_kappa: &[f64],
        qoi: &QoiExtractor,
        phi: &[f64],
        sigma: f64,
        solver: LinearSolver,
    ) -> Result<Vec<f64>> {
        if qoi.kind != QoiKind::Restriction {
            return Err(Error::invalid("output is not a restriction"));
        }
        let rhs = self.adjoint_rhs(qoi, phi, sigma)?;
        self.solve_with(log_kappa, &rhs, solver)
    }

    pub fn solve_adjoint_trace(
        &self,
        log_kappa: &[f64],
        qoi: &QoiExtractor,
        phi: &[f64],
        sigma: f64,
        solver: LinearSolver,
    ) -> Result<Vec<f64>> {
        if !matches!(qoi.kind, QoiKind::Trace(_)) {
            return Err(Error::invalid("output is not a boundary trace"));
        }
        let rhs = self.adjoint_rhs(qoi, phi, sigma)?;
        self.solve_with(log_kappa, &rhs, solver)
    }

    /// `∂f/∂a_c` for every cell, given forward `p` and adjoint `q`.
    pub fn cell_sensitivity(&self, trans: &Transmissibilities, p: &[f64], q: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.n_cells()];
        for (f, &t) in self.mesh.faces.iter().zip(&trans.interior) {
            let [a, b] = f.cells;
            let dpdq = (p[a] - p[b]) * (q[a] - q[b]);
            if dpdq == 0.0 {
                continue;
            }
            let t2l = t * t / f.length;
            s[a] += t2l * f.dist[0] / trans.kappa[a] * dpdq;
            s[b] += t2l * f.dist[1] / trans.kappa[b] * dpdq;
        }
        for (f, &tb) in self.mesh.boundary.iter().zip(&trans.boundary) {
            if let BoundaryCondition::Dirichlet(g) = self.bc(f.side) {
                s[f.cell] += tb * (p[f.cell] - g) * q[f.cell];
            }
        }
        s
    }

    /// `∂f/∂θ_j = Σ_c √λ_j e_j(c) ∂f/∂a_c` for all inputs of `input`.
    pub fn mode_gradient(&self, log_kappa: &[f64], p: &[f64], q: &[f64], input: &InputFieldKLE) -> Result<Vec<f64>> {
        if input.grid.len() != self.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: self.n_cells(),
                got: input.grid.len(),
                context: "input KLE grid",
            });
        }
        let t = self.transmissibilities(log_kappa)?;
        let s = self.cell_sensitivity(&t, p, q);
        Ok(input
            .eigenvalues
            .iter()
            .zip(&input.modes)
            .map(|(l, e)| l.sqrt() * e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

/// Forward map `θ ↦ Q p(exp(a(θ)))` with adjoint mode gradients.
#[derive(Debug, Clone)]
pub struct EllipticModel {
    pub problem: EllipticProblem,
    pub input: InputFieldKLE,
    pub qoi: QoiExtractor,
    /// Solver for plain forward evaluations.
    pub solver: LinearSolver,
    basis: DMatrix<f64>,
}

impl EllipticModel {
    pub fn new(problem: EllipticProblem, input: InputFieldKLE, qoi: QoiExtractor) -> Result<Self> {
        if input.grid.len() != problem.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: problem.n_cells(),
                got: input.grid.len(),
                context: "input KLE grid",
            });
        }
        let basis = input.scaled_basis();
        Ok(Self {
            problem,
            input,
            qoi,
            solver: LinearSolver::default(),
            basis,
        })
    }

    pub fn log_kappa(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.input.log_field(theta)
    }

    pub fn pressure(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.problem.solve_forward(&self.log_kappa(theta)?, self.solver)
    }

    /// Gradients of every KL coefficient, from one factorisation and one
    /// adjoint solve per mode.
    pub fn kl_gradients(&self, theta: &[f64], p: &[f64], kle: &KLExpansion) -> Result<Vec<Vec<f64>>> {
        let a = self.log_kappa(theta)?;
        let fact = self.problem.factor(&a)?;
        let n_qoi = kle.n_modes();
        let mut sens = DMatrix::zeros(self.problem.n_cells(), n_qoi);
        for (i, (phi, &lam)) in kle.modes.iter().zip(&kle.eigenvalues).enumerate() {
            if !(lam > 0.0) {
                return Err(Error::Degenerate(format!("KL mode {} has zero eigenvalue", i + 1)));
            }
            let rhs = self.problem.adjoint_rhs(&self.qoi, phi, lam.sqrt())?;
            let q = fact.solve(&rhs)?;
            let s = self.problem.cell_sensitivity(&fact.trans, p, &q);
            sens.set_column(i, &nalgebra::DVector::from_vec(s));
        }
        let g = self.basis.tr_mul(&sens);
        Ok((0..n_qoi).map(|i| g.column(i).iter().copied().collect()).collect())
    }
}

impl FunctionalModel for EllipticModel {
    fn n_par(&self) -> usize {
        self.input.n_par()
    }

    fn grid(&self) -> &SpatialGrid {
        &self.qoi.grid
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.qoi.extract(&self.pressure(theta)?))
    }
}

impl ModeGradientModel for EllipticModel {
    type State = Vec<f64>;

    fn forward(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.problem.solve_forward(&self.log_kappa(theta)?, LinearSolver::Direct)?;
        Ok((self.qoi.extract(&p), p))
    }

    fn mode_gradients(&self, theta: &[f64], p: &Vec<f64>, kle: &KLExpansion) -> Result<Vec<Vec<f64>>> {
        self.kl_gradients(theta, p, kle)
    }
}

/// Rectangle flow problem with mollified point sources and a top-boundary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsurfaceConfig {
    pub nx: usize,
    pub ny: usize,
    pub sigma_a: f64,
    pub ell_x: f64,
    pub ell_y: f64,
    pub n_par: usize,
    /// Mollifier variance `L` in `exp(-|x - x_i|²/(2L)) / (2πL)`.
    pub mollifier: f64,
    pub sources: Vec<[f64; 2]>,
    pub strengths: Vec<f64>,
    /// Constant mean log-permeability.
    pub mean_log_kappa: f64,
}

pub fn subsurface_config() -> SubsurfaceConfig {
    SubsurfaceConfig {
        nx: 128,
        ny: 64,
        sigma_a: 1.6,
        ell_x: 0.5,
        ell_y: 0.25,
        n_par: 126,
        mollifier: 0.05,
        sources: vec![[-0.6, 0.2], [-0.2, 0.4], [0.2, 0.6], [0.6, 0.8]],
        strengths: vec![2.0, 5.0, 5.0, 2.0],
        mean_log_kappa: 0.0,
    }
}

impl SubsurfaceConfig {
    pub fn source_density(&self, x: &[f64; 2]) -> f64 {
        let l = self.mollifier;
        self.sources
            .iter()
            .zip(&self.strengths)
            .map(|(c, a)| {
                let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                a * (-d2 / (2.0 * l)).exp() / (2.0 * PI * l)
            })
            .sum()
    }

    /// Input-field KLE on the cell centres of the `nx × ny` mesh.
    pub fn input_kle(&self) -> Result<InputFieldKLE> {
        let xg = make_midpoint_grid(-1.0, 1.0, self.nx)?;
        let yg = make_midpoint_grid(0.0, 1.0, self.ny)?;
        let (lx, ly) = (self.ell_x, self.ell_y);
        kle_from_separable_kernel(
            &xg,
            &yg,
            move |a, b| (-(a - b).abs() / lx).exp(),
            move |a, b| (-(a - b).abs() / ly).exp(),
            self.sigma_a,
            self.mean_log_kappa,
            self.n_par,
        )
    }

    pub fn problem(&self) -> Result<EllipticProblem> {
        if self.sources.len() != self.strengths.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sources.len(),
                got: self.strengths.len(),
                context: "source strengths",
            });
        }
        if !(self.mollifier > 0.0) {
            return Err(Error::invalid("mollifier width must be positive"));
        }
        let mesh = FvMesh::rectangle(-1.0, 1.0, 0.0, 1.0, self.nx, self.ny)?;
        let source = mesh.centers.iter().map(|x| self.source_density(x)).collect();
        EllipticProblem::new(
            mesh,
            vec![
                (Side::Left, BoundaryCondition::Dirichlet(0.0)),
                (Side::Right, BoundaryCondition::Dirichlet(0.0)),
                (Side::Bottom, BoundaryCondition::Dirichlet(0.0)),
                (Side::Top, BoundaryCondition::Neumann(0.0)),
            ],
            source,
        )
    }

    pub fn build(&self) -> Result<EllipticModel> {
        let problem = self.problem()?;
        let qoi = QoiExtractor::top_trace(&problem.mesh)?;
        EllipticModel::new(problem, self.input_kle()?, qoi)
    }
}

/// Injection into an annular tissue cross-section, output on an inner annulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiotransportConfig {
    /// Correlation length of the log-permeability (mm).
    pub ell: f64,
    /// Outer radius of the output annulus (mm).
    pub r_out: f64,
    pub r_needle: f64,
    pub r_tumor: f64,
    pub nr: usize,
    pub nphi: usize,
    /// Polar mesh for the kernel eigenproblem; modes are carried to the
    /// solver mesh by Nyström extension when the two differ.
    pub kle_nr: usize,
    pub kle_nphi: usize,
    pub n_par: usize,
    pub sigma_a2: f64,
    /// Nominal permeability; the log-field mean is `ln κ₀ + σ_a²` (mode at κ₀).
    pub kappa_nominal: f64,
    pub eta: f64,
    pub q: f64,
}

pub fn biotransport_config(ell: f64, r_out: f64) -> BiotransportConfig {
    BiotransportConfig {
        ell,
        r_out,
        r_needle: 0.25,
        r_tumor: 5.0,
        nr: 96,
        nphi: 192,
        kle_nr: 48,
        kle_nphi: 96,
        n_par: 150,
        sigma_a2: 0.25,
        kappa_nominal: 0.5,
        eta: 8.9e-4,
        q: 1.0,
    }
}

impl BiotransportConfig {
    pub fn mean_log_kappa(&self) -> f64 {
        self.kappa_nominal.ln() + self.sigma_a2
    }

    /// Injected flux per unit needle-boundary length, `Qη / (2π R_needle)`.
    pub fn injection_flux(&self) -> f64 {
        self.q * self.eta / (2.0 * PI * self.r_needle)
    }

    /// Needle-wall pressure gradient `Qη / (2π R_needle κ)` for a given κ.
    pub fn neumann_gradient(&self, kappa: f64) -> f64 {
        self.injection_flux() / kappa
    }

    pub fn mesh(&self) -> Result<FvMesh> {
        FvMesh::annulus(self.r_needle, self.r_tumor, self.nr, self.nphi, true)
    }

    pub fn problem(&self) -> Result<EllipticProblem> {
        let mesh = self.mesh()?;
        let n = mesh.n_cells();
        EllipticProblem::new(
            mesh,
            vec![
                (Side::Inner, BoundaryCondition::Neumann(self.injection_flux())),
                (Side::Outer, BoundaryCondition::Dirichlet(0.0)),
            ],
            vec![0.0; n],
        )
    }

    pub fn input_kle(&self, mesh: &FvMesh) -> Result<InputFieldKLE> {
        let ell = self.ell;
        let kernel = move |x: &[f64; 2], y: &[f64; 2]| (-((x[0] - y[0]).abs() + (x[1] - y[1]).abs()) / ell).exp();
        let target = mesh.cell_grid()?;
        let quad = FvMesh::annulus(self.r_needle, self.r_tumor, self.kle_nr, self.kle_nphi, true)?.cell_grid()?;
        let mean = self.mean_log_kappa();
        let kle = kle_from_kernel(&quad, kernel, self.sigma_a2.sqrt(), mean, self.n_par)?;
        if quad.points() == target.points() {
            return Ok(kle);
        }
        nystrom_extend(&kle, &target, kernel, mean)
    }

    pub fn build(&self) -> Result<EllipticModel> {
        let problem = self.problem()?;
        let input = self.input_kle(&problem.mesh)?;
        let r_out = self.r_out;
        let qoi = QoiExtractor::restriction(&problem.mesh, |x| x[0].hypot(x[1]) <= r_out)?;
        EllipticModel::new(problem, input, qoi)
    }

    /// Cells nearest to radii `R_needle`, 0.75 mm and 2.5 mm on the ray φ = 0.
    pub fn probe_cells(&self, mesh: &FvMesh) -> Result<Vec<usize>> {
        let radii = mesh.ring_radii().ok_or_else(|| Error::invalid("probe placement needs an annulus mesh"))?;
        Ok([self.r_needle, 0.75, 2.5]
            .iter()
            .map(|&r| {
                (0..radii.len())
                    .min_by(|&a, &b| (radii[a] - r).abs().total_cmp(&(radii[b] - r).abs()))
                    .expect("nonempty mesh")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{sample_stream, open_unit};

    fn small_subsurface() -> SubsurfaceConfig {
        SubsurfaceConfig {
            nx: 24,
            ny: 12,
            n_par: 20,
            ..subsurface_config()
        }
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = sample_stream(seed, 0);
        (0..n).map(|_| open_unit(&mut rng) - 0.5).collect()
    }

    #[test]
    fn zero_data_gives_zero_pressure() {
        let mesh = FvMesh::rectangle(-1.0, 1.0, 0.0, 1.0, 10, 6).unwrap();
        let n = mesh.n_cells();
        let prob = EllipticProblem::new(
            mesh,
            vec![
                (Side::Left, BoundaryCondition::Dirichlet(0.0)),
                (Side::Right, BoundaryCondition::Dirichlet(0.0)),
                (Side::Bottom, BoundaryCondition::Dirichlet(0.0)),
                (Side::Top, BoundaryCondition::Neumann(0.0)),
            ],
            vec![0.0; n],
        )
        .unwrap();
        let p = prob.solve_forward(&random_vec(n, 1), LinearSolver::default()).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn requires_dirichlet_boundary() {
        let mesh = FvMesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4).unwrap();
        let bcs = [Side::Left, Side::Right, Side::Bottom, Side::Top]
            .map(|s| (s, BoundaryCondition::Neumann(0.0)))
            .to_vec();
        assert!(EllipticProblem::new(mesh, bcs, vec![0.0; 16]).is_err());
    }

    #[test]
    fn matrix_is_symmetric_and_solvers_agree() {
        let prob = small_subsurface().problem().unwrap();
        let a = random_vec(prob.n_cells(), 3);
        let (m, rhs, _) = prob.assemble(&a).unwrap();
        assert_eq!(m.asymmetry(), 0.0);
        let p1 = prob.solve_with(&a, &rhs, LinearSolver::Direct).unwrap();
        let p2 = prob.solve_with(&a, &rhs, LinearSolver::PCG).unwrap();
        let scale = p1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(p1.iter().zip(&p2).all(|(x, y)| (x - y).abs() < 1e-8 * scale));
    }

    #[test]
    fn self_adjoint_solves() {
        let prob = small_subsurface().problem().unwrap();
        let a = random_vec(prob.n_cells(), 5);
        let u = random_vec(prob.n_cells(), 6);
        let v = random_vec(prob.n_cells(), 7);
        let su = prob.solve_with(&a, &u, LinearSolver::Direct).unwrap();
        let sv = prob.solve_with(&a, &v, LinearSolver::Direct).unwrap();
        let l: f64 = su.iter().zip(&v).map(|(x, y)| x * y).sum();
        let r: f64 = u.iter().zip(&sv).map(|(x, y)| x * y).sum();
        assert!((l - r).abs() < 1e-10 * l.abs().max(r.abs()));
    }

    #[test]
    fn restriction_adjoint_identity() {
        let mesh = FvMesh::annulus(0.25, 5.0, 12, 24, true).unwrap();
        let qoi = QoiExtractor::restriction(&mesh, |x| x[0].hypot(x[1]) <= 2.0).unwrap();
        let u = random_vec(mesh.n_cells(), 8);
        let phi = random_vec(qoi.cells.len(), 9);
        let lhs = qoi.grid.inner(&qoi.extract(&u), &phi).unwrap();
        let rhs = mesh.inner(&u, &qoi.adjoint_extend(&phi, mesh.n_cells()));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn adjoint_is_linear_and_zero_for_zero_mode() {
        let cfg = small_subsurface();
        let prob = cfg.problem().unwrap();
        let qoi = QoiExtractor::top_trace(&prob.mesh).unwrap();
        let a = random_vec(prob.n_cells(), 10);
        let zero = prob.solve_adjoint_trace(&a, &qoi, &vec![0.0; qoi.cells.len()], 1.0, LinearSolver::Direct).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let phi = random_vec(qoi.cells.len(), 11);
        let q1 = prob.solve_adjoint_trace(&a, &qoi, &phi, 1.0, LinearSolver::Direct).unwrap();
        let phi2: Vec<f64> = phi.iter().map(|v| 2.0 * v).collect();
        let q2 = prob.solve_adjoint_trace(&a, &qoi, &phi2, 1.0, LinearSolver::Direct).unwrap();
        assert!(q1.iter().zip(&q2).all(|(x, y)| (2.0 * x - y).abs() <= 1e-14 * y.abs().max(1e-300) * 10.0));
        assert!(prob.solve_adjoint_restriction(&a, &qoi, &phi, 1.0, LinearSolver::Direct).is_err());
    }

    #[test]
    fn adjoint_maximum_principle() {
        let cfg = small_subsurface();
        let prob = cfg.problem().unwrap();
        let qoi = QoiExtractor::top_trace(&prob.mesh).unwrap();
        let a = random_vec(prob.n_cells(), 12);
        let phi: Vec<f64> = (0..qoi.cells.len()).map(|k| if k % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let q = prob.solve_adjoint_trace(&a, &qoi, &phi, 0.7, LinearSolver::Direct).unwrap();
        assert!(q.iter().all(|v| *v <= 0.0));
        assert!(q.iter().any(|v| *v < 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = small_subsurface().build().unwrap();
        let theta = random_vec(model.input.n_par(), 13);
        let p = model.pressure(&theta).unwrap();
        let phi: Vec<f64> = model.qoi.grid.abscissae().iter().map(|x| (PI * x).cos()).collect();
        let a = model.log_kappa(&theta).unwrap();
        let q = model
            .problem
            .solve_adjoint_trace(&a, &model.qoi, &phi, 1.0, LinearSolver::Direct)
            .unwrap();
        let g = model.problem.mode_gradient(&a, &p, &q, &model.input).unwrap();
        let f = |th: &[f64]| {
            let out = model.evaluate(th).unwrap();
            model.qoi.grid.inner(&out, &phi).unwrap()
        };
        let h = 1e-4;
        for j in [0, 3, 7, 19] {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-5 * fd.abs().max(1e-10), "j={j}: {} vs {fd}", g[j]);
        }
        let zero = model.problem.mode_gradient(&a, &p, &vec![0.0; p.len()], &model.input).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn radial_solution_on_annulus() {
        let cfg = BiotransportConfig {
            nr: 32,
            nphi: 64,
            ..biotransport_config(0.5, 3.0)
        };
        let prob = cfg.problem().unwrap();
        let kappa: f64 = 0.5;
        let p = prob.solve_forward(&vec![kappa.ln(); prob.n_cells()], LinearSolver::default()).unwrap();
        let c = cfg.injection_flux() / kappa;
        let mut worst = 0.0f64;
        let mut pmax = 0.0f64;
        for (x, v) in prob.mesh.centers.iter().zip(&p) {
            let exact = c * cfg.r_needle * (cfg.r_tumor / x[0].hypot(x[1])).ln();
            worst = worst.max((v - exact).abs());
            pmax = pmax.max(exact.abs());
        }
        assert!(worst < 0.01 * pmax, "{}", worst / pmax);
        assert!((cfg.mean_log_kappa() - (0.5f64.ln() + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn annulus_seam_is_coupled_and_solvers_agree() {
        let prob = BiotransportConfig {
            nr: 10,
            nphi: 40,
            ..biotransport_config(0.5, 3.0)
        }
        .problem()
        .unwrap();
        let a: Vec<f64> = (0..prob.n_cells()).map(|c| 0.3 * (c as f64 * 0.61).sin()).collect();
        let (m, rhs, _) = prob.assemble(&a).unwrap();
        // cell (ring 3, angle 0) and (ring 3, angle nφ-1)
        assert!(m.get(3, 39 * 10 + 3) < 0.0);
        let direct = prob.solve_with(&a, &rhs, LinearSolver::Direct).unwrap();
        let iterative = prob.solve_with(&a, &rhs, LinearSolver::PCG).unwrap();
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (d, i) in direct.iter().zip(&iterative) {
            assert!((d - i).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn solve_counter_counts_linear_solves() {
        let model = small_subsurface().build().unwrap();
        let th = vec![0.1; model.input.n_par()];
        model.problem.reset_solve_count();
        let (qoi, p) = model.forward(&th).unwrap();
        assert_eq!(model.problem.solve_count(), 1);
        let grid = model.qoi.grid.clone();
        let modes: Vec<Vec<f64>> = (1..=3)
            .map(|k| {
                let v: Vec<f64> = grid.abscissae().iter().map(|x| (k as f64 * PI * (x + 1.0) / 2.0).sin()).collect();
                let n = grid.norm(&v).unwrap();
                v.iter().map(|a| a / n).collect()
            })
            .collect();
        let kle = KLExpansion {
            grid,
            mean: qoi.clone(),
            eigenvalues: vec![1.0, 0.5, 0.25],
            modes,
            trace: 1.75,
            spectrum: vec![1.0, 0.5, 0.25],
        };
        model.mode_gradients(&th, &p, &kle).unwrap();
        assert_eq!(model.problem.solve_count(), 4);
    }
}

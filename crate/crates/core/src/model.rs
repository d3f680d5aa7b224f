//! Model interfaces shared by the estimators.

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kle::KLExpansion;

/// A parametrised process `θ ↦ f(·, θ)` sampled on a fixed grid.
pub trait FunctionalModel: Sync {
    fn n_par(&self) -> usize;
    fn grid(&self) -> &SpatialGrid;
    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Models that also return pointwise derivatives, `grad[j][k] = ∂f(s_k)/∂θ_j`.
pub trait PointwiseGradientModel: FunctionalModel {
    fn evaluate_with_gradient(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

/// Models that provide gradients of KL coefficients `f_i(θ)` directly,
/// typically one adjoint solve per mode after a single forward solve.
pub trait ModeGradientModel: FunctionalModel {
    /// Whatever the forward solve leaves behind for the gradient phase.
    type State: Send + Sync;

    fn forward(&self, theta: &[f64]) -> Result<(Vec<f64>, Self::State)>;

    /// `out[i][j] = ∂f_i/∂θ_j` for every retained mode of `kle`.
    fn mode_gradients(&self, theta: &[f64], state: &Self::State, kle: &KLExpansion) -> Result<Vec<Vec<f64>>>;
}

/// Mode gradients by projecting pointwise derivatives onto the KL modes.
pub struct PointwiseAdapter<'a, M>(pub &'a M);

impl<M: PointwiseGradientModel> FunctionalModel for PointwiseAdapter<'_, M> {
    fn n_par(&self) -> usize {
        self.0.n_par()
    }

    fn grid(&self) -> &SpatialGrid {
        self.0.grid()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.0.evaluate(theta)
    }
}

impl<M: PointwiseGradientModel> ModeGradientModel for PointwiseAdapter<'_, M> {
    type State = Vec<Vec<f64>>;

    fn forward(&self, theta: &[f64]) -> Result<(Vec<f64>, Self::State)> {
        self.0.evaluate_with_gradient(theta)
    }

    fn mode_gradients(&self, _theta: &[f64], grad: &Self::State, kle: &KLExpansion) -> Result<Vec<Vec<f64>>> {
        kle.eigenvalues
            .iter()
            .zip(&kle.modes)
            .enumerate()
            .map(|(i, (&lam, phi))| {
                if !(lam > 0.0) {
                    return Err(Error::Degenerate(format!("KL mode {} has zero eigenvalue", i + 1)));
                }
                let sigma = lam.sqrt();
                grad.iter().map(|g| Ok(kle.grid.inner(g, phi)? / sigma)).collect()
            })
            .collect()
    }
}

/// A model defined by closures, for analytic test processes.
pub struct ClosureModel<F, G = fn(&[f64]) -> Result<Vec<Vec<f64>>>> {
    grid: SpatialGrid,
    n_par: usize,
    f: F,
    grad: Option<G>,
}

impl<F> ClosureModel<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    pub fn new(grid: SpatialGrid, n_par: usize, f: F) -> Self {
        Self {
            grid,
            n_par,
            f,
            grad: None,
        }
    }
}

impl<F, G> ClosureModel<F, G>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    G: Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Sync,
{
    pub fn with_gradient(grid: SpatialGrid, n_par: usize, f: F, grad: G) -> Self {
        Self {
            grid,
            n_par,
            f,
            grad: Some(grad),
        }
    }
}

impl<F, G> FunctionalModel for ClosureModel<F, G>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    G: Sync,
{
    fn n_par(&self) -> usize {
        self.n_par
    }

    fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.n_par {
            return Err(Error::DimensionMismatch {
                expected: self.n_par,
                got: theta.len(),
                context: "model input",
            });
        }
        (self.f)(theta)
    }
}

impl<F, G> PointwiseGradientModel for ClosureModel<F, G>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    G: Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn evaluate_with_gradient(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let f = self.evaluate(theta)?;
        let g = match &self.grad {
            Some(g) => g(theta)?,
            None => return Err(Error::invalid("closure model has no gradient")),
        };
        Ok((f, g))
    }
}

/// The analytic two-input test process `f(s, θ) = θ₁ sin(πs) + ½ θ₂ s` on a grid.
pub fn toy_process(
    grid: SpatialGrid,
) -> ClosureModel<impl Fn(&[f64]) -> Result<Vec<f64>> + Sync, impl Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Sync> {
    use std::f64::consts::PI;
    let s = grid.abscissae();
    let s2 = s.clone();
    ClosureModel::with_gradient(
        grid,
        2,
        move |t: &[f64]| Ok(s.iter().map(|x| t[0] * (PI * x).sin() + 0.5 * t[1] * x).collect()),
        move |_t: &[f64]| {
            Ok(vec![
                s2.iter().map(|x| (PI * x).sin()).collect(),
                s2.iter().map(|x| 0.5 * x).collect(),
            ])
        },
    )
}

//! Five-compartment cholera model (S, I, R, B_H, B_L) with eight uncertain
//! rates, solved together with its forward sensitivity equations.
//!
//! Uncertain inputs are `c = (β_L, β_H, κ_L, b, χ, ξ, δ, γ)`, each an affine
//! image of `θ_i ∈ [-1, 1]`. `κ_H = κ_L / 700` follows `κ_L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_interval_grid, SpatialGrid};
use crate::model::{FunctionalModel, PointwiseGradientModel};
use crate::ode::{dopri5, OdeOptions};

pub const N_UNCERTAIN: usize = 8;
pub const N_STATE: usize = 5;
pub const PARAM_NAMES: [&str; N_UNCERTAIN] = ["beta_L", "beta_H", "kappa_L", "b", "chi", "xi", "delta", "gamma"];

/// Ratio `κ_L / κ_H`.
const KAPPA_RATIO: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CholeraParams {
    pub beta_l: f64,
    pub beta_h: f64,
    pub kappa_l: f64,
    pub b: f64,
    pub chi: f64,
    pub xi: f64,
    pub delta: f64,
    pub gamma: f64,
    pub n_pop: f64,
    /// (S₀, I₀, R₀, B_H₀, B_L₀)
    pub initial: [f64; N_STATE],
}

impl CholeraParams {
    /// Reference rates (per week) and a single initial infection in 10 000 people.
    pub fn nominal() -> Self {
        let n_pop = 10_000.0;
        Self {
            beta_l: 1.5,
            beta_h: 7.5,
            kappa_l: 1e6,
            b: 1.0 / 1560.0,
            chi: 168.0 / 5.0,
            xi: 70.0,
            delta: 7.0 / 30.0,
            gamma: 7.0 / 5.0,
            n_pop,
            initial: [n_pop - 1.0, 1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn kappa_h(&self) -> f64 {
        self.kappa_l / KAPPA_RATIO
    }

    pub fn uncertain(&self) -> [f64; N_UNCERTAIN] {
        [self.beta_l, self.beta_h, self.kappa_l, self.b, self.chi, self.xi, self.delta, self.gamma]
    }

    pub fn with_uncertain(&self, c: &[f64; N_UNCERTAIN]) -> Self {
        Self {
            beta_l: c[0],
            beta_h: c[1],
            kappa_l: c[2],
            b: c[3],
            chi: c[4],
            xi: c[5],
            delta: c[6],
            gamma: c[7],
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.uncertain();
        if let Some(i) = c.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("cholera rate {} must be nonnegative, got {}", PARAM_NAMES[i], c[i])));
        }
        if !(self.kappa_l > 0.0) {
            return Err(Error::invalid("kappa_L must be positive"));
        }
        Ok(())
    }

    /// Right-hand side `g(y; c)`.
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let (s, i, r, bh, bl) = (y[0], y[1], y[2], y[3], y[4]);
        let kh = self.kappa_h();
        let inf_l = self.beta_l * s * bl / (self.kappa_l + bl);
        let inf_h = self.beta_h * s * bh / (kh + bh);
        dy[0] = self.b * self.n_pop - inf_l - inf_h - self.b * s;
        dy[1] = inf_l + inf_h - (self.gamma + self.b) * i;
        dy[2] = self.gamma * i - self.b * r;
        dy[3] = self.xi * i - self.chi * bh;
        dy[4] = self.chi * bh - self.delta * bl;
    }

    /// State Jacobian `∂g/∂y`, row-major.
    pub fn jacobian(&self, y: &[f64]) -> [[f64; N_STATE]; N_STATE] {
        let (s, bh, bl) = (y[0], y[3], y[4]);
        let kh = self.kappa_h();
        let dl_ds = self.beta_l * bl / (self.kappa_l + bl);
        let dh_ds = self.beta_h * bh / (kh + bh);
        let dl_dbl = self.beta_l * s * self.kappa_l / (self.kappa_l + bl).powi(2);
        let dh_dbh = self.beta_h * s * kh / (kh + bh).powi(2);
        [
            [-dl_ds - dh_ds - self.b, 0.0, 0.0, -dh_dbh, -dl_dbl],
            [dl_ds + dh_ds, -(self.gamma + self.b), 0.0, dh_dbh, dl_dbl],
            [0.0, self.gamma, -self.b, 0.0, 0.0],
            [0.0, self.xi, 0.0, -self.chi, 0.0],
            [0.0, 0.0, 0.0, self.chi, -self.delta],
        ]
    }

    /// `∂g/∂c_k` for each uncertain rate (κ_H moves with κ_L).
    pub fn parameter_derivatives(&self, y: &[f64]) -> [[f64; N_STATE]; N_UNCERTAIN] {
        let (s, i, r, bh, bl) = (y[0], y[1], y[2], y[3], y[4]);
        let kh = self.kappa_h();
        let fl = s * bl / (self.kappa_l + bl);
        let fh = s * bh / (kh + bh);
        let d_kappa = -self.beta_l * s * bl / (self.kappa_l + bl).powi(2)
            - self.beta_h * s * bh / (kh + bh).powi(2) / KAPPA_RATIO;
        [
            [-fl, fl, 0.0, 0.0, 0.0],
            [-fh, fh, 0.0, 0.0, 0.0],
            [-d_kappa, d_kappa, 0.0, 0.0, 0.0],
            [self.n_pop - s, -i, -r, 0.0, 0.0],
            [0.0, 0.0, 0.0, -bh, bh],
            [0.0, 0.0, 0.0, i, 0.0],
            [0.0, 0.0, 0.0, 0.0, -bl],
            [0.0, -i, i, 0.0, 0.0],
        ]
    }
}

/// Physical interval `[a_i, b_i]` for each uncertain rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterRanges {
    pub lower: [f64; N_UNCERTAIN],
    pub upper: [f64; N_UNCERTAIN],
}

impl ParameterRanges {
    /// Symmetric relative band `nominal·(1 ± rel)` around every rate.
    pub fn relative(base: &CholeraParams, rel: f64) -> Result<Self> {
        if !(rel >= 0.0 && rel < 1.0) {
            return Err(Error::invalid(format!("relative range must be in [0, 1), got {rel}")));
        }
        let c = base.uncertain();
        Ok(Self {
            lower: c.map(|v| v * (1.0 - rel)),
            upper: c.map(|v| v * (1.0 + rel)),
        })
    }

    /// Nominal ±10%.
    pub fn default_ranges() -> Self {
        Self::relative(&CholeraParams::nominal(), 0.1).expect("valid default band")
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..N_UNCERTAIN {
            if !(self.lower[k] <= self.upper[k]) || !self.lower[k].is_finite() || !self.upper[k].is_finite() {
                return Err(Error::invalid(format!(
                    "range for {} must satisfy a <= b, got [{}, {}]",
                    PARAM_NAMES[k], self.lower[k], self.upper[k]
                )));
            }
        }
        Ok(())
    }

    /// `dc_i/dθ_i = (b_i - a_i)/2`.
    pub fn half_widths(&self) -> [f64; N_UNCERTAIN] {
        std::array::from_fn(|k| 0.5 * (self.upper[k] - self.lower[k]))
    }
}

/// `c_i = (a_i + b_i)/2 + (b_i - a_i)/2 · θ_i`, on top of `base` for the
/// non-uncertain settings (population, initial state).
pub fn map_theta_to_params(theta: &[f64], ranges: &ParameterRanges, base: &CholeraParams) -> Result<CholeraParams> {
    if theta.len() != N_UNCERTAIN {
        return Err(Error::DimensionMismatch {
            expected: N_UNCERTAIN,
            got: theta.len(),
            context: "cholera theta",
        });
    }
    ranges.validate()?;
    if let Some(t) = theta.iter().find(|t| !(t.abs() <= 1.0)) {
        return Err(Error::invalid(format!("theta component {t} lies outside [-1, 1]")));
    }
    let c: [f64; N_UNCERTAIN] = std::array::from_fn(|k| {
        // Endpoint-exact form of (a+b)/2 + (b-a)/2·θ.
        0.5 * (1.0 - theta[k]) * ranges.lower[k] + 0.5 * (1.0 + theta[k]) * ranges.upper[k]
    });
    let p = base.with_uncertain(&c);
    p.validate()?;
    Ok(p)
}

/// State trajectory at the requested output times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<[f64; N_STATE]>,
}

impl Trajectory {
    pub fn infected(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[1]).collect()
    }
}

/// States plus `sensitivities[t][j] = ∂y(t)/∂θ_j`.
#[derive(Debug, Clone)]
pub struct SensitivityTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<[f64; N_STATE]>,
    pub sensitivities: Vec<[[f64; N_STATE]; N_UNCERTAIN]>,
}

impl SensitivityTrajectory {
    pub fn infected(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[1]).collect()
    }

    /// `out[j][t] = ∂I(t)/∂θ_j`.
    pub fn infected_sensitivities(&self) -> Vec<Vec<f64>> {
        (0..N_UNCERTAIN)
            .map(|j| self.sensitivities.iter().map(|s| s[j][1]).collect())
            .collect()
    }
}

pub fn solve_forward(params: &CholeraParams, times: &[f64], opts: &OdeOptions) -> Result<Trajectory> {
    params.validate()?;
    let (ys, _) = dopri5(|_, y, dy| params.rhs(y, dy), 0.0, &params.initial, times, opts)?;
    Ok(Trajectory {
        times: times.to_vec(),
        states: ys.into_iter().map(|v| [v[0], v[1], v[2], v[3], v[4]]).collect(),
    })
}

/// Integrate the 45-dimensional augmented system `y' = g`, `s_j' = J s_j + ∂g/∂θ_j`.
pub fn solve_with_sensitivities(
    ranges: &ParameterRanges,
    base: &CholeraParams,
    theta: &[f64],
    times: &[f64],
    opts: &OdeOptions,
) -> Result<SensitivityTrajectory> {
    let params = map_theta_to_params(theta, ranges, base)?;
    let scale = ranges.half_widths();
    let mut y0 = vec![0.0; N_STATE * (1 + N_UNCERTAIN)];
    y0[..N_STATE].copy_from_slice(&params.initial);
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let (state, sens) = y.split_at(N_STATE);
        params.rhs(state, &mut dy[..N_STATE]);
        let jac = params.jacobian(state);
        let dg = params.parameter_derivatives(state);
        for j in 0..N_UNCERTAIN {
            let s = &sens[j * N_STATE..(j + 1) * N_STATE];
            let out = &mut dy[N_STATE * (j + 1)..N_STATE * (j + 2)];
            for r in 0..N_STATE {
                let js: f64 = (0..N_STATE).map(|c| jac[r][c] * s[c]).sum();
                out[r] = js + dg[j][r] * scale[j];
            }
        }
    };
    let (ys, _) = dopri5(rhs, 0.0, &y0, times, opts)?;
    let mut states = Vec::with_capacity(ys.len());
    let mut sensitivities = Vec::with_capacity(ys.len());
    for v in ys {
        states.push(std::array::from_fn(|r| v[r]));
        sensitivities.push(std::array::from_fn(|j| std::array::from_fn(|r| v[N_STATE * (j + 1) + r])));
    }
    Ok(SensitivityTrajectory {
        times: times.to_vec(),
        states,
        sensitivities,
    })
}

/// Infected-population process `θ ↦ I(·, θ)` on a uniform time grid.
#[derive(Debug, Clone)]
pub struct CholeraModel {
    pub ranges: ParameterRanges,
    pub base: CholeraParams,
    pub options: OdeOptions,
    grid: SpatialGrid,
}

impl CholeraModel {
    pub fn new(ranges: ParameterRanges, base: CholeraParams, t_final: f64, n_times: usize, options: OdeOptions) -> Result<Self> {
        ranges.validate()?;
        base.validate()?;
        if !(t_final > 0.0) {
            return Err(Error::invalid(format!("t_final must be positive, got {t_final}")));
        }
        Ok(Self {
            ranges,
            base,
            options,
            grid: make_interval_grid(0.0, t_final, n_times)?,
        })
    }

    /// Default ranges, 601 output times on [0, 150].
    pub fn standard() -> Self {
        Self::new(
            ParameterRanges::default_ranges(),
            CholeraParams::nominal(),
            150.0,
            601,
            OdeOptions::default(),
        )
        .expect("valid default cholera setup")
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.abscissae()
    }
}

impl FunctionalModel for CholeraModel {
    fn n_par(&self) -> usize {
        N_UNCERTAIN
    }

    fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = map_theta_to_params(theta, &self.ranges, &self.base)?;
        Ok(solve_forward(&p, &self.times(), &self.options)?.infected())
    }
}

impl PointwiseGradientModel for CholeraModel {
    fn evaluate_with_gradient(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let traj = solve_with_sensitivities(&self.ranges, &self.base, theta, &self.times(), &self.options)?;
        Ok((traj.infected(), traj.infected_sensitivities()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times() -> Vec<f64> {
        make_interval_grid(0.0, 150.0, 601).unwrap().abscissae()
    }

    #[test]
    fn midpoint_theta_gives_nominal() {
        let r = ParameterRanges::default_ranges();
        let nominal = CholeraParams::nominal();
        let p = map_theta_to_params(&[0.0; 8], &r, &nominal).unwrap();
        for (a, b) in p.uncertain().iter().zip(nominal.uncertain()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        let mut th = [0.0; 8];
        th[0] = 1.0;
        let p = map_theta_to_params(&th, &r, &nominal).unwrap();
        assert_eq!(p.beta_l, r.upper[0]);
        assert!((r.lower[0] - 1.35).abs() < 1e-14 && (r.upper[0] - 1.65).abs() < 1e-14);
        th[0] = 1.5;
        assert!(map_theta_to_params(&th, &r, &nominal).is_err());
    }

    #[test]
    fn initial_state_and_conservation() {
        let p = CholeraParams::nominal();
        let traj = solve_forward(&p, &times(), &OdeOptions::default()).unwrap();
        assert_eq!(traj.states[0][0], 9999.0);
        assert_eq!(traj.states[0][1], 1.0);
        for s in &traj.states {
            assert!(((s[0] + s[1] + s[2]) - 1e4).abs() < 1e-6 * 1e4);
        }
        // An outbreak actually happens.
        let peak = traj.infected().into_iter().fold(0.0, f64::max);
        assert!(peak > 100.0, "peak {peak}");
    }

    #[test]
    fn no_shedding_means_no_outbreak() {
        let mut p = CholeraParams::nominal();
        p.xi = 0.0;
        let traj = solve_forward(&p, &times(), &OdeOptions::default()).unwrap();
        let inf = traj.infected();
        assert!(traj.states.iter().all(|s| s[3] == 0.0 && s[4] == 0.0));
        // Strictly decreasing until it reaches the absolute-tolerance floor.
        let floor = 1e3 * OdeOptions::default().atol;
        for w in inf.windows(2) {
            assert!(w[1] < w[0] || w[0].abs() < floor, "{w:?}");
        }
        assert!(inf[600].abs() < floor);
    }

    #[test]
    fn sensitivities_start_at_zero_and_match_fd() {
        let r = ParameterRanges::default_ranges();
        let base = CholeraParams::nominal();
        let ts = vec![0.0, 50.0];
        let opts = OdeOptions {
            rtol: 1e-11,
            atol: 1e-12,
            ..Default::default()
        };
        let theta = [0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.0, -0.1];
        let st = solve_with_sensitivities(&r, &base, &theta, &ts, &opts).unwrap();
        assert!(st.sensitivities[0].iter().flatten().all(|v| *v == 0.0));
        let h = 1e-5;
        for j in 0..8 {
            let mut tp = theta;
            let mut tm = theta;
            tp[j] += h;
            tm[j] -= h;
            let ip = solve_forward(&map_theta_to_params(&tp, &r, &base).unwrap(), &ts, &opts).unwrap().states[1][1];
            let im = solve_forward(&map_theta_to_params(&tm, &r, &base).unwrap(), &ts, &opts).unwrap().states[1][1];
            let fd = (ip - im) / (2.0 * h);
            let an = st.sensitivities[1][j][1];
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "j={j}: {an} vs {fd}");
        }
    }

    #[test]
    fn zero_width_range_has_zero_sensitivity() {
        let mut r = ParameterRanges::default_ranges();
        r.lower[2] = 1e6;
        r.upper[2] = 1e6;
        let st = solve_with_sensitivities(&r, &CholeraParams::nominal(), &[0.1; 8], &times(), &OdeOptions::default())
            .unwrap();
        assert!(st.sensitivities.iter().all(|s| s[2].iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn tighter_tolerance_converges() {
        let p = CholeraParams::nominal();
        let end = |rtol: f64| {
            let o = OdeOptions {
                rtol,
                atol: rtol * 1e-2,
                ..Default::default()
            };
            solve_forward(&p, &[150.0], &o).unwrap().states[0][1]
        };
        let (a, b, c) = (end(1e-6), end(1e-7), end(1e-8));
        assert!((c - b).abs() < 10.0 * (b - a).abs() + 1e-9);
    }
}

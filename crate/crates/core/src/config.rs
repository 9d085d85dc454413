//! Run configuration and the benchmark registry.
//!
//! Configurations round-trip through JSON; each named problem carries the
//! standard parameter set as defaults, so a config file only has to name the
//! problem and override what differs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::gray::{GrayState, GraySolver, IterationControl};
use crate::linear::{LinearMaterial, LinearSolver};
use crate::mesh::{
    BoundaryKind, BoundarySpec, Grid, MaterialState, MomentField, OpacityField, PhysConsts,
};
use crate::moment::{build_system_1d, build_system_2d};
use crate::recon::{Limiter, Reconstruction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    ApTest,
    PlaneSource,
    Marshak2a,
    Marshak2b,
    LineSource,
    Lattice,
    Riemann2d,
    Riemann1d,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpacitySpec {
    Constant { sigma: f64 },
    RhoOverT3 { rho: f64 },
}

/// Initial data for `custom` runs; named problems carry their own data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomInit {
    UniformI0 { value: f64 },
    Gaussian { theta: f64 },
    EquilibriumSine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: ProblemId,
    pub model: ModelKind,
    pub epsilon: f64,
    pub expansion_order: usize,
    /// interior cells per axis; mesh[1] = 1 in 1D
    pub mesh: [usize; 2],
    /// [[x_min, x_max], [y_min, y_max]]
    pub domain: [[f64; 2]; 2],
    pub cfl: f64,
    pub order: u8,
    pub t_end: f64,
    pub snapshots: Vec<f64>,
    /// x-low, x-high, y-low, y-high
    pub boundary: [BoundaryKind; 4],
    pub a: f64,
    pub c: f64,
    pub c_v: f64,
    /// gray model only; region structure comes from the named problem
    pub opacity: OpacitySpec,
    /// linear model only (uniform values; named problems override by region)
    pub sigma_s: f64,
    pub sigma_a: f64,
    pub source: f64,
    pub iteration: IterationControl,
    pub reconstruction: Reconstruction,
    pub custom_init: CustomInit,
    /// opacity of the cold fast material for riemann_1d (10 on the
    /// lower slice line, 1 on the upper)
    pub riemann_sigma_right: f64,
    /// append the unscaled higher moments to 1D snapshot rows
    pub higher_moments: bool,
    pub rel_tol: f64,
}

impl ProblemConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| SolverError::Config(format!("bad config: {e}")))
    }

    /// Named-problem defaults; `custom` starts from a smooth linear setup.
    pub fn defaults(problem: ProblemId) -> Self {
        let base = ProblemConfig {
            problem,
            model: ModelKind::Linear,
            epsilon: 1.0,
            expansion_order: 7,
            mesh: [64, 1],
            domain: [[0.0, 2.0], [0.0, 1.0]],
            cfl: 0.4,
            order: 1,
            t_end: 0.5,
            snapshots: vec![0.5],
            boundary: [BoundaryKind::Periodic; 4],
            a: 1.0,
            c: 1.0,
            c_v: 0.1,
            opacity: OpacitySpec::Constant { sigma: 10.0 },
            sigma_s: 1.0,
            sigma_a: 0.0,
            source: 0.0,
            iteration: IterationControl::default(),
            reconstruction: Reconstruction::Linear(Limiter::None),
            custom_init: CustomInit::EquilibriumSine,
            riemann_sigma_right: 10.0,
            higher_moments: false,
            rel_tol: 1e-12,
        };
        match problem {
            ProblemId::ApTest => ProblemConfig {
                model: ModelKind::Gray,
                ..base
            },
            ProblemId::PlaneSource => ProblemConfig {
                expansion_order: 59,
                mesh: [1200, 1],
                domain: [[-6.0, 6.0], [0.0, 1.0]],
                t_end: 1.0,
                snapshots: vec![1.0],
                boundary: [BoundaryKind::Extrapolation; 4],
                reconstruction: Reconstruction::Linear(Limiter::Minmod),
                ..base
            },
            ProblemId::Marshak2a | ProblemId::Marshak2b => {
                let two_b = problem == ProblemId::Marshak2b;
                ProblemConfig {
                    model: ModelKind::Gray,
                    mesh: [400, 1],
                    domain: [[0.0, 0.6], [0.0, 1.0]],
                    t_end: if two_b { 100.0 } else { 1.0 },
                    snapshots: if two_b {
                        vec![10.0, 50.0, 100.0]
                    } else {
                        vec![0.2, 0.4, 0.6, 0.8, 1.0]
                    },
                    boundary: [
                        BoundaryKind::MarshakInflow { t_b: 1.0 },
                        BoundaryKind::Extrapolation,
                        BoundaryKind::Extrapolation,
                        BoundaryKind::Extrapolation,
                    ],
                    a: 0.01372,
                    c: 29.98,
                    opacity: OpacitySpec::RhoOverT3 {
                        rho: if two_b { 300.0 } else { 30.0 },
                    },
                    // temperatures sit in [1e-6, 1] keV and the runs take
                    // millions of transport-CFL steps; 1e-8 on |dT| is ample
                    iteration: IterationControl {
                        eps_bar: 1e-8,
                        n0: 500,
                    },
                    reconstruction: Reconstruction::Linear(Limiter::Minmod),
                    ..base
                }
            }
            ProblemId::LineSource => ProblemConfig {
                epsilon: 1e-6,
                mesh: [64, 64],
                domain: [[-2.0, 2.0], [-2.0, 2.0]],
                boundary: [BoundaryKind::Extrapolation; 4],
                reconstruction: Reconstruction::Linear(Limiter::Minmod),
                ..base
            },
            ProblemId::Lattice => ProblemConfig {
                expansion_order: 39,
                mesh: [280, 280],
                domain: [[0.0, 7.0], [0.0, 7.0]],
                t_end: 3.2,
                snapshots: vec![3.2],
                boundary: [BoundaryKind::Extrapolation; 4],
                reconstruction: Reconstruction::Linear(Limiter::Minmod),
                ..base
            },
            ProblemId::Riemann2d => ProblemConfig {
                model: ModelKind::Gray,
                expansion_order: 39,
                mesh: [300, 300],
                domain: [[-1.5, 1.5], [-1.5, 1.5]],
                t_end: 1.0,
                snapshots: vec![1.0],
                boundary: [
                    BoundaryKind::MarshakInflow { t_b: 1.0 },
                    BoundaryKind::MarshakInflow { t_b: 0.1 },
                    BoundaryKind::MarshakInflow { t_b: 1.0 },
                    BoundaryKind::MarshakInflow { t_b: 0.1 },
                ],
                c_v: 1.0,
                reconstruction: Reconstruction::Linear(Limiter::Minmod),
                ..base
            },
            ProblemId::Riemann1d => ProblemConfig {
                model: ModelKind::Gray,
                mesh: [1000, 1],
                domain: [[0.0, 2.5 * std::f64::consts::SQRT_2], [0.0, 1.0]],
                t_end: 1.0,
                snapshots: vec![1.0],
                order: 2,
                boundary: [
                    BoundaryKind::MarshakInflow { t_b: 1.0 },
                    BoundaryKind::MarshakInflow { t_b: 0.1 },
                    BoundaryKind::Extrapolation,
                    BoundaryKind::Extrapolation,
                ],
                c_v: 1.0,
                reconstruction: Reconstruction::Linear(Limiter::Minmod),
                ..base
            },
            ProblemId::Custom => base,
        }
    }

    pub fn is_2d(&self) -> bool {
        self.mesh[1] > 1
    }

    pub fn grid(&self) -> Result<Grid> {
        if self.is_2d() {
            Grid::new_2d(
                self.mesh,
                [self.domain[0][0], self.domain[1][0]],
                [self.domain[0][1], self.domain[1][1]],
            )
        } else {
            Grid::new_1d(self.mesh[0], self.domain[0][0], self.domain[0][1])
        }
    }

    pub fn consts(&self) -> PhysConsts {
        PhysConsts {
            a: self.a,
            c: self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0
            || self.cfl <= 0.0
            || self.t_end <= 0.0
            || self.a <= 0.0
            || self.c <= 0.0
            || self.c_v <= 0.0
        {
            return Err(SolverError::Config(
                "physical parameters must be positive".into(),
            ));
        }
        if !(self.order == 1 || self.order == 2) {
            return Err(SolverError::Config(format!("order {} not in {{1, 2}}", self.order)));
        }
        if self
            .snapshots
            .windows(2)
            .any(|w| w[1] <= w[0])
        {
            return Err(SolverError::Config("snapshots must be increasing".into()));
        }
        if self.snapshots.last().is_some_and(|t| *t > self.t_end + 1e-12) {
            return Err(SolverError::Config("snapshot beyond t_end".into()));
        }
        Ok(())
    }
}

/// the 11 absorber squares of the lattice layout, 1-indexed unit cells
const LATTICE_ABSORBERS: [(usize, usize); 11] = [
    (2, 2),
    (2, 4),
    (2, 6),
    (3, 3),
    (3, 5),
    (4, 2),
    (5, 3),
    (5, 5),
    (6, 2),
    (6, 4),
    (6, 6),
];

fn in_lattice_absorber(x: f64, y: f64) -> bool {
    LATTICE_ABSORBERS.iter().any(|&(cx, cy)| {
        x >= (cx - 1) as f64 && x < cx as f64 && y >= (cy - 1) as f64 && y < cy as f64
    })
}

/// 2D Riemann regions: hot black half-plane x + y < 0 (T = 1, sigma = 1),
/// upper-right split by the main diagonal into gray y >= x (sigma = 1) and
/// white y < x (sigma = 10), both cold (T = 0.1).
fn riemann_region(x: f64, y: f64) -> (f64, f64) {
    if x + y < 0.0 {
        (1.0, 1.0)
    } else if y >= x {
        (1.0, 0.1)
    } else {
        (10.0, 0.1)
    }
}

/// A fully built run: solver plus initial state.
pub enum BuiltProblem {
    Linear {
        solver: Box<LinearSolver>,
        field: MomentField,
    },
    Gray {
        solver: Box<GraySolver>,
        state: Box<GrayState>,
    },
}

pub fn build_problem(cfg: &ProblemConfig) -> Result<BuiltProblem> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let sys = if cfg.is_2d() {
        build_system_2d(cfg.expansion_order)?
    } else {
        build_system_1d(cfg.expansion_order)?
    };
    let bc = BoundarySpec {
        sides: cfg.boundary,
    };
    let consts = cfg.consts();
    let n_total = grid.n_total();

    match cfg.model {
        ModelKind::Linear => {
            let mut mat = LinearMaterial {
                sigma_s: vec![cfg.sigma_s; n_total],
                sigma_a: vec![cfg.sigma_a; n_total],
                source: vec![cfg.source; n_total],
            };
            let mut field = MomentField::zeros(&grid, sys.n_moments());
            match cfg.problem {
                ProblemId::PlaneSource => {
                    let theta = 1.28e-3;
                    for (ix, iy) in grid.interior() {
                        let x = grid.center(ix, iy)[0];
                        *field.at_mut(grid.id(ix, iy), 0) =
                            (-x * x / (2.0 * theta)).exp() / (2.0 * std::f64::consts::PI * theta).sqrt();
                    }
                    mat.sigma_s.iter_mut().for_each(|v| *v = 1.0);
                    mat.sigma_a.iter_mut().for_each(|v| *v = 0.0);
                }
                ProblemId::LineSource => {
                    let theta = 1.6e-4;
                    for (ix, iy) in grid.interior() {
                        let [x, y] = grid.center(ix, iy);
                        *field.at_mut(grid.id(ix, iy), 0) = (-(x * x + y * y) / (4.0 * theta))
                            .exp()
                            / (4.0 * std::f64::consts::PI * theta);
                    }
                    mat.sigma_s.iter_mut().for_each(|v| *v = 1.0);
                    mat.sigma_a.iter_mut().for_each(|v| *v = 0.0);
                }
                ProblemId::Lattice => {
                    // absorbers keep total sigma 10; in the scaled regime the
                    // remainder moves to scattering (sigma_s 0.1, sigma_a 9.9)
                    let (abs_s, abs_a) = if cfg.epsilon < 1.0 { (0.1, 9.9) } else { (0.0, 10.0) };
                    for (ix, iy) in grid.interior() {
                        let [x, y] = grid.center(ix, iy);
                        let id = grid.id(ix, iy);
                        if in_lattice_absorber(x, y) {
                            mat.sigma_s[id] = abs_s;
                            mat.sigma_a[id] = abs_a;
                        } else {
                            mat.sigma_s[id] = 1.0;
                            mat.sigma_a[id] = 0.0;
                        }
                        // unit volumetric source on moment 0 in the center cell
                        mat.source[id] =
                            if (3.0..4.0).contains(&x) && (3.0..4.0).contains(&y) { 1.0 } else { 0.0 };
                        *field.at_mut(id, 0) = 1e-10;
                    }
                }
                ProblemId::Custom => match cfg.custom_init {
                    CustomInit::UniformI0 { value } => {
                        for (ix, iy) in grid.interior() {
                            *field.at_mut(grid.id(ix, iy), 0) = value;
                        }
                    }
                    CustomInit::Gaussian { theta } => {
                        for (ix, iy) in grid.interior() {
                            let [x, y] = grid.center(ix, iy);
                            let r2 = if cfg.is_2d() { x * x + y * y } else { x * x };
                            *field.at_mut(grid.id(ix, iy), 0) = (-r2 / (2.0 * theta)).exp();
                        }
                    }
                    CustomInit::EquilibriumSine => {
                        for (ix, iy) in grid.interior() {
                            let x = grid.center(ix, iy)[0];
                            *field.at_mut(grid.id(ix, iy), 0) =
                                1.0 + 0.5 * (std::f64::consts::PI * x).sin();
                        }
                    }
                },
                other => {
                    return Err(SolverError::Config(format!(
                        "{other:?} is not a linear-model problem"
                    )))
                }
            }
            let solver = LinearSolver::new(
                grid,
                sys,
                bc,
                mat,
                consts,
                cfg.epsilon,
                cfg.reconstruction,
            )?;
            Ok(BuiltProblem::Linear {
                solver: Box::new(solver),
                field,
            })
        }
        ModelKind::Gray => {
            let mut t0 = vec![1e-6; n_total];
            let mut opacity_vals = vec![0.0; n_total];
            let nonlinear = matches!(cfg.opacity, OpacitySpec::RhoOverT3 { .. });
            let base_opacity = match cfg.opacity {
                OpacitySpec::Constant { sigma } => sigma,
                OpacitySpec::RhoOverT3 { rho } => rho,
            };
            opacity_vals.iter_mut().for_each(|v| *v = base_opacity);
            match cfg.problem {
                ProblemId::ApTest => {
                    for (ix, iy) in grid.interior() {
                        let x = grid.center(ix, iy)[0];
                        t0[grid.id(ix, iy)] = (3.0 + (std::f64::consts::PI * x).sin()) / 4.0;
                    }
                }
                ProblemId::Marshak2a | ProblemId::Marshak2b => {
                    // cold equilibrium start; the hot wall drives the wave
                }
                ProblemId::Riemann2d => {
                    for (ix, iy) in grid.interior() {
                        let [x, y] = grid.center(ix, iy);
                        let id = grid.id(ix, iy);
                        let (sig, t) = riemann_region(x, y);
                        opacity_vals[id] = sig;
                        t0[id] = t;
                    }
                }
                ProblemId::Riemann1d => {
                    let interface = 1.25 * std::f64::consts::SQRT_2;
                    for (ix, iy) in grid.interior() {
                        let s = grid.center(ix, iy)[0];
                        let id = grid.id(ix, iy);
                        if s < interface {
                            opacity_vals[id] = 1.0;
                            t0[id] = 1.0;
                        } else {
                            opacity_vals[id] = cfg.riemann_sigma_right;
                            t0[id] = 0.1;
                        }
                    }
                }
                ProblemId::Custom => {
                    for (ix, iy) in grid.interior() {
                        let x = grid.center(ix, iy)[0];
                        t0[grid.id(ix, iy)] = (3.0 + (std::f64::consts::PI * x).sin()) / 4.0;
                    }
                }
                other => {
                    return Err(SolverError::Config(format!(
                        "{other:?} is not a gray-model problem"
                    )))
                }
            }
            let opacity = if nonlinear {
                OpacityField::RhoOverT3 { rho: opacity_vals }
            } else {
                OpacityField::Constant {
                    sigma: opacity_vals,
                }
            };
            let mut field = MomentField::zeros(&grid, sys.n_moments());
            for (ix, iy) in grid.interior() {
                let id = grid.id(ix, iy);
                // equilibrium radiation: moment 0 = a c T^4
                *field.at_mut(id, 0) = cfg.a * cfg.c * t0[id].powi(4);
            }
            let material = MaterialState {
                t: t0,
                c_v: vec![cfg.c_v; n_total],
                opacity,
            };
            let mut solver = GraySolver::new(
                grid,
                sys,
                bc,
                consts,
                cfg.epsilon,
                cfg.reconstruction,
                cfg.iteration,
            )?;
            solver.rel_tol = cfg.rel_tol;
            Ok(BuiltProblem::Gray {
                solver: Box::new(solver),
                state: Box::new(GrayState {
                    field,
                    material,
                    time: 0.0,
                    t_prev: None,
                }),
            })
        }
    }
}

/// Smallest positive scattering coefficient, the sigma_min of the rival
/// explicit time-step rule.
pub fn sigma_min(cfg: &ProblemConfig) -> Result<f64> {
    let built = build_problem(cfg)?;
    let m = match &built {
        BuiltProblem::Linear { solver, .. } => solver
            .mat
            .sigma_s
            .iter()
            .filter(|s| **s > 0.0)
            .fold(f64::INFINITY, |a, b| a.min(*b)),
        BuiltProblem::Gray { .. } => {
            return Err(SolverError::Config(
                "sigma_min of the rival rule is defined for the linear model".into(),
            ))
        }
    };
    if m.is_finite() {
        Ok(m)
    } else {
        Err(SolverError::Config("no positive sigma_s in the domain".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip() {
        let cfg = ProblemConfig::defaults(ProblemId::Lattice);
        let s = cfg.to_json();
        let back = ProblemConfig::from_json(&s).unwrap();
        assert_eq!(cfg, back);
        assert!(ProblemConfig::from_json("{\"problem\": \"nope\"}").is_err());
    }

    #[test]
    fn lattice_layout_has_eleven_absorbers_and_center_source() {
        let mut count = 0;
        for cx in 0..7 {
            for cy in 0..7 {
                if in_lattice_absorber(cx as f64 + 0.5, cy as f64 + 0.5) {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 11);
        assert!(!in_lattice_absorber(3.5, 3.5)); // center cell is the source
        // layout matches the cutoff rule |cx - 4| band with even parity
        for cx in 1..=7i32 {
            for cy in 1..=7i32 {
                let rule = (cx + cy) % 2 == 0
                    && cx > 1
                    && cx < 7
                    && cy > 1
                    && cy - 2 * (cx - 4).abs() < 4;
                assert_eq!(
                    in_lattice_absorber(cx as f64 - 0.5, cy as f64 - 0.5),
                    rule,
                    "cell ({cx},{cy})"
                );
            }
        }
    }

    #[test]
    fn registry_defaults_match_table() {
        let ap = ProblemConfig::defaults(ProblemId::ApTest);
        assert_eq!(ap.model, ModelKind::Gray);
        assert_eq!(ap.domain[0], [0.0, 2.0]);
        assert_eq!(ap.c_v, 0.1);
        assert_eq!(ap.opacity, OpacitySpec::Constant { sigma: 10.0 });
        assert_eq!(ap.expansion_order, 7);

        let lat = ProblemConfig::defaults(ProblemId::Lattice);
        assert_eq!(lat.mesh, [280, 280]);
        assert_eq!(lat.expansion_order, 39);
        assert_eq!(lat.t_end, 3.2);

        let r2 = ProblemConfig::defaults(ProblemId::Riemann2d);
        assert_eq!(r2.mesh, [300, 300]);
        assert_eq!(r2.domain[0], [-1.5, 1.5]);
        assert_eq!(r2.c_v, 1.0);

        let m2b = ProblemConfig::defaults(ProblemId::Marshak2b);
        assert_eq!(m2b.opacity, OpacitySpec::RhoOverT3 { rho: 300.0 });
        assert_eq!(m2b.c, 29.98);
        assert_eq!(m2b.a, 0.01372);
    }

    #[test]
    fn builders_produce_consistent_states() {
        let mut cfg = ProblemConfig::defaults(ProblemId::ApTest);
        cfg.mesh = [16, 1];
        match build_problem(&cfg).unwrap() {
            BuiltProblem::Gray { state, solver } => {
                // equilibrium: I0 = a c T^4 cell by cell
                for (ix, iy) in solver.grid.interior() {
                    let id = solver.grid.id(ix, iy);
                    let t = state.material.t[id];
                    assert!((state.field.at(id, 0) - t.powi(4)).abs() < 1e-15);
                }
            }
            _ => panic!("ap_test builds a gray problem"),
        }

        let mut cfg = ProblemConfig::defaults(ProblemId::Lattice);
        cfg.mesh = [70, 70];
        cfg.epsilon = 1e-6;
        assert!((sigma_min(&cfg).unwrap() - 0.1).abs() < 1e-15);
        cfg.epsilon = 1.0;
        assert!((sigma_min(&cfg).unwrap() - 1.0).abs() < 1e-15);
    }
}

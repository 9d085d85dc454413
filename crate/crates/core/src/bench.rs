//! Benchmark orchestration: runs, snapshots, conservation audits,
//! convergence studies, and efficiency tables.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::{build_problem, sigma_min, BuiltProblem, ProblemConfig};
use crate::error::{Result, SolverError};
use crate::linear::{select_dt, StepInfo};
use crate::mesh::{Grid, MaterialState, MomentField};
use crate::moment::Dimension;

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub csv: String,
}

#[derive(Debug, Clone, Copy)]
pub struct AuditRow {
    pub step: usize,
    pub time: f64,
    /// conserved total: energy for the gray model, particle total for linear
    pub total: f64,
    pub boundary_accum: f64,
    /// budget residual relative to the initial total
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dt: f64,
    pub total_steps: usize,
    pub wall_seconds: f64,
    pub snapshots: Vec<Snapshot>,
    pub audit: Vec<AuditRow>,
    pub picard_iters_max: usize,
    pub negative_energy_cells: usize,
}

/// Steps needed to cover `span`: the smallest n with n dt >= span, with a
/// relative guard against floating-point noise in the quotient. The final
/// step of a segment is clipped, never the others.
pub fn step_count(span: f64, dt: f64) -> usize {
    (((span / dt) * (1.0 - 1e-12)).ceil() as usize).max(1)
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn snapshot_csv(
    grid: &Grid,
    field: &MomentField,
    material: Option<&MaterialState>,
    a: f64,
    c: f64,
    higher_moments: bool,
) -> (String, usize) {
    let mut out = String::new();
    let mut negatives = 0usize;
    match grid.dim {
        Dimension::One => {
            out.push_str("x,I0,Er,Tr,T");
            if higher_moments {
                for m in 1..field.n_moments {
                    let _ = write!(out, ",m{m}");
                }
            }
            out.push('\n');
            for (ix, iy) in grid.interior() {
                let id = grid.id(ix, iy);
                let i0 = field.at(id, 0);
                let er = i0 / c;
                if er < 0.0 {
                    negatives += 1;
                }
                let tr = er.signum() * (er / a).abs().powf(0.25);
                let t = material.map_or(0.0, |m| m.t[id]);
                let x = grid.center(ix, iy)[0];
                let _ = write!(out, "{},{},{},{},{}", fmt(x), fmt(i0), fmt(er), fmt(tr), fmt(t));
                if higher_moments {
                    for m in 1..field.n_moments {
                        let _ = write!(out, ",{}", fmt(field.at(id, m)));
                    }
                }
                out.push('\n');
            }
        }
        Dimension::Two => {
            out.push_str("x,y,Er,Tr,T\n");
            for (ix, iy) in grid.interior() {
                let id = grid.id(ix, iy);
                let er = field.at(id, 0) / c;
                if er < 0.0 {
                    negatives += 1;
                }
                let tr = er.signum() * (er / a).abs().powf(0.25);
                let t = material.map_or(0.0, |m| m.t[id]);
                let [x, y] = grid.center(ix, iy);
                let _ = writeln!(out, "{},{},{},{},{}", fmt(x), fmt(y), fmt(er), fmt(tr), fmt(t));
            }
        }
    }
    (out, negatives)
}

struct Marcher<'a> {
    cfg: &'a ProblemConfig,
    built: BuiltProblem,
    /// conserved total at t = 0 for the budget residual scale
    total0: f64,
    boundary_accum: f64,
    exchange_accum: f64,
    picard_max: usize,
}

impl<'a> Marcher<'a> {
    fn new(cfg: &'a ProblemConfig) -> Result<Self> {
        let built = build_problem(cfg)?;
        let mut m = Marcher {
            cfg,
            built,
            total0: 0.0,
            boundary_accum: 0.0,
            exchange_accum: 0.0,
            picard_max: 0,
        };
        m.total0 = m.total();
        Ok(m)
    }

    fn grid(&self) -> &Grid {
        match &self.built {
            BuiltProblem::Linear { solver, .. } => &solver.grid,
            BuiltProblem::Gray { solver, .. } => &solver.grid,
        }
    }

    fn total(&self) -> f64 {
        match &self.built {
            BuiltProblem::Linear { solver, field } => {
                field.interior_sum(0) * solver.grid.cell_volume() / self.cfg.c
            }
            BuiltProblem::Gray { solver, state } => solver.total_energy(state),
        }
    }

    fn step(&mut self, dt: f64) -> Result<StepInfo> {
        let order = self.cfg.order;
        let info = match &mut self.built {
            BuiltProblem::Linear { solver, field } => {
                if order == 1 {
                    solver.step_first(field, dt)?
                } else {
                    solver.step_second(field, dt)?
                }
            }
            BuiltProblem::Gray { solver, state } => solver.step_order(state, dt, order)?,
        };
        self.picard_max = self.picard_max.max(info.picard_iters);
        self.boundary_accum += dt * info.boundary_outflow;
        self.exchange_accum += dt * (info.absorbed_rate - info.source_rate);
        Ok(info)
    }

    fn budget_residual(&self) -> f64 {
        let scale = self.total0.abs().max(1e-300);
        (self.total() - self.total0 + self.boundary_accum + self.exchange_accum) / scale
    }

    fn snapshot(&self, time: f64) -> (Snapshot, usize) {
        let (csv, negatives) = match &self.built {
            BuiltProblem::Linear { solver, field } => {
                snapshot_csv(&solver.grid, field, None, self.cfg.a, self.cfg.c, self.cfg.higher_moments)
            }
            BuiltProblem::Gray { solver, state } => snapshot_csv(
                &solver.grid,
                &state.field,
                Some(&state.material),
                self.cfg.a,
                self.cfg.c,
                self.cfg.higher_moments,
            ),
        };
        (Snapshot { time, csv }, negatives)
    }
}

/// Execute a configured run: fixed dt from the time-step rule, full steps
/// plus one clipped step per snapshot segment, snapshot CSVs at the
/// configured times, and a running conservation audit.
pub fn run_benchmark(cfg: &ProblemConfig) -> Result<RunOutput> {
    let wall = Instant::now();
    let mut marcher = Marcher::new(cfg)?;
    let dx = (0..marcher.grid().n_axes())
        .map(|ax| marcher.grid().dx(ax))
        .fold(f64::INFINITY, f64::min);
    let dt = select_dt(cfg.epsilon, dx, cfg.cfl, cfg.c)?;

    let mut segments = cfg.snapshots.clone();
    if segments.last().map_or(true, |t| *t < cfg.t_end - 1e-12) {
        segments.push(cfg.t_end);
    }

    let total_planned: usize = {
        let mut t0 = 0.0;
        let mut n = 0usize;
        for seg in &segments {
            n += step_count(seg - t0, dt);
            t0 = *seg;
        }
        n
    };
    let audit_stride = (total_planned / 10_000).max(1);

    let mut snapshots = Vec::new();
    let mut audit = Vec::new();
    let mut negatives = 0usize;
    let mut t = 0.0;
    let mut step_idx = 0usize;
    audit.push(AuditRow {
        step: 0,
        time: 0.0,
        total: marcher.total(),
        boundary_accum: 0.0,
        residual: 0.0,
    });
    for seg_end in &segments {
        let span = seg_end - t;
        let n = step_count(span, dt);
        for k in 0..n {
            let step_dt = if k + 1 == n { seg_end - t } else { dt };
            marcher.step(step_dt)?;
            t += step_dt;
            step_idx += 1;
            if step_idx % audit_stride == 0 || k + 1 == n {
                audit.push(AuditRow {
                    step: step_idx,
                    time: t,
                    total: marcher.total(),
                    boundary_accum: marcher.boundary_accum,
                    residual: marcher.budget_residual(),
                });
            }
        }
        t = *seg_end;
        if cfg.snapshots.iter().any(|s| (s - seg_end).abs() < 1e-12) {
            let (snap, neg) = marcher.snapshot(t);
            snapshots.push(snap);
            negatives += neg;
        }
    }

    Ok(RunOutput {
        dt,
        total_steps: step_idx,
        wall_seconds: wall.elapsed().as_secs_f64(),
        snapshots,
        audit,
        picard_iters_max: marcher.picard_max,
        negative_energy_cells: negatives,
    })
}

pub fn audit_csv(audit: &[AuditRow]) -> String {
    let mut out = String::from("step,t,total,boundary_accum,budget_residual\n");
    for row in audit {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.step,
            fmt(row.time),
            fmt(row.total),
            fmt(row.boundary_accum),
            fmt(row.residual)
        );
    }
    out
}

/// Final interior profiles used by studies: radiation temperature and, for
/// the gray model, material temperature.
pub fn final_profiles(cfg: &ProblemConfig) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut marcher = Marcher::new(cfg)?;
    let dx = (0..marcher.grid().n_axes())
        .map(|ax| marcher.grid().dx(ax))
        .fold(f64::INFINITY, f64::min);
    let dt = select_dt(cfg.epsilon, dx, cfg.cfl, cfg.c)?;
    let n = step_count(cfg.t_end, dt);
    for k in 0..n {
        let step_dt = if k + 1 == n { cfg.t_end - k as f64 * dt } else { dt };
        marcher.step(step_dt)?;
    }
    let grid = marcher.grid().clone();
    let (tr, t): (Vec<f64>, Option<Vec<f64>>) = match &marcher.built {
        BuiltProblem::Linear { field, .. } => (
            grid.interior()
                .map(|(ix, iy)| {
                    let er = field.at(grid.id(ix, iy), 0) / cfg.c;
                    er.signum() * (er / cfg.a).abs().powf(0.25)
                })
                .collect(),
            None,
        ),
        BuiltProblem::Gray { state, .. } => (
            grid.interior()
                .map(|(ix, iy)| {
                    let er = state.field.at(grid.id(ix, iy), 0) / cfg.c;
                    er.signum() * (er / cfg.a).abs().powf(0.25)
                })
                .collect(),
            Some(
                grid.interior()
                    .map(|(ix, iy)| state.material.t[grid.id(ix, iy)])
                    .collect(),
            ),
        ),
    };
    Ok((tr, t))
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub n: usize,
    pub err_tr: f64,
    pub err_t: Option<f64>,
    pub order_tr: Option<f64>,
    pub order_t: Option<f64>,
}

/// restrict a fine interior profile to a coarse mesh by block averaging
fn restrict(fine: &[f64], shape_fine: [usize; 2], shape_coarse: [usize; 2]) -> Vec<f64> {
    let fx = shape_fine[0] / shape_coarse[0];
    let fy = (shape_fine[1] / shape_coarse[1]).max(1);
    let mut out = vec![0.0; shape_coarse[0] * shape_coarse[1]];
    for cy in 0..shape_coarse[1] {
        for cx in 0..shape_coarse[0] {
            let mut acc = 0.0;
            for jy in 0..fy {
                for jx in 0..fx {
                    acc += fine[(cy * fy + jy) * shape_fine[0] + cx * fx + jx];
                }
            }
            out[cy * shape_coarse[0] + cx] = acc / (fx * fy) as f64;
        }
    }
    out
}

fn l2_error(a: &[f64], b: &[f64], cell_volume: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .mul_add(cell_volume, 0.0)
        .sqrt()
}

/// Mesh-refinement study against a fine-mesh reference computed with the
/// same scheme; the reference mesh must be divisible by every study mesh.
pub fn convergence_study(
    cfg: &ProblemConfig,
    meshes: &[usize],
    reference_mesh: usize,
) -> Result<Vec<ConvergenceRow>> {
    for n in meshes {
        if reference_mesh % n != 0 {
            return Err(SolverError::Config(format!(
                "reference mesh {reference_mesh} not divisible by {n}"
            )));
        }
    }
    let two_d = cfg.is_2d();
    let mesh_of = |n: usize| if two_d { [n, n] } else { [n, 1] };

    let mut ref_cfg = cfg.clone();
    ref_cfg.mesh = mesh_of(reference_mesh);
    let (ref_tr, ref_t) = final_profiles(&ref_cfg)?;

    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for &n in meshes {
        let mut run_cfg = cfg.clone();
        run_cfg.mesh = mesh_of(n);
        let (tr, t) = final_profiles(&run_cfg)?;
        let shape_c = run_cfg.mesh;
        let shape_f = ref_cfg.mesh;
        let vol = run_cfg.grid()?.cell_volume();
        let err_tr = l2_error(&tr, &restrict(&ref_tr, shape_f, shape_c), vol);
        let err_t = match (&t, &ref_t) {
            (Some(t), Some(rt)) => Some(l2_error(t, &restrict(rt, shape_f, shape_c), vol)),
            _ => None,
        };
        let (order_tr, order_t) = match rows.last() {
            Some(prev) if prev.err_tr > 0.0 && err_tr > 0.0 => {
                let ratio = (n / prev.n) as f64;
                let otr = (prev.err_tr / err_tr).ln() / ratio.ln();
                let ot = match (prev.err_t, err_t) {
                    (Some(pe), Some(e)) if pe > 0.0 && e > 0.0 => {
                        Some((pe / e).ln() / ratio.ln())
                    }
                    _ => None,
                };
                (Some(otr), ot)
            }
            _ => (None, None),
        };
        rows.push(ConvergenceRow {
            n,
            err_tr,
            err_t,
            order_tr,
            order_t,
        });
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from("n,l2_err_tr,l2_err_t,order_tr,order_t\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.n,
            fmt(r.err_tr),
            r.err_t.map_or("".into(), fmt),
            r.order_tr.map_or("".into(), fmt),
            r.order_t.map_or("".into(), fmt),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RivalRule {
    /// this scheme's rule: dt = C eps dx / c capped at C dx / c
    ImexIm,
    /// the explicit-limit rival: dt = C sigma_min dx^2 / c
    ImexEx,
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct EfficiencyRow {
    pub mesh: usize,
    pub rule: RivalRule,
    pub dt: f64,
    pub total_steps: usize,
    pub wall_seconds: Option<f64>,
}

/// Step counts and dt for both rules over a mesh sweep; wall time is
/// measured by actually marching the first-order scheme when requested.
pub fn efficiency_report(
    cfg: &ProblemConfig,
    meshes: &[usize],
    measure: bool,
) -> Result<Vec<EfficiencyRow>> {
    let mut rows = Vec::new();
    for &n in meshes {
        let mut run_cfg = cfg.clone();
        run_cfg.mesh = if cfg.is_2d() { [n, n] } else { [n, 1] };
        run_cfg.order = 1;
        run_cfg.snapshots = vec![run_cfg.t_end];
        let dx = (0..run_cfg.grid()?.n_axes())
            .map(|ax| run_cfg.grid().unwrap().dx(ax))
            .fold(f64::INFINITY, f64::min);
        let smin = sigma_min(&run_cfg)?;
        for rule in [RivalRule::ImexIm, RivalRule::ImexEx] {
            let dt = match rule {
                RivalRule::ImexIm => select_dt(run_cfg.epsilon, dx, run_cfg.cfl, run_cfg.c)?,
                RivalRule::ImexEx => run_cfg.cfl * smin * dx * dx / run_cfg.c,
            };
            let total_steps = step_count(run_cfg.t_end, dt);
            let wall_seconds = if measure {
                let wall = Instant::now();
                let mut marcher = Marcher::new(&run_cfg)?;
                for k in 0..total_steps {
                    let step_dt = if k + 1 == total_steps {
                        run_cfg.t_end - k as f64 * dt
                    } else {
                        dt
                    };
                    marcher.step(step_dt)?;
                }
                Some(wall.elapsed().as_secs_f64())
            } else {
                None
            };
            rows.push(EfficiencyRow {
                mesh: n,
                rule,
                dt,
                total_steps,
                wall_seconds,
            });
        }
    }
    Ok(rows)
}

pub fn efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from("mesh,rule,dt,total_steps,wall_seconds\n");
    for r in rows {
        let rule = match r.rule {
            RivalRule::ImexIm => "imex_im",
            RivalRule::ImexEx => "imex_ex",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.mesh,
            rule,
            fmt(r.dt),
            r.total_steps,
            r.wall_seconds.map_or("".into(), fmt),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProblemId;
    use approx::assert_abs_diff_eq;

    #[test]
    fn step_count_reproduces_rule_arithmetic() {
        // exact divisions
        assert_eq!(step_count(0.5, 0.4 * (4.0 / 64.0)), 20);
        assert_eq!(step_count(0.5, 0.4 * (4.0 / 128.0)), 40);
        assert_eq!(step_count(0.5, 0.4 * (4.0 / 256.0)), 80);
        // fractional spans round up
        assert_eq!(step_count(0.5, 0.4 * (7.0 / 100.0)), 18);
        assert_eq!(step_count(0.5, 0.4 * (7.0 / 200.0)), 36);
    }

    #[test]
    fn ap_test_run_is_deterministic_and_conservative() {
        let mut cfg = ProblemConfig::defaults(ProblemId::ApTest);
        cfg.mesh = [32, 1];
        cfg.t_end = 0.1;
        cfg.snapshots = vec![0.05, 0.1];
        let out1 = run_benchmark(&cfg).unwrap();
        let out2 = run_benchmark(&cfg).unwrap();
        assert_eq!(out1.snapshots.len(), 2);
        assert_eq!(out1.snapshots[0].csv, out2.snapshots[0].csv);
        assert_eq!(out1.snapshots[1].csv, out2.snapshots[1].csv);
        let last = out1.audit.last().unwrap();
        assert!(last.residual.abs() < 1e-8, "budget residual {}", last.residual);
        assert_abs_diff_eq!(last.time, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn convergence_error_vanishes_on_identical_mesh() {
        let mut cfg = ProblemConfig::defaults(ProblemId::ApTest);
        cfg.mesh = [16, 1];
        cfg.t_end = 0.05;
        cfg.snapshots = vec![0.05];
        let rows = convergence_study(&cfg, &[16], 16).unwrap();
        assert_eq!(rows[0].err_tr, 0.0);
        assert_eq!(rows[0].err_t, Some(0.0));
        assert!(convergence_study(&cfg, &[12], 16).is_err());
    }

    #[test]
    fn efficiency_rows_match_pinned_line_source_values() {
        let cfg = ProblemConfig::defaults(ProblemId::LineSource);
        let rows = efficiency_report(&cfg, &[64, 128, 256], false).unwrap();
        let get = |mesh: usize, rule: RivalRule| {
            rows.iter()
                .find(|r| r.mesh == mesh && r.rule == rule)
                .unwrap()
        };
        for (mesh, dt, steps) in [
            (64usize, 2.50e-2, 20usize),
            (128, 1.25e-2, 40),
            (256, 6.25e-3, 80),
        ] {
            let r = get(mesh, RivalRule::ImexIm);
            assert_abs_diff_eq!(r.dt, dt, epsilon = 1e-12 * dt);
            assert_eq!(r.total_steps, steps);
        }
        for (mesh, dt, steps) in [
            (64usize, 1.5625e-3, 320usize),
            (128, 3.90625e-4, 1280),
            (256, 9.765625e-5, 5120),
        ] {
            let r = get(mesh, RivalRule::ImexEx);
            assert_abs_diff_eq!(r.dt, dt, epsilon = 1e-12 * dt);
            assert_eq!(r.total_steps, steps);
        }
    }
}

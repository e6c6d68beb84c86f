//! Nonlinear least squares on pixel reprojection residuals.
//!
//! The pose is parameterized world-to-camera, `p_c = R x + t`, with a left
//! perturbation `R <- exp(w) R`, `t <- exp(w) t + d`.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};

use crate::geometry::{Intrinsics, Pose};
use crate::predictor::Correspondence;

use super::SolverError;

pub const LM_MAX_ITERATIONS: usize = 50;
pub const LM_GRADIENT_TOLERANCE: f64 = 1e-9;
const LM_INITIAL_DAMPING: f64 = 1e-4;
const LM_MAX_DAMPING: f64 = 1e12;

/// World-to-camera rigid transform used inside the solvers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CamFromWorld {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl CamFromWorld {
    pub fn from_pose(pose: &Pose) -> Self {
        let inv = pose.inverse();
        Self {
            r: inv.rotation_matrix(),
            t: inv.translation,
        }
    }

    pub fn to_pose(self) -> Pose {
        Pose::from_rotation_matrix(&self.r, self.t).inverse()
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    fn perturbed(&self, delta: &Vector6<f64>) -> Self {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let d = Vector3::new(delta[3], delta[4], delta[5]);
        let exp = *Rotation3::new(w).matrix();
        Self {
            r: exp * self.r,
            t: exp * self.t + d,
        }
    }
}

/// Sum of squared pixel residuals; infinite if any point is at or behind the
/// camera plane.
pub(crate) fn cost(k: &Intrinsics, pose: &CamFromWorld, corrs: &[Correspondence]) -> f64 {
    let mut sum = 0.0;
    for c in corrs {
        let p = pose.apply(&c.point.coords);
        if p.z <= 0.0 {
            return f64::INFINITY;
        }
        let du = k.cx + k.fx * p.x / p.z - c.pixel.x;
        let dv = k.cy + k.fy * p.y / p.z - c.pixel.y;
        sum += du * du + dv * dv;
    }
    sum
}

/// `(J^T J, J^T r, cost)` at `pose`.
fn normal_equations(
    k: &Intrinsics,
    pose: &CamFromWorld,
    corrs: &[Correspondence],
) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut cost = 0.0;
    for c in corrs {
        let p = pose.apply(&c.point.coords);
        let iz = 1.0 / p.z;
        let ru = k.cx + k.fx * p.x * iz - c.pixel.x;
        let rv = k.cy + k.fy * p.y * iz - c.pixel.y;
        cost += ru * ru + rv * rv;
        // d(u,v)/dp
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz);
        // dp/dw = -[p]x, so d/dw = p x d(u,v)/dp
        let ju = Vector6::new(
            p.y * du.z - p.z * du.y,
            p.z * du.x - p.x * du.z,
            p.x * du.y - p.y * du.x,
            du.x,
            du.y,
            du.z,
        );
        let jv = Vector6::new(
            p.y * dv.z - p.z * dv.y,
            p.z * dv.x - p.x * dv.z,
            p.x * dv.y - p.y * dv.x,
            dv.x,
            dv.y,
            dv.z,
        );
        jtj += ju * ju.transpose() + jv * jv.transpose();
        jtr += ju * ru + jv * rv;
    }
    (jtj, jtr, cost)
}

/// Plain Gauss-Newton with step acceptance on cost decrease.
pub(crate) fn gauss_newton(
    k: &Intrinsics,
    start: CamFromWorld,
    corrs: &[Correspondence],
    max_steps: usize,
) -> CamFromWorld {
    let mut pose = start;
    let mut current = cost(k, &pose, corrs);
    for _ in 0..max_steps {
        if current < 1e-24 {
            break;
        }
        let (jtj, jtr, _) = normal_equations(k, &pose, corrs);
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let next = pose.perturbed(&step);
        let next_cost = cost(k, &next, corrs);
        if !(next_cost < current) {
            break;
        }
        pose = next;
        current = next_cost;
    }
    pose
}

/// Why Levenberg-Marquardt stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStop {
    GradientTolerance,
    MaxIterations,
    /// No further decrease was possible at any damping.
    Stalled,
}

/// Outcome of [`refine_pose_report`].
#[derive(Debug, Clone)]
pub struct RefineReport {
    pub pose: Pose,
    /// Objective after every accepted iterate, starting with the initial one.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub stop: LmStop,
}

impl RefineReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("non-empty")
    }
}

/// Levenberg-Marquardt over the total squared reprojection error, started at
/// `initial`. The objective never increases; at most
/// [`LM_MAX_ITERATIONS`] iterations; stops once the gradient infinity-norm
/// drops to [`LM_GRADIENT_TOLERANCE`].
pub fn refine_pose_report(
    initial: &Pose,
    inliers: &[Correspondence],
    k: &Intrinsics,
) -> Result<RefineReport, SolverError> {
    if inliers.len() < 4 {
        return Err(SolverError::UnderDetermined {
            got: inliers.len(),
        });
    }
    let mut pose = CamFromWorld::from_pose(initial);
    let (mut jtj, mut jtr, mut current) = normal_equations(k, &pose, inliers);
    if !current.is_finite() || cost(k, &pose, inliers).is_infinite() {
        // starting point has points behind the camera; nothing to descend on
        return Ok(RefineReport {
            pose: *initial,
            cost_history: vec![f64::INFINITY],
            iterations: 0,
            stop: LmStop::Stalled,
        });
    }
    let mut history = vec![current];
    let mut damping = LM_INITIAL_DAMPING;
    let mut iterations = 0;
    let stop = loop {
        if jtr.amax() <= LM_GRADIENT_TOLERANCE {
            break LmStop::GradientTolerance;
        }
        if iterations >= LM_MAX_ITERATIONS {
            break LmStop::MaxIterations;
        }
        iterations += 1;
        let mut accepted = false;
        while damping <= LM_MAX_DAMPING {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let next = pose.perturbed(&step);
            let next_cost = cost(k, &next, inliers);
            if next_cost < current {
                pose = next;
                current = next_cost;
                damping = (damping * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break LmStop::Stalled;
        }
        history.push(current);
        (jtj, jtr, _) = normal_equations(k, &pose, inliers);
    };
    let pose = if history.len() == 1 { *initial } else { pose.to_pose() };
    Ok(RefineReport {
        pose,
        cost_history: history,
        iterations,
        stop,
    })
}

/// [`refine_pose_report`] without the diagnostics.
pub fn refine_pose(initial: &Pose, inliers: &[Correspondence], k: &Intrinsics) -> Result<Pose, SolverError> {
    refine_pose_report(initial, inliers, k).map(|r| r.pose)
}

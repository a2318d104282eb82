//! Planar forward kinematics and a damped-least-squares inverse step.

use super::types::{ArmState, Vec2};

/// End-effector position relative to the arm base: cumulative-angle link
/// summation along the chain. The final joint (gripper aperture) does not
/// contribute.
pub fn forward_kinematics(arm: &ArmState) -> Vec2 {
    let mut angle = 0.0;
    let mut p = Vec2::new(0.0, 0.0);
    for (theta, len) in arm.revolute().iter().zip(&arm.link_lengths) {
        angle += theta;
        p.x += len * angle.cos();
        p.y += len * angle.sin();
    }
    p
}

/// Positions of every joint plus the tip, relative to the base (base first).
pub fn chain_points(arm: &ArmState) -> Vec<Vec2> {
    let mut pts = vec![Vec2::new(0.0, 0.0)];
    let mut angle = 0.0;
    let mut p = Vec2::new(0.0, 0.0);
    for (theta, len) in arm.revolute().iter().zip(&arm.link_lengths) {
        angle += theta;
        p.x += len * angle.cos();
        p.y += len * angle.sin();
        pts.push(p);
    }
    pts
}

/// One damped-least-squares step toward `target` (relative to the base).
/// Returns per-revolute-joint deltas; the tip displacement is clamped to
/// `max_tip_step` so the expert moves at a bounded speed.
pub fn ik_step(arm: &ArmState, target: Vec2, max_tip_step: f64) -> Vec<f64> {
    let nrev = arm.revolute().len();
    let tip = forward_kinematics(arm);
    let mut dx = target - tip;
    let n = dx.norm();
    if n > max_tip_step {
        dx = dx * (max_tip_step / n);
    }
    // Planar Jacobian: column i = sum over links j >= i of
    // l_j * (-sin(cum_j), cos(cum_j)).
    let mut cums = Vec::with_capacity(nrev);
    let mut angle = 0.0;
    for theta in arm.revolute() {
        angle += theta;
        cums.push(angle);
    }
    let mut jac = vec![[0.0f64; 2]; nrev];
    for i in 0..nrev {
        for j in i..nrev {
            jac[i][0] += -arm.link_lengths[j] * cums[j].sin();
            jac[i][1] += arm.link_lengths[j] * cums[j].cos();
        }
    }
    // dq = J^T (J J^T + lambda^2 I)^{-1} dx with a 2x2 closed-form inverse.
    let lambda2 = 0.25 * 0.25;
    let mut a = lambda2;
    let mut b = 0.0;
    let mut d = lambda2;
    for col in &jac {
        a += col[0] * col[0];
        b += col[0] * col[1];
        d += col[1] * col[1];
    }
    let det = a * d - b * b;
    let (ix, iy) = (
        (d * dx.x - b * dx.y) / det,
        (a * dx.y - b * dx.x) / det,
    );
    jac.iter().map(|col| col[0] * ix + col[1] * iy).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::types::SimParams;

    fn arm(joints: &[f64], links: &[f64]) -> ArmState {
        let mut j = joints.to_vec();
        j.push(1.0);
        ArmState {
            joints: j,
            link_lengths: links.to_vec(),
        }
    }

    #[test]
    fn straight_chain_lies_on_x_axis() {
        let a = arm(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let p = forward_kinematics(&a);
        assert!((p.x - 3.0).abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_points_up() {
        let a = arm(
            &[std::f64::consts::FRAC_PI_2, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
        );
        let p = forward_kinematics(&a);
        assert!(p.x.abs() < 1e-12 && (p.y - 3.0).abs() < 1e-12);
    }

    /// Independent oracle: the chain position is the sum of complex
    /// exponentials l_j * e^{i * cum_j}.
    #[test]
    fn matches_complex_exponential_oracle() {
        let cases: [&[f64]; 4] = [
            &[std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4, 0.0],
            &[0.3, 0.7, -1.1],
            &[1.9, -0.4, 2.2],
            &[2.8, 2.6, -2.6],
        ];
        for joints in cases {
            let links = [1.3, 0.9, 0.6];
            let a = arm(joints, &links);
            let p = forward_kinematics(&a);
            let (mut re, mut im, mut cum) = (0.0, 0.0, 0.0);
            for (t, l) in joints.iter().zip(links) {
                cum += t;
                // complex multiply-accumulate: l * (cos + i sin)
                re += l * cum.cos();
                im += l * cum.sin();
            }
            assert!((p.x - re).abs() < 1e-12 && (p.y - im).abs() < 1e-12);
        }
    }

    #[test]
    fn ik_converges_to_reachable_target() {
        let params = SimParams::default();
        let mut a = params.home_arm();
        let target = Vec2::new(2.5, 1.1);
        for _ in 0..200 {
            let dq = ik_step(&a, target, 0.4);
            for (j, d) in a.joints.iter_mut().zip(&dq) {
                *j += d.clamp(-params.rate_limit, params.rate_limit);
            }
        }
        let tip = forward_kinematics(&a);
        assert!(
            tip.dist(target) < 0.05,
            "IK residual {:.4} to target {:?}, tip {:?}",
            tip.dist(target),
            target,
            tip
        );
    }
}

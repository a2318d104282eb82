//! Recurrent mixture-density motor network.
//!
//! A 3-layer LSTM trunk with input-to-layer skip connections (the latent is
//! concatenated onto every layer's input and onto the head input) feeds a
//! mixture-density head: softmax mixing weights, per-component mean vectors,
//! and strictly positive isotropic scales via an exponential. Joint commands
//! are sampled from the mixture; the behavioural-cloning loss is the
//! negative log mixture density of the expert command, stabilized with
//! log-sum-exp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{Binding, Linear, LstmCell, ParamSet};
use crate::nn::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum MotorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotorConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub n_components: usize,
    pub n_joints: usize,
}

impl Default for MotorConfig {
    fn default() -> Self {
        MotorConfig { d_z: 128, hidden: 128, n_components: 8, n_joints: 4 }
    }
}

/// Mixture parameters for one step: `alpha` sums to 1, `mu` is row-major
/// [component][joint], `sigma` is one positive scale per component.
#[derive(Clone, Debug)]
pub struct MixtureParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MixtureParams {
    pub fn n_components(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_joints(&self) -> usize {
        if self.alpha.is_empty() { 0 } else { self.mu.len() / self.alpha.len() }
    }

    fn validate(&self) -> Result<(), MotorError> {
        let n = self.alpha.len();
        if n == 0 || self.mu.len() % n != 0 || self.sigma.len() != n {
            return Err(MotorError::Shape(format!(
                "inconsistent mixture: {} weights, {} means, {} scales",
                n,
                self.mu.len(),
                self.sigma.len()
            )));
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.alpha.iter().any(|&a| a < 0.0) {
            return Err(MotorError::Shape(format!("mixing weights sum to {sum}")));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(MotorError::Shape("non-positive sigma".into()));
        }
        Ok(())
    }
}

/// Recurrent state carried across calls within one episode.
#[derive(Clone, Debug)]
pub struct MotorState {
    h: [Vec<f64>; 3],
    c: [Vec<f64>; 3],
}

impl MotorState {
    pub fn zeros(config: &MotorConfig) -> Self {
        let z = vec![0.0; config.hidden];
        MotorState { h: [z.clone(), z.clone(), z.clone()], c: [z.clone(), z.clone(), z] }
    }
}

/// Per-step head outputs as graph nodes, for training-time composition.
pub(crate) struct MotorStepNodes {
    pub alpha_logits: NodeId,
    pub mu: NodeId,
    pub log_sigma: NodeId,
}

pub struct Motor {
    pub config: MotorConfig,
    pub ps: ParamSet,
    l1: LstmCell,
    l2: LstmCell,
    l3: LstmCell,
    head_alpha: Linear,
    head_mu: Linear,
    head_sigma: Linear,
}

impl Motor {
    pub fn new(config: MotorConfig, seed: u64) -> Result<Self, MotorError> {
        if config.d_z == 0 || config.hidden == 0 || config.n_components == 0 || config.n_joints == 0
        {
            return Err(MotorError::Shape("all motor dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.d_z;
        let h = config.hidden;
        let l1 = LstmCell::new(&mut ps, &mut rng, "motor.lstm1", d, h);
        let l2 = LstmCell::new(&mut ps, &mut rng, "motor.lstm2", d + h, h);
        let l3 = LstmCell::new(&mut ps, &mut rng, "motor.lstm3", d + h, h);
        let head_in = d + h;
        let head_alpha = Linear::new(&mut ps, &mut rng, "motor.alpha", head_in, config.n_components);
        let head_mu =
            Linear::new(&mut ps, &mut rng, "motor.mu", head_in, config.n_components * config.n_joints);
        let head_sigma = Linear::new(&mut ps, &mut rng, "motor.sigma", head_in, config.n_components);
        Ok(Motor { config, ps, l1, l2, l3, head_alpha, head_mu, head_sigma })
    }

    /// Unroll the trunk over `zs` (each [B,d_z]) from the given state nodes,
    /// returning per-step head outputs and leaving the final state in
    /// `state`. The latent skips into every layer input and the head input.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn unroll_nodes(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        zs: &[NodeId],
        state: &mut [(NodeId, NodeId); 3],
    ) -> Vec<MotorStepNodes> {
        let mut out = Vec::with_capacity(zs.len());
        for &z in zs {
            let (h1, c1) = self.l1.step(g, bind, ps, z, state[0].0, state[0].1);
            let in2 = g.concat_cols(z, h1);
            let (h2, c2) = self.l2.step(g, bind, ps, in2, state[1].0, state[1].1);
            let in3 = g.concat_cols(z, h2);
            let (h3, c3) = self.l3.step(g, bind, ps, in3, state[2].0, state[2].1);
            *state = [(h1, c1), (h2, c2), (h3, c3)];
            let head_in = g.concat_cols(z, h3);
            let alpha_logits = self.head_alpha.forward(g, bind, ps, head_in);
            let mu = self.head_mu.forward(g, bind, ps, head_in);
            // Bounded log sigma keeps both exp(-2 log sigma) in the loss and
            // exp(log sigma) at sampling time finite through training.
            let ls = self.head_sigma.forward(g, bind, ps, head_in);
            let log_sigma = g.clamp(ls, -7.0, 7.0);
            out.push(MotorStepNodes { alpha_logits, mu, log_sigma });
        }
        out
    }

    pub(crate) fn zero_state_nodes(&self, g: &mut Graph, batch: usize) -> [(NodeId, NodeId); 3] {
        let mut mk = || {
            let h = g.constant(Tensor::zeros(&[batch, self.config.hidden]));
            let c = g.constant(Tensor::zeros(&[batch, self.config.hidden]));
            (h, c)
        };
        [mk(), mk(), mk()]
    }

    /// Negative log mixture density of `target` ([B,J]) under one step's
    /// head outputs, averaged over the batch.
    pub(crate) fn mdn_loss_node(
        &self,
        g: &mut Graph,
        step: &MotorStepNodes,
        target: NodeId,
    ) -> NodeId {
        let n = self.config.n_components;
        let j = self.config.n_joints as f64;
        let log_alpha = g.log_softmax(step.alpha_logits);
        // Per-component squared distance ||t - mu_i||^2, concatenated to [B,N].
        let mut quad = None;
        for i in 0..n {
            let mu_i = g.slice_cols(step.mu, i * self.config.n_joints, (i + 1) * self.config.n_joints);
            let diff = g.sub(mu_i, target);
            let sq = g.mul(diff, diff);
            let row = g.sum_last_axis(sq);
            quad = Some(match quad {
                None => row,
                Some(prev) => g.concat_cols(prev, row),
            });
        }
        let quad = quad.expect("at least one component");
        // 1 / (2 sigma^2) from log sigma.
        let m2 = g.scale_shift(step.log_sigma, -2.0, 0.0);
        let inv = g.exp(m2);
        let half_inv = g.scale_shift(inv, 0.5, 0.0);
        let quad_term = g.mul(quad, half_inv);
        // log density core: -J log sigma - J/2 log 2pi - quad.
        let lin = g.scale_shift(step.log_sigma, -j, -0.5 * j * LN_2PI);
        let dens = g.sub(lin, quad_term);
        let inner = g.add(log_alpha, dens);
        let lse = g.log_sum_exp(inner);
        let mean = g.mean_all(lse);
        g.scale_shift(mean, -1.0, 0.0)
    }

    /// Run the trunk over a latent sequence, carrying `state` across calls.
    /// Returns one [`MixtureParams`] per step.
    pub fn motor_forward(
        &self,
        z_sequence: &[f64],
        state: &mut MotorState,
    ) -> Result<Vec<MixtureParams>, MotorError> {
        let d = self.config.d_z;
        if z_sequence.len() % d != 0 {
            return Err(MotorError::Shape(format!(
                "latent sequence length {} is not a multiple of d_z {d}",
                z_sequence.len()
            )));
        }
        let steps = z_sequence.len() / d;
        if steps == 0 {
            return Ok(Vec::new());
        }
        let h = self.config.hidden;
        for part in state.h.iter().chain(state.c.iter()) {
            if part.len() != h {
                return Err(MotorError::Shape(format!(
                    "state width {} does not match hidden {h}",
                    part.len()
                )));
            }
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.ps);
        let mut st = [(NodeId(0), NodeId(0)); 3];
        for (i, s) in st.iter_mut().enumerate() {
            s.0 = g.constant(Tensor::from_vec(&[1, h], state.h[i].clone()));
            s.1 = g.constant(Tensor::from_vec(&[1, h], state.c[i].clone()));
        }
        let zs: Vec<NodeId> = (0..steps)
            .map(|t| g.constant(Tensor::from_vec(&[1, d], z_sequence[t * d..(t + 1) * d].to_vec())))
            .collect();
        let steps_out = self.unroll_nodes(&mut g, &mut bind, &self.ps, &zs, &mut st);
        for (i, s) in st.iter().enumerate() {
            state.h[i] = g.val(s.0).data().to_vec();
            state.c[i] = g.val(s.1).data().to_vec();
        }
        Ok(steps_out
            .iter()
            .map(|s| {
                let logits = g.val(s.alpha_logits).data();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                MixtureParams {
                    alpha: exps.into_iter().map(|e| e / sum).collect(),
                    mu: g.val(s.mu).data().to_vec(),
                    sigma: g.val(s.log_sigma).data().iter().map(|&l| l.exp()).collect(),
                }
            })
            .collect())
    }

    /// Mean negative log mixture density over a sequence of (step, target)
    /// pairs: the scalar counterpart of the training loss.
    pub fn mdn_loss(
        &self,
        params: &[MixtureParams],
        targets: &[Vec<f64>],
    ) -> Result<f64, MotorError> {
        if params.is_empty() || params.len() != targets.len() {
            return Err(MotorError::Shape(format!(
                "{} parameter sets vs {} targets",
                params.len(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (p, t) in params.iter().zip(targets) {
            total += mdn_nll(p, t)?;
        }
        Ok(total / params.len() as f64)
    }
}

/// Negative log mixture density of one target under one mixture.
pub fn mdn_nll(params: &MixtureParams, target: &[f64]) -> Result<f64, MotorError> {
    params.validate()?;
    let j = params.n_joints();
    if target.len() != j {
        return Err(MotorError::Shape(format!(
            "target has {} joints, mixture has {j}",
            target.len()
        )));
    }
    let jf = j as f64;
    let mut terms = Vec::with_capacity(params.alpha.len());
    for (i, (&a, &s)) in params.alpha.iter().zip(&params.sigma).enumerate() {
        let quad: f64 = target
            .iter()
            .zip(&params.mu[i * j..(i + 1) * j])
            .map(|(t, m)| (t - m) * (t - m))
            .sum();
        terms.push(a.max(f64::MIN_POSITIVE).ln() - jf * s.ln() - 0.5 * jf * LN_2PI
            - quad / (2.0 * s * s));
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - mx).exp()).sum();
    Ok(-(mx + sum.ln()))
}

/// Draw a joint command: component from the mixing weights, then a Gaussian
/// sample around that component's mean. Seeded and deterministic.
pub fn mdn_sample(params: &MixtureParams, seed: u64) -> Result<Vec<f64>, MotorError> {
    params.validate()?;
    let j = params.n_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut comp = params.alpha.len() - 1;
    for (i, &a) in params.alpha.iter().enumerate() {
        acc += a;
        if u < acc {
            comp = i;
            break;
        }
    }
    let sigma = params.sigma[comp];
    Ok(params.mu[comp * j..(comp + 1) * j]
        .iter()
        .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Deterministic evaluation mode: the mean of the most probable component.
pub fn mdn_mode(params: &MixtureParams) -> Result<Vec<f64>, MotorError> {
    params.validate()?;
    let j = params.n_joints();
    let comp = params
        .alpha
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(params.mu[comp * j..(comp + 1) * j].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::layers::GradBuffer;

    fn tiny_config() -> MotorConfig {
        MotorConfig { d_z: 4, hidden: 6, n_components: 2, n_joints: 2 }
    }

    fn rand_seq(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_contract() {
        let motor = Motor::new(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs = rand_seq(&mut rng, 5 * 4);
        let mut state = MotorState::zeros(&motor.config);
        let steps = motor.motor_forward(&zs, &mut state).unwrap();
        assert_eq!(steps.len(), 5);
        for p in &steps {
            assert_eq!(p.alpha.len(), 2);
            assert_eq!(p.mu.len(), 4);
            assert_eq!(p.sigma.len(), 2);
            let sum: f64 = p.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.sigma.iter().all(|&s| s > 0.0));
            p.validate().unwrap();
        }
        assert!(motor.motor_forward(&zs[..7], &mut state).is_err());
        let empty = motor.motor_forward(&[], &mut state).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn chunked_forward_matches_single_steps() {
        let motor = Motor::new(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zs = rand_seq(&mut rng, 10 * 4);
        let mut all_state = MotorState::zeros(&motor.config);
        let all = motor.motor_forward(&zs, &mut all_state).unwrap();

        let mut step_state = MotorState::zeros(&motor.config);
        for t in 0..10 {
            let one = motor.motor_forward(&zs[t * 4..(t + 1) * 4], &mut step_state).unwrap();
            assert_eq!(one.len(), 1);
            for (a, b) in [
                (&one[0].alpha, &all[t].alpha),
                (&one[0].mu, &all[t].mu),
                (&one[0].sigma, &all[t].sigma),
            ] {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() < 1e-10, "step {t}: {x} vs {y}");
                }
            }
        }
        for i in 0..3 {
            for (x, y) in all_state.h[i].iter().zip(&step_state.h[i]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampling_determinism_and_degenerate_mixture() {
        let params = MixtureParams {
            alpha: vec![0.0, 1.0, 0.0],
            mu: vec![5.0, -5.0, 1.25, -0.75, 9.0, 9.0],
            sigma: vec![1.0, 1e-9, 1.0],
        };
        let a = mdn_sample(&params, 11).unwrap();
        let b = mdn_sample(&params, 11).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - 1.25).abs() < 1e-6);
        assert!((a[1] + 0.75).abs() < 1e-6);
        assert_eq!(mdn_mode(&params).unwrap(), vec![1.25, -0.75]);
        let c = mdn_sample(&params, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_mean_matches_mixture_moment() {
        let params = MixtureParams {
            alpha: vec![0.3, 0.5, 0.2],
            mu: vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.0],
            sigma: vec![0.5, 1.0, 2.0],
        };
        let j = 2;
        let n = 100_000usize;
        let mut mean = vec![0.0; j];
        for seed in 0..n {
            let s = mdn_sample(&params, seed as u64).unwrap();
            for d in 0..j {
                mean[d] += s[d];
            }
        }
        for d in 0..j {
            mean[d] /= n as f64;
            let want: f64 = (0..3).map(|i| params.alpha[i] * params.mu[i * j + d]).sum();
            // Mixture variance per joint: sum_i a_i (sigma_i^2 + mu_id^2) - want^2.
            let var: f64 = (0..3)
                .map(|i| {
                    params.alpha[i]
                        * (params.sigma[i] * params.sigma[i]
                            + params.mu[i * j + d] * params.mu[i * j + d])
                })
                .sum::<f64>()
                - want * want;
            let tol = 4.0 * (var / n as f64).sqrt();
            assert!((mean[d] - want).abs() < tol, "joint {d}: |{} - {want}| >= {tol}", mean[d]);
        }
    }

    #[test]
    fn loss_constants_and_naive_oracle() {
        let motor = Motor::new(tiny_config(), 7).unwrap();
        // N=1, mu = target, sigma = 1: the standard normal at its mean.
        let unit = MixtureParams { alpha: vec![1.0], mu: vec![0.3, -0.4], sigma: vec![1.0] };
        let t = vec![vec![0.3, -0.4]];
        let got = motor.mdn_loss(&[unit.clone()], &t).unwrap();
        assert!((got - LN_2PI).abs() < 1e-12, "got {got}, want {LN_2PI}");

        // Scaling sigma by 10 with the target at the mean adds J ln 10.
        let wide = MixtureParams { sigma: vec![10.0], ..unit.clone() };
        let widened = motor.mdn_loss(&[wide], &t).unwrap();
        assert!((widened - got - 2.0 * 10.0f64.ln()).abs() < 1e-12);

        // Random N=3, J=2 mixture against the naive density sum.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MixtureParams {
            alpha: {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            },
            mu: rand_seq(&mut rng, 6),
            sigma: (0..3).map(|_| rng.gen_range(0.3..2.0)).collect(),
        };
        let target = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let got = mdn_nll(&params, &target).unwrap();
        let mut dens = 0.0;
        for i in 0..3 {
            let s = params.sigma[i];
            let mut comp = params.alpha[i];
            for d in 0..2 {
                let diff = target[d] - params.mu[i * 2 + d];
                comp *= (-diff * diff / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            dens += comp;
        }
        let want = -dens.ln();
        assert!((got - want).abs() < 1e-8, "got {got}, want {want}");

        // Validation errors.
        let bad = MixtureParams { alpha: vec![0.7, 0.7], mu: vec![0.0; 4], sigma: vec![1.0, 1.0] };
        assert!(mdn_nll(&bad, &[0.0, 0.0]).is_err());
        let neg = MixtureParams { alpha: vec![1.0], mu: vec![0.0, 0.0], sigma: vec![-1.0] };
        assert!(mdn_nll(&neg, &[0.0, 0.0]).is_err());
        assert!(mdn_nll(&unit, &[0.0]).is_err());
    }

    #[test]
    fn loss_node_matches_scalar_form() {
        let motor = Motor::new(tiny_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_steps = 4;
        let zs = rand_seq(&mut rng, t_steps * 4);
        let targets: Vec<Vec<f64>> = (0..t_steps).map(|_| rand_seq(&mut rng, 2)).collect();

        let mut state = MotorState::zeros(&motor.config);
        let params = motor.motor_forward(&zs, &mut state).unwrap();
        let scalar = motor.mdn_loss(&params, &targets).unwrap();

        let mut g = Graph::new();
        let mut bind = Binding::new(&motor.ps);
        let mut st = motor.zero_state_nodes(&mut g, 1);
        let z_nodes: Vec<NodeId> = (0..t_steps)
            .map(|t| g.constant(Tensor::from_vec(&[1, 4], zs[t * 4..(t + 1) * 4].to_vec())))
            .collect();
        let steps = motor.unroll_nodes(&mut g, &mut bind, &motor.ps, &z_nodes, &mut st);
        let mut total = None;
        for (s, t) in steps.iter().zip(&targets) {
            let tn = g.constant(Tensor::from_vec(&[1, 2], t.clone()));
            let l = motor.mdn_loss_node(&mut g, s, tn);
            total = Some(match total {
                None => l,
                Some(prev) => g.add(prev, l),
            });
        }
        let sum = total.unwrap();
        let loss = g.scale_shift(sum, 1.0 / t_steps as f64, 0.0);
        let node_val = g.val(loss).item();
        assert!((node_val - scalar).abs() < 1e-12, "node {node_val} vs scalar {scalar}");
    }

    #[test]
    fn zeroed_lstm_weights_keep_input_path() {
        let mut motor = Motor::new(tiny_config(), 13).unwrap();
        for cell in [motor.l1, motor.l2, motor.l3] {
            motor.ps.get_mut(cell.wx).data_mut().fill(0.0);
            motor.ps.get_mut(cell.wh).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let za = rand_seq(&mut rng, 4);
        let zb = rand_seq(&mut rng, 4);
        let mut s1 = MotorState::zeros(&motor.config);
        let mut s2 = MotorState::zeros(&motor.config);
        let pa = &motor.motor_forward(&za, &mut s1).unwrap()[0];
        let pb = &motor.motor_forward(&zb, &mut s2).unwrap()[0];
        let delta = pa
            .mu
            .iter()
            .zip(&pb.mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(delta > 1e-6, "dead trunk killed the input path: delta {delta}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut motor = Motor::new(tiny_config(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = 2;
        let t_steps = 3;
        let zs: Vec<Tensor> = (0..t_steps)
            .map(|_| Tensor::from_vec(&[b, 4], rand_seq(&mut rng, b * 4)))
            .collect();
        let targets: Vec<Tensor> = (0..t_steps)
            .map(|_| Tensor::from_vec(&[b, 2], rand_seq(&mut rng, b * 2)))
            .collect();
        let mut ps = std::mem::replace(&mut motor.ps, ParamSet::new());
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let mut st = motor.zero_state_nodes(&mut g, b);
            let z_nodes: Vec<NodeId> = zs.iter().map(|z| g.constant(z.clone())).collect();
            let steps = motor.unroll_nodes(&mut g, &mut bind, ps, &z_nodes, &mut st);
            let mut total = None;
            for (s, t) in steps.iter().zip(&targets) {
                let tn = g.constant(t.clone());
                let l = motor.mdn_loss_node(&mut g, s, tn);
                total = Some(match total {
                    None => l,
                    Some(prev) => g.add(prev, l),
                });
            }
            let sum = total.unwrap();
            let loss = g.scale_shift(sum, 1.0 / t_steps as f64, 0.0);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-6, 2, 1e-8);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}

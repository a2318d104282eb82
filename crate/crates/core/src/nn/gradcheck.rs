//! Central-difference gradient verification.
//!
//! The analytic gradients produced by the tape are compared against
//! `(f(x + eps) - f(x - eps)) / (2 eps)` for every (optionally strided)
//! parameter entry. This is the oracle backing the gradient test suite.

use super::layers::{GradBuffer, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor: differences below `floor` count as
/// zero so that near-zero gradients do not divide away the tolerance.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Verify `analytic` against central differences of `loss_fn` over every
/// parameter entry, visiting every `stride`-th index of each tensor.
pub fn check_params(
    ps: &mut ParamSet,
    analytic: &GradBuffer,
    mut loss_fn: impl FnMut(&ParamSet) -> f64,
    eps: f64,
    stride: usize,
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    let n_params = ps.len();
    for pi in 0..n_params {
        let id = super::layers::ParamId(pi);
        let n = ps.get(id).numel();
        let mut j = 0;
        while j < n {
            let orig = ps.get(id).data()[j];
            ps.get_mut(id).data_mut()[j] = orig + eps;
            let fp = loss_fn(ps);
            ps.get_mut(id).data_mut()[j] = orig - eps;
            let fm = loss_fn(ps);
            ps.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(id).data()[j];
            let e = rel_err(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = ps.name(id).to_string();
                report.worst_index = j;
            }
            j += stride;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::layers::{Binding, GradBuffer, Linear, LstmCell, ParamSet};
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Gradient of a composite expression exercising most elementwise and
    /// reduction ops at once.
    #[test]
    fn elementwise_and_reduction_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_tensor(&mut rng, &[3, 4]));
        let b = ps.add("b", rand_tensor(&mut rng, &[3, 4]));
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let an = bind.node(&mut g, ps, a);
            let bn = bind.node(&mut g, ps, b);
            let s = g.sigmoid(an);
            let t = g.tanh(bn);
            let m = g.mul(s, t);
            let e = g.exp(m);
            let sc = g.scale_shift(e, 0.5, 2.0);
            let l = g.ln(sc);
            let r = g.relu(l);
            let sum_rows = g.sum_last_axis(r);
            let diff = g.sub(sum_rows, sum_rows);
            let back = g.add(diff, sum_rows);
            let loss = g.mean_all(back);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(
            report.passes(1e-5),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn softmax_family_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_tensor(&mut rng, &[4, 5]));
        let idx = vec![1usize, 4, 0, 2];
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let an = bind.node(&mut g, ps, a);
            let sm = g.softmax(an);
            let lsm = g.log_softmax(an);
            let lse = g.log_sum_exp(an);
            let picked = g.select_cols(lsm, &idx);
            let prod = g.mul_col_vec(sm, lse);
            let psum = g.sum_all(prod);
            let ssum = g.sum_all(picked);
            let loss = g.add(psum, ssum);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn structural_ops_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, &mut rng, "fc", 6, 3);
        let row = ps.add("row", rand_tensor(&mut rng, &[1, 4]));
        let x = rand_tensor(&mut rng, &[2, 6]);
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let xn = g.constant(x.clone());
            let y = lin.forward(&mut g, &mut bind, ps, xn);
            let rn = bind.node(&mut g, ps, row);
            let rep = g.repeat_rows(rn, 2);
            let left = g.slice_cols(rep, 0, 2);
            let right = g.slice_cols(rep, 2, 4);
            let cat = g.concat_cols(left, right);
            let both = g.concat_cols(y, cat);
            let reshaped = g.reshape(both, &[1, 14]);
            let clamped = g.clamp(reshaped, -0.6, 0.6);
            let loss = g.mean_all(clamped);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn transpose_values_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_tensor(&mut rng, &[2, 3]));
        {
            let mut g = Graph::new();
            let mut bind = Binding::new(&ps);
            let an = bind.node(&mut g, &ps, a);
            let t = g.transpose(an);
            assert_eq!(g.val(t).shape(), &[3, 2]);
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(g.val(t).data()[j * 2 + i], ps.get(a).data()[i * 3 + j]);
                }
            }
        }
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let an = bind.node(&mut g, ps, a);
            let t = g.transpose(an);
            let s = g.sigmoid(t);
            let back = g.transpose(s);
            let m = g.mul(back, an);
            let loss = g.sum_all(m);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_upsample_and_channel_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ps = ParamSet::new();
        let w = ps.add("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let bias = ps.add("bias", rand_tensor(&mut rng, &[3]));
        let xin = ps.add("xin", rand_tensor(&mut rng, &[2, 2, 5, 4]));
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let xn = bind.node(&mut g, ps, xin);
            let wn = bind.node(&mut g, ps, w);
            let bn = bind.node(&mut g, ps, bias);
            let c = g.conv2d(xn, wn, 2, 1);
            let cb = g.add_channel_bias(c, bn);
            let up = g.upsample2x(cb);
            let act = g.tanh(up);
            let loss = g.mean_all(act);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn embedding_and_lstm_over_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut ps = ParamSet::new();
        let table = ps.add("emb", rand_tensor(&mut rng, &[5, 3]));
        let cell = LstmCell::new(&mut ps, &mut rng, "lstm", 3, 4);
        let tokens = vec![2usize, 0, 4, 2];
        let run = |ps: &ParamSet, grads: Option<&mut GradBuffer>| -> f64 {
            let mut g = Graph::new();
            let mut bind = Binding::new(ps);
            let tn = bind.node(&mut g, ps, table);
            let seq = g.embed_rows(tn, &tokens);
            let (mut h, mut c) = cell.zero_state(&mut g, 1);
            for t in 0..tokens.len() {
                let row = slice_row(&mut g, seq, t, tokens.len(), 3);
                let (h2, c2) = cell.step(&mut g, &mut bind, ps, row, h, c);
                h = h2;
                c = c2;
            }
            let sq = g.mul(h, h);
            let loss = g.mean_all(sq);
            if let Some(gr) = grads {
                g.backward(loss);
                bind.accumulate_grads(&g, gr);
            }
            g.val(loss).item()
        };
        let mut grads = GradBuffer::zeros_like(&ps);
        run(&ps, Some(&mut grads));
        let report = check_params(&mut ps, &grads, |p| run(p, None), 1e-5, 1, 1e-9);
        assert!(
            report.passes(1e-5),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    /// Extract row `t` of an [r,c] node as [1,c] by reshaping to [1, r*c]
    /// and slicing columns.
    fn slice_row(
        g: &mut Graph,
        x: crate::nn::graph::NodeId,
        t: usize,
        rows: usize,
        cols: usize,
    ) -> crate::nn::graph::NodeId {
        let flat = g.reshape(x, &[1, rows * cols]);
        g.slice_cols(flat, t * cols, (t + 1) * cols)
    }
}

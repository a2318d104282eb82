//! Parameter storage, layer builders and seeded initialisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Adam first-moment estimate.
    pub m: Tensor,
    /// Adam second-moment estimate.
    pub v: Tensor,
}

/// Ordered collection of named parameters. Insertion order is fixed by
/// construction and is the canonical order for checkpoints and gradients.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Lazy mapping from parameters to leaf nodes on one tape. Forward passes ask
/// for the node of each parameter they touch; each parameter is copied onto
/// the tape at most once per graph.
pub struct Binding {
    map: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new(ps: &ParamSet) -> Self {
        Binding {
            map: vec![None; ps.len()],
        }
    }

    pub fn node(&mut self, g: &mut Graph, ps: &ParamSet, id: ParamId) -> NodeId {
        match self.map[id.0] {
            Some(n) => n,
            None => {
                let n = g.leaf(ps.get(id).clone());
                self.map[id.0] = Some(n);
                n
            }
        }
    }

    /// Add this tape's parameter gradients into an external buffer, so that
    /// several tapes (e.g. batch chunks) can contribute to one update.
    pub fn accumulate_grads(&self, g: &Graph, grads: &mut GradBuffer) {
        for (pid, node) in self.map.iter().enumerate() {
            if let Some(n) = node {
                if let Some(gt) = g.grad(*n) {
                    grads.bufs[pid].add_assign(gt);
                }
            }
        }
    }
}

/// Per-parameter gradient accumulator matching a [`ParamSet`] layout.
pub struct GradBuffer {
    bufs: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        GradBuffer {
            bufs: ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.bufs[id.0]
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.data_mut().fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            b.scale_assign(s);
        }
    }

    /// Global L2 norm across every buffered gradient.
    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .map(|b| b.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam optimiser operating on a [`ParamSet`] with externally accumulated
/// gradients.
#[derive(Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &GradBuffer) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in ps.iter_mut().enumerate() {
            let g = grads.bufs[i].data();
            for j in 0..g.len() {
                let gj = g[j];
                p.m.data_mut()[j] = self.beta1 * p.m.data()[j] + (1.0 - self.beta1) * gj;
                p.v.data_mut()[j] = self.beta2 * p.v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = p.m.data()[j] / bc1;
                let vhat = p.v.data()[j] / bc2;
                p.value.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Xavier-uniform initialisation.
pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data)
}

/// Fully connected layer y = xW + b.
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), xavier(rng, &[in_dim, out_dim], in_dim, out_dim));
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[1, out_dim]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = bind.node(g, ps, self.w);
        let b = bind.node(g, ps, self.b);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

/// 2-d convolution layer with per-channel bias.
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let w = ps.add(
            &format!("{name}.w"),
            xavier(rng, &[out_ch, in_ch, k, k], fan_in, fan_out),
        );
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = bind.node(g, ps, self.w);
        let b = bind.node(g, ps, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_channel_bias(y, b)
    }
}

/// Single LSTM cell. Gate layout along the 4H axis is `i, f, g, o`; the
/// forget-gate bias is initialised to 1.
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = ps.add(
            &format!("{name}.wx"),
            xavier(rng, &[input, 4 * hidden], input, 4 * hidden),
        );
        let wh = ps.add(
            &format!("{name}.wh"),
            xavier(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
        );
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        let b = ps.add(&format!("{name}.b"), bias);
        LstmCell { wx, wh, b, hidden }
    }

    /// One time step. `x` is [B,D]; `h` and `c` are [B,H]. Returns (h', c').
    pub fn step(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let hdim = self.hidden;
        let wx = bind.node(g, ps, self.wx);
        let wh = bind.node(g, ps, self.wh);
        let b = bind.node(g, ps, self.b);
        let zx = g.matmul(x, wx);
        let zh = g.matmul(h, wh);
        let zsum = g.add(zx, zh);
        let z = g.add_bias(zsum, b);
        let i_pre = g.slice_cols(z, 0, hdim);
        let f_pre = g.slice_cols(z, hdim, 2 * hdim);
        let g_pre = g.slice_cols(z, 2 * hdim, 3 * hdim);
        let o_pre = g.slice_cols(z, 3 * hdim, 4 * hdim);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let gg = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c_new = g.add(fc, ig);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o, c_act);
        (h_new, c_new)
    }

    /// Zeroed initial state for a batch of `b` sequences.
    pub fn zero_state(&self, g: &mut Graph, b: usize) -> (NodeId, NodeId) {
        let h = g.constant(Tensor::zeros(&[b, self.hidden]));
        let c = g.constant(Tensor::zeros(&[b, self.hidden]));
        (h, c)
    }
}

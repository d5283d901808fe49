//! Minimal dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass over 2-d f64 tensors (rows = batch)
//! and replays it backwards to populate gradients. Parameters live outside
//! the tape and are re-registered each step; a tape is confined to a single
//! worker. Everything is f64.

use ndarray::{Array2, Axis};
use rand::Rng;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    LeakyRelu(f64),
    Sigmoid,
    Square,
    Sqrt,
    Neg,
}

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `B x n` plus a broadcast `1 x n` row.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `B x n` times a broadcast `1 x n` row.
    MulRow(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Unary(Unary, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Single-row slice.
    Row(NodeId, usize),
    /// Column-range slice `[start, start + len)`.
    Cols(NodeId, usize, usize),
    /// Straight-through estimator: forward holds a hard value, backward
    /// multiplies incoming gradients by the stored relaxed derivative.
    StraightThrough {
        input: NodeId,
        dvalue: Mat,
    },
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    /// Differentiable leaf (a parameter registered for this step).
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` when the node was
    /// not reached (treat as zero).
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(value, Op::MulRow(a, row))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        self.push(value, Op::AddConst(a))
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let value = match kind {
            Unary::Sin => self.nodes[a.0].value.mapv(f64::sin),
            Unary::Cos => self.nodes[a.0].value.mapv(f64::cos),
            Unary::Exp => self.nodes[a.0].value.mapv(f64::exp),
            Unary::Log => self.nodes[a.0].value.mapv(f64::ln),
            Unary::Tanh => self.nodes[a.0].value.mapv(f64::tanh),
            Unary::LeakyRelu(s) => self.nodes[a.0]
                .value
                .mapv(|v| if v >= 0.0 { v } else { s * v }),
            Unary::Sigmoid => self.nodes[a.0].value.mapv(sigmoid),
            Unary::Square => self.nodes[a.0].value.mapv(|v| v * v),
            Unary::Sqrt => self.nodes[a.0].value.mapv(f64::sqrt),
            Unary::Neg => self.nodes[a.0].value.mapv(|v| -v),
        };
        self.push(value, Op::Unary(kind, a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Cos, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Neg, a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(Mat::from_elem((1, 1), m), Op::Mean(a))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let value = self.nodes[a.0].value.row(i).to_owned().insert_axis(Axis(0));
        self.push(value, Op::Row(a, i))
    }

    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::Cols(a, start, len))
    }

    /// Affine layer `x W + b` with `W: in x out`, `b: 1 x out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "loss must be scalar"
        );
        self.nodes[loss.0].grad = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf { requires_grad } => {
                    // Keep gradients on differentiable leaves, drop the rest.
                    if *requires_grad {
                        self.nodes[idx].grad = Some(g);
                    }
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, g.clone());
                    self.accumulate(row, drow);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MulRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let da = &g * &self.nodes[row.0].value;
                    let drow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accumulate(a, da);
                    self.accumulate(row, drow);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = &self.nodes[b.0].value;
                    let da = &g / bv;
                    let db = -&g * &self.nodes[a.0].value / (bv * bv);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) => {
                    let a = *a;
                    self.accumulate(a, g);
                }
                Op::Unary(kind, a) => {
                    let (kind, a) = (*kind, *a);
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let da = match kind {
                        Unary::Sin => &g * &x.mapv(f64::cos),
                        Unary::Cos => &g * &x.mapv(|v| -v.sin()),
                        Unary::Exp => &g * y,
                        Unary::Log => &g / x,
                        Unary::Tanh => &g * &y.mapv(|t| 1.0 - t * t),
                        Unary::LeakyRelu(s) => &g * &x.mapv(|v| if v >= 0.0 { 1.0 } else { s }),
                        Unary::Sigmoid => &g * &y.mapv(|s| s * (1.0 - s)),
                        Unary::Square => &g * &x.mapv(|v| 2.0 * v),
                        Unary::Sqrt => &g * &y.mapv(|s| 0.5 / s),
                        Unary::Neg => g.mapv(|v| -v),
                    };
                    self.accumulate(a, da);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.dim();
                    self.accumulate(a, Mat::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.dim();
                    let scale = g[[0, 0]] / self.nodes[a.0].value.len() as f64;
                    self.accumulate(a, Mat::from_elem(shape, scale));
                }
                Op::Row(a, i) => {
                    let (a, i) = (*a, *i);
                    let mut da = Mat::zeros(self.nodes[a.0].value.dim());
                    da.row_mut(i).assign(&g.row(0));
                    self.accumulate(a, da);
                }
                Op::Cols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut da = Mat::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                    self.accumulate(a, da);
                }
                Op::StraightThrough { input, dvalue } => {
                    let input = *input;
                    let da = &g * dvalue;
                    self.accumulate(input, da);
                }
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, g: Mat) {
        if let Op::Leaf {
            requires_grad: false,
        } = self.nodes[id.0].op
        {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Straight-through Gumbel-sigmoid: the forward value is the hard threshold
/// of the relaxed sample `sigmoid((gamma + logistic_noise) / temperature)`;
/// the backward pass uses the relaxed derivative w.r.t. `gamma`.
pub fn gumbel_sigmoid(
    tape: &mut Tape,
    gamma: NodeId,
    temperature: f64,
    rng: &mut impl Rng,
) -> NodeId {
    assert!(temperature > 0.0);
    let gv = tape.value(gamma).clone();
    let mut hard = Mat::zeros(gv.dim());
    let mut dvalue = Mat::zeros(gv.dim());
    for ((i, j), &g) in gv.indexed_iter() {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let noise = u.ln() - (1.0 - u).ln();
        let s = sigmoid((g + noise) / temperature);
        hard[[i, j]] = f64::from(s > 0.5);
        dvalue[[i, j]] = s * (1.0 - s) / temperature;
    }
    tape.nodes.push(Node {
        value: hard,
        grad: None,
        op: Op::StraightThrough {
            input: gamma,
            dvalue,
        },
    });
    NodeId(tape.nodes.len() - 1)
}

/// Expected edge count of a mask with logits `gamma`: `sum sigmoid(gamma)`.
pub fn expected_l0(gamma: &Mat) -> f64 {
    gamma.iter().map(|&g| sigmoid(g)).sum()
}

/// Adam moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Mat,
    pub v: Mat,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Mat::zeros(shape),
            v: Mat::zeros(shape),
            t: 0,
        }
    }
}

/// One Adam update with bias correction; `lr` is subtracted along the
/// gradient (descent step).
pub fn adam_step(
    param: &mut Mat,
    grad: &Mat,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    azip(param, grad, &mut state.m, &mut state.v, |p, g, m, v| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    });
}

fn azip(
    p: &mut Mat,
    g: &Mat,
    m: &mut Mat,
    v: &mut Mat,
    mut f: impl FnMut(&mut f64, f64, &mut f64, &mut f64),
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| f(p, g, m, v));
}

/// A fully connected net with Leaky-ReLU hidden activations and a linear
/// output layer; weights use Kaiming-style initialization.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub weights: Vec<Mat>,
    pub biases: Vec<Mat>,
    pub adam_w: Vec<AdamState>,
    pub adam_b: Vec<AdamState>,
    pub slope: f64,
}

/// Tape node ids of one registration of an [`Mlp`]'s parameters.
pub struct MlpIds {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Mlp {
    pub fn new(widths: &[usize], slope: f64, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let std = (2.0 / (1.0 + slope * slope) / d_in as f64).sqrt();
            let w = Mat::from_shape_fn((d_in, d_out), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * std
            });
            weights.push(w);
            biases.push(Mat::zeros((1, d_out)));
        }
        let adam_w = weights.iter().map(|w| AdamState::new(w.dim())).collect();
        let adam_b = biases.iter().map(|b| AdamState::new(b.dim())).collect();
        Self {
            weights,
            biases,
            adam_w,
            adam_b,
            slope,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Registers all parameters on the tape for this step.
    pub fn register(&self, tape: &mut Tape) -> MlpIds {
        MlpIds {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &MlpIds, x: NodeId) -> NodeId {
        let mut h = x;
        let last = ids.weights.len() - 1;
        for l in 0..ids.weights.len() {
            h = tape.affine(h, ids.weights[l], ids.biases[l]);
            if l < last {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        h
    }

    /// Plain forward pass without recording; used at evaluation time.
    pub fn forward_plain(&self, x: &Mat) -> Mat {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            h = h.dot(&self.weights[l]) + &self.biases[l];
            if l < last {
                h.mapv_inplace(|v| if v >= 0.0 { v } else { self.slope * v });
            }
        }
        h
    }

    /// Applies Adam using the gradients accumulated on the tape.
    pub fn apply_grads(&mut self, tape: &Tape, ids: &MlpIds, lr: f64) {
        for l in 0..self.weights.len() {
            if let Some(g) = tape.grad(ids.weights[l]) {
                adam_step(
                    &mut self.weights[l],
                    g,
                    &mut self.adam_w[l],
                    lr,
                    0.9,
                    0.999,
                    1e-8,
                );
            }
            if let Some(g) = tape.grad(ids.biases[l]) {
                adam_step(
                    &mut self.biases[l],
                    g,
                    &mut self.adam_b[l],
                    lr,
                    0.9,
                    0.999,
                    1e-8,
                );
            }
        }
    }

    /// Flat parameter vector (weights then biases, layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend(self.weights[l].iter());
            out.extend(self.biases[l].iter());
        }
        out
    }

    pub fn load_flat(&mut self, data: &mut impl Iterator<Item = f64>) {
        for l in 0..self.weights.len() {
            for v in self.weights[l].iter_mut() {
                *v = data.next().expect("parameter blob too short");
            }
            for v in self.biases[l].iter_mut() {
                *v = data.next().expect("parameter blob too short");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.constant(Mat::eye(2));
        let y = tape.matmul(x, eye);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::zeros((3, 4)));
        let s = tape.sum(x);
        assert_eq!(tape.scalar(s), 0.0);
    }

    /// Builds a random graph mixing every op and checks all parameter
    /// gradients against central finite differences.
    fn gradcheck_case(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Points kept away from kinks (leaky relu at 0) and log/sqrt domains.
        let p0v = Mat::from_shape_fn((2, 3), |_| rng.gen_range(0.5..1.5));
        let p1v = Mat::from_shape_fn((3, 2), |_| rng.gen_range(-1.5..-0.5));
        let p2v = Mat::from_shape_fn((1, 2), |_| rng.gen_range(0.25..0.75));

        let eval = |a: &Mat, b: &Mat, c: &Mat| -> f64 {
            let mut tape = Tape::new();
            let p0 = tape.param(a.clone());
            let p1 = tape.param(b.clone());
            let p2 = tape.param(c.clone());
            let mm = tape.matmul(p0, p1); // 2x2
            let act = tape.tanh(mm);
            let biased = tape.add_row(act, p2);
            let s1 = tape.sin(biased);
            let c1 = tape.cos(biased);
            let prod = tape.mul(s1, c1);
            let sq = tape.square(prod);
            let shifted = tape.add_const(sq, 1.5);
            let lg = tape.log(shifted);
            let rt = tape.sqrt(shifted);
            let ratio = tape.div(lg, rt);
            let lrelu = tape.leaky_relu(ratio, 0.2);
            let sg = tape.sigmoid(lrelu);
            let e = tape.exp(sg);
            let row = tape.row(e, 1);
            let col = tape.cols(e, 0, 1);
            let sr = tape.sum(row);
            let sc = tape.mean(col);
            let neg = tape.neg(sc);
            let total_pre = tape.add(sr, neg);
            let total = tape.scale(total_pre, 0.7);
            tape.scalar(total)
        };

        let grads = {
            let mut tape = Tape::new();
            let p0 = tape.param(p0v.clone());
            let p1 = tape.param(p1v.clone());
            let p2 = tape.param(p2v.clone());
            let mm = tape.matmul(p0, p1);
            let act = tape.tanh(mm);
            let biased = tape.add_row(act, p2);
            let s1 = tape.sin(biased);
            let c1 = tape.cos(biased);
            let prod = tape.mul(s1, c1);
            let sq = tape.square(prod);
            let shifted = tape.add_const(sq, 1.5);
            let lg = tape.log(shifted);
            let rt = tape.sqrt(shifted);
            let ratio = tape.div(lg, rt);
            let lrelu = tape.leaky_relu(ratio, 0.2);
            let sg = tape.sigmoid(lrelu);
            let e = tape.exp(sg);
            let row = tape.row(e, 1);
            let col = tape.cols(e, 0, 1);
            let sr = tape.sum(row);
            let sc = tape.mean(col);
            let neg = tape.neg(sc);
            let total_pre = tape.add(sr, neg);
            let total = tape.scale(total_pre, 0.7);
            tape.backward(total);
            [
                tape.grad(p0).unwrap().clone(),
                tape.grad(p1).unwrap().clone(),
                tape.grad(p2).unwrap().clone(),
            ]
        };

        let h = 1e-5;
        let params = [p0v.clone(), p1v.clone(), p2v.clone()];
        for (pi, grad) in grads.iter().enumerate() {
            for idx in 0..params[pi].len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[pi].as_slice_mut().unwrap()[idx] += h;
                minus[pi].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus[0], &plus[1], &plus[2])
                    - eval(&minus[0], &minus[1], &minus[2]))
                    / (2.0 * h);
                let got = grad.as_slice().unwrap()[idx];
                let denom = got.abs().max(1e-3);
                assert!(
                    (fd - got).abs() / denom < 1e-4,
                    "seed {seed}, param {pi}, idx {idx}: fd {fd} vs {got}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_random_graphs() {
        for seed in 0..5 {
            gradcheck_case(seed);
        }
    }

    #[test]
    fn unreached_param_gradient_is_none() {
        let mut tape = Tape::new();
        let used = tape.param(Mat::from_elem((1, 1), 2.0));
        let unused = tape.param(Mat::from_elem((1, 1), 3.0));
        let loss = tape.square(used);
        let loss = tape.sum(loss);
        tape.backward(loss);
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Mat::from_elem((2, 2), 1.5);
        let g = Mat::zeros((2, 2));
        let mut st = AdamState::new((2, 2));
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p, Mat::from_elem((2, 2), 1.5));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Mat::from_elem((1, 1), 0.0);
        let g = Mat::from_elem((1, 1), 1.0);
        let mut st = AdamState::new((1, 1));
        adam_step(&mut p, &g, &mut st, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[[0, 0]] + 0.01).abs() < 1e-6, "step {}", p[[0, 0]]);
    }

    #[test]
    fn adam_moments_decay() {
        let mut p = Mat::from_elem((1, 1), 0.0);
        let g = Mat::from_elem((1, 1), 2.0);
        let mut st = AdamState::new((1, 1));
        adam_step(&mut p, &g, &mut st, 0.01, 0.9, 0.999, 1e-8);
        assert!((st.m[[0, 0]] - 0.2).abs() < 1e-12);
        assert!((st.v[[0, 0]] - 0.004).abs() < 1e-12);
    }

    #[test]
    fn gumbel_extremes_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ones = 0usize;
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let gamma = tape.param(Mat::from_elem((1, 1), 100.0));
            let m = gumbel_sigmoid(&mut tape, gamma, 1.0, &mut rng);
            ones += tape.scalar(m) as usize;
        }
        assert_eq!(ones, 1000);

        let mut count = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let gamma = tape.param(Mat::from_elem((1, 1), 0.0));
            let m = gumbel_sigmoid(&mut tape, gamma, 1.0, &mut rng);
            count += tape.scalar(m);
        }
        let mean = count / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn expected_l0_is_sigmoid_sum() {
        let gamma = Mat::from_shape_vec((1, 3), vec![0.0, 10.0, -10.0]).unwrap();
        let e = expected_l0(&gamma);
        let expect = 0.5 + sigmoid(10.0) + sigmoid(-10.0);
        assert!((e - expect).abs() < 1e-12);
    }

    #[test]
    fn gumbel_gradient_uses_relaxed_derivative() {
        // At gamma large, hard value is 1 but the straight-through factor is
        // s(1-s)/tau evaluated at the relaxed sample.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let gamma = tape.param(Mat::from_elem((1, 1), 0.3));
        let m = gumbel_sigmoid(&mut tape, gamma, 1.0, &mut rng);
        let loss = tape.sum(m);
        tape.backward(loss);
        let g = tape.grad(gamma).unwrap()[[0, 0]];
        assert!(g > 0.0 && g <= 0.25, "grad {g}");
    }

    #[test]
    fn mlp_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[3, 8, 2], 0.2, &mut rng);
        let x = Mat::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let ids = mlp.register(&mut tape);
        let xn = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &ids, xn);
        let plain = mlp.forward_plain(&x);
        let diff = (tape.value(y) - &plain).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}

//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Only the operations the translator networks need are provided: strided
//! 2-D convolution, leaky ReLU, addition, clamping to `[0, 1]`, and a handful
//! of mean reductions that produce scalars. Every value is computed eagerly
//! when the node is recorded; [`Tape::backward`] walks the nodes in reverse.

/// Dense row-major tensor. Scalars have an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[n, c, h, w]` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Add(Var, Var),
    Clamp01(Var),
    MeanAbsDiff(Var, Var),
    MeanLogSigmoid(Var),
    MeanLogOneMinusSigmoid(Var),
    MeanSquaredOffset {
        input: Var,
        target: f64,
    },
    Linear(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the root does not depend on it.
    pub fn of(&self, var: Var) -> Vec<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.shapes[var.0]])
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Output indices `o` in `0..out_len` for which `o * stride + offset - padding`
/// lands inside `0..in_len`.
fn valid_range(in_len: usize, out_len: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    let start = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + offset - padding <= in_len - 1
    let end = if in_len + padding > offset {
        ((in_len - 1 + padding - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (start, end.max(start))
}

pub fn conv_output_len(in_len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (in_len + 2 * padding - kernel) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let t = self.value(var);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Zero-padded strided convolution. `input` is `[n, c, h, w]`, `weight`
    /// is `[o, c, k, k]`, `bias` is `[o]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, c, h, wd) = x.dims4();
        let (o, wc, k, k2) = w.dims4();
        assert_eq!(c, wc, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(b.len(), o, "conv bias length");
        let ho = conv_output_len(h, k, stride, padding);
        let wo = conv_output_len(wd, k, stride, padding);
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * ho * wo..][..ho * wo];
                plane.fill(b.data[oi]);
                for ci in 0..c {
                    let src = &x.data[(ni * c + ci) * h * wd..][..h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(h, ho, ky, stride, padding);
                        for kx in 0..k {
                            let (ox0, ox1) = valid_range(wd, wo, kx, stride, padding);
                            let wv = w.data[((oi * c + ci) * k + ky) * k + kx];
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - padding;
                                let row = &src[iy * wd..][..wd];
                                let dst = &mut plane[oy * wo..][..wo];
                                for ox in ox0..ox1 {
                                    dst[ox] += wv * row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = x.shape.clone();
        self.push(Tensor::new(shape, data), Op::LeakyRelu { input, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), Op::Add(a, b))
    }

    pub fn clamp01(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let shape = x.shape.clone();
        self.push(Tensor::new(shape, data), Op::Clamp01(input))
    }

    /// `mean(|a - b|)` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mean_abs_diff shape mismatch");
        let sum: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y).abs()).sum();
        let v = sum / ta.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b))
    }

    /// `mean(log(sigmoid(x)))`.
    pub fn mean_log_sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let v = x.data.iter().map(|&l| log_sigmoid(l)).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanLogSigmoid(input))
    }

    /// `mean(log(1 - sigmoid(x)))`.
    pub fn mean_log_one_minus_sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let v = x.data.iter().map(|&l| log_sigmoid(-l)).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanLogOneMinusSigmoid(input))
    }

    /// `mean((x - target)^2)`.
    pub fn mean_squared_offset(&mut self, input: Var, target: f64) -> Var {
        let x = self.value(input);
        let v = x.data.iter().map(|&l| (l - target) * (l - target)).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanSquaredOffset { input, target })
    }

    /// `sum(coef_i * s_i)` over scalar nodes.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(s, c)| c * self.scalar_value(s)).sum();
        self.push(Tensor::scalar(v), Op::Linear(terms.to_vec()))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
            grads[var.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                &Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = self.value(input);
                    let w = self.value(weight);
                    let (n, c, h, wd) = x.dims4();
                    let (o, _, k, _) = w.dims4();
                    let (_, _, ho, wo) = node.value.dims4();
                    let mut gx = vec![0.0; x.len()];
                    let mut gw = vec![0.0; w.len()];
                    let mut gb = vec![0.0; o];
                    for ni in 0..n {
                        for oi in 0..o {
                            let gplane = &g[(ni * o + oi) * ho * wo..][..ho * wo];
                            gb[oi] += gplane.iter().sum::<f64>();
                            for ci in 0..c {
                                let base = (ni * c + ci) * h * wd;
                                for ky in 0..k {
                                    let (oy0, oy1) = valid_range(h, ho, ky, stride, padding);
                                    for kx in 0..k {
                                        let (ox0, ox1) = valid_range(wd, wo, kx, stride, padding);
                                        let widx = ((oi * c + ci) * k + ky) * k + kx;
                                        let wv = w.data[widx];
                                        let mut acc = 0.0;
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - padding;
                                            let grow = &gplane[oy * wo..][..wo];
                                            let row = base + iy * wd;
                                            for ox in ox0..ox1 {
                                                let ix = row + ox * stride + kx - padding;
                                                acc += x.data[ix] * grow[ox];
                                                gx[ix] += wv * grow[ox];
                                            }
                                        }
                                        gw[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    add_into(accumulate(&mut grads, input, x.len()), &gx);
                    add_into(accumulate(&mut grads, weight, w.len()), &gw);
                    add_into(accumulate(&mut grads, bias, o), &gb);
                }
                &Op::LeakyRelu { input, slope } => {
                    let x = self.value(input);
                    let gi = accumulate(&mut grads, input, x.len());
                    for ((acc, &v), &gv) in gi.iter_mut().zip(&x.data).zip(&g) {
                        *acc += if v > 0.0 { gv } else { slope * gv };
                    }
                }
                &Op::Add(a, b) => {
                    add_into(accumulate(&mut grads, a, g.len()), &g);
                    add_into(accumulate(&mut grads, b, g.len()), &g);
                }
                &Op::Clamp01(input) => {
                    let x = self.value(input);
                    let gi = accumulate(&mut grads, input, x.len());
                    for ((acc, &v), &gv) in gi.iter_mut().zip(&x.data).zip(&g) {
                        if (0.0..=1.0).contains(&v) {
                            *acc += gv;
                        }
                    }
                }
                &Op::MeanAbsDiff(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let scale = g[0] / ta.len() as f64;
                    let signs: Vec<f64> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(x, y)| scale * sign(x - y))
                        .collect();
                    add_into(accumulate(&mut grads, a, ta.len()), &signs);
                    let gb = accumulate(&mut grads, b, tb.len());
                    for (acc, s) in gb.iter_mut().zip(&signs) {
                        *acc -= s;
                    }
                }
                &Op::MeanLogSigmoid(input) => {
                    // d/dx log(sigmoid(x)) = 1 - sigmoid(x) = sigmoid(-x)
                    let x = self.value(input);
                    let scale = g[0] / x.len() as f64;
                    let gi = accumulate(&mut grads, input, x.len());
                    for (acc, &v) in gi.iter_mut().zip(&x.data) {
                        *acc += scale * sigmoid(-v);
                    }
                }
                &Op::MeanLogOneMinusSigmoid(input) => {
                    // d/dx log(1 - sigmoid(x)) = -sigmoid(x)
                    let x = self.value(input);
                    let scale = g[0] / x.len() as f64;
                    let gi = accumulate(&mut grads, input, x.len());
                    for (acc, &v) in gi.iter_mut().zip(&x.data) {
                        *acc -= scale * sigmoid(v);
                    }
                }
                &Op::MeanSquaredOffset { input, target } => {
                    let x = self.value(input);
                    let scale = 2.0 * g[0] / x.len() as f64;
                    let gi = accumulate(&mut grads, input, x.len());
                    for (acc, &v) in gi.iter_mut().zip(&x.data) {
                        *acc += scale * (v - target);
                    }
                }
                Op::Linear(terms) => {
                    for &(s, c) in terms {
                        accumulate(&mut grads, s, 1)[0] += c * g[0];
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.len()).collect(),
            grads,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a scalar from every op and returns (tape, root, leaves).
    fn graph(leaves: &[Tensor], stride: usize) -> (Tape, Var, Vec<Var>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.leaf(l.clone())).collect();
        let (x, w, b, w2, b2) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
        let h = t.conv2d(x, w, b, stride, 1);
        let h = t.leaky_relu(h, 0.2);
        let y = t.conv2d(h, w2, b2, 1, 1);
        let target = t.leaf(Tensor::zeros(t.value(y).shape.clone()));
        let l1 = t.mean_abs_diff(y, target);
        let ls = t.mean_log_sigmoid(y);
        let lm = t.mean_log_one_minus_sigmoid(h);
        let sq = t.mean_squared_offset(y, 0.3);
        let root = t.linear(&[(l1, 0.7), (ls, 1.0), (lm, -0.5), (sq, 2.0)]);
        (t, root, vars)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let leaves = vec![
                random(vec![2, 2, 5, 6], &mut rng),
                random(vec![3, 2, 3, 3], &mut rng),
                random(vec![3], &mut rng),
                random(vec![2, 3, 3, 3], &mut rng),
                random(vec![2], &mut rng),
            ];
            let (tape, root, vars) = graph(&leaves, stride);
            let grads = tape.backward(root);
            let eps = 1e-6;
            for (li, leaf) in leaves.iter().enumerate() {
                let analytic = grads.of(vars[li]);
                for j in (0..leaf.len()).step_by(3) {
                    let eval = |delta: f64| {
                        let mut ls = leaves.clone();
                        ls[li].data[j] += delta;
                        let (t, r, _) = graph(&ls, stride);
                        t.scalar_value(r)
                    };
                    let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
                    assert!(err < 1e-5, "leaf {li} idx {j}: {numeric} vs {}", analytic[j]);
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = t.leaf(Tensor::new(vec![1, 1, 3, 3], w));
        let b = t.leaf(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, w, b, 1, 1);
        assert_eq!(t.value(y).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn strided_output_shape() {
        assert_eq!(conv_output_len(32, 3, 2, 1), 16);
        assert_eq!(conv_output_len(8, 3, 2, 1), 4);
        assert_eq!(conv_output_len(8, 3, 1, 1), 8);
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}

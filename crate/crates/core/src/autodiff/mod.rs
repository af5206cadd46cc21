//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! Gradients are built by emitting ordinary graph nodes for every
//! vector-Jacobian product, so the result of
//! [`Graph::backward_differentiable`] can itself be differentiated.
//! [`Graph::backward`] runs the same construction and then rolls the tape
//! back, returning plain tensors.

pub mod check;
pub mod kernels;
mod tensor;

pub use kernels::ConvGeometry;
pub use tensor::Tensor;

use kernels::ConvDims;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Variable,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Transpose,
    /// inputs: `[x: [Ci,H,W], w: [Co,Ci,k,k]]`
    Conv2d(ConvGeometry),
    /// Adjoint of `Conv2d` in its input. inputs: `[g: [Co,Ho,Wo], w]`
    Conv2dInputGrad {
        geometry: ConvGeometry,
        in_h: usize,
        in_w: usize,
    },
    /// Adjoint of `Conv2d` in its weights. inputs: `[x, g: [Co,Ho,Wo]]`
    Conv2dWeightGrad {
        geometry: ConvGeometry,
        kernel: usize,
    },
    /// inputs: `[x: [C,H,W], b: [C]]`
    AddChannelBias,
    /// `[C,H,W] -> [C]`
    ChannelSum,
    /// `[C] -> [C,H,W]`
    ChannelBroadcast { h: usize, w: usize },
    Relu,
    Sum,
    Mean,
    /// `[1] -> shape`
    Expand(Vec<usize>),
    Square,
    Sqrt,
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::AddChannelBias => "add_channel_bias",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast { .. } => "channel_broadcast",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand(_) => "expand",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub value: Tensor,
}

/// Gradients of a scalar root with respect to a list of nodes.
#[derive(Clone, Debug)]
pub struct GradRecord {
    pub root: Var,
    pub grads: Vec<(Var, Tensor)>,
}

impl GradRecord {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads.into_iter().map(|(_, t)| t).collect()
    }
}

/// Append-only computation record. Nodes are created in topological order.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, vec![], t)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Variable, vec![], t)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// Validates shapes, evaluates `op` on the inputs and appends the node.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.evaluate(&op, inputs)?;
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn evaluate(&self, op: &Op, inputs: &[Var]) -> Result<Tensor> {
        let name = op.name();
        let arity = match op {
            Op::Constant | Op::Variable => 0,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::MatMul
            | Op::Conv2d(_)
            | Op::Conv2dInputGrad { .. }
            | Op::Conv2dWeightGrad { .. }
            | Op::AddChannelBias => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                name,
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        if let Some(v) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidInput(format!("{name}: unknown node {v:?}")));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let same_shape = || -> Result<()> {
            if vals[0].shape() != vals[1].shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", vals[0].shape(), vals[1].shape()),
                ));
            }
            Ok(())
        };
        let rank = |t: &Tensor, r: usize, what: &str| -> Result<()> {
            if t.shape().len() != r {
                return Err(Error::shape(
                    name,
                    format!("{what} must have rank {r}, got {:?}", t.shape()),
                ));
            }
            Ok(())
        };

        let out = match op {
            Op::Constant | Op::Variable => {
                return Err(Error::InvalidInput("leaves are created with constant()/variable()".into()))
            }
            Op::Add => {
                same_shape()?;
                vals[0].zip_map(vals[1], |a, b| a + b)
            }
            Op::Sub => {
                same_shape()?;
                vals[0].zip_map(vals[1], |a, b| a - b)
            }
            Op::Mul => {
                same_shape()?;
                vals[0].zip_map(vals[1], |a, b| a * b)
            }
            Op::Div => {
                same_shape()?;
                vals[0].zip_map(vals[1], |a, b| a / b)
            }
            Op::Scale(c) => vals[0].map(|a| a * c),
            Op::MatMul => {
                rank(vals[0], 2, "lhs")?;
                rank(vals[1], 2, "rhs")?;
                let (m, k) = (vals[0].shape()[0], vals[0].shape()[1]);
                let (k2, n) = (vals[1].shape()[0], vals[1].shape()[1]);
                if k != k2 {
                    return Err(Error::shape(
                        name,
                        format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
                    ));
                }
                Tensor::new(vec![m, n], kernels::matmul(vals[0].data(), vals[1].data(), m, k, n))?
            }
            Op::Transpose => {
                rank(vals[0], 2, "input")?;
                let (r, c) = (vals[0].shape()[0], vals[0].shape()[1]);
                Tensor::new(vec![c, r], kernels::transpose(vals[0].data(), r, c))?
            }
            Op::Conv2d(g) => {
                rank(vals[0], 3, "input")?;
                rank(vals[1], 4, "weight")?;
                let dims = conv_dims(name, *g, vals[0].shape(), vals[1].shape())?;
                Tensor::new(
                    vec![dims.c_out, dims.out_h, dims.out_w],
                    kernels::conv2d(vals[0].data(), vals[1].data(), *g, &dims),
                )?
            }
            Op::Conv2dInputGrad { geometry, in_h, in_w } => {
                rank(vals[0], 3, "output gradient")?;
                rank(vals[1], 4, "weight")?;
                let ws = vals[1].shape();
                let dims = conv_dims(name, *geometry, &[ws[1], *in_h, *in_w], ws)?;
                expect_shape(name, vals[0].shape(), &[dims.c_out, dims.out_h, dims.out_w])?;
                Tensor::new(
                    vec![dims.c_in, dims.in_h, dims.in_w],
                    kernels::conv2d_input_grad(vals[0].data(), vals[1].data(), *geometry, &dims),
                )?
            }
            Op::Conv2dWeightGrad { geometry, kernel } => {
                rank(vals[0], 3, "input")?;
                rank(vals[1], 3, "output gradient")?;
                let xs = vals[0].shape();
                let c_out = vals[1].shape()[0];
                let dims = conv_dims(name, *geometry, xs, &[c_out, xs[0], *kernel, *kernel])?;
                expect_shape(name, vals[1].shape(), &[dims.c_out, dims.out_h, dims.out_w])?;
                Tensor::new(
                    vec![c_out, xs[0], *kernel, *kernel],
                    kernels::conv2d_weight_grad(vals[0].data(), vals[1].data(), *geometry, &dims),
                )?
            }
            Op::AddChannelBias => {
                rank(vals[0], 3, "input")?;
                rank(vals[1], 1, "bias")?;
                let s = vals[0].shape();
                if vals[1].shape()[0] != s[0] {
                    return Err(Error::shape(
                        name,
                        format!("bias {:?} for input {:?}", vals[1].shape(), s),
                    ));
                }
                let plane = s[1] * s[2];
                let b = vals[1].data();
                Tensor::from_fn(s, |i| vals[0].data()[i] + b[i / plane])
            }
            Op::ChannelSum => {
                rank(vals[0], 3, "input")?;
                let s = vals[0].shape();
                let plane = s[1] * s[2];
                let d = vals[0].data();
                Tensor::from_fn(&[s[0]], |c| d[c * plane..(c + 1) * plane].iter().sum())
            }
            Op::ChannelBroadcast { h, w } => {
                rank(vals[0], 1, "input")?;
                let c = vals[0].shape()[0];
                let d = vals[0].data();
                let plane = h * w;
                if plane == 0 {
                    return Err(Error::shape(name, "zero spatial extent"));
                }
                Tensor::from_fn(&[c, *h, *w], |i| d[i / plane])
            }
            Op::Relu => vals[0].map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::Sum => Tensor::scalar(vals[0].sum()),
            Op::Mean => Tensor::scalar(vals[0].sum() / vals[0].numel() as f64),
            Op::Expand(shape) => {
                expect_shape(name, vals[0].shape(), &[1])?;
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::shape(name, format!("target shape {shape:?}")));
                }
                Tensor::full(shape, vals[0].item())
            }
            Op::Square => vals[0].map(|a| a * a),
            Op::Sqrt => {
                if let Some(bad) = vals[0].data().iter().find(|&&a| a < 0.0) {
                    return Err(Error::InvalidInput(format!("sqrt of negative value {bad}")));
                }
                vals[0].map(f64::sqrt)
            }
            Op::Reshape(shape) => {
                let n: usize = shape.iter().product();
                if n != vals[0].numel() {
                    return Err(Error::shape(
                        name,
                        format!("cannot reshape {:?} to {shape:?}", vals[0].shape()),
                    ));
                }
                vals[0].reshape(shape)?
            }
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geometry: ConvGeometry) -> Result<Var> {
        self.record(Op::Conv2d(geometry), &[x, w])
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.record(Op::AddChannelBias, &[x, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Expand(shape.to_vec()), &[a])
    }

    /// Gradients of `root` with respect to `wrt`, as plain tensors.
    ///
    /// The tape is restored to its prior length afterwards.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Result<GradRecord> {
        let mark = self.nodes.len();
        let adjoints = self.backward_differentiable(root, wrt);
        let out = adjoints.map(|vars| GradRecord {
            root,
            grads: wrt
                .iter()
                .zip(vars)
                .map(|(w, g)| (*w, self.value(g).clone()))
                .collect(),
        });
        self.nodes.truncate(mark);
        out
    }

    /// Gradients of `root` with respect to `wrt`, recorded as new nodes.
    ///
    /// Nodes in `wrt` that `root` does not depend on get a zero constant.
    pub fn backward_differentiable(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidInput(format!("unknown root {root:?}")));
        }
        let root_shape = self.shape(root);
        if root_shape != [1] {
            return Err(Error::NonScalarRoot {
                shape: root_shape.to_vec(),
            });
        }
        let n = root.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i] && self.nodes[i].inputs.iter().any(|p| depends[p.0]) {
                depends[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if depends[root.0] {
            adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            for (slot, &p) in inputs.iter().enumerate() {
                if !depends[p.0] {
                    continue;
                }
                let contribution = self.vjp(Var(i), slot, g)?;
                adjoint[p.0] = Some(match adjoint[p.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(*w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Contribution of adjoint `g` (of `node`) to the adjoint of its input `slot`.
    fn vjp(&mut self, node: Var, slot: usize, g: Var) -> Result<Var> {
        let Node { op, inputs, .. } = self.nodes[node.0].clone();
        let input_shape = |s: &Self, k: usize| s.shape(inputs[k]).to_vec();
        match op {
            Op::Constant | Op::Variable => unreachable!("leaves have no inputs"),
            Op::Add => Ok(g),
            Op::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.scale(g, -1.0)
                }
            }
            Op::Mul => self.mul(g, inputs[1 - slot]),
            Op::Div => {
                if slot == 0 {
                    self.div(g, inputs[1])
                } else {
                    // d(a/b)/db = -(a/b)/b
                    let gy = self.mul(g, node)?;
                    let q = self.div(gy, inputs[1])?;
                    self.scale(q, -1.0)
                }
            }
            Op::Scale(c) => self.scale(g, c),
            Op::MatMul => {
                if slot == 0 {
                    let bt = self.transpose(inputs[1])?;
                    self.matmul(g, bt)
                } else {
                    let at = self.transpose(inputs[0])?;
                    self.matmul(at, g)
                }
            }
            Op::Transpose => self.transpose(g),
            Op::Conv2d(geometry) => {
                if slot == 0 {
                    let s = input_shape(self, 0);
                    self.record(
                        Op::Conv2dInputGrad {
                            geometry,
                            in_h: s[1],
                            in_w: s[2],
                        },
                        &[g, inputs[1]],
                    )
                } else {
                    let kernel = input_shape(self, 1)[2];
                    self.record(Op::Conv2dWeightGrad { geometry, kernel }, &[inputs[0], g])
                }
            }
            Op::Conv2dInputGrad { geometry, .. } => {
                // z = convT(u, w): <z, zbar> = <u, conv(zbar, w)> = <w, convW(zbar, u)>
                if slot == 0 {
                    self.conv2d(g, inputs[1], geometry)
                } else {
                    let kernel = input_shape(self, 1)[2];
                    self.record(Op::Conv2dWeightGrad { geometry, kernel }, &[g, inputs[0]])
                }
            }
            Op::Conv2dWeightGrad { geometry, .. } => {
                // u = convW(x, v): <u, ubar> = <x, convT(v, ubar)> = <v, conv(x, ubar)>
                if slot == 0 {
                    let s = input_shape(self, 0);
                    self.record(
                        Op::Conv2dInputGrad {
                            geometry,
                            in_h: s[1],
                            in_w: s[2],
                        },
                        &[inputs[1], g],
                    )
                } else {
                    self.conv2d(inputs[0], g, geometry)
                }
            }
            Op::AddChannelBias => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.record(Op::ChannelSum, &[g])
                }
            }
            Op::ChannelSum => {
                let s = input_shape(self, 0);
                self.record(Op::ChannelBroadcast { h: s[1], w: s[2] }, &[g])
            }
            Op::ChannelBroadcast { .. } => self.record(Op::ChannelSum, &[g]),
            Op::Relu => {
                let mask = self.value(inputs[0]).map(|a| if a > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                self.mul(g, mask)
            }
            Op::Sum => {
                let s = input_shape(self, 0);
                self.expand(g, &s)
            }
            Op::Mean => {
                let s = input_shape(self, 0);
                let n = self.value(inputs[0]).numel() as f64;
                let e = self.expand(g, &s)?;
                self.scale(e, 1.0 / n)
            }
            Op::Expand(_) => self.sum(g),
            Op::Square => {
                let ga = self.mul(g, inputs[0])?;
                self.scale(ga, 2.0)
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                self.div(half, node)
            }
            Op::Reshape(_) => {
                let s = input_shape(self, 0);
                self.reshape(g, &s)
            }
        }
    }
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("expected {want:?}, got {got:?}")));
    }
    Ok(())
}

fn conv_dims(op: &'static str, g: ConvGeometry, x: &[usize], w: &[usize]) -> Result<ConvDims> {
    if w[1] != x[0] {
        return Err(Error::shape(
            op,
            format!("weight {w:?} expects {} input channels, input is {x:?}", w[1]),
        ));
    }
    if w[2] != w[3] {
        return Err(Error::shape(op, format!("kernel must be square, got {w:?}")));
    }
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::shape(op, format!("stride and dilation must be >= 1: {g:?}")));
    }
    let k = w[2];
    let (Some(out_h), Some(out_w)) = (g.output_extent(x[1], k), g.output_extent(x[2], k)) else {
        return Err(Error::shape(op, format!("kernel {w:?} does not fit input {x:?} with {g:?}")));
    };
    Ok(ConvDims {
        c_in: x[0],
        c_out: w[0],
        kernel: k,
        in_h: x[1],
        in_w: x[2],
        out_h,
        out_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[0.5, 0.5, -1.0, 2.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.5, 2.5, 2.0, 6.0]);
    }

    #[test]
    fn matmul_shape_rule_and_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 1], 2.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[6.0, 6.0]);

        let d = g.constant(Tensor::full(&[2, 3], 1.0));
        let err = g.matmul(a, d).unwrap_err();
        match err {
            Error::ShapeMismatch { op, detail } => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2,3] x [2,3]"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        let root = g.sum(sq).unwrap();
        let rec = g.backward(root, &[w]).unwrap();
        assert_eq!(rec.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::zeros(&[2, 3]));
        let root = g.constant(Tensor::scalar(4.0));
        let rec = g.backward(root, &[w]).unwrap();
        assert_eq!(rec.get(w).unwrap(), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(w, &[w]),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_leaves_tape_unchanged() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(2.0));
        let sq = g.square(w).unwrap();
        let root = g.sum(sq).unwrap();
        let before = g.len();
        g.backward(root, &[w]).unwrap();
        assert_eq!(g.len(), before);
    }

    #[test]
    fn cube_second_derivative() {
        // f = w^3, f' = 3w^2, f'' = 6w = 12 at w = 2
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(2.0));
        let w2 = g.mul(w, w).unwrap();
        let w3 = g.mul(w2, w).unwrap();
        let f = g.sum(w3).unwrap();
        let df = g.backward_differentiable(f, &[w]).unwrap()[0];
        assert_eq!(g.value(df).item(), 12.0);
        let dfs = g.sum(df).unwrap();
        let rec = g.backward(dfs, &[w]).unwrap();
        assert_eq!(rec.get(w).unwrap().item(), 12.0);
    }

    #[test]
    fn gradient_through_one_sgd_step() {
        // L(w) = w^2, w' = w - a * 2w, L' = w'^2, dL'/dw = 2w(1 - 2a)^2 = 1.28 at w=1, a=0.1
        let alpha = 0.1;
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(1.0));
        let sq = g.square(w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grad = g.backward_differentiable(loss, &[w]).unwrap()[0];
        let step = g.scale(grad, alpha).unwrap();
        let adapted = g.sub(w, step).unwrap();
        let sq2 = g.square(adapted).unwrap();
        let outer = g.sum(sq2).unwrap();
        let rec = g.backward(outer, &[w]).unwrap();
        assert!((rec.get(w).unwrap().item() - 1.28).abs() < 1e-12);
    }
}

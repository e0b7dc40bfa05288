//! Define-by-run tape: op recording and reverse-mode gradient replay.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{shape_of, ParamStore, Tensor, TensorError};

/// Slope and output clip of the leaky rectifier used throughout the nets.
pub const LEAK_SLOPE: f64 = 1.0 / 3.0;
pub const LEAK_CLIP: f64 = 3.0;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the
/// graph that created it (checked at use).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    ConcatLast { a: usize, b: usize, left: usize, right: usize },
    SliceLast { x: usize, start: usize, width: usize },
    AddBias { x: usize, bias: usize },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softplus(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    LeakyClip { x: usize },
    Sum(usize),
    Mean(usize),
    SumLast { x: usize, width: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    param: Option<String>,
}

/// A recorded computation. One forward pass per graph; never shared
/// between computations and not thread-safe by design.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    checked: bool,
    backward_ran: RefCell<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            checked: false,
            backward_ran: RefCell::new(false),
        }
    }

    /// Graph that scans every op output and fails on NaN/Inf.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Graph::new()
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Var { graph: self.id, id }
    }

    fn emit(
        &self,
        opname: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.checked && !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    fn own(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id {
            return Err(TensorError::GraphMismatch);
        }
        Ok(v.id)
    }

    /// Non-differentiated input (data, noise, masks).
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Differentiated leaf without a parameter name (used by gradient checks).
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Bind a named parameter from a store. The graph snapshots the value;
    /// later store mutation does not affect this pass. `trainable = false`
    /// binds it as a constant (frozen parameters).
    pub fn param(&self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var, TensorError> {
        let t = store.get(name)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), trainable, Op::Leaf);
        if trainable {
            self.nodes.borrow_mut()[v.id].param = Some(name.to_string());
        }
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape consistent")
    }

    /// Scalar value of a single-element node.
    pub fn value_scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.id].data.len(), 1);
        nodes[v.id].data[0]
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape matches"))
    }

    // ---- binary elementwise ----

    fn same_shape(&self, opname: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[a].shape != nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: shape_of(&nodes[a].shape),
                rhs: shape_of(&nodes[b].shape),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.own(a)?, self.own(b)?);
        self.same_shape("add", a, b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let data = nodes[a]
                .data
                .iter()
                .zip(&nodes[b].data)
                .map(|(x, y)| x + y)
                .collect();
            (nodes[a].shape.clone(), data, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.emit("add", shape, data, rg, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.own(a)?, self.own(b)?);
        self.same_shape("sub", a, b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let data = nodes[a]
                .data
                .iter()
                .zip(&nodes[b].data)
                .map(|(x, y)| x - y)
                .collect();
            (nodes[a].shape.clone(), data, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.emit("sub", shape, data, rg, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.own(a)?, self.own(b)?);
        self.same_shape("mul", a, b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let data = nodes[a]
                .data
                .iter()
                .zip(&nodes[b].data)
                .map(|(x, y)| x * y)
                .collect();
            (nodes[a].shape.clone(), data, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.emit("mul", shape, data, rg, Op::Mul(a, b))
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.own(a)?, self.own(b)?);
        let (m, k, n, data, rg) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: shape_of(sa),
                    rhs: shape_of(sb),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            dgemm_nn(m, k, n, &nodes[a].data, &nodes[b].data, &mut out, 0.0);
            (m, k, n, out, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.emit("matmul", vec![m, n], data, rg, Op::Matmul { a, b, m, k, n })
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.own(a)?, self.own(b)?);
        let (shape, data, left, right, rg) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
            let ok = !sa.is_empty()
                && sa.len() == sb.len()
                && sa[..sa.len() - 1] == sb[..sb.len() - 1];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: shape_of(sa),
                    rhs: shape_of(sb),
                });
            }
            let left = sa[sa.len() - 1];
            let right = sb[sb.len() - 1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = left + right;
            let mut data = Vec::with_capacity(rows * (left + right));
            for r in 0..rows {
                data.extend_from_slice(&nodes[a].data[r * left..(r + 1) * left]);
                data.extend_from_slice(&nodes[b].data[r * right..(r + 1) * right]);
            }
            (shape, data, left, right, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.emit("concat_last", shape, data, rg, Op::ConcatLast { a, b, left, right })
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let x = self.own(x)?;
        let (shape, data, width, rg) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x].shape;
            if sx.is_empty() {
                return Err(TensorError::InvalidShape {
                    op: "slice_last",
                    shape: shape_of(sx),
                    reason: "needs rank >= 1".into(),
                });
            }
            let width = sx[sx.len() - 1];
            if start + len > width {
                return Err(TensorError::InvalidShape {
                    op: "slice_last",
                    shape: shape_of(sx),
                    reason: format!("slice {start}..{} exceeds width {width}", start + len),
                });
            }
            let rows: usize = sx[..sx.len() - 1].iter().product();
            let mut shape = sx.clone();
            *shape.last_mut().unwrap() = len;
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&nodes[x].data[r * width + start..r * width + start + len]);
            }
            (shape, data, width, nodes[x].requires_grad)
        };
        self.emit("slice_last", shape, data, rg, Op::SliceLast { x, start, width })
    }

    /// Broadcast-add a 1-D bias over the last axis of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (x, bias) = (self.own(x)?, self.own(bias)?);
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (sx, sb) = (&nodes[x].shape, &nodes[bias].shape);
            let ok = sb.len() == 1 && !sx.is_empty() && sx[sx.len() - 1] == sb[0];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: shape_of(sx),
                    rhs: shape_of(sb),
                });
            }
            let width = sb[0];
            let data = nodes[x]
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v + nodes[bias].data[i % width])
                .collect();
            (sx.clone(), data, nodes[x].requires_grad || nodes[bias].requires_grad)
        };
        self.emit("add_bias", shape, data, rg, Op::AddBias { x, bias })
    }

    // ---- unary elementwise ----

    fn unary(
        &self,
        opname: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let x = self.own(x)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let data = nodes[x].data.iter().map(|&v| f(v)).collect();
            (nodes[x].shape.clone(), data, nodes[x].requires_grad)
        };
        self.emit(opname, shape, data, rg, op(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("log", x, f64::ln, Op::Log)
    }

    pub fn square(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("square", x, |v| v * v, Op::Square)
    }

    /// Numerically stable `log(1 + exp(x))`.
    pub fn softplus(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("softplus", x, softplus, Op::Softplus)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Leaky rectifier, slope 1/3 on the negative side, output clipped to
    /// ±3. Gradient is zero outside the clip region.
    pub fn leaky_clip(&self, x: Var) -> Result<Var, TensorError> {
        self.unary("leaky_clip", x, leaky_clip, |x| Op::LeakyClip { x })
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, |x| Op::Scale { x, c })
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, |v| v + c, |x| Op::AddScalar { x })
    }

    pub fn neg(&self, x: Var) -> Result<Var, TensorError> {
        self.scale(x, -1.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self, x: Var) -> Result<Var, TensorError> {
        self.add_scalar(self.scale(x, -1.0)?, 1.0)
    }

    // ---- reductions ----

    pub fn sum(&self, x: Var) -> Result<Var, TensorError> {
        let x = self.own(x)?;
        let (total, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].data.iter().sum(), nodes[x].requires_grad)
        };
        self.emit("sum", vec![], vec![total], rg, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var, TensorError> {
        let x = self.own(x)?;
        let (m, rg) = {
            let nodes = self.nodes.borrow();
            let n = nodes[x].data.len().max(1) as f64;
            (nodes[x].data.iter().sum::<f64>() / n, nodes[x].requires_grad)
        };
        self.emit("mean", vec![], vec![m], rg, Op::Mean(x))
    }

    /// Reduce the last axis: `[r, k] -> [r]`, `[k] -> []`.
    pub fn sum_last(&self, x: Var) -> Result<Var, TensorError> {
        let x = self.own(x)?;
        let (shape, data, width, rg) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x].shape;
            if sx.is_empty() {
                return Err(TensorError::InvalidShape {
                    op: "sum_last",
                    shape: shape_of(sx),
                    reason: "needs rank >= 1".into(),
                });
            }
            let width = sx[sx.len() - 1];
            let rows: usize = sx[..sx.len() - 1].iter().product();
            let data = (0..rows)
                .map(|r| nodes[x].data[r * width..(r + 1) * width].iter().sum())
                .collect();
            (sx[..sx.len() - 1].to_vec(), data, width, nodes[x].requires_grad)
        };
        self.emit("sum_last", shape, data, rg, Op::SumLast { x, width })
    }

    /// Affine map: `x @ w + bias`.
    pub fn affine(&self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        self.add_bias(self.matmul(x, w)?, bias)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// differentiated node reachable from `loss`; calling twice adds a
    /// second full pass.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let loss = self.own(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss].shape.clone(),
            });
        }

        // Scratch adjoints for this pass; merged into node grads at the end
        // so repeated backward calls accumulate rather than double-count.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        adj[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(d_out) = adj[id].take() else { continue };

            {
                // Merge this node's adjoint into its persistent grad.
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += di;
                        }
                    }
                    None => node.grad = Some(d_out.clone()),
                }
            }

            let op = nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut adj, a, |dst| add_into(dst, &d_out));
                    accumulate(&nodes, &mut adj, b, |dst| add_into(dst, &d_out));
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut adj, a, |dst| add_into(dst, &d_out));
                    accumulate(&nodes, &mut adj, b, |dst| {
                        for (g, d) in dst.iter_mut().zip(&d_out) {
                            *g -= d;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let (na, nb) = (&nodes[a], &nodes[b]);
                        (
                            d_out.iter().zip(&nb.data).map(|(d, y)| d * y).collect(),
                            d_out.iter().zip(&na.data).map(|(d, x)| d * x).collect(),
                        )
                    };
                    accumulate(&nodes, &mut adj, a, |dst| add_into(dst, &da));
                    accumulate(&nodes, &mut adj, b, |dst| add_into(dst, &db));
                }
                Op::Matmul { a, b, m, k, n } => {
                    // dA += dOut @ B^T ; dB += A^T @ dOut
                    if nodes[a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        dgemm_nt(m, n, k, &d_out, &nodes[b].data, &mut da, 0.0);
                        accumulate(&nodes, &mut adj, a, |dst| add_into(dst, &da));
                    }
                    if nodes[b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        dgemm_tn(k, m, n, &nodes[a].data, &d_out, &mut db, 0.0);
                        accumulate(&nodes, &mut adj, b, |dst| add_into(dst, &db));
                    }
                }
                Op::ConcatLast { a, b, left, right } => {
                    let rows = d_out.len() / (left + right);
                    if nodes[a].requires_grad {
                        accumulate(&nodes, &mut adj, a, |dst| {
                            for r in 0..rows {
                                let src = &d_out[r * (left + right)..r * (left + right) + left];
                                add_into(&mut dst[r * left..(r + 1) * left], src);
                            }
                        });
                    }
                    if nodes[b].requires_grad {
                        accumulate(&nodes, &mut adj, b, |dst| {
                            for r in 0..rows {
                                let src = &d_out
                                    [r * (left + right) + left..(r + 1) * (left + right)];
                                add_into(&mut dst[r * right..(r + 1) * right], src);
                            }
                        });
                    }
                }
                Op::SliceLast { x, start, width } => {
                    let len = nodes[id].shape[nodes[id].shape.len() - 1];
                    let rows = d_out.len() / len;
                    accumulate(&nodes, &mut adj, x, |dst| {
                        for r in 0..rows {
                            add_into(
                                &mut dst[r * width + start..r * width + start + len],
                                &d_out[r * len..(r + 1) * len],
                            );
                        }
                    });
                }
                Op::AddBias { x, bias } => {
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &d_out));
                    if nodes[bias].requires_grad {
                        let width = nodes[bias].data.len();
                        accumulate(&nodes, &mut adj, bias, |dst| {
                            for (i, d) in d_out.iter().enumerate() {
                                dst[i % width] += d;
                            }
                        });
                    }
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> = {
                        let out = &nodes[id].data;
                        d_out.iter().zip(out).map(|(d, s)| d * s * (1.0 - s)).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = {
                        let out = &nodes[id].data;
                        d_out.iter().zip(out).map(|(d, t)| d * (1.0 - t * t)).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Exp(x) => {
                    let dx: Vec<f64> = {
                        let out = &nodes[id].data;
                        d_out.iter().zip(out).map(|(d, e)| d * e).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Log(x) => {
                    let dx: Vec<f64> = {
                        let xin = &nodes[x].data;
                        d_out.iter().zip(xin).map(|(d, v)| d / v).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Square(x) => {
                    let dx: Vec<f64> = {
                        let xin = &nodes[x].data;
                        d_out.iter().zip(xin).map(|(d, v)| d * 2.0 * v).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Softplus(x) => {
                    let dx: Vec<f64> = {
                        let xin = &nodes[x].data;
                        d_out.iter().zip(xin).map(|(d, v)| d * sigmoid(*v)).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Clamp { x, lo, hi } => {
                    let dx: Vec<f64> = {
                        let xin = &nodes[x].data;
                        d_out
                            .iter()
                            .zip(xin)
                            .map(|(d, v)| if *v >= lo && *v <= hi { *d } else { 0.0 })
                            .collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::LeakyClip { x } => {
                    let dx: Vec<f64> = {
                        let xin = &nodes[x].data;
                        d_out.iter().zip(xin).map(|(d, v)| d * leaky_clip_grad(*v)).collect()
                    };
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::Sum(x) => {
                    let d = d_out[0];
                    accumulate(&nodes, &mut adj, x, |dst| {
                        for g in dst.iter_mut() {
                            *g += d;
                        }
                    });
                }
                Op::Mean(x) => {
                    let d = d_out[0] / nodes[x].data.len().max(1) as f64;
                    accumulate(&nodes, &mut adj, x, |dst| {
                        for g in dst.iter_mut() {
                            *g += d;
                        }
                    });
                }
                Op::SumLast { x, width } => {
                    accumulate(&nodes, &mut adj, x, |dst| {
                        for (r, d) in d_out.iter().enumerate() {
                            for g in &mut dst[r * width..(r + 1) * width] {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &dx));
                }
                Op::AddScalar { x } => {
                    accumulate(&nodes, &mut adj, x, |dst| add_into(dst, &d_out));
                }
            }
        }

        *self.backward_ran.borrow_mut() = true;
        Ok(())
    }

    /// Add this graph's parameter gradients into the store. Bound
    /// parameters unreached by the loss contribute zero. Must run after
    /// [`Graph::backward`].
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        assert!(
            *self.backward_ran.borrow(),
            "accumulate_param_grads before backward"
        );
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if let Some(name) = &node.param {
                match &node.grad {
                    Some(g) => store.accumulate_grad(name, g)?,
                    None => store.accumulate_grad(name, &vec![0.0; node.data.len()])?,
                }
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn accumulate(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    target: usize,
    write: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = adj[target].get_or_insert_with(|| vec![0.0; nodes[target].data.len()]);
    write(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (g, d) in dst.iter_mut().zip(src) {
        *g += d;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn leaky_clip(x: f64) -> f64 {
    let pre = if x >= 0.0 { x } else { x * LEAK_SLOPE };
    pre.clamp(-LEAK_CLIP, LEAK_CLIP)
}

fn leaky_clip_grad(x: f64) -> f64 {
    let (pre, slope) = if x >= 0.0 { (x, 1.0) } else { (x * LEAK_SLOPE, LEAK_SLOPE) };
    if (-LEAK_CLIP..=LEAK_CLIP).contains(&pre) {
        slope
    } else {
        0.0
    }
}

// matrixmultiply wrappers for the three layouts backward needs.

fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], beta: f64) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out = a [m,k] @ b^T` where `b` is stored row-major `[n,k]`.
fn dgemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], beta: f64) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out = a^T @ b` where `a` is stored row-major `[k,m]`, giving `[m,n]`.
fn dgemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], beta: f64) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

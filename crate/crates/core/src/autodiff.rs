//! A small tape-based reverse-mode differentiation engine over [`Mat`].
//!
//! Nodes are appended to the tape in evaluation order, so every operand index
//! points strictly backwards and the graph is acyclic by construction. The
//! primitive set is exactly what the models need: matrix product, addition
//! (same-shape and row-broadcast bias), subtraction, elementwise product,
//! tanh, sigmoid, column concatenation, scalar scaling, and sum of squares.

use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// `lhs (m,n) + bias (1,n)` broadcast over rows.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    ConcatCols(Vec<usize>),
    Scale(usize, f64),
    SumSquares(usize),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `v`; zero-shaped nodes
    /// that the loss does not depend on return `None`.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter value.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), x.cols(), "bias width mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += b.row(0)[c];
            }
        }
        self.push(out, Op::AddBias(a.0, bias.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    /// Concatenate along columns; all operands must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Mat::zeros(rows, total);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        self.push(value, Op::Scale(a.0, s))
    }

    /// Sum of squared entries, a 1x1 result.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Mat::from_vec(1, 1, vec![self.nodes[a.0].value.sum_squares()]);
        self.push(value, Op::SumSquares(a.0))
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose());
                    let db = self.nodes[*a].value.transpose().matmul(&g);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::AddBias(a, bias) => {
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, v) in g.row(r).iter().enumerate() {
                            db.row_mut(0)[c] += v;
                        }
                    }
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*bias], db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[*b].value, |x, y| x * y);
                    let db = g.zip(&self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = g.zip(y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads[*a], da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = g.zip(y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.cols();
                        let mut dp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        accumulate(&mut grads[*p], dp);
                        at += w;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[*a], g.scale(*s));
                }
                Op::SumSquares(a) => {
                    let s = g[(0, 0)];
                    let da = self.nodes[*a].value.scale(2.0 * s);
                    accumulate(&mut grads[*a], da);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc = acc.add(&g),
        None => *slot = Some(g),
    }
}

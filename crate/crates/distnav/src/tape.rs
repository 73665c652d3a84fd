//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse and accumulates exact analytic gradients. The op set is
//! deliberately small: just what the distance model, the noise MLP, the
//! recurrent policy, and their objectives need. Every op's backward rule is
//! covered by finite-difference tests here and again at the model level.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MinElem(usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    MaxScalar(usize, f64),
    MinScalar(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Matmul(usize, usize),
    Bmm(usize, usize),
    BmmNt(usize, usize),
    Reshape(usize),
    SplitHeads(usize, usize),
    MergeHeads(usize, usize),
    ConcatAxis1(usize, usize),
    SliceAxis1(usize, usize, usize),
    SliceCols(usize, usize, usize),
    Tile0(usize, usize),
    AddBcast0(usize, usize),
    Embed(usize, Vec<usize>),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Neg(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    GatherCol(usize, Vec<usize>),
    NormLastAxis(usize, f64),
    SumLastAxis(usize),
    MeanAll(usize),
    SumAll(usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, zero-filled if the node is
    /// not reached by backpropagation.
    pub fn wrt(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        match &self.g[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Value of a node.
    pub fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar() on node with {} elements", a.len());
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf from a 2-d array.
    pub fn leaf2(&mut self, value: ndarray::Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// Leaf from a 1-d array.
    pub fn leaf1(&mut self, value: ndarray::Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            x + y
        };
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
            x - y
        };
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            x * y
        };
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise minimum; ties route gradient to the first argument.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "min shape mismatch");
            let mut out = x.clone();
            out.zip_mut_with(y, |o, &yv| *o = o.min(yv));
            out
        };
        self.push(v, Op::MinElem(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a.0, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulScalar(a.0, c))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::MaxScalar(a.0, c))
    }

    /// Elementwise `min(x, c)`.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.min(c));
        self.push(v, Op::MinScalar(a.0, c))
    }

    /// Broadcast-add a row vector over the last axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = {
            let x = &self.nodes[a.0].value;
            let r = &self.nodes[row.0].value;
            assert_eq!(r.ndim(), 1);
            assert_eq!(x.shape()[x.ndim() - 1], r.shape()[0], "add_row width");
            let r1 = r.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = x.clone();
            for mut lane in out.rows_mut() {
                lane += &r1;
            }
            out
        };
        self.push(v, Op::AddRow(a.0, row.0))
    }

    /// Broadcast-multiply a row vector over the last axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = {
            let x = &self.nodes[a.0].value;
            let r = &self.nodes[row.0].value;
            assert_eq!(r.ndim(), 1);
            assert_eq!(x.shape()[x.ndim() - 1], r.shape()[0], "mul_row width");
            let r1 = r.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = x.clone();
            for mut lane in out.rows_mut() {
                lane *= &r1;
            }
            out
        };
        self.push(v, Op::MulRow(a.0, row.0))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let y = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            assert_eq!(x.shape()[1], y.shape()[0], "matmul inner dim");
            x.dot(&y).into_dyn()
        };
        self.push(v, Op::Matmul(a.0, b.0))
    }

    /// Batched `[B,n,k] x [B,k,m] -> [B,n,m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let y = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(x.shape()[0], y.shape()[0], "bmm batch dim");
            assert_eq!(x.shape()[2], y.shape()[1], "bmm inner dim");
            let (bsz, n, m) = (x.shape()[0], x.shape()[1], y.shape()[2]);
            let mut out = ndarray::Array3::<f64>::zeros((bsz, n, m));
            for i in 0..bsz {
                out.index_axis_mut(Axis(0), i)
                    .assign(&x.index_axis(Axis(0), i).dot(&y.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        };
        self.push(v, Op::Bmm(a.0, b.0))
    }

    /// Batched `[B,n,k] x [B,m,k]^T -> [B,n,m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let y = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(x.shape()[0], y.shape()[0], "bmm_nt batch dim");
            assert_eq!(x.shape()[2], y.shape()[2], "bmm_nt inner dim");
            let (bsz, n, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = ndarray::Array3::<f64>::zeros((bsz, n, m));
            for i in 0..bsz {
                out.index_axis_mut(Axis(0), i)
                    .assign(&x.index_axis(Axis(0), i).dot(&y.index_axis(Axis(0), i).t()));
            }
            out.into_dyn()
        };
        self.push(v, Op::BmmNt(a.0, b.0))
    }

    /// Reinterpret a contiguous array with a new shape of identical length.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = {
            let x = &self.nodes[a.0].value;
            assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape length");
            x.clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape of contiguous array")
        };
        self.push(v, Op::Reshape(a.0))
    }

    /// `[B, n, H*dh] -> [B*H, n, dh]`, grouping per-head slices for batched
    /// attention.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (bsz, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(d % heads, 0, "head split");
            let dh = d / heads;
            let mut out = ndarray::Array3::<f64>::zeros((bsz * heads, n, dh));
            for b in 0..bsz {
                for h in 0..heads {
                    for i in 0..n {
                        for j in 0..dh {
                            out[[b * heads + h, i, j]] = x[[b, i, h * dh + j]];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(v, Op::SplitHeads(a.0, heads))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (bh, n, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(bh % heads, 0, "head merge");
            let bsz = bh / heads;
            let mut out = ndarray::Array3::<f64>::zeros((bsz, n, heads * dh));
            for b in 0..bsz {
                for h in 0..heads {
                    for i in 0..n {
                        for j in 0..dh {
                            out[[b, i, h * dh + j]] = x[[b * heads + h, i, j]];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(v, Op::MergeHeads(a.0, heads))
    }

    /// Concatenate along axis 1 of 3-d arrays.
    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let y = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(x.shape()[0], y.shape()[0]);
            assert_eq!(x.shape()[2], y.shape()[2]);
            ndarray::concatenate(Axis(1), &[x.view(), y.view()])
                .unwrap()
                .into_dyn()
        };
        self.push(v, Op::ConcatAxis1(a.0, b.0))
    }

    /// Rows `[start, end)` along axis 1 of a 3-d array.
    pub fn slice_axis1(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert!(start < end && end <= x.shape()[1], "slice_axis1 bounds");
            x.slice(ndarray::s![.., start..end, ..]).to_owned().into_dyn()
        };
        self.push(v, Op::SliceAxis1(a.0, start, end))
    }

    /// Columns `[start, end)` of a 2-d array.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            assert!(start < end && end <= x.shape()[1], "slice_cols bounds");
            x.slice(ndarray::s![.., start..end]).to_owned().into_dyn()
        };
        self.push(v, Op::SliceCols(a.0, start, end))
    }

    /// Broadcast a `[n,d]` array to `[B,n,d]`.
    pub fn tile0(&mut self, a: Var, batch: usize) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let mut out = ndarray::Array3::<f64>::zeros((batch, n, d));
            for b in 0..batch {
                out.index_axis_mut(Axis(0), b).assign(&x);
            }
            out.into_dyn()
        };
        self.push(v, Op::Tile0(a.0, batch))
    }

    /// Add a `[n,d]` array to every batch slice of `[B,n,d]`.
    pub fn add_bcast0(&mut self, a: Var, m: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let y = self.nodes[m.0].value.view().into_dimensionality::<Ix2>().unwrap();
            assert_eq!(&x.shape()[1..], y.shape(), "add_bcast0 shape");
            let mut out = x.to_owned();
            for b in 0..x.shape()[0] {
                let mut s = out.index_axis_mut(Axis(0), b);
                s += &y;
            }
            out.into_dyn()
        };
        self.push(v, Op::AddBcast0(a.0, m.0))
    }

    /// Row lookup into an embedding table: `table[V,d]`, k indices -> `[k,d]`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Var {
        let v = {
            let t = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let d = t.shape()[1];
            let mut out = ndarray::Array2::<f64>::zeros((indices.len(), d));
            for (row, &ix) in indices.iter().enumerate() {
                assert!(ix < t.shape()[0], "embed index {ix} out of range");
                out.row_mut(row).assign(&t.row(ix));
            }
            out.into_dyn()
        };
        self.push(v, Op::Embed(table.0, indices.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(v, Op::Softplus(a.0))
    }

    /// Softmax over the last axis (any rank).
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = {
            let mut out = self.nodes[a.0].value.clone();
            for mut lane in out.rows_mut() {
                let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                lane.mapv_inplace(|x| (x - m).exp());
                let s = lane.sum();
                lane.mapv_inplace(|x| x / s);
            }
            out
        };
        self.push(v, Op::Softmax(a.0))
    }

    /// Log-softmax over the last axis (any rank).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = {
            let mut out = self.nodes[a.0].value.clone();
            for mut lane in out.rows_mut() {
                let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = lane.iter().map(|&x| (x - m).exp()).sum();
                let lse = m + s.ln();
                lane.mapv_inplace(|x| x - lse);
            }
            out
        };
        self.push(v, Op::LogSoftmax(a.0))
    }

    /// `out[i] = a[i, idx[i]]` for a 2-d array.
    pub fn gather_col(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            assert_eq!(x.shape()[0], idx.len(), "gather_col rows");
            let mut out = ndarray::Array1::<f64>::zeros(idx.len());
            for (i, &j) in idx.iter().enumerate() {
                out[i] = x[[i, j]];
            }
            out.into_dyn()
        };
        self.push(v, Op::GatherCol(a.0, idx.to_vec()))
    }

    /// Normalize the last axis to zero mean and unit variance (layer-norm
    /// core, without affine parameters).
    pub fn norm_last_axis(&mut self, a: Var, eps: f64) -> Var {
        let v = {
            let mut out = self.nodes[a.0].value.clone();
            for mut lane in out.rows_mut() {
                let n = lane.len() as f64;
                let mean = lane.sum() / n;
                let var = lane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                lane.mapv_inplace(|x| (x - mean) * inv);
            }
            out
        };
        self.push(v, Op::NormLastAxis(a.0, eps))
    }

    /// Sum over the last axis of a 2-d array: `[n,m] -> [n]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let v = {
            let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            x.sum_axis(Axis(1)).into_dyn()
        };
        self.push(v, Op::SumLastAxis(a.0))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = ndarray::arr0(x.sum() / x.len() as f64).into_dyn();
        self.push(v, Op::MeanAll(a.0))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.push(v, Op::SumAll(a.0))
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut g: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() requires a scalar loss node"
        );
        g[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..self.nodes.len()).rev() {
            let dy = match g[i].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    g[i] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, dy.view());
                    accumulate(&mut g, *b, dy.view());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, dy.view());
                    let nb = dy.mapv(|x| -x);
                    accumulate(&mut g, *b, nb.view());
                }
                Op::Mul(a, b) => {
                    let da = &dy * &self.nodes[*b].value;
                    let db = &dy * &self.nodes[*a].value;
                    accumulate(&mut g, *a, da.view());
                    accumulate(&mut g, *b, db.view());
                }
                Op::MinElem(a, b) => {
                    let xa = &self.nodes[*a].value;
                    let xb = &self.nodes[*b].value;
                    let mut da = dy.clone();
                    let mut db = dy.clone();
                    for ((d1, d2), (va, vb)) in da
                        .iter_mut()
                        .zip(db.iter_mut())
                        .zip(xa.iter().zip(xb.iter()))
                    {
                        if va <= vb {
                            *d2 = 0.0;
                        } else {
                            *d1 = 0.0;
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                    accumulate(&mut g, *b, db.view());
                }
                Op::AddScalar(a, _) => accumulate(&mut g, *a, dy.view()),
                Op::MulScalar(a, c) => {
                    let da = dy.mapv(|x| x * c);
                    accumulate(&mut g, *a, da.view());
                }
                Op::MaxScalar(a, c) => {
                    let mut da = dy.clone();
                    for (d, &x) in da.iter_mut().zip(self.nodes[*a].value.iter()) {
                        if x <= *c {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::MinScalar(a, c) => {
                    let mut da = dy.clone();
                    for (d, &x) in da.iter_mut().zip(self.nodes[*a].value.iter()) {
                        if x >= *c {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut g, *a, dy.view());
                    let w = self.nodes[*row].value.len();
                    let mut dr = ndarray::Array1::<f64>::zeros(w);
                    for lane in dy.rows() {
                        dr += &lane;
                    }
                    accumulate(&mut g, *row, dr.into_dyn().view());
                }
                Op::MulRow(a, row) => {
                    let r1 = self.nodes[*row]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let mut da = dy.clone();
                    for mut lane in da.rows_mut() {
                        lane *= &r1;
                    }
                    accumulate(&mut g, *a, da.view());
                    let w = r1.len();
                    let mut dr = ndarray::Array1::<f64>::zeros(w);
                    for (lane_dy, lane_a) in dy.rows().into_iter().zip(self.nodes[*a].value.rows())
                    {
                        dr += &(&lane_dy * &lane_a);
                    }
                    accumulate(&mut g, *row, dr.into_dyn().view());
                }
                Op::Matmul(a, b) => {
                    let dc = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let x = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    let y = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    let da = dc.dot(&y.t()).into_dyn();
                    let db = x.t().dot(&dc).into_dyn();
                    accumulate(&mut g, *a, da.view());
                    accumulate(&mut g, *b, db.view());
                }
                Op::Bmm(a, b) => {
                    let dc = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                    let y = self.nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
                    let mut da = ndarray::Array3::<f64>::zeros(x.raw_dim());
                    let mut db = ndarray::Array3::<f64>::zeros(y.raw_dim());
                    for i in 0..x.shape()[0] {
                        let dci = dc.index_axis(Axis(0), i);
                        da.index_axis_mut(Axis(0), i)
                            .assign(&dci.dot(&y.index_axis(Axis(0), i).t()));
                        db.index_axis_mut(Axis(0), i)
                            .assign(&x.index_axis(Axis(0), i).t().dot(&dci));
                    }
                    accumulate(&mut g, *a, da.into_dyn().view());
                    accumulate(&mut g, *b, db.into_dyn().view());
                }
                Op::BmmNt(a, b) => {
                    let dc = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                    let y = self.nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
                    let mut da = ndarray::Array3::<f64>::zeros(x.raw_dim());
                    let mut db = ndarray::Array3::<f64>::zeros(y.raw_dim());
                    for i in 0..x.shape()[0] {
                        let dci = dc.index_axis(Axis(0), i);
                        da.index_axis_mut(Axis(0), i)
                            .assign(&dci.dot(&y.index_axis(Axis(0), i)));
                        db.index_axis_mut(Axis(0), i)
                            .assign(&dci.t().dot(&x.index_axis(Axis(0), i)));
                    }
                    accumulate(&mut g, *a, da.into_dyn().view());
                    accumulate(&mut g, *b, db.into_dyn().view());
                }
                Op::Reshape(a) => {
                    let da = dy
                        .clone()
                        .into_shape_with_order(self.nodes[*a].value.raw_dim())
                        .expect("reshape grad");
                    accumulate(&mut g, *a, da.view());
                }
                Op::SplitHeads(a, heads) => {
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bh, n, dh) = (d3.shape()[0], d3.shape()[1], d3.shape()[2]);
                    let bsz = bh / heads;
                    let mut da = ndarray::Array3::<f64>::zeros((bsz, n, heads * dh));
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for r in 0..n {
                                for j in 0..dh {
                                    da[[b, r, h * dh + j]] = d3[[b * heads + h, r, j]];
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *a, da.into_dyn().view());
                }
                Op::MergeHeads(a, heads) => {
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bsz, n, d) = (d3.shape()[0], d3.shape()[1], d3.shape()[2]);
                    let dh = d / heads;
                    let mut da = ndarray::Array3::<f64>::zeros((bsz * heads, n, dh));
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for r in 0..n {
                                for j in 0..dh {
                                    da[[b * heads + h, r, j]] = d3[[b, r, h * dh + j]];
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *a, da.into_dyn().view());
                }
                Op::ConcatAxis1(a, b) => {
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let na = self.nodes[*a].value.shape()[1];
                    let da = d3.slice(ndarray::s![.., ..na, ..]).to_owned().into_dyn();
                    let db = d3.slice(ndarray::s![.., na.., ..]).to_owned().into_dyn();
                    accumulate(&mut g, *a, da.view());
                    accumulate(&mut g, *b, db.view());
                }
                Op::SliceAxis1(a, start, end) => {
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let mut da =
                        ArrayD::<f64>::zeros(self.nodes[*a].value.raw_dim());
                    {
                        let mut view = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                        view.slice_mut(ndarray::s![.., *start..*end, ..]).assign(&d3);
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::SliceCols(a, start, end) => {
                    let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = ArrayD::<f64>::zeros(self.nodes[*a].value.raw_dim());
                    {
                        let mut view = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                        view.slice_mut(ndarray::s![.., *start..*end]).assign(&d2);
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::Tile0(a, _batch) => {
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let da = d3.sum_axis(Axis(0)).into_dyn();
                    accumulate(&mut g, *a, da.view());
                }
                Op::AddBcast0(a, m) => {
                    accumulate(&mut g, *a, dy.view());
                    let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let dm = d3.sum_axis(Axis(0)).into_dyn();
                    accumulate(&mut g, *m, dm.view());
                }
                Op::Embed(table, indices) => {
                    let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dt = ArrayD::<f64>::zeros(self.nodes[*table].value.raw_dim());
                    {
                        let mut view = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (row, &ix) in indices.iter().enumerate() {
                            let mut target = view.row_mut(ix);
                            target += &d2.row(row);
                        }
                    }
                    accumulate(&mut g, *table, dt.view());
                }
                Op::Relu(a) => {
                    let mut da = dy.clone();
                    for (d, &x) in da.iter_mut().zip(self.nodes[*a].value.iter()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::Gelu(a) => {
                    let mut da = dy.clone();
                    for (d, &x) in da.iter_mut().zip(self.nodes[*a].value.iter()) {
                        *d *= gelu_grad_scalar(x);
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::Sigmoid(a) => {
                    let da = &dy * &self.nodes[i].value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut g, *a, da.view());
                }
                Op::Tanh(a) => {
                    let da = &dy * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut g, *a, da.view());
                }
                Op::Exp(a) => {
                    let da = &dy * &self.nodes[i].value;
                    accumulate(&mut g, *a, da.view());
                }
                Op::Ln(a) => {
                    let da = &dy / &self.nodes[*a].value;
                    accumulate(&mut g, *a, da.view());
                }
                Op::Sqrt(a) => {
                    let da = &dy * &self.nodes[i].value.mapv(|y| 0.5 / y);
                    accumulate(&mut g, *a, da.view());
                }
                Op::Square(a) => {
                    let da = &dy * &self.nodes[*a].value.mapv(|x| 2.0 * x);
                    accumulate(&mut g, *a, da.view());
                }
                Op::Neg(a) => {
                    let da = dy.mapv(|x| -x);
                    accumulate(&mut g, *a, da.view());
                }
                Op::Softplus(a) => {
                    let da = &dy * &self.nodes[*a].value.mapv(sigmoid_scalar);
                    accumulate(&mut g, *a, da.view());
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = dy.clone();
                    for (mut dl, yl) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = dl.iter().zip(yl.iter()).map(|(&d, &v)| d * v).sum();
                        for (d, &v) in dl.iter_mut().zip(yl.iter()) {
                            *d = (*d - dot) * v;
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::LogSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = dy.clone();
                    for (mut dl, yl) in da.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = dl.sum();
                        for (d, &logp) in dl.iter_mut().zip(yl.iter()) {
                            *d -= s * logp.exp();
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::GatherCol(a, idx) => {
                    let d1 = dy.view().into_dimensionality::<Ix1>().unwrap();
                    let mut da = ArrayD::<f64>::zeros(self.nodes[*a].value.raw_dim());
                    {
                        let mut view = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (r, &c) in idx.iter().enumerate() {
                            view[[r, c]] += d1[r];
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::NormLastAxis(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let mut da = dy.clone();
                    for ((mut dl, xl), yl) in
                        da.rows_mut().into_iter().zip(x.rows()).zip(y.rows())
                    {
                        let n = xl.len() as f64;
                        let mean = xl.sum() / n;
                        let var = xl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mean_d = dl.sum() / n;
                        let mean_dy_y: f64 =
                            dl.iter().zip(yl.iter()).map(|(&d, &v)| d * v).sum::<f64>() / n;
                        for (d, &v) in dl.iter_mut().zip(yl.iter()) {
                            *d = inv * (*d - mean_d - v * mean_dy_y);
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::SumLastAxis(a) => {
                    let d1 = dy.view().into_dimensionality::<Ix1>().unwrap();
                    let shape = self.nodes[*a].value.raw_dim();
                    let mut da = ArrayD::<f64>::zeros(shape);
                    {
                        let mut view = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (r, mut lane) in view.rows_mut().into_iter().enumerate() {
                            lane.fill(d1[r]);
                        }
                    }
                    accumulate(&mut g, *a, da.view());
                }
                Op::MeanAll(a) => {
                    let d = dy.iter().next().copied().unwrap();
                    let n = self.nodes[*a].value.len() as f64;
                    let da = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), d / n);
                    accumulate(&mut g, *a, da.view());
                }
                Op::SumAll(a) => {
                    let d = dy.iter().next().copied().unwrap();
                    let da = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), d);
                    accumulate(&mut g, *a, da.view());
                }
            }
        }
        Grads { g }
    }
}

fn accumulate(g: &mut [Option<ArrayD<f64>>], target: usize, delta: ArrayViewD<f64>) {
    match &mut g[target] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta.to_owned()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    /// Central finite difference of a scalar function of a flat parameter
    /// vector, compared against the tape gradient.
    fn check_grad<F>(build: F, init: &[f64], atol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let p = tape.leaf(arr1(init).into_dyn());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(&tape, p);

        let h = 1e-5;
        for k in 0..init.len() {
            let eval = |delta: f64| {
                let mut xs = init.to_vec();
                xs[k] += delta;
                let mut t = Tape::new();
                let p = t.leaf(arr1(&xs).into_dyn());
                let l = build(&mut t, p);
                t.scalar(l)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[k]];
            assert!(
                (a - num).abs() <= atol + 1e-4 * num.abs().max(a.abs()),
                "coord {k}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_chain_grad() {
        check_grad(
            |t, p| {
                let a = t.gelu(p);
                let b = t.sigmoid(a);
                let c = t.tanh(b);
                let d = t.softplus(c);
                let e = t.square(d);
                t.mean_all(e)
            },
            &[0.3, -1.2, 2.0, 0.01, -0.4],
            1e-7,
        );
    }

    #[test]
    fn log_exp_sqrt_grad() {
        check_grad(
            |t, p| {
                let a = t.square(p);
                let b = t.add_scalar(a, 0.5);
                let c = t.ln(b);
                let d = t.exp(c);
                let e = t.sqrt(d);
                t.sum_all(e)
            },
            &[0.7, -0.3, 1.9],
            1e-7,
        );
    }

    #[test]
    fn softmax_grad() {
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 3]);
                let s = t.softmax(m);
                let w = t.leaf2(arr2(&[[0.3, -1.0, 2.0], [0.5, 0.5, -0.7]]));
                let prod = t.mul(s, w);
                t.sum_all(prod)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3],
            1e-7,
        );
    }

    #[test]
    fn log_softmax_and_gather_grad() {
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 3]);
                let ls = t.log_softmax(m);
                let picked = t.gather_col(ls, &[2, 0]);
                let neg = t.neg(picked);
                t.mean_all(neg)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3],
            1e-7,
        );
    }

    #[test]
    fn norm_last_axis_grad() {
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 4]);
                let n = t.norm_last_axis(m, 1e-5);
                let w = t.leaf2(arr2(&[[0.3, -1.0, 2.0, 0.1], [0.5, 0.5, -0.7, 1.2]]));
                let prod = t.mul(n, w);
                t.sum_all(prod)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3, 0.9, -0.8],
            1e-6,
        );
    }

    #[test]
    fn matmul_attention_block_grad() {
        // A miniature cross-attention: p supplies queries, fixed memory.
        check_grad(
            |t, p| {
                let q = t.reshape(p, &[1, 2, 3]);
                let mem = {
                    let mut m = Array3::<f64>::zeros((1, 4, 3));
                    let vals = [
                        [0.3, -0.2, 0.8],
                        [1.0, 0.1, -0.4],
                        [-0.5, 0.9, 0.2],
                        [0.0, 0.7, -1.1],
                    ];
                    for (r, row) in vals.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            m[[0, r, c]] = *v;
                        }
                    }
                    t.leaf(m.into_dyn())
                };
                let scores = t.bmm_nt(q, mem);
                let scaled = t.mul_scalar(scores, 1.0 / (3.0f64).sqrt());
                let attn = t.softmax(scaled);
                let out = t.bmm(attn, mem);
                let sq = t.square(out);
                t.mean_all(sq)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3],
            1e-7,
        );
    }

    #[test]
    fn heads_split_merge_roundtrip_and_grad() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let init: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 3, 4]);
                let s = t.split_heads(m, 2);
                let back = t.merge_heads(s, 2);
                let diff = t.sub(back, m);
                let sq0 = t.square(diff);
                let probe = t.gelu(back);
                let l1 = t.sum_all(sq0);
                let l2 = t.mean_all(probe);
                let tot = t.add(l1, l2);
                t.sum_all(tot)
            },
            &init,
            1e-7,
        );
        // Round-trip is the identity.
        let mut t = Tape::new();
        let p = t.leaf(arr1(&init).into_dyn());
        let m = t.reshape(p, &[2, 3, 4]);
        let s = t.split_heads(m, 2);
        let back = t.merge_heads(s, 2);
        assert_eq!(t.val(back), t.val(m));
    }

    #[test]
    fn slicing_concat_embed_grad() {
        check_grad(
            |t, p| {
                let table = t.reshape(p, &[4, 2]);
                let rows = t.embed(table, &[1, 3, 1]);
                let m = t.reshape(rows, &[1, 3, 2]);
                let tail = t.slice_axis1(m, 1, 3);
                let cat = t.concat_axis1(m, tail);
                let tiled_src = t.reshape(rows, &[3, 2]);
                let tiled = t.tile0(tiled_src, 1);
                let joined = t.concat_axis1(cat, tiled);
                let sq = t.square(joined);
                t.mean_all(sq)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3, 0.9, -0.8],
            1e-7,
        );
    }

    #[test]
    fn min_and_clip_grads() {
        check_grad(
            |t, p| {
                let a = t.slice_cols_flat(p, 0, 3);
                let b = t.slice_cols_flat(p, 3, 6);
                let m = t.min_elem(a, b);
                let clipped = t.min_scalar(m, 0.8);
                let floored = t.max_scalar(clipped, -0.8);
                t.sum_all(floored)
            },
            &[0.1, 0.95, -0.2, 0.5, -1.5, 0.3],
            1e-7,
        );
    }

    impl Tape {
        /// Test helper: slice a 1-d leaf as columns of a 1-row matrix.
        fn slice_cols_flat(&mut self, a: Var, start: usize, end: usize) -> Var {
            let n = self.val(a).len();
            let m = self.reshape(a, &[1, n]);
            let s = self.slice_cols(m, start, end);
            self.reshape(s, &[end - start])
        }
    }

    #[test]
    fn row_broadcast_grads() {
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 3]);
                let row = t.leaf1(arr1(&[0.5, -1.0, 2.0]));
                let a = t.add_row(m, row);
                let b = t.mul_row(a, row);
                t.mean_all(b)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3],
            1e-7,
        );
    }

    #[test]
    fn bcast0_and_sum_last_axis_grads() {
        check_grad(
            |t, p| {
                let m = t.reshape(p, &[2, 2, 2]);
                let add = t.leaf2(arr2(&[[0.3, -0.6], [1.1, 0.2]]));
                let s = t.add_bcast0(m, add);
                let flat = t.reshape(s, &[4, 2]);
                let summed = t.sum_last_axis(flat);
                let sq = t.square(summed);
                t.mean_all(sq)
            },
            &[0.1, 0.4, -0.2, 1.0, -1.5, 0.3, 0.9, -0.8],
            1e-7,
        );
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // p used twice: d(p·p + 3p)/dp = 2p + 3.
        let mut t = Tape::new();
        let p = t.leaf(arr1(&[2.0]).into_dyn());
        let sq = t.mul(p, p);
        let triple = t.mul_scalar(p, 3.0);
        let tot = t.add(sq, triple);
        let loss = t.sum_all(tot);
        let g = t.backward(loss).wrt(&t, p);
        assert!((g[[0]] - 7.0).abs() < 1e-12);
    }
}

//! Reverse-mode autodiff over `Mat` values on a flat tape.
//!
//! Every op appends a node holding its output; `backward` walks the tape in
//! reverse accumulating gradients. Graphs are rebuilt per training step,
//! which keeps the engine stateless and the kernels deterministic (matmul
//! dispatches to the bit-identical row-parallel kernel only).

use crate::linalg::Mat;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// (n x d) + broadcast (1 x d).
    AddRow(NodeId, NodeId),
    /// (n x d) * broadcast (1 x d).
    MulRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// a * b^T without materializing the transpose.
    MatmulT(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise standardization; rstd kept from the forward pass.
    LayerNormRows { input: NodeId, rstd: Vec<f64> },
    ConcatCols(NodeId, NodeId),
    SliceCols { input: NodeId, start: usize, len: usize },
    MeanAll(NodeId),
    Square(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        out.add_scaled(vb, -1.0);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let mut out = va.clone();
        for (o, v) in out.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.scale_in_place(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(vr.rows(), 1, "broadcast operand must be 1 x d");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(vr.row(0)) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(vr.rows(), 1, "broadcast operand must be 1 x d");
        assert_eq!(va.cols(), vr.cols(), "mul_row width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(vr.row(0)) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(out, Op::Matmul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul_t(&self.nodes[b].value);
        self.push(out, Op::MatmulT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax independently over each row, max-shifted for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise (x - mean) / sqrt(var + eps), no affine part; compose with
    /// `mul_row`/`add_row` for the learned gain and shift.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let d = va.cols() as f64;
        let mut out = va.clone();
        let mut rstd = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNormRows { input: a, rstd })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Mat::zeros(n, ca + cb);
        for i in 0..n {
            out.row_mut(i)[..ca].copy_from_slice(va.row(i));
            out.row_mut(i)[ca..].copy_from_slice(vb.row(i));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(va.rows(), len);
        for i in 0..va.rows() {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { input: a, start, len })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mean = va.as_slice().iter().sum::<f64>() / va.len() as f64;
        self.push(Mat::from_vec(1, 1, vec![mean]), Op::MeanAll(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.shape(), (1, 1), "scalar() needs a 1x1 node");
        v.get(0, 0)
    }

    /// Reverse pass from a 1x1 root. Returns one gradient per node (zeros
    /// where the root does not depend on the node).
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.nodes[root].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    accumulate(&mut grads, *b, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (o, v) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[*b].value.as_slice())
                    {
                        *o *= v;
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                    let mut db = g.clone();
                    for (o, v) in db
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[*a].value.as_slice())
                    {
                        *o *= v;
                    }
                    accumulate(&mut grads, *b, &db, &self.nodes);
                }
                Op::Scale(a, c) => {
                    let mut da = g.clone();
                    da.scale_in_place(*c);
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, &dr, &self.nodes);
                }
                Op::MulRow(a, row) => {
                    let vr = &self.nodes[*row].value;
                    let va = &self.nodes[*a].value;
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (o, v) in da.row_mut(i).iter_mut().zip(vr.row(0)) {
                            *o *= v;
                        }
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((o, gv), av) in dr.row_mut(0).iter_mut().zip(g.row(i)).zip(va.row(i))
                        {
                            *o += gv * av;
                        }
                    }
                    accumulate(&mut grads, *row, &dr, &self.nodes);
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul_t(&self.nodes[*b].value);
                    accumulate(&mut grads, *a, &da, &self.nodes);
                    let db = self.nodes[*a].value.tmatmul(&g);
                    accumulate(&mut grads, *b, &db, &self.nodes);
                }
                Op::MatmulT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a.
                    let da = g.matmul(&self.nodes[*b].value);
                    accumulate(&mut grads, *a, &da, &self.nodes);
                    let db = g.tmatmul(&self.nodes[*a].value);
                    accumulate(&mut grads, *b, &db, &self.nodes);
                }
                Op::Relu(a) => {
                    let mut da = g.clone();
                    for (o, v) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[*a].value.as_slice())
                    {
                        if *v <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Tanh(a) => {
                    let mut da = g.clone();
                    for (o, y) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[id].value.as_slice())
                    {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Sigmoid(a) => {
                    let mut da = g.clone();
                    for (o, y) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[id].value.as_slice())
                    {
                        *o *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                        for ((o, gv), yv) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::LayerNormRows { input, rstd } => {
                    let y = &self.nodes[id].value;
                    let d = y.cols() as f64;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let g_mean: f64 = g.row(i).iter().sum::<f64>() / d;
                        let gy_mean: f64 =
                            g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum::<f64>() / d;
                        for ((o, gv), yv) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o = rstd[i] * (gv - g_mean - yv * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *input, &da, &self.nodes);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let mut da = Mat::zeros(g.rows(), ca);
                    let mut db = Mat::zeros(g.rows(), cb);
                    for i in 0..g.rows() {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                    accumulate(&mut grads, *b, &db, &self.nodes);
                }
                Op::SliceCols { input, start, len } => {
                    let src = &self.nodes[*input].value;
                    let mut da = Mat::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        da.row_mut(i)[*start..*start + *len].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *input, &da, &self.nodes);
                }
                Op::MeanAll(a) => {
                    let va = &self.nodes[*a].value;
                    let c = g.get(0, 0) / va.len() as f64;
                    let da = Mat::from_fn(va.rows(), va.cols(), |_, _| c);
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Square(a) => {
                    let mut da = g.clone();
                    for (o, v) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[*a].value.as_slice())
                    {
                        *o *= 2.0 * v;
                    }
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
            }
        }
        Grads { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: &Mat, nodes: &[Node]) {
    debug_assert_eq!(
        nodes[id].value.shape(),
        g.shape(),
        "gradient shape mismatch at node {id}"
    );
    match &mut grads[id] {
        Some(existing) => existing.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the root with respect to node `id`; None when the root
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id].as_ref()
    }
}

use super::{GradError, Result, Tensor};
use std::collections::BTreeMap;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf {
        param: Option<(String, bool)>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// scale * x + shift, elementwise with constants. The shift never shows
    /// up again: its derivative is zero.
    Affine {
        x: Var,
        scale: f64,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    SliceRows {
        x: Var,
        from: usize,
    },
    StackRows {
        parts: Vec<Var>,
    },
    ReverseRows {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    DownsampleRows {
        x: Var,
        factor: usize,
    },
    UpsampleRows {
        x: Var,
        factor: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Mae {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    StopGrad,
    L2NormalizeRows {
        x: Var,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert list: building an expression runs it. Backward replays the list
/// in reverse once, after which the tape is consumed.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    /// One node per parameter path, no matter how many graph branches load
    /// it; shared use is what makes adjoints of reused parameters add up.
    param_nodes: BTreeMap<String, Var>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn mismatch(layer: &str, expected: String, actual: String) -> GradError {
    GradError::ShapeMismatch {
        layer: layer.to_string(),
        expected,
        actual,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: participates in forward only.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Named parameter leaf. Backward collects gradients for trainable ones;
    /// frozen ones get no entry. Loading the same path again returns the
    /// existing node, so one tape must only ever build against one
    /// parameter store.
    pub fn param_leaf(&mut self, path: &str, trainable: bool, value: Tensor) -> Var {
        if let Some(&v) = self.param_nodes.get(path) {
            return v;
        }
        let v = self.push(
            Op::Leaf {
                param: Some((path.to_string(), trainable)),
            },
            value,
        );
        self.param_nodes.insert(path.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(mismatch(
                "matmul",
                format!("inner dims equal, lhs {:?}", ta.shape),
                format!("rhs {:?}", tb.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.values[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[j * n..(j + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(
            Op::MatMul { a, b },
            Tensor {
                shape: vec![m, n],
                values: out,
            },
        ))
    }

    fn binary_same_shape(&mut self, name: &str, a: Var, b: Var) -> Result<(Vec<usize>, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(
                name,
                format!("{:?}", ta.shape),
                format!("{:?}", tb.shape),
            ));
        }
        Ok((ta.shape.clone(), ta.numel()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_same_shape("add", a, b)?;
        let values = (0..n)
            .map(|i| self.nodes[a.0].value.values[i] + self.nodes[b.0].value.values[i])
            .collect();
        Ok(self.push(Op::Add { a, b }, Tensor { shape, values }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_same_shape("sub", a, b)?;
        let values = (0..n)
            .map(|i| self.nodes[a.0].value.values[i] - self.nodes[b.0].value.values[i])
            .collect();
        Ok(self.push(Op::Sub { a, b }, Tensor { shape, values }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_same_shape("mul", a, b)?;
        let values = (0..n)
            .map(|i| self.nodes[a.0].value.values[i] * self.nodes[b.0].value.values[i])
            .collect();
        Ok(self.push(Op::Mul { a, b }, Tensor { shape, values }))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|v| scale * v + shift).collect(),
        };
        self.push(Op::Affine { x, scale }, out)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// x: [T, n], b: [n]; adds b to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(mismatch(
                "add_bias",
                format!("bias of {n}"),
                format!("{:?}", tb.shape),
            ));
        }
        let rows = tx.rows();
        let mut values = tx.values.clone();
        for r in 0..rows {
            for (v, bv) in values[r * n..(r + 1) * n].iter_mut().zip(&tb.values) {
                *v += bv;
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(Op::AddBias { x, b }, Tensor { shape, values }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.unary(x, f64::tanh);
        self.push(Op::Tanh { x }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu { x }, out)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{:?}", t.shape),
                ));
            }
            total += t.cols();
        }
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let c = t.cols();
            for r in 0..rows {
                values[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&t.values[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor {
                shape: vec![rows, total],
                values,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if from >= to || to > cols {
            return Err(mismatch(
                "slice_cols",
                format!("range within {cols} cols"),
                format!("{from}..{to}"),
            ));
        }
        let w = to - from;
        let mut values = vec![0.0; rows * w];
        for r in 0..rows {
            values[r * w..(r + 1) * w].copy_from_slice(&t.values[r * cols + from..r * cols + to]);
        }
        Ok(self.push(
            Op::SliceCols { x, from, to },
            Tensor {
                shape: vec![rows, w],
                values,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if from >= to || to > rows {
            return Err(mismatch(
                "slice_rows",
                format!("range within {rows} rows"),
                format!("{from}..{to}"),
            ));
        }
        let values = t.values[from * cols..to * cols].to_vec();
        Ok(self.push(
            Op::SliceRows { x, from },
            Tensor {
                shape: vec![to - from, cols],
                values,
            },
        ))
    }

    /// Stacks single-row matrices of equal width into [parts.len(), n].
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut values = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != cols {
                return Err(mismatch(
                    "stack_rows",
                    format!("[1, {cols}]"),
                    format!("{:?}", t.shape),
                ));
            }
            values.extend_from_slice(&self.nodes[p.0].value.values);
        }
        Ok(self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            Tensor {
                shape: vec![parts.len(), cols],
                values,
            },
        ))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            values[r * cols..(r + 1) * cols]
                .copy_from_slice(&t.values[(rows - 1 - r) * cols..(rows - r) * cols]);
        }
        let shape = t.shape.clone();
        self.push(Op::ReverseRows { x }, Tensor { shape, values })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut values = vec![0.0; cols];
        for r in 0..rows {
            for (v, xv) in values.iter_mut().zip(&t.values[r * cols..(r + 1) * cols]) {
                *v += xv;
            }
        }
        for v in &mut values {
            *v /= rows as f64;
        }
        self.push(
            Op::MeanRows { x },
            Tensor {
                shape: vec![1, cols],
                values,
            },
        )
    }

    /// Keeps rows 0, factor, 2·factor, ...; output has ceil(rows/factor) rows.
    pub fn downsample_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if factor == 0 || rows == 0 {
            return Err(mismatch("downsample_rows", "factor >= 1".into(), format!("{factor}")));
        }
        let out_rows = rows.div_ceil(factor);
        let mut values = Vec::with_capacity(out_rows * cols);
        for r in 0..out_rows {
            values.extend_from_slice(&t.values[r * factor * cols..(r * factor + 1) * cols]);
        }
        Ok(self.push(
            Op::DownsampleRows { x, factor },
            Tensor {
                shape: vec![out_rows, cols],
                values,
            },
        ))
    }

    /// Repeats each row `factor` times; output has rows·factor rows.
    pub fn upsample_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if factor == 0 {
            return Err(mismatch("upsample_rows", "factor >= 1".into(), "0".into()));
        }
        let mut values = Vec::with_capacity(rows * factor * cols);
        for r in 0..rows {
            for _ in 0..factor {
                values.extend_from_slice(&t.values[r * cols..(r + 1) * cols]);
            }
        }
        Ok(self.push(
            Op::UpsampleRows { x, factor },
            Tensor {
                shape: vec![rows * factor, cols],
                values,
            },
        ))
    }

    /// Same-padded 1-D convolution over time. x: [T, c_in], w: [k, c_in,
    /// c_out] with odd k, b: [c_out]; output [T, c_out].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.shape.len() != 3 || tw.shape[0] % 2 == 0 {
            return Err(mismatch(
                "conv1d",
                "[odd k, c_in, c_out] kernel".into(),
                format!("{:?}", tw.shape),
            ));
        }
        let (k, c_in, c_out) = (tw.shape[0], tw.shape[1], tw.shape[2]);
        if tx.cols() != c_in || tb.numel() != c_out {
            return Err(mismatch(
                "conv1d",
                format!("input cols {c_in}, bias {c_out}"),
                format!("input {:?}, bias {:?}", tx.shape, tb.shape),
            ));
        }
        let rows = tx.rows();
        let pad = (k - 1) / 2;
        let mut values = vec![0.0; rows * c_out];
        for t in 0..rows {
            let orow = &mut values[t * c_out..(t + 1) * c_out];
            orow.copy_from_slice(&tb.values);
            for kk in 0..k {
                let s = t as isize + kk as isize - pad as isize;
                if s < 0 || s >= rows as isize {
                    continue;
                }
                let xrow = &tx.values[s as usize * c_in..(s as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &tw.values[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv1d { x, w, b },
            Tensor {
                shape: vec![rows, c_out],
                values,
            },
        ))
    }

    /// Row lookup: out[t] = table[indices[t]].
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = (t.rows(), t.cols());
        if indices.is_empty() {
            return Err(mismatch("embedding", "non-empty indices".into(), "[]".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(mismatch(
                "embedding",
                format!("indices < {vocab}"),
                format!("{bad}"),
            ));
        }
        let mut values = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            values.extend_from_slice(&t.values[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            Tensor {
                shape: vec![indices.len(), dim],
                values,
            },
        ))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.binary_same_shape("mse", a, b)?;
        let sum: f64 = (0..n)
            .map(|i| {
                let d = self.nodes[a.0].value.values[i] - self.nodes[b.0].value.values[i];
                d * d
            })
            .sum();
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(sum / n as f64)))
    }

    /// Mean absolute error over all elements; scalar output.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.binary_same_shape("mae", a, b)?;
        let sum: f64 = (0..n)
            .map(|i| {
                (self.nodes[a.0].value.values[i] - self.nodes[b.0].value.values[i]).abs()
            })
            .sum();
        Ok(self.push(Op::Mae { a, b }, Tensor::scalar(sum / n as f64)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).values.iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value)
    }

    /// Scales each row to unit L2 norm (rows with norm below 1e-12 pass
    /// through a clamped divisor).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.values[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, &v) in values[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let shape = t.shape.clone();
        self.push(Op::L2NormalizeRows { x }, Tensor { shape, values })
    }

    /// Reverse sweep from a scalar loss. Returns gradients for trainable
    /// parameter leaves; frozen leaves get no entry. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        if self.consumed {
            return Err(GradError::TapeConsumed);
        }
        self.consumed = true;
        if !self.value(loss).is_scalar() {
            return Err(GradError::NotScalarLoss(self.value(loss).shape.clone()));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            // Leaves keep their adjoints for the collection pass below.
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Accumulation closure over the adjoint buffer.
            macro_rules! acc {
                ($var:expr, $f:expr) => {{
                    let v: Var = $var;
                    let n = self.nodes[v.0].value.numel();
                    let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }};
            }

            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    acc!(a, |da: &mut [f64]| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (j, dv) in darow.iter_mut().enumerate() {
                                let brow = &tb.values[j * n..(j + 1) * n];
                                let mut s = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    s += gv * bv;
                                }
                                *dv += s;
                            }
                        }
                    });
                    acc!(b, |db: &mut [f64]| {
                        for i in 0..m {
                            let arow = &ta.values[i * k..(i + 1) * k];
                            let grow = &g[i * n..(i + 1) * n];
                            for (j, &av) in arow.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[j * n..(j + 1) * n];
                                for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc!(a, |da: &mut [f64]| for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    });
                    acc!(b, |db: &mut [f64]| for (d, gv) in db.iter_mut().zip(&g) {
                        *d += gv;
                    });
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    acc!(a, |da: &mut [f64]| for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    });
                    acc!(b, |db: &mut [f64]| for (d, gv) in db.iter_mut().zip(&g) {
                        *d -= gv;
                    });
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc!(a, |da: &mut [f64]| {
                        for i in 0..da.len() {
                            da[i] += g[i] * tb.values[i];
                        }
                    });
                    acc!(b, |db: &mut [f64]| {
                        for i in 0..db.len() {
                            db[i] += g[i] * ta.values[i];
                        }
                    });
                }
                Op::Affine { x, scale } => {
                    let (x, scale) = (*x, *scale);
                    acc!(x, |dx: &mut [f64]| for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += scale * gv;
                    });
                }
                Op::AddBias { x, b } => {
                    let (x, b) = (*x, *b);
                    let n = self.nodes[b.0].value.numel();
                    let rows = self.nodes[x.0].value.rows();
                    acc!(x, |dx: &mut [f64]| for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += gv;
                    });
                    acc!(b, |db: &mut [f64]| {
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    acc!(x, |dx: &mut [f64]| {
                        for i in 0..dx.len() {
                            let s = y.values[i];
                            dx[i] += g[i] * s * (1.0 - s);
                        }
                    });
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    acc!(x, |dx: &mut [f64]| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * (1.0 - y.values[i] * y.values[i]);
                        }
                    });
                }
                Op::Relu { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].value;
                    acc!(x, |dx: &mut [f64]| {
                        for i in 0..dx.len() {
                            if y.values[i] > 0.0 {
                                dx[i] += g[i];
                            }
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = self.nodes[idx].value.rows();
                    let total = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        let off = offset;
                        acc!(p, |dp: &mut [f64]| {
                            for r in 0..rows {
                                for (d, gv) in dp[r * c..(r + 1) * c]
                                    .iter_mut()
                                    .zip(&g[r * total + off..r * total + off + c])
                                {
                                    *d += gv;
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::SliceCols { x, from, to } => {
                    let (x, from, to) = (*x, *from, *to);
                    let cols = self.nodes[x.0].value.cols();
                    let rows = self.nodes[x.0].value.rows();
                    let w = to - from;
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..rows {
                            for (d, gv) in dx[r * cols + from..r * cols + to]
                                .iter_mut()
                                .zip(&g[r * w..(r + 1) * w])
                            {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::SliceRows { x, from } => {
                    let (x, from) = (*x, *from);
                    let cols = self.nodes[x.0].value.cols();
                    acc!(x, |dx: &mut [f64]| {
                        for (d, gv) in dx[from * cols..].iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
                Op::StackRows { parts } => {
                    let parts = parts.clone();
                    let cols = self.nodes[idx].value.cols();
                    for (r, p) in parts.into_iter().enumerate() {
                        acc!(p, |dp: &mut [f64]| {
                            for (d, gv) in dp.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += gv;
                            }
                        });
                    }
                }
                Op::ReverseRows { x } => {
                    let x = *x;
                    let rows = self.nodes[x.0].value.rows();
                    let cols = self.nodes[x.0].value.cols();
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..rows {
                            for (d, gv) in dx[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&g[(rows - 1 - r) * cols..(rows - r) * cols])
                            {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::MeanRows { x } => {
                    let x = *x;
                    let rows = self.nodes[x.0].value.rows();
                    let cols = self.nodes[x.0].value.cols();
                    let inv = 1.0 / rows as f64;
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..rows {
                            for (d, gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[..cols])
                            {
                                *d += gv * inv;
                            }
                        }
                    });
                }
                Op::DownsampleRows { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let cols = self.nodes[x.0].value.cols();
                    let out_rows = self.nodes[idx].value.rows();
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..out_rows {
                            for (d, gv) in dx[r * factor * cols..(r * factor + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                            {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::UpsampleRows { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let rows = self.nodes[x.0].value.rows();
                    let cols = self.nodes[x.0].value.cols();
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..rows {
                            for rep in 0..factor {
                                let o = (r * factor + rep) * cols;
                                for (d, gv) in
                                    dx[r * cols..(r + 1) * cols].iter_mut().zip(&g[o..o + cols])
                                {
                                    *d += gv;
                                }
                            }
                        }
                    });
                }
                Op::Conv1d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let tw = &self.nodes[w.0].value;
                    let (k, c_in, c_out) = (tw.shape[0], tw.shape[1], tw.shape[2]);
                    let tx = &self.nodes[x.0].value;
                    let rows = tx.rows();
                    let pad = (k - 1) / 2;
                    acc!(x, |dx: &mut [f64]| {
                        for t in 0..rows {
                            let grow = &g[t * c_out..(t + 1) * c_out];
                            for kk in 0..k {
                                let s = t as isize + kk as isize - pad as isize;
                                if s < 0 || s >= rows as isize {
                                    continue;
                                }
                                let dxrow =
                                    &mut dx[s as usize * c_in..(s as usize + 1) * c_in];
                                for (ci, dv) in dxrow.iter_mut().enumerate() {
                                    let wrow = &tw.values
                                        [(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    let mut acc = 0.0;
                                    for (gv, wv) in grow.iter().zip(wrow) {
                                        acc += gv * wv;
                                    }
                                    *dv += acc;
                                }
                            }
                        }
                    });
                    acc!(w, |dw: &mut [f64]| {
                        for t in 0..rows {
                            let grow = &g[t * c_out..(t + 1) * c_out];
                            for kk in 0..k {
                                let s = t as isize + kk as isize - pad as isize;
                                if s < 0 || s >= rows as isize {
                                    continue;
                                }
                                let xrow =
                                    &tx.values[s as usize * c_in..(s as usize + 1) * c_in];
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let dwrow = &mut dw
                                        [(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    for (dv, gv) in dwrow.iter_mut().zip(grow) {
                                        *dv += xv * gv;
                                    }
                                }
                            }
                        }
                    });
                    acc!(b, |db: &mut [f64]| {
                        for t in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[t * c_out..(t + 1) * c_out]) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Embedding { table, indices } => {
                    let (table, indices) = (*table, indices.clone());
                    let dim = self.nodes[table.0].value.cols();
                    acc!(table, |dt: &mut [f64]| {
                        for (t, &i) in indices.iter().enumerate() {
                            for (d, gv) in
                                dt[i * dim..(i + 1) * dim].iter_mut().zip(&g[t * dim..(t + 1) * dim])
                            {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Mse { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let n = ta.numel() as f64;
                    let g0 = g[0];
                    acc!(a, |da: &mut [f64]| {
                        for i in 0..da.len() {
                            da[i] += g0 * 2.0 * (ta.values[i] - tb.values[i]) / n;
                        }
                    });
                    acc!(b, |db: &mut [f64]| {
                        for i in 0..db.len() {
                            db[i] -= g0 * 2.0 * (ta.values[i] - tb.values[i]) / n;
                        }
                    });
                }
                Op::Mae { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let n = ta.numel() as f64;
                    let g0 = g[0];
                    acc!(a, |da: &mut [f64]| {
                        for i in 0..da.len() {
                            da[i] += g0 * (ta.values[i] - tb.values[i]).signum_or_zero() / n;
                        }
                    });
                    acc!(b, |db: &mut [f64]| {
                        for i in 0..db.len() {
                            db[i] -= g0 * (ta.values[i] - tb.values[i]).signum_or_zero() / n;
                        }
                    });
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let g0 = g[0];
                    acc!(x, |dx: &mut [f64]| for d in dx.iter_mut() {
                        *d += g0;
                    });
                }
                Op::StopGrad => {}
                Op::L2NormalizeRows { x } => {
                    let x = *x;
                    let tx = &self.nodes[x.0].value;
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = (tx.rows(), tx.cols());
                    acc!(x, |dx: &mut [f64]| {
                        for r in 0..rows {
                            let xr = &tx.values[r * cols..(r + 1) * cols];
                            let yr = &y.values[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                            for (d, (gv, yv)) in
                                dx[r * cols..(r + 1) * cols].iter_mut().zip(gr.iter().zip(yr))
                            {
                                *d += (gv - yv * dot) / norm;
                            }
                        }
                    });
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                param: Some((path, trainable)),
            } = &node.op
            {
                if *trainable {
                    let values = adj[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    grads.insert(
                        path.clone(),
                        Tensor {
                            shape: node.value.shape.clone(),
                            values,
                        },
                    );
                }
            }
        }
        Ok(grads)
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    // Subgradient convention: sign(0) = 0.
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

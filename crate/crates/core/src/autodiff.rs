//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a row-major matrix; rank-1 tensors are
//! stored as a single row. Operations are recorded in execution order and
//! [`Tape::backward`] walks them in reverse exactly once. Reductions always
//! run in index order so results are bit-reproducible.

use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Plain dense array, the unit parameters and inputs are stored in.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {n} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view used on the tape.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            more => (
                more[..more.len() - 1].iter().product(),
                more[more.len() - 1],
            ),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        src: Var,
        rows: Rc<[usize]>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SegmentSoftmax {
        logits: Var,
        segment_of: Rc<[usize]>,
        n_segments: usize,
    },
    SegmentSum {
        values: Var,
        segment_of: Rc<[usize]>,
    },
    RowDot(Var, Var),
    ScaleRows {
        x: Var,
        w: Var,
    },
    SumAll(Var),
    CrossEntropySum {
        logits: Var,
        targets: Rc<[usize]>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.value.clone(),
        }
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data.clone(), true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data.clone(), false, Op::Leaf)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, false, Op::Leaf)
    }

    /// `x · w + b` with `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.shape(x);
        let (wr, dout) = self.shape(w);
        if wr != din {
            return Err(mismatch(
                "linear",
                format!("input [{n},{din}] vs weight [{wr},{dout}]"),
            ));
        }
        if let Some(b) = b {
            let (br, bc) = self.shape(b);
            if br != 1 || bc != dout {
                return Err(mismatch(
                    "linear",
                    format!("bias [{br},{bc}] for width {dout}"),
                ));
            }
        }
        let mut out = vec![0.0; n * dout];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for i in 0..n {
                let row = &mut out[i * dout..(i + 1) * dout];
                if let Some(b) = b {
                    row.copy_from_slice(&self.nodes[b.0].value);
                }
                for k in 0..din {
                    let a = xv[i * din + k];
                    if a != 0.0 {
                        axpy(a, &wv[k * dout..(k + 1) * dout], row);
                    }
                }
            }
        }
        check_finite("linear", &out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(n, dout, out, rg, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        check_finite("scale", &out)?;
        let rg = self.rg(a);
        Ok(self.push(r, c, out, rg, Op::Scale(a, factor)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        Ok(self.push(r, c, out, rg, Op::Relu(a)))
    }

    /// Horizontal concatenation of equally tall matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation of equally wide matrices.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// `out[r] = src[rows[r]]`.
    pub fn gather(&mut self, src: Var, rows: impl Into<Rc<[usize]>>) -> Result<Var> {
        let rows: Rc<[usize]> = rows.into();
        let (n, c) = self.shape(src);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(&self.nodes[src.0].value[r * c..(r + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(rows.len(), c, out, rg, Op::Gather { src, rows }))
    }

    /// Row-wise normalization over the last axis with epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(shift) != (1, d) {
            return Err(mismatch("layer_norm", format!("gain/shift must be [{d}]")));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        {
            let xv = &self.nodes[x.0].value;
            let g = &self.nodes[gain.0].value;
            let s = &self.nodes[shift.0].value;
            for i in 0..n {
                let row = &xv[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[i] = is;
                for k in 0..d {
                    let h = (row[k] - mean) * is;
                    xhat[i * d + k] = h;
                    out[i * d + k] = h * g[k] + s[k];
                }
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            n,
            d,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax of `logits: [E, 1]` within each destination segment.
    pub fn segment_softmax(
        &mut self,
        logits: Var,
        segment_of: impl Into<Rc<[usize]>>,
        n_segments: usize,
    ) -> Result<Var> {
        let segment_of: Rc<[usize]> = segment_of.into();
        let (e, c) = self.shape(logits);
        if c != 1 || segment_of.len() != e {
            return Err(mismatch(
                "segment_softmax",
                format!("logits [{e},{c}] with {} segment ids", segment_of.len()),
            ));
        }
        if let Some(&bad) = segment_of.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_softmax",
                index: bad,
                len: n_segments,
            });
        }
        let lv = &self.nodes[logits.0].value;
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (i, &s) in segment_of.iter().enumerate() {
            max[s] = max[s].max(lv[i]);
        }
        let mut out: Vec<f64> = segment_of
            .iter()
            .enumerate()
            .map(|(i, &s)| (lv[i] - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; n_segments];
        for (i, &s) in segment_of.iter().enumerate() {
            sum[s] += out[i];
        }
        for (i, &s) in segment_of.iter().enumerate() {
            out[i] /= sum[s];
        }
        check_finite("segment_softmax", &out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            e,
            1,
            out,
            rg,
            Op::SegmentSoftmax {
                logits,
                segment_of,
                n_segments,
            },
        ))
    }

    /// Sums rows of `values: [E, d]` into `n_segments` rows, in edge order.
    pub fn segment_sum(
        &mut self,
        values: Var,
        segment_of: impl Into<Rc<[usize]>>,
        n_segments: usize,
    ) -> Result<Var> {
        let segment_of: Rc<[usize]> = segment_of.into();
        let (e, d) = self.shape(values);
        if segment_of.len() != e {
            return Err(mismatch(
                "segment_sum",
                format!("{e} rows with {} segment ids", segment_of.len()),
            ));
        }
        let mut out = vec![0.0; n_segments * d];
        {
            let v = &self.nodes[values.0].value;
            for (i, &s) in segment_of.iter().enumerate() {
                if s >= n_segments {
                    return Err(TensorError::IndexOutOfRange {
                        op: "segment_sum",
                        index: s,
                        len: n_segments,
                    });
                }
                axpy(1.0, &v[i * d..(i + 1) * d], &mut out[s * d..(s + 1) * d]);
            }
        }
        check_finite("segment_sum", &out)?;
        let rg = self.rg(values);
        Ok(self.push(
            n_segments,
            d,
            out,
            rg,
            Op::SegmentSum { values, segment_of },
        ))
    }

    /// Row-wise dot product of two `[n, d]` matrices, giving `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.same_shape("row_dot", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = (0..n)
            .map(|i| dot(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]))
            .collect();
        check_finite("row_dot", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, 1, out, rg, Op::RowDot(a, b)))
    }

    /// Multiplies row `i` of `x: [n, d]` by `w[i]` (`w: [n, 1]`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(w) != (n, 1) {
            return Err(mismatch(
                "scale_rows",
                format!("weights {:?} for {n} rows", self.shape(w)),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(xv[i * d..(i + 1) * d].iter().map(|v| v * wv[i]));
        }
        check_finite("scale_rows", &out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(n, d, out, rg, Op::ScaleRows { x, w }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        check_finite("sum_all", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(1, 1, vec![s], rg, Op::SumAll(a)))
    }

    /// `Σ_i -log softmax(logits_i)[targets_i]` as a `[1, 1]` value.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: impl Into<Rc<[usize]>>,
    ) -> Result<Var> {
        let targets: Rc<[usize]> = targets.into();
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(mismatch(
                "cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let t = targets[i];
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for k in 0..c {
                probs[i * c + k] = (row[k] - m).exp() / z;
            }
            total += z.ln() + m - row[t];
        }
        check_finite("cross_entropy", &[total])?;
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![total],
            rg,
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Propagates `d output / d node` for every node that requires a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; sizes[output.0]]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], sizes: &[usize], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; sizes[v.0]])
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = self.shape(*x);
                    let dout = node.cols;
                    if self.rg(*x) {
                        let wv = &self.nodes[w.0].value;
                        let gx = acc(&mut grads, &sizes, *x);
                        for i in 0..n {
                            let gi = &g[i * dout..(i + 1) * dout];
                            for k in 0..din {
                                gx[i * din + k] += dot(gi, &wv[k * dout..(k + 1) * dout]);
                            }
                        }
                    }
                    if self.rg(*w) {
                        let xv = &self.nodes[x.0].value;
                        let gw = acc(&mut grads, &sizes, *w);
                        for i in 0..n {
                            let gi = &g[i * dout..(i + 1) * dout];
                            for k in 0..din {
                                let a = xv[i * din + k];
                                if a != 0.0 {
                                    axpy(a, gi, &mut gw[k * dout..(k + 1) * dout]);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let gb = acc(&mut grads, &sizes, *b);
                            for i in 0..n {
                                axpy(1.0, &g[i * dout..(i + 1) * dout], gb);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.rg(*v) {
                            axpy(1.0, &g, acc(&mut grads, &sizes, *v));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = &self.nodes[b.0].value;
                        let ga = acc(&mut grads, &sizes, *a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if self.rg(*b) {
                        let av = &self.nodes[a.0].value;
                        let gb = acc(&mut grads, &sizes, *b);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(a, f) => {
                    axpy(*f, &g, acc(&mut grads, &sizes, *a));
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, &sizes, *a);
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = node.cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        if self.rg(*p) {
                            let gp = acc(&mut grads, &sizes, *p);
                            for i in 0..node.rows {
                                axpy(
                                    1.0,
                                    &g[i * cols + off..i * cols + off + pc],
                                    &mut gp[i * pc..(i + 1) * pc],
                                );
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = sizes[p.0];
                        if self.rg(*p) {
                            axpy(1.0, &g[off..off + len], acc(&mut grads, &sizes, *p));
                        }
                        off += len;
                    }
                }
                Op::Gather { src, rows } => {
                    let c = node.cols;
                    let gs = acc(&mut grads, &sizes, *src);
                    for (r, &from) in rows.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[r * c..(r + 1) * c],
                            &mut gs[from * c..(from + 1) * c],
                        );
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = (node.rows, node.cols);
                    if self.rg(*gain) {
                        let gg = acc(&mut grads, &sizes, *gain);
                        for i in 0..n {
                            for k in 0..d {
                                gg[k] += g[i * d + k] * xhat[i * d + k];
                            }
                        }
                    }
                    if self.rg(*shift) {
                        let gs = acc(&mut grads, &sizes, *shift);
                        for i in 0..n {
                            axpy(1.0, &g[i * d..(i + 1) * d], gs);
                        }
                    }
                    if self.rg(*x) {
                        let gv = &self.nodes[gain.0].value;
                        let gx = acc(&mut grads, &sizes, *x);
                        let mut dxhat = vec![0.0; d];
                        for i in 0..n {
                            for k in 0..d {
                                dxhat[k] = g[i * d + k] * gv[k];
                            }
                            let h = &xhat[i * d..(i + 1) * d];
                            let s1: f64 = dxhat.iter().sum();
                            let s2 = dot(&dxhat, h);
                            let f = inv_std[i] / d as f64;
                            for k in 0..d {
                                gx[i * d + k] += f * (d as f64 * dxhat[k] - s1 - h[k] * s2);
                            }
                        }
                    }
                }
                Op::SegmentSoftmax {
                    logits,
                    segment_of,
                    n_segments,
                } => {
                    let y = &node.value;
                    let mut inner = vec![0.0; *n_segments];
                    for (i, &s) in segment_of.iter().enumerate() {
                        inner[s] += y[i] * g[i];
                    }
                    let gl = acc(&mut grads, &sizes, *logits);
                    for (i, &s) in segment_of.iter().enumerate() {
                        gl[i] += y[i] * (g[i] - inner[s]);
                    }
                }
                Op::SegmentSum { values, segment_of } => {
                    let d = node.cols;
                    let gv = acc(&mut grads, &sizes, *values);
                    for (i, &s) in segment_of.iter().enumerate() {
                        axpy(1.0, &g[s * d..(s + 1) * d], &mut gv[i * d..(i + 1) * d]);
                    }
                }
                Op::RowDot(a, b) => {
                    let d = self.shape(*a).1;
                    for (this, other) in [(a, b), (b, a)] {
                        if self.rg(*this) {
                            let ov = &self.nodes[other.0].value;
                            let gt = acc(&mut grads, &sizes, *this);
                            for i in 0..node.rows {
                                axpy(g[i], &ov[i * d..(i + 1) * d], &mut gt[i * d..(i + 1) * d]);
                            }
                        }
                    }
                }
                Op::ScaleRows { x, w } => {
                    let d = node.cols;
                    if self.rg(*x) {
                        let wv = &self.nodes[w.0].value;
                        let gx = acc(&mut grads, &sizes, *x);
                        for i in 0..node.rows {
                            axpy(wv[i], &g[i * d..(i + 1) * d], &mut gx[i * d..(i + 1) * d]);
                        }
                    }
                    if self.rg(*w) {
                        let xv = &self.nodes[x.0].value;
                        let gw = acc(&mut grads, &sizes, *w);
                        for i in 0..node.rows {
                            gw[i] += dot(&g[i * d..(i + 1) * d], &xv[i * d..(i + 1) * d]);
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ga = acc(&mut grads, &sizes, *a);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.shape(*logits).1;
                    let gl = acc(&mut grads, &sizes, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        for k in 0..c {
                            gl[i * c + k] += g[0] * probs[i * c + k];
                        }
                        gl[i * c + t] -= g[0];
                    }
                }
            }
            // interior gradients are not kept
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient);
            }
        }
        Ok(Gradients { grads, sizes })
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns the worst
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(mismatch(
            "grad_check",
            "function must return a scalar".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        for e in 0..work[ti].data.len() {
            let orig = work[ti].data[e];
            work[ti].data[e] = orig + epsilon;
            let up = eval(&work)?;
            work[ti].data[e] = orig - epsilon;
            let down = eval(&work)?;
            work[ti].data[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let denom = 1f64.max(a[e].abs()).max(numeric.abs());
            worst = worst.max((a[e] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_empty() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.param(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.param(&Tensor::zeros(vec![2]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let mut t = Tape::new();
        let x = t.param(&Tensor::zeros(vec![0, 3]));
        let w = t.param(&Tensor::filled(vec![3, 2], 1.0));
        let b = t.param(&Tensor::filled(vec![2], 1.0));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.shape(y), (0, 2));
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).iter().all(|&v| v == 0.0));
        assert!(g.get(b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, vec![3, 4]);
        let w = random(&mut rng, vec![4, 2]);
        let b = random(&mut rng, vec![2]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.param(&x), t.param(&w), t.param(&b));
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = b.data[j];
                for k in 0..4 {
                    s += x.data[i * 4 + k] * w.data[k * 2 + j];
                }
                assert!((t.value(y)[i * 2 + j] - s).abs() < 1e-14);
            }
        }
        let err = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y2 = t.mul(y, y)?;
                t.sum_all(y2)
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "linear grad err {err}");
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::zeros(vec![2, 3]));
        let w = t.param(&Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            t.linear(x, w, None),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn segment_softmax_cases() {
        let mut t = Tape::new();
        let l = t.param(&Tensor::matrix(4, 1, vec![0.7, 0.7, 0.7, -3.0]).unwrap());
        let y = t.segment_softmax(l, vec![0, 0, 0, 1], 3).unwrap();
        let v = t.value(y);
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);

        let mut t = Tape::new();
        let l = t.param(&Tensor::matrix(2, 1, vec![1000.0, 1001.0]).unwrap());
        let y = t.segment_softmax(l, vec![0, 0], 1).unwrap();
        let e = 1f64.exp();
        assert!((t.value(y)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((t.value(y)[1] - e / (1.0 + e)).abs() < 1e-15);

        let err = grad_check(
            |t, v| {
                let s = t.segment_softmax(v[0], vec![0, 0], 1)?;
                let w = t.constant_matrix(2, 1, vec![0.3, -1.2]);
                let p = t.mul(s, w)?;
                t.sum_all(p)
            },
            &[Tensor::matrix(2, 1, vec![1000.0, 1001.0]).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax grad err {err}");
    }

    #[test]
    fn segment_sum_matches_sequential_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals = random(&mut rng, vec![9, 3]);
        let seg: Vec<usize> = (0..9).map(|_| rng.random_range(0..4)).collect();
        let mut t = Tape::new();
        let v = t.param(&vals);
        let s = t.segment_sum(v, seg.clone(), 5).unwrap();
        let mut expect = [[0.0; 3]; 5];
        for (e, &g) in seg.iter().enumerate() {
            for k in 0..3 {
                expect[g][k] += vals.data[e * 3 + k];
            }
        }
        assert_eq!(t.value(s), expect.concat().as_slice());
        assert!(t.value(s)[12..15].iter().all(|&x| x == 0.0));

        let mut t = Tape::new();
        let v = t.param(&vals);
        let s = t.segment_sum(v, (0..9).collect::<Vec<_>>(), 9).unwrap();
        assert_eq!(t.value(s), vals.data.as_slice());
    }

    #[test]
    fn relu_and_layer_norm_values() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);

        let x = t.param(&Tensor::filled(vec![2, 4], 3.5));
        let g = t.param(&Tensor::filled(vec![4], 1.0));
        let s = t.param(&Tensor::zeros(vec![4]));
        let y = t.layer_norm(x, g, s).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // keep relu inputs away from the kink
        let mut x = random(&mut rng, vec![3, 4]);
        for v in x.data.iter_mut() {
            if v.abs() < 0.1 {
                *v += 0.3;
            }
        }
        let y = random(&mut rng, vec![3, 4]);
        let gain = random(&mut rng, vec![4]);
        let shift = random(&mut rng, vec![4]);
        let w = random(&mut rng, vec![3, 1]);
        let z = random(&mut rng, vec![2, 4]);

        type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let weights =
            Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cases: Vec<(&str, Case, Vec<Tensor>)> = vec![
            (
                "add",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone(), y.clone()],
            ),
            (
                "mul",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.mul(v[0], v[1])?;
                    t.sum_all(a)
                }),
                vec![x.clone(), y.clone()],
            ),
            (
                "scale",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.scale(v[0], -2.5)?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone()],
            ),
            (
                "relu",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.relu(v[0])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone()],
            ),
            (
                "concat_cols",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.concat_cols(&[v[0], v[1]])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone(), y.clone()],
            ),
            (
                "concat_rows",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.concat_rows(&[v[0], v[1]])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone(), z.clone()],
            ),
            (
                "gather",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.gather(v[0], vec![2, 0, 2, 1])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone()],
            ),
            (
                "layer_norm",
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let a = t.layer_norm(v[0], v[1], v[2])?;
                    let c = t.constant(&weights);
                    let b = t.mul(a, c)?;
                    let b2 = t.mul(b, b)?;
                    t.sum_all(b2)
                }),
                vec![x.clone(), gain, shift],
            ),
            (
                "row_dot",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.row_dot(v[0], v[1])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone(), y.clone()],
            ),
            (
                "scale_rows",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.scale_rows(v[0], v[1])?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone(), w],
            ),
            (
                "segment_sum",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.segment_sum(v[0], vec![1, 0, 1], 3)?;
                    let b = t.mul(a, a)?;
                    t.sum_all(b)
                }),
                vec![x.clone()],
            ),
            (
                "cross_entropy",
                Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy_sum(v[0], vec![3, 0, 2])),
                vec![x.clone()],
            ),
        ];
        for (name, f, inputs) in cases {
            let err = grad_check(f, &inputs, 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn grad_check_trivial_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, vec![5]);
        let err = grad_check(|t, v| t.sum_all(v[0]), &[x.clone()], 1e-6).unwrap();
        assert!(err < 1e-10);
        let mut shifted = x;
        for v in shifted.data.iter_mut() {
            if v.abs() < 0.05 {
                *v = 0.5;
            }
        }
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum_all(r)
            },
            &[shifted],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(
            t.scale(x, 10.0),
            Err(TensorError::NonFinite { .. })
        ));
    }
}

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleConst(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    Recip(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogClamped(Var, f64),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A dynamic record of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a single reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for row-major `a: m×k`, `b: n×k`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `aᵀ · b` for row-major `a: k×m`, `b: k×n`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.unary(x, value, op)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Loads a parameter; it takes part in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = mm(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the row vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let (m, n) = tx.dims2();
        if tr.len() != n {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(r);
        Ok(self.push(value, Op::AddRow(x, r), ng))
    }

    /// Multiplies every row of `x` elementwise by the row vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let (m, n) = tx.dims2();
        if tr.len() != n {
            return Err(shape_err("mul_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d *= b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(r);
        Ok(self.push(value, Op::MulRow(x, r), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::ScaleConst(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddConst(x))
    }

    /// Multiplies every element of `x` by the single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", self.value(x), ts));
        }
        let c = ts.data()[0];
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * c).collect())?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::ScaleBy(x, s), ng))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().contains(&0.0) {
            return Err(TensorError::Domain { op: "recip", msg: "division by zero".into() });
        }
        Ok(self.map(x, |v| 1.0 / v, Op::Recip(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, super::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        self.map(x, |v| v.max(eps).ln(), Op::LogClamped(x, eps))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        if n == 0 {
            return Err(TensorError::Domain { op: "softmax", msg: "empty input".into() });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(super::softmax(src.row(i))?);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.unary(x, value, Op::SoftmaxRows(x)))
    }

    /// Normalises each row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let mut data = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.unary(x, value, Op::LayerNormRows(x, inv_std))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::Domain { op: "mean", msg: "empty input".into() });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.unary(x, Tensor::scalar(s), Op::Mean(x)))
    }

    /// Column means, returned as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        if m == 0 {
            return Err(TensorError::Domain { op: "mean_rows", msg: "no rows".into() });
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.unary(x, value, Op::MeanRows(x)))
    }

    /// Column maxima, returned as a `1 × n` row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        if m == 0 {
            return Err(TensorError::Domain { op: "max_rows", msg: "no rows".into() });
        }
        let mut arg = vec![0usize; n];
        let mut out = src.row(0).to_vec();
        for i in 1..m {
            for (j, &v) in src.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.unary(x, value, Op::MaxRows(x, arg)))
    }

    /// Selects rows of a matrix (embedding lookup, masking, shifting).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(table);
        let (m, n) = src.dims2();
        if idx.is_empty() {
            return Err(TensorError::Domain { op: "gather_rows", msg: "no indices".into() });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.unary(table, value, Op::Gather(table, idx.to_vec())))
    }

    /// Stacks rows (or row blocks) with a common column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Domain { op: "concat_rows", msg: "no parts".into() });
        };
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    /// Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), true, Some(g)) = (&node.op, node.needs_grad, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let send = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], delta);
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    send(*a, mm_nt(g, val(*b), m, n, k), grads);
                }
                if self.needs(*b) {
                    send(*b, mm_tn(val(*a), g, m, k, n), grads);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                let gt = Tensor::new(vec![r, c], g.to_vec()).expect("shape").transpose();
                send(*a, gt.into_data(), grads);
            }
            Op::Reshape(a) | Op::AddConst(a) => send(*a, g.to_vec(), grads),
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect(), grads);
                send(*b, g.iter().zip(va).map(|(g, a)| g * a).collect(), grads);
            }
            Op::AddRow(x, r) => {
                send(*x, g.to_vec(), grads);
                let n = self.value(*r).len();
                let mut gr = vec![0.0; n];
                for (j, gv) in g.iter().enumerate() {
                    gr[j % n] += gv;
                }
                send(*r, gr, grads);
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let n = vr.len();
                send(*x, g.iter().enumerate().map(|(j, g)| g * vr[j % n]).collect(), grads);
                let mut gr = vec![0.0; n];
                for (j, gv) in g.iter().enumerate() {
                    gr[j % n] += gv * vx[j];
                }
                send(*r, gr, grads);
            }
            Op::ScaleConst(a, c) => send(*a, g.iter().map(|v| v * c).collect(), grads),
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                send(*x, g.iter().map(|v| v * c).collect(), grads);
                let gs = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                send(*s, vec![gs], grads);
            }
            Op::Recip(x) => {
                let gx = g.iter().zip(val(*x)).map(|(g, x)| -g / (x * x)).collect();
                send(*x, gx, grads);
            }
            Op::Relu(x) => {
                let gx = g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                send(*x, gx, grads);
            }
            Op::Sigmoid(x) => send(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(), grads),
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(g, y)| g * y).collect(), grads),
            Op::Log(x) => send(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect(), grads),
            Op::LogClamped(x, eps) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > *eps { g / x } else { 0.0 })
                    .collect();
                send(*x, gx, grads);
            }
            Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                send(*x, gx, grads);
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx, grads);
            }
            Op::LayerNormRows(x, inv_std) => {
                let n = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                send(*x, gx, grads);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()], grads),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n], grads);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2();
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v / m as f64));
                }
                send(*x, gx, grads);
            }
            Op::MaxRows(x, arg) => {
                let (m, n) = self.value(*x).dims2();
                let mut gx = vec![0.0; m * n];
                for (j, &r) in arg.iter().enumerate() {
                    gx[r * n + j] += g[j];
                }
                send(*x, gx, grads);
            }
            Op::Gather(t, idx) => {
                let (m, n) = self.value(*t).dims2();
                let mut gt = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        gt[src * n + j] += g[r * n + j];
                    }
                }
                send(*t, gt, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[off..off + len].to_vec(), grads);
                    off += len;
                }
            }
        }
    }
}

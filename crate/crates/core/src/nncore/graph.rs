//! Recorded computation graph with per-op explicit backwards.

use std::sync::Arc;

/// Plain dense tensor value. Row-major; most ops treat shape as
/// [rows, cols], scalars as [1].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Per-node gradient storage for one backward pass.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    numel: Vec<usize>,
    wants: Vec<bool>,
}

impl GradStore {
    fn new(numel: Vec<usize>, wants: Vec<bool>) -> Self {
        let n = numel.len();
        GradStore { grads: vec![None; n], numel, wants }
    }

    /// Whether gradient flow into this node is needed.
    pub fn wants(&self, id: TensorId) -> bool {
        self.wants[id.0]
    }

    /// Mutable gradient buffer, lazily zero-initialized.
    pub fn slot(&mut self, id: TensorId) -> &mut [f64] {
        let g = &mut self.grads[id.0];
        if g.is_none() {
            *g = Some(vec![0.0; self.numel[id.0]]);
        }
        g.as_mut().unwrap()
    }

    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }

    fn put(&mut self, id: TensorId, g: Vec<f64>) {
        self.grads[id.0] = Some(g);
    }
}

/// One op's reverse step. `values` is the whole graph's value table; the step
/// holds whatever ids it captured at record time.
pub trait BackwardStep {
    fn backward(&self, values: &[Tensor], out_grad: &[f64], grads: &mut GradStore);
}

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    steps: Vec<Option<Box<dyn BackwardStep>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fixed input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, false, None)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, true, None)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires[id.0]
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        requires: bool,
        step: Option<Box<dyn BackwardStep>>,
    ) -> TensorId {
        self.values.push(value);
        self.requires.push(requires);
        self.steps.push(step);
        TensorId(self.values.len() - 1)
    }

    /// Attach a backward step after the node exists (for steps that need the
    /// output's own id, e.g. softmax reading its saved activation).
    pub(crate) fn set_step(&mut self, id: TensorId, step: Box<dyn BackwardStep>) {
        self.steps[id.0] = Some(step);
    }

    /// Convenience: does any input require grad?
    pub(crate) fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.requires[id.0])
    }

    /// Reverse pass from a scalar node. Returns the gradient store; leaves
    /// can be read out with [`GradStore::get`].
    pub fn backward(&self, loss: TensorId) -> GradStore {
        assert_eq!(self.values[loss.0].numel(), 1, "backward() needs a scalar loss");
        let numel = self.values.iter().map(|t| t.numel()).collect();
        let mut store = GradStore::new(numel, self.requires.clone());
        store.put(loss, vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.steps[id].is_none() || !self.requires[id] {
                continue;
            }
            let Some(g) = store.take(TensorId(id)) else { continue };
            self.steps[id]
                .as_ref()
                .unwrap()
                .backward(&self.values, &g, &mut store);
            store.put(TensorId(id), g);
        }
        store
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, BinOp::Mul)
    }

    fn binary_elementwise(&mut self, a: TensorId, b: TensorId, op: BinOp) -> TensorId {
        let ta = &self.values[a.0];
        let tb = &self.values[b.0];
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = match op {
            BinOp::Add => ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
            BinOp::Sub => ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect(),
            BinOp::Mul => ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
        };
        let value = Tensor::new(ta.shape.clone(), data);
        let requires = self.any_requires(&[a, b]);
        let step = requires.then(|| Box::new(BinStep { a, b, op }) as Box<dyn BackwardStep>);
        self.push(value, requires, step)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.values[a.0];
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x * c).collect());
        let requires = self.requires[a.0];
        let step = requires.then(|| Box::new(ScaleStep { a, c }) as Box<dyn BackwardStep>);
        self.push(value, requires, step)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnOp::Relu)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnOp::Sigmoid)
    }

    pub fn tanh_act(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnOp::Tanh)
    }

    fn unary(&mut self, a: TensorId, op: UnOp) -> TensorId {
        let ta = &self.values[a.0];
        let data = ta.data.iter().map(|&x| op.apply(x)).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let requires = self.requires[a.0];
        let out = self.push(value, requires, None);
        if requires {
            self.steps[out.0] = Some(Box::new(UnStep { a, out, op }));
        }
        out
    }

    // -- structural ----------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.cols(), cols, "concat_rows: column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let requires = self.any_requires(parts);
        let step = requires.then(|| {
            Box::new(ConcatRowsStep { parts: parts.to_vec(), cols }) as Box<dyn BackwardStep>
        });
        self.push(Tensor::new(vec![rows, cols], data), requires, step)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.values[p.0].cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.values[p.0];
            assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let requires = self.any_requires(parts);
        let step = requires.then(|| {
            Box::new(ConcatColsStep { parts: parts.to_vec(), widths: widths.clone() })
                as Box<dyn BackwardStep>
        });
        self.push(Tensor::new(vec![rows, total], data), requires, step)
    }

    /// out[r] = x[idx[r]] (row gather).
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<u32>>) -> TensorId {
        let t = &self.values[x.0];
        let c = t.cols();
        let mut data = vec![0.0; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            data[r * c..(r + 1) * c].copy_from_slice(&t.data[i as usize * c..(i as usize + 1) * c]);
        }
        let requires = self.requires[x.0];
        let step = requires.then(|| Box::new(GatherRowsStep { x, idx: idx.clone() }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![idx.len(), c], data), requires, step)
    }

    /// out[idx[m]] += x[m] over `rows` output rows (row scatter-add).
    pub fn scatter_add_rows(&mut self, x: TensorId, idx: Arc<Vec<u32>>, rows: usize) -> TensorId {
        let t = &self.values[x.0];
        assert_eq!(t.rows(), idx.len());
        let c = t.cols();
        let mut data = vec![0.0; rows * c];
        for (m, &i) in idx.iter().enumerate() {
            let dst = &mut data[i as usize * c..(i as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(&t.data[m * c..(m + 1) * c]) {
                *d += s;
            }
        }
        let requires = self.requires[x.0];
        let step = requires.then(|| Box::new(ScatterAddStep { x, idx: idx.clone() }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![rows, c], data), requires, step)
    }

    /// out[r, c] = x[r, c] * factors[r] with constant factors.
    pub fn scale_rows(&mut self, x: TensorId, factors: Arc<Vec<f64>>) -> TensorId {
        let t = &self.values[x.0];
        assert_eq!(t.rows(), factors.len());
        let c = t.cols();
        let mut data = t.data.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in &mut data[r * c..(r + 1) * c] {
                *v *= f;
            }
        }
        let requires = self.requires[x.0];
        let step = requires.then(|| Box::new(ScaleRowsStep { x, factors: factors.clone() }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(t.shape.clone(), data), requires, step)
    }

    /// Row-wise dot product of equal-shape [R, C] tensors -> [R, 1].
    pub fn rowwise_dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape, tb.shape, "rowwise_dot shape mismatch");
        let (r, c) = (ta.rows(), ta.cols());
        let data = (0..r)
            .map(|i| {
                ta.data[i * c..(i + 1) * c]
                    .iter()
                    .zip(&tb.data[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let requires = self.any_requires(&[a, b]);
        let step = requires.then(|| Box::new(RowwiseDotStep { a, b }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(vec![r, 1], data), requires, step)
    }

    /// out[r, c] = col[r, 0] * x[r, c].
    pub fn mul_col_broadcast(&mut self, col: TensorId, x: TensorId) -> TensorId {
        let (tc, tx) = (&self.values[col.0], &self.values[x.0]);
        assert_eq!(tc.cols(), 1);
        assert_eq!(tc.rows(), tx.rows());
        let c = tx.cols();
        let mut data = tx.data.clone();
        for r in 0..tx.rows() {
            let f = tc.data[r];
            for v in &mut data[r * c..(r + 1) * c] {
                *v *= f;
            }
        }
        let requires = self.any_requires(&[col, x]);
        let step = requires.then(|| Box::new(MulColStep { col, x }) as Box<dyn BackwardStep>);
        self.push(Tensor::new(tx.shape.clone(), data), requires, step)
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let t = &self.values[x.0];
        let n = t.numel().max(1);
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / n as f64);
        let requires = self.requires[x.0];
        let step = requires.then(|| Box::new(MeanAllStep { x, n }) as Box<dyn BackwardStep>);
        self.push(value, requires, step)
    }

    /// Weighted sum of scalar nodes -> scalar.
    pub fn weighted_sum(&mut self, parts: &[(TensorId, f64)]) -> TensorId {
        let mut v = 0.0;
        for &(id, w) in parts {
            v += self.values[id.0].item() * w;
        }
        let requires = self.any_requires(&parts.iter().map(|&(id, _)| id).collect::<Vec<_>>());
        let step = requires.then(|| Box::new(WeightedSumStep { parts: parts.to_vec() }) as Box<dyn BackwardStep>);
        self.push(Tensor::scalar(v), requires, step)
    }
}

// ---------------------------------------------------------------------------
// Backward steps
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

struct BinStep {
    a: TensorId,
    b: TensorId,
    op: BinOp,
}

impl BackwardStep for BinStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        match self.op {
            BinOp::Add => {
                if grads.wants(self.a) {
                    for (d, s) in grads.slot(self.a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if grads.wants(self.b) {
                    for (d, s) in grads.slot(self.b).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            BinOp::Sub => {
                if grads.wants(self.a) {
                    for (d, s) in grads.slot(self.a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if grads.wants(self.b) {
                    for (d, s) in grads.slot(self.b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            BinOp::Mul => {
                if grads.wants(self.a) {
                    let vb = &values[self.b.0].data;
                    for ((d, s), y) in grads.slot(self.a).iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if grads.wants(self.b) {
                    let va = &values[self.a.0].data;
                    for ((d, s), x) in grads.slot(self.b).iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
        }
    }
}

struct ScaleStep {
    a: TensorId,
    c: f64,
}

impl BackwardStep for ScaleStep {
    fn backward(&self, _values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if grads.wants(self.a) {
            for (d, s) in grads.slot(self.a).iter_mut().zip(g) {
                *d += s * self.c;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnOp {
    Relu,
    Sigmoid,
    Tanh,
}

impl UnOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnOp::Relu => x.max(0.0),
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Tanh => x.tanh(),
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct UnStep {
    a: TensorId,
    out: TensorId,
    op: UnOp,
}

impl BackwardStep for UnStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.a) {
            return;
        }
        let y = &values[self.out.0].data;
        let x = &values[self.a.0].data;
        let slot = grads.slot(self.a);
        match self.op {
            UnOp::Relu => {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        slot[i] += g[i];
                    }
                }
            }
            UnOp::Sigmoid => {
                for i in 0..g.len() {
                    slot[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            UnOp::Tanh => {
                for i in 0..g.len() {
                    slot[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
    }
}

struct ConcatRowsStep {
    parts: Vec<TensorId>,
    cols: usize,
}

impl BackwardStep for ConcatRowsStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let mut off = 0;
        for &p in &self.parts {
            let n = values[p.0].numel();
            if grads.wants(p) {
                for (d, s) in grads.slot(p).iter_mut().zip(&g[off..off + n]) {
                    *d += s;
                }
            }
            off += n;
        }
        debug_assert_eq!(off, g.len());
        let _ = self.cols;
    }
}

struct ConcatColsStep {
    parts: Vec<TensorId>,
    widths: Vec<usize>,
}

impl BackwardStep for ConcatColsStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let total: usize = self.widths.iter().sum();
        let rows = values[self.parts[0].0].rows();
        let mut off = 0;
        for (&p, &w) in self.parts.iter().zip(&self.widths) {
            if grads.wants(p) {
                let slot = grads.slot(p);
                for r in 0..rows {
                    for c in 0..w {
                        slot[r * w + c] += g[r * total + off + c];
                    }
                }
            }
            off += w;
        }
    }
}

struct GatherRowsStep {
    x: TensorId,
    idx: Arc<Vec<u32>>,
}

impl BackwardStep for GatherRowsStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.x) {
            return;
        }
        let c = values[self.x.0].cols();
        let slot = grads.slot(self.x);
        for (r, &i) in self.idx.iter().enumerate() {
            let dst = &mut slot[i as usize * c..(i as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                *d += s;
            }
        }
    }
}

struct ScatterAddStep {
    x: TensorId,
    idx: Arc<Vec<u32>>,
}

impl BackwardStep for ScatterAddStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.x) {
            return;
        }
        let c = values[self.x.0].cols();
        let slot = grads.slot(self.x);
        for (m, &i) in self.idx.iter().enumerate() {
            let src = &g[i as usize * c..(i as usize + 1) * c];
            for (d, s) in slot[m * c..(m + 1) * c].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

struct ScaleRowsStep {
    x: TensorId,
    factors: Arc<Vec<f64>>,
}

impl BackwardStep for ScaleRowsStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.x) {
            return;
        }
        let c = values[self.x.0].cols();
        let slot = grads.slot(self.x);
        for (r, &f) in self.factors.iter().enumerate() {
            for (d, s) in slot[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                *d += s * f;
            }
        }
    }
}

struct RowwiseDotStep {
    a: TensorId,
    b: TensorId,
}

impl BackwardStep for RowwiseDotStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let c = values[self.a.0].cols();
        if grads.wants(self.a) {
            let vb = &values[self.b.0].data;
            let slot = grads.slot(self.a);
            for (r, &gr) in g.iter().enumerate() {
                for (d, y) in slot[r * c..(r + 1) * c].iter_mut().zip(&vb[r * c..(r + 1) * c]) {
                    *d += gr * y;
                }
            }
        }
        if grads.wants(self.b) {
            let va = &values[self.a.0].data;
            let slot = grads.slot(self.b);
            for (r, &gr) in g.iter().enumerate() {
                for (d, x) in slot[r * c..(r + 1) * c].iter_mut().zip(&va[r * c..(r + 1) * c]) {
                    *d += gr * x;
                }
            }
        }
    }
}

struct MulColStep {
    col: TensorId,
    x: TensorId,
}

impl BackwardStep for MulColStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        let c = values[self.x.0].cols();
        let rows = values[self.x.0].rows();
        if grads.wants(self.col) {
            let vx = &values[self.x.0].data;
            let slot = grads.slot(self.col);
            for r in 0..rows {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += g[r * c + i] * vx[r * c + i];
                }
                slot[r] += acc;
            }
        }
        if grads.wants(self.x) {
            let vc = &values[self.col.0].data;
            let slot = grads.slot(self.x);
            for r in 0..rows {
                let f = vc[r];
                for (d, s) in slot[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *d += s * f;
                }
            }
        }
    }
}

struct MeanAllStep {
    x: TensorId,
    n: usize,
}

impl BackwardStep for MeanAllStep {
    fn backward(&self, _values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if grads.wants(self.x) {
            let gv = g[0] / self.n as f64;
            for d in grads.slot(self.x).iter_mut() {
                *d += gv;
            }
        }
    }
}

struct WeightedSumStep {
    parts: Vec<(TensorId, f64)>,
}

impl BackwardStep for WeightedSumStep {
    fn backward(&self, _values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        for &(id, w) in &self.parts {
            if grads.wants(id) {
                grads.slot(id)[0] += g[0] * w;
            }
        }
    }
}

//! Reverse-mode automatic differentiation over small dense vectors.
//!
//! A [`Graph`] records a tape of operations for one forward pass. Parameter
//! nodes borrow their values from a [`ParamStore`], so building a graph never
//! copies weight matrices. [`Graph::backward`] accumulates parameter gradients
//! straight into a [`Grads`] buffer, which lets callers sum gradients over a
//! batch by running several graphs against the same buffer.

use super::params::{Grads, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    Mean(Vec<Var>),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Row { table: Var, index: usize, width: usize },
    Attend { query: Var, keys: Vec<Var>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Tape for a single forward/backward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Drops all nodes but keeps the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(*id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.value(v).len()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn input_slice(&mut self, value: &[f64]) -> Var {
        self.input(value.to_vec())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = !self.store.get(id).frozen;
        self.push(Op::Param(id), Vec::new(), trainable)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = match &self.nodes[w.0].op {
            Op::Param(id) => {
                let t = self.store.get(*id);
                (t.rows, t.cols)
            }
            _ => panic!("matvec weight must be a parameter"),
        };
        let wv = self.value(w);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "matvec shape mismatch");
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * cols..(i + 1) * cols];
            *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        let needs = self.needs(w) || self.needs(x);
        self.push(Op::MatVec { w, x, rows, cols }, out, needs)
    }

    /// `w x + b` for parameter ids.
    pub fn linear(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matvec(wv, x);
        self.add(y, bv)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(op, out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Min(a, b), f64::min)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let needs = self.needs(a);
        self.push(op, out, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_op(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        let mut needs = false;
        for p in parts {
            out.extend_from_slice(self.value(*p));
            needs |= self.needs(*p);
        }
        self.push(Op::Concat(parts.to_vec()), out, needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax(self.value(a));
        let needs = self.needs(a);
        self.push(Op::Softmax(a), out, needs)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(self.value(a));
        let needs = self.needs(a);
        self.push(Op::LogSoftmax(a), out, needs)
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let out = vec![self.value(a)[index]];
        let needs = self.needs(a);
        self.push(Op::Pick(a, index), out, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = vec![self.value(a).iter().sum()];
        let needs = self.needs(a);
        self.push(Op::Sum(a), out, needs)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.len(), bv.len());
        let out = vec![av.iter().zip(bv).map(|(x, y)| x * y).sum()];
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Dot(a, b), out, needs)
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let n = self.value(parts[0]).len();
        let mut out = vec![0.0; n];
        let mut needs = false;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.len(), n);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            needs |= self.needs(*p);
        }
        let inv = 1.0 / parts.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::Mean(parts.to_vec()), out, needs)
    }

    /// Row `index` of a parameter matrix.
    pub fn row(&mut self, table: ParamId, index: usize) -> Var {
        let t = self.store.get(table);
        let width = t.cols;
        assert!(index < t.rows, "row index out of range");
        let out = t.data[index * width..(index + 1) * width].to_vec();
        let tv = self.param(table);
        let needs = self.needs(tv);
        self.push(Op::Row { table: tv, index, width }, out, needs)
    }

    /// Scaled dot-product attention pooling.
    ///
    /// Every key node holds one or more rows of width `len(query)`; the rows
    /// of all keys together form the attended set, and the keys double as
    /// values.
    pub fn attend(&mut self, query: Var, keys: &[Var]) -> Var {
        let q = self.value(query);
        let d = q.len();
        let inv_sqrt = 1.0 / (d as f64).sqrt();
        let mut scores = Vec::new();
        for k in keys {
            let kv = self.value(*k);
            assert_eq!(kv.len() % d, 0, "attention key width mismatch");
            for row in kv.chunks_exact(d) {
                scores.push(row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt);
            }
        }
        assert!(!scores.is_empty(), "attention over empty set");
        let weights = softmax(&scores);
        let mut out = vec![0.0; d];
        let mut i = 0;
        let mut needs = self.needs(query);
        for k in keys {
            needs |= self.needs(*k);
            for row in self.value(*k).chunks_exact(d) {
                let w = weights[i];
                out.iter_mut().zip(row).for_each(|(o, r)| *o += w * r);
                i += 1;
            }
        }
        self.push(
            Op::Attend {
                query,
                keys: keys.to_vec(),
                weights,
            },
            out,
            needs,
        )
    }

    /// Backpropagates `seed * d(loss)` into `grads`. `loss` must be a scalar.
    pub fn backward(&self, loss: Var, seed: f64, grads: &mut Grads) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut sink = Sink {
                graph: self,
                node_grads: &mut node_grads,
                grads: &mut *grads,
            };
            match &node.op {
                // Parameter gradients are routed straight into `grads`.
                Op::Input | Op::Param(_) => {}
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    if self.needs(*x) {
                        let wv = self.value(*w);
                        sink.with(*x, |dx| {
                            for i in 0..rows {
                                let gi = g[i];
                                if gi == 0.0 {
                                    continue;
                                }
                                let row = &wv[i * cols..(i + 1) * cols];
                                dx.iter_mut().zip(row).for_each(|(d, r)| *d += gi * r);
                            }
                        });
                    }
                    if self.needs(*w) {
                        let xv = self.value(*x);
                        sink.with(*w, |dw| {
                            for i in 0..rows {
                                let gi = g[i];
                                if gi == 0.0 {
                                    continue;
                                }
                                dw[i * cols..(i + 1) * cols]
                                    .iter_mut()
                                    .zip(xv)
                                    .for_each(|(d, xj)| *d += gi * xj);
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    sink.add(*a, &g);
                    sink.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    sink.add(*a, &g);
                    sink.with(*b, |d| d.iter_mut().zip(&g).for_each(|(d, x)| *d -= x));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                    sink.with(*b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            if av[i] <= bv[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                    sink.with(*b, |d| {
                        for i in 0..d.len() {
                            if av[i] > bv[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    sink.with(*a, |d| d.iter_mut().zip(&g).for_each(|(d, x)| *d += s * x));
                }
                Op::AddScalar(a) => sink.add(*a, &g),
                Op::Tanh(a) => {
                    let y = &node.value;
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * y[i];
                        }
                    });
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += 2.0 * g[i] * x[i];
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            if x[i] > *lo && x[i] < *hi {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        sink.add(*p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dotp: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += y[i] * (g[i] - dotp);
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let total: f64 = g.iter().sum();
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] - y[i].exp() * total;
                        }
                    });
                }
                Op::Pick(a, index) => {
                    let index = *index;
                    sink.with(*a, |d| d[index] += g[0]);
                }
                Op::Sum(a) => {
                    sink.with(*a, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Dot(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    sink.with(*a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * bv[i];
                        }
                    });
                    sink.with(*b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * av[i];
                        }
                    });
                }
                Op::Mean(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        sink.with(*p, |d| d.iter_mut().zip(&g).for_each(|(d, x)| *d += inv * x));
                    }
                }
                Op::Row { table, index, width } => {
                    let (index, width) = (*index, *width);
                    sink.with(*table, |d| {
                        d[index * width..(index + 1) * width]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, x)| *d += x);
                    });
                }
                Op::Attend {
                    query,
                    keys,
                    weights,
                } => {
                    let q = self.value(*query);
                    let dim = q.len();
                    let inv_sqrt = 1.0 / (dim as f64).sqrt();
                    // dL/dw_i = g . k_i, then through the softmax.
                    let mut dw = Vec::with_capacity(weights.len());
                    for k in keys {
                        for row in self.value(*k).chunks_exact(dim) {
                            dw.push(row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>());
                        }
                    }
                    let mean_dw: f64 = weights.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    let dscore: Vec<f64> = weights
                        .iter()
                        .zip(&dw)
                        .map(|(w, d)| w * (d - mean_dw))
                        .collect();
                    if self.needs(*query) {
                        let mut dq = vec![0.0; dim];
                        let mut i = 0;
                        for k in keys {
                            for row in self.value(*k).chunks_exact(dim) {
                                let s = dscore[i] * inv_sqrt;
                                dq.iter_mut().zip(row).for_each(|(d, r)| *d += s * r);
                                i += 1;
                            }
                        }
                        sink.add(*query, &dq);
                    }
                    let mut i = 0;
                    for k in keys {
                        let rows = self.value(*k).len() / dim;
                        if self.needs(*k) {
                            sink.with(*k, |d| {
                                for r in 0..rows {
                                    let w = weights[i + r];
                                    let s = dscore[i + r] * inv_sqrt;
                                    let chunk = &mut d[r * dim..(r + 1) * dim];
                                    for j in 0..dim {
                                        chunk[j] += w * g[j] + s * q[j];
                                    }
                                }
                            });
                        }
                        i += rows;
                    }
                }
            }
        }
    }
}

/// Routes gradient contributions either to a node buffer or, for parameter
/// nodes, directly into the caller's [`Grads`].
struct Sink<'a, 'g, 'p> {
    graph: &'a Graph<'p>,
    node_grads: &'a mut Vec<Option<Vec<f64>>>,
    grads: &'g mut Grads,
}

impl Sink<'_, '_, '_> {
    fn with(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.graph.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        match node.op {
            Op::Param(id) => f(&mut self.grads.data[id.0]),
            _ => {
                let len = node.value.len();
                let buf = self.node_grads[target.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf)
            }
        }
    }

    fn add(&mut self, target: Var, g: &[f64]) {
        self.with(target, |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for t in 0..store.len() {
            let mut g = Vec::new();
            for i in 0..store.tensors()[t].len() {
                let orig = store.tensors()[t].data[i];
                store.tensors_mut()[t].data[i] = orig + h;
                let up = f(store);
                store.tensors_mut()[t].data[i] = orig - h;
                let down = f(store);
                store.tensors_mut()[t].data[i] = orig;
                g.push((up - down) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    fn check(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> f64, build: &dyn Fn(&mut Graph) -> Var) {
        let mut grads = Grads::zeros_like(store);
        {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss, 1.0, &mut grads);
        }
        let num = numeric_grad(store, f);
        for (a, n) in grads.tensors().iter().zip(&num) {
            for (x, y) in a.iter().zip(n) {
                let denom = x.abs().max(y.abs()).max(1e-4);
                assert!((x - y).abs() / denom < 1e-5, "analytic {x} vs numeric {y}");
            }
        }
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.normal("w", 4, 3, 1.0, &mut rng);
        let b = store.normal("b", 4, 1, 1.0, &mut rng);
        let emb = store.normal("emb", 5, 4, 1.0, &mut rng);
        let build = move |g: &mut Graph| {
            let x = g.input(vec![0.3, -0.7, 1.1]);
            let h = g.linear(w, b, x);
            let h = g.tanh(h);
            let r0 = g.row(emb, 1);
            let r1 = g.row(emb, 3);
            let m = g.mean(&[r0, r1]);
            let mem = g.input(vec![0.2, 0.1, -0.3, 0.5, 1.0, -1.0, 0.0, 0.4]);
            let pooled = g.attend(h, &[mem, m, h]);
            let e = g.exp(pooled);
            let sq = g.square(e);
            let prod = g.mul(sq, m);
            let cat = g.concat(&[prod, h]);
            let ls = g.log_softmax(cat);
            let p = g.pick(ls, 2);
            let sm = g.softmax(h);
            let d = g.dot(sm, m);
            let c = g.clamp(d, -10.0, 10.0);
            let mn = g.min(p, c);
            let s = g.sum(pooled);
            let t = g.add(mn, s);
            let t = g.sub(t, d);
            let t = g.scale(t, 0.7);
            g.add_scalar(t, 1.0)
        };
        let f = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let v = build(&mut g);
            g.scalar(v)
        };
        check(&mut store, &f, &build);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.normal("w", 2, 2, 1.0, &mut rng);
        let b = store.normal("b", 2, 1, 1.0, &mut rng);
        store.set_frozen(w, true);
        let mut grads = Grads::zeros_like(&store);
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.0, 2.0]);
        let y = g.linear(w, b, x);
        let s = g.sum(y);
        g.backward(s, 1.0, &mut grads);
        assert!(grads.get(w).iter().all(|v| *v == 0.0));
        assert_eq!(grads.get(b), &[1.0, 1.0]);
    }

    #[test]
    fn attention_over_singleton_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.input(vec![0.5, -2.0, 1.0]);
        let k = g.input(vec![1.0, 2.0, 3.0]);
        let out = g.attend(q, &[k]);
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0]);
    }
}

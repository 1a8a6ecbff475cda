use std::collections::BTreeMap;

use super::params::{ParamGrad, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// backward rule maps the output gradient onto each input.
pub trait CustomOp {
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Input,
    Linear { w: ParamId, x: Var },
    EmbedMean { table: ParamId, ids: Vec<u32> },
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Normalize(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Dot(Var, Var),
    Sum(Var),
    SumAll(Vec<Var>),
    PairwiseSqDist { a: Vec<Var>, b: Vec<Var>, scale: f64 },
    GradReverse(Var, f64),
    SoftmaxProb { logits: Var, index: usize },
    LogClamped { x: Var, lo: f64, hi: f64 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// A recorded computation over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    pub(crate) params: Vec<Option<ParamGrad>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a recorded node (zeros if unreachable).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(id.0).and_then(Option::as_ref)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A column vector leaf; its gradient is available through [`Gradients::wrt`].
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(values, n, 1, Op::Input)
    }

    pub fn input_matrix(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(values, rows, cols, Op::Input))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], 1, 1, Op::Input)
    }

    /// `y = Wᵀx` for a `d_in × d_out` parameter `W` and a `d_in` vector `x`.
    pub fn linear(&mut self, w: ParamId, x: Var) -> Result<Var> {
        let wt = self.params.get(w);
        let (d_in, d_out) = (wt.rows(), wt.cols());
        let xv = &self.nodes[x.0].value;
        if xv.len() != d_in {
            return Err(Error::Shape(format!(
                "linear `{}`: weight {d_in}x{d_out} vs input of length {}",
                wt.name,
                xv.len()
            )));
        }
        let mut y = vec![0.0; d_out];
        for (i, &xi) in xv.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &wt.values[i * d_out..(i + 1) * d_out];
            for (yj, &wij) in y.iter_mut().zip(row) {
                *yj += wij * xi;
            }
        }
        Ok(self.push(y, d_out, 1, Op::Linear { w, x }))
    }

    /// Mean of the embedding-table rows selected by `ids`.
    pub fn embed_mean(&mut self, table: ParamId, ids: &[u32]) -> Result<Var> {
        let t = self.params.get(table);
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "embedding lookup into `{}` with no tokens",
                t.name
            )));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut y = vec![0.0; cols];
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::Shape(format!(
                    "token id {id} outside embedding table `{}` with {rows} rows",
                    t.name
                )));
            }
            for (a, b) in y.iter_mut().zip(&t.values[id * cols..(id + 1) * cols]) {
                *a += b;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(
            y,
            cols,
            1,
            Op::EmbedMean {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[x.0];
        let (r, c) = (n.rows, n.cols);
        let v = n.value.iter().map(|&a| f(a)).collect();
        self.push(v, r, c, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |a| if a > 0.0 { a } else { slope * a },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// Scale to unit Euclidean norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self.nodes[x.0].value.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(Error::NonFinite(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(self.unary(x, move |a| a / norm, Op::Normalize(x, norm)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                na.rows, na.cols, nb.rows, nb.cols
            )));
        }
        Ok((na.rows, na.cols))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(v, r, c, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| a + c, Op::AddScalar(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![v], 1, 1, Op::Dot(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().sum();
        self.push(vec![v], 1, 1, Op::Sum(x))
    }

    /// Sum of scalar nodes, in the given order.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut v = 0.0;
        for &x in xs {
            let n = &self.nodes[x.0];
            if n.value.len() != 1 {
                return Err(Error::Shape(format!("sum_all expects scalars, got {}x{}", n.rows, n.cols)));
            }
            v += n.value[0];
        }
        Ok(self.push(vec![v], 1, 1, Op::SumAll(xs.to_vec())))
    }

    /// `scale · ‖a_m − b_n‖²` for every pair, as an `|a| × |b|` matrix.
    pub fn pairwise_sq_dist(&mut self, a: &[Var], b: &[Var], scale: f64) -> Result<Var> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument("pairwise distance over an empty list".into()));
        }
        let dim = self.nodes[a[0].0].value.len();
        for &v in a.iter().chain(b) {
            if self.nodes[v.0].value.len() != dim {
                return Err(Error::Shape(format!(
                    "pairwise distance: vectors of length {dim} and {}",
                    self.nodes[v.0].value.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(a.len() * b.len());
        for &am in a {
            let av = &self.nodes[am.0].value;
            for &bn in b {
                let bv = &self.nodes[bn.0].value;
                let d: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
                out.push(scale * d);
            }
        }
        Ok(self.push(
            out,
            a.len(),
            b.len(),
            Op::PairwiseSqDist {
                a: a.to_vec(),
                b: b.to_vec(),
                scale,
            },
        ))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let n = &self.nodes[x.0];
        let (r, c, v) = (n.rows, n.cols, n.value.clone());
        self.push(v, r, c, Op::GradReverse(x, lambda))
    }

    /// Softmax probability of class `index` given a logit vector.
    pub fn softmax_prob(&mut self, logits: Var, index: usize) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if index >= z.len() {
            return Err(Error::Shape(format!("class {index} of {} logits", z.len())));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let p = (z[index] - max).exp() / denom;
        Ok(self.push(vec![p], 1, 1, Op::SoftmaxProb { logits, index }))
    }

    /// Elementwise `ln(clamp(x, lo, hi))`; zero gradient where clamped.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, move |a| a.clamp(lo, hi).ln(), Op::LogClamped { x, lo, hi })
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::Shape(format!(
                "custom op output {rows}x{cols} with {} values",
                value.len()
            )));
        }
        Ok(self.push(
            value,
            rows,
            cols,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Propagate d(loss)/d(node) back to every reachable node and parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<ParamGrad>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Linear { w, x } => {
                    let wt = self.params.get(*w);
                    let (d_in, d_out) = (wt.rows(), wt.cols());
                    let xv = &self.nodes[x.0].value;
                    let mut gx = vec![0.0; d_in];
                    for (i_in, gxi) in gx.iter_mut().enumerate() {
                        let row = &wt.values[i_in * d_out..(i_in + 1) * d_out];
                        *gxi = row.iter().zip(&g).map(|(a, b)| a * b).sum();
                    }
                    add_into(&mut grads[x.0], &gx);
                    let slot = pgrads[w.0].get_or_insert_with(|| ParamGrad::Dense(vec![0.0; d_in * d_out]));
                    if let ParamGrad::Dense(d) = slot {
                        for (i_in, &xi) in xv.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let dst = &mut d[i_in * d_out..(i_in + 1) * d_out];
                            for (a, &gj) in dst.iter_mut().zip(&g) {
                                *a += xi * gj;
                            }
                        }
                    }
                }
                Op::EmbedMean { table, ids } => {
                    let cols = self.params.get(*table).cols();
                    let inv = 1.0 / ids.len() as f64;
                    let slot = pgrads[table.0].get_or_insert_with(|| ParamGrad::Rows {
                        cols,
                        rows: BTreeMap::new(),
                    });
                    if let ParamGrad::Rows { rows, .. } = slot {
                        for &id in ids {
                            let row = rows.entry(id as usize).or_insert_with(|| vec![0.0; cols]);
                            for (a, &b) in row.iter_mut().zip(&g) {
                                *a += b * inv;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    let gx: Vec<f64> = node.value.iter().zip(&g).map(|(y, g)| g * (1.0 - y * y)).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x.0].value;
                    let gx: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(&a, &g)| if a > 0.0 { g } else { slope * g })
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx: Vec<f64> = xv.iter().zip(&g).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Normalize(x, norm) => {
                    let y = &node.value;
                    let yg: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let gx: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| (gi - yi * yg) / norm).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    add_into(&mut grads[a.0], &ga);
                    add_into(&mut grads[b.0], &gb);
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::AddScalar(x) => add_into(&mut grads[x.0], &g),
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = bv.iter().map(|v| v * g[0]).collect();
                    let gb: Vec<f64> = av.iter().map(|v| v * g[0]).collect();
                    add_into(&mut grads[a.0], &ga);
                    add_into(&mut grads[b.0], &gb);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.nodes[x.0].value.len()];
                    add_into(&mut grads[x.0], &gx);
                }
                Op::SumAll(xs) => {
                    for x in xs {
                        add_into(&mut grads[x.0], &g);
                    }
                }
                Op::PairwiseSqDist { a, b, scale } => {
                    let cols = b.len();
                    let mut gb: Vec<Vec<f64>> = b
                        .iter()
                        .map(|v| vec![0.0; self.nodes[v.0].value.len()])
                        .collect();
                    for (m, am) in a.iter().enumerate() {
                        let av = &self.nodes[am.0].value;
                        let mut ga = vec![0.0; av.len()];
                        for (n, bn) in b.iter().enumerate() {
                            let gmn = g[m * cols + n];
                            if gmn == 0.0 {
                                continue;
                            }
                            let bv = &self.nodes[bn.0].value;
                            let c = 2.0 * scale * gmn;
                            for ((gai, gbi), (x, y)) in ga.iter_mut().zip(gb[n].iter_mut()).zip(av.iter().zip(bv)) {
                                let d = c * (x - y);
                                *gai += d;
                                *gbi -= d;
                            }
                        }
                        add_into(&mut grads[am.0], &ga);
                    }
                    for (bn, gbn) in b.iter().zip(&gb) {
                        add_into(&mut grads[bn.0], gbn);
                    }
                }
                Op::GradReverse(x, lambda) => {
                    let gx: Vec<f64> = g.iter().map(|v| -lambda * v).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::SoftmaxProb { logits, index } => {
                    let z = &self.nodes[logits.0].value;
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let probs: Vec<f64> = z.iter().map(|v| (v - max).exp() / denom).collect();
                    let p = probs[*index];
                    let gz: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &pj)| {
                            let d = if j == *index { p * (1.0 - p) } else { -p * pj };
                            g[0] * d
                        })
                        .collect();
                    add_into(&mut grads[logits.0], &gz);
                }
                Op::LogClamped { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let gx: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(&a, &g)| if a > *lo && a < *hi { g / a } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&[f64]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    for (v, gv) in inputs.iter().zip(gs) {
                        add_into(&mut grads[v.0], &gv);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }
}

//! Interaction-based instance matching.
//!
//! Two instances are compared item by item: scaled squared distances between
//! unit embeddings form a similarity matrix, each entry is soft-assigned to
//! `K` Gaussian kernels, per-row kernel mass is log-summed into a `K`-vector,
//! and a two-layer MLP maps that vector to a score in `(-1, 1)`.

use rand::Rng;

use crate::diffcore::{uniform_init, xavier_limit, CustomOp, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Entries of `log(Σ_n K)` are floored here so an underflowing kernel
/// contributes a finite constant with zero gradient.
pub const LOG_FLOOR: f64 = 1e-30;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Squared distance between unit vectors lies in `[0, 4]`.
pub const DISTANCE_SCALE: f64 = 0.25;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub mu: f64,
    pub sigma: f64,
}

impl Kernel {
    pub fn response(&self, alpha: f64) -> f64 {
        let d = alpha - self.mu;
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn slope(&self, alpha: f64, response: f64) -> f64 {
        -(alpha - self.mu) / (self.sigma * self.sigma) * response
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    kernels: Vec<Kernel>,
}

impl Default for KernelBank {
    /// 21 kernels: an exact-match kernel at 0 with width 1e-3, then means
    /// 0.05, 0.10, …, 1.0 with width 0.1.
    fn default() -> Self {
        let mut kernels = vec![Kernel { mu: 0.0, sigma: 1e-3 }];
        kernels.extend((1..=20).map(|i| Kernel {
            mu: i as f64 * 0.05,
            sigma: 0.1,
        }));
        Self { kernels }
    }
}

impl KernelBank {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidArgument("kernel bank is empty".into()));
        }
        for k in &kernels {
            if !(k.sigma > 0.0) || !(0.0..=1.0).contains(&k.mu) {
                return Err(Error::InvalidArgument(format!("bad kernel {k:?}")));
            }
        }
        Ok(Self { kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }
}

/// Response of every kernel to one similarity value.
pub fn kernel_features(alpha: f64, bank: &KernelBank) -> Vec<f64> {
    bank.kernels.iter().map(|k| k.response(alpha)).collect()
}

/// Per-row kernel sums `S[m][k] = Σ_n K_k(α_mn)`.
fn row_sums(alpha: &[f64], rows: usize, cols: usize, bank: &KernelBank) -> Vec<f64> {
    let nk = bank.len();
    let mut sums = vec![0.0; rows * nk];
    for m in 0..rows {
        let s = &mut sums[m * nk..(m + 1) * nk];
        for &a in &alpha[m * cols..(m + 1) * cols] {
            for (acc, k) in s.iter_mut().zip(&bank.kernels) {
                *acc += k.response(a);
            }
        }
    }
    sums
}

/// `φ_k = Σ_m ln(max(Σ_n K_k(α_mn), floor))` over a row-major `rows × cols` matrix.
pub fn pool_values(alpha: &[f64], rows: usize, cols: usize, bank: &KernelBank) -> Vec<f64> {
    let nk = bank.len();
    let sums = row_sums(alpha, rows, cols, bank);
    let mut phi = vec![0.0; nk];
    for m in 0..rows {
        for (p, s) in phi.iter_mut().zip(&sums[m * nk..(m + 1) * nk]) {
            *p += s.max(LOG_FLOOR).ln();
        }
    }
    phi
}

struct KernelPool {
    bank: KernelBank,
    rows: usize,
    cols: usize,
    sums: Vec<f64>,
}

impl CustomOp for KernelPool {
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let alpha = inputs[0];
        let nk = self.bank.len();
        let mut g = vec![0.0; alpha.len()];
        for m in 0..self.rows {
            let sums = &self.sums[m * nk..(m + 1) * nk];
            for n in 0..self.cols {
                let a = alpha[m * self.cols + n];
                let mut acc = 0.0;
                for ((k, &s), &go) in self.bank.kernels.iter().zip(sums).zip(grad_out) {
                    if s > LOG_FLOOR && go != 0.0 {
                        acc += go * k.slope(a, k.response(a)) / s;
                    }
                }
                g[m * self.cols + n] = acc;
            }
        }
        vec![g]
    }
}

/// Differentiable kernel pooling of a similarity matrix into a `K`-vector.
pub fn pool(g: &mut Graph<'_>, alpha: Var, bank: &KernelBank) -> Result<Var> {
    let (rows, cols) = g.shape(alpha);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("pooling an empty similarity matrix".into()));
    }
    let values = g.value(alpha);
    let sums = row_sums(values, rows, cols, bank);
    let nk = bank.len();
    let mut phi = vec![0.0; nk];
    for m in 0..rows {
        for (p, s) in phi.iter_mut().zip(&sums[m * nk..(m + 1) * nk]) {
            *p += s.max(LOG_FLOOR).ln();
        }
    }
    let op = KernelPool {
        bank: bank.clone(),
        rows,
        cols,
        sums,
    };
    g.custom(&[alpha], phi, nk, 1, Box::new(op))
}

/// `α_mn = ‖a_m − b_n‖² / 4` for unit vectors, so every entry is in `[0, 1]`.
pub fn similarity_matrix(g: &mut Graph<'_>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("similarity of an empty instance".into()));
    }
    for &v in a.iter().chain(b) {
        let norm = g.value(v).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "similarity needs unit vectors, got norm {norm}"
            )));
        }
    }
    g.pairwise_sq_dist(a, b, DISTANCE_SCALE)
}

/// Parameters of the scoring MLP `tanh(W₂ᵀ leaky_relu(W₁ᵀ cφ))`, `c = FEATURE_SCALE`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricParams {
    pub bank: KernelBank,
    pub hidden: ParamId,
    pub output: ParamId,
}

/// The pooled features reach magnitudes in the hundreds (each floored row
/// contributes ln 1e-30 ≈ -69). They enter the MLP multiplied by this
/// constant, a fixed reparametrization of the first layer that keeps
/// adaptive-optimizer steps from saturating the output tanh.
pub const FEATURE_SCALE: f64 = 0.01;
const HIDDEN_INIT_SCALE: f64 = 0.1;

impl MetricParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, bank: KernelBank, rng: &mut R) -> Result<Self> {
        let k = bank.len();
        let hidden = store.add(
            &format!("{prefix}.w1"),
            &[k, k],
            uniform_init(rng, k * k, xavier_limit(k, k) * HIDDEN_INIT_SCALE),
        )?;
        let output = store.add(
            &format!("{prefix}.w2"),
            &[k, 1],
            uniform_init(rng, k, xavier_limit(k, 1)),
        )?;
        Ok(Self { bank, hidden, output })
    }

    pub fn attach(store: &ParamStore, prefix: &str, bank: KernelBank) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::NotFound(format!("parameter `{prefix}.{suffix}`")))
        };
        let (hidden, output) = (find("w1")?, find("w2")?);
        let k = bank.len();
        if store.get(hidden).shape != [k, k] || store.get(output).shape != [k, 1] {
            return Err(Error::Shape(format!(
                "metric `{prefix}` expects {k}x{k} and {k}x1 layers"
            )));
        }
        Ok(Self { bank, hidden, output })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.hidden, self.output]
    }

    /// Score two instances; the first argument's items index the pooled rows.
    pub fn score(&self, g: &mut Graph<'_>, a: &[Var], b: &[Var]) -> Result<Var> {
        let alpha = similarity_matrix(g, a, b)?;
        let phi = pool(g, alpha, &self.bank)?;
        self.head(g, phi)
    }

    fn head(&self, g: &mut Graph<'_>, phi: Var) -> Result<Var> {
        let x = g.scale(phi, FEATURE_SCALE);
        let h = g.linear(self.hidden, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let s = g.linear(self.output, h)?;
        Ok(g.tanh(s))
    }

    /// Score precomputed embeddings without recording gradients for later use.
    pub fn score_embeddings(&self, store: &ParamStore, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        let mut g = Graph::new(store);
        let av: Vec<Var> = a.iter().map(|v| g.input(v.clone())).collect();
        let bv: Vec<Var> = b.iter().map(|v| g.input(v.clone())).collect();
        let s = self.score(&mut g, &av, &bv)?;
        Ok(g.scalar_value(s))
    }
}

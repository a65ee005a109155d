//! Ground truth for the recursive models.
//!
//! Three independent routes to a model's output:
//!
//! * the recursive forward in [`crate::polynet`];
//! * [`symbolic_expand`], which runs the same recursion over exact
//!   multivariate polynomials ([`MultiPoly`]) and yields every coefficient;
//! * for third-order CCP/NCP blocks, [`build_ccp_tensors`] /
//!   [`build_ncp_tensors`], which materialize the weight tensors `W[n]` of the
//!   explicit model `β + Σ_n W[n] ×_2 z ... ×_{n+1} z` from the factor
//!   matrices via Khatri-Rao products, evaluated by [`explicit_eval`].
//!
//! [`equivalence_check`] compares the routes and [`degree_check`] infers the
//! degree of a model along a line from its samples alone.

use std::collections::BTreeMap;
use std::fmt;
use std::thread;

use thiserror::Error;

use crate::polynet::{BlockParams, CcpParams, NcpParams, PolyBlock, PolyChain, PolyError, PolyModel};
use crate::rng;
use crate::tensor::{fold_mode1, khatri_rao, mode_m_product, multi_mode_product, DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expansion needs up to {needed} stored coefficients, over the budget of {bound}")]
    BudgetExceeded { needed: u128, bound: usize },
    #[error("not a polynomial: {0}")]
    NotPolynomial(String),
    #[error("explicit tensor construction needs order {expected}, got {found}")]
    UnsupportedOrder { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Maximum number of stored coefficients an expansion may need.
pub const COEFFICIENT_BUDGET: usize = 1_000_000;
/// Relative threshold below which expanded coefficients are dropped.
pub const PRUNE_REL: f64 = 1e-14;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

type Exponent = Vec<u32>;

/// A vector of `width` polynomials in `dim` variables sharing one monomial
/// index: `terms[α][j]` is the coefficient of `z^α` in component `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPoly {
    dim: usize,
    width: usize,
    terms: BTreeMap<Exponent, Vec<f64>>,
}

fn finish(dim: usize, width: usize, acc: BTreeMap<Exponent, Vec<Compensated>>) -> MultiPoly {
    let terms = acc
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(Compensated::value).collect::<Vec<_>>()))
        .filter(|(_, v)| v.iter().any(|&c| c != 0.0))
        .collect();
    MultiPoly { dim, width, terms }
}

impl MultiPoly {
    pub fn zero(dim: usize, width: usize) -> Self {
        Self {
            dim,
            width,
            terms: BTreeMap::new(),
        }
    }

    /// The identity map: component `i` is the variable `z_i`.
    pub fn variables(dim: usize) -> Self {
        let terms = (0..dim)
            .map(|i| {
                let mut e = vec![0; dim];
                e[i] = 1;
                let mut c = vec![0.0; dim];
                c[i] = 1.0;
                (e, c)
            })
            .collect();
        Self { dim, width: dim, terms }
    }

    pub fn constant(dim: usize, value: &[f64]) -> Self {
        let mut p = Self::zero(dim, value.len());
        if value.iter().any(|&v| v != 0.0) {
            p.terms.insert(vec![0; dim], value.to_vec());
        }
        p
    }

    /// Builds a polynomial from explicit terms; zero coefficient vectors are dropped.
    pub fn from_terms(dim: usize, width: usize, terms: impl IntoIterator<Item = (Exponent, Vec<f64>)>) -> Result<Self> {
        let mut p = Self::zero(dim, width);
        for (e, c) in terms {
            if e.len() != dim || c.len() != width {
                return Err(OracleError::InvalidArgument(format!(
                    "term of dimension {} and width {} in a {dim}-variable, width-{width} polynomial",
                    e.len(),
                    c.len()
                )));
            }
            if c.iter().any(|&v| v != 0.0) {
                p.terms.insert(e, c);
            }
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, exponent: &[u32]) -> Option<&[f64]> {
        self.terms.get(exponent).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], &[f64])> {
        self.terms.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// Highest total degree present; 0 for constants and the zero polynomial.
    pub fn total_degree(&self) -> usize {
        self.terms.keys().map(|e| e.iter().sum::<u32>() as usize).max().unwrap_or(0)
    }

    /// Total degree of component `j` alone, `None` if it is identically zero.
    pub fn component_degree(&self, j: usize) -> Option<usize> {
        self.terms
            .iter()
            .filter(|(_, c)| c[j] != 0.0)
            .map(|(e, _)| e.iter().sum::<u32>() as usize)
            .max()
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }

    fn check_width(&self, other: &Self, op: &str) -> Result<()> {
        if self.dim != other.dim || self.width != other.width {
            return Err(OracleError::InvalidArgument(format!(
                "{op}: ({}, {}) vs ({}, {}) (dim, width)",
                self.dim, self.width, other.dim, other.width
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_width(other, "add")?;
        let mut acc: BTreeMap<Exponent, Vec<Compensated>> = BTreeMap::new();
        for p in [self, other] {
            for (e, c) in &p.terms {
                let slot = acc.entry(e.clone()).or_insert_with(|| vec![Compensated::default(); self.width]);
                for (s, &v) in slot.iter_mut().zip(c) {
                    s.add(v);
                }
            }
        }
        Ok(finish(self.dim, self.width, acc))
    }

    pub fn add_constant(&self, value: &[f64]) -> Result<Self> {
        self.add(&Self::constant(self.dim, value).with_width(self.width, value.len())?)
    }

    fn with_width(mut self, width: usize, found: usize) -> Result<Self> {
        if found != width {
            return Err(OracleError::InvalidArgument(format!("width {found}, expected {width}")));
        }
        self.width = width;
        Ok(self)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            for v in c.iter_mut() {
                *v *= alpha;
            }
        }
        out.terms.retain(|_, c| c.iter().any(|&v| v != 0.0));
        out
    }

    /// Componentwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_width(other, "hadamard")?;
        let mut acc: BTreeMap<Exponent, Vec<Compensated>> = BTreeMap::new();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Exponent = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                let slot = acc.entry(e).or_insert_with(|| vec![Compensated::default(); self.width]);
                for ((s, a), b) in slot.iter_mut().zip(ca).zip(cb) {
                    s.add(a * b);
                }
            }
        }
        Ok(finish(self.dim, self.width, acc))
    }

    /// `Mᵀ p` for `M` of shape width x out.
    pub fn linear_map_t(&self, m: &DenseTensor) -> Result<Self> {
        m.expect_order("linear_map_t", 2)?;
        if m.rows() != self.width {
            return Err(OracleError::InvalidArgument(format!("linear_map_t: {} rows for width {}", m.rows(), self.width)));
        }
        self.map_terms(m.cols(), |c, j| (0..m.rows()).map(move |i| m.at(i, j) * c[i]))
    }

    /// `M p` for `M` of shape out x width.
    pub fn linear_map(&self, m: &DenseTensor) -> Result<Self> {
        m.expect_order("linear_map", 2)?;
        if m.cols() != self.width {
            return Err(OracleError::InvalidArgument(format!("linear_map: {} cols for width {}", m.cols(), self.width)));
        }
        self.map_terms(m.rows(), |c, i| (0..m.cols()).map(move |j| m.at(i, j) * c[j]))
    }

    fn map_terms<'a, F, I>(&'a self, width: usize, f: F) -> Result<Self>
    where
        F: Fn(&'a [f64], usize) -> I,
        I: Iterator<Item = f64>,
    {
        let mut acc = BTreeMap::new();
        for (e, c) in &self.terms {
            let v: Vec<Compensated> = (0..width)
                .map(|j| {
                    let mut s = Compensated::default();
                    f(c, j).for_each(|x| s.add(x));
                    s
                })
                .collect();
            acc.insert(e.clone(), v);
        }
        Ok(finish(self.dim, width, acc))
    }

    /// Compensated evaluation at `z`.
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(OracleError::InvalidArgument(format!("eval: input of length {} for {} variables", z.len(), self.dim)));
        }
        let mut acc = vec![Compensated::default(); self.width];
        for (e, c) in &self.terms {
            let m: f64 = e.iter().zip(z).map(|(&p, &x)| x.powi(p as i32)).product();
            for (s, &v) in acc.iter_mut().zip(c) {
                s.add(v * m);
            }
        }
        Ok(acc.into_iter().map(Compensated::value).collect())
    }

    /// Drops monomials whose coefficients are all at most
    /// `PRUNE_REL * max |coefficient|` in magnitude.
    pub fn prune(&mut self) {
        let cut = PRUNE_REL * self.max_abs_coefficient();
        self.terms.retain(|_, c| c.iter().any(|v| v.abs() > cut));
    }

    /// Terms sorted by total degree, then lexicographically by exponent.
    pub fn sorted_terms(&self) -> Vec<(&[u32], &[f64])> {
        let mut v: Vec<_> = self.terms().collect();
        v.sort_by(|a, b| {
            let da: u32 = a.0.iter().sum();
            let db: u32 = b.0.iter().sum();
            da.cmp(&db).then_with(|| a.0.cmp(b.0))
        });
        v
    }

    /// One line per monomial: `(e1,...,ed) -> [c1, ..., co]`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (e, c) in self.sorted_terms() {
            let e: Vec<String> = e.iter().map(u32::to_string).collect();
            let c: Vec<String> = c.iter().map(f64::to_string).collect();
            s.push_str(&format!("({}) -> [{}]\n", e.join(","), c.join(", ")));
        }
        s
    }

    /// Parses the output of [`MultiPoly::to_table`].
    pub fn parse_table(dim: usize, width: usize, text: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| OracleError::Parse {
                line: no + 1,
                msg: msg.to_string(),
            };
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| err("missing '->'"))?;
            let exps = lhs
                .trim()
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| err("exponent tuple must be parenthesized"))?;
            let coefs = rhs
                .trim()
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| err("coefficients must be bracketed"))?;
            let e = exps
                .split(',')
                .map(|t| t.trim().parse::<u32>().map_err(|_| err("bad exponent")))
                .collect::<Result<Vec<_>>>()?;
            let c = coefs
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| err("bad coefficient")))
                .collect::<Result<Vec<_>>>()?;
            terms.push((e, c));
        }
        Self::from_terms(dim, width, terms)
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn block_widths(b: &PolyBlock) -> usize {
    match &b.params {
        BlockParams::Ccp(p) => p.rank(),
        BlockParams::Ncp(p) => p.rank().max(p.aux_dim()),
        BlockParams::NcpSkip(p) => p.ncp.rank().max(p.ncp.aux_dim()),
        BlockParams::Simple(p) => p.op.cols(),
    }
    .max(b.input_dim())
    .max(b.output_dim())
}

/// Upper bound on the coefficients stored at any stage of expanding `chain`.
pub fn expansion_bound(chain: &PolyChain) -> u128 {
    let d = chain.input_dim() as u128;
    let mut degree = 1u128;
    let mut worst = 0u128;
    for b in &chain.blocks {
        degree = degree.saturating_mul(b.order() as u128);
        let monomials = binomial(d.saturating_add(degree), degree);
        worst = worst.max(monomials.saturating_mul(block_widths(b) as u128));
    }
    worst
}

fn expand_on(block: &PolyBlock, y: &MultiPoly) -> Result<MultiPoly> {
    if !block.norm.is_none() {
        return Err(OracleError::NotPolynomial(format!(
            "{} block with {} normalization",
            block.variant(),
            block.norm.mode
        )));
    }
    let out = match &block.params {
        BlockParams::Ccp(p) => {
            let mut x = y.linear_map_t(&p.input_proj[0])?;
            for u in &p.input_proj[1..] {
                x = y.linear_map_t(u)?.hadamard(&x)?.add(&x)?;
            }
            x.linear_map(&p.readout)?
        }
        BlockParams::Ncp(p) => ncp_expand(p, None, y)?.linear_map(&p.readout)?,
        BlockParams::NcpSkip(p) => ncp_expand(&p.ncp, Some(&p.skip), y)?.linear_map(&p.ncp.readout)?,
        BlockParams::Simple(p) => {
            let h = y.linear_map_t(&p.op)?;
            let mut acc = h.clone();
            let mut power = h.clone();
            for _ in 2..=p.order {
                power = power.hadamard(&h)?;
                acc = acc.add(&power)?;
            }
            acc
        }
    };
    out.add_constant(block.bias().data())
}

fn ncp_expand(p: &NcpParams, skip: Option<&[DenseTensor]>, y: &MultiPoly) -> Result<MultiPoly> {
    let aux = |i: usize| -> Result<MultiPoly> {
        let v = p.aux_proj[i].t_matvec(p.aux[i].data())?;
        Ok(MultiPoly::constant(y.dim(), &v))
    };
    let mut x = y.linear_map_t(&p.input_proj[0])?.hadamard(&aux(0)?)?;
    for i in 1..p.order() {
        let inner = x.linear_map_t(&p.state_proj[i - 1])?.add(&aux(i)?)?;
        let term = y.linear_map_t(&p.input_proj[i])?.hadamard(&inner)?;
        x = match skip {
            Some(v) => term.add(&x.linear_map(&v[i - 1])?)?,
            None => term,
        };
    }
    Ok(x)
}

/// Exact expansion of a chain into monomial form.
pub fn symbolic_expand(chain: &PolyChain) -> Result<MultiPoly> {
    let needed = expansion_bound(chain);
    if needed > COEFFICIENT_BUDGET as u128 {
        return Err(OracleError::BudgetExceeded {
            needed,
            bound: COEFFICIENT_BUDGET,
        });
    }
    let mut y = MultiPoly::variables(chain.input_dim());
    for b in &chain.blocks {
        y = expand_on(b, &y)?;
    }
    y.prune();
    Ok(y)
}

pub fn symbolic_expand_block(block: &PolyBlock) -> Result<MultiPoly> {
    symbolic_expand(&PolyChain::single(block.clone()))
}

/// Bias and weight tensors of the explicit model: `weights[n-1]` is `W[n]`
/// with shape `o x d x ... x d` (n trailing modes).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensorSet {
    pub bias: Vec<f64>,
    pub weights: Vec<DenseTensor>,
}

impl WeightTensorSet {
    pub fn validate(&self) -> Result<()> {
        let o = self.bias.len();
        let d = self.weights.first().map_or(0, |w| w.shape().get(1).copied().unwrap_or(0));
        for (i, w) in self.weights.iter().enumerate() {
            let n = i + 1;
            let mut expect = vec![o];
            expect.extend(std::iter::repeat_n(d, n));
            if w.shape() != expect.as_slice() {
                return Err(OracleError::Tensor(TensorError::ShapeMismatch {
                    op: "weight tensor",
                    expected: format!("{expect:?}"),
                    found: format!("{:?}", w.shape()),
                }));
            }
        }
        Ok(())
    }
}

/// `β + Σ_n W[n] ×_2 z ×_3 z ... ×_{n+1} z`.
pub fn explicit_eval(w: &WeightTensorSet, z: &[f64]) -> Result<Vec<f64>> {
    w.validate()?;
    let mut out = w.bias.clone();
    for (i, t) in w.weights.iter().enumerate() {
        let copies: Vec<&[f64]> = vec![z; i + 1];
        let v = multi_mode_product(t, 2, &copies)?;
        for (o, x) in out.iter_mut().zip(v.data()) {
            *o += x;
        }
    }
    Ok(out)
}

fn check_order3(n: usize) -> Result<()> {
    if n != 3 {
        return Err(OracleError::UnsupportedOrder { expected: 3, found: n });
    }
    Ok(())
}

/// `C Mᵀ` refolded to `shape`.
fn readout_fold(c: &DenseTensor, m: &DenseTensor, shape: &[usize]) -> Result<DenseTensor> {
    Ok(fold_mode1(&c.matmul(&m.transpose()?)?, shape)?)
}

/// Explicit third-order CCP tensors:
/// `W[1] = C U1ᵀ`, `W[2]_(1) = C (U3 ⊙ U1)ᵀ + C (U2 ⊙ U1)ᵀ`,
/// `W[3]_(1) = C (U3 ⊙ U2 ⊙ U1)ᵀ`.
pub fn build_ccp_tensors(p: &CcpParams) -> Result<WeightTensorSet> {
    p.validate()?;
    check_order3(p.order())?;
    let (o, d) = (p.output_dim(), p.input_dim());
    let u = &p.input_proj;
    let w1 = p.readout.matmul(&u[0].transpose()?)?;
    let w2 = readout_fold(&p.readout, &khatri_rao(&u[2], &u[0])?, &[o, d, d])?
        .add(&readout_fold(&p.readout, &khatri_rao(&u[1], &u[0])?, &[o, d, d])?)?;
    let w3 = readout_fold(&p.readout, &khatri_rao(&khatri_rao(&u[2], &u[1])?, &u[0])?, &[o, d, d, d])?;
    Ok(WeightTensorSet {
        bias: p.bias.data().to_vec(),
        weights: vec![w1, w2, w3],
    })
}

/// Explicit third-order NCP tensors. The auxiliary vector paired with order
/// `n` is `b[N+1-n]`:
///
/// * order 1: `C (A3 ⊙ B3)ᵀ`, contracted with `b3`;
/// * order 2: `C {A3 ⊙ [(A2 ⊙ B2) S3]}ᵀ`, contracted with `b2`;
/// * order 3: `C {A3 ⊙ [(A2 ⊙ {(A1 ⊙ B1) S2}) S3]}ᵀ`, contracted with `b1`.
///
/// Each unfolded matrix is refolded to `o x ω x d x ... x d` (the ω mode
/// fastest) before its ω mode is contracted away.
pub fn build_ncp_tensors(p: &NcpParams) -> Result<WeightTensorSet> {
    p.validate()?;
    check_order3(p.order())?;
    let (o, d, w) = (p.output_dim(), p.input_dim(), p.aux_dim());
    let (a, b, s) = (&p.input_proj, &p.aux_proj, &p.state_proj);
    let contract = |m: DenseTensor, n: usize, aux: &DenseTensor| -> Result<DenseTensor> {
        let mut shape = vec![o, w];
        shape.extend(std::iter::repeat_n(d, n));
        Ok(mode_m_product(&readout_fold(&p.readout, &m, &shape)?, aux.data(), 2)?)
    };
    let first = khatri_rao(&a[2], &b[2])?;
    let second = khatri_rao(&a[2], &khatri_rao(&a[1], &b[1])?.matmul(&s[1])?)?;
    let nested = khatri_rao(&a[1], &khatri_rao(&a[0], &b[0])?.matmul(&s[0])?)?.matmul(&s[1])?;
    let third = khatri_rao(&a[2], &nested)?;
    Ok(WeightTensorSet {
        bias: p.bias.data().to_vec(),
        weights: vec![contract(first, 1, &p.aux[2])?, contract(second, 2, &p.aux[1])?, contract(third, 3, &p.aux[0])?],
    })
}

/// Explicit tensors for a single unnormalized third-order CCP or NCP block,
/// `None` for anything else.
pub fn explicit_tensors_for(chain: &PolyChain) -> Result<Option<WeightTensorSet>> {
    if chain.blocks.len() != 1 || chain.has_norm() {
        return Ok(None);
    }
    let b = &chain.blocks[0];
    if b.order() != 3 {
        return Ok(None);
    }
    match &b.params {
        BlockParams::Ccp(p) => build_ccp_tensors(p).map(Some),
        BlockParams::Ncp(p) => build_ncp_tensors(p).map(Some),
        _ => Ok(None),
    }
}

/// `‖f - g‖∞ / max(‖f‖∞, ‖g‖∞, 1e-12)`.
pub fn relative_deviation(f: &[f64], g: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = f.iter().zip(g).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(f).max(inf(g)).max(1e-12)
}

/// Worker count from `PINET_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("PINET_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Trial input: `z` uniform on `[-1, 1]^dim` from substream `trial` of `seed`.
pub fn trial_input(seed: u64, trial: usize, dim: usize) -> Vec<f64> {
    rng::uniform_vec(&mut rng::substream(seed, trial as u64), dim, -1.0, 1.0)
}

/// Largest [`relative_deviation`] between each pair of routes over `trials`
/// seeded inputs. Entry `[i][j]` (i < j) compares `routes[i]` with
/// `routes[j]`. Trials are spread over [`worker_count`] threads; the result
/// does not depend on the thread count.
pub fn max_route_deviations<F>(dim: usize, trials: usize, seed: u64, routes: &[F]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let r = routes.len();
    let run = |range: std::ops::Range<usize>| -> Result<Vec<Vec<f64>>> {
        let mut worst = vec![vec![0.0f64; r]; r];
        for t in range {
            let z = trial_input(seed, t, dim);
            let outs = routes.iter().map(|f| f(&z)).collect::<Result<Vec<_>>>()?;
            for i in 0..r {
                for j in i + 1..r {
                    let dev = relative_deviation(&outs[i], &outs[j]);
                    // NaN must never read as agreement.
                    worst[i][j] = if dev.is_nan() { f64::INFINITY } else { worst[i][j].max(dev) };
                }
            }
        }
        Ok(worst)
    };
    let workers = worker_count().min(trials.max(1));
    let chunk = trials.div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(trials);
                let hi = ((w + 1) * chunk).min(trials);
                s.spawn(move || run(lo..hi))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut worst = vec![vec![0.0f64; r]; r];
    for part in parts {
        let part = part?;
        for i in 0..r {
            for j in 0..r {
                worst[i][j] = worst[i][j].max(part[i][j]);
            }
        }
    }
    Ok(worst)
}

/// Outcome of one comparison route.
#[derive(Debug, Clone, PartialEq)]
pub enum RouteOutcome {
    Checked(f64),
    Skipped(String),
}

impl RouteOutcome {
    pub fn deviation(&self) -> Option<f64> {
        match self {
            RouteOutcome::Checked(d) => Some(*d),
            RouteOutcome::Skipped(_) => None,
        }
    }
}

impl fmt::Display for RouteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteOutcome::Checked(d) => write!(f, "{d:e}"),
            RouteOutcome::Skipped(why) => write!(f, "skipped ({why})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub tol: f64,
    pub recursive_vs_symbolic: RouteOutcome,
    pub recursive_vs_explicit: RouteOutcome,
    pub symbolic_vs_explicit: RouteOutcome,
    pub max_deviation: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let kv = |r: &RouteOutcome| r.deviation().map_or("skipped".to_string(), |d| format!("{d:e}"));
        format!(
            "trials={}\ntol={:e}\nrecursive_vs_symbolic={}\nrecursive_vs_explicit={}\nsymbolic_vs_explicit={}\nmax_deviation={:e}\npassed={}\n",
            self.trials,
            self.tol,
            kv(&self.recursive_vs_symbolic),
            kv(&self.recursive_vs_explicit),
            kv(&self.symbolic_vs_explicit),
            self.max_deviation,
            self.passed
        )
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "equivalence over {} trials (tol {:e})", self.trials, self.tol)?;
        writeln!(f, "  recursive vs symbolic: {}", self.recursive_vs_symbolic)?;
        writeln!(f, "  recursive vs explicit: {}", self.recursive_vs_explicit)?;
        writeln!(f, "  symbolic vs explicit:  {}", self.symbolic_vs_explicit)?;
        writeln!(f, "  max deviation: {:e}", self.max_deviation)?;
        write!(f, "  {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Compares the recursive forward with the symbolic expansion and, for a
/// single third-order CCP/NCP block, the explicit tensor model, on `trials`
/// inputs drawn from `seed`. A route whose expansion exceeds the budget is
/// reported as skipped and does not fail the check.
pub fn equivalence_check(chain: &PolyChain, trials: usize, tol: f64, seed: u64) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(OracleError::InvalidArgument("trials must be at least 1".into()));
    }
    let symbolic = match symbolic_expand(chain) {
        Ok(p) => Ok(p),
        Err(OracleError::BudgetExceeded { needed, bound }) => Err(format!("needs {needed} coefficients, budget {bound}")),
        Err(e) => return Err(e),
    };
    let explicit = explicit_tensors_for(chain)?;

    type Route<'a> = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a>;
    let mut routes: Vec<Route> = vec![Box::new(|z| Ok(chain.forward(z)?))];
    if let Ok(p) = &symbolic {
        routes.push(Box::new(move |z| p.eval(z)));
    }
    if let Some(w) = &explicit {
        routes.push(Box::new(move |z| explicit_eval(w, z)));
    }
    let dev = max_route_deviations(chain.input_dim(), trials, seed, &routes)?;

    let skip_sym = |why: &str| RouteOutcome::Skipped(why.to_string());
    let no_explicit = "explicit tensors exist only for a single order-3 CCP/NCP block";
    let explicit_idx = if symbolic.is_ok() { 2 } else { 1 };
    let (rs, re, se) = match (&symbolic, &explicit) {
        (Ok(_), Some(_)) => (RouteOutcome::Checked(dev[0][1]), RouteOutcome::Checked(dev[0][2]), RouteOutcome::Checked(dev[1][2])),
        (Ok(_), None) => (RouteOutcome::Checked(dev[0][1]), skip_sym(no_explicit), skip_sym(no_explicit)),
        (Err(why), Some(_)) => (skip_sym(why), RouteOutcome::Checked(dev[0][explicit_idx]), skip_sym(why)),
        (Err(why), None) => (skip_sym(why), skip_sym(no_explicit), skip_sym(why)),
    };
    let max_deviation = [&rs, &re, &se].iter().filter_map(|r| r.deviation()).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        trials,
        tol,
        recursive_vs_symbolic: rs,
        recursive_vs_explicit: re,
        symbolic_vs_explicit: se,
        max_deviation,
        passed: max_deviation <= tol,
    })
}

/// Outputs at `z0 + i h v` for `i = 0..count`.
pub fn probe_line(model: &impl PolyModel, z0: &[f64], v: &[f64], h: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .map(|i| {
            let t = i as f64 * h;
            let z: Vec<f64> = z0.iter().zip(v).map(|(a, b)| a + t * b).collect();
            Ok(model.forward(&z)?)
        })
        .collect()
}

/// `order`-th forward difference at the first sample.
pub fn finite_difference(samples: &[f64], order: usize) -> f64 {
    let mut d = samples[..=order].to_vec();
    for k in 0..order {
        for i in 0..order - k {
            d[i] = d[i + 1] - d[i];
        }
    }
    d[0]
}

/// Probe step along the line.
pub const PROBE_STEP: f64 = 0.5;
/// Relative threshold under which a difference or coefficient counts as zero.
pub const PROBE_REL: f64 = 1e-8;
/// Highest probe limit served by equispaced forward differences. The D-th
/// difference of a degree-D polynomial is about `D! / (D+1)^D` of the sample
/// scale (2e-11 at D = 27), so beyond this limit it drowns under
/// [`PROBE_REL`] and Chebyshev sampling is used instead.
pub const MAX_DIFFERENCE_PROBE: usize = 12;
/// Chebyshev coefficient threshold, relative to the sample scale. A
/// degree-D term contributes at least `2^{1-D}` of its own size to the top
/// coefficient (1.5e-8 at D = 27) while rounding noise sits near 1e-15.
pub const CHEBYSHEV_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMethod {
    ForwardDifference,
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDegree {
    Degree(usize),
    ExceedsProbe,
}

impl fmt::Display for ProbeDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeDegree::Degree(d) => write!(f, "{d}"),
            ProbeDegree::ExceedsProbe => f.write_str("exceeds probe"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeReport {
    pub method: ProbeMethod,
    pub max_probe: usize,
    pub per_output: Vec<ProbeDegree>,
}

impl DegreeReport {
    /// Largest degree over outputs; `None` if any output exceeds the probe.
    pub fn degree(&self) -> Option<usize> {
        self.per_output
            .iter()
            .map(|d| match d {
                ProbeDegree::Degree(n) => Some(*n),
                ProbeDegree::ExceedsProbe => None,
            })
            .try_fold(0, |m, d| d.map(|d| m.max(d)))
    }

    pub fn to_kv(&self) -> String {
        let per: Vec<String> = self.per_output.iter().map(|d| d.to_string()).collect();
        format!(
            "method={}\nmax_probe={}\ndegrees={}\ndegree={}\n",
            match self.method {
                ProbeMethod::ForwardDifference => "forward-difference",
                ProbeMethod::Chebyshev => "chebyshev",
            },
            self.max_probe,
            per.join(","),
            self.degree().map_or("exceeds probe".into(), |d| d.to_string())
        )
    }
}

/// Degree of `t ↦ model(z0 + t v)` per output coordinate.
///
/// For `max_probe <= MAX_DIFFERENCE_PROBE` the degree is the smallest `D`
/// such that every forward difference of order `D+1 ..= max_probe+1` at step
/// [`PROBE_STEP`] is below `PROBE_REL * scale`, with `scale` the largest
/// output magnitude over the probe points. Higher limits sample `t ∈ [-R, R]`, `R = (max_probe+1) h / 2`,
/// at `max_probe + 2` Chebyshev nodes and report the highest Chebyshev
/// coefficient above `CHEBYSHEV_REL * scale`.
pub fn degree_check(model: &impl PolyModel, z0: &[f64], v: &[f64], max_probe: usize) -> Result<DegreeReport> {
    let method = if max_probe <= MAX_DIFFERENCE_PROBE {
        ProbeMethod::ForwardDifference
    } else {
        ProbeMethod::Chebyshev
    };
    degree_check_with(model, z0, v, max_probe, method)
}

pub fn degree_check_with(model: &impl PolyModel, z0: &[f64], v: &[f64], max_probe: usize, method: ProbeMethod) -> Result<DegreeReport> {
    if z0.len() != model.input_dim() || v.len() != model.input_dim() {
        return Err(OracleError::InvalidArgument(format!("probe point and direction must have dimension {}", model.input_dim())));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(OracleError::InvalidArgument(format!("direction must have unit norm, has {norm}")));
    }
    let count = max_probe + 2;
    let per_output = match method {
        ProbeMethod::ForwardDifference => {
            let samples = probe_line(model, z0, v, PROBE_STEP, count)?;
            (0..model.output_dim())
                .map(|j| {
                    let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                    forward_difference_degree(&col, max_probe)
                })
                .collect()
        }
        ProbeMethod::Chebyshev => {
            let radius = 0.5 * (count - 1) as f64 * PROBE_STEP;
            let nodes: Vec<f64> = (0..count)
                .map(|i| radius * (std::f64::consts::PI * (i as f64 + 0.5) / count as f64).cos())
                .collect();
            let samples = nodes
                .iter()
                .map(|&t| {
                    let z: Vec<f64> = z0.iter().zip(v).map(|(a, b)| a + t * b).collect();
                    model.forward(&z)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (0..model.output_dim())
                .map(|j| {
                    let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                    chebyshev_degree(&col)
                })
                .collect()
        }
    };
    Ok(DegreeReport {
        method,
        max_probe,
        per_output,
    })
}

fn forward_difference_degree(col: &[f64], max_probe: usize) -> ProbeDegree {
    let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return ProbeDegree::Degree(0);
    }
    // Scan from the top: the degree is the highest order whose difference
    // is significant, so a lower difference that happens to be small at the
    // start of the line cannot cut the answer short.
    match (1..=max_probe + 1).rev().find(|&m| finite_difference(col, m).abs() >= PROBE_REL * scale) {
        Some(m) if m == max_probe + 1 => ProbeDegree::ExceedsProbe,
        Some(m) => ProbeDegree::Degree(m),
        None => ProbeDegree::Degree(0),
    }
}

/// Chebyshev coefficients from values at the first-kind nodes; the
/// interpolant of `n` samples has degree at most `n - 1`, so a nonzero top
/// coefficient means the probe was too short.
fn chebyshev_degree(col: &[f64]) -> ProbeDegree {
    let n = col.len();
    let coef: Vec<f64> = (0..n)
        .map(|m| {
            let mut s = Compensated::default();
            for (i, &f) in col.iter().enumerate() {
                s.add(f * (std::f64::consts::PI * m as f64 * (i as f64 + 0.5) / n as f64).cos());
            }
            s.value() * 2.0 / n as f64
        })
        .collect();
    let scale = col.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return ProbeDegree::Degree(0);
    }
    let deg = (0..n).rev().find(|&m| coef[m].abs() > CHEBYSHEV_REL * scale).unwrap_or(0);
    if deg == n - 1 {
        ProbeDegree::ExceedsProbe
    } else {
        ProbeDegree::Degree(deg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynet::{
        ccp_forward, init_params_with, ncp_forward, BlockSpec, InitScheme, ModelSpec, NcpSkipParams, NormalizationSpec,
        SimpleSingleOpParams, Variant,
    };
    use proptest::prelude::*;

    fn chain(variant: Variant, n: usize, d: usize, k: usize, o: usize, seed: u64) -> PolyChain {
        init_params_with(&ModelSpec::single(d, BlockSpec::new(variant, n, k, o), 0), seed, InitScheme::Gaussian(1.0)).unwrap()
    }

    fn nested_loop_eval(w: &WeightTensorSet, z: &[f64]) -> Vec<f64> {
        let mut out = w.bias.clone();
        for t in &w.weights {
            let n = t.order() - 1;
            let d = z.len();
            let mut idx = vec![0usize; n];
            loop {
                let zprod: f64 = idx.iter().map(|&i| z[i]).product();
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut full = vec![o];
                    full.extend(&idx);
                    *slot += t.get(&full) * zprod;
                }
                let mut p = n;
                loop {
                    if p == 0 {
                        break;
                    }
                    p -= 1;
                    idx[p] += 1;
                    if idx[p] < d {
                        break;
                    }
                    idx[p] = 0;
                    if p == 0 {
                        p = usize::MAX;
                        break;
                    }
                }
                if p == usize::MAX || n == 0 {
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn explicit_eval_cases() {
        let z = [0.7, -0.3];
        let zero = WeightTensorSet {
            bias: vec![1.5],
            weights: vec![DenseTensor::zeros(&[1, 2]), DenseTensor::zeros(&[1, 2, 2])],
        };
        assert_eq!(explicit_eval(&zero, &z).unwrap(), vec![1.5]);
        let lin = WeightTensorSet {
            bias: vec![1.0],
            weights: vec![DenseTensor::matrix(1, 2, vec![2.0, 4.0]).unwrap()],
        };
        assert_eq!(explicit_eval(&lin, &z).unwrap(), vec![1.0 + 1.4 - 1.2]);

        let mut rng = rng::stream(5);
        let mut g = |shape: &[usize]| DenseTensor::from_fn(shape, |_| rng::normal(&mut rng, 1.0));
        let w = WeightTensorSet {
            bias: vec![0.3, -0.2],
            weights: vec![g(&[2, 2]), g(&[2, 2, 2]), g(&[2, 2, 2, 2])],
        };
        let a = explicit_eval(&w, &z).unwrap();
        let b = nested_loop_eval(&w, &z);
        assert!(crate::tensor::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn ccp_tensor_hand_cases() {
        let one = || DenseTensor::ones(&[1, 1]);
        let p = CcpParams::new(vec![one(), one(), one()], DenseTensor::matrix(1, 1, vec![2.5]).unwrap(), DenseTensor::vector(vec![0.0])).unwrap();
        let w = build_ccp_tensors(&p).unwrap();
        assert_eq!(w.weights[1].data(), &[5.0]);

        let BlockParams::Ccp(mut p) = chain(Variant::Ccp, 3, 2, 2, 1, 3).blocks.remove(0).params else { unreachable!() };
        p.input_proj[2] = DenseTensor::zeros(&[2, 2]);
        let w = build_ccp_tensors(&p).unwrap();
        assert!(w.weights[2].data().iter().all(|&x| x == 0.0));
        let only = fold_mode1(&p.readout.matmul(&khatri_rao(&p.input_proj[1], &p.input_proj[0]).unwrap().transpose().unwrap()).unwrap(), &[1, 2, 2]).unwrap();
        assert_eq!(w.weights[1], only);

        let BlockParams::Ccp(p2) = chain(Variant::Ccp, 2, 2, 2, 1, 3).blocks.remove(0).params else { unreachable!() };
        assert!(matches!(build_ccp_tensors(&p2), Err(OracleError::UnsupportedOrder { .. })));
    }

    #[test]
    fn ccp_tensors_match_forward() {
        for seed in 0..5 {
            let BlockParams::Ccp(p) = chain(Variant::Ccp, 3, 2, 2, 1, seed).blocks.remove(0).params else { unreachable!() };
            let w = build_ccp_tensors(&p).unwrap();
            for t in 0..100 {
                let z = trial_input(seed, t, 2);
                let dev = relative_deviation(&explicit_eval(&w, &z).unwrap(), &ccp_forward(&p, &z).unwrap());
                assert!(dev < 1e-10, "{dev}");
            }
        }
    }

    #[test]
    fn ncp_tensors_match_forward() {
        for seed in 0..5 {
            let BlockParams::Ncp(p) = chain(Variant::Ncp, 3, 2, 2, 1, seed).blocks.remove(0).params else { unreachable!() };
            let w = build_ncp_tensors(&p).unwrap();
            for t in 0..100 {
                let z = trial_input(seed, t, 2);
                let dev = relative_deviation(&explicit_eval(&w, &z).unwrap(), &ncp_forward(&p, &z).unwrap());
                assert!(dev < 1e-10, "{dev}");
            }
        }
    }

    #[test]
    fn ncp_with_zero_state_and_zero_aux() {
        let mut c = chain(Variant::Ncp, 3, 2, 2, 1, 8);
        let BlockParams::Ncp(p) = &mut c.blocks[0].params else { unreachable!() };
        for s in &mut p.state_proj {
            *s = DenseTensor::zeros(&[2, 2]);
        }
        let w = build_ncp_tensors(p).unwrap();
        // With S = 0 only the last step survives: C[(A3ᵀz) * (B3ᵀb3)] + β.
        let poly = symbolic_expand(&c).unwrap();
        assert_eq!(poly.total_degree(), 1);
        assert!(w.weights[1].data().iter().all(|&x| x == 0.0));
        assert!(w.weights[2].data().iter().all(|&x| x == 0.0));

        let mut c = chain(Variant::Ncp, 3, 2, 2, 1, 8);
        let BlockParams::Ncp(p) = &mut c.blocks[0].params else { unreachable!() };
        for b in &mut p.aux {
            *b = DenseTensor::zeros(&[2]);
        }
        let poly = symbolic_expand(&c).unwrap();
        assert!(poly.terms().all(|(e, _)| e.iter().all(|&x| x == 0)));
        let beta = c.blocks[0].bias().data().to_vec();
        assert_eq!(c.forward(&[0.4, -0.9]).unwrap(), beta);
    }

    #[test]
    fn ccp_order_one_expansion_is_affine() {
        let c = chain(Variant::Ccp, 1, 3, 2, 2, 1);
        let BlockParams::Ccp(p) = &c.blocks[0].params else { unreachable!() };
        let poly = symbolic_expand(&c).unwrap();
        let cu = p.readout.matmul(&p.input_proj[0].transpose().unwrap()).unwrap();
        assert_eq!(poly.len(), 4);
        assert_eq!(poly.coefficient(&[0, 0, 0]).unwrap(), p.bias.data());
        for i in 0..3 {
            let mut e = vec![0; 3];
            e[i] = 1;
            let got = poly.coefficient(&e).unwrap();
            assert!(crate::tensor::max_abs_diff(got, &cu.column(i)) < 1e-15);
        }
    }

    #[test]
    fn ccp_scalar_hand_expansion() {
        let s = |v: f64| DenseTensor::matrix(1, 1, vec![v]).unwrap();
        let p = CcpParams::new(vec![s(1.5), s(-2.0)], s(3.0), DenseTensor::vector(vec![0.0])).unwrap();
        let c = PolyChain::single(PolyBlock::new(BlockParams::Ccp(p), NormalizationSpec::none()).unwrap());
        let poly = symbolic_expand(&c).unwrap();
        assert_eq!(poly.to_table(), "(1) -> [4.5]\n(2) -> [-9]\n");
    }

    #[test]
    fn every_variant_expands_exactly() {
        for variant in [Variant::Ccp, Variant::Ncp, Variant::NcpSkip, Variant::Simple] {
            for n in 1..=5 {
                for d in 1..=3 {
                    let c = chain(variant, n, d, 3, 2, (n * 10 + d) as u64);
                    let report = equivalence_check(&c, 200, 1e-9, 7).unwrap();
                    assert!(report.passed, "{variant} N={n} d={d}: {report}");
                    let poly = symbolic_expand(&c).unwrap();
                    assert_eq!(poly.total_degree(), n, "{variant} N={n} d={d}");
                }
            }
        }
    }

    #[test]
    fn equivalence_check_reports_three_routes() {
        let c = chain(Variant::Ncp, 3, 3, 3, 2, 2);
        let r = equivalence_check(&c, 50, 1e-9, 1).unwrap();
        assert!(r.passed, "{r}");
        for route in [&r.recursive_vs_symbolic, &r.recursive_vs_explicit, &r.symbolic_vs_explicit] {
            assert!(matches!(route, RouteOutcome::Checked(_)));
        }
        assert!(r.to_kv().contains("passed=true"));
        let r = equivalence_check(&chain(Variant::Ccp, 2, 2, 2, 1, 0), 5, 1e-9, 1).unwrap();
        assert!(matches!(r.recursive_vs_explicit, RouteOutcome::Skipped(_)));
        assert!(equivalence_check(&c, 0, 1e-9, 1).is_err());
    }

    #[test]
    fn linear_model_deviation_is_tiny() {
        let c = chain(Variant::Ccp, 1, 3, 2, 2, 4);
        let r = equivalence_check(&c, 100, 1e-9, 0).unwrap();
        assert!(r.max_deviation < 1e-14, "{r}");
    }

    #[test]
    fn corrupted_tensor_is_caught() {
        let c = chain(Variant::Ccp, 3, 2, 2, 1, 6);
        let BlockParams::Ccp(p) = &c.blocks[0].params else { unreachable!() };
        let mut w = build_ccp_tensors(p).unwrap();
        w.weights[1].data_mut()[1] += 0.5;
        let routes: Vec<Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync>> =
            vec![Box::new(|z| Ok(c.forward(z)?)), Box::new(|z| explicit_eval(&w, z))];
        let dev = max_route_deviations(2, 20, 3, &routes).unwrap();
        assert!(dev[0][1] > 1e-3);
    }

    #[test]
    fn deviations_do_not_depend_on_thread_count() {
        let c = chain(Variant::NcpSkip, 3, 2, 2, 2, 6);
        let p = symbolic_expand(&c).unwrap();
        let routes: Vec<Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync>> = vec![Box::new(|z| Ok(c.forward(z)?)), Box::new(|z| p.eval(z))];
        let one = max_route_deviations(2, 37, 3, &routes).unwrap();
        // Same computation split by hand into three chunks.
        let mut merged = 0.0f64;
        for t in 0..37 {
            let z = trial_input(3, t, 2);
            merged = merged.max(relative_deviation(&c.forward(&z).unwrap(), &p.eval(&z).unwrap()));
        }
        assert_eq!(one[0][1], merged);
    }

    #[test]
    fn normalized_blocks_are_not_polynomials() {
        let mut c = chain(Variant::Ccp, 2, 2, 2, 1, 0);
        c.blocks[0].norm = NormalizationSpec::tanh();
        assert!(matches!(symbolic_expand(&c), Err(OracleError::NotPolynomial(_))));
    }

    #[test]
    fn budget_guard_names_the_bound() {
        let spec = ModelSpec {
            input_dim: 6,
            blocks: vec![BlockSpec::new(Variant::Ccp, 5, 2, 6), BlockSpec::new(Variant::Ccp, 5, 2, 1)],
            inner_bias: false,
            seed: 0,
        };
        let c = init_params_with(&spec, 0, InitScheme::Gaussian(1.0)).unwrap();
        let err = symbolic_expand(&c).unwrap_err();
        assert!(matches!(err, OracleError::BudgetExceeded { bound: COEFFICIENT_BUDGET, .. }));
        assert!(err.to_string().contains("1000000"));
        let r = equivalence_check(&c, 3, 1e-9, 0).unwrap();
        assert!(matches!(r.recursive_vs_symbolic, RouteOutcome::Skipped(_)));
    }

    #[test]
    fn simple_model_expansion() {
        let p = SimpleSingleOpParams {
            order: 4,
            op: DenseTensor::from_fn(&[2, 2], |i| [0.5, -1.0, 0.25, 2.0][i[0] * 2 + i[1]]),
            bias: DenseTensor::vector(vec![0.1, 0.2]),
        };
        let c = PolyChain::single(PolyBlock::new(BlockParams::Simple(p), NormalizationSpec::none()).unwrap());
        assert_eq!(symbolic_expand(&c).unwrap().total_degree(), 4);
    }

    #[test]
    fn table_round_trip() {
        let c = chain(Variant::Ncp, 2, 2, 2, 2, 9);
        let p = symbolic_expand(&c).unwrap();
        let back = MultiPoly::parse_table(2, 2, &p.to_table()).unwrap();
        assert_eq!(back, p);
        assert!(matches!(MultiPoly::parse_table(2, 2, "(1,0) [1, 2]"), Err(OracleError::Parse { line: 1, .. })));
    }

    #[test]
    fn degree_probe_small_models() {
        let mut rng = rng::stream(12);
        let v = rng::unit_vector(&mut rng, 3);
        let affine = chain(Variant::Ccp, 1, 3, 2, 2, 1);
        assert_eq!(degree_check(&affine, &[0.0; 3], &v, 8).unwrap().degree(), Some(1));
        let cubic = chain(Variant::Ccp, 3, 3, 2, 2, 1);
        let r = degree_check(&cubic, &[0.0; 3], &v, 8).unwrap();
        assert_eq!(r.degree(), Some(3));
        assert_eq!(r.degree(), Some(symbolic_expand(&cubic).unwrap().total_degree()));
        let deep = chain(Variant::Simple, 5, 3, 1, 1, 1);
        assert_eq!(degree_check(&deep, &[0.0; 3], &v, 3).unwrap().per_output, vec![ProbeDegree::ExceedsProbe]);
        assert!(degree_check(&cubic, &[0.0; 3], &[1.0, 1.0, 0.0], 8).is_err());
    }

    #[test]
    fn degree_probe_chains() {
        let spec = |orders: &[usize]| ModelSpec {
            input_dim: 2,
            blocks: orders.iter().map(|&n| BlockSpec::new(Variant::Ncp, n, 2, 2)).collect(),
            inner_bias: true,
            seed: 0,
        };
        let mut rng = rng::stream(2);
        let v = rng::unit_vector(&mut rng, 2);
        for orders in [&[2usize, 2][..], &[3, 3, 3], &[2, 3, 2]] {
            let c = init_params_with(&spec(orders), 4, InitScheme::Gaussian(1.0)).unwrap();
            let expect: usize = orders.iter().product();
            let r = degree_check(&c, &[0.0; 2], &v, expect + 3).unwrap();
            assert_eq!(r.degree(), Some(expect), "{orders:?} via {:?}", r.method);
            assert_eq!(symbolic_expand(&c).unwrap().total_degree(), expect);
        }
    }

    #[test]
    fn both_probes_agree_where_both_apply() {
        let mut rng = rng::stream(21);
        let v = rng::unit_vector(&mut rng, 2);
        let c = chain(Variant::NcpSkip, 4, 2, 3, 3, 5);
        let fd = degree_check_with(&c, &[0.0; 2], &v, 8, ProbeMethod::ForwardDifference).unwrap();
        let ch = degree_check_with(&c, &[0.0; 2], &v, 8, ProbeMethod::Chebyshev).unwrap();
        assert_eq!(fd.per_output, ch.per_output);
        assert_eq!(fd.degree(), Some(4));
    }

    #[test]
    fn forward_difference_of_cubic() {
        let s: Vec<f64> = (0..6).map(|i| (i as f64 * 0.5).powi(3)).collect();
        assert!((finite_difference(&s, 3) - 6.0 * 0.125).abs() < 1e-12);
        assert_eq!(finite_difference(&s, 4), 0.0);
    }

    #[test]
    fn skip_with_zero_skip_expands_like_ncp() {
        let c = chain(Variant::NcpSkip, 3, 2, 2, 1, 17);
        let BlockParams::NcpSkip(p) = &c.blocks[0].params else { unreachable!() };
        let zeroed = NcpSkipParams {
            ncp: p.ncp.clone(),
            skip: p.skip.iter().map(|v| DenseTensor::zeros(v.shape())).collect(),
        };
        let a = PolyChain::single(PolyBlock::new(BlockParams::NcpSkip(zeroed), NormalizationSpec::none()).unwrap());
        let b = PolyChain::single(PolyBlock::new(BlockParams::Ncp(p.ncp.clone()), NormalizationSpec::none()).unwrap());
        assert_eq!(symbolic_expand(&a).unwrap(), symbolic_expand(&b).unwrap());
    }

    proptest! {
        #[test]
        fn expansion_is_linear_in_coefficients(alpha in -4.0f64..4.0, seed in 0u64..50) {
            let p = symbolic_expand(&chain(Variant::Ccp, 2, 2, 2, 1, seed)).unwrap();
            let scaled = p.scale(alpha);
            for ((e1, c1), (e2, c2)) in p.terms().zip(scaled.terms()) {
                prop_assert_eq!(e1, e2);
                for (a, b) in c1.iter().zip(c2) {
                    prop_assert_eq!(a * alpha, *b);
                }
            }
        }

        #[test]
        fn chain_degree_is_multiplicative(n1 in 1usize..=3, n2 in 1usize..=3, d in 1usize..=3, seed in 0u64..1000) {
            let spec = ModelSpec {
                input_dim: d,
                blocks: vec![BlockSpec::new(Variant::Ccp, n1, 2, 2), BlockSpec::new(Variant::Ncp, n2, 2, 1)],
                inner_bias: true,
                seed: 0,
            };
            let c = init_params_with(&spec, seed, InitScheme::Gaussian(1.0)).unwrap();
            let p = symbolic_expand(&c).unwrap();
            prop_assert_eq!(p.total_degree(), n1 * n2);
            for t in 0..5 {
                let z = trial_input(seed, t, d);
                prop_assert!(relative_deviation(&p.eval(&z).unwrap(), &c.forward(&z).unwrap()) < 1e-9);
            }
        }
    }
}

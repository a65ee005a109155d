//! Polynomial network blocks and their recursive forward passes.
//!
//! Three factorized polynomial expansions of order `N` are provided, each a
//! recursion over a rank-`k` state `x_n` followed by the readout
//! `C x_N + bias`:
//!
//! * CCP (coupled CP): `x_1 = U1ᵀz`, `x_n = (Unᵀz) * x_{n-1} + x_{n-1}`.
//! * NCP (nested coupled CP): `x_1 = (A1ᵀz) * (B1ᵀb1)`,
//!   `x_n = (Anᵀz) * (Snᵀ x_{n-1} + Bnᵀbn)`.
//! * NCP-Skip: NCP plus a learned linear skip, `... + Vn x_{n-1}`.
//!
//! A fourth, single-operator block evaluates `Σ_{n=2}^{N} (Sᵀy)^{*n} + Sᵀy + bias`
//! with `^{*n}` the n-fold Hadamard power.
//!
//! Blocks chain into a [`PolyChain`], whose degree is the product of the block
//! orders. [`NormalizationSpec`] optionally squashes (tanh) or standardizes
//! the higher-order terms; with normalization off every model is an exact
//! polynomial of its input.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::standardize_row;
use crate::rng;
use crate::tensor::{hadamard_vec, DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("no tensor named '{0}'")]
    UnknownTensor(String),
}

pub type Result<T> = std::result::Result<T, PolyError>;

fn dim_err(what: impl Into<String>, expected: usize, found: usize) -> PolyError {
    PolyError::Dimension {
        what: what.into(),
        expected,
        found,
    }
}

fn check_input(z: &[f64], dim: usize) -> Result<()> {
    if z.len() != dim {
        return Err(dim_err("input", dim, z.len()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(PolyError::NonFinite("input"));
    }
    Ok(())
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn check_matrix(what: impl Into<String>, m: &DenseTensor, rows: usize, cols: usize) -> Result<()> {
    let what = what.into();
    if m.order() != 2 {
        return Err(dim_err(format!("{what} order"), 2, m.order()));
    }
    if m.rows() != rows {
        return Err(dim_err(format!("{what} rows"), rows, m.rows()));
    }
    if m.cols() != cols {
        return Err(dim_err(format!("{what} cols"), cols, m.cols()));
    }
    Ok(())
}

fn check_vector(what: impl Into<String>, v: &DenseTensor, len: usize) -> Result<()> {
    let what = what.into();
    if v.order() != 1 || v.len() != len {
        return Err(dim_err(what, len, v.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Ccp,
    Ncp,
    NcpSkip,
    Simple,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ccp => "ccp",
            Variant::Ncp => "ncp",
            Variant::NcpSkip => "ncp-skip",
            Variant::Simple => "simple",
        })
    }
}

impl FromStr for Variant {
    type Err = PolyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ccp" => Ok(Variant::Ccp),
            "ncp" => Ok(Variant::Ncp),
            "ncp-skip" | "ncp_skip" | "ncpskip" => Ok(Variant::NcpSkip),
            "simple" => Ok(Variant::Simple),
            other => Err(PolyError::InvalidSpec(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    /// tanh applied to every order-n term with n >= 2.
    TanhHigherOrder,
    /// Per-sample zero-mean/unit-variance scaling of the second-order term
    /// (of every higher-order term for the single-operator block).
    StandardizeSecondOrder,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::None => "none",
            NormMode::TanhHigherOrder => "tanh",
            NormMode::StandardizeSecondOrder => "standardize",
        })
    }
}

impl FromStr for NormMode {
    type Err = PolyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(NormMode::None),
            "tanh" | "tanh-on-higher-order" => Ok(NormMode::TanhHigherOrder),
            "standardize" | "per-sample-standardize-2nd-order" => Ok(NormMode::StandardizeSecondOrder),
            other => Err(PolyError::InvalidSpec(format!("unknown normalization '{other}'"))),
        }
    }
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    pub mode: NormMode,
    pub epsilon: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NormalizationSpec {
    pub const fn none() -> Self {
        Self {
            mode: NormMode::None,
            epsilon: DEFAULT_NORM_EPS,
        }
    }

    pub const fn tanh() -> Self {
        Self {
            mode: NormMode::TanhHigherOrder,
            epsilon: DEFAULT_NORM_EPS,
        }
    }

    pub fn standardize(epsilon: f64) -> Result<Self> {
        let spec = Self {
            mode: NormMode::StandardizeSecondOrder,
            epsilon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == NormMode::StandardizeSecondOrder && !(self.epsilon > 0.0) {
            return Err(PolyError::InvalidSpec(format!(
                "standardization epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.mode == NormMode::None
    }

    /// Whether the order-`n` term of a block of `variant` is normalized.
    pub fn applies_to(&self, n: usize, variant: Variant) -> bool {
        match self.mode {
            NormMode::None => false,
            NormMode::TanhHigherOrder => n >= 2,
            NormMode::StandardizeSecondOrder => n == 2 || (variant == Variant::Simple && n >= 2),
        }
    }

    pub(crate) fn apply(&self, n: usize, variant: Variant, term: Vec<f64>) -> Vec<f64> {
        if !self.applies_to(n, variant) {
            return term;
        }
        match self.mode {
            NormMode::TanhHigherOrder => term.into_iter().map(f64::tanh).collect(),
            NormMode::StandardizeSecondOrder => standardize_row(&term, self.epsilon),
            NormMode::None => term,
        }
    }
}

/// Coupled CP factors: `input_proj[n-1]` is `Un` (d x k), `readout` is
/// `C` (o x k) and `bias` the length-o output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpParams {
    pub input_proj: Vec<DenseTensor>,
    pub readout: DenseTensor,
    pub bias: DenseTensor,
}

impl CcpParams {
    pub fn new(input_proj: Vec<DenseTensor>, readout: DenseTensor, bias: DenseTensor) -> Result<Self> {
        let p = Self {
            input_proj,
            readout,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn order(&self) -> usize {
        self.input_proj.len()
    }

    pub fn rank(&self) -> usize {
        self.readout.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_proj[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_proj.is_empty() {
            return Err(PolyError::InvalidSpec("order must be at least 1".into()));
        }
        check_matrix("readout", &self.readout, self.readout.shape()[0], self.readout.shape().get(1).copied().unwrap_or(0))?;
        let (d, k, o) = (self.input_proj[0].shape()[0], self.rank(), self.output_dim());
        for (n, u) in self.input_proj.iter().enumerate() {
            check_matrix(format!("input_proj.{}", n + 1), u, d, k)?;
        }
        check_vector("bias", &self.bias, o)
    }
}

/// Nested coupled CP factors. `state_proj[n-2]` and (for the skip variant)
/// `skip[n-2]` belong to step `n >= 2`; every other list has one entry per
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct NcpParams {
    /// `An`, d x k.
    pub input_proj: Vec<DenseTensor>,
    /// `Sn`, k x k, steps 2..=N.
    pub state_proj: Vec<DenseTensor>,
    /// `Bn`, ω x k.
    pub aux_proj: Vec<DenseTensor>,
    /// `bn`, length ω.
    pub aux: Vec<DenseTensor>,
    pub readout: DenseTensor,
    pub bias: DenseTensor,
}

impl NcpParams {
    pub fn order(&self) -> usize {
        self.input_proj.len()
    }

    pub fn rank(&self) -> usize {
        self.readout.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_proj[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.rows()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_proj[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.order();
        if n == 0 {
            return Err(PolyError::InvalidSpec("order must be at least 1".into()));
        }
        if self.readout.order() != 2 {
            return Err(dim_err("readout order", 2, self.readout.order()));
        }
        let (d, k, o) = (self.input_proj[0].shape()[0], self.rank(), self.output_dim());
        if self.state_proj.len() != n - 1 {
            return Err(dim_err("state_proj count", n - 1, self.state_proj.len()));
        }
        if self.aux_proj.len() != n || self.aux.len() != n {
            return Err(dim_err("aux count", n, self.aux_proj.len().min(self.aux.len())));
        }
        let w = self.aux_proj[0].shape()[0];
        for i in 0..n {
            check_matrix(format!("input_proj.{}", i + 1), &self.input_proj[i], d, k)?;
            check_matrix(format!("aux_proj.{}", i + 1), &self.aux_proj[i], w, k)?;
            check_vector(format!("aux.{}", i + 1), &self.aux[i], w)?;
        }
        for (i, s) in self.state_proj.iter().enumerate() {
            check_matrix(format!("state_proj.{}", i + 2), s, k, k)?;
        }
        check_vector("bias", &self.bias, o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcpSkipParams {
    pub ncp: NcpParams,
    /// `Vn`, k x k, steps 2..=N; applied as `Vn x_{n-1}`.
    pub skip: Vec<DenseTensor>,
}

impl NcpSkipParams {
    pub fn order(&self) -> usize {
        self.ncp.order()
    }

    pub fn validate(&self) -> Result<()> {
        self.ncp.validate()?;
        let k = self.ncp.rank();
        if self.skip.len() != self.order() - 1 {
            return Err(dim_err("skip count", self.order() - 1, self.skip.len()));
        }
        for (i, v) in self.skip.iter().enumerate() {
            check_matrix(format!("skip.{}", i + 2), v, k, k)?;
        }
        Ok(())
    }
}

/// One shared operator `S` (in x out) raised to Hadamard powers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleSingleOpParams {
    pub order: usize,
    pub op: DenseTensor,
    pub bias: DenseTensor,
}

impl SimpleSingleOpParams {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(PolyError::InvalidSpec("order must be at least 1".into()));
        }
        if self.op.order() != 2 {
            return Err(dim_err("op order", 2, self.op.order()));
        }
        check_vector("bias", &self.bias, self.op.cols())
    }
}

fn readout(c: &DenseTensor, bias: &DenseTensor, x: &[f64]) -> Result<Vec<f64>> {
    Ok(add_vec(&c.matvec(x)?, bias.data()))
}

pub fn ccp_forward(p: &CcpParams, z: &[f64]) -> Result<Vec<f64>> {
    ccp_forward_with(p, &NormalizationSpec::none(), z)
}

pub fn ccp_forward_with(p: &CcpParams, norm: &NormalizationSpec, z: &[f64]) -> Result<Vec<f64>> {
    check_input(z, p.input_dim())?;
    let mut x = p.input_proj[0].t_matvec(z)?;
    for (i, u) in p.input_proj.iter().enumerate().skip(1) {
        let h = u.t_matvec(z)?;
        let term = norm.apply(i + 1, Variant::Ccp, hadamard_vec(&h, &x)?);
        x = add_vec(&term, &x);
    }
    readout(&p.readout, &p.bias, &x)
}

fn ncp_state(p: &NcpParams, skip: Option<&[DenseTensor]>, norm: &NormalizationSpec, variant: Variant, z: &[f64]) -> Result<Vec<f64>> {
    check_input(z, p.input_dim())?;
    let aux_term = |i: usize| p.aux_proj[i].t_matvec(p.aux[i].data());
    let mut x = hadamard_vec(&p.input_proj[0].t_matvec(z)?, &aux_term(0)?)?;
    for i in 1..p.order() {
        let h = p.input_proj[i].t_matvec(z)?;
        let inner = add_vec(&p.state_proj[i - 1].t_matvec(&x)?, &aux_term(i)?);
        let term = norm.apply(i + 1, variant, hadamard_vec(&h, &inner)?);
        x = match skip {
            Some(v) => add_vec(&term, &v[i - 1].matvec(&x)?),
            None => term,
        };
    }
    Ok(x)
}

pub fn ncp_forward(p: &NcpParams, z: &[f64]) -> Result<Vec<f64>> {
    ncp_forward_with(p, &NormalizationSpec::none(), z)
}

pub fn ncp_forward_with(p: &NcpParams, norm: &NormalizationSpec, z: &[f64]) -> Result<Vec<f64>> {
    let x = ncp_state(p, None, norm, Variant::Ncp, z)?;
    readout(&p.readout, &p.bias, &x)
}

pub fn ncp_skip_forward(p: &NcpSkipParams, z: &[f64]) -> Result<Vec<f64>> {
    ncp_skip_forward_with(p, &NormalizationSpec::none(), z)
}

pub fn ncp_skip_forward_with(p: &NcpSkipParams, norm: &NormalizationSpec, z: &[f64]) -> Result<Vec<f64>> {
    let x = ncp_state(&p.ncp, Some(&p.skip), norm, Variant::NcpSkip, z)?;
    readout(&p.ncp.readout, &p.ncp.bias, &x)
}

pub fn simple_single_op_forward(p: &SimpleSingleOpParams, y1: &[f64]) -> Result<Vec<f64>> {
    simple_single_op_forward_with(p, &NormalizationSpec::none(), y1)
}

pub fn simple_single_op_forward_with(p: &SimpleSingleOpParams, norm: &NormalizationSpec, y1: &[f64]) -> Result<Vec<f64>> {
    check_input(y1, p.op.rows())?;
    let h = p.op.t_matvec(y1)?;
    let mut acc = h.clone();
    let mut power = h.clone();
    for n in 2..=p.order {
        power = hadamard_vec(&power, &h)?;
        acc = add_vec(&acc, &norm.apply(n, Variant::Simple, power.clone()));
    }
    Ok(add_vec(&acc, p.bias.data()))
}

/// Residual polynomialization: returns a copy with every skip `Vn = I + Sn`,
/// so step n computes `x + Sn x + (Anᵀz) * (Snᵀx + Bnᵀbn)`.
pub fn polynomialize_residual(p: &NcpSkipParams) -> Result<NcpSkipParams> {
    p.validate()?;
    let k = p.ncp.rank();
    let eye = DenseTensor::identity(k);
    let skip = p
        .ncp
        .state_proj
        .iter()
        .map(|s| eye.add(s).map_err(PolyError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(NcpSkipParams {
        ncp: p.ncp.clone(),
        skip,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams {
    Ccp(CcpParams),
    Ncp(NcpParams),
    NcpSkip(NcpSkipParams),
    Simple(SimpleSingleOpParams),
}

/// Anything that maps an input vector to an output vector.
pub trait PolyModel {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, z: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyBlock {
    pub params: BlockParams,
    pub norm: NormalizationSpec,
}

impl PolyBlock {
    pub fn new(params: BlockParams, norm: NormalizationSpec) -> Result<Self> {
        let b = Self { params, norm };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        match &self.params {
            BlockParams::Ccp(p) => p.validate(),
            BlockParams::Ncp(p) => p.validate(),
            BlockParams::NcpSkip(p) => p.validate(),
            BlockParams::Simple(p) => p.validate(),
        }
    }

    pub fn variant(&self) -> Variant {
        match &self.params {
            BlockParams::Ccp(_) => Variant::Ccp,
            BlockParams::Ncp(_) => Variant::Ncp,
            BlockParams::NcpSkip(_) => Variant::NcpSkip,
            BlockParams::Simple(_) => Variant::Simple,
        }
    }

    pub fn order(&self) -> usize {
        match &self.params {
            BlockParams::Ccp(p) => p.order(),
            BlockParams::Ncp(p) => p.order(),
            BlockParams::NcpSkip(p) => p.order(),
            BlockParams::Simple(p) => p.order,
        }
    }

    pub fn bias(&self) -> &DenseTensor {
        match &self.params {
            BlockParams::Ccp(p) => &p.bias,
            BlockParams::Ncp(p) => &p.bias,
            BlockParams::NcpSkip(p) => &p.ncp.bias,
            BlockParams::Simple(p) => &p.bias,
        }
    }

    /// Copy of this block with normalization switched off.
    pub fn without_norm(&self) -> Self {
        Self {
            params: self.params.clone(),
            norm: NormalizationSpec::none(),
        }
    }

    /// Parameter tensors in canonical order with their names.
    pub fn tensors(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = Vec::new();
        fn indexed<'a>(out: &mut Vec<(String, &'a DenseTensor)>, name: &str, list: &'a [DenseTensor], first: usize) {
            for (i, t) in list.iter().enumerate() {
                out.push((format!("{name}.{}", i + first), t));
            }
        }
        match &self.params {
            BlockParams::Ccp(p) => {
                indexed(&mut out, "input_proj", &p.input_proj, 1);
                out.push(("readout".into(), &p.readout));
                out.push(("bias".into(), &p.bias));
            }
            BlockParams::Ncp(p) | BlockParams::NcpSkip(NcpSkipParams { ncp: p, .. }) => {
                indexed(&mut out, "input_proj", &p.input_proj, 1);
                indexed(&mut out, "state_proj", &p.state_proj, 2);
                indexed(&mut out, "aux_proj", &p.aux_proj, 1);
                indexed(&mut out, "aux", &p.aux, 1);
                if let BlockParams::NcpSkip(s) = &self.params {
                    indexed(&mut out, "skip", &s.skip, 2);
                }
                out.push(("readout".into(), &p.readout));
                out.push(("bias".into(), &p.bias));
            }
            BlockParams::Simple(p) => {
                out.push(("op".into(), &p.op));
                out.push(("bias".into(), &p.bias));
            }
        }
        out
    }

    /// Mutable counterpart of [`PolyBlock::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DenseTensor)> {
        let mut out = Vec::new();
        fn indexed<'a>(out: &mut Vec<(String, &'a mut DenseTensor)>, name: &str, list: &'a mut [DenseTensor], first: usize) {
            for (i, t) in list.iter_mut().enumerate() {
                out.push((format!("{name}.{}", i + first), t));
            }
        }
        match &mut self.params {
            BlockParams::Ccp(p) => {
                indexed(&mut out, "input_proj", &mut p.input_proj, 1);
                out.push(("readout".into(), &mut p.readout));
                out.push(("bias".into(), &mut p.bias));
            }
            BlockParams::Ncp(p) => {
                indexed(&mut out, "input_proj", &mut p.input_proj, 1);
                indexed(&mut out, "state_proj", &mut p.state_proj, 2);
                indexed(&mut out, "aux_proj", &mut p.aux_proj, 1);
                indexed(&mut out, "aux", &mut p.aux, 1);
                out.push(("readout".into(), &mut p.readout));
                out.push(("bias".into(), &mut p.bias));
            }
            BlockParams::NcpSkip(NcpSkipParams { ncp: p, skip }) => {
                indexed(&mut out, "input_proj", &mut p.input_proj, 1);
                indexed(&mut out, "state_proj", &mut p.state_proj, 2);
                indexed(&mut out, "aux_proj", &mut p.aux_proj, 1);
                indexed(&mut out, "aux", &mut p.aux, 1);
                indexed(&mut out, "skip", skip, 2);
                out.push(("readout".into(), &mut p.readout));
                out.push(("bias".into(), &mut p.bias));
            }
            BlockParams::Simple(p) => {
                out.push(("op".into(), &mut p.op));
                out.push(("bias".into(), &mut p.bias));
            }
        }
        out
    }
}

impl PolyModel for PolyBlock {
    fn input_dim(&self) -> usize {
        match &self.params {
            BlockParams::Ccp(p) => p.input_dim(),
            BlockParams::Ncp(p) => p.input_dim(),
            BlockParams::NcpSkip(p) => p.ncp.input_dim(),
            BlockParams::Simple(p) => p.op.rows(),
        }
    }

    fn output_dim(&self) -> usize {
        self.bias().len()
    }

    fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        match &self.params {
            BlockParams::Ccp(p) => ccp_forward_with(p, &self.norm, z),
            BlockParams::Ncp(p) => ncp_forward_with(p, &self.norm, z),
            BlockParams::NcpSkip(p) => ncp_skip_forward_with(p, &self.norm, z),
            BlockParams::Simple(p) => simple_single_op_forward_with(p, &self.norm, z),
        }
    }
}

/// A product of polynomials: each block consumes the previous block's output.
///
/// When `inner_bias` is false the biases of all but the last block are held
/// at zero and excluded from training and parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyChain {
    pub blocks: Vec<PolyBlock>,
    pub inner_bias: bool,
}

impl PolyChain {
    pub fn new(blocks: Vec<PolyBlock>, inner_bias: bool) -> Result<Self> {
        let chain = Self { blocks, inner_bias };
        chain.validate()?;
        Ok(chain)
    }

    pub fn single(block: PolyBlock) -> Self {
        Self {
            blocks: vec![block],
            inner_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(PolyError::InvalidSpec("a chain needs at least one block".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(dim_err(format!("block {} input", i + 1), pair[0].output_dim(), pair[1].input_dim()));
            }
        }
        Ok(())
    }

    /// Product of block orders: the degree of the composite polynomial.
    pub fn nominal_degree(&self) -> usize {
        self.blocks.iter().map(PolyBlock::order).product()
    }

    pub fn has_norm(&self) -> bool {
        self.blocks.iter().any(|b| !b.norm.is_none())
    }

    pub fn without_norm(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(PolyBlock::without_norm).collect(),
            inner_bias: self.inner_bias,
        }
    }

    fn block_prefix(i: usize) -> String {
        format!("block{i}/")
    }

    pub fn is_trainable(&self, block: usize, local_name: &str) -> bool {
        self.inner_bias || block + 1 == self.blocks.len() || local_name != "bias"
    }

    /// All tensors, named `block{i}/{name}`, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &DenseTensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{}{n}", Self::block_prefix(i)), t))
            })
            .collect()
    }

    /// Trainable tensors only, in canonical order.
    pub fn trainable_tensors(&self) -> Vec<(String, &DenseTensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensors()
                    .into_iter()
                    .filter(move |(n, _)| self.is_trainable(i, n))
                    .map(move |(n, t)| (format!("{}{n}", Self::block_prefix(i)), t))
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut DenseTensor)> {
        let last = self.blocks.len() - 1;
        let inner_bias = self.inner_bias;
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensors_mut()
                    .into_iter()
                    .filter(move |(n, _)| inner_bias || i == last || n != "bias")
                    .map(move |(n, t)| (format!("{}{n}", Self::block_prefix(i)), t))
            })
            .collect()
    }

    pub fn all_mut(&mut self) -> Vec<(String, &mut DenseTensor)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensors_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{}{n}", Self::block_prefix(i)), t))
            })
            .collect()
    }

    /// Replaces the tensor `name` with `value` of identical shape.
    pub fn set_tensor(&mut self, name: &str, value: DenseTensor) -> Result<()> {
        for (n, t) in self.all_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(PolyError::Tensor(TensorError::ShapeMismatch {
                        op: "set_tensor",
                        expected: format!("{:?}", t.shape()),
                        found: format!("{:?}", value.shape()),
                    }));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(PolyError::UnknownTensor(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl PolyModel for PolyChain {
    fn input_dim(&self) -> usize {
        self.blocks[0].input_dim()
    }

    fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].output_dim()
    }

    fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut y = z.to_vec();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

/// Shape description of one block; the block's input dimension is implied
/// by its position in a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub variant: Variant,
    pub order: usize,
    /// Rank k; ignored by the single-operator block.
    pub rank: usize,
    /// ω; defaults to the rank.
    pub aux_dim: Option<usize>,
    pub output_dim: usize,
    /// `None` leaves the choice to the caller (see [`ModelSpec::resolve_norm`]).
    pub norm: Option<NormalizationSpec>,
}

impl BlockSpec {
    pub fn new(variant: Variant, order: usize, rank: usize, output_dim: usize) -> Self {
        Self {
            variant,
            order,
            rank,
            aux_dim: None,
            output_dim,
            norm: None,
        }
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim.unwrap_or(self.rank)
    }

    fn count(&self, input_dim: usize, with_bias: bool) -> usize {
        let (n, d, k, o, w) = (self.order, input_dim, self.rank, self.output_dim, self.aux_dim());
        let bias = if with_bias { o } else { 0 };
        match self.variant {
            Variant::Ccp => n * d * k + o * k + bias,
            Variant::Ncp => n * d * k + (n - 1) * k * k + n * w * k + n * w + o * k + bias,
            Variant::NcpSkip => n * d * k + 2 * (n - 1) * k * k + n * w * k + n * w + o * k + bias,
            Variant::Simple => d * o + bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub inner_bias: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn single(input_dim: usize, block: BlockSpec, seed: u64) -> Self {
        Self {
            input_dim,
            blocks: vec![block],
            inner_bias: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(PolyError::InvalidSpec("input dimension d must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(PolyError::InvalidSpec("at least one block is required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.order == 0 {
                return Err(PolyError::InvalidSpec(format!("block {i}: order N must be at least 1")));
            }
            if b.output_dim == 0 {
                return Err(PolyError::InvalidSpec(format!("block {i}: output dimension o must be positive")));
            }
            if b.variant != Variant::Simple && (b.rank == 0 || b.aux_dim() == 0) {
                return Err(PolyError::InvalidSpec(format!("block {i}: rank k and ω must be positive")));
            }
            if let Some(n) = &b.norm {
                n.validate()?;
            }
        }
        Ok(())
    }

    pub fn block_input_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.blocks[i - 1].output_dim
        }
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.output_dim)
    }

    pub fn nominal_degree(&self) -> usize {
        self.blocks.iter().map(|b| b.order).product()
    }

    /// Fills every unset block normalization with `default`.
    pub fn resolve_norm(&mut self, default: NormalizationSpec) {
        for b in &mut self.blocks {
            b.norm.get_or_insert(default);
        }
    }
}

/// Number of learnable scalars described by `spec`.
pub fn count_params(spec: &ModelSpec) -> usize {
    let last = spec.blocks.len().saturating_sub(1);
    spec.blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.count(spec.block_input_dim(i), spec.inner_bias || i == last))
        .sum()
}

/// Initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Factor entries ~ N(0, (k^{-1/2} c^n)^2) for the order-n input factor
    /// (c = 0.5), other matrices ~ N(0, 1/fan), aux vectors all ones, biases
    /// zero.
    Damped,
    /// Every entry, biases and aux vectors included, ~ N(0, std^2). Inner
    /// biases stay zero unless the spec enables them.
    Gaussian(f64),
}

pub const INIT_DAMPING: f64 = 0.5;

/// Deterministic initialization: identical `(spec, seed)` gives bit-identical
/// parameters.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<PolyChain> {
    init_params_with(spec, seed, InitScheme::Damped)
}

pub fn init_params_with(spec: &ModelSpec, seed: u64, scheme: InitScheme) -> Result<PolyChain> {
    spec.validate()?;
    let last = spec.blocks.len() - 1;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (i, bs) in spec.blocks.iter().enumerate() {
        let mut rng = rng::substream(seed, i as u64);
        let free_bias = spec.inner_bias || i == last;
        let d = spec.block_input_dim(i);
        blocks.push(init_block(bs, d, free_bias, scheme, &mut rng)?);
    }
    PolyChain::new(blocks, spec.inner_bias)
}

fn init_block(bs: &BlockSpec, d: usize, free_bias: bool, scheme: InitScheme, rng: &mut rng::Stream) -> Result<PolyBlock> {
    let (n_order, k, o, w) = (bs.order, bs.rank, bs.output_dim, bs.aux_dim());
    let mut gauss = |shape: &[usize], damped_std: f64| {
        let std = match scheme {
            InitScheme::Damped => damped_std,
            InitScheme::Gaussian(s) => s,
        };
        DenseTensor::from_fn(shape, |_| rng::normal(rng, std))
    };
    let kf = (k.max(1) as f64).sqrt();
    let factor_std = |n: usize| INIT_DAMPING.powi(n as i32) / kf;
    let params = match bs.variant {
        Variant::Ccp => {
            let input_proj = (1..=n_order).map(|n| gauss(&[d, k], factor_std(n))).collect();
            let readout = gauss(&[o, k], 1.0 / kf);
            BlockParams::Ccp(CcpParams {
                input_proj,
                readout,
                bias: DenseTensor::zeros(&[o]),
            })
        }
        Variant::Ncp | Variant::NcpSkip => {
            let input_proj = (1..=n_order).map(|n| gauss(&[d, k], factor_std(n))).collect();
            let state_proj = (2..=n_order).map(|_| gauss(&[k, k], 1.0 / kf)).collect();
            let aux_proj = (1..=n_order).map(|_| gauss(&[w, k], 1.0 / (w as f64).sqrt())).collect();
            let aux = (1..=n_order)
                .map(|_| match scheme {
                    InitScheme::Damped => DenseTensor::ones(&[w]),
                    InitScheme::Gaussian(_) => gauss(&[w], 1.0),
                })
                .collect();
            let skip: Vec<DenseTensor> = if bs.variant == Variant::NcpSkip {
                (2..=n_order).map(|_| gauss(&[k, k], 1.0 / kf)).collect()
            } else {
                Vec::new()
            };
            let readout = gauss(&[o, k], 1.0 / kf);
            let ncp = NcpParams {
                input_proj,
                state_proj,
                aux_proj,
                aux,
                readout,
                bias: DenseTensor::zeros(&[o]),
            };
            if bs.variant == Variant::NcpSkip {
                BlockParams::NcpSkip(NcpSkipParams { ncp, skip })
            } else {
                BlockParams::Ncp(ncp)
            }
        }
        Variant::Simple => BlockParams::Simple(SimpleSingleOpParams {
            order: n_order,
            op: gauss(&[d, o], 1.0 / (d as f64).sqrt()),
            bias: DenseTensor::zeros(&[o]),
        }),
    };
    let mut block = PolyBlock::new(params, bs.norm.unwrap_or_default())?;
    if free_bias {
        if let InitScheme::Gaussian(std) = scheme {
            let b = DenseTensor::from_fn(&[o], |_| rng::normal(rng, std));
            for (name, t) in block.tensors_mut() {
                if name == "bias" {
                    *t = b.clone();
                }
            }
        }
    }
    Ok(block)
}

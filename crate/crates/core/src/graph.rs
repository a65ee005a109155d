//! Recording model forwards on an autodiff [`Tape`].
//!
//! The recorded graph mirrors the direct forwards in [`crate::polynet`]
//! operation for operation, with inputs batched as rows, so a one-row batch
//! reproduces the direct forward bit for bit.

use std::collections::BTreeMap;

use crate::autodiff::{grad_check, GradCheckReport, NodeId, Result, Tape};
use crate::polynet::{BlockParams, NcpParams, NormMode, NormalizationSpec, PolyBlock, PolyChain, Variant};
use crate::tensor::DenseTensor;

/// Tape nodes of every chain tensor, keyed by its chain name.
#[derive(Debug, Clone, Default)]
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Registers trainable tensors as parameters and frozen ones as constants.
pub fn register_params(tape: &mut Tape, chain: &PolyChain) -> Result<ParamNodes> {
    let trainable: Vec<String> = chain.trainable_tensors().into_iter().map(|(n, _)| n).collect();
    let mut ids = BTreeMap::new();
    for (name, t) in chain.named_tensors() {
        let id = if trainable.contains(&name) {
            tape.param(name.clone(), t.clone())?
        } else {
            tape.constant(t.clone())
        };
        ids.insert(name, id);
    }
    Ok(ParamNodes { ids })
}

fn normalize(tape: &mut Tape, norm: &NormalizationSpec, n: usize, variant: Variant, term: NodeId) -> Result<NodeId> {
    if !norm.applies_to(n, variant) {
        return Ok(term);
    }
    match norm.mode {
        NormMode::TanhHigherOrder => tape.tanh(term),
        NormMode::StandardizeSecondOrder => tape.standardize(term, norm.epsilon),
        NormMode::None => Ok(term),
    }
}

/// Broadcasts a length-k vector node over `rows` rows.
fn broadcast(tape: &mut Tape, v: NodeId, rows: usize) -> Result<NodeId> {
    let k = tape.value(v).len();
    let zeros = tape.constant(DenseTensor::zeros(&[rows, k]));
    tape.bias_add(zeros, v)
}

fn record_ncp(tape: &mut Tape, p: &NcpParams, skip: bool, block: &PolyBlock, name: impl Fn(&str) -> NodeId, z: NodeId) -> Result<NodeId> {
    let rows = tape.value(z).rows();
    let aux = |tape: &mut Tape, n: usize| -> Result<NodeId> {
        tape.t_matvec(name(&format!("aux_proj.{n}")), name(&format!("aux.{n}")))
    };
    let h = tape.matmul(z, name("input_proj.1"))?;
    let a1 = aux(tape, 1)?;
    let a1 = broadcast(tape, a1, rows)?;
    let mut x = tape.hadamard(h, a1)?;
    for n in 2..=p.order() {
        let h = tape.matmul(z, name(&format!("input_proj.{n}")))?;
        let sx = tape.matmul(x, name(&format!("state_proj.{n}")))?;
        let an = aux(tape, n)?;
        let inner = tape.bias_add(sx, an)?;
        let prod = tape.hadamard(h, inner)?;
        let term = normalize(tape, &block.norm, n, block.variant(), prod)?;
        x = if skip {
            let vx = tape.matmul_t(x, name(&format!("skip.{n}")))?;
            tape.add(term, vx)?
        } else {
            term
        };
    }
    Ok(x)
}

/// Records one block applied to the row batch `z` and returns the output node.
pub fn record_block(tape: &mut Tape, block: &PolyBlock, nodes: &ParamNodes, prefix: &str, z: NodeId) -> Result<NodeId> {
    let name = |n: &str| nodes.get(&format!("{prefix}{n}"));
    let x = match &block.params {
        BlockParams::Ccp(p) => {
            let mut x = tape.matmul(z, name("input_proj.1"))?;
            for n in 2..=p.order() {
                let h = tape.matmul(z, name(&format!("input_proj.{n}")))?;
                let prod = tape.hadamard(h, x)?;
                let term = normalize(tape, &block.norm, n, Variant::Ccp, prod)?;
                x = tape.add(term, x)?;
            }
            tape.matmul_t(x, name("readout"))?
        }
        BlockParams::Ncp(p) => {
            let x = record_ncp(tape, p, false, block, name, z)?;
            tape.matmul_t(x, name("readout"))?
        }
        BlockParams::NcpSkip(p) => {
            let x = record_ncp(tape, &p.ncp, true, block, name, z)?;
            tape.matmul_t(x, name("readout"))?
        }
        BlockParams::Simple(p) => {
            let h = tape.matmul(z, name("op"))?;
            let mut acc = h;
            let mut power = h;
            for n in 2..=p.order {
                power = tape.hadamard(power, h)?;
                let term = normalize(tape, &block.norm, n, Variant::Simple, power)?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
    };
    tape.bias_add(x, name("bias"))
}

/// Records the whole chain on the row batch `z` (`[rows, d]`).
pub fn record_chain(tape: &mut Tape, chain: &PolyChain, nodes: &ParamNodes, z: NodeId) -> Result<NodeId> {
    let mut y = z;
    for (i, b) in chain.blocks.iter().enumerate() {
        y = record_block(tape, b, nodes, &format!("block{i}/"), y)?;
    }
    Ok(y)
}

/// Stacks input rows into a `[rows, d]` matrix.
pub fn batch_matrix(rows: &[&[f64]]) -> DenseTensor {
    let d = rows.first().map_or(0, |r| r.len());
    DenseTensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
        .expect("rows of equal length")
}

/// Checks reverse-mode gradients of `sum(chain(z)^2)` over the rows of
/// `inputs` against central differences, for every trainable tensor.
pub fn chain_grad_check(chain: &PolyChain, inputs: &[&[f64]], eps: f64, tol: f64) -> Result<GradCheckReport> {
    let batch = batch_matrix(inputs);
    let params: Vec<(String, DenseTensor)> = chain.trainable_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    grad_check(
        &params,
        |tape, ids| {
            let mut nodes = ParamNodes::default();
            for ((n, _), id) in params.iter().zip(ids) {
                nodes.ids.insert(n.clone(), *id);
            }
            for (n, t) in chain.named_tensors() {
                nodes.ids.entry(n).or_insert_with(|| tape.constant(t.clone()));
            }
            let z = tape.constant(batch.clone());
            let y = record_chain(tape, chain, &nodes, z)?;
            let sq = tape.hadamard(y, y)?;
            tape.sum(sq)
        },
        eps,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynet::{init_params_with, BlockSpec, InitScheme, ModelSpec, PolyModel};

    fn chain(variant: Variant, n: usize, norm: NormalizationSpec, seed: u64) -> PolyChain {
        let mut b = BlockSpec::new(variant, n, 3, 2);
        b.norm = Some(norm);
        init_params_with(&ModelSpec::single(3, b, 0), seed, InitScheme::Gaussian(0.7)).unwrap()
    }

    fn inputs() -> Vec<Vec<f64>> {
        vec![vec![0.3, -0.8, 0.5], vec![-1.0, 0.2, 0.9], vec![0.0, 0.0, 0.0]]
    }

    #[test]
    fn tape_forward_is_bitwise_direct_forward() {
        for variant in [Variant::Ccp, Variant::Ncp, Variant::NcpSkip, Variant::Simple] {
            for norm in [NormalizationSpec::none(), NormalizationSpec::tanh(), NormalizationSpec::standardize(1e-5).unwrap()] {
                let c = chain(variant, 3, norm, 1);
                let rows = inputs();
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                let mut tape = Tape::new();
                let nodes = register_params(&mut tape, &c).unwrap();
                let z = tape.constant(batch_matrix(&refs));
                let out = record_chain(&mut tape, &c, &nodes, z).unwrap();
                for (r, zr) in rows.iter().enumerate() {
                    let direct = c.forward(zr).unwrap();
                    let taped = tape.value(out).row(r);
                    assert_eq!(
                        direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        taped.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        "{variant} {:?}",
                        norm.mode
                    );
                }
            }
        }
    }

    fn check(c: &PolyChain, tol: f64) {
        let rows = inputs();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let report = chain_grad_check(c, &refs, 1e-5, tol).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradients_match_central_differences() {
        check(&chain(Variant::Ccp, 3, NormalizationSpec::none(), 2), 1e-5);
        check(&chain(Variant::NcpSkip, 4, NormalizationSpec::none(), 3), 1e-5);
        check(&chain(Variant::Ncp, 3, NormalizationSpec::tanh(), 4), 1e-4);
        check(&chain(Variant::Simple, 3, NormalizationSpec::standardize(1e-3).unwrap(), 5), 1e-4);
    }

    #[test]
    fn frozen_inner_bias_is_a_constant() {
        let spec = ModelSpec {
            input_dim: 2,
            blocks: vec![BlockSpec::new(Variant::Ccp, 2, 2, 2), BlockSpec::new(Variant::Ccp, 2, 2, 1)],
            inner_bias: false,
            seed: 0,
        };
        let c = init_params_with(&spec, 0, InitScheme::Gaussian(1.0)).unwrap();
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, &c).unwrap();
        let z = tape.constant(batch_matrix(&[&[0.5, 0.5]]));
        let y = record_chain(&mut tape, &c, &nodes, z).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get("block0/bias").is_none());
        assert!(g.get("block1/bias").is_some());
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Built with `harness = false` so the lines always show.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use pinet::checkpoint::{decode, encode};
use pinet::data::{affine_lstsq_residual, gen_product, gen_xor, Dataset, Targets};
use pinet::graph::chain_grad_check;
use pinet::oracle::{degree_check, equivalence_check, symbolic_expand, MultiPoly, RouteOutcome, PROBE_REL};
use pinet::polynet::{
    init_params, init_params_with, ncp_forward, ncp_skip_forward, polynomialize_residual, BlockParams, BlockSpec, InitScheme, ModelSpec,
    NcpSkipParams, NormalizationSpec, PolyChain, PolyModel, Variant,
};
use pinet::rng;
use pinet::spec_doc::parse_spec;
use pinet::tensor::{fused_mixed_product, khatri_rao, kron_vec, mixed_product_literal, mixed_product_scale, DenseTensor};
use pinet::train::{evaluate, train_loop, TrainConfig, TrainOutcome};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut rng::Stream, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng::normal(rng, 1.0))
}

fn single(variant: Variant, order: usize, d: usize, k: usize, w: usize, o: usize) -> ModelSpec {
    let mut b = BlockSpec::new(variant, order, k, o);
    b.aux_dim = Some(w);
    b.norm = Some(NormalizationSpec::none());
    ModelSpec::single(d, b, 0)
}

fn mixed_product_identity() -> Verdict {
    let mut rng = rng::stream(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = 1 + (rng::uniform(&mut rng, 0.0, 5.0) as usize);
        let w = 1 + (rng::uniform(&mut rng, 0.0, 5.0) as usize);
        let k = 1 + (rng::uniform(&mut rng, 0.0, 5.0) as usize);
        let a = gaussian(&mut rng, &[d, k]);
        let b = gaussian(&mut rng, &[w, k]);
        let x = rng::uniform_vec(&mut rng, d, -2.0, 2.0);
        let y = rng::uniform_vec(&mut rng, w, -2.0, 2.0);
        let scale = mixed_product_scale(&a, &b, &x, &y);
        let literal = mixed_product_literal(&a, &b, &x, &y).unwrap();
        let fused = fused_mixed_product(&a, &b, &x, &y).unwrap();
        // Independent double sum over (i, j) for each column r.
        let direct: Vec<f64> = (0..k)
            .map(|r| {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..w {
                        s += a.at(i, r) * b.at(j, r) * x[i] * y[j];
                    }
                }
                s
            })
            .collect();
        assert_eq!(khatri_rao(&a, &b).unwrap().rows(), d * w);
        assert_eq!(kron_vec(&x, &y).len(), d * w);
        for r in 0..k {
            worst = worst.max((literal[r] - fused[r]).abs() / scale).max((direct[r] - fused[r]).abs() / scale);
        }
    }
    verdict(worst <= 1e-12, format!("max |literal - fused| / scale = {worst:.2e} over 1000 draws (tol 1e-12)"))
}

/// Three-way sweep over 20 draws with d, k, omega <= 3 and 200 inputs each.
fn three_way(variant: Variant) -> Verdict {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for draw in 0..20u64 {
        let d = 1 + (draw % 3) as usize;
        let k = 1 + ((draw / 3) % 3) as usize;
        let w = 1 + ((draw / 2) % 3) as usize;
        let spec = single(variant, 3, d, k, w, 2);
        let chain = init_params_with(&spec, 100 + draw, InitScheme::Gaussian(0.8)).unwrap();
        let r = equivalence_check(&chain, 200, 1e-9, draw).unwrap();
        for route in [&r.recursive_vs_symbolic, &r.recursive_vs_explicit, &r.symbolic_vs_explicit] {
            match route {
                RouteOutcome::Checked(dev) => worst = worst.max(*dev),
                RouteOutcome::Skipped(_) => skipped += 1,
            }
        }
    }
    verdict(
        worst <= 1e-9 && skipped == 0,
        format!("max pairwise relative deviation {worst:.2e} over 20 draws x 200 inputs, {skipped} routes skipped (tol 1e-9)"),
    )
}

fn general_order() -> Verdict {
    let mut worst = 0.0f64;
    let mut bitwise = true;
    let mut cases = 0;
    for variant in [Variant::Ccp, Variant::Ncp, Variant::NcpSkip] {
        for n in 1..=5 {
            for d in 1..=3 {
                let spec = single(variant, n, d, 3, 2, 2);
                let chain = init_params_with(&spec, (n * 10 + d) as u64, InitScheme::Gaussian(0.7)).unwrap();
                let r = equivalence_check(&chain, 200, 1e-9, n as u64).unwrap();
                match r.recursive_vs_symbolic {
                    RouteOutcome::Checked(dev) => worst = worst.max(dev),
                    RouteOutcome::Skipped(_) => worst = f64::INFINITY,
                }
                cases += 1;
                if let BlockParams::Ncp(p) = &chain.blocks[0].params {
                    let zero_skip = NcpSkipParams {
                        ncp: p.clone(),
                        skip: vec![DenseTensor::zeros(&[3, 3]); n - 1],
                    };
                    let mut zr = rng::stream(7 + n as u64);
                    for _ in 0..50 {
                        let z = rng::uniform_vec(&mut zr, d, -1.0, 1.0);
                        let a = ncp_forward(p, &z).unwrap();
                        let b = ncp_skip_forward(&zero_skip, &z).unwrap();
                        bitwise &= a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
                    }
                }
            }
        }
    }
    verdict(
        worst <= 1e-9 && bitwise,
        format!("recursive vs symbolic max {worst:.2e} over {cases} models (N = 1..5); NCP-Skip with V = 0 bitwise equal to NCP: {bitwise}"),
    )
}

fn degree_laws() -> Verdict {
    let variants = [Variant::Ccp, Variant::Ncp, Variant::NcpSkip, Variant::Simple];
    let mut specs = Vec::new();
    for (vi, &v) in variants.iter().enumerate() {
        for n in 1..=5 {
            let mut s = single(v, n, 1 + (n + vi) % 3, 3, 2, 2);
            s.blocks[0].norm = Some(NormalizationSpec::none());
            specs.push(s);
        }
    }
    let mut orders: Vec<Vec<usize>> = Vec::new();
    for a in [2, 3] {
        for b in [2, 3] {
            orders.push(vec![a, b]);
            for c in [2, 3] {
                orders.push(vec![a, b, c]);
            }
        }
    }
    for (i, ords) in orders.iter().enumerate() {
        let blocks = ords
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let mut b = BlockSpec::new(variants[(i + j) % 4], n, 2, if j + 1 == ords.len() { 1 } else { 2 });
                b.norm = Some(NormalizationSpec::none());
                b
            })
            .collect();
        specs.push(ModelSpec {
            input_dim: 1 + i % 3,
            blocks,
            inner_bias: i % 2 == 0,
            seed: 0,
        });
    }
    let mut failures = Vec::new();
    let (mut probes, mut degenerate) = (0, 0);
    for (si, spec) in specs.iter().enumerate() {
        let nominal = spec.nominal_degree();
        for draw in 0..3u64 {
            let chain = init_params_with(spec, 1000 * si as u64 + draw, InitScheme::Gaussian(1.0)).unwrap();
            let poly = symbolic_expand(&chain).unwrap();
            let symbolic = poly.total_degree();
            let mut dr = rng::substream(si as u64, draw);
            for _ in 0..4 {
                let z0 = rng::uniform_vec(&mut dr, spec.input_dim, -0.5, 0.5);
                let v = rng::unit_vector(&mut dr, spec.input_dim);
                let got = degree_check(&chain, &z0, &v, nominal + 2).unwrap().degree();
                probes += 1;
                if !top_term_resolvable(&chain, &poly, &z0, &v, nominal) {
                    degenerate += 1;
                    if got.is_none_or(|g| g > nominal) {
                        failures.push(format!("degenerate line reported {got:?} > {nominal}"));
                    }
                    continue;
                }
                if got != Some(nominal) || symbolic != nominal {
                    failures.push(format!("{:?}: probe {got:?}, symbolic {symbolic}, nominal {nominal}", spec.blocks.iter().map(|b| b.order).collect::<Vec<_>>()));
                }
            }
        }
    }
    let ok = failures.is_empty();
    verdict(
        ok,
        format!(
            "{probes} probes over {} models (single N = 1..5, chains of 2-3 blocks up to degree 27); {} mismatches; numerically degenerate lines: {degenerate}{}",
            specs.len(),
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(", first: {f}"))
        ),
    )
}

/// Whether the degree-`deg` part of the line `t -> p(z0 + t v)` reaches the
/// probe's relative resolution over the probe window. The leading univariate
/// coefficient comes from the symbolic expansion, independent of the probe:
/// it equals the top homogeneous part evaluated at `v`.
fn top_term_resolvable(chain: &PolyChain, poly: &MultiPoly, z0: &[f64], v: &[f64], deg: usize) -> bool {
    let half = (deg + 3) as f64 * 0.5 / 2.0;
    (0..poly.width()).any(|j| {
        let lead: f64 = poly
            .terms()
            .filter(|(e, _)| e.iter().sum::<u32>() as usize == deg)
            .map(|(e, c)| c[j] * e.iter().zip(v).map(|(&k, &x)| x.powi(k as i32)).product::<f64>())
            .sum();
        let size = (0..=4 * deg)
            .map(|i| {
                let t = -half + 2.0 * half * i as f64 / (4 * deg) as f64;
                let z: Vec<f64> = z0.iter().zip(v).map(|(a, b)| a + t * b).collect();
                chain.forward(&z).unwrap()[j].abs()
            })
            .fold(0.0, f64::max);
        lead.abs() * half.powi(deg as i32) >= PROBE_REL * size
    })
}

fn gradients() -> Verdict {
    let rows = [[0.3, -0.8, 0.5], [-1.0, 0.2, 0.9], [0.7, 0.4, -0.6]];
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let (mut worst_plain, mut worst_tanh) = (0.0f64, 0.0f64);
    for variant in [Variant::Ccp, Variant::Ncp, Variant::NcpSkip] {
        for n in 1..=4 {
            for tanh in [false, true] {
                let mut spec = single(variant, n, 3, 3, 2, 2);
                spec.blocks[0].norm = Some(if tanh { NormalizationSpec::tanh() } else { NormalizationSpec::none() });
                let chain = init_params_with(&spec, n as u64, InitScheme::Gaussian(0.6)).unwrap();
                let r = chain_grad_check(&chain, &refs, 1e-5, 1.0).unwrap();
                if tanh {
                    worst_tanh = worst_tanh.max(r.max_rel_error);
                } else {
                    worst_plain = worst_plain.max(r.max_rel_error);
                }
            }
        }
    }
    verdict(
        worst_plain < 1e-5 && worst_tanh < 1e-4,
        format!("max relative error {worst_plain:.3e} plain (tol 1e-5), {worst_tanh:.3e} with tanh (tol 1e-4)"),
    )
}

fn fit(order: usize, rank: usize, ds: &Dataset, cfg: &TrainConfig) -> TrainOutcome {
    let spec = single(Variant::Ccp, order, 2, rank, rank, ds.output_dim());
    let chain = init_params(&spec, 0).unwrap();
    train_loop(chain, ds, None, cfg, |_, _| {}).unwrap()
}

fn expressivity() -> Verdict {
    let xor = gen_xor(0, 1, 0.0).unwrap();
    let xor_cfg = TrainConfig {
        epochs: 2000,
        batch_size: 4,
        lr: 0.1,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let product = gen_product(0, 256).unwrap();
    let product_cfg = TrainConfig {
        epochs: 3000,
        batch_size: 256,
        lr: 0.5,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let Targets::Regression(y) = &product.targets else { unreachable!() };
    let floor = affine_lstsq_residual(&product.inputs, y);

    let runs = [
        fit(2, 4, &xor, &xor_cfg),
        fit(1, 4, &xor, &xor_cfg),
        fit(2, 4, &product, &product_cfg),
        fit(1, 4, &product, &product_cfg),
    ];
    let decreased = runs.iter().all(|r| r.metrics.final_row().unwrap().train_loss < r.metrics.initial_train_loss);
    let acc2 = evaluate(&runs[0].chain, &xor).unwrap().accuracy.unwrap();
    let acc1 = evaluate(&runs[1].chain, &xor).unwrap().accuracy.unwrap();
    let mse2 = evaluate(&runs[2].chain, &product).unwrap().loss;
    let mse1 = evaluate(&runs[3].chain, &product).unwrap().loss;
    let ok = acc2 == 1.0 && mse2 < 1e-6 && acc1 <= 0.75 && floor > 0.0 && mse1 >= floor * (1.0 - 1e-9) && decreased;
    verdict(
        ok,
        format!(
            "N=2: XOR acc {acc2}, z1*z2 MSE {mse2:.2e}; N=1: XOR acc {acc1}, z1*z2 MSE {mse1:.4e} vs affine floor {floor:.4e}; losses decreased: {decreased}"
        ),
    )
}

fn residual_polynomialization() -> Verdict {
    let mut worst = 0.0f64;
    for draw in 0..50u64 {
        let n = 1 + (draw % 4) as usize;
        let (d, k, w) = (1 + (draw % 3) as usize, 1 + ((draw / 3) % 3) as usize, 2);
        let chain = init_params_with(&single(Variant::NcpSkip, n, d, k, w, 2), draw, InitScheme::Gaussian(0.8)).unwrap();
        let BlockParams::NcpSkip(p) = &chain.blocks[0].params else { unreachable!() };
        let q = polynomialize_residual(p).unwrap();
        let p = &p.ncp;
        let mut zr = rng::stream(500 + draw);
        for _ in 0..20 {
            let z = rng::uniform_vec(&mut zr, d, -1.0, 1.0);
            let got = ncp_skip_forward(&q, &z).unwrap();
            // x1 = (A1^T z) * (B1^T b1); xn = x + S x + (An^T z) * (S^T x + Bn^T bn)
            let at = |m: &DenseTensor, v: &[f64]| -> Vec<f64> { (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.at(r, c) * v[r]).sum()).collect() };
            let mut x: Vec<f64> = at(&p.input_proj[0], &z).iter().zip(at(&p.aux_proj[0], p.aux[0].data())).map(|(a, b)| a * b).collect();
            for i in 1..n {
                let s = &p.state_proj[i - 1];
                let sx: Vec<f64> = (0..k).map(|r| (0..k).map(|c| s.at(r, c) * x[c]).sum()).collect();
                let stx = at(s, &x);
                let az = at(&p.input_proj[i], &z);
                let bb = at(&p.aux_proj[i], p.aux[i].data());
                x = (0..k).map(|j| x[j] + sx[j] + az[j] * (stx[j] + bb[j])).collect();
            }
            let want: Vec<f64> = (0..2).map(|o| p.bias.data()[o] + (0..k).map(|j| p.readout.at(o, j) * x[j]).sum::<f64>()).collect();
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (g, h) in got.iter().zip(&want) {
                worst = worst.max((g - h).abs() / scale);
            }
        }
    }
    verdict(worst <= 1e-12, format!("max deviation from the hand expansion {worst:.2e} over 1000 evaluations (tol 1e-12)"))
}

fn determinism_and_format() -> Verdict {
    let spec = single(Variant::Ncp, 3, 2, 3, 2, 2);
    let same_init = encode(&init_params(&spec, 9).unwrap(), 9) == encode(&init_params(&spec, 9).unwrap(), 9);

    let xor = gen_xor(3, 2, 0.1).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let train = || {
        let c = init_params(&spec, 4).unwrap();
        encode(&train_loop(c, &xor, None, &cfg, |_, _| {}).unwrap().chain, 4)
    };
    let same_training = train() == train();

    let mut lossless = true;
    for (i, v) in [Variant::Ccp, Variant::Ncp, Variant::NcpSkip, Variant::Simple].into_iter().enumerate() {
        let chain: PolyChain = init_params_with(&single(v, 2 + i, 3, 2, 3, 2), i as u64, InitScheme::Gaussian(1.0)).unwrap();
        let bytes = encode(&chain, i as u64);
        let back = decode(&bytes).unwrap();
        lossless &= back.chain == chain && encode(&back.chain, back.spec.seed) == bytes;
    }

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let golden = std::fs::read(dir.join("golden.pinet")).unwrap();
    let gspec = parse_spec(&std::fs::read_to_string(dir.join("golden.spec")).unwrap()).unwrap();
    let golden_ok = decode(&golden).is_ok_and(|ck| encode(&ck.chain, ck.spec.seed) == golden)
        && encode(&init_params(&gspec, gspec.seed).unwrap(), gspec.seed) == golden;

    verdict(
        same_init && same_training && lossless && golden_ok,
        format!("identical init: {same_init}, identical training: {same_training}, byte-lossless round trip: {lossless}, golden file: {golden_ok}"),
    )
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("mixed-product identity", Duration::from_secs(5), mixed_product_identity),
        ("CCP three-way equivalence (N=3)", Duration::from_secs(30), || three_way(Variant::Ccp)),
        ("NCP three-way equivalence (N=3)", Duration::from_secs(30), || three_way(Variant::Ncp)),
        ("general-N equivalence", Duration::from_secs(120), general_order),
        ("degree laws", Duration::from_secs(60), degree_laws),
        ("gradient correctness", Duration::from_secs(60), gradients),
        ("expressivity without activations", Duration::from_secs(120), expressivity),
        ("residual polynomialization", Duration::from_secs(5), residual_polynomialization),
        ("determinism and checkpoint format", Duration::from_secs(10), determinism_and_format),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = run();
        let elapsed = t.elapsed();
        let pass = v.passed && elapsed < *budget;
        failed += usize::from(!pass);
        println!(
            "[{}] {}. {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

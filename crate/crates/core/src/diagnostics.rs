//! Seeded gradient audit of every differentiable module against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::g2a::{g2a_forward_var, AdapterDims, AdapterFlags, AdapterParams};
use crate::mpr::{mpr_forward_var, Dropout, MprParams};
use crate::numerics::{finite_diff_check_with_floor, GeluMode, Tape, Tensor, Var};
use crate::objectives::{
    info_nce, mpc_loss, mpt_loss, s_max_matrix, total_loss, weighted_triplet, BatchFeatures,
    LossConfig, TripletWeighting,
};
use crate::params::{Binding, Parameters};

/// Largest tensor extent drawn by the audit.
pub const MAX_EXTENT: usize = 6;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Moderate logit scale: keeps third derivatives, and so the truncation error
/// of the central difference, small.
const AUDIT_TAU_INV: f64 = 5.0;
/// Denominator floor as a fraction of the largest gradient entry. Entries far
/// below it (some vanish identically, such as the key bias under softmax
/// shift invariance) are compared against the gradient's scale, since their
/// central differences are dominated by cancellation error.
pub const RELATIVE_FLOOR: f64 = 1e-3;
const NORM_EPS: f64 = 1e-8;
const MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    /// Worst relative error over all seeds and compared coordinates.
    pub worst_rel_error: f64,
    pub seeds: u64,
    pub compared: usize,
    /// Coordinates skipped because the step crossed a kink.
    pub skipped: usize,
}

impl ModuleCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_error < tol && self.compared > 0
    }
}

type Inputs = Vec<(String, Tensor<f64>)>;
type Build<'a> = dyn Fn(&Tape<f64>, &Inputs) -> Result<Var<f64>> + 'a;

/// Binds every input as a named parameter and reduces the output to a scalar
/// with a fixed random readout when it is not one already.
fn evaluate(inputs: &Inputs, build: &Build, readout: Option<&Tensor<f64>>) -> Result<(Tape<f64>, Var<f64>)> {
    let tape = Tape::new();
    let out = build(&tape, inputs)?;
    let loss = match readout {
        Some(r) => out.mul(&tape.constant(r))?.sum(),
        None => out,
    };
    Ok((tape, loss))
}

fn check_one(inputs: Inputs, build: &Build, seed: u64, acc: &mut ModuleCheck) -> Result<()> {
    let (_, out) = evaluate(&inputs, build, None)?;
    let readout = (out.shape().iter().product::<usize>() != 1)
        .then(|| Tensor::randn(&out.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7ead_0u64)));
    let (_, loss) = evaluate(&inputs, build, readout.as_ref())?;
    let grads = loss.backward()?;
    let mut analytic = Vec::new();
    for (name, t) in &inputs {
        match grads.named(name) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-8);
    let theta: Vec<f64> = inputs.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let f = |flat: &[f64]| -> (f64, u64) {
        let mut off = 0;
        let perturbed: Inputs = inputs
            .iter()
            .map(|(n, t)| {
                let k = t.numel();
                let v = Tensor::new(t.shape().to_vec(), flat[off..off + k].to_vec()).expect("same shape");
                off += k;
                (n.clone(), v)
            })
            .collect();
        match evaluate(&perturbed, build, readout.as_ref()) {
            Ok((tape, loss)) => (loss.item().unwrap_or(f64::NAN), tape.branch_signature()),
            Err(_) => (f64::NAN, 0),
        }
    };
    let report = finite_diff_check_with_floor(f, &theta, &analytic, FD_STEP, floor)?;
    acc.worst_rel_error = acc.worst_rel_error.max(report.max_rel_error);
    acc.compared += report.compared;
    acc.skipped += report.skipped;
    Ok(())
}

fn param(tape: &Tape<f64>, inputs: &Inputs, name: &str) -> Result<Var<f64>> {
    let (n, t) = inputs
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::Argument(format!("no input named {name}")))?;
    Ok(tape.param(n.clone(), t))
}

fn unit(tape: &Tape<f64>, inputs: &Inputs, name: &str) -> Result<Var<f64>> {
    Ok(param(tape, inputs, name)?.l2_normalize_rows(NORM_EPS))
}

fn extent(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.random_range(lo..=MAX_EXTENT)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn audit(module: &str, first_seed: u64, seeds: u64, case: impl Fn(&mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)>) -> Result<ModuleCheck> {
    let mut acc = ModuleCheck { module: module.to_string(), worst_rel_error: 0.0, seeds, compared: 0, skipped: 0 };
    for seed in first_seed..first_seed + seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(module.len() as u64));
        let (inputs, build) = case(&mut rng)?;
        check_one(inputs, build.as_ref(), seed, &mut acc)?;
    }
    Ok(acc)
}

fn adapter_case(flags: AdapterFlags) -> impl Fn(&mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)> {
    move |rng| {
        let model_dim = extent(rng, 2);
        let bottleneck = rng.random_range(1..model_dim);
        let divisors: Vec<usize> = (1..=bottleneck).filter(|h| bottleneck % h == 0).collect();
        let heads = divisors[rng.random_range(0..divisors.len())];
        let dims = AdapterDims { model_dim, bottleneck, heads, ffn_hidden: extent(rng, 1) };
        let groups = rng.random_range(1..=2);
        let seq_len = rng.random_range(1..=MAX_EXTENT / groups);
        let p = AdapterParams::<f64>::random(dims, 0.7, rng)?;
        let mut inputs = vec![("x".to_string(), randn(rng, &[groups * seq_len, model_dim]))];
        p.visit("p", &mut |n, t| inputs.push((n, t.clone())));
        let build = move |tape: &Tape<f64>, inputs: &Inputs| -> Result<Var<f64>> {
            let mut p = AdapterParams::<f64>::zeros(dims)?;
            p.load_named("p", inputs)?;
            let vars = p.bind(tape, "p", Binding::Trainable);
            g2a_forward_var(&param(tape, inputs, "x")?, &vars, flags, seq_len, GeluMode::Exact)
        };
        Ok((inputs, Box::new(build) as Box<Build<'static>>))
    }
}

fn mpr_case(rng: &mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)> {
    let (b, d, k, hidden) = (extent(rng, 1), extent(rng, 2), extent(rng, 1), extent(rng, 1));
    let mut p = MprParams::<f64>::zeros(k, d, hidden)?;
    p.visit_mut("", &mut |_, t| {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.7, rng);
    });
    let mut inputs = vec![("e".to_string(), randn(rng, &[b, d]))];
    p.visit("m", &mut |n, t| inputs.push((n, t.clone())));
    let build = move |tape: &Tape<f64>, inputs: &Inputs| -> Result<Var<f64>> {
        let mut p = MprParams::<f64>::zeros(k, d, hidden)?;
        p.load_named("m", inputs)?;
        let heads = p.bind(tape, "m", Binding::Trainable);
        mpr_forward_var(&param(tape, inputs, "e")?, &heads, NORM_EPS, GeluMode::Exact, None::<Dropout<'_, ChaCha8Rng>>)
    };
    Ok((inputs, Box::new(build)))
}

fn matrix_case(
    loss: fn(&Var<f64>) -> Result<Var<f64>>,
) -> impl Fn(&mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)> {
    move |rng| {
        let b = extent(rng, 2);
        let s = randn(rng, &[b, b]).map(|v| (0.5 * v).tanh());
        let build = move |tape: &Tape<f64>, inputs: &Inputs| loss(&param(tape, inputs, "S")?);
        Ok((vec![("S".to_string(), s)], Box::new(build) as Box<Build<'static>>))
    }
}

fn perspective_case(
    loss: fn(&Var<f64>) -> Result<Var<f64>>,
) -> impl Fn(&mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)> {
    move |rng| {
        let (b, k, d) = (extent(rng, 2), extent(rng, 1), extent(rng, 2));
        let inputs = vec![("g_m".to_string(), randn(rng, &[b * k, d])), ("g_t".to_string(), randn(rng, &[b, d]))];
        let build = move |tape: &Tape<f64>, inputs: &Inputs| {
            let s_max = s_max_matrix(&unit(tape, inputs, "g_m")?, &unit(tape, inputs, "g_t")?, k)?;
            loss(&s_max)
        };
        Ok((inputs, Box::new(build) as Box<Build<'static>>))
    }
}

fn audit_weighting() -> TripletWeighting {
    TripletWeighting::Sigmoid { kappa: 10.0 }
}

fn total_case(rng: &mut ChaCha8Rng) -> Result<(Inputs, Box<Build<'static>>)> {
    let (b, k, d) = (extent(rng, 2), extent(rng, 1), extent(rng, 2));
    let inputs = vec![
        ("g_v".to_string(), randn(rng, &[b, d])),
        ("g_t".to_string(), randn(rng, &[b, d])),
        ("g_m".to_string(), randn(rng, &[b * k, d])),
    ];
    let cfg = LossConfig { tau_inv: AUDIT_TAU_INV, weighting: audit_weighting(), ..LossConfig::default() };
    let build = move |tape: &Tape<f64>, inputs: &Inputs| {
        let batch = BatchFeatures {
            g_v: unit(tape, inputs, "g_v")?,
            g_t: unit(tape, inputs, "g_t")?,
            g_m: Some(unit(tape, inputs, "g_m")?),
            k,
        };
        Ok(total_loss(&batch, &cfg)?.total)
    };
    Ok((inputs, Box::new(build)))
}

/// Module names in audit order.
pub const MODULES: [&str; 10] = [
    "g2a_forward[-]",
    "g2a_forward[attn]",
    "g2a_forward[gate]",
    "g2a_forward[attn+gate]",
    "mpr_forward",
    "info_nce",
    "weighted_triplet",
    "mpc_loss",
    "mpt_loss",
    "total_loss",
];

/// Runs one module's audit over `seeds` random instances starting at
/// `first_seed`.
pub fn check_module(module: &str, first_seed: u64, seeds: u64) -> Result<ModuleCheck> {
    match module {
        "g2a_forward[-]" => audit(module, first_seed, seeds, adapter_case(AdapterFlags::ALL[0])),
        "g2a_forward[attn]" => audit(module, first_seed, seeds, adapter_case(AdapterFlags::ALL[1])),
        "g2a_forward[gate]" => audit(module, first_seed, seeds, adapter_case(AdapterFlags::ALL[2])),
        "g2a_forward[attn+gate]" => audit(module, first_seed, seeds, adapter_case(AdapterFlags::ALL[3])),
        "mpr_forward" => audit(module, first_seed, seeds, mpr_case),
        "info_nce" => audit(module, first_seed, seeds, matrix_case(|s| info_nce(s, AUDIT_TAU_INV))),
        "weighted_triplet" => audit(module, first_seed, seeds, matrix_case(|s| weighted_triplet(s, MARGIN, audit_weighting()))),
        "mpc_loss" => audit(module, first_seed, seeds, perspective_case(|s| mpc_loss(s, AUDIT_TAU_INV))),
        "mpt_loss" => audit(module, first_seed, seeds, perspective_case(|s| mpt_loss(s, MARGIN, audit_weighting()))),
        "total_loss" => audit(module, first_seed, seeds, total_case),
        other => Err(Error::Argument(format!("unknown module {other:?}"))),
    }
}

/// Audits every module in [`MODULES`].
pub fn gradient_suite(first_seed: u64, seeds: u64) -> Result<Vec<ModuleCheck>> {
    MODULES.iter().map(|m| check_module(m, first_seed, seeds)).collect()
}

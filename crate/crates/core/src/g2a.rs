//! Gated global-attention (G²A) bottleneck adapter.
//!
//! ```text
//! z   = GELU(x W1 + b1)                 N×D → N×d
//! ẑ   = Attn(z) W2 + b2
//! z̃   = ẑ + FFN(Attn(ẑ))
//! z_g = σ(γ) · z̃
//! x'  = x + z_g W3 + b3                 N×d → N×D
//! ```
//!
//! With attention disabled both `Attn` applications become the identity; with
//! the gate disabled `z_g = z̃`. The two `Attn` applications share one set of
//! projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GeluMode, Tape, Tensor, Var};
use crate::params::{bind_tensor, impl_parameters, join, Binding};
use crate::scalar::Scalar;

/// Ablation switches for the adapter. The bottleneck projections are always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterFlags {
    pub attn: bool,
    pub gate: bool,
}

impl Default for AdapterFlags {
    fn default() -> Self {
        AdapterFlags { attn: true, gate: true }
    }
}

impl AdapterFlags {
    pub const ALL: [AdapterFlags; 4] = [
        AdapterFlags { attn: false, gate: false },
        AdapterFlags { attn: true, gate: false },
        AdapterFlags { attn: false, gate: true },
        AdapterFlags { attn: true, gate: true },
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    /// Residual-stream width `D`.
    pub model_dim: usize,
    /// Bottleneck width `d`.
    pub bottleneck: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AdapterDims {
    /// `d = D/8` (at least 1), two heads when they divide `d`, `d_ff = 2d`.
    pub fn for_model(model_dim: usize) -> Self {
        let bottleneck = (model_dim / 8).max(1);
        let heads = if bottleneck % 2 == 0 { 2 } else { 1 };
        AdapterDims {
            model_dim,
            bottleneck,
            heads,
            ffn_hidden: 2 * bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck >= self.model_dim {
            return Err(Error::Config(format!(
                "bottleneck width {} must satisfy 0 < d < D = {}",
                self.bottleneck, self.model_dim
            )));
        }
        if self.heads == 0 || self.bottleneck % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide bottleneck width {}",
                self.heads, self.bottleneck
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("adapter FFN width must be positive".into()));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of a multi-head self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl_parameters!(AttnParams { wq => "wq", bq => "bq", wk => "wk", bk => "bk", wv => "wv", bv => "bv", wo => "wo", bo => "bo" });

pub struct AttnVars<T> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn zeros(width: usize) -> Self {
        let w = || Tensor::zeros(&[width, width]);
        let b = || Tensor::zeros(&[width]);
        AttnParams {
            wq: w(),
            bq: b(),
            wk: w(),
            bk: b(),
            wv: w(),
            bv: b(),
            wo: w(),
            bo: b(),
        }
    }

    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mut p = Self::zeros(width);
        p.wq = Tensor::randn(&[width, width], std, rng);
        p.wk = Tensor::randn(&[width, width], std, rng);
        p.wv = Tensor::randn(&[width, width], std, rng);
        p.wo = Tensor::randn(&[width, width], std, rng);
        p
    }

    pub fn bind(&self, tape: &Tape<T>, prefix: &str, mode: Binding) -> AttnVars<T> {
        let b = |name: &str, t: &Tensor<T>| bind_tensor(tape, join(prefix, name), t, mode);
        AttnVars {
            wq: b("wq", &self.wq),
            bq: b("bq", &self.bq),
            wk: b("wk", &self.wk),
            bk: b("bk", &self.bk),
            wv: b("wv", &self.wv),
            bv: b("bv", &self.bv),
            wo: b("wo", &self.wo),
            bo: b("bo", &self.bo),
        }
    }

    pub fn num_scalars_per_block(width: usize) -> usize {
        4 * width * width + 4 * width
    }
}

/// Multi-head self-attention over consecutive sequences of `seq_len` tokens.
///
/// `z` is `[G·seq_len × d]`; tokens only attend within their own sequence.
pub fn mhsa<T: Scalar>(z: &Var<T>, p: &AttnVars<T>, heads: usize, seq_len: usize) -> Result<Var<T>> {
    let q = z.linear(&p.wq, &p.bq)?;
    let k = z.linear(&p.wk, &p.bk)?;
    let v = z.linear(&p.wv, &p.bv)?;
    Var::attention(&q, &k, &v, seq_len, heads)?.linear(&p.wo, &p.bo)
}

/// All learnable quantities of one adapter insertion site.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    pub dims: AdapterDims,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub attn: AttnParams<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    /// Gate logit, shape `[1]`.
    pub gamma: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

impl_parameters!(AdapterParams {
    w1 => "W1", b1 => "b1", attn => "attn", w2 => "W2", b2 => "b2",
    ffn_w1 => "ffn.W1", ffn_b1 => "ffn.b1", ffn_w2 => "ffn.W2", ffn_b2 => "ffn.b2",
    gamma => "gamma", w3 => "W3", b3 => "b3",
});

pub struct AdapterVars<T> {
    pub heads: usize,
    pub w1: Var<T>,
    pub b1: Var<T>,
    pub attn: AttnVars<T>,
    pub w2: Var<T>,
    pub b2: Var<T>,
    pub ffn_w1: Var<T>,
    pub ffn_b1: Var<T>,
    pub ffn_w2: Var<T>,
    pub ffn_b2: Var<T>,
    pub gamma: Var<T>,
    pub w3: Var<T>,
    pub b3: Var<T>,
}

impl<T: Scalar> AdapterParams<T> {
    /// Every parameter zero.
    pub fn zeros(dims: AdapterDims) -> Result<Self> {
        dims.validate()?;
        let (big, d, ff) = (dims.model_dim, dims.bottleneck, dims.ffn_hidden);
        Ok(AdapterParams {
            dims,
            w1: Tensor::zeros(&[big, d]),
            b1: Tensor::zeros(&[d]),
            attn: AttnParams::zeros(d),
            w2: Tensor::zeros(&[d, d]),
            b2: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, ff]),
            ffn_b1: Tensor::zeros(&[ff]),
            ffn_w2: Tensor::zeros(&[ff, d]),
            ffn_b2: Tensor::zeros(&[d]),
            gamma: Tensor::zeros(&[1]),
            w3: Tensor::zeros(&[d, big]),
            b3: Tensor::zeros(&[big]),
        })
    }

    /// Training initialization: random inner weights, zero biases, `γ = 0` and
    /// `W3 = b3 = 0`, so the adapter starts as the identity map.
    pub fn init<R: Rng + ?Sized>(dims: AdapterDims, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let (big, d, ff) = (dims.model_dim, dims.bottleneck, dims.ffn_hidden);
        p.w1 = Tensor::randn(&[big, d], 1.0 / (big as f64).sqrt(), rng);
        p.attn = AttnParams::init(d, rng);
        p.w2 = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng);
        p.ffn_w1 = Tensor::randn(&[d, ff], 1.0 / (d as f64).sqrt(), rng);
        p.ffn_w2 = Tensor::randn(&[ff, d], 1.0 / (ff as f64).sqrt(), rng);
        Ok(p)
    }

    /// Every parameter, including `W3`, `b3` and `γ`, drawn at random. Used by
    /// gradient checks, where the zero-initialized output projection would
    /// block the signal.
    pub fn random<R: Rng + ?Sized>(dims: AdapterDims, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        crate::params::Parameters::visit_mut(&mut p, "", &mut |_, t| {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, std, rng);
        });
        Ok(p)
    }

    /// Exact learnable-scalar count of the enabled configuration.
    pub fn count_params(&self, flags: AdapterFlags) -> usize {
        count_params(self.dims, flags)
    }

    pub fn bind(&self, tape: &Tape<T>, prefix: &str, mode: Binding) -> AdapterVars<T> {
        let b = |name: &str, t: &Tensor<T>| bind_tensor(tape, join(prefix, name), t, mode);
        AdapterVars {
            heads: self.dims.heads,
            w1: b("W1", &self.w1),
            b1: b("b1", &self.b1),
            attn: self.attn.bind(tape, &join(prefix, "attn"), mode),
            w2: b("W2", &self.w2),
            b2: b("b2", &self.b2),
            ffn_w1: b("ffn.W1", &self.ffn_w1),
            ffn_b1: b("ffn.b1", &self.ffn_b1),
            ffn_w2: b("ffn.W2", &self.ffn_w2),
            ffn_b2: b("ffn.b2", &self.ffn_b2),
            gamma: b("gamma", &self.gamma),
            w3: b("W3", &self.w3),
            b3: b("b3", &self.b3),
        }
    }

    /// Applies the adapter to a single `N×D` token grid.
    pub fn forward(&self, x: &Tensor<T>, flags: AdapterFlags) -> Result<Tensor<T>> {
        g2a_forward(x, self, flags)
    }
}

/// Learnable scalars for the given dimensions and flags.
pub fn count_params(dims: AdapterDims, flags: AdapterFlags) -> usize {
    let (big, d, ff) = (dims.model_dim, dims.bottleneck, dims.ffn_hidden);
    let bottleneck = big * d + d + d * big + big;
    let mixing = d * d + d;
    let ffn = d * ff + ff + ff * d + d;
    let attn = if flags.attn {
        AttnParams::<f64>::num_scalars_per_block(d)
    } else {
        0
    };
    bottleneck + mixing + ffn + attn + usize::from(flags.gate)
}

/// Differentiable adapter over `[G·seq_len × D]` tokens.
pub fn g2a_forward_var<T: Scalar>(
    x: &Var<T>,
    p: &AdapterVars<T>,
    flags: AdapterFlags,
    seq_len: usize,
    gelu: GeluMode,
) -> Result<Var<T>> {
    let z = x.linear(&p.w1, &p.b1)?.gelu(gelu);
    let attend = |t: &Var<T>| -> Result<Var<T>> {
        if flags.attn {
            mhsa(t, &p.attn, p.heads, seq_len)
        } else {
            Ok(t.clone())
        }
    };
    let z_hat = attend(&z)?.linear(&p.w2, &p.b2)?;
    let ffn = attend(&z_hat)?
        .linear(&p.ffn_w1, &p.ffn_b1)?
        .gelu(gelu)
        .linear(&p.ffn_w2, &p.ffn_b2)?;
    let z_tilde = z_hat.add(&ffn)?;
    let z_gate = if flags.gate {
        z_tilde.mul_scalar_var(&p.gamma.sigmoid())?
    } else {
        z_tilde
    };
    x.add(&z_gate.linear(&p.w3, &p.b3)?)
}

/// Applies the adapter to one `N×D` token grid.
pub fn g2a_forward<T: Scalar>(x: &Tensor<T>, p: &AdapterParams<T>, flags: AdapterFlags) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.cols() != p.dims.model_dim {
        return Err(Error::dim("g2a_forward", x.shape(), p.w1.shape()));
    }
    let tape = Tape::new();
    let vars = p.bind(&tape, "", Binding::Frozen);
    let out = g2a_forward_var(&tape.constant(x), &vars, flags, x.rows(), GeluMode::Exact)?;
    Ok(out.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gelu, sigmoid};
    use crate::params::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(big: usize, d: usize, h: usize, ff: usize) -> AdapterDims {
        AdapterDims {
            model_dim: big,
            bottleneck: d,
            heads: h,
            ffn_hidden: ff,
        }
    }

    #[test]
    fn validation() {
        assert!(dims(4, 4, 1, 2).validate().is_err());
        assert!(dims(8, 3, 2, 2).validate().is_err());
        assert!(dims(8, 4, 2, 2).validate().is_ok());
        assert!(matches!(AdapterParams::<f64>::zeros(dims(8, 3, 2, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn hand_summed_count() {
        // W1 8 + b1 2 + W2 4 + b2 2 + ffn (8 + 4 + 8 + 2) + W3 8 + b3 4
        let dm = dims(4, 2, 1, 4);
        assert_eq!(count_params(dm, AdapterFlags { attn: false, gate: false }), 50);
        assert_eq!(count_params(dm, AdapterFlags { attn: false, gate: true }), 51);
        // + 4·(2·2) + 4·2
        assert_eq!(count_params(dm, AdapterFlags { attn: true, gate: false }), 74);
        assert_eq!(count_params(dm, AdapterFlags { attn: true, gate: true }), 75);
        let p = AdapterParams::<f64>::zeros(dm).unwrap();
        assert_eq!(p.num_scalars(), 75);
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AdapterParams::<f64>::init(dims(8, 4, 2, 8), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        for flags in AdapterFlags::ALL {
            assert_eq!(g2a_forward(&x, &p, flags).unwrap(), x);
        }
    }

    #[test]
    fn saturated_gate_closes_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = AdapterParams::<f64>::random(dims(8, 4, 2, 8), 0.5, &mut rng).unwrap();
        p.gamma = Tensor::vector(&[-40.0]);
        p.b3 = Tensor::zeros(&[8]);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let y = g2a_forward(&x, &p, AdapterFlags { attn: true, gate: true }).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = AttnParams::<f64>::init(4, &mut rng);
        let z = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = attn.bind(&tape, "", Binding::Frozen);
        let out = mhsa(&tape.constant(&z), &vars, 2, 1).unwrap().value();
        let expect = crate::numerics::matmul(&crate::numerics::matmul(&z, &attn.wv).unwrap(), &attn.wo).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut attn = AttnParams::<f64>::init(4, &mut rng);
        attn.wq = Tensor::zeros(&[4, 4]);
        let z = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = attn.bind(&tape, "", Binding::Frozen);
        let out = mhsa(&tape.constant(&z), &vars, 2, 3).unwrap().value();
        let v = crate::numerics::matmul(&z, &attn.wv).unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..3 {
            for j in 0..4 {
                mean[j] += v.at(i, j) / 3.0;
            }
        }
        let expect = crate::numerics::matmul(&Tensor::matrix(&[mean]).unwrap(), &attn.wo).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at(i, j) - expect.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_single_head_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let attn = AttnParams::<f64> {
            bq: Tensor::vector(&[0.1, -0.2]),
            bk: Tensor::vector(&[0.05, 0.0]),
            bv: Tensor::vector(&[-0.3, 0.2]),
            bo: Tensor::vector(&[0.01, 0.02]),
            ..AttnParams::init(2, &mut rng)
        };
        let z = [[0.5, -1.0], [1.5, 0.25]];
        let tape = Tape::new();
        let vars = attn.bind(&tape, "", Binding::Frozen);
        let zt = Tensor::matrix(&[z[0].to_vec(), z[1].to_vec()]).unwrap();
        let out = mhsa(&tape.constant(&zt), &vars, 1, 2).unwrap().value();

        let lin = |x: &[f64; 2], w: &Tensor<f64>, b: &Tensor<f64>| -> [f64; 2] {
            let mut o = [b.data()[0], b.data()[1]];
            for c in 0..2 {
                for r in 0..2 {
                    o[c] += x[r] * w.at(r, c);
                }
            }
            o
        };
        let q: Vec<_> = z.iter().map(|t| lin(t, &attn.wq, &attn.bq)).collect();
        let k: Vec<_> = z.iter().map(|t| lin(t, &attn.wk, &attn.bk)).collect();
        let v: Vec<_> = z.iter().map(|t| lin(t, &attn.wv, &attn.bv)).collect();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let p0 = s0.exp() / (s0.exp() + s1.exp());
            let p1 = 1.0 - p0;
            let mixed = [p0 * v[0][0] + p1 * v[1][0], p0 * v[0][1] + p1 * v[1][1]];
            let o = lin(&mixed, &attn.wo, &attn.bo);
            assert!((out.at(i, 0) - o[0]).abs() < 1e-12);
            assert!((out.at(i, 1) - o[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn unrolled_scalar_adapter() {
        // N = 1, D = 2, d = 1, h = 1, d_ff = 1.
        let p = AdapterParams::<f64> {
            dims: dims(2, 1, 1, 1),
            w1: Tensor::matrix(&[vec![0.7], vec![-0.4]]).unwrap(),
            b1: Tensor::vector(&[0.1]),
            attn: AttnParams {
                wq: Tensor::matrix(&[vec![0.3]]).unwrap(),
                bq: Tensor::vector(&[0.0]),
                wk: Tensor::matrix(&[vec![-0.2]]).unwrap(),
                bk: Tensor::vector(&[0.1]),
                wv: Tensor::matrix(&[vec![1.3]]).unwrap(),
                bv: Tensor::vector(&[-0.05]),
                wo: Tensor::matrix(&[vec![0.9]]).unwrap(),
                bo: Tensor::vector(&[0.02]),
            },
            w2: Tensor::matrix(&[vec![1.1]]).unwrap(),
            b2: Tensor::vector(&[-0.1]),
            ffn_w1: Tensor::matrix(&[vec![0.8]]).unwrap(),
            ffn_b1: Tensor::vector(&[0.05]),
            ffn_w2: Tensor::matrix(&[vec![-0.6]]).unwrap(),
            ffn_b2: Tensor::vector(&[0.03]),
            gamma: Tensor::vector(&[0.4]),
            w3: Tensor::matrix(&[vec![0.5, -1.2]]).unwrap(),
            b3: Tensor::vector(&[0.01, 0.02]),
        };
        let x = [1.5, -0.5];
        let g = |v: f64| gelu(&Tensor::vector(&[v])).data()[0];
        // single-token attention: softmax weight 1, output = (z·wv + bv)·wo + bo
        let attn = |z: f64| (z * 1.3 - 0.05) * 0.9 + 0.02;
        for flags in AdapterFlags::ALL {
            let z = g(x[0] * 0.7 + x[1] * -0.4 + 0.1);
            let za = if flags.attn { attn(z) } else { z };
            let zh = za * 1.1 - 0.1;
            let zh_a = if flags.attn { attn(zh) } else { zh };
            let zt = zh + (g(zh_a * 0.8 + 0.05) * -0.6 + 0.03);
            let zg = if flags.gate { sigmoid(0.4) * zt } else { zt };
            let expect = [x[0] + zg * 0.5 + 0.01, x[1] + zg * -1.2 + 0.02];
            let xt = Tensor::matrix(&[x.to_vec()]).unwrap();
            let out = g2a_forward(&xt, &p, flags).unwrap();
            assert!((out.data()[0] - expect[0]).abs() < 1e-12, "{flags:?}");
            assert!((out.data()[1] - expect[1]).abs() < 1e-12, "{flags:?}");
        }
    }

    #[test]
    fn dimension_error_on_wrong_width() {
        let p = AdapterParams::<f64>::zeros(dims(8, 4, 2, 8)).unwrap();
        let x = Tensor::zeros(&[2, 6]);
        assert!(matches!(g2a_forward(&x, &p, AdapterFlags::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn token_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = AdapterParams::<f64>::random(dims(6, 2, 2, 4), 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::matrix(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        for flags in AdapterFlags::ALL {
            let y = g2a_forward(&x, &p, flags).unwrap();
            let yp = g2a_forward(&xp, &p, flags).unwrap();
            for (r, &i) in perm.iter().enumerate() {
                for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_names_match_binding() {
        let p = AdapterParams::<f64>::zeros(dims(4, 2, 1, 4)).unwrap();
        let tape = Tape::new();
        let _ = p.bind(&tape, "adapter.L0", Binding::Trainable);
        let visited: Vec<String> = p.named_tensors("adapter.L0").into_iter().map(|(n, _)| n).collect();
        let mut bound = tape.param_names();
        let mut v = visited.clone();
        bound.sort();
        v.sort();
        assert_eq!(bound, v);
    }
}

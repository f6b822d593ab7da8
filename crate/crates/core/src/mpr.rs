//! Multi-perspective representation: mean-aggregate the sub-perspective
//! features into one local summary `e`, fan it out through `K` independent
//! two-layer heads, and L2-normalize every head output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{GeluMode, Tape, Tensor, Var};
use crate::params::{bind_tensor, impl_parameters, join, Binding, Parameters};
use crate::scalar::Scalar;

/// One `Linear → GELU → Linear` head.
#[derive(Clone, Debug, PartialEq)]
pub struct MprHead<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl_parameters!(MprHead { w1 => "W1", b1 => "b1", w2 => "W2", b2 => "b2" });

pub struct MprHeadVars<T> {
    pub w1: Var<T>,
    pub b1: Var<T>,
    pub w2: Var<T>,
    pub b2: Var<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MprParams<T> {
    pub heads: Vec<MprHead<T>>,
    /// Added to the norm before dividing.
    pub eps: T,
    /// Dropout between the two layers of each head, training mode only.
    pub dropout: f64,
}

impl<T: Scalar> Parameters<T> for MprParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (k, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("h{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("h{k}")), f);
        }
    }
}

pub const DEFAULT_EPS: f64 = 1e-8;

impl<T: Scalar> MprParams<T> {
    pub fn zeros(k: usize, dim: usize, hidden: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("MPR needs at least one head".into()));
        }
        let head = MprHead {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        };
        Ok(MprParams {
            heads: vec![head; k],
            eps: T::lit(DEFAULT_EPS),
            dropout: 0.0,
        })
    }

    /// Independent Gaussian weights per head, zero biases.
    pub fn init<R: Rng + ?Sized>(k: usize, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(k, dim, hidden)?;
        for h in &mut p.heads {
            h.w1 = Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng);
            h.w2 = Tensor::randn(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng);
        }
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.heads[0].w1.shape()[0]
    }

    pub fn bind(&self, tape: &Tape<T>, prefix: &str, mode: Binding) -> Vec<MprHeadVars<T>> {
        self.heads
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let p = join(prefix, &format!("h{k}"));
                let b = |name: &str, t: &Tensor<T>| bind_tensor(tape, join(&p, name), t, mode);
                MprHeadVars {
                    w1: b("W1", &h.w1),
                    b1: b("b1", &h.b1),
                    w2: b("W2", &h.w2),
                    b2: b("b2", &h.b2),
                }
            })
            .collect()
    }
}

/// Mean of the `K` sub-perspective rows.
pub fn aggregate<T: Scalar>(g_l: &Tensor<T>) -> Result<Tensor<T>> {
    if g_l.rank() != 2 {
        return Err(Error::Argument(format!(
            "sub-perspective set must be K×D, got {:?}",
            g_l.shape()
        )));
    }
    let (k, d) = (g_l.rows(), g_l.cols());
    let mut out = vec![T::zero(); d];
    for i in 0..k {
        for (o, &v) in out.iter_mut().zip(g_l.row(i)) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_usize_lossy(k);
    out.iter_mut().for_each(|x| *x *= inv);
    Tensor::new(vec![d], out)
}

/// Inverted dropout applied in training mode.
pub struct Dropout<'r, R: ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

/// Batched heads: `e` is `[B × D]`, the result `[B·K × D]` with the `K`
/// perspectives of sample `b` in rows `b·K .. (b+1)·K`.
pub fn mpr_forward_var<T: Scalar, R: Rng + ?Sized>(
    e: &Var<T>,
    heads: &[MprHeadVars<T>],
    eps: T,
    gelu: GeluMode,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<Var<T>> {
    let k = heads.len();
    if k == 0 {
        return Err(Error::Argument("MPR needs at least one head".into()));
    }
    let b = e.shape()[0];
    let mut outs = Vec::with_capacity(k);
    for h in heads {
        let mut hidden = e.linear(&h.w1, &h.b1)?.gelu(gelu);
        if let Some(drop) = dropout.as_mut().filter(|d| d.rate > 0.0) {
            let keep = 1.0 - drop.rate;
            let shape = hidden.shape();
            let mask: Vec<T> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    if drop.rng.random::<f64>() < keep {
                        T::lit(1.0 / keep)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            hidden = hidden.mul(&e.tape().constant(&Tensor::new(shape, mask)?))?;
        }
        outs.push(hidden.linear(&h.w2, &h.b2)?.l2_normalize_rows(eps));
    }
    let stacked = Var::concat_rows(&outs)?;
    let order: Vec<usize> = (0..b).flat_map(|i| (0..k).map(move |j| j * b + i)).collect();
    stacked.gather_rows(&order)
}

/// Evaluation-mode forward for one summary vector `e ∈ R^D`; returns `K × D`.
pub fn mpr_forward<T: Scalar>(e: &Tensor<T>, p: &MprParams<T>) -> Result<Tensor<T>> {
    if e.numel() != p.dim() {
        return Err(Error::dim("mpr_forward", e.shape(), p.heads[0].w1.shape()));
    }
    let tape = Tape::new();
    let heads = p.bind(&tape, "", Binding::Frozen);
    let e = tape.constant(&e.clone().reshape(vec![1, p.dim()])?);
    let out = mpr_forward_var::<T, rand_chacha::ChaCha8Rng>(&e, &heads, p.eps, GeluMode::Exact, None)?;
    Ok(out.value())
}

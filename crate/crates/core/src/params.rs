//! Named traversal over learnable tensors.

use crate::error::{Error, Result};
use crate::numerics::{Grads, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Whether bound parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

pub(crate) fn bind_tensor<T: Scalar>(tape: &Tape<T>, name: String, t: &Tensor<T>, mode: Binding) -> Var<T> {
    match mode {
        Binding::Trainable => tape.param(name, t),
        Binding::Frozen => tape.constant(t),
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A collection of named tensors. Names are dotted paths below `prefix`; the
/// same names are used when binding to a tape, so gradients can be routed back
/// by name.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// All values concatenated in visit order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`Parameters::flatten`].
    fn unflatten(&mut self, values: &[T]) -> Result<()> {
        let total = self.num_scalars();
        if values.len() != total {
            return Err(Error::Shape(format!("{} values for {total} parameters", values.len())));
        }
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Copies gradients of the parameters bound under `prefix` out of `grads`.
    /// Tensors the loss did not reach have their gradient cleared.
    fn load_grads(&mut self, prefix: &str, grads: &Grads<T>) {
        self.visit_mut(prefix, &mut |name, t| match grads.named(&name) {
            Some(g) => t.set_grad(g, false).expect("gradient shape matches parameter"),
            None => t.clear_grad(),
        });
    }

    /// Overwrites every tensor under `prefix` with the equally named,
    /// equally shaped entry of `bank`.
    fn load_named(&mut self, prefix: &str, bank: &[(String, Tensor<T>)]) -> Result<()> {
        let mut missing = None;
        self.visit_mut(prefix, &mut |name, t| match bank.iter().find(|(n, _)| *n == name) {
            Some((_, src)) if src.shape() == t.shape() => *t = src.clone(),
            _ => {
                missing.get_or_insert(name);
            }
        });
        match missing {
            Some(name) => Err(Error::Config(format!("missing or misshapen entry {name:?}"))),
            None => Ok(()),
        }
    }

    /// Gradients in visit order, zeros where absent.
    fn flatten_grads(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| match t.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(T::zero(), t.numel())),
        });
        out
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &format!("L{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("L{i}")), f);
        }
    }
}

/// Implements [`Parameters`] for a struct whose listed fields are tensors or
/// nested parameter sets.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::params::Parameters<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numerics::Tensor<T>),
            ) {
                $( $crate::params::Parameters::visit(&self.$field, &$crate::params::join(prefix, $name), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numerics::Tensor<T>),
            ) {
                $( $crate::params::Parameters::visit_mut(&mut self.$field, &$crate::params::join(prefix, $name), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

impl<T: Scalar> Parameters<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self)
    }
}

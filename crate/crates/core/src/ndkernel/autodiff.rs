//! Function-level derivatives built on [`Tape`] sweeps.

use super::{Array, ParamSet, Tape, Var};
use crate::error::{shape_err, Result};

/// Value and gradient of a scalar loss with respect to every entry of
/// `params`. The closure builds the loss on a fresh tape, binding parameters
/// through [`Tape::param`]; entries it never binds (or that do not reach the
/// loss) receive zero gradients.
pub fn gradient<'a, F>(params: &'a ParamSet, build: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape<'a>, &'a ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let loss_value = tape.value(loss).clone();
    if loss_value.len() != 1 {
        return Err(shape_err(
            "gradient",
            format!("loss must be scalar, got shape {:?}", loss_value.shape()),
        ));
    }
    let adj = tape.backward(loss, None)?;
    let mut grads = params.zeros_like();
    for (name, var) in tape.bound_params() {
        if let (Some(slot), Some(g)) = (grads.get_mut(name), adj[var.index()].as_ref()) {
            slot.add_scaled(g, 1.0)?;
        }
    }
    Ok((loss_value.item()?, grads))
}

/// A function recorded once at a fixed input, for repeated Jacobian products.
pub struct Linearization<'a> {
    tape: Tape<'a>,
    input: Var,
    output: Var,
}

impl<'a> Linearization<'a> {
    pub fn record<F>(f: F, x: &'a Array) -> Result<Self>
    where
        F: FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let input = tape.input_ref(x);
        let output = f(&mut tape, input)?;
        Ok(Linearization {
            tape,
            input,
            output,
        })
    }

    pub fn output(&self) -> &Array {
        self.tape.value(self.output)
    }

    pub fn input_shape(&self) -> &[usize] {
        self.tape.shape(self.input)
    }

    /// `J(x) · v`.
    pub fn jvp(&self, v: &Array) -> Result<Array> {
        let tan = self.tape.tangents(&[(self.input, v)])?;
        Ok(tan[self.output.index()]
            .clone()
            .unwrap_or_else(|| Array::zeros(self.output().shape().to_vec())))
    }

    /// `uᵀ J(x)`, shaped like `x`.
    pub fn vjp(&self, u: &Array) -> Result<Array> {
        let adj = self.tape.backward(self.output, Some(u))?;
        Ok(adj[self.input.index()]
            .clone()
            .unwrap_or_else(|| Array::zeros(self.input_shape().to_vec())))
    }
}

/// Jacobian-vector product `J_f(x) · v` by a forward tangent sweep.
pub fn jvp<'a, F>(f: F, x: &'a Array, v: &Array) -> Result<Array>
where
    F: FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
{
    x.check_same("jvp", v)?;
    Linearization::record(f, x)?.jvp(v)
}

/// Vector-Jacobian product `uᵀ J_f(x)` by a reverse sweep.
pub fn vjp<'a, F>(f: F, x: &'a Array, u: &Array) -> Result<Array>
where
    F: FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
{
    Linearization::record(f, x)?.vjp(u)
}

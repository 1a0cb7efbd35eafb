//! Single-step building blocks, recorded on a [`GradTape`].

use crate::tensor::{GradTape, ParamId, Var};

/// `ReLU(W x + b)`.
pub fn embed(tape: &mut GradTape<'_>, weight: ParamId, bias: ParamId, x: Var) -> Var {
    let pre = tape.matvec(weight, x);
    let pre = tape.add_param(pre, bias);
    tape.relu(pre)
}

/// Affine head `W h + b`, no activation.
pub fn project_output(tape: &mut GradTape<'_>, weight: ParamId, bias: ParamId, h: Var) -> Var {
    let out = tape.matvec(weight, h);
    tape.add_param(out, bias)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut GradTape<'_>, hidden: usize) -> Self {
        Self {
            h: tape.input(vec![0.0; hidden]),
            c: tape.input(vec![0.0; hidden]),
        }
    }
}

/// LSTM kernels; gate blocks of `4D` rows ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_step(tape: &mut GradTape<'_>, w: &LstmWeights, state: LstmState, x: Var) -> LstmState {
    let d = w.hidden;
    let a = tape.matvec(w.input, x);
    let b = tape.matvec(w.recurrent, state.h);
    let pre = tape.add(a, b);
    let pre = tape.add_param(pre, w.bias);
    let gate = |tape: &mut GradTape<'_>, k: usize| tape.slice(pre, k * d, d);
    let i = gate(tape, 0);
    let i = tape.sigmoid(i);
    let f = gate(tape, 1);
    let f = tape.sigmoid(f);
    let g = gate(tape, 2);
    let g = tape.tanh(g);
    let o = gate(tape, 3);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    LstmState { h, c }
}

use super::tape::{Tape, Var};

/// Tape handles of one vanilla LSTM cell (no peepholes).
///
/// Gate rows are stacked in the order input, forget, cell, output:
/// `w_ih: [4H, in]`, `w_hh: [4H, H]`, `bias: [4H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One step: returns `(h, c)`.
///
/// ```text
/// i = σ(Wᵢx + Uᵢh + bᵢ)    f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_g x + U_g h + b_g)    o = σ(W_o x + U_o h + b_o)
/// c' = f⊙c + i⊙g    h' = o⊙tanh(c')
/// ```
pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> (Var, Var) {
    let hidden = tape.value(h_prev).shape()[1];
    let gate_rows = tape.value(p.w_hh).shape()[0];
    assert_eq!(
        gate_rows,
        4 * hidden,
        "lstm: hidden state has width {hidden}, weights expect {}",
        gate_rows / 4
    );
    assert_eq!(
        tape.value(c_prev).shape(),
        tape.value(h_prev).shape(),
        "lstm: cell and hidden state shapes differ"
    );
    let from_x = tape.linear(x, p.w_ih, Some(p.bias));
    let from_h = tape.linear(h_prev, p.w_hh, None);
    let gates = tape.add(from_x, from_h);
    let i = tape.slice_cols(gates, 0, hidden);
    let f = tape.slice_cols(gates, hidden, hidden);
    let g = tape.slice_cols(gates, 2 * hidden, hidden);
    let o = tape.slice_cols(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed);
    (h, c)
}

//! LSTM, GRU and tanh-RNN cells, sequence scans and bidirectional wrappers.
//!
//! Gate weights are stored stacked, PyTorch style: `weight_ih` is
//! `[G·D, C]`, `weight_hh` is `[G·D, D]`, with gate order `i, f, c, o` for
//! the LSTM and `r, z, n` for the GRU. Each gate keeps both an input-side and
//! a hidden-side bias. For the LSTM and tanh-RNN the cell only ever sees
//! their sum, which is formed once per scan.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, Init, Module, Param};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
    Rnn,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Rnn => "rnn",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "rnn" | "tanh" => Ok(CellKind::Rnn),
            other => Err(Error::Config(format!("unknown cell kind '{other}'"))),
        }
    }
}

/// Parameters of one recurrent direction.
#[derive(Clone, Debug)]
pub struct CellParams {
    kind: CellKind,
    input: usize,
    hidden: usize,
    pub weight_ih: Param,
    pub weight_hh: Param,
    pub bias_ih: Param,
    pub bias_hh: Param,
}

pub type LstmCellParams = CellParams;
pub type GruCellParams = CellParams;
pub type RnnCellParams = CellParams;

impl CellParams {
    /// Every weight and bias uniform in ±1/√D.
    pub fn new(init: &mut Init, kind: CellKind, input: usize, hidden: usize) -> Self {
        let rows = kind.gates() * hidden;
        let bound = 1.0 / (hidden as f64).sqrt();
        CellParams {
            kind,
            input,
            hidden,
            weight_ih: init.uniform(&[rows, input], bound),
            weight_hh: init.uniform(&[rows, hidden], bound),
            bias_ih: init.uniform(&[rows], bound),
            bias_hh: init.uniform(&[rows], bound),
        }
    }

    pub fn zeros(init: &mut Init, kind: CellKind, input: usize, hidden: usize) -> Self {
        let rows = kind.gates() * hidden;
        CellParams {
            kind,
            input,
            hidden,
            weight_ih: init.zeros(&[rows, input]),
            weight_hh: init.zeros(&[rows, hidden]),
            bias_ih: init.zeros(&[rows]),
            bias_hh: init.zeros(&[rows]),
        }
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// `(W_x, W_h, b_ih, b_hh)` for one gate, in stacked order.
    pub fn gate(&self, gate: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        assert!(gate < self.kind.gates());
        let d = self.hidden;
        let rows = |t: &Tensor, width: usize| {
            Tensor::new(&[d, width], t.data()[gate * d * width..(gate + 1) * d * width].to_vec()).expect("gate block")
        };
        let vec = |t: &Tensor| Tensor::new(&[d], t.data()[gate * d..(gate + 1) * d].to_vec()).expect("gate bias");
        (
            rows(&self.weight_ih.value, self.input),
            rows(&self.weight_hh.value, self.hidden),
            vec(&self.bias_ih.value),
            vec(&self.bias_hh.value),
        )
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let w_ih = tape.param(&self.weight_ih);
        let w_hh = tape.param(&self.weight_hh);
        let b_ih = tape.param(&self.bias_ih);
        let b_hh = tape.param(&self.bias_hh);
        Bound {
            kind: self.kind,
            hidden: self.hidden,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input {
            return Err(Error::ShapeMismatch {
                op: "recurrent input",
                lhs: vec![width],
                rhs: vec![self.input],
            });
        }
        Ok(())
    }
}

impl Module for CellParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight_ih"), &self.weight_ih);
        f(&join(prefix, "weight_hh"), &self.weight_hh);
        f(&join(prefix, "bias_ih"), &self.bias_ih);
        f(&join(prefix, "bias_hh"), &self.bias_hh);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight_ih"), &mut self.weight_ih);
        f(&join(prefix, "weight_hh"), &mut self.weight_hh);
        f(&join(prefix, "bias_ih"), &mut self.bias_ih);
        f(&join(prefix, "bias_hh"), &mut self.bias_hh);
    }
}

/// Cell parameters registered on a tape for the duration of one scan.
struct Bound {
    kind: CellKind,
    hidden: usize,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
}

/// Recurrent state: `h`, plus `c` for the LSTM.
#[derive(Clone, Debug)]
pub struct State {
    pub h: Var,
    pub c: Option<Var>,
}

impl Bound {
    fn zero_state(&self, batch: usize) -> State {
        let zeros = || Var::constant(Tensor::zeros(&[batch, self.hidden]));
        State {
            h: zeros(),
            c: (self.kind == CellKind::Lstm).then(zeros),
        }
    }

    /// Input-side projection for a whole block of steps. LSTM/RNN leave the
    /// bias out (it is added once as `b_ih + b_hh`); GRU keeps `b_ih` here
    /// because its candidate gate needs the two biases apart.
    fn project_input(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        match self.kind {
            CellKind::Gru => tape.linear(x, &self.w_ih, Some(&self.b_ih)),
            _ => tape.linear(x, &self.w_ih, None),
        }
    }

    fn bias_sum(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match self.kind {
            CellKind::Gru => Ok(None),
            _ => tape.add(&self.b_ih, &self.b_hh).map(Some),
        }
    }

    /// One step from a pre-projected input `xp: [N, G·D]`.
    fn step(&self, tape: &mut Tape, xp: &Var, state: &State, bias: Option<&Var>) -> Result<State> {
        let d = self.hidden;
        match self.kind {
            CellKind::Lstm => {
                let hp = tape.linear(&state.h, &self.w_hh, None)?;
                let s = tape.add(xp, &hp)?;
                let z = tape.add(&s, bias.expect("lstm bias"))?;
                let zi = tape.slice_last(&z, 0, d)?;
                let zf = tape.slice_last(&z, d, d)?;
                let zc = tape.slice_last(&z, 2 * d, d)?;
                let zo = tape.slice_last(&z, 3 * d, d)?;
                let i = tape.sigmoid(&zi);
                let f = tape.sigmoid(&zf);
                let g = tape.tanh(&zc);
                let o = tape.sigmoid(&zo);
                let c_prev = state.c.as_ref().expect("lstm cell state");
                let keep = tape.mul(&f, c_prev)?;
                let write = tape.mul(&i, &g)?;
                let c = tape.add(&keep, &write)?;
                let tc = tape.tanh(&c);
                let h = tape.mul(&o, &tc)?;
                Ok(State { h, c: Some(c) })
            }
            CellKind::Gru => {
                let gh = tape.linear(&state.h, &self.w_hh, Some(&self.b_hh))?;
                let xr = tape.slice_last(xp, 0, d)?;
                let xz = tape.slice_last(xp, d, d)?;
                let xn = tape.slice_last(xp, 2 * d, d)?;
                let hr = tape.slice_last(&gh, 0, d)?;
                let hz = tape.slice_last(&gh, d, d)?;
                let hn = tape.slice_last(&gh, 2 * d, d)?;
                let sr = tape.add(&xr, &hr)?;
                let r = tape.sigmoid(&sr);
                let sz = tape.add(&xz, &hz)?;
                let z = tape.sigmoid(&sz);
                let gated = tape.mul(&r, &hn)?;
                let sn = tape.add(&xn, &gated)?;
                let n = tape.tanh(&sn);
                let one_minus_z = tape.affine(&z, -1.0, 1.0);
                let new_part = tape.mul(&one_minus_z, &n)?;
                let old_part = tape.mul(&z, &state.h)?;
                let h = tape.add(&new_part, &old_part)?;
                Ok(State { h, c: None })
            }
            CellKind::Rnn => {
                let hp = tape.linear(&state.h, &self.w_hh, None)?;
                let s = tape.add(xp, &hp)?;
                let z = tape.add(&s, bias.expect("rnn bias"))?;
                Ok(State {
                    h: tape.tanh(&z),
                    c: None,
                })
            }
        }
    }
}

/// Single cell application on a batch of inputs `x: [N, C]` (or `[C]`).
pub fn cell_forward(tape: &mut Tape, p: &CellParams, x: &Var, state: &State) -> Result<State> {
    p.check_input(x.value().last_dim())?;
    let b = p.bind(tape);
    let xp = b.project_input(tape, x)?;
    let bias = b.bias_sum(tape)?;
    b.step(tape, &xp, state, bias.as_ref())
}

/// Runs a cell over `xs: [N, T, C]` from a zero state and returns the hidden
/// state at every step, `[N, T, D]`. With `reverse` the sequence is read
/// back to front and outputs are put back in original order.
pub fn scan(tape: &mut Tape, p: &CellParams, xs: &Var, reverse: bool) -> Result<Var> {
    if xs.value().rank() != 3 {
        return Err(Error::InvalidShape {
            op: "scan",
            detail: format!("expected [N, T, C], got {:?}", xs.shape()),
        });
    }
    p.check_input(xs.shape()[2])?;
    let (batch, steps) = (xs.shape()[0], xs.shape()[1]);
    let b = p.bind(tape);
    let xp = b.project_input(tape, xs)?;
    let bias = b.bias_sum(tape)?;
    let mut state = b.zero_state(batch);
    let mut outputs: Vec<Option<Var>> = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let xt = tape.select(&xp, 1, t)?;
        state = b.step(tape, &xt, &state, bias.as_ref())?;
        outputs[t] = Some(state.h.clone());
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    tape.stack(&outputs, 1)
}

/// Forward scan plus an optional order-restored backward scan, concatenated
/// on the channel axis.
#[derive(Clone, Debug)]
pub struct BiRnn {
    pub forward: CellParams,
    pub backward: Option<CellParams>,
}

pub type BiRnnParams = BiRnn;

impl BiRnn {
    pub fn new(init: &mut Init, kind: CellKind, input: usize, hidden: usize, bidirectional: bool) -> Self {
        let forward = CellParams::new(init, kind, input, hidden);
        let backward = bidirectional.then(|| CellParams::new(init, kind, input, hidden));
        BiRnn { forward, backward }
    }

    pub fn from_cells(forward: CellParams, backward: Option<CellParams>) -> Result<Self> {
        if let Some(b) = &backward {
            let same = b.kind == forward.kind && b.input == forward.input && b.hidden == forward.hidden;
            if !same {
                return Err(Error::Config(
                    "both directions must share cell kind, input and hidden size".into(),
                ));
            }
        }
        Ok(BiRnn { forward, backward })
    }

    pub fn kind(&self) -> CellKind {
        self.forward.kind
    }

    pub fn input_size(&self) -> usize {
        self.forward.input
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden
    }

    pub fn directions(&self) -> usize {
        if self.backward.is_some() {
            2
        } else {
            1
        }
    }

    pub fn output_width(&self) -> usize {
        self.directions() * self.forward.hidden
    }

    /// `xs: [N, T, C]` to `[N, T, directions·D]`.
    pub fn forward(&self, tape: &mut Tape, xs: &Var) -> Result<Var> {
        let fwd = scan(tape, &self.forward, xs, false)?;
        match &self.backward {
            Some(bwd) => {
                let back = scan(tape, bwd, xs, true)?;
                tape.concat_last(&fwd, &back)
            }
            None => Ok(fwd),
        }
    }
}

impl Module for BiRnn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.forward.visit(&join(prefix, "forward"), f);
        if let Some(b) = &self.backward {
            b.visit(&join(prefix, "backward"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.forward.visit_mut(&join(prefix, "forward"), f);
        if let Some(b) = &mut self.backward {
            b.visit_mut(&join(prefix, "backward"), f);
        }
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.reshape(&[1, x.numel()]),
        2 => Ok(x.clone()),
        _ => Err(Error::InvalidShape {
            op: "cell",
            detail: format!("expected [C] or [N, C], got {:?}", x.shape()),
        }),
    }
}

fn restore(t: Tensor, like: &Tensor) -> Tensor {
    if like.rank() == 1 {
        t.reshape(&[t.numel()]).expect("single row")
    } else {
        t
    }
}

fn check_state(p: &CellParams, h: &Tensor) -> Result<()> {
    if h.last_dim() != p.hidden {
        return Err(Error::ShapeMismatch {
            op: "recurrent state",
            lhs: h.shape().to_vec(),
            rhs: vec![p.hidden],
        });
    }
    Ok(())
}

/// One LSTM step on plain tensors; `x: [C]` or `[N, C]`. Returns `(h, c)`.
pub fn lstm_cell(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, p: &CellParams) -> Result<(Tensor, Tensor)> {
    if p.kind != CellKind::Lstm {
        return Err(Error::Config(format!("lstm_cell given {} parameters", p.kind.name())));
    }
    check_state(p, h_prev)?;
    check_state(p, c_prev)?;
    tensor::same_shape("lstm state", h_prev, c_prev)?;
    let mut tape = Tape::no_grad();
    let state = State {
        h: Var::constant(as_batch(h_prev)?),
        c: Some(Var::constant(as_batch(c_prev)?)),
    };
    let next = cell_forward(&mut tape, p, &Var::constant(as_batch(x)?), &state)?;
    let c = next.c.expect("lstm returns c").into_value();
    Ok((restore(next.h.into_value(), x), restore(c, x)))
}

fn simple_cell(kind: CellKind, x: &Tensor, h_prev: &Tensor, p: &CellParams) -> Result<Tensor> {
    if p.kind != kind {
        return Err(Error::Config(format!(
            "{}_cell given {} parameters",
            kind.name(),
            p.kind.name()
        )));
    }
    check_state(p, h_prev)?;
    let mut tape = Tape::no_grad();
    let state = State {
        h: Var::constant(as_batch(h_prev)?),
        c: None,
    };
    let next = cell_forward(&mut tape, p, &Var::constant(as_batch(x)?), &state)?;
    Ok(restore(next.h.into_value(), x))
}

pub fn gru_cell(x: &Tensor, h_prev: &Tensor, p: &CellParams) -> Result<Tensor> {
    simple_cell(CellKind::Gru, x, h_prev, p)
}

pub fn rnn_cell(x: &Tensor, h_prev: &Tensor, p: &CellParams) -> Result<Tensor> {
    simple_cell(CellKind::Rnn, x, h_prev, p)
}

fn as_sequences(xs: &Tensor) -> Result<Tensor> {
    match xs.rank() {
        2 => xs.reshape(&[1, xs.shape()[0], xs.shape()[1]]),
        3 => Ok(xs.clone()),
        _ => Err(Error::InvalidShape {
            op: "scan",
            detail: format!("expected [T, C] or [N, T, C], got {:?}", xs.shape()),
        }),
    }
}

fn drop_batch(out: Tensor, like: &Tensor) -> Tensor {
    if like.rank() == 2 {
        out.reshape(&out.shape()[1..]).expect("single sequence")
    } else {
        out
    }
}

/// Scan over `xs: [T, C]` (or `[N, T, C]`) from a zero state.
pub fn rnn_scan(xs: &Tensor, p: &CellParams, reverse: bool) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let out = scan(&mut tape, p, &Var::constant(as_sequences(xs)?), reverse)?;
    Ok(drop_batch(out.into_value(), xs))
}

/// Scan over a list of step vectors, each `[C]`.
pub fn rnn_scan_steps(steps: &[Tensor], p: &CellParams, reverse: bool) -> Result<Tensor> {
    if steps.is_empty() {
        return Err(Error::EmptySequence);
    }
    let refs: Vec<&Tensor> = steps.iter().collect();
    rnn_scan(&tensor::stack(&refs, 0)?, p, reverse)
}

/// Bidirectional scan of `xs: [T, C]` (or `[N, T, C]`); output width `2D`.
pub fn bilstm(xs: &Tensor, p: &BiRnn) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let out = p.forward(&mut tape, &Var::constant(as_sequences(xs)?))?;
    Ok(drop_batch(out.into_value(), xs))
}

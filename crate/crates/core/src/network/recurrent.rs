//! Convolutional LSTM and GRU cells.
//!
//! Both cells use the same spatial kernel for the input and hidden paths
//! with "same" padding. A missing state stands for the all-zero initial
//! state; the hidden-path convolutions are skipped in that case.

use motseg_autograd::Var;
use serde::{Deserialize, Serialize};

use super::params::{Ctx, Init};
use crate::error::{Error, Result};

/// Gain of the scaled-normal init for recurrent weights.
pub const RECURRENT_GAIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug)]
pub enum CellState {
    Lstm { h: Var, c: Var },
    Gru { h: Var },
}

impl CellState {
    pub fn hidden(&self) -> Var {
        match *self {
            CellState::Lstm { h, .. } | CellState::Gru { h } => h,
        }
    }
}

/// Shapes of the cell parameters for `c_in` inputs and `c` hidden channels.
pub fn cell_param_shapes(kind: CellKind, c_in: usize, c: usize, k: usize) -> Vec<(&'static str, Vec<usize>)> {
    match kind {
        CellKind::Lstm => vec![("wx", vec![4 * c, c_in, k, k]), ("wh", vec![4 * c, c, k, k]), ("b", vec![4 * c])],
        CellKind::Gru => vec![
            ("wx", vec![3 * c, c_in, k, k]),
            ("wh_zr", vec![2 * c, c, k, k]),
            ("wh_h", vec![c, c, k, k]),
            ("b", vec![3 * c]),
        ],
    }
}

/// One step of a ConvLSTM without peephole connections. Gates are laid out
/// as input, forget, output, candidate along the channel axis.
pub fn lstm_step(ctx: &mut Ctx, name: &str, x: Var, state: Option<(Var, Var)>, c: usize, k: usize) -> Result<(Var, Var)> {
    check_kernel(k)?;
    let c_in = ctx.g.shape(x)[1];
    let wx = ctx.param(&format!("{name}.wx"), &[4 * c, c_in, k, k], Init::Scaled(RECURRENT_GAIN))?;
    let wh = ctx.param(&format!("{name}.wh"), &[4 * c, c, k, k], Init::Scaled(RECURRENT_GAIN))?;
    let b = ctx.param(&format!("{name}.b"), &[4 * c], Init::Segment { from: c, to: 2 * c, value: 1.0 })?;
    let p = k / 2;
    let mut gates = ctx.g.conv2d(x, wx, Some(b), 1, p, 1)?;
    if let Some((h, _)) = state {
        let hg = ctx.g.conv2d(h, wh, None, 1, p, 1)?;
        gates = ctx.g.add(gates, hg)?;
    }
    let gi = ctx.g.slice_channels(gates, 0, c)?;
    let gf = ctx.g.slice_channels(gates, c, c)?;
    let go = ctx.g.slice_channels(gates, 2 * c, c)?;
    let gg = ctx.g.slice_channels(gates, 3 * c, c)?;
    let i = ctx.g.sigmoid(gi);
    let o = ctx.g.sigmoid(go);
    let cand = ctx.g.tanh(gg);
    let mut cell = ctx.g.mul(i, cand)?;
    if let Some((_, c_prev)) = state {
        let f = ctx.g.sigmoid(gf);
        let keep = ctx.g.mul(f, c_prev)?;
        cell = ctx.g.add(keep, cell)?;
    }
    let tc = ctx.g.tanh(cell);
    let h = ctx.g.mul(o, tc)?;
    Ok((h, cell))
}

/// One step of a ConvGRU: `h' = (1 - z) h + z tanh(Wx x + Wh (r h) + b)`.
pub fn gru_step(ctx: &mut Ctx, name: &str, x: Var, h: Option<Var>, c: usize, k: usize) -> Result<Var> {
    check_kernel(k)?;
    let c_in = ctx.g.shape(x)[1];
    let wx = ctx.param(&format!("{name}.wx"), &[3 * c, c_in, k, k], Init::Scaled(RECURRENT_GAIN))?;
    let wh_zr = ctx.param(&format!("{name}.wh_zr"), &[2 * c, c, k, k], Init::Scaled(RECURRENT_GAIN))?;
    let wh_h = ctx.param(&format!("{name}.wh_h"), &[c, c, k, k], Init::Scaled(RECURRENT_GAIN))?;
    let b = ctx.param(&format!("{name}.b"), &[3 * c], Init::Zeros)?;
    let p = k / 2;
    let xg = ctx.g.conv2d(x, wx, Some(b), 1, p, 1)?;
    let xz = ctx.g.slice_channels(xg, 0, c)?;
    let xr = ctx.g.slice_channels(xg, c, c)?;
    let xh = ctx.g.slice_channels(xg, 2 * c, c)?;
    let Some(h) = h else {
        let z = ctx.g.sigmoid(xz);
        let cand = ctx.g.tanh(xh);
        return Ok(ctx.g.mul(z, cand)?);
    };
    let hzr = ctx.g.conv2d(h, wh_zr, None, 1, p, 1)?;
    let hz = ctx.g.slice_channels(hzr, 0, c)?;
    let hr = ctx.g.slice_channels(hzr, c, c)?;
    let az = ctx.g.add(xz, hz)?;
    let ar = ctx.g.add(xr, hr)?;
    let z = ctx.g.sigmoid(az);
    let r = ctx.g.sigmoid(ar);
    let rh = ctx.g.mul(r, h)?;
    let hh = ctx.g.conv2d(rh, wh_h, None, 1, p, 1)?;
    let ah = ctx.g.add(xh, hh)?;
    let cand = ctx.g.tanh(ah);
    let zc = ctx.g.mul(z, cand)?;
    let keep = ctx.g.one_minus(z);
    let kh = ctx.g.mul(keep, h)?;
    Ok(ctx.g.add(kh, zc)?)
}

/// Advances a cell by one step and returns the new state.
pub fn step(ctx: &mut Ctx, kind: CellKind, name: &str, x: Var, state: Option<CellState>, c: usize, k: usize) -> Result<CellState> {
    match kind {
        CellKind::Lstm => {
            let prev = match state {
                Some(CellState::Lstm { h, c }) => Some((h, c)),
                None => None,
                Some(_) => return Err(Error::Argument("GRU state passed to an LSTM cell".into())),
            };
            let (h, c) = lstm_step(ctx, name, x, prev, c, k)?;
            Ok(CellState::Lstm { h, c })
        }
        CellKind::Gru => {
            let prev = match state {
                Some(CellState::Gru { h }) => Some(h),
                None => None,
                Some(_) => return Err(Error::Argument("LSTM state passed to a GRU cell".into())),
            };
            Ok(CellState::Gru { h: gru_step(ctx, name, x, prev, c, k)? })
        }
    }
}

/// Runs a cell over a sequence and returns the hidden state at every step.
pub fn unroll(ctx: &mut Ctx, kind: CellKind, name: &str, xs: &[Var], c: usize, k: usize) -> Result<Vec<Var>> {
    let mut state = None;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let s = step(ctx, kind, name, x, state, c, k)?;
        out.push(s.hidden());
        state = Some(s);
    }
    Ok(out)
}

fn check_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Argument(format!("recurrent kernel must be odd, got {k}")));
    }
    Ok(())
}

//! Independent oracles shared by the integration tests. Everything here
//! works on raw `f64` slices with explicit loops and reads weights straight
//! from the stacked parameter tensors.

#![allow(dead_code, clippy::needless_range_loop)]

use seqkit::bilstm2d::{Active, BiLstm2d, Direction, Merge};
use seqkit::recurrent::{CellKind, CellParams};
use seqkit::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W[row, :]·x` for a row-major `[rows, cols]` matrix.
fn row_dot(w: &Tensor, row: usize, x: &[f64]) -> f64 {
    let cols = w.shape()[1];
    let r = &w.data()[row * cols..(row + 1) * cols];
    r.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// One step of the cell, written out gate by gate.
pub fn naive_step(p: &CellParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = p.hidden_size();
    let (wi, wh) = (&p.weight_ih.value, &p.weight_hh.value);
    let (bi, bh) = (p.bias_ih.value.data(), p.bias_hh.value.data());
    let pre_x = |g: usize, k: usize| row_dot(wi, g * d + k, x) + bi[g * d + k];
    let pre_h = |g: usize, k: usize| row_dot(wh, g * d + k, h) + bh[g * d + k];
    match p.kind() {
        CellKind::Lstm => {
            let mut hn = vec![0.0; d];
            let mut cn = vec![0.0; d];
            for k in 0..d {
                let i = sigmoid(pre_x(0, k) + pre_h(0, k));
                let f = sigmoid(pre_x(1, k) + pre_h(1, k));
                let g = (pre_x(2, k) + pre_h(2, k)).tanh();
                let o = sigmoid(pre_x(3, k) + pre_h(3, k));
                cn[k] = f * c[k] + i * g;
                hn[k] = o * cn[k].tanh();
            }
            (hn, cn)
        }
        CellKind::Gru => {
            let mut hn = vec![0.0; d];
            for k in 0..d {
                let r = sigmoid(pre_x(0, k) + pre_h(0, k));
                let z = sigmoid(pre_x(1, k) + pre_h(1, k));
                let n = (pre_x(2, k) + r * pre_h(2, k)).tanh();
                hn[k] = (1.0 - z) * n + z * h[k];
            }
            (hn, vec![])
        }
        CellKind::Rnn => {
            let hn = (0..d).map(|k| (pre_x(0, k) + pre_h(0, k)).tanh()).collect();
            (hn, vec![])
        }
    }
}

/// Hidden states of one direction over `xs` (each of width `C`), returned
/// in the original time order.
pub fn naive_scan(p: &CellParams, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
    let d = p.hidden_size();
    let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
    let mut out = vec![Vec::new(); xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        let (hn, cn) = naive_step(p, &xs[t], &h, &c);
        h = hn;
        if !cn.is_empty() {
            c = cn;
        }
        out[t] = h.clone();
    }
    out
}

fn pixel(x: &Tensor, i: usize, j: usize) -> Vec<f64> {
    let (w, ch) = (x.shape()[1], x.shape()[2]);
    x.data()[(i * w + j) * ch..(i * w + j + 1) * ch].to_vec()
}

fn bi_outputs(fwd: &CellParams, bwd: Option<&CellParams>, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = naive_scan(fwd, seq, false);
    match bwd {
        Some(b) => {
            let r = naive_scan(b, seq, true);
            f.into_iter()
                .zip(r)
                .map(|(mut a, b)| {
                    a.extend(b);
                    a
                })
                .collect()
        }
        None => f,
    }
}

/// The layer composed by hand on one `[H, W, C]` map: per-column and per-row
/// bidirectional scans, concatenation (or sum) of the two feature maps, then
/// the point-wise projection.
pub fn naive_bilstm2d(x: &Tensor, layer: &BiLstm2d) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let opts = layer.options();
    let mut vert = vec![vec![Vec::new(); w]; h];
    let mut horz = vec![vec![Vec::new(); w]; h];
    if let Some(rnn) = &layer.rnn_v {
        for j in 0..w {
            let col: Vec<Vec<f64>> = (0..h).map(|i| pixel(x, i, j)).collect();
            for (i, v) in bi_outputs(&rnn.forward, rnn.backward.as_ref(), &col)
                .into_iter()
                .enumerate()
            {
                vert[i][j] = v;
            }
        }
    }
    if let Some(rnn) = &layer.rnn_h {
        for i in 0..h {
            let row: Vec<Vec<f64>> = (0..w).map(|j| pixel(x, i, j)).collect();
            for (j, v) in bi_outputs(&rnn.forward, rnn.backward.as_ref(), &row)
                .into_iter()
                .enumerate()
            {
                horz[i][j] = v;
            }
        }
    }
    let mut out = Vec::new();
    let mut width = 0;
    for i in 0..h {
        for j in 0..w {
            let merged: Vec<f64> = match (opts.active, opts.merge) {
                (Active::Both, Merge::Concat) => vert[i][j].iter().chain(&horz[i][j]).copied().collect(),
                (Active::Both, Merge::Add) => vert[i][j].iter().zip(&horz[i][j]).map(|(a, b)| a + b).collect(),
                (Active::Vertical, _) => vert[i][j].clone(),
                (Active::Horizontal, _) => horz[i][j].clone(),
            };
            let y = match &layer.fc {
                Some(fc) => {
                    let b = fc.bias.as_ref().unwrap().value.data();
                    (0..fc.fan_out())
                        .map(|o| row_dot(&fc.weight.value, o, &merged) + b[o])
                        .collect()
                }
                None => merged,
            };
            width = y.len();
            out.extend(y);
        }
    }
    Tensor::new(&[h, w, width], out).unwrap()
}

/// Closed-form parameter count of one concat/bi/both layer with fusion.
pub fn bilstm2d_params(c: usize, d: usize) -> usize {
    2 * 2 * (4 * c * d + 4 * d * d + 8 * d) + (4 * d * c + c)
}

pub fn direction_count(d: Direction) -> usize {
    match d {
        Direction::Bi => 2,
        Direction::Uni => 1,
    }
}

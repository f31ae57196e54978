//! Network building blocks as taped functions.
//!
//! Node-major tensors are `[S, d]` (or `[B, S, d]`); sequence tensors are
//! channel-major `[C, L]` (or `[B, C, L]`), so the `n × S` time-by-sensor
//! matrices of the temporal blocks appear here transposed.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};

/// `relu(A_hat · H · W)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, a_hat: Var, w: Var) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let agg = tape.matmul(a_hat, hw)?;
    tape.relu(agg)
}

/// Multi-head graph attention without a value transform.
///
/// For head `m` with weight `[a1; a2]` (shape `[2n, 1]`), the score of edge
/// `i -> j` is `leaky_relu(a1·h_i + a2·h_j)`, normalized by softmax over the
/// neighbourhood of `i` given by `mask` (which must include `i`). The output
/// row `i` averages `Σ_j α_ij h_j` over heads.
///
/// Returns the output and each head's `[.., S, S]` coefficient matrix.
pub fn spatial_attention(
    tape: &mut Tape,
    h: Var,
    mask: &Rc<[bool]>,
    heads: &[Var],
    slope: f64,
) -> Result<(Var, Vec<Var>)> {
    let n = *tape.shape(h).last().expect("non-empty shape");
    let mut alphas = Vec::with_capacity(heads.len());
    let mut total: Option<Var> = None;
    for &wg in heads {
        let a_src = tape.narrow(wg, 0, 0, n)?;
        let a_dst = tape.narrow(wg, 0, n, n)?;
        let s_src = tape.matmul(h, a_src)?;
        let s_dst = tape.matmul(h, a_dst)?;
        let s_dst = tape.transpose(s_dst)?;
        let scores = tape.add(s_src, s_dst)?;
        let scores = tape.leaky_relu(scores, slope)?;
        let alpha = tape.masked_softmax(scores, Rc::clone(mask))?;
        let out = tape.matmul(alpha, h)?;
        alphas.push(alpha);
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let total = total.expect("at least one head");
    let out = tape.scale(total, 1.0 / heads.len() as f64)?;
    Ok((out, alphas))
}

/// Parameters of one residual TCN block.
#[derive(Clone, Copy, Debug)]
pub struct TcnBlockVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    /// 1×1 projection, present when input and output widths differ.
    pub downsample: Option<(Var, Var)>,
}

/// Two dilated causal convolutions, each followed by relu and dropout, plus
/// a residual path.
pub fn tcn_block<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: &TcnBlockVars,
    dilation: usize,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut y = x;
    for (w, b) in [(p.conv1_w, p.conv1_b), (p.conv2_w, p.conv2_b)] {
        y = tape.conv1d_causal(y, w, dilation)?;
        y = tape.add(y, b)?;
        y = tape.relu(y)?;
        y = tape.dropout(y, dropout, training, rng)?;
    }
    let residual = match p.downsample {
        Some((w, b)) => {
            let r = tape.conv1d_causal(x, w, 1)?;
            tape.add(r, b)?
        }
        None => x,
    };
    tape.add(y, residual)
}

/// Multi-head temporal attention over a channel-major sequence `h`
/// (`[C, L]` or `[B, C, L]`).
///
/// Head `m` with weight `[1, C]` and bias `[1]` scores each time step as
/// `sigmoid(w·h_t + b)`, softmaxes over the `L` steps, and reweights every
/// channel of step `t` by `β_t`. Heads are averaged.
///
/// Returns the output and each head's `[.., 1, L]` weights.
pub fn temporal_attention(
    tape: &mut Tape,
    h: Var,
    heads: &[(Var, Var)],
) -> Result<(Var, Vec<Var>)> {
    let axis = tape.shape(h).len() - 1;
    let mut betas = Vec::with_capacity(heads.len());
    let mut total: Option<Var> = None;
    for &(w, b) in heads {
        let s = tape.matmul(w, h)?;
        let s = tape.add(s, b)?;
        let s = tape.sigmoid(s)?;
        let beta = tape.softmax(s, axis)?;
        let out = tape.mul(h, beta)?;
        betas.push(beta);
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let total = total.expect("at least one head");
    let out = tape.scale(total, 1.0 / heads.len() as f64)?;
    Ok((out, betas))
}

/// Flattens `[B, ...]` to `[B, F]` and applies `x W + b` with `W: [F, 1]`,
/// giving a `[B]` prediction and the `[B, F]` feature matrix.
pub fn linear_head(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let batch = shape[0];
    let features: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, vec![batch, features])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let y = tape.reshape(y, vec![batch])?;
    Ok((y, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gcn_identity_propagation() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 2], &[1.0, 2.0, 0.0, 3.0]));
        let i = tape.constant(Tensor::eye(2));
        let w = tape.constant(Tensor::eye(2));
        let out = gcn_layer(&mut tape, h, i, w).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn gcn_complete_graph_hand_computation() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let a = tape.constant(t(&[2, 2], &[0.5; 4]));
        let w = tape.constant(t(&[1, 1], &[1.0]));
        let out = gcn_layer(&mut tape, h, a, w).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn spatial_single_node_passes_through() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let wg = tape.leaf(t(&[6, 1], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let mask: Rc<[bool]> = Rc::from(vec![true]);
        let (out, alphas) = spatial_attention(&mut tape, h, &mask, &[wg], 0.2).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        assert_eq!(tape.value(alphas[0]).data(), &[1.0]);
    }

    #[test]
    fn spatial_zero_weights_give_neighbourhood_mean() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        // Node 0 ~ node 1, node 2 isolated.
        let mask: Rc<[bool]> = Rc::from(vec![true, true, false, true, true, false, false, false, true]);
        for heads in 1..=3 {
            let ws: Vec<Var> = (0..heads).map(|_| tape.leaf(Tensor::zeros(&[4, 1]))).collect();
            let (out, _) = spatial_attention(&mut tape, h, &mask, &ws, 0.2).unwrap();
            assert_eq!(tape.value(out).data(), &[2.0, 3.0, 2.0, 3.0, 5.0, 9.0]);
        }
    }

    #[test]
    fn spatial_two_nodes_hand_computed() {
        // h0 = [1, 0], h1 = [0, 2]; a_src = [1, 1], a_dst = [-1, 0.5]
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let wg = tape.leaf(t(&[4, 1], &[1.0, 1.0, -1.0, 0.5]));
        let mask: Rc<[bool]> = Rc::from(vec![true; 4]);
        let (out, alphas) = spatial_attention(&mut tape, h, &mask, &[wg], 0.2).unwrap();
        let leaky = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        // src scores: s0 = 1, s1 = 2; dst scores: d0 = -1, d1 = 1
        let e = [[leaky(1.0 - 1.0), leaky(1.0 + 1.0)], [leaky(2.0 - 1.0), leaky(2.0 + 1.0)]];
        let a = tape.value(alphas[0]).data().to_vec();
        for i in 0..2 {
            let z = e[i][0].exp() + e[i][1].exp();
            for j in 0..2 {
                assert!((a[i * 2 + j] - e[i][j].exp() / z).abs() < 1e-15);
            }
        }
        let o = tape.value(out).data();
        assert!((o[0] - a[0]).abs() < 1e-15);
        assert!((o[1] - 2.0 * a[1]).abs() < 1e-15);
    }

    #[test]
    fn tcn_zero_kernels_leave_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let z = |tape: &mut Tape, s: &[usize]| tape.leaf(Tensor::zeros(s));
        let p = TcnBlockVars {
            conv1_w: z(&mut tape, &[3, 2, 2]),
            conv1_b: z(&mut tape, &[3, 1]),
            conv2_w: z(&mut tape, &[3, 3, 2]),
            conv2_b: z(&mut tape, &[3, 1]),
            downsample: Some((
                tape.leaf(t(&[3, 2, 1], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])),
                z(&mut tape, &[3, 1]),
            )),
        };
        let y = tcn_block(&mut tape, x, &p, 1, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 3]);
        assert_eq!(
            tape.value(y).data(),
            &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0, 5.0, 3.0, -3.0]
        );
    }

    #[test]
    fn temporal_zero_params_are_uniform() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 8.0, 2.0]));
        let w = tape.leaf(Tensor::zeros(&[1, 2]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let (out, betas) = temporal_attention(&mut tape, h, &[(w, b)]).unwrap();
        assert_eq!(tape.value(betas[0]).data(), &[0.25; 4]);
        let expect: Vec<f64> = tape.value(h).data().iter().map(|v| v / 4.0).collect();
        assert_eq!(tape.value(out).data(), &expect[..]);
    }

    #[test]
    fn temporal_two_steps_hand_computed() {
        let mut tape = Tape::new();
        // Channel-major: c0 = [1, 2], c1 = [3, -1]
        let h = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, -1.0]));
        let w = tape.leaf(t(&[1, 2], &[0.5, -0.25]));
        let b = tape.leaf(t(&[1], &[0.1]));
        let (_, betas) = temporal_attention(&mut tape, h, &[(w, b)]).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let s0 = sig(0.5 * 1.0 - 0.25 * 3.0 + 0.1);
        let s1 = sig(0.5 * 2.0 + 0.25 * 1.0 + 0.1);
        let b0 = s0.exp() / (s0.exp() + s1.exp());
        let got = tape.value(betas[0]).data();
        assert!((got[0] - b0).abs() < 1e-15 && (got[1] - (1.0 - b0)).abs() < 1e-15);
    }

    #[test]
    fn single_head_matches_unscaled_computation() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 3], &[0.2, 0.4, -0.3, 1.0, 0.1, 0.7]));
        let w = tape.leaf(t(&[1, 2], &[0.3, -0.8]));
        let b = tape.leaf(t(&[1], &[0.05]));
        let (out, betas) = temporal_attention(&mut tape, h, &[(w, b)]).unwrap();
        let direct = tape.mul(h, betas[0]).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }
}

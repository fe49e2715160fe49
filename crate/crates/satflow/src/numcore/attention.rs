//! Multi-head self-attention over spatial tokens, composed from tape
//! primitives so its gradient comes from already-verified pieces.

use super::tape::{NodeId, Tape};
use super::tensor::Real;
use crate::error::{arg_err, Result};

/// 1x1-conv projection parameters for one attention block.
#[derive(Clone, Copy)]
pub struct AttnProj {
    pub q_w: NodeId,
    pub q_b: NodeId,
    pub k_w: NodeId,
    pub k_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub o_w: NodeId,
    pub o_b: NodeId,
}

/// Scaled dot-product attention body without the residual:
/// o_proj(MHA(q(x), k(x), v(x))), all projections 1x1 convs.
pub fn attention_core<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    heads: usize,
    proj: &AttnProj,
) -> Result<NodeId> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if heads == 0 || c % heads != 0 {
        return Err(arg_err(format!(
            "self_attention: {c} channels not divisible by {heads} heads"
        )));
    }
    let hd = c / heads;
    let tokens = h * w;

    let q = tape.conv2d(x, proj.q_w, Some(proj.q_b), 1, 0)?;
    let k = tape.conv2d(x, proj.k_w, Some(proj.k_b), 1, 0)?;
    let v = tape.conv2d(x, proj.v_w, Some(proj.v_b), 1, 0)?;

    // [N,C,H,W] -> [N*heads, hd, tokens]
    let q = tape.reshape(q, vec![n * heads, hd, tokens])?;
    let k = tape.reshape(k, vec![n * heads, hd, tokens])?;
    let v = tape.reshape(v, vec![n * heads, hd, tokens])?;

    let q_t = tape.transpose_last2(q)?; // [nh, tokens, hd]
    let scores = tape.matmul_batch(q_t, k)?; // [nh, tokens, tokens]
    let scaled = tape.mul_scalar(scores, T::c(1.0 / (hd as f64).sqrt()))?;
    let weights = tape.softmax_last(scaled)?; // rows sum to 1 over keys

    let v_t = tape.transpose_last2(v)?; // [nh, tokens, hd]
    let mixed = tape.matmul_batch(weights, v_t)?; // [nh, tokens, hd]
    let mixed = tape.transpose_last2(mixed)?; // [nh, hd, tokens]
    let mixed = tape.reshape(mixed, vec![n, c, h, w])?;

    tape.conv2d(mixed, proj.o_w, Some(proj.o_b), 1, 0)
}

/// Residual self-attention: x + attention_core(x).
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    heads: usize,
    proj: &AttnProj,
) -> Result<NodeId> {
    let a = attention_core(tape, x, heads, proj)?;
    tape.add(x, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proj_leaves(
        tape: &mut Tape<f64>,
        c: usize,
        rng: &mut ChaCha8Rng,
        zero_out: bool,
    ) -> AttnProj {
        let mut mk = |zero: bool| {
            let w = if zero {
                Tensor::zeros(&[c, c, 1, 1])
            } else {
                Tensor::randn(&[c, c, 1, 1], rng).scale(0.3)
            };
            let wid = tape.leaf(w, true);
            let bid = tape.leaf(Tensor::zeros(&[c]), true);
            (wid, bid)
        };
        let (q_w, q_b) = mk(false);
        let (k_w, k_b) = mk(false);
        let (v_w, v_b) = mk(false);
        let (o_w, o_b) = mk(zero_out);
        AttnProj {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn identity_conv1x1(tape: &mut Tape<f64>, c: usize) -> (NodeId, NodeId) {
        let mut w = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        (tape.leaf(w, false), tape.leaf(Tensor::zeros(&[c]), false))
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn(&[2, 4, 3, 3], &mut rng);
        let x = tape.leaf(xv.clone(), false);
        let proj = proj_leaves(&mut tape, 4, &mut rng, true);
        let y = self_attention(&mut tape, x, 2, &proj).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // H=W=1: softmax over one key is 1, so core == o(v(x)); with
        // identity o the core equals the value projection exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn(&[1, 4, 1, 1], &mut rng);
        let x = tape.leaf(xv.clone(), false);
        let mut proj = proj_leaves(&mut tape, 4, &mut rng, false);
        let (o_w, o_b) = identity_conv1x1(&mut tape, 4);
        proj.o_w = o_w;
        proj.o_b = o_b;
        let core = attention_core(&mut tape, x, 2, &proj).unwrap();
        // Direct value projection of the single token.
        let v = tape.conv2d(x, proj.v_w, Some(proj.v_b), 1, 0).unwrap();
        let diff = tape.value(core).max_abs_diff(tape.value(v));
        assert!(diff < 1e-12, "single-token attention differs by {diff}");
    }

    #[test]
    fn matches_explicit_flattened_attention() {
        // 1x4x2x2, one head: compare with a hand-rolled QK^T softmax V.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn(&[1, 4, 2, 2], &mut rng);
        let x = tape.leaf(xv.clone(), false);
        let proj = proj_leaves(&mut tape, 4, &mut rng, false);
        let y = attention_core(&mut tape, x, 1, &proj).unwrap();

        // Explicit oracle on flattened tokens.
        let c = 4;
        let l = 4;
        let get_w = |id: NodeId, tape: &Tape<f64>| tape.value(id).data().to_vec();
        let proj_mat = |w: &[f64], x: &[f64]| {
            // w[c_out, c_in] applied tokenwise: out[co, t] = sum_ci w[co,ci] x[ci,t]
            let mut out = vec![0.0; c * l];
            for co in 0..c {
                for t in 0..l {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += w[co * c + ci] * x[ci * l + t];
                    }
                    out[co * l + t] = s;
                }
            }
            out
        };
        let q = proj_mat(&get_w(proj.q_w, &tape), xv.data());
        let k = proj_mat(&get_w(proj.k_w, &tape), xv.data());
        let v = proj_mat(&get_w(proj.v_w, &tape), xv.data());
        let scale = 1.0 / (c as f64).sqrt();
        let mut out_tokens = vec![0.0; c * l];
        for ti in 0..l {
            let mut logits = vec![0.0; l];
            for (tj, lg) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for ci in 0..c {
                    s += q[ci * l + ti] * k[ci * l + tj];
                }
                *lg = s * scale;
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ci in 0..c {
                let mut s = 0.0;
                for tj in 0..l {
                    s += exps[tj] / z * v[ci * l + tj];
                }
                out_tokens[ci * l + ti] = s;
            }
        }
        let expect = proj_mat(&get_w(proj.o_w, &tape), &out_tokens);
        let got = tape.value(y).data();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "attention oracle mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(&[1, 6, 2, 2], &mut rng), false);
        let proj = proj_leaves(&mut tape, 6, &mut rng, false);
        assert!(self_attention(&mut tape, x, 4, &proj).is_err());
    }
}

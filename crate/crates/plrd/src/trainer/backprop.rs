//! Hand-written reverse pass for the micro-transformer.
//!
//! Mirrors `model::forward` step by step using the cached activations.
//! Gradients accumulate into full-size per-tensor buffers in batch order, so
//! a fixed seed gives a bit-identical result regardless of the `parallel`
//! feature (kernels only split disjoint output rows).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{kernels, DenseMatrix};
use crate::model::{forward_cached, AttentionMode, Checkpoint, ModelGraph, SlotKind, SlotState};

pub type Grads = BTreeMap<String, Vec<f64>>;

#[inline]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    kernels::matmul_par(a, b, m, k, n, out);
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_seq(a, b, m, k, n, out);
}

#[inline]
fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, b_rows: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    kernels::matmul_tb_par(a, b, m, k, b_rows, out);
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_tb_seq(a, b, m, k, b_rows, out);
}

#[inline]
fn mm_ta(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    kernels::matmul_ta_par(a, b, a_rows, a_cols, b_cols, out);
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_ta_seq(a, b, a_rows, a_cols, b_cols, out);
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Zero gradient buffers for every tensor in the checkpoint.
pub fn zero_grads(ckpt: &Checkpoint) -> Grads {
    ckpt.tensors()
        .iter()
        .map(|(name, t)| (name.clone(), vec![0.0; t.data.len()]))
        .collect()
}

/// Mean next-token cross-entropy of a batch, without gradients.
pub fn batch_loss(ckpt: &Checkpoint, batch: &[Vec<u32>]) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let logits = ckpt.forward(seq)?;
        loss_sum += sequence_loss(&logits, seq);
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("batch holds no predictable positions".into()));
    }
    Ok(loss_sum / count as f64)
}

fn sequence_loss(logits: &DenseMatrix, tokens: &[u32]) -> f64 {
    let mut sum = 0.0;
    for i in 0..tokens.len() - 1 {
        let row = logits.row(i);
        let target = tokens[i + 1] as usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        sum += max + denom.ln() - row[target];
    }
    sum
}

/// Mean cross-entropy plus its gradient for every tensor in the checkpoint.
pub fn loss_and_grads(ckpt: &Checkpoint, batch: &[Vec<u32>]) -> Result<(f64, Grads)> {
    let total_preds: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total_preds == 0 {
        return Err(Error::InvalidInput("batch holds no predictable positions".into()));
    }
    let inv_n = 1.0 / total_preds as f64;

    let mut grads = zero_grads(ckpt);
    let mut loss_sum = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let (logits, cache) = forward_cached(ckpt, seq)?;
        loss_sum += backward_sequence(ckpt, seq, &logits, &cache, inv_n, &mut grads)?;
    }
    Ok((loss_sum * inv_n, grads))
}

fn backward_sequence(
    ckpt: &Checkpoint,
    tokens: &[u32],
    logits: &DenseMatrix,
    cache: &crate::model::SeqCache,
    inv_n: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let dims = &ckpt.graph.dims;
    let (t_len, d, vocab) = (tokens.len(), dims.d_model, dims.vocab);

    // Cross-entropy gradient; the last position predicts nothing.
    let mut d_logits = DenseMatrix::zeros(t_len, vocab);
    let mut loss_sum = 0.0;
    for i in 0..t_len - 1 {
        let row = logits.row(i);
        let target = tokens[i + 1] as usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        loss_sum += max + denom.ln() - row[target];
        let dl_row = &mut d_logits.data_mut()[i * vocab..(i + 1) * vocab];
        for (j, &l) in row.iter().enumerate() {
            dl_row[j] = (l - max).exp() / denom * inv_n;
        }
        dl_row[target] -= inv_n;
    }

    // Weight-tied head: logits = hn_final · wteᵀ.
    let wte = ckpt.expect_tensor("embed.tok")?;
    let mut d_hn_final = DenseMatrix::zeros(t_len, d);
    mm(d_logits.data(), &wte.data, t_len, vocab, d, d_hn_final.data_mut());
    mm_ta(
        d_logits.data(),
        cache.hn_final.data(),
        t_len,
        vocab,
        d,
        grads.get_mut("embed.tok").expect("grads cover all tensors"),
    );

    let g_final = ckpt.expect_tensor("final_norm")?;
    let mut dx = rmsnorm_backward(
        &d_hn_final,
        &cache.x_last,
        &cache.inv_final,
        &g_final.data,
        grads.get_mut("final_norm").expect("grads cover all tensors"),
    );

    let n_heads = dims.n_heads;
    let hd = ckpt.graph.head_dim();
    let kv = ckpt.graph.kv_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mqa = ckpt.graph.attention_mode == AttentionMode::MultiQuery;

    for b in (0..dims.n_layers).rev() {
        let c = &cache.blocks[b];

        // MLP residual: x_next = x_mid + down(silu(gate) * up).
        let d_gated = slot_backward(ckpt, b, SlotKind::Down, &c.gated, c.down_hidden.as_ref(), &dx, grads)?;
        let mut d_up = DenseMatrix::zeros(t_len, dims.d_ff);
        let mut d_gate = DenseMatrix::zeros(t_len, dims.d_ff);
        for idx in 0..t_len * dims.d_ff {
            let g_val = c.gate.data()[idx];
            let u_val = c.up.data()[idx];
            let dg_out = d_gated.data()[idx];
            let sig = sigmoid(g_val);
            let silu = g_val * sig;
            d_up.data_mut()[idx] = dg_out * silu;
            d_gate.data_mut()[idx] = dg_out * u_val * sig * (1.0 + g_val * (1.0 - sig));
        }
        let d_hn_up = slot_backward(ckpt, b, SlotKind::Up, &c.hn_mlp, c.up_hidden.as_ref(), &d_up, grads)?;
        let d_hn_gate = slot_backward(ckpt, b, SlotKind::Gate, &c.hn_mlp, c.gate_hidden.as_ref(), &d_gate, grads)?;
        let mut d_hn_mlp = d_hn_up;
        for (o, &g_in) in d_hn_mlp.data_mut().iter_mut().zip(d_hn_gate.data()) {
            *o += g_in;
        }
        let g_mlp = ckpt.expect_tensor(&format!("blocks.{b}.norm_mlp"))?;
        let d_norm = rmsnorm_backward(
            &d_hn_mlp,
            &c.x_mid,
            &c.inv_mlp,
            &g_mlp.data,
            grads.get_mut(&format!("blocks.{b}.norm_mlp")).expect("grads cover all tensors"),
        );
        for (o, &n_in) in dx.data_mut().iter_mut().zip(d_norm.data()) {
            *o += n_in;
        }

        // Attention residual: x_mid = x_in + o(concat heads).
        let d_concat = slot_backward(ckpt, b, SlotKind::O, &c.concat, c.o_hidden.as_ref(), &dx, grads)?;
        let mut d_q = DenseMatrix::zeros(t_len, d);
        let mut d_k = DenseMatrix::zeros(t_len, kv);
        let mut d_v = DenseMatrix::zeros(t_len, kv);
        for a in 0..n_heads {
            let q_off = a * hd;
            let kv_off = if mqa { 0 } else { a * hd };
            let p = &c.probs[a];
            for i in 0..t_len {
                let d_out_row = &d_concat.row(i)[q_off..q_off + hd];
                let p_row = p.row(i);
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    let v_row = &c.v.row(j)[kv_off..kv_off + hd];
                    let mut acc = 0.0;
                    for cc in 0..hd {
                        acc += d_out_row[cc] * v_row[cc];
                    }
                    dp[j] = acc;
                    let dv_row = &mut d_v.data_mut()[j * kv + kv_off..j * kv + kv_off + hd];
                    let w = p_row[j];
                    for cc in 0..hd {
                        dv_row[cc] += w * d_out_row[cc];
                    }
                }
                let dot: f64 = (0..=i).map(|j| p_row[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - dot) * scale;
                    let k_row = &c.k.row(j)[kv_off..kv_off + hd];
                    {
                        let dq_row = &mut d_q.data_mut()[i * d + q_off..i * d + q_off + hd];
                        for cc in 0..hd {
                            dq_row[cc] += ds * k_row[cc];
                        }
                    }
                    let q_row = &c.q.row(i)[q_off..q_off + hd];
                    let dk_row = &mut d_k.data_mut()[j * kv + kv_off..j * kv + kv_off + hd];
                    for cc in 0..hd {
                        dk_row[cc] += ds * q_row[cc];
                    }
                }
            }
        }

        let d_hn_q = slot_backward(ckpt, b, SlotKind::Q, &c.hn_attn, c.q_hidden.as_ref(), &d_q, grads)?;
        let d_hn_k = slot_backward(ckpt, b, SlotKind::K, &c.hn_attn, c.k_hidden.as_ref(), &d_k, grads)?;
        let d_hn_v = slot_backward(ckpt, b, SlotKind::V, &c.hn_attn, c.v_hidden.as_ref(), &d_v, grads)?;
        let mut d_hn_attn = d_hn_q;
        for ((o, &k_in), &v_in) in d_hn_attn.data_mut().iter_mut().zip(d_hn_k.data()).zip(d_hn_v.data()) {
            *o += k_in + v_in;
        }
        let g_attn = ckpt.expect_tensor(&format!("blocks.{b}.norm_attn"))?;
        let d_norm = rmsnorm_backward(
            &d_hn_attn,
            &c.x_in,
            &c.inv_attn,
            &g_attn.data,
            grads.get_mut(&format!("blocks.{b}.norm_attn")).expect("grads cover all tensors"),
        );
        for (o, &n_in) in dx.data_mut().iter_mut().zip(d_norm.data()) {
            *o += n_in;
        }
    }

    // Embedding rows.
    let d_tok = grads.get_mut("embed.tok").expect("grads cover all tensors");
    for (i, &tok) in tokens.iter().enumerate() {
        let src = dx.row(i);
        let dst = &mut d_tok[tok as usize * d..(tok as usize + 1) * d];
        for j in 0..d {
            dst[j] += src[j];
        }
    }
    let d_pos = grads.get_mut("embed.pos").expect("grads cover all tensors");
    for i in 0..t_len {
        let src = dx.row(i);
        let dst = &mut d_pos[i * d..(i + 1) * d];
        for j in 0..d {
            dst[j] += src[j];
        }
    }

    Ok(loss_sum)
}

/// Backward through one FC slot. Accumulates weight gradients and returns the
/// gradient with respect to the slot input.
fn slot_backward(
    ckpt: &Checkpoint,
    block: usize,
    kind: SlotKind,
    x: &DenseMatrix,
    hidden: Option<&DenseMatrix>,
    dy: &DenseMatrix,
    grads: &mut Grads,
) -> Result<DenseMatrix> {
    let (d_in, d_out) = ckpt.graph.slot_shape(kind);
    let t = x.rows();
    let base = ModelGraph::slot_base_name(block, kind);
    match ckpt.graph.blocks[block].get(kind) {
        SlotState::Dense => {
            let w = ckpt.expect_tensor(&base)?;
            mm_ta(x.data(), dy.data(), t, d_in, d_out, grads.get_mut(&base).expect("grads cover all tensors"));
            let mut dx = DenseMatrix::zeros(t, d_in);
            mm_tb(dy.data(), &w.data, t, d_out, d_in, dx.data_mut());
            Ok(dx)
        }
        SlotState::Factored { rank } => {
            let hidden = hidden.expect("factored slot cached its inner activation");
            let w0 = ckpt.expect_tensor(&format!("{base}.w0"))?;
            let w1 = ckpt.expect_tensor(&format!("{base}.w1"))?;
            mm_ta(
                hidden.data(),
                dy.data(),
                t,
                rank,
                d_out,
                grads.get_mut(&format!("{base}.w1")).expect("grads cover all tensors"),
            );
            let mut d_hidden = DenseMatrix::zeros(t, rank);
            mm_tb(dy.data(), &w1.data, t, d_out, rank, d_hidden.data_mut());
            mm_ta(
                x.data(),
                d_hidden.data(),
                t,
                d_in,
                rank,
                grads.get_mut(&format!("{base}.w0")).expect("grads cover all tensors"),
            );
            let mut dx = DenseMatrix::zeros(t, d_in);
            mm_tb(d_hidden.data(), &w0.data, t, rank, d_in, dx.data_mut());
            Ok(dx)
        }
    }
}

/// Backward of `y_ij = g_j · x_ij · inv_i`. Accumulates `dg` and returns `dx`.
fn rmsnorm_backward(dy: &DenseMatrix, x: &DenseMatrix, inv: &[f64], g: &[f64], dg: &mut [f64]) -> DenseMatrix {
    let (t, d) = (x.rows(), x.cols());
    let mut dx = DenseMatrix::zeros(t, d);
    for i in 0..t {
        let ri = inv[i];
        let x_row = x.row(i);
        let dy_row = dy.row(i);
        let mut dot = 0.0;
        for j in 0..d {
            let w = g[j] * dy_row[j];
            dot += w * x_row[j];
            dg[j] += dy_row[j] * x_row[j] * ri;
        }
        let coef = ri * ri * ri / d as f64 * dot;
        let dx_row = &mut dx.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            dx_row[j] = ri * g[j] * dy_row[j] - coef * x_row[j];
        }
    }
    dx
}

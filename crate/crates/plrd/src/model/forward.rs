//! Forward pass of the micro-transformer.
//!
//! Pre-norm decoder blocks: RMSNorm -> causal multi-head attention ->
//! residual, RMSNorm -> SiLU-gated MLP -> residual, then a final RMSNorm and
//! the weight-tied output head. Factored slots compute `x·w0` then `·w1`;
//! the merged product is never materialized.
//!
//! The cached variant records every intermediate the backward pass needs.

use super::{AttentionMode, Checkpoint, SlotKind, SlotState};
use crate::error::{Error, Result};
use crate::linalg::{kernels, DenseMatrix};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Borrowed view of one FC slot's weights.
pub(crate) enum SlotView<'a> {
    Dense { w: &'a [f64], d_in: usize, d_out: usize },
    Factored { w0: &'a [f64], w1: &'a [f64], d_in: usize, rank: usize, d_out: usize },
}

pub(crate) fn slot_view<'a>(ckpt: &'a Checkpoint, block: usize, kind: SlotKind) -> Result<SlotView<'a>> {
    let (d_in, d_out) = ckpt.graph.slot_shape(kind);
    let base = super::ModelGraph::slot_base_name(block, kind);
    match ckpt.graph.blocks[block].get(kind) {
        SlotState::Dense => {
            let w = ckpt.expect_tensor(&base)?;
            Ok(SlotView::Dense { w: &w.data, d_in, d_out })
        }
        SlotState::Factored { rank } => {
            let w0 = ckpt.expect_tensor(&format!("{base}.w0"))?;
            let w1 = ckpt.expect_tensor(&format!("{base}.w1"))?;
            Ok(SlotView::Factored { w0: &w0.data, w1: &w1.data, d_in, rank, d_out })
        }
    }
}

/// `x · W` for a slot; returns the output and, for factored slots, the inner
/// activation `x·w0` the backward pass reuses.
pub(crate) fn slot_forward(x: &DenseMatrix, view: &SlotView) -> (DenseMatrix, Option<DenseMatrix>) {
    let t = x.rows();
    match view {
        SlotView::Dense { w, d_in, d_out } => {
            debug_assert_eq!(x.cols(), *d_in);
            let mut out = DenseMatrix::zeros(t, *d_out);
            matmul_dispatch(x.data(), w, t, *d_in, *d_out, out.data_mut());
            (out, None)
        }
        SlotView::Factored { w0, w1, d_in, rank, d_out } => {
            debug_assert_eq!(x.cols(), *d_in);
            let mut hidden = DenseMatrix::zeros(t, *rank);
            matmul_dispatch(x.data(), w0, t, *d_in, *rank, hidden.data_mut());
            let mut out = DenseMatrix::zeros(t, *d_out);
            matmul_dispatch(hidden.data(), w1, t, *rank, *d_out, out.data_mut());
            (out, Some(hidden))
        }
    }
}

#[inline]
fn matmul_dispatch(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    kernels::matmul_par(a, b, a_rows, a_cols, b_cols, out);
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_seq(a, b, a_rows, a_cols, b_cols, out);
}

/// `y_ij = g_j · x_ij · inv_i` with `inv_i = 1/sqrt(mean_j x_ij² + eps)`.
pub(crate) fn rmsnorm_rows(x: &DenseMatrix, g: &[f64]) -> (DenseMatrix, Vec<f64>) {
    let (t, d) = (x.rows(), x.cols());
    let mut out = DenseMatrix::zeros(t, d);
    let mut inv = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ri = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(ri);
        let out_row = &mut out.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            out_row[j] = g[j] * row[j] * ri;
        }
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Everything the backward pass needs from one block.
pub(crate) struct BlockCache {
    pub x_in: DenseMatrix,
    pub hn_attn: DenseMatrix,
    pub inv_attn: Vec<f64>,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub q_hidden: Option<DenseMatrix>,
    pub k_hidden: Option<DenseMatrix>,
    pub v_hidden: Option<DenseMatrix>,
    /// Per-head causal attention weights, each `T x T` (zero above diagonal).
    pub probs: Vec<DenseMatrix>,
    pub concat: DenseMatrix,
    pub o_hidden: Option<DenseMatrix>,
    pub x_mid: DenseMatrix,
    pub hn_mlp: DenseMatrix,
    pub inv_mlp: Vec<f64>,
    pub up: DenseMatrix,
    pub gate: DenseMatrix,
    pub up_hidden: Option<DenseMatrix>,
    pub gate_hidden: Option<DenseMatrix>,
    pub gated: DenseMatrix,
    pub down_hidden: Option<DenseMatrix>,
}

pub(crate) struct SeqCache {
    pub blocks: Vec<BlockCache>,
    pub x_last: DenseMatrix,
    pub hn_final: DenseMatrix,
    pub inv_final: Vec<f64>,
}

pub(crate) fn forward_cached(ckpt: &Checkpoint, tokens: &[u32]) -> Result<(DenseMatrix, SeqCache)> {
    let dims = &ckpt.graph.dims;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > dims.max_seq_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            dims.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= dims.vocab) {
        return Err(Error::InvalidInput(format!("token {bad} out of vocabulary {}", dims.vocab)));
    }

    let t_len = tokens.len();
    let d = dims.d_model;
    let wte = ckpt.expect_tensor("embed.tok")?;
    let wpe = ckpt.expect_tensor("embed.pos")?;

    let mut x = DenseMatrix::zeros(t_len, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &wte.data[tok as usize * d..(tok as usize + 1) * d];
        let pe = &wpe.data[i * d..(i + 1) * d];
        let row = &mut x.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let n_heads = dims.n_heads;
    let hd = ckpt.graph.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mqa = ckpt.graph.attention_mode == AttentionMode::MultiQuery;

    let mut blocks = Vec::with_capacity(dims.n_layers);
    for b in 0..dims.n_layers {
        let x_in = x.clone();
        let g_attn = ckpt.expect_tensor(&format!("blocks.{b}.norm_attn"))?;
        let (hn_attn, inv_attn) = rmsnorm_rows(&x, &g_attn.data);

        let (q, q_hidden) = slot_forward(&hn_attn, &slot_view(ckpt, b, SlotKind::Q)?);
        let (k, k_hidden) = slot_forward(&hn_attn, &slot_view(ckpt, b, SlotKind::K)?);
        let (v, v_hidden) = slot_forward(&hn_attn, &slot_view(ckpt, b, SlotKind::V)?);

        let mut probs = Vec::with_capacity(n_heads);
        let mut concat = DenseMatrix::zeros(t_len, d);
        for a in 0..n_heads {
            let q_off = a * hd;
            let kv_off = if mqa { 0 } else { a * hd };
            let mut p = DenseMatrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let q_row = &q.row(i)[q_off..q_off + hd];
                let mut max = f64::NEG_INFINITY;
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let k_row = &k.row(j)[kv_off..kv_off + hd];
                    let s = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let p_row = &mut p.data_mut()[i * t_len..(i + 1) * t_len];
                for (j, s) in scores.iter().enumerate() {
                    p_row[j] = s / denom;
                }
                // Weighted sum of values into the head's slice of concat.
                let out_row = &mut concat.data_mut()[i * d + q_off..i * d + q_off + hd];
                for j in 0..=i {
                    let w = p_row[j];
                    let v_row = &v.row(j)[kv_off..kv_off + hd];
                    for c in 0..hd {
                        out_row[c] += w * v_row[c];
                    }
                }
            }
            probs.push(p);
        }

        let (attn_out, o_hidden) = slot_forward(&concat, &slot_view(ckpt, b, SlotKind::O)?);
        let mut x_mid = x_in.clone();
        for (o, a) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
            *o += a;
        }

        let g_mlp = ckpt.expect_tensor(&format!("blocks.{b}.norm_mlp"))?;
        let (hn_mlp, inv_mlp) = rmsnorm_rows(&x_mid, &g_mlp.data);
        let (up, up_hidden) = slot_forward(&hn_mlp, &slot_view(ckpt, b, SlotKind::Up)?);
        let (gate, gate_hidden) = slot_forward(&hn_mlp, &slot_view(ckpt, b, SlotKind::Gate)?);

        let mut gated = DenseMatrix::zeros(t_len, dims.d_ff);
        for ((g_out, &g_in), &u_in) in gated.data_mut().iter_mut().zip(gate.data()).zip(up.data()) {
            *g_out = g_in * sigmoid(g_in) * u_in;
        }

        let (mlp_out, down_hidden) = slot_forward(&gated, &slot_view(ckpt, b, SlotKind::Down)?);
        let mut x_next = x_mid.clone();
        for (o, m) in x_next.data_mut().iter_mut().zip(mlp_out.data()) {
            *o += m;
        }

        blocks.push(BlockCache {
            x_in,
            hn_attn,
            inv_attn,
            q,
            k,
            v,
            q_hidden,
            k_hidden,
            v_hidden,
            probs,
            concat,
            o_hidden,
            x_mid,
            hn_mlp,
            inv_mlp,
            up,
            gate,
            up_hidden,
            gate_hidden,
            gated,
            down_hidden,
        });
        x = x_next;
    }

    let g_final = ckpt.expect_tensor("final_norm")?;
    let (hn_final, inv_final) = rmsnorm_rows(&x, &g_final.data);

    // Weight-tied head: logits = hn_final · wteᵀ.
    let mut logits = DenseMatrix::zeros(t_len, dims.vocab);
    #[cfg(feature = "parallel")]
    kernels::matmul_tb_par(hn_final.data(), &wte.data, t_len, d, dims.vocab, logits.data_mut());
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_tb_seq(hn_final.data(), &wte.data, t_len, d, dims.vocab, logits.data_mut());

    let cache = SeqCache { blocks, x_last: x, hn_final, inv_final };
    Ok((logits, cache))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_graph;
    use super::*;

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let ckpt = Checkpoint::zeroed(toy_graph(2));
        let logits = ckpt.forward(&[1, 2, 3]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocab_rejected() {
        let ckpt = Checkpoint::zeroed(toy_graph(1));
        assert!(matches!(ckpt.forward(&[64]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn overlong_sequence_rejected() {
        let ckpt = Checkpoint::zeroed(toy_graph(1));
        let long = vec![0u32; 65];
        assert!(ckpt.forward(&long).is_err());
    }

    #[test]
    fn batch_of_one_matches_batch_of_many() {
        let ckpt = Checkpoint::new_seeded(toy_graph(2), 11, 0.05).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![1, 5, 9, 2], vec![3, 3, 7], vec![0, 63]];
        let batched = ckpt.forward_batch(&seqs).unwrap();
        for (seq, got) in seqs.iter().zip(&batched) {
            let solo = ckpt.forward(seq).unwrap();
            assert_eq!(solo, *got);
        }
    }
}

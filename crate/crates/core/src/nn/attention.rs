//! Single-head self-attention with adaptable query and value projections.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::lora::{AdaptedLayer, LayerCache};
use crate::matrix::Matrix;
use crate::nn::{softmax, Grads};

/// Query, key and value projections (`d × d` each). Adapters normally sit on
/// `query` and `value`; `key` is a plain layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: AdaptedLayer,
    pub key: AdaptedLayer,
    pub value: AdaptedLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    q: (Matrix, LayerCache),
    k: (Matrix, LayerCache),
    v: (Matrix, LayerCache),
    /// Attention probabilities, one `s × s` matrix per sequence.
    probs: Vec<Matrix>,
    seq_len: usize,
}

impl AttentionBlock {
    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    fn check(&self, tokens: &Matrix, seq_len: usize) -> Result<()> {
        let d = self.dim();
        for layer in [&self.query, &self.key, &self.value] {
            if layer.base.shape() != (d, d) {
                return Err(Error::dim("attention projection", format!("{d}x{d}"), format!("{:?}", layer.base.shape())));
            }
        }
        if tokens.cols() != d {
            return Err(Error::dim("attention tokens", d, tokens.cols()));
        }
        if seq_len == 0 || tokens.rows() % seq_len != 0 {
            return Err(Error::dim("attention sequence length", seq_len, tokens.rows()));
        }
        Ok(())
    }

    /// `softmax(Q·Kᵀ/√d)·V` over each block of `seq_len` consecutive rows.
    pub(crate) fn forward(
        &self,
        tokens: &Matrix,
        seq_len: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Matrix, AttentionCache)> {
        self.check(tokens, seq_len)?;
        let d = self.dim();
        let q = self.query.forward(tokens, crate::nn::reborrow(&mut rng))?;
        let k = self.key.forward(tokens, crate::nn::reborrow(&mut rng))?;
        let v = self.value.forward(tokens, crate::nn::reborrow(&mut rng))?;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut out = Matrix::zeros(tokens.rows(), d);
        let mut probs = Vec::with_capacity(tokens.rows() / seq_len);
        for start in (0..tokens.rows()).step_by(seq_len) {
            let end = start + seq_len;
            let qs = q.0.slice_rows(start, end);
            let ks = k.0.slice_rows(start, end);
            let vs = v.0.slice_rows(start, end);
            let mut p = qs.matmul_t(&ks)?.scale(inv_sqrt_d);
            for i in 0..seq_len {
                let row = softmax(p.row(i));
                p.row_mut(i).copy_from_slice(&row);
            }
            let o = p.matmul(&vs)?;
            for i in 0..seq_len {
                out.row_mut(start + i).copy_from_slice(o.row(i));
            }
            probs.push(p);
        }
        Ok((
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                seq_len,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, d_out: &Matrix, grads: &mut Grads, need_dx: bool) -> Result<Option<Matrix>> {
        let d = self.dim();
        let s = cache.seq_len;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let rows = d_out.rows();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);

        for (block, p) in cache.probs.iter().enumerate() {
            let start = block * s;
            let end = start + s;
            let d_o = d_out.slice_rows(start, end);
            let qs = cache.q.0.slice_rows(start, end);
            let ks = cache.k.0.slice_rows(start, end);
            let vs = cache.v.0.slice_rows(start, end);

            let dvs = p.t_matmul(&d_o)?;
            let dp = d_o.matmul_t(&vs)?;
            // softmax backward, row by row
            let mut ds = Matrix::zeros(s, s);
            for i in 0..s {
                let dot: f64 = dp.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..s {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * inv_sqrt_d;
                }
            }
            let dqs = ds.matmul(&ks)?;
            let dks = ds.t_matmul(&qs)?;
            for i in 0..s {
                dq.row_mut(start + i).copy_from_slice(dqs.row(i));
                dk.row_mut(start + i).copy_from_slice(dks.row(i));
                dv.row_mut(start + i).copy_from_slice(dvs.row(i));
            }
        }

        let mut dx: Option<Matrix> = None;
        for (layer, (_, layer_cache), dy) in [
            (&self.query, &cache.q, &dq),
            (&self.key, &cache.k, &dk),
            (&self.value, &cache.v, &dv),
        ] {
            if let Some(g) = layer.backward(layer_cache, dy, grads, need_dx)? {
                match dx.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => dx = Some(g),
                }
            }
        }
        Ok(dx)
    }
}

/// Attention over a single sequence of `n` tokens (`n × d`), inference mode.
pub fn attention_block_forward(block: &AttentionBlock, tokens: &Matrix) -> Result<Matrix> {
    Ok(block.forward(tokens, tokens.rows().max(1), None)?.0)
}

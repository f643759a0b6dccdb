//! Transformer building blocks written against the autodiff tape.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tensor::{AttentionMask, Graph, ParamStore, ParamVars, Result, Tensor, Var};

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Rng,
    pub normal: Normal<f64>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, std: f64) -> Self {
        Self {
            store,
            rng: Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("std validated positive"),
        }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let data = (0..rows * cols).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store
            .insert(name, Tensor::from_rows(rows, cols, data).expect("sized above"));
    }

    pub fn ones(&mut self, name: &str, n: usize) {
        self.store.insert(name, Tensor::filled(&[n], 1.0));
    }

    pub fn attention(&mut self, prefix: &str, d_q: usize, d_kv: usize) {
        self.ones(&format!("{prefix}.norm"), d_q);
        self.matrix(&format!("{prefix}.wq"), d_q, d_q);
        self.matrix(&format!("{prefix}.wk"), d_kv, d_q);
        self.matrix(&format!("{prefix}.wv"), d_kv, d_q);
        self.matrix(&format!("{prefix}.wo"), d_q, d_q);
    }

    pub fn ffn(&mut self, prefix: &str, d: usize) {
        self.ones(&format!("{prefix}.norm"), d);
        self.matrix(&format!("{prefix}.w1"), d, 2 * d);
        self.matrix(&format!("{prefix}.w3"), d, 2 * d);
        self.matrix(&format!("{prefix}.w2"), 2 * d, d);
    }
}

/// Rotary positions for queries and keys; `None` skips the rotation.
pub(crate) struct Rope<'a> {
    pub q: Option<&'a [usize]>,
    pub k: Option<&'a [usize]>,
    pub theta: f64,
}

pub(crate) struct Attn<'a> {
    pub prefix: &'a str,
    pub heads: usize,
    pub eps: f64,
}

impl Attn<'_> {
    /// Multi-head attention of pre-normalized `xq` over `kv` (already normalized
    /// by the caller when it is a separate stream). Returns the output projection.
    pub fn apply(&self, g: &mut Graph, p: &ParamVars, xq: Var, kv: Var, mask: &AttentionMask, rope: &Rope) -> Result<Var> {
        let wq = p.get(&format!("{}.wq", self.prefix))?;
        let wk = p.get(&format!("{}.wk", self.prefix))?;
        let wv = p.get(&format!("{}.wv", self.prefix))?;
        let wo = p.get(&format!("{}.wo", self.prefix))?;
        let d = g.value(wq).cols();
        let hd = d / self.heads;
        let mut q = g.matmul(xq, wq)?;
        let mut k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        if let Some(pos) = rope.q {
            q = g.rope(q, pos, rope.theta, hd)?;
        }
        if let Some(pos) = rope.k {
            k = g.rope(k, pos, rope.theta, hd)?;
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.masked_softmax(s, mask)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        g.matmul(o, wo)
    }

    pub fn norm(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{}.norm", self.prefix))?;
        g.rms_norm(x, gain, self.eps)
    }

    /// `x + attn(norm(x))` with self-attention.
    pub fn self_residual(&self, g: &mut Graph, p: &ParamVars, x: Var, mask: &AttentionMask, rope: &Rope) -> Result<Var> {
        let h = self.norm(g, p, x)?;
        let a = self.apply(g, p, h, h, mask, rope)?;
        g.add(x, a)
    }
}

/// `x + W2 (silu(norm(x) W1) ⊙ norm(x) W3)`.
pub(crate) fn ffn_residual(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.norm"))?;
    let h = g.rms_norm(x, gain, eps)?;
    let a = g.matmul(h, p.get(&format!("{prefix}.w1"))?)?;
    let a = g.silu(a)?;
    let b = g.matmul(h, p.get(&format!("{prefix}.w3"))?)?;
    let m = g.mul(a, b)?;
    let o = g.matmul(m, p.get(&format!("{prefix}.w2"))?)?;
    g.add(x, o)
}

pub(crate) fn final_norm(g: &mut Graph, p: &ParamVars, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = p.get(name)?;
    g.rms_norm(x, gain, eps)
}

/// Places rows of `parts` (each a `[n_i, d]` var paired with the target row
/// indices of its rows) into one `[n, d]` matrix.
pub(crate) fn scatter_rows(g: &mut Graph, parts: &[(Var, &[usize])], n: usize) -> Result<Var> {
    let live: Vec<&(Var, &[usize])> = parts.iter().filter(|(_, idx)| !idx.is_empty()).collect();
    let mut src_of = vec![0usize; n];
    let mut offset = 0;
    for (_, idx) in &live {
        for (j, &r) in idx.iter().enumerate() {
            src_of[r] = offset + j;
        }
        offset += idx.len();
    }
    if live.len() == 1 && live[0].1.iter().enumerate().all(|(j, &r)| j == r) && offset == n {
        return Ok(live[0].0);
    }
    let vars: Vec<Var> = live.iter().map(|(v, _)| *v).collect();
    let stacked = if vars.len() == 1 { vars[0] } else { g.concat_rows(&vars)? };
    g.gather_rows(stacked, &src_of)
}

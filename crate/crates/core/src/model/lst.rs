//! The three stages of the hierarchical model. Each function takes its input
//! embeddings as a graph variable so tests can probe gradients directly.

use super::layers::{ffn_residual, final_norm, Attn, Rope};
use super::ModelConfig;
use crate::tensor::{AttentionMask, Graph, ParamVars, Result, Var};

/// Per-token layout of the speech positions fed to the local encoder.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncoderLayout {
    /// Row position of every encoder token.
    pub pos: Vec<usize>,
    /// Speech run of every token; attention never crosses runs.
    pub run: Vec<usize>,
    /// Patch (0-based among patches) of every token.
    pub patch: Vec<usize>,
    /// Offset of every token inside its patch.
    pub offset: Vec<usize>,
    pub n_patches: usize,
}

/// Causal local self-attention restricted to one run and the last `w` tokens.
pub fn encoder_mask(layout: &EncoderLayout, w: usize) -> AttentionMask {
    let n = layout.pos.len();
    AttentionMask::from_fn(n, n, |r, c| {
        c <= r && layout.run[r] == layout.run[c] && layout.pos[r] - layout.pos[c] < w
    })
}

/// Token embeddings `[S, d_local]` to patch representations `[P, d_global]`.
pub fn local_encode(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, x: Var, layout: &EncoderLayout) -> Result<Var> {
    let mask = encoder_mask(layout, cfg.window);
    let mut h = x;
    for l in 0..cfg.n_layers_enc {
        let attn = Attn {
            prefix: &format!("enc.layer{l}.attn"),
            heads: cfg.n_heads,
            eps: cfg.norm_eps,
        };
        let rope = Rope {
            q: Some(&layout.pos),
            k: Some(&layout.pos),
            theta: cfg.rope_theta,
        };
        h = attn.self_residual(g, p, h, &mask, &rope)?;
        h = ffn_residual(g, p, &format!("enc.layer{l}.ffn"), h, cfg.norm_eps)?;
    }
    let pool = Attn {
        prefix: "enc.pool",
        heads: cfg.n_heads,
        eps: cfg.norm_eps,
    };
    let kv = pool.norm(g, p, h)?;
    let q = g.gather_rows(p.get("enc.pool_query")?, &vec![0; layout.n_patches])?;
    let pool_mask = AttentionMask::from_fn(layout.n_patches, layout.pos.len(), |j, s| layout.patch[s] == j);
    let rope = Rope {
        q: None,
        k: Some(&layout.offset),
        theta: cfg.rope_theta,
    };
    let pooled = pool.apply(g, p, q, kv, &pool_mask, &rope)?;
    g.matmul(pooled, p.get("enc.out_proj")?)
}

/// Block-causal transformer over `[U, d_global]` units with RoPE over unit index.
pub fn global_forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let mask = AttentionMask::causal(n);
    let pos: Vec<usize> = (0..n).collect();
    let mut h = x;
    for l in 0..cfg.n_layers_global {
        let attn = Attn {
            prefix: &format!("global.layer{l}.attn"),
            heads: cfg.n_heads,
            eps: cfg.norm_eps,
        };
        let rope = Rope {
            q: Some(&pos),
            k: Some(&pos),
            theta: cfg.rope_theta,
        };
        h = attn.self_residual(g, p, h, &mask, &rope)?;
        h = ffn_residual(g, p, &format!("global.layer{l}.ffn"), h, cfg.norm_eps)?;
    }
    final_norm(g, p, "global.final_norm", h, cfg.norm_eps)
}

/// Token embeddings `[N, d_local]` plus global context rows to normalized
/// decoder states. Position `t` cross-attends to a learned start row and to
/// the first `visible[t]` context rows.
pub fn local_decode(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    ctx: Option<Var>,
    visible: &[usize],
) -> Result<Var> {
    let n = g.value(x).rows();
    let bos = p.get("dec.ctx_bos")?;
    let ctx = match ctx {
        Some(c) => g.concat_rows(&[bos, c])?,
        None => bos,
    };
    let m = g.value(ctx).rows();
    let w = cfg.window;
    let self_mask = AttentionMask::from_fn(n, n, |r, c| c <= r && r - c < w);
    let cross_mask = AttentionMask::from_fn(n, m, |t, j| j == 0 || j - 1 < visible[t]);
    let pos: Vec<usize> = (0..n).collect();
    let mut h = x;
    for l in 0..cfg.n_layers_dec {
        let sa = Attn {
            prefix: &format!("dec.layer{l}.self"),
            heads: cfg.n_heads,
            eps: cfg.norm_eps,
        };
        let rope = Rope {
            q: Some(&pos),
            k: Some(&pos),
            theta: cfg.rope_theta,
        };
        h = sa.self_residual(g, p, h, &self_mask, &rope)?;
        let ca = Attn {
            prefix: &format!("dec.layer{l}.cross"),
            heads: cfg.n_heads,
            eps: cfg.norm_eps,
        };
        let hn = ca.norm(g, p, h)?;
        let none = Rope {
            q: None,
            k: None,
            theta: cfg.rope_theta,
        };
        let a = ca.apply(g, p, hn, ctx, &cross_mask, &none)?;
        h = g.add(h, a)?;
        h = ffn_residual(g, p, &format!("dec.layer{l}.ffn"), h, cfg.norm_eps)?;
    }
    final_norm(g, p, "dec.final_norm", h, cfg.norm_eps)
}

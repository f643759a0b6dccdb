//! Hierarchical speech-text model and its token-level baselines.

mod config;
mod generate;
mod layers;
mod lst;

pub use config::{Architecture, ModelConfig};
pub use generate::{generate_speech, Generation, SamplingConfig};
pub use lst::{encoder_mask, global_forward, local_decode, local_encode, EncoderLayout};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MergeTable, Vocabulary};
use crate::interleave::{
    InterleaveError, InterleavedSequence, Modality, PackedRow, PlannedSequence, UnitKind,
};
use crate::patching::{segment, static_patch, PatchSegmentation, Strategy};
use crate::tensor::{Checkpoint, Graph, ParamStore, ParamVars, TensorError, Var};
use layers::{scatter_rows, Init};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Interleave(#[from] InterleaveError),
    #[error(transparent)]
    Patch(#[from] crate::patching::PatchError),
    #[error("row layout does not match the {arch} model: {message}")]
    Layout { arch: Architecture, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Logits at prediction positions together with what they predict.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Var,
    pub targets: Vec<usize>,
    /// Row position of each predicted token.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RowOutput {
    pub text: Option<HeadOutput>,
    pub speech: Option<HeadOutput>,
    /// Patch representations in patch order (LST only).
    pub patches: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub text: Option<Var>,
    pub speech: Option<Var>,
    pub n_text: usize,
    pub n_speech: usize,
}

/// A parameter set together with the architecture that reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub bpe: Option<MergeTable>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    arch: Architecture,
    cfg: ModelConfig,
    bpe: Option<MergeTable>,
}

const IGNORE: usize = usize::MAX;

impl Model {
    pub fn new(arch: Architecture, cfg: ModelConfig, seed: u64) -> Result<Self> {
        if arch == Architecture::Bpe {
            return Err(ModelError::Config("BPE models are built with Model::with_bpe".into()));
        }
        Self::build(arch, cfg, seed, None)
    }

    /// Base architecture over the merged vocabulary of `table`.
    pub fn with_bpe(mut cfg: ModelConfig, table: MergeTable, seed: u64) -> Result<Self> {
        cfg.speech_vocab = table.vocab_size() as usize;
        Self::build(Architecture::Bpe, cfg, seed, Some(table))
    }

    fn build(arch: Architecture, cfg: ModelConfig, seed: u64, bpe: Option<MergeTable>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed, cfg.init_std);
        let (dl, dg) = (cfg.d_local, cfg.d_global);
        init.matrix("global.text_embed", cfg.text_vocab, dg);
        for l in 0..cfg.n_layers_global {
            init.attention(&format!("global.layer{l}.attn"), dg, dg);
            init.ffn(&format!("global.layer{l}.ffn"), dg);
        }
        init.ones("global.final_norm", dg);
        init.matrix("text_head", dg, cfg.text_vocab);
        match arch {
            Architecture::Lst => {
                init.matrix("enc.speech_embed", cfg.speech_vocab, dl);
                for l in 0..cfg.n_layers_enc {
                    init.attention(&format!("enc.layer{l}.attn"), dl, dl);
                    init.ffn(&format!("enc.layer{l}.ffn"), dl);
                }
                init.matrix("enc.pool_query", 1, dl);
                init.attention("enc.pool", dl, dl);
                init.matrix("enc.out_proj", dl, dg);
                init.matrix("dec.speech_embed", cfg.speech_vocab, dl);
                init.matrix("dec.text_embed", cfg.text_vocab, dl);
                init.matrix("dec.ctx_bos", 1, dg);
                for l in 0..cfg.n_layers_dec {
                    init.attention(&format!("dec.layer{l}.self"), dl, dl);
                    init.attention(&format!("dec.layer{l}.cross"), dl, dg);
                    init.ffn(&format!("dec.layer{l}.ffn"), dl);
                }
                init.ones("dec.final_norm", dl);
                init.matrix("speech_head", dl, cfg.speech_vocab);
                if cfg.decoder_predicts_text {
                    init.matrix("dec.text_head", dl, cfg.text_vocab);
                }
            }
            Architecture::Base | Architecture::Bpe => {
                init.matrix("global.speech_embed", cfg.speech_vocab, dg);
                init.matrix("speech_head", dg, cfg.speech_vocab);
            }
        }
        Ok(Self { arch, cfg, params, bpe })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn text_vocab(&self) -> Vocabulary {
        Vocabulary::text(self.cfg.text_vocab as u32).expect("validated text vocabulary")
    }

    /// Groups `seq` into global units. LST uses `strategy`; baselines use one
    /// unit per (possibly merged) token. `subwords` gives each word's subword
    /// count for BPE-aligned patching.
    pub fn plan(
        &self,
        seq: &InterleavedSequence,
        strategy: Strategy,
        subwords: &dyn Fn(u32) -> usize,
    ) -> Result<PlannedSequence> {
        let vocab = self.text_vocab();
        match self.arch {
            Architecture::Lst => Ok(PlannedSequence::build(seq, &vocab, |_, run| {
                let spans = run.spans.as_ref();
                let counts: Option<Vec<usize>> = spans.map(|sp| {
                    sp.spans()
                        .iter()
                        .zip(&run.words)
                        .map(|(s, &w)| subwords(w).clamp(1, s.len()))
                        .collect()
                });
                let seg = segment(strategy, run.tokens.len(), spans, counts.as_deref())?;
                Ok(Some(seg))
            })?),
            Architecture::Base => Ok(PlannedSequence::token_level(seq, &vocab)),
            Architecture::Bpe => Ok(PlannedSequence::token_level(&self.bpe_encode(seq), &vocab)),
        }
    }

    /// Static-`p` plan used at inference.
    pub fn plan_static(&self, seq: &InterleavedSequence) -> Result<PlannedSequence> {
        self.plan(seq, Strategy::Static { p: self.cfg.static_p }, &|_| 1)
    }

    /// Replaces speech runs by their BPE units; alignment is dropped.
    pub fn bpe_encode(&self, seq: &InterleavedSequence) -> InterleavedSequence {
        let Some(table) = &self.bpe else {
            return seq.clone();
        };
        let mut out = seq.clone();
        for r in out.runs.iter_mut().filter(|r| r.modality == Modality::Speech) {
            r.tokens = table.encode(&r.tokens);
            r.spans = None;
        }
        out
    }

    fn layout_err(&self, message: impl Into<String>) -> ModelError {
        ModelError::Layout {
            arch: self.arch,
            message: message.into(),
        }
    }

    /// Runs one packed row and returns head logits at every prediction site.
    pub fn forward_row(&self, g: &mut Graph, p: &ParamVars, row: &PackedRow) -> Result<RowOutput> {
        if row.plan.len() != row.len() {
            return Err(self.layout_err("plan and row lengths differ"));
        }
        match self.arch {
            Architecture::Lst => self.forward_lst(g, p, row),
            Architecture::Base | Architecture::Bpe => self.forward_base(g, p, row),
        }
    }

    fn text_targets(row: &PackedRow) -> (Vec<usize>, Vec<usize>) {
        (1..row.len())
            .filter(|&t| row.targets[t] && row.modality[t] == Modality::Text)
            .map(|t| (t, row.tokens[t] as usize))
            .unzip()
    }

    fn speech_targets(row: &PackedRow) -> (Vec<usize>, Vec<usize>) {
        (1..row.len())
            .filter(|&t| row.targets[t] && row.modality[t] == Modality::Speech)
            .map(|t| (t, row.tokens[t] as usize))
            .unzip()
    }

    fn head(g: &mut Graph, h: Var, preds: &[usize], head: Var, positions: Vec<usize>, targets: Vec<usize>) -> Result<Option<HeadOutput>> {
        if preds.is_empty() {
            return Ok(None);
        }
        let rows = g.gather_rows(h, preds)?;
        let logits = g.matmul(rows, head)?;
        Ok(Some(HeadOutput {
            logits,
            targets,
            positions,
        }))
    }

    fn embed_positions(&self, g: &mut Graph, p: &ParamVars, row: &PackedRow, text_table: &str, speech_table: &str) -> Result<Var> {
        let (mut tp, mut ti, mut sp, mut si) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (t, (&tok, &m)) in row.tokens.iter().zip(&row.modality).enumerate() {
            match m {
                Modality::Text => {
                    tp.push(t);
                    ti.push(tok as usize);
                }
                Modality::Speech => {
                    sp.push(t);
                    si.push(tok as usize);
                }
            }
        }
        let mut parts = Vec::new();
        if !ti.is_empty() {
            parts.push((g.embedding(p.get(text_table)?, &ti)?, tp.as_slice()));
        }
        if !si.is_empty() {
            parts.push((g.embedding(p.get(speech_table)?, &si)?, sp.as_slice()));
        }
        Ok(scatter_rows(g, &parts, row.len())?)
    }

    fn forward_base(&self, g: &mut Graph, p: &ParamVars, row: &PackedRow) -> Result<RowOutput> {
        if row.n_units() != row.len() {
            return Err(self.layout_err("token-level models need one unit per position"));
        }
        let x = self.embed_positions(g, p, row, "global.text_embed", "global.speech_embed")?;
        let h = global_forward(g, p, &self.cfg, x)?;
        let (tpos, ttg) = Self::text_targets(row);
        let tpred: Vec<usize> = tpos.iter().map(|t| t - 1).collect();
        let (spos, stg) = Self::speech_targets(row);
        let spred: Vec<usize> = spos.iter().map(|t| t - 1).collect();
        let text = Self::head(g, h, &tpred, p.get("text_head")?, tpos, ttg)?;
        let speech = Self::head(g, h, &spred, p.get("speech_head")?, spos, stg)?;
        Ok(RowOutput {
            text,
            speech,
            patches: None,
        })
    }

    /// Encoder layout of every patch unit in `row`.
    pub fn encoder_layout(&self, row: &PackedRow) -> Result<(EncoderLayout, Vec<usize>)> {
        let mut layout = EncoderLayout::default();
        let mut patch_units = Vec::new();
        for (u, unit) in row.plan.units.iter().enumerate() {
            match unit.kind {
                UnitKind::Patch(_) => {
                    let j = patch_units.len();
                    patch_units.push(u);
                    for t in unit.start..=unit.end {
                        let run = row.run[t].ok_or_else(|| self.layout_err(format!("patch {u} covers text position {t}")))?;
                        layout.pos.push(t);
                        layout.run.push(run);
                        layout.patch.push(j);
                        layout.offset.push(t - unit.start);
                    }
                }
                UnitKind::Token => return Err(self.layout_err("LST rows must group speech into patches")),
                UnitKind::Text => {}
            }
        }
        layout.n_patches = patch_units.len();
        Ok((layout, patch_units))
    }

    /// Local encoder plus global model over every unit of `row`. Returns the
    /// global states and the patch representations.
    pub(crate) fn lst_global(&self, g: &mut Graph, p: &ParamVars, row: &PackedRow) -> Result<(Var, Option<Var>)> {
        let plan = &row.plan;
        let n_units = plan.n_units();
        let (layout, patch_units) = self.encoder_layout(row)?;
        let z = if patch_units.is_empty() {
            None
        } else {
            let ids: Vec<usize> = layout.pos.iter().map(|&t| row.tokens[t] as usize).collect();
            let x = g.embedding(p.get("enc.speech_embed")?, &ids)?;
            Some(local_encode(g, p, &self.cfg, x, &layout)?)
        };
        let text_units: Vec<usize> = (0..n_units).filter(|&u| plan.units[u].kind == UnitKind::Text).collect();
        let mut parts = Vec::new();
        if !text_units.is_empty() {
            let ids: Vec<usize> = text_units.iter().map(|&u| row.tokens[plan.units[u].start] as usize).collect();
            parts.push((g.embedding(p.get("global.text_embed")?, &ids)?, text_units.as_slice()));
        }
        if let Some(z) = z {
            parts.push((z, patch_units.as_slice()));
        }
        if parts.is_empty() {
            return Err(self.layout_err("row has no units"));
        }
        let x = scatter_rows(g, &parts, n_units)?;
        Ok((global_forward(g, p, &self.cfg, x)?, z))
    }

    fn forward_lst(&self, g: &mut Graph, p: &ParamVars, row: &PackedRow) -> Result<RowOutput> {
        let plan = &row.plan;
        let (h, z) = self.lst_global(g, p, row)?;
        let (tpos, ttg) = Self::text_targets(row);
        let (spos, stg) = Self::speech_targets(row);
        let mut text = None;
        if !self.cfg.decoder_predicts_text {
            let preds: Vec<usize> = tpos.iter().map(|&t| plan.pos_unit[t] - 1).collect();
            text = Self::head(g, h, &preds, p.get("text_head")?, tpos.clone(), ttg.clone())?;
        }
        let need_decoder = !spos.is_empty() || (self.cfg.decoder_predicts_text && !tpos.is_empty());
        let mut speech = None;
        if need_decoder {
            let x = self.embed_positions(g, p, row, "dec.text_embed", "dec.speech_embed")?;
            let visible: Vec<usize> = (0..row.len()).map(|t| plan.visible(t)).collect();
            let d = local_decode(g, p, &self.cfg, x, Some(h), &visible)?;
            let spred: Vec<usize> = spos.iter().map(|t| t - 1).collect();
            speech = Self::head(g, d, &spred, p.get("speech_head")?, spos, stg)?;
            if self.cfg.decoder_predicts_text {
                let tpred: Vec<usize> = tpos.iter().map(|t| t - 1).collect();
                text = Self::head(g, d, &tpred, p.get("dec.text_head")?, tpos, ttg)?;
            }
        }
        Ok(RowOutput {
            text,
            speech,
            patches: z,
        })
    }

    /// Mean text and speech cross-entropy over every prediction in `rows`;
    /// the total is their sum.
    pub fn batch_loss(&self, g: &mut Graph, p: &ParamVars, rows: &[PackedRow]) -> Result<BatchLoss> {
        let mut text = (Vec::new(), Vec::new());
        let mut speech = (Vec::new(), Vec::new());
        for row in rows {
            let out = self.forward_row(g, p, row)?;
            if let Some(h) = out.text {
                text.0.push(h.logits);
                text.1.extend(h.targets);
            }
            if let Some(h) = out.speech {
                speech.0.push(h.logits);
                speech.1.extend(h.targets);
            }
        }
        let ce = |g: &mut Graph, (vars, tg): (Vec<Var>, Vec<usize>)| -> Result<Option<(Var, usize)>> {
            if vars.is_empty() {
                return Ok(None);
            }
            let logits = if vars.len() == 1 { vars[0] } else { g.concat_rows(&vars)? };
            Ok(Some((g.cross_entropy(logits, &tg, IGNORE)?, tg.len())))
        };
        let t = ce(g, text)?;
        let s = ce(g, speech)?;
        let total = match (t, s) {
            (Some((a, _)), Some((b, _))) => g.add(a, b)?,
            (Some((a, _)), None) | (None, Some((a, _))) => a,
            (None, None) => return Err(TensorError::EmptyLoss.into()),
        };
        Ok(BatchLoss {
            total,
            text: t.map(|x| x.0),
            speech: s.map(|x| x.0),
            n_text: t.map_or(0, |x| x.1),
            n_speech: s.map_or(0, |x| x.1),
        })
    }

    /// Negative log-likelihood of every predicted token of `row`, keyed by position.
    pub fn position_nll(&self, row: &PackedRow) -> Result<Vec<Option<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_row(&mut g, &p, row)?;
        let mut nll = vec![None; row.len()];
        for h in [out.text, out.speech].into_iter().flatten() {
            let lv = g.value(h.logits);
            for (i, (&pos, &tg)) in h.positions.iter().zip(&h.targets).enumerate() {
                let r = lv.row(i);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                nll[pos] = Some(lse - r[tg]);
            }
        }
        Ok(nll)
    }

    /// Patch representations of `row` as plain vectors, in patch order.
    pub fn patch_embeddings(&self, row: &PackedRow) -> Result<Vec<Vec<f64>>> {
        if self.arch != Architecture::Lst {
            return Err(self.layout_err("only the hierarchical model produces patch embeddings"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (layout, patch_units) = self.encoder_layout(row)?;
        if patch_units.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<usize> = layout.pos.iter().map(|&t| row.tokens[t] as usize).collect();
        let x = g.embedding(p.get("enc.speech_embed")?, &ids)?;
        let z = local_encode(&mut g, &p, &self.cfg, x, &layout)?;
        let zv = g.value(z);
        Ok((0..zv.rows()).map(|r| zv.row(r).to_vec()).collect())
    }

    /// Static segmentation of a run of `t` frames under the inference patch size.
    pub fn inference_segmentation(&self, t: usize) -> PatchSegmentation {
        static_patch(t, self.cfg.static_p).expect("static_p validated")
    }

    /// Writes `<path>` (JSON header), `<path>.params.json` and its `.bin` data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: &dyn std::fmt::Display| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let header = ModelHeader {
            arch: self.arch,
            cfg: self.cfg.clone(),
            bpe: self.bpe.clone(),
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| io(&e))?;
        std::fs::write(path, json).map_err(|e| io(&e))?;
        Checkpoint::save_store(&params_path(path), &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: &dyn std::fmt::Display| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(&e))?;
        let header: ModelHeader = serde_json::from_str(&text).map_err(|e| io(&e))?;
        header.cfg.validate()?;
        let params = Checkpoint::load_store(&params_path(path))?;
        let fresh = Self::build(header.arch, header.cfg.clone(), 0, header.bpe.clone())?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(l) if l.shape() == t.shape() => {}
                Some(l) => return Err(io(&format!("parameter {name} has shape {:?}, expected {:?}", l.shape(), t.shape()))),
                None => return Err(io(&format!("parameter {name} missing"))),
            }
        }
        Ok(Self {
            arch: header.arch,
            cfg: header.cfg,
            params,
            bpe: header.bpe,
        })
    }
}

/// Parameter manifest written next to a model header.
pub fn params_path(header: &Path) -> std::path::PathBuf {
    let mut s = header.as_os_str().to_owned();
    s.push(".params.json");
    s.into()
}

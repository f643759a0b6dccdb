use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{global_forward, local_decode, Architecture, Model, Result};
use crate::interleave::{InterleavedSequence, Modality, PackedRow, PatchPlan, PlanUnit, UnitKind};
use crate::patching::SegmentKind;
use crate::rng::rng_for;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Argmax decoding; otherwise sample at `temperature`.
    pub greedy: bool,
    pub temperature: f64,
    pub seed: u64,
    /// Longest context kept; older units are dropped from the left.
    pub max_positions: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            greedy: true,
            temperature: 1.0,
            seed: 0,
            max_positions: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated raw speech tokens (BPE units are expanded).
    pub tokens: Vec<u32>,
    /// Number of times the global model was run on a longer prefix.
    pub global_advances: usize,
    /// Units dropped from the left to respect the context limit.
    pub dropped_units: usize,
}

/// Growing row with an open trailing patch that is not yet visible to the
/// global model.
struct State {
    tokens: Vec<u32>,
    modality: Vec<Modality>,
    run: Vec<Option<usize>>,
    closed: Vec<PlanUnit>,
    open_start: usize,
}

impl State {
    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn row(&self, upto: usize, units: Vec<PlanUnit>) -> PackedRow {
        PackedRow {
            tokens: self.tokens[..upto].to_vec(),
            modality: self.modality[..upto].to_vec(),
            run: self.run[..upto].to_vec(),
            targets: vec![false; upto],
            plan: PatchPlan::from_units(units).expect("generation keeps units contiguous"),
        }
    }

    /// Drops the oldest unit, shifting positions.
    fn drop_front(&mut self) {
        let first = self.closed.remove(0);
        let k = first.len();
        self.tokens.drain(..k);
        self.modality.drain(..k);
        self.run.drain(..k);
        for u in &mut self.closed {
            u.start -= k;
            u.end -= k;
        }
        self.open_start -= k;
    }
}

fn pick(logits: &[f64], cfg: &SamplingConfig, rng: &mut crate::rng::Rng) -> u32 {
    if cfg.greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let t = cfg.temperature.max(1e-6);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v - max) / t).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        x -= wi;
        if x <= 0.0 {
            return i as u32;
        }
    }
    (w.len() - 1) as u32
}

/// Continues `prompt` with `steps` speech tokens (BPE units for the BPE
/// baseline). The hierarchical model patches with static `p`: the trailing
/// patch stays open until it holds `p` tokens, and the global model is rerun
/// only when a patch closes.
pub fn generate_speech(model: &Model, prompt: &InterleavedSequence, steps: usize, cfg: &SamplingConfig) -> Result<Generation> {
    match model.arch {
        Architecture::Lst => generate_lst(model, prompt, steps, cfg),
        Architecture::Base | Architecture::Bpe => generate_tokens(model, prompt, steps, cfg),
    }
}

fn start_state(model: &Model, prompt: &InterleavedSequence) -> Result<State> {
    let vocab = model.text_vocab();
    let planned = model.plan_static(prompt)?;
    let mut st = State {
        tokens: planned.tokens,
        modality: planned.modality,
        run: planned.run,
        closed: planned.units,
        open_start: 0,
    };
    let ends_in_speech = st.modality.last() == Some(&Modality::Speech);
    if ends_in_speech && model.arch == Architecture::Lst {
        let last = *st.closed.last().expect("non-empty prompt");
        if last.len() < model.cfg.static_p {
            st.closed.pop();
            st.open_start = last.start;
            return Ok(st);
        }
    }
    if !ends_in_speech {
        let p = st.len();
        st.tokens.push(vocab.speech_marker());
        st.modality.push(Modality::Text);
        st.run.push(None);
        st.closed.push(PlanUnit {
            start: p,
            end: p,
            kind: UnitKind::Text,
        });
    }
    st.open_start = st.len();
    Ok(st)
}

fn current_run(st: &State) -> usize {
    match st.run.last().copied().flatten() {
        Some(r) if st.modality.last() == Some(&Modality::Speech) => r,
        _ => st.run.iter().flatten().max().map_or(0, |m| m + 1),
    }
}

fn generate_lst(model: &Model, prompt: &InterleavedSequence, steps: usize, cfg: &SamplingConfig) -> Result<Generation> {
    let p_static = model.cfg.static_p;
    let mut st = start_state(model, prompt)?;
    let run_id = current_run(&st);
    let mut rng = rng_for(cfg.seed, "generate", 0);
    let mut out = Vec::with_capacity(steps);
    let mut cached: Option<(usize, Tensor)> = None;
    let mut advances = 0;
    let mut dropped = 0;
    for _ in 0..steps {
        if st.len() - st.open_start == p_static {
            st.closed.push(PlanUnit {
                start: st.open_start,
                end: st.len() - 1,
                kind: UnitKind::Patch(SegmentKind::Static),
            });
            st.open_start = st.len();
        }
        while st.len() >= cfg.max_positions.max(p_static + 2) && st.closed.len() > 1 {
            st.drop_front();
            dropped += 1;
            cached = None;
        }
        let v = st.closed.len();
        if cached.as_ref().map(|c| c.0) != Some(v) {
            let row = st.row(st.open_start, st.closed.clone());
            let mut g = Graph::new();
            let pv = model.params.bind(&mut g, false);
            let (h, _) = model.lst_global(&mut g, &pv, &row)?;
            cached = Some((v, g.value(h).clone()));
            advances += 1;
        }
        let h = &cached.as_ref().expect("filled above").1;
        let mut units = st.closed.clone();
        if st.len() > st.open_start {
            units.push(PlanUnit {
                start: st.open_start,
                end: st.len() - 1,
                kind: UnitKind::Patch(SegmentKind::Static),
            });
        }
        let row = st.row(st.len(), units);
        let mut g = Graph::new();
        let pv = model.params.bind(&mut g, false);
        let x = model.embed_positions(&mut g, &pv, &row, "dec.text_embed", "dec.speech_embed")?;
        let ctx = g.constant(h.clone());
        let n = row.len();
        let visible: Vec<usize> = (0..n).map(|t| if t + 1 == n { v } else { row.plan.visible(t) }).collect();
        let d = local_decode(&mut g, &pv, &model.cfg, x, Some(ctx), &visible)?;
        let last = g.gather_rows(d, &[n - 1])?;
        let logits = g.matmul(last, pv.get("speech_head")?)?;
        let tok = pick(g.value(logits).data(), cfg, &mut rng);
        st.tokens.push(tok);
        st.modality.push(Modality::Speech);
        st.run.push(Some(run_id));
        out.push(tok);
    }
    Ok(Generation {
        tokens: out,
        global_advances: advances,
        dropped_units: dropped,
    })
}

fn generate_tokens(model: &Model, prompt: &InterleavedSequence, steps: usize, cfg: &SamplingConfig) -> Result<Generation> {
    let mut st = start_state(model, prompt)?;
    let run_id = current_run(&st);
    let mut rng = rng_for(cfg.seed, "generate", 0);
    let mut out = Vec::with_capacity(steps);
    let mut dropped = 0;
    for _ in 0..steps {
        while st.len() >= cfg.max_positions.max(2) && st.closed.len() > 1 {
            st.drop_front();
            dropped += 1;
        }
        let row = st.row(st.len(), st.closed.clone());
        let mut g = Graph::new();
        let pv = model.params.bind(&mut g, false);
        let x = model.embed_positions(&mut g, &pv, &row, "global.text_embed", "global.speech_embed")?;
        let h = global_forward(&mut g, &pv, &model.cfg, x)?;
        let last = g.gather_rows(h, &[row.len() - 1])?;
        let logits = g.matmul(last, pv.get("speech_head")?)?;
        let tok = pick(g.value(logits).data(), cfg, &mut rng);
        let p = st.len();
        st.tokens.push(tok);
        st.modality.push(Modality::Speech);
        st.run.push(Some(run_id));
        st.closed.push(PlanUnit {
            start: p,
            end: p,
            kind: UnitKind::Token,
        });
        st.open_start = st.len();
        out.push(tok);
    }
    let tokens = match &model.bpe {
        Some(t) => t.decode(&out),
        None => out,
    };
    Ok(Generation {
        tokens,
        global_advances: steps,
        dropped_units: dropped,
    })
}

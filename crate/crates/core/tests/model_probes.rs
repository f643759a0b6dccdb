use lst_core::corpus::{SynthConfig, Synthesizer, Utterance};
use lst_core::interleave::{interleave, pack_batch, InterleaveConfig, InterleavedSequence, PackedRow, UnitKind};
use lst_core::model::{generate_speech, Architecture, Model, ModelConfig, SamplingConfig};
use lst_core::rng::seeded;
use lst_core::tensor::Graph;

fn small() -> ModelConfig {
    ModelConfig {
        d_local: 16,
        d_global: 32,
        n_layers_enc: 1,
        n_layers_global: 1,
        n_layers_dec: 1,
        n_heads: 2,
        ..ModelConfig::default()
    }
}

fn utterances(n: usize) -> Vec<Utterance> {
    Synthesizer::new(SynthConfig::default()).unwrap().corpus(5, n)
}

fn row(model: &Model, seq: &InterleavedSequence) -> PackedRow {
    let planned = model.plan_static(seq).unwrap();
    let l = planned.n_units().max(8);
    pack_batch(vec![planned], l, &model.text_vocab()).unwrap().rows.remove(0)
}

#[test]
fn initial_losses_are_near_uniform() {
    let utts = utterances(4);
    for arch in [Architecture::Lst, Architecture::Base] {
        let model = Model::new(arch, small(), 3).unwrap();
        let cfg = InterleaveConfig::default();
        let rows: Vec<PackedRow> = utts
            .iter()
            .map(|u| row(&model, &interleave(u, &mut seeded(1), &cfg).unwrap()))
            .collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let l = model.batch_loss(&mut g, &p, &rows).unwrap();
        let speech = g.value(l.speech.unwrap()).item();
        let text = g.value(l.text.unwrap()).item();
        assert!((speech - 501f64.ln()).abs() < 0.05, "{arch}: speech {speech}");
        assert!((text - 512f64.ln()).abs() < 0.05, "{arch}: text {text}");
    }
}

#[test]
fn global_parameters_have_the_same_shapes() {
    let lst = Model::new(Architecture::Lst, small(), 0).unwrap();
    let base = Model::new(Architecture::Base, small(), 0).unwrap();
    let mut shared = 0;
    for (name, t) in lst.params.iter().filter(|(n, _)| n.starts_with("global.") || *n == "text_head") {
        if name == "global.speech_embed" {
            continue;
        }
        assert_eq!(base.params.get(name).map(|b| b.shape()), Some(t.shape()), "{name}");
        shared += 1;
    }
    assert!(shared > 5);
    assert!(!lst.params.contains("global.speech_embed"));
    assert!(lst.num_params() > base.num_params());
}

#[test]
fn save_and_load_preserve_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let utt = &utterances(1)[0];
    for arch in [Architecture::Lst, Architecture::Base] {
        let model = Model::new(arch, small(), 9).unwrap();
        let path = dir.path().join(format!("{arch}.json"));
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        let r = row(&model, &InterleavedSequence::pure_speech(utt));
        // The stored weights are single precision, so compare loosely.
        let a = model.position_nll(&r).unwrap();
        let b = back.position_nll(&r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-4),
                (None, None) => {}
                _ => panic!("target sets differ"),
            }
        }
    }
}

#[test]
fn global_model_runs_once_per_patch_during_generation() {
    let utt = &utterances(1)[0];
    let mut prompt = InterleavedSequence::pure_speech(utt);
    prompt.runs[0].tokens.truncate(8);
    let steps = 24;
    let lst = Model::new(Architecture::Lst, small(), 1).unwrap();
    let g = generate_speech(&lst, &prompt, steps, &SamplingConfig::default()).unwrap();
    assert_eq!(g.tokens.len(), steps);
    assert!(g.tokens.iter().all(|&t| (t as usize) < 501));
    let p = lst.cfg.static_p;
    assert_eq!(g.global_advances, steps.div_ceil(p));
    let base = Model::new(Architecture::Base, small(), 1).unwrap();
    let g = generate_speech(&base, &prompt, steps, &SamplingConfig::default()).unwrap();
    assert_eq!(g.global_advances, steps);
}

#[test]
fn one_patch_embedding_per_patch() {
    let utt = &utterances(1)[0];
    let model = Model::new(Architecture::Lst, small(), 2).unwrap();
    let seq = InterleavedSequence::pure_speech(utt);
    let planned = model.plan_static(&seq).unwrap();
    let r = row(&model, &seq);
    let emb = model.patch_embeddings(&r).unwrap();
    let patches = planned.units.iter().filter(|u| matches!(u.kind, UnitKind::Patch(_))).count();
    assert!(patches > 1);
    assert_eq!(emb.len(), patches);
    assert!(emb.iter().all(|e| e.len() == model.cfg.d_global && e.iter().all(|v| v.is_finite())));
}

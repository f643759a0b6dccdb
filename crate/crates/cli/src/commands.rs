use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lst_core::corpus::{read_corpus, subword_count, train_speech_bpe, write_corpus, SynthConfig, Synthesizer, Utterance};
use lst_core::eval::{
    build_eval_set, build_matched_eval_set, evaluate, read_records, stability_report, write_records, EvalModality,
    EvalRecord, EvalReport, EvalSetConfig, MetricSummary, ModelScorer, Normalization, StabilityReport,
};
use lst_core::model::{Architecture, Model};
use lst_core::patching::{segment, select_patching, PatchingConfig, PatchingMode, SilenceMode};
use lst_core::rng::{rng_for, substream};
use lst_core::trainer::{Budget, Trainer};
use serde::Serialize;

use crate::config::{self, invalid, RunConfig};
use crate::manifest::{beside, config_hash, RunManifest};
use crate::{
    BudgetArg, ClusterStatsArgs, EvalArgs, GenCorpusArgs, ModalityArg, ModeArg, NormArg, PatchInspectArgs,
    PatchingArg, PlotCsvArgs, SilenceArg, TrainArgs,
};

fn patching_mode(p: PatchingArg) -> PatchingMode {
    match p {
        PatchingArg::Static => PatchingMode::Static,
        PatchingArg::Aligned => PatchingMode::Aligned,
        PatchingArg::Mixed => PatchingMode::Mixed,
        PatchingArg::Curriculum => PatchingMode::Curriculum,
        PatchingArg::BpeAligned => PatchingMode::BpeAligned,
    }
}

fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let c = read_corpus(path)?;
    if c.is_empty() {
        bail!("{} holds no utterances", path.display());
    }
    Ok(c)
}

fn synthesizer(path: Option<&Path>) -> Result<Synthesizer> {
    let cfg: SynthConfig = config::load(path)?;
    Synthesizer::new(cfg).map_err(invalid)
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg: SynthConfig = config::load(a.config.as_deref())?;
    if let Some(v) = a.mean_word_frames {
        cfg.mean_word_frames = v;
    }
    if let Some(v) = a.mean_sil_frames {
        cfg.mean_sil_frames = v;
    }
    if let Some(v) = a.sil_prob {
        cfg.sil_prob = v;
    }
    let synth = Synthesizer::new(cfg.clone()).map_err(invalid)?;
    let hash = config_hash(&(&cfg, a.utterances, a.tokens));
    RunManifest::new("gen-corpus", Some(a.seed), Some(hash), vec![a.out.clone()]).write(Some(&beside(&a.out)))?;
    let utts = match a.utterances {
        Some(n) => synth.corpus(a.seed, n),
        None => synth.corpus_with_tokens(a.seed, a.tokens),
    };
    write_corpus(&a.out, &utts)?;
    let frames: usize = utts.iter().map(|u| u.speech_tokens.len()).sum();
    let words: usize = utts.iter().map(|u| u.n_words()).sum();
    println!("{} utterances, {frames} speech tokens, {words} words -> {}", utts.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = config::load(a.config.as_deref())?;
    let arch = match a.mode {
        ModeArg::Lst => Architecture::Lst,
        ModeArg::Base => Architecture::Base,
        ModeArg::Bpe => Architecture::Bpe,
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.patching {
        cfg.train.patching.mode = patching_mode(p);
    }
    if let Some(s) = a.steps {
        cfg.train.schedule.total = s;
    }
    let corpus = load_corpus(&a.corpus)?;
    match a.budget {
        Some(BudgetArg::Compute) => cfg.train.budget = Budget::Compute,
        Some(BudgetArg::Data) => {
            let tokens = match (a.data_tokens, cfg.train.budget) {
                (Some(t), _) | (None, Budget::Data { tokens: t }) => t,
                (None, Budget::Compute) => corpus.iter().map(|u| (u.speech_tokens.len() + u.text_tokens.len()) as u64).sum(),
            };
            cfg.train.budget = Budget::Data { tokens };
        }
        None => {}
    }
    cfg.train.validate().map_err(invalid)?;
    cfg.model.validate().map_err(invalid)?;
    let seed = cfg.train.seed;
    let hash = config_hash(&(arch, &cfg));
    let outputs = ["metrics.csv", "checkpoint", "model.json", "config.json"].map(|f| a.out.join(f)).to_vec();
    RunManifest::new("train", Some(seed), Some(hash), outputs).write(Some(&a.out.join("manifest.json")))?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;

    let init_seed = substream(seed, "init", 0);
    let model = match arch {
        Architecture::Bpe => {
            let speech: Vec<Vec<u32>> = corpus.iter().map(|u| u.speech_tokens.clone()).collect();
            let base = cfg.model.speech_vocab as u32;
            let table = train_speech_bpe(&speech, base, cfg.bpe_vocab).map_err(invalid)?;
            Model::with_bpe(cfg.model.clone(), table, init_seed).map_err(invalid)?
        }
        _ => Model::new(arch, cfg.model.clone(), init_seed).map_err(invalid)?,
    };
    let params = model.num_params();
    let mut t = Trainer::new(model, cfg.train.clone(), Arc::new(corpus))?;
    let outcome = t.run(Some(&a.out), None)?;
    t.model.save(&a.out.join("model.json"))?;
    let last = outcome.last.as_ref();
    println!(
        "{arch}: {params} parameters, {} steps, {} global units, loss {}",
        outcome.steps,
        outcome.ledger.units,
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.loss))
    );
    Ok(())
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.json")
    } else {
        p.to_path_buf()
    }
}

#[derive(Serialize)]
struct ModelEval<'a> {
    model: PathBuf,
    accuracy: f64,
    nll_diff: f64,
    n_records: usize,
    skipped: usize,
    units: u64,
    predictions: &'a [Option<usize>],
}

fn eval_metrics(r: &EvalReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("accuracy".to_string(), r.accuracy),
        ("nll_diff".to_string(), r.nll_diff),
        ("skipped".to_string(), r.skipped as f64),
    ])
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let set_cfg = EvalSetConfig {
        n_records: a.n_records,
        n_candidates: a.candidates,
        modality: match a.modality {
            ModalityArg::Speech => EvalModality::Speech,
            ModalityArg::Text => EvalModality::Text,
        },
        prompt_words: a.prompt_words,
        continuation: a.continuation,
    };
    let norm = match a.normalization {
        NormArg::Sum => Normalization::Sum,
        NormArg::PerToken => Normalization::PerToken,
    };
    let source = match (&a.records, &a.held_out) {
        (Some(p), _) => format!("records:{}", p.display()),
        (None, Some(p)) => format!("held-out:{}", p.display()),
        (None, None) => "matched".to_string(),
    };
    let hash = config_hash(&(&set_cfg, &source, norm, a.aligned, a.max_units, &a.model));
    let outputs = ["report.csv", "eval.json", "records.jsonl"].map(|f| a.out.join(f)).to_vec();
    RunManifest::new("eval", Some(a.seed), Some(hash), outputs).write(Some(&a.out.join("manifest.json")))?;

    let records: Vec<EvalRecord> = match (&a.records, &a.held_out) {
        (Some(p), _) => read_records(p)?,
        (None, Some(p)) => {
            let synth = synthesizer(a.synth_config.as_deref())?;
            let held = load_corpus(p)?;
            let lex = synth.lexicon();
            build_eval_set(&held, &|w| lex.topic(w), &set_cfg, a.seed).map_err(invalid)?
        }
        (None, None) => {
            let synth = synthesizer(a.synth_config.as_deref())?;
            build_matched_eval_set(&synth, &set_cfg, a.seed).map_err(invalid)?
        }
    };
    write_records(&a.out.join("records.jsonl"), &records)?;
    let models = a
        .model
        .iter()
        .map(|p| {
            let mp = model_path(p);
            Model::load(&mp).with_context(|| format!("loading {}", mp.display())).map(|m| (mp, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for (path, m) in &models {
        let scorer = ModelScorer {
            aligned: a.aligned,
            ..ModelScorer::new(m, a.max_units)
        };
        let r = evaluate(&scorer, &records, norm).with_context(|| format!("evaluating {}", path.display()))?;
        println!(
            "{} ({}): accuracy {:.4}, nll_diff {:.4}, {} scored, {} skipped",
            path.display(),
            m.arch,
            r.accuracy,
            r.nll_diff,
            r.n_records - r.skipped,
            r.skipped
        );
        reports.push(r);
    }
    let summary = if reports.len() >= 2 {
        let mut it = reports.iter();
        let seeds: Vec<u64> = (0..reports.len() as u64).collect();
        stability_report(&seeds, |_| Ok::<_, String>(eval_metrics(it.next().expect("one report per seed"))))?
    } else {
        let m = eval_metrics(&reports[0]);
        StabilityReport {
            metrics: m
                .iter()
                .map(|(k, &v)| MetricSummary {
                    metric: k.clone(),
                    mean: v,
                    std: 0.0,
                    n_seeds: 1,
                })
                .collect(),
            per_seed: vec![(0, m)],
            failed: Vec::new(),
        }
    };
    std::fs::write(a.out.join("report.csv"), summary.to_csv())?;
    let detail: Vec<ModelEval> = models
        .iter()
        .zip(&reports)
        .map(|((p, _), r)| ModelEval {
            model: p.clone(),
            accuracy: r.accuracy,
            nll_diff: r.nll_diff,
            n_records: r.n_records,
            skipped: r.skipped,
            units: r.units,
            predictions: &r.predictions,
        })
        .collect();
    std::fs::write(a.out.join("eval.json"), serde_json::to_string_pretty(&detail)? + "\n")?;
    if let Some(acc) = summary.get("accuracy") {
        println!("accuracy {:.4} ± {:.4} over {} model(s)", acc.mean, acc.std, acc.n_seeds);
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct ModeStats {
    mode: String,
    utterances: usize,
    frames: usize,
    patches: usize,
    mean_patch_size: f64,
    /// Patches per utterance → utterances.
    patches_per_utterance: BTreeMap<usize, usize>,
    /// Patch length → patches.
    patch_sizes: BTreeMap<usize, usize>,
}

pub fn patch_inspect(a: PatchInspectArgs) -> Result<()> {
    let manifest_path = a.out.as_deref().map(beside);
    let hash = config_hash(&(a.mode.map(patching_mode), a.p, a.step, &a.corpus));
    RunManifest::new("patch-inspect", Some(a.seed), Some(hash), a.out.iter().cloned().collect())
        .write(manifest_path.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    let modes: Vec<PatchingArg> = match a.mode {
        Some(m) => vec![m],
        None => vec![
            PatchingArg::Static,
            PatchingArg::Aligned,
            PatchingArg::Mixed,
            PatchingArg::Curriculum,
            PatchingArg::BpeAligned,
        ],
    };
    let silence = match a.silence {
        SilenceArg::Separate => SilenceMode::Separate,
        SilenceArg::Merged => SilenceMode::Merged,
    };
    let mut all = Vec::new();
    for m in modes {
        let cfg = PatchingConfig {
            mode: patching_mode(m),
            p: a.p,
            silence,
            ..PatchingConfig::default()
        };
        cfg.validate().map_err(invalid)?;
        let name = serde_json::to_value(cfg.mode)?.as_str().unwrap_or_default().to_string();
        let mut st = ModeStats {
            mode: name.clone(),
            ..ModeStats::default()
        };
        for (i, u) in corpus.iter().enumerate() {
            let mut rng = rng_for(a.seed, "patching", i as u64);
            let strategy = select_patching(a.step, &mut rng, &cfg, u.spans.len() == u.n_words())?;
            // Words shorter than their subword count get one unit per frame, as in training.
            let subwords: Vec<usize> = u
                .text_tokens
                .iter()
                .zip(u.spans.spans())
                .map(|(&w, s)| subword_count(w).clamp(1, s.len()))
                .collect();
            let t = u.speech_tokens.len();
            let seg = segment(strategy, t, Some(&u.spans), Some(&subwords))?;
            st.utterances += 1;
            st.frames += t;
            st.patches += seg.len();
            *st.patches_per_utterance.entry(seg.len()).or_default() += 1;
            for s in &seg.segments {
                *st.patch_sizes.entry(s.len()).or_default() += 1;
            }
            if !a.stats && i < a.limit {
                let parts: Vec<String> = seg.segments.iter().map(|s| format!("{}-{}", s.start, s.end)).collect();
                println!("{name} utterance {i} ({t} frames, {strategy:?}): {}", parts.join(" "));
            }
        }
        st.mean_patch_size = st.frames as f64 / st.patches.max(1) as f64;
        if a.stats {
            println!(
                "{name}: {} utterances, {} frames, {} patches, mean patch size {:.3}",
                st.utterances, st.frames, st.patches, st.mean_patch_size
            );
            let hist = |h: &BTreeMap<usize, usize>| h.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ");
            println!("  patches per utterance  {}", hist(&st.patches_per_utterance));
            println!("  patch sizes            {}", hist(&st.patch_sizes));
        }
        all.push(st);
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&all)? + "\n")?;
    }
    Ok(())
}

pub fn plot_csv(a: PlotCsvArgs) -> Result<()> {
    let hash = config_hash(&(&a.x, &a.y, &a.title));
    RunManifest::new("plot-csv", None, Some(hash), vec![a.out.clone()]).write(Some(&beside(&a.out)))?;
    let text = std::fs::read_to_string(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let ys: Vec<&str> = a.y.iter().map(String::as_str).collect();
    let svg = lst_core::eval::plot_csv(&text, &a.x, &ys, &a.title)?;
    std::fs::write(&a.out, svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn cluster_stats(a: ClusterStatsArgs) -> Result<()> {
    let manifest_path = a.out.as_deref().map(beside);
    let hash = config_hash(&(&a.model, &a.corpus, a.per_word, &a.words));
    RunManifest::new("cluster-stats", None, Some(hash), a.out.iter().cloned().collect()).write(manifest_path.as_deref())?;
    let mp = model_path(&a.model);
    let model = Model::load(&mp).with_context(|| format!("loading {}", mp.display()))?;
    let corpus = load_corpus(&a.corpus)?;
    let stats = lst_core::eval::cluster_stats(&model, &corpus, &a.words, a.per_word)?;
    let json = serde_json::to_string_pretty(&stats)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::write(out, json + "\n")?;
    }
    Ok(())
}

use lst_core::corpus::{read_corpus, train_speech_bpe, write_corpus, SynthConfig, Synthesizer, Vocabulary};
use lst_core::interleave::{interleave, pack_batch, InterleaveConfig, InterleaveMode, InterleavedSequence, Modality, PlannedSequence};
use lst_core::rng::seeded;
use proptest::prelude::*;

fn synth() -> Synthesizer {
    Synthesizer::new(SynthConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bpe_round_trip(seed in any::<u64>(), len in 0usize..300) {
        let mut rng = seeded(seed);
        let train: Vec<Vec<u32>> = (0..20).map(|_| (0..50).map(|_| rng.random_range(0..12)).collect()).collect();
        let table = train_speech_bpe(&train, 16, 64).unwrap();
        let x: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
        let enc = table.encode(&x);
        prop_assert!(enc.len() <= x.len());
        prop_assert!(enc.iter().all(|&u| u < table.vocab_size()));
        prop_assert_eq!(table.decode(&enc), x);
    }

    #[test]
    fn interleave_origins_reconstruct_the_utterance(seed in any::<u64>(), words in 2usize..16, single in any::<bool>()) {
        let u = synth().utterance(seed, words).unwrap();
        let cfg = InterleaveConfig { mode: if single { InterleaveMode::SingleSwitch } else { InterleaveMode::Repeat } };
        let s = interleave(&u, &mut seeded(seed ^ 1), &cfg).unwrap();
        let mut next_word = 0;
        for r in &s.runs {
            let o = r.origin;
            prop_assert_eq!(o.w0, next_word);
            prop_assert!(o.w1 > o.w0);
            prop_assert_eq!(&r.words[..], &u.text_tokens[o.w0..o.w1]);
            match r.modality {
                Modality::Text => prop_assert_eq!(&r.tokens[..], &u.text_tokens[o.w0..o.w1]),
                Modality::Speech => {
                    prop_assert_eq!(&r.tokens[..], &u.speech_tokens[o.f0..o.f1]);
                    let spans = r.spans.as_ref().unwrap();
                    for (k, sp) in spans.spans().iter().enumerate() {
                        let orig = u.spans.spans()[o.w0 + k];
                        prop_assert_eq!((sp.b + o.f0, sp.e + o.f0), (orig.b, orig.e));
                    }
                }
            }
            next_word = o.w1;
        }
        if !single {
            prop_assert_eq!(next_word, u.n_words());
        }
        prop_assert!(s.runs.iter().any(|r| r.modality == Modality::Text));
    }

    #[test]
    fn packing_keeps_units_and_positions(seed in any::<u64>(), n in 1usize..12, l in 8usize..96) {
        let sy = synth();
        let vocab = Vocabulary::text(512).unwrap();
        let seqs: Vec<PlannedSequence> = (0..n)
            .map(|i| {
                let u = sy.utterance(seed.wrapping_add(i as u64), 6).unwrap();
                PlannedSequence::token_level(&InterleavedSequence::pure_speech(&u), &vocab)
            })
            .collect();
        let batch = pack_batch(seqs, l, &vocab).unwrap();
        for row in &batch.rows {
            prop_assert!(row.n_units() <= l);
            prop_assert_eq!(row.plan.len(), row.len());
            for t in 0..row.len() {
                // A prediction at t may read exactly the units that end before t + 1.
                let vis = row.plan.visible(t);
                prop_assert!(row.plan.units[..vis].iter().all(|u| u.end <= t));
            }
        }
    }
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let utts = synth().corpus(4, 20);
    for name in ["c.jsonl", "c.jsonl.gz"] {
        let p = dir.path().join(name);
        write_corpus(&p, &utts).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), utts);
    }
}

mod common;

use common::*;
use lst_core::corpus::{AlignmentSpan, AlignmentSpanList};
use lst_core::patching::{
    aligned_patch, bpe_aligned_patch, curriculum_prob, select_patching, static_patch, CurriculumSchedule, PatchingConfig,
    PatchingMode, SilenceMode, Strategy,
};
use lst_core::rng::{rng_for, seeded};
use proptest::prelude::*;

fn span(b: usize, e: usize, unit: usize) -> AlignmentSpan {
    AlignmentSpan { unit, b, e }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn static_matches_oracle(t in 1usize..=200, p in 1usize..=16) {
        let seg = static_patch(t, p).unwrap();
        prop_assert!(tiles(&seg));
        prop_assert_eq!(ranges(&seg), static_oracle(t, p));
    }

    #[test]
    fn aligned_matches_oracle(t in 1usize..=200, seed in any::<u64>()) {
        let spans = random_spans(&mut seeded(seed), t);
        for mode in [SilenceMode::Separate, SilenceMode::Merged] {
            let seg = aligned_patch(t, &spans, mode).unwrap();
            prop_assert!(tiles(&seg));
            prop_assert_eq!(ranges(&seg), aligned_oracle(t, spans.spans(), mode));
        }
    }

    #[test]
    fn bpe_aligned_matches_oracle(t in 1usize..=200, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let spans = random_spans(&mut rng, t);
        let sub: Vec<usize> = spans.spans().iter().map(|s| rng.random_range(1..=s.len().min(4))).collect();
        let seg = bpe_aligned_patch(t, &spans, &sub).unwrap();
        prop_assert!(tiles(&seg));
        prop_assert_eq!(ranges(&seg), bpe_aligned_oracle(t, spans.spans(), &sub));
    }

    #[test]
    fn curriculum_is_piecewise_linear(tau1 in 0u64..5000, width in 1u64..5000, u in 0u64..20_000) {
        let s = CurriculumSchedule::new(tau1, tau1 + width).unwrap();
        let expect = if u < tau1 { 1.0 } else if u >= tau1 + width { 0.0 } else { (tau1 + width - u) as f64 / width as f64 };
        prop_assert!((curriculum_prob(u, &s) - expect).abs() <= 1e-15);
    }
}

#[test]
fn static_worked_example() {
    assert_eq!(ranges(&static_patch(7, 3).unwrap()), vec![(0, 2), (3, 5), (6, 6)]);
}

#[test]
fn aligned_worked_example() {
    let spans = AlignmentSpanList::new(vec![span(2, 4, 0), span(6, 7, 1)]);
    let seg = aligned_patch(8, &spans, SilenceMode::Separate).unwrap();
    assert_eq!(ranges(&seg), vec![(0, 1), (2, 4), (5, 5), (6, 7)]);
}

#[test]
fn adjacent_words_stay_separate() {
    let spans = AlignmentSpanList::new(vec![span(0, 2, 0), span(3, 3, 1)]);
    let seg = aligned_patch(4, &spans, SilenceMode::Merged).unwrap();
    assert_eq!(ranges(&seg), vec![(0, 2), (3, 3)]);
}

#[test]
fn invalid_spans_rejected() {
    let overlap = AlignmentSpanList::new(vec![span(0, 3, 0), span(3, 5, 1)]);
    assert!(aligned_patch(8, &overlap, SilenceMode::Separate).is_err());
    let past_end = AlignmentSpanList::new(vec![span(2, 9, 0)]);
    assert!(aligned_patch(8, &past_end, SilenceMode::Separate).is_err());
    assert!(static_patch(5, 0).is_err());
}

#[test]
fn curriculum_selection_tracks_probability() {
    let cfg = PatchingConfig {
        mode: PatchingMode::Curriculum,
        schedule: CurriculumSchedule::new(1000, 3000).unwrap(),
        ..PatchingConfig::default()
    };
    for window in 0..4u64 {
        let mut aligned = 0;
        let mut expect = 0.0;
        for u in window * 1000..(window + 1) * 1000 {
            let s = select_patching(u, &mut rng_for(5, "patching", u), &cfg, true).unwrap();
            aligned += matches!(s, Strategy::Aligned(_)) as usize;
            expect += curriculum_prob(u, &cfg.schedule);
        }
        let frac = aligned as f64 / 1000.0;
        assert!((frac - expect / 1000.0).abs() < 0.05, "window {window}: {frac} vs {}", expect / 1000.0);
    }
}

#[test]
fn aligned_modes_need_alignment() {
    let cfg = PatchingConfig {
        mode: PatchingMode::Aligned,
        ..PatchingConfig::default()
    };
    assert!(select_patching(0, &mut seeded(0), &cfg, false).is_err());
    let st = PatchingConfig::default();
    assert!(select_patching(0, &mut seeded(0), &st, false).is_ok());
}

use std::cell::Cell;
use std::collections::HashSet;

use proptest::collection::vec;
use proptest::prelude::*;

use tema_core::autodiff::{Matrix, Tape};
use tema_core::dataset::{
    dataset_stats, generate_synthetic, parse_jsonl, to_jsonl, validate, Split, SynthConfig, SynthKind, TripletRecord,
};
use tema_core::objectives::{loss_bbc, loss_summ};
use tema_core::parsing::{
    check_consistency, extract_entities, refine_until_consistent, ReferenceSummarizer, Summarizer,
};
use tema_core::retrieval::{build_index, rank_candidates, rank_of, recall_at_k, subset_rank};
use tema_core::Error;

const WORDS: &[&str] = &[
    "make", "the", "sleeves", "longer", "and", "add", "a", "red", "belt", "change", "collar", "to", "white",
    "remove", "pockets", "is", "darker", "with", "stripes", "dogs", "running", "replace", "boots", "it", "more",
    "colorful", "shirts", "has", "flowers", "Printed", "HEM", "buttons,", "lace.",
];

fn text() -> impl Strategy<Value = String> {
    vec(prop::sample::select(WORDS), 0..14).prop_map(|w| w.join(" "))
}

fn record() -> impl Strategy<Value = TripletRecord> {
    (
        "[a-z0-9-]{1,8}",
        "[a-z0-9]{1,6}",
        "[a-z0-9]{1,6}",
        text(),
        proptest::option::of("[A-Za-z ,.]{0,20}"),
        proptest::option::of(prop::sample::select(vec!["dress", "shirt", "toptee"])),
        proptest::option::of(vec("[a-z0-9]{1,4}", 0..4)),
        any::<bool>(),
    )
        .prop_map(|(id, reference, target, mmt, summary, category, subset, val)| TripletRecord {
            id,
            reference,
            target,
            mmt: format!("{mmt} x"),
            summary,
            category: category.map(String::from),
            subset_members: subset,
            split: if val { Split::Val } else { Split::Train },
        })
}

struct Stubborn<'a> {
    calls: &'a Cell<usize>,
}

impl Summarizer for Stubborn<'_> {
    fn summarize(&self, _mmt: &str) -> tema_core::Result<String> {
        self.calls.set(self.calls.get() + 1);
        Ok("Modify the zeppelin.".into())
    }
}

fn unit_rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-1.0f64..1.0, dim), n).prop_filter("non-zero rows", |rows| {
        rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    })
}

fn named(rows: &[Vec<f64>]) -> Vec<(String, Vec<f64>)> {
    rows.iter().enumerate().map(|(i, v)| (format!("c{i:03}"), v.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_is_idempotent(t in text()) {
        let once = extract_entities(&t);
        let joined = once.stems.iter().cloned().collect::<Vec<_>>().join(" ");
        prop_assert_eq!(extract_entities(&joined), once);
    }

    #[test]
    fn consistency_is_reflexive(t in text()) {
        prop_assert!(check_consistency(&t, &t).passed());
    }

    #[test]
    fn reference_summary_passes(t in text()) {
        match ReferenceSummarizer.summarize(&t) {
            Ok(s) => prop_assert!(check_consistency(&t, &s).passed(), "{:?} -> {:?}", t, s),
            Err(_) => prop_assert!(extract_entities(&t).is_empty()),
        }
    }

    #[test]
    fn refinement_is_bounded(t in "[a-y ]{3,30}", max_iters in 1usize..7) {
        let calls = Cell::new(0);
        let r = refine_until_consistent(&t, &Stubborn { calls: &calls }, max_iters);
        prop_assert!(calls.get() <= max_iters);
        if let Err(Error::RefinementExhausted { attempts, .. }) = r {
            prop_assert_eq!(attempts, max_iters);
            prop_assert_eq!(calls.get(), max_iters);
        }
    }

    #[test]
    fn jsonl_round_trip(mut records in vec(record(), 0..8)) {
        for (i, r) in records.iter_mut().enumerate() {
            r.id = format!("{i}-{}", r.id);
        }
        let back = parse_jsonl(&to_jsonl(&records)).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn stats_ignore_record_order(records in vec(record(), 1..12), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        let k = shuffled.len();
        shuffled.rotate_left((seed as usize) % k);
        shuffled.reverse();
        prop_assert_eq!(dataset_stats(&shuffled).unwrap(), dataset_stats(&records).unwrap());
    }

    #[test]
    fn ranking_ignores_insertion_order(rows in unit_rows(12, 4), q in vec(0.1f64..1.0, 4), rot in 0usize..12) {
        let items = named(&rows);
        let mut moved = items.clone();
        moved.rotate_left(rot);
        moved.reverse();
        let a = build_index(items).unwrap();
        let b = build_index(moved).unwrap();
        prop_assert_eq!(rank_candidates(&q, &a, &[]).unwrap(), rank_candidates(&q, &b, &[]).unwrap());
    }

    #[test]
    fn ranking_ignores_common_scale(rows in unit_rows(12, 4), q in vec(0.1f64..1.0, 4), e in -6i32..6) {
        // powers of two scale exactly, so cosine scores are unchanged bit for bit
        let c = 2f64.powi(e);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let a = build_index(named(&rows)).unwrap();
        let b = build_index(named(&scaled)).unwrap();
        prop_assert_eq!(rank_candidates(&q, &a, &[]).unwrap(), rank_candidates(&q, &b, &[]).unwrap());
    }

    #[test]
    fn recall_is_monotone_and_saturates(rows in unit_rows(10, 3), qs in vec(vec(-1.0f64..1.0, 3), 1..6), picks in vec(0usize..10, 6)) {
        prop_assume!(qs.iter().all(|q| q.iter().any(|x| x.abs() > 1e-3)));
        let index = build_index(named(&rows)).unwrap();
        let rankings: Vec<Vec<String>> = qs.iter().map(|q| rank_candidates(q, &index, &[]).unwrap()).collect();
        let targets: Vec<String> = (0..qs.len()).map(|i| format!("c{:03}", picks[i])).collect();
        let mut prev = 0.0;
        for k in 1..=10 {
            let r = recall_at_k(&rankings, &targets, k);
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn subset_rank_never_worse(rows in unit_rows(10, 3), q in vec(0.1f64..1.0, 3), t in 0usize..10, extra in vec(0usize..10, 0..5)) {
        let index = build_index(named(&rows)).unwrap();
        let target = format!("c{t:03}");
        let mut members: Vec<String> = extra.iter().map(|i| format!("c{i:03}")).collect();
        members.push(target.clone());
        let full = rank_of(&rank_candidates(&q, &index, &[]).unwrap(), &target).unwrap();
        let sub = subset_rank("q", &q, &index, Some(&members), &target).unwrap();
        prop_assert!(sub <= full);
        let unique: HashSet<&String> = members.iter().collect();
        prop_assert!(sub <= unique.len());
    }

    #[test]
    fn summ_loss_is_bounded(s in vec(-1.0f64..1.0, 6), rows in unit_rows(3, 6)) {
        prop_assume!(s.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut t = Tape::new();
        let sv = t.constant(Matrix::row_vector(&s));
        let e = t.constant(Matrix::from_rows(&rows).unwrap());
        match loss_summ(&mut t, sv, e) {
            Ok(l) => {
                let v = t.value(l).item();
                prop_assert!((0.0..=2.0).contains(&v), "{}", v);
            }
            Err(e) => prop_assert!(matches!(e, Error::ZeroVector(_))),
        }
    }

    #[test]
    fn bbc_is_non_negative(rows in unit_rows(4, 5), targets in unit_rows(4, 5), tau in 0.01f64..1.0) {
        let norm = |r: &Vec<f64>| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            Matrix::row_vector(&r.iter().map(|x| x / n).collect::<Vec<_>>())
        };
        let mut t = Tape::new();
        let cs: Vec<_> = rows.iter().map(|r| t.constant(norm(r))).collect();
        let ts: Vec<_> = targets.iter().map(|r| t.constant(norm(r))).collect();
        let l = loss_bbc(&mut t, &cs, &ts, tau).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_data_is_clean(n in 1usize..40, seed in any::<u64>(), kind in 0u8..3, val in 0.0f64..0.5) {
        let cfg = SynthConfig {
            kind: [SynthKind::Plain, SynthKind::Cirr, SynthKind::Fashion][kind as usize],
            val_fraction: val,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic(n, seed, &cfg);
        prop_assert_eq!(recs.len(), n);
        prop_assert!(validate(&recs).is_empty());
        for r in &recs {
            prop_assert!(check_consistency(&r.mmt, r.summary.as_deref().unwrap()).passed());
        }
    }
}

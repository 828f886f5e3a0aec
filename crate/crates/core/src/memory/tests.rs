use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::refiner::END;

fn record(task: &str, iteration: usize, source: FeedbackSource) -> NewRecord {
    let v = Vocab::new();
    let plan = vec![v.action(crate::homeworld::Action::Walk), v.id(3), crate::refiner::PAD, END];
    NewRecord {
        task_id: task.into(),
        plan: plan.clone(),
        context: ContextHistory::new().prepended(ContextEntry {
            plan,
            feedback: Feedback::Format,
            source,
        }),
        feedback: Feedback::Format,
        source,
        iteration,
    }
}

fn three_iterations() -> EquilibriumMemory {
    let mut m = EquilibriumMemory::new();
    for k in 1..=3 {
        m.append(record(&format!("t{k}"), k, FeedbackSource::Env)).unwrap();
    }
    m
}

#[test]
fn append_then_get_returns_the_record() {
    let mut m = EquilibriumMemory::new();
    let r = record("a", 0, FeedbackSource::Env);
    let id = m.append(r.clone()).unwrap();
    let got = m.get(id).unwrap();
    assert_eq!(got.id, id);
    assert_eq!(got.plan, r.plan);
    assert_eq!(got.context, r.context);
    assert_eq!(got.task_id, "a");
    let id2 = m.append(record("b", 0, FeedbackSource::WorldModel)).unwrap();
    assert_ne!(id, id2);
    let order: Vec<&str> = m.iter().map(|r| r.task_id.as_str()).collect();
    assert_eq!(order, ["a", "b"]);
    assert!(m.get(99).is_none());
}

#[test]
fn iteration_index_never_decreases() {
    let mut m = EquilibriumMemory::new();
    m.append(record("a", 2, FeedbackSource::Env)).unwrap();
    assert!(matches!(
        m.append(record("b", 1, FeedbackSource::Env)),
        Err(MemoryError::IterationOrder { got: 1, newest: 2 })
    ));
    assert_eq!(m.len(), 1);
}

#[test]
fn bulk_appends_are_retrievable() {
    let mut m = EquilibriumMemory::new();
    for i in 0..100_000usize {
        let id = m.append(record(&i.to_string(), i / 1000, FeedbackSource::Env)).unwrap();
        assert_eq!(id, i as u64);
    }
    for i in (0..100_000u64).step_by(997) {
        assert_eq!(m.get(i).unwrap().task_id, i.to_string());
    }
    assert_eq!(m.len(), 100_000);
}

#[test]
fn probabilities_follow_the_decay_law() {
    let p = three_iterations().selection_probabilities(3);
    for (got, want) in p.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    let mut same = EquilibriumMemory::new();
    for _ in 0..5 {
        same.append(record("x", 4, FeedbackSource::Env)).unwrap();
    }
    assert!(same.selection_probabilities(6).iter().all(|&q| (q - 0.2).abs() < 1e-12));
}

#[test]
fn empirical_frequencies_match_weights() {
    let m = three_iterations();
    let n = 100_000;
    let batch = m.sample_batch(n, 3, 17).unwrap();
    let mut counts = [0usize; 3];
    for r in batch {
        counts[r.id as usize] += 1;
    }
    let expected = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
    let mut chi2 = 0.0;
    for (c, p) in counts.iter().zip(expected) {
        let freq = *c as f64 / n as f64;
        assert!((freq - p).abs() <= 0.01, "freq {freq} vs {p}");
        let e = p * n as f64;
        chi2 += (*c as f64 - e).powi(2) / e;
    }
    let pvalue = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(pvalue > 0.01, "chi2 {chi2} p {pvalue}");
}

#[test]
fn empty_buffer_cannot_be_sampled() {
    assert!(matches!(EquilibriumMemory::new().sample_batch(4, 0, 0), Err(MemoryError::Empty)));
}

#[test]
fn jsonl_round_trip() {
    let v = Vocab::new();
    let mut m = three_iterations();
    m.append(record("wm", 3, FeedbackSource::WorldModel)).unwrap();
    let mut buf = Vec::new();
    m.save(&mut buf, &v).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("[WALK] #3 <PAD> <END>"), "{text}");
    let back = EquilibriumMemory::load(buf.as_slice(), &v).unwrap();
    assert!(back.iter().eq(m.iter()));
}

#[test]
fn load_rejects_gapped_ids() {
    let v = Vocab::new();
    let m = three_iterations();
    let mut buf = Vec::new();
    m.save(&mut buf, &v).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let skipped: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    assert!(matches!(
        EquilibriumMemory::load(skipped.as_bytes(), &v),
        Err(MemoryError::Parse { line: 1, .. })
    ));
}

proptest! {
    #[test]
    fn sampling_is_reproducible(iters in proptest::collection::vec(0usize..5, 1..20), seed in any::<u64>()) {
        let mut sorted = iters.clone();
        sorted.sort_unstable();
        let mut m = EquilibriumMemory::new();
        for k in &sorted {
            m.append(record("p", *k, FeedbackSource::Env)).unwrap();
        }
        let t = *sorted.last().unwrap();
        let a: Vec<u64> = m.sample_batch(32, t, seed).unwrap().iter().map(|r| r.id).collect();
        let b: Vec<u64> = m.sample_batch(32, t, seed).unwrap().iter().map(|r| r.id).collect();
        prop_assert_eq!(a, b);
        let total: f64 = m.selection_probabilities(t).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

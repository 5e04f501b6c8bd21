mod common;

use std::collections::HashMap;
use std::time::Instant;

use hetserve::workload::{
    assign_type, bucketize, fit_types, fit_types_traced, forecast_next, rolling_forecasts, rrmse,
    Holt, LastValue, Predictor, SpanSeries,
};
use hetserve::{TraceRecord, TraceSpan};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn separated_blobs_are_recovered() {
    for seed in 0..10 {
        let (recs, labels) = common::blobs(seed);
        let m = fit_types(&recs, 2, seed).unwrap();
        // each centroid inside the bounding box of one blob
        let bbox = |lab: usize| {
            let pts: Vec<_> = recs
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == lab)
                .map(|(r, _)| *r)
                .collect();
            let lo = (
                pts.iter().map(|r| r.input_len).min().unwrap(),
                pts.iter().map(|r| r.output_len).min().unwrap(),
            );
            let hi = (
                pts.iter().map(|r| r.input_len).max().unwrap(),
                pts.iter().map(|r| r.output_len).max().unwrap(),
            );
            (lo, hi)
        };
        let mut map = HashMap::new();
        for (j, &(ci, co)) in m.centroids.iter().enumerate() {
            let owner = (0..2).find(|&lab| {
                let (lo, hi) = bbox(lab);
                ci >= lo.0 as f64 && ci <= hi.0 as f64 && co >= lo.1 as f64 && co <= hi.1 as f64
            });
            map.insert(j, owner.expect("centroid outside both blobs"));
        }
        assert_ne!(map[&0], map[&1]);
        for (r, &lab) in recs.iter().zip(&labels) {
            assert_eq!(map[&assign_type(&m, r)], lab);
        }
    }
}

#[test]
fn sse_never_increases_and_fit_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let recs: Vec<TraceRecord> = (0..2000)
        .map(|i| TraceRecord {
            arrival_ms: i,
            input_len: rng.random_range(1..8000),
            output_len: rng.random_range(1..5000),
        })
        .collect();
    for k in 1..=6 {
        let t = fit_types_traced(&recs, k, 42).unwrap();
        assert!(t.iterations <= 300);
        for w in t.sse.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", t.sse);
        }
        assert_eq!(fit_types(&recs, k, 42).unwrap(), t.model);
        let c = &t.model.centroids;
        for a in 0..c.len() {
            for b in a + 1..c.len() {
                assert_ne!(c[a], c[b]);
            }
        }
    }
}

#[test]
fn assignment_matches_brute_force_nearest() {
    let (recs, _) = common::blobs(3);
    let m = fit_types(&recs, 4, 1).unwrap();
    for r in &recs {
        // independent normalization from the stored factors
        let p = (
            (r.input_len as f64 - m.offset.0) / m.scale.0,
            (r.output_len as f64 - m.offset.1) / m.scale.1,
        );
        let dists: Vec<f64> = m
            .centroids
            .iter()
            .map(|c| {
                let q = (
                    (c.0 - m.offset.0) / m.scale.0,
                    (c.1 - m.offset.1) / m.scale.1,
                );
                (p.0 - q.0).hypot(p.1 - q.1)
            })
            .collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = dists.iter().position(|&d| d == best).unwrap();
        assert_eq!(assign_type(&m, r), first);
    }
}

#[test]
fn ten_thousand_records_are_conserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let recs: Vec<TraceRecord> = (0..10_000)
        .map(|_| TraceRecord {
            arrival_ms: rng.random_range(0..3_600_000),
            input_len: rng.random_range(1..4000),
            output_len: rng.random_range(1..2000),
        })
        .collect();
    let m = fit_types(&recs, 4, 0).unwrap();
    let s = bucketize(&recs, &m, 60.0);
    let mut tally: HashMap<(u64, usize), u64> = HashMap::new();
    for r in &recs {
        *tally
            .entry((r.arrival_ms / 60_000, assign_type(&m, r)))
            .or_default() += 1;
    }
    for span in &s.spans {
        for (j, &c) in span.counts.iter().enumerate() {
            assert_eq!(c, tally.get(&(span.span_index, j)).copied().unwrap_or(0));
        }
    }
    assert_eq!(s.spans.iter().map(TraceSpan::total).sum::<u64>(), 10_000);
    for w in s.spans.windows(2) {
        assert_eq!(w[1].span_index, w[0].span_index + 1);
    }
}

proptest! {
    #[test]
    fn every_span_partitions_its_records(times in prop::collection::vec(0u64..600_000, 1..200), seed in 0u64..5) {
        let recs: Vec<TraceRecord> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| TraceRecord { arrival_ms: t, input_len: 1 + (i as u64 * 97) % 500, output_len: 1 + (i as u64 * 31) % 700 })
            .collect();
        let m = fit_types(&recs, 1, seed).unwrap();
        let s = bucketize(&recs, &m, 60.0);
        for span in &s.spans {
            let n = times.iter().filter(|&&t| t / 60_000 == span.span_index).count() as u64;
            prop_assert_eq!(span.total(), n);
        }
    }

    #[test]
    fn forecasts_are_non_negative(counts in prop::collection::vec(0u64..500, 1..80)) {
        let series = SpanSeries {
            spans: counts.iter().enumerate().map(|(i, &c)| TraceSpan::new(i as u64, vec![c, 500 - c])).collect(),
            span_seconds: 60.0,
        };
        for f in [forecast_next(&series, &Holt::default()), forecast_next(&series, &LastValue)] {
            prop_assert!(f.predicted.iter().all(|&p| p >= 0.0));
        }
    }
}

/// Holt recursion written out directly.
fn holt_oracle(ys: &[f64], alpha: f64, beta: f64) -> f64 {
    let (mut l, mut b) = (ys[0], ys[1] - ys[0]);
    for &y in &ys[1..] {
        let lp = l;
        l = alpha * y + (1.0 - alpha) * (l + b);
        b = beta * (l - lp) + (1.0 - beta) * b;
    }
    l + b
}

#[test]
fn linear_ramp_continues_its_trend() {
    let h = Holt::default();
    for slope in [1u64, 5, 40] {
        let ys: Vec<u64> = (0..20).map(|i| 100 + slope * i).collect();
        let next = (100 + slope * 20) as f64;
        let got = h.predict(&ys);
        assert!((got - next).abs() <= 0.1 * next);
        let f: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
        assert!((got - holt_oracle(&f, h.alpha, h.beta)).abs() < 1e-9);
    }
}

#[test]
fn smoothing_beats_last_value_on_noisy_sinusoid() {
    for seed in 0..5 {
        let s = common::sinusoid_series(seed, 400);
        let tail = 300..400;
        let score = |p: &dyn Predictor| {
            let f = rolling_forecasts(&s, p);
            let pred: Vec<Vec<f64>> = f[tail.clone()]
                .iter()
                .map(|f| f.predicted.clone())
                .collect();
            let act: Vec<Vec<u64>> = s.spans[tail.clone()]
                .iter()
                .map(|s| s.counts.clone())
                .collect();
            rrmse(&pred, &act).unwrap()
        };
        let (holt, last) = (score(&Holt::default()), score(&LastValue));
        assert!(holt < last, "seed {seed}: holt {holt} last {last}");
    }
}

#[test]
fn rrmse_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let act: Vec<Vec<u64>> = (0..30)
        .map(|_| (0..3).map(|_| rng.random_range(1..100)).collect())
        .collect();
    let pred: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..100.0)).collect())
        .collect();
    let mut per_type = Vec::new();
    for j in 0..3 {
        let mut sq = 0.0;
        let mut sum = 0.0;
        for s in 0..30 {
            sq += (pred[s][j] - act[s][j] as f64) * (pred[s][j] - act[s][j] as f64);
            sum += act[s][j] as f64;
        }
        per_type.push((sq / 30.0).sqrt() / (sum / 30.0) * 100.0);
    }
    let want = per_type.iter().sum::<f64>() / 3.0;
    assert!((rrmse(&pred, &act).unwrap() - want).abs() < 1e-9);
}

#[test]
fn prediction_is_fast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spans = (0..50)
        .map(|i| TraceSpan::new(i, (0..8).map(|_| rng.random_range(0..1000)).collect()))
        .collect();
    let s = SpanSeries {
        spans,
        span_seconds: 60.0,
    };
    let t = Instant::now();
    let f = forecast_next(&s, &Holt::default());
    assert!(t.elapsed().as_millis() < 50);
    assert_eq!(f.predicted.len(), 8);
    assert_eq!(f.span_index, 50);
}

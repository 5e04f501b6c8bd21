//! Workload characterization: cluster requests into types by their
//! (input, output) lengths, count arrivals per span, and forecast the next
//! span's per-type counts.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TraceRecord, TraceSpan, WorkloadType, DEFAULT_SPAN_SECONDS};

/// Default number of workload types.
pub const DEFAULT_K: usize = 4;

/// Spans of history a predictor sees.
pub const FORECAST_WINDOW: usize = 50;

const MAX_LLOYD_ITERS: usize = 300;
const MOVE_TOLERANCE: f64 = 1e-6;

/// Fitted workload types. Centroids are in tokens; distances are measured
/// after min-max normalization, `(x - offset) / scale` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeModel {
    pub k: usize,
    pub centroids: Vec<(f64, f64)>,
    pub offset: (f64, f64),
    pub scale: (f64, f64),
}

impl TypeModel {
    fn norm(&self, input: f64, output: f64) -> (f64, f64) {
        (
            (input - self.offset.0) / self.scale.0,
            (output - self.offset.1) / self.scale.1,
        )
    }

    /// Centroids in normalized space.
    pub fn normalized_centroids(&self) -> Vec<(f64, f64)> {
        self.centroids
            .iter()
            .map(|&(a, b)| self.norm(a, b))
            .collect()
    }

    /// Squared normalized distance from a record to centroid `j`.
    pub fn distance2(&self, rec: &TraceRecord, j: usize) -> f64 {
        let p = self.norm(rec.input_len as f64, rec.output_len as f64);
        let c = self.norm(self.centroids[j].0, self.centroids[j].1);
        (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)
    }

    /// Types with centroids rounded to whole tokens.
    pub fn workload_types(&self) -> Vec<WorkloadType> {
        self.centroids
            .iter()
            .enumerate()
            .map(|(j, &(i, o))| WorkloadType::new(j, i.round() as u64, o.round() as u64))
            .collect()
    }
}

/// Result of [`fit_types_traced`]: the model plus the within-cluster SSE
/// (normalized units) after every Lloyd iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub model: TypeModel,
    pub sse: Vec<f64>,
    pub iterations: usize,
}

pub fn fit_types(records: &[TraceRecord], k: usize, seed: u64) -> Result<TypeModel> {
    fit_types_traced(records, k, seed).map(|t| t.model)
}

fn nearest(points: &[(f64, f64)], c: &[(f64, f64)]) -> Vec<(usize, f64)> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in c.iter().enumerate() {
                let d = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations on min-max normalized
/// lengths. Needs at least `k` distinct (input, output) points.
pub fn fit_types_traced(records: &[TraceRecord], k: usize, seed: u64) -> Result<FitTrace> {
    let k = k.max(1);
    let mut distinct: Vec<(u64, u64)> = records
        .iter()
        .map(|r| (r.input_len, r.output_len))
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    if records.len() < k || distinct.len() < k {
        return Err(Error::TooFewRecords {
            needed: k,
            got: distinct.len(),
        });
    }
    let range = |f: fn(&TraceRecord) -> u64| {
        let lo = records.iter().map(f).min().unwrap_or(0) as f64;
        let hi = records.iter().map(f).max().unwrap_or(0) as f64;
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (lo_in, sc_in) = range(|r| r.input_len);
    let (lo_out, sc_out) = range(|r| r.output_len);
    let points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| {
            (
                (r.input_len as f64 - lo_in) / sc_in,
                (r.output_len as f64 - lo_out) / sc_out,
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = nearest(&points, &centroids).iter().map(|n| n.1).collect();
        // at least k distinct points, so some weight is positive
        let pick = WeightedIndex::new(&weights).expect("positive seeding weight");
        centroids.push(points[pick.sample(&mut rng)]);
    }

    let mut sse = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        let assign = nearest(&points, &centroids);
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &(j, _)) in points.iter().zip(&assign) {
            sums[j].0 += p.0;
            sums[j].1 += p.1;
            sums[j].2 += 1;
        }
        let mut moved: f64 = 0.0;
        for (c, s) in centroids.iter_mut().zip(&sums) {
            // an empty cluster keeps its centroid
            if s.2 > 0 {
                let next = (s.0 / s.2 as f64, s.1 / s.2 as f64);
                moved = moved.max(((next.0 - c.0).powi(2) + (next.1 - c.1).powi(2)).sqrt());
                *c = next;
            }
        }
        sse.push(nearest(&points, &centroids).iter().map(|n| n.1).sum());
        if moved < MOVE_TOLERANCE {
            break;
        }
    }

    let model = TypeModel {
        k,
        centroids: centroids
            .iter()
            .map(|c| (c.0 * sc_in + lo_in, c.1 * sc_out + lo_out))
            .collect(),
        offset: (lo_in, lo_out),
        scale: (sc_in, sc_out),
    };
    Ok(FitTrace {
        model,
        sse,
        iterations,
    })
}

/// Nearest centroid in normalized space; ties go to the lowest type id.
pub fn assign_type(model: &TypeModel, rec: &TraceRecord) -> usize {
    let mut best = (0, f64::INFINITY);
    for j in 0..model.centroids.len() {
        let d = model.distance2(rec, j);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Per-span per-type arrival counts. Spans are contiguous in index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanSeries {
    pub spans: Vec<TraceSpan>,
    pub span_seconds: f64,
}

impl SpanSeries {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Counts of type `j` over all spans.
    pub fn column(&self, j: usize) -> Vec<u64> {
        self.spans.iter().map(|s| s.counts[j]).collect()
    }
}

/// Index of the span containing `arrival_ms`.
pub fn span_of(arrival_ms: u64, span_seconds: f64) -> u64 {
    (arrival_ms as f64 / 1000.0 / span_seconds).floor() as u64
}

/// Counts records per span and type. The series runs from the first
/// occupied span to the last, with empty spans in between kept.
pub fn bucketize(records: &[TraceRecord], model: &TypeModel, span_seconds: f64) -> SpanSeries {
    let span_seconds = if span_seconds > 0.0 {
        span_seconds
    } else {
        DEFAULT_SPAN_SECONDS
    };
    let mut sorted = records.to_vec();
    if !sorted.is_sorted_by_key(|r| r.arrival_ms) {
        sorted.sort_by_key(|r| r.arrival_ms);
    }
    let (Some(first), Some(last)) = (sorted.first(), sorted.last()) else {
        return SpanSeries {
            spans: Vec::new(),
            span_seconds,
        };
    };
    let lo = span_of(first.arrival_ms, span_seconds);
    let hi = span_of(last.arrival_ms, span_seconds);
    let mut spans: Vec<TraceSpan> = (lo..=hi)
        .map(|s| TraceSpan::new(s, vec![0; model.k]))
        .collect();
    for r in &sorted {
        let s = (span_of(r.arrival_ms, span_seconds) - lo) as usize;
        spans[s].counts[assign_type(model, r)] += 1;
    }
    SpanSeries {
        spans,
        span_seconds,
    }
}

/// Next-span prediction for every type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub span_index: u64,
    pub predicted: Vec<f64>,
}

impl Forecast {
    /// Predictions rounded to request counts.
    pub fn counts(&self) -> Vec<u64> {
        self.predicted
            .iter()
            .map(|p| p.max(0.0).round() as u64)
            .collect()
    }

    pub fn as_span(&self) -> TraceSpan {
        TraceSpan::new(self.span_index, self.counts())
    }
}

/// Maps one type's recent counts (oldest first, non-empty) to a
/// non-negative estimate of the next count.
pub trait Predictor {
    fn name(&self) -> &str;
    fn predict(&self, window: &[u64]) -> f64;
}

/// Holt's double exponential smoothing (level and trend).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Holt {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Holt {
    fn default() -> Self {
        Holt {
            alpha: 0.5,
            beta: 0.1,
        }
    }
}

impl Predictor for Holt {
    fn name(&self) -> &str {
        "holt"
    }

    fn predict(&self, window: &[u64]) -> f64 {
        let Some(&first) = window.first() else {
            return 0.0;
        };
        let mut level = first as f64;
        let mut trend = match window.get(1) {
            Some(&second) => second as f64 - first as f64,
            None => 0.0,
        };
        for &y in &window[1..] {
            let prev = level;
            level = self.alpha * y as f64 + (1.0 - self.alpha) * (level + trend);
            trend = self.beta * (level - prev) + (1.0 - self.beta) * trend;
        }
        (level + trend).max(0.0)
    }
}

/// Repeats the last observation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LastValue;

impl Predictor for LastValue {
    fn name(&self) -> &str {
        "last-value"
    }

    fn predict(&self, window: &[u64]) -> f64 {
        window.last().copied().unwrap_or(0) as f64
    }
}

/// Forecast for the span after the end of `series`, from up to
/// [`FORECAST_WINDOW`] trailing spans.
pub fn forecast_next(series: &SpanSeries, predictor: &dyn Predictor) -> Forecast {
    forecast_at(series, series.len(), predictor)
}

/// Forecast for span position `pos` of `series` using only spans before it.
/// Position 0 has no history and returns zeros.
pub fn forecast_at(series: &SpanSeries, pos: usize, predictor: &dyn Predictor) -> Forecast {
    let k = series.spans.first().map_or(0, |s| s.counts.len());
    let start = pos.saturating_sub(FORECAST_WINDOW);
    let span_index = match series.spans.first() {
        Some(s) => s.span_index + pos as u64,
        None => pos as u64,
    };
    let predicted = (0..k)
        .map(|j| {
            let window: Vec<u64> = series.spans[start..pos]
                .iter()
                .map(|s| s.counts[j])
                .collect();
            if window.is_empty() {
                0.0
            } else {
                predictor.predict(&window).max(0.0)
            }
        })
        .collect();
    Forecast {
        span_index,
        predicted,
    }
}

/// One-step-ahead forecasts for every span. The first span has no history
/// and is "forecast" as its own actual counts.
pub fn rolling_forecasts(series: &SpanSeries, predictor: &dyn Predictor) -> Vec<Forecast> {
    (0..series.len())
        .map(|pos| {
            if pos == 0 {
                Forecast {
                    span_index: series.spans[0].span_index,
                    predicted: series.spans[0].counts.iter().map(|&c| c as f64).collect(),
                }
            } else {
                forecast_at(series, pos, predictor)
            }
        })
        .collect()
}

/// Relative root mean square error in percent: per type,
/// `sqrt(mean((p - a)^2)) / mean(a) * 100`, then averaged over types.
/// Both arguments are indexed `[span][type]`.
pub fn rrmse(predicted: &[Vec<f64>], actual: &[Vec<u64>]) -> Result<f64> {
    if predicted.len() != actual.len() || actual.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted spans vs {} actual",
            predicted.len(),
            actual.len()
        )));
    }
    let k = actual[0].len();
    if k == 0 || predicted.iter().any(|p| p.len() != k) {
        return Err(Error::DimensionMismatch("type counts differ".into()));
    }
    let n = actual.len() as f64;
    let mut total = 0.0;
    for j in 0..k {
        let mean = actual.iter().map(|a| a[j] as f64).sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::DegenerateActuals { type_id: j });
        }
        let mse = predicted
            .iter()
            .zip(actual)
            .map(|(p, a)| (p[j] - a[j] as f64).powi(2))
            .sum::<f64>()
            / n;
        total += mse.sqrt() / mean * 100.0;
    }
    Ok(total / k as f64)
}

//! Temporal windows and probabilistic positive/negative pair sampling.
//!
//! For an anchor frame `i` with window radius `k`, positives are drawn from
//! the window `{i-k..i-1, i+1..i+k}` with a weight that decays with the
//! temporal distance, and negatives from the rest of the same sequence with
//! a weight that grows with the distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anchors are resampled this many times before a batch gives up.
pub const MAX_ANCHOR_RETRIES: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplingError {
    #[error("anchor {anchor} out of range for a sequence of {len} frames (radius {radius})")]
    OutOfRange { anchor: usize, len: usize, radius: usize },
    #[error("invalid sampling strategy: {0}")]
    InvalidStrategy(String),
    #[error("no candidate frames outside the temporal window")]
    EmptyCandidates,
    #[error("sequence of {len} frames too short for radius {radius}, {n_pos} positives and {n_neg} negatives")]
    SequenceTooShort {
        len: usize,
        radius: usize,
        n_pos: usize,
        n_neg: usize,
    },
    #[error("invalid batch spec: {0}")]
    InvalidBatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalWindow {
    pub anchor: usize,
    pub radius: usize,
    pub indices: Vec<usize>,
}

pub fn temporal_window(i: usize, k: usize, n: usize) -> Result<TemporalWindow, SamplingError> {
    if i >= n || k == 0 {
        return Err(SamplingError::OutOfRange {
            anchor: i,
            len: n,
            radius: k,
        });
    }
    let lo = i.saturating_sub(k);
    let hi = (i + k).min(n - 1);
    Ok(TemporalWindow {
        anchor: i,
        radius: k,
        indices: (lo..=hi).filter(|&j| j != i).collect(),
    })
}

/// Window radius from a frame rate: half the frame rate, at least one.
pub fn default_radius(fps: f64) -> usize {
    ((fps / 2.0).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Linear,
    Exponential,
    Tanh,
    /// Flat weights inside and outside the window (ablation arm).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    /// Scale of the Exponential/Tanh profiles; `None` means `k / 2`.
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl SamplingStrategy {
    pub const fn new(kind: StrategyKind) -> Self {
        Self { kind, sigma: None }
    }

    pub fn linear() -> Self {
        Self::new(StrategyKind::Linear)
    }

    fn sigma_for(&self, k: usize) -> Result<f64, SamplingError> {
        let sigma = self.sigma.unwrap_or(k as f64 / 2.0);
        if matches!(self.kind, StrategyKind::Exponential | StrategyKind::Tanh)
            && !(sigma > 0.0 && sigma.is_finite())
        {
            return Err(SamplingError::InvalidStrategy(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(sigma)
    }

    /// Unnormalized positive weight for an absolute distance `1 <= d <= k`.
    pub fn positive_profile(&self, k: usize, d: usize) -> Result<f64, SamplingError> {
        let sigma = self.sigma_for(k)?;
        let x = (d as f64 - 1.0) / sigma;
        let w = match self.kind {
            StrategyKind::Linear => (k + 1 - d) as f64,
            StrategyKind::Exponential => (-x).exp(),
            StrategyKind::Tanh => 1.0 - x.tanh().abs(),
            StrategyKind::Uniform => 1.0,
        };
        Ok(w.max(1e-12))
    }

    /// Unnormalized negative weight for an absolute distance `d > k`.
    pub fn negative_profile(&self, k: usize, d: usize) -> Result<f64, SamplingError> {
        let sigma = self.sigma_for(k)?;
        let x = (d as f64 - k as f64) / sigma;
        let w = match self.kind {
            StrategyKind::Linear => (d - k) as f64,
            StrategyKind::Exponential => 1.0 - (-x).exp(),
            StrategyKind::Tanh => x.tanh().abs(),
            StrategyKind::Uniform => 1.0,
        };
        Ok(w.max(1e-12))
    }
}

/// Normalized positive distribution over the signed distances
/// `-k..=-1, 1..=k`, returned as `(distance, probability)` pairs.
pub fn positive_weights(
    strategy: &SamplingStrategy,
    k: usize,
) -> Result<Vec<(i64, f64)>, SamplingError> {
    if k == 0 {
        return Err(SamplingError::InvalidStrategy("radius must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(2 * k);
    for d in (1..=k as i64).rev().map(|d| -d).chain(1..=k as i64) {
        out.push((d, strategy.positive_profile(k, d.unsigned_abs() as usize)?));
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    for (_, w) in out.iter_mut() {
        *w /= total;
    }
    Ok(out)
}

/// Normalized negative distribution over candidate distances (one entry per
/// candidate frame; every distance must exceed `k`).
pub fn negative_weights(
    strategy: &SamplingStrategy,
    k: usize,
    distances: &[usize],
) -> Result<Vec<f64>, SamplingError> {
    if distances.is_empty() {
        return Err(SamplingError::EmptyCandidates);
    }
    if let Some(d) = distances.iter().find(|&&d| d <= k) {
        return Err(SamplingError::InvalidStrategy(format!(
            "negative candidate at distance {d} lies inside radius {k}"
        )));
    }
    let mut w = distances
        .iter()
        .map(|&d| strategy.negative_profile(k, d))
        .collect::<Result<Vec<_>, _>>()?;
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqRef {
    pub dataset: usize,
    pub sequence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub seq: SeqRef,
    pub anchor: usize,
    /// In draw order.
    pub positives: Vec<usize>,
    /// In draw order.
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub m: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub strategy: SamplingStrategy,
    pub radius: usize,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.m == 0 || self.n_pos == 0 || self.n_neg == 0 || self.radius == 0 {
            return Err(SamplingError::InvalidBatch(
                "M, n_pos, n_neg and the radius must all be at least 1".into(),
            ));
        }
        self.strategy.sigma_for(self.radius)?;
        Ok(())
    }
}

fn draw_without_replacement<R: Rng + ?Sized>(
    items: &[usize],
    weights: &mut [f64],
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (idx, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(idx);
            if target < acc {
                break;
            }
        }
        let idx = pick.expect("at least one candidate with positive weight");
        out.push(items[idx]);
        weights[idx] = 0.0;
    }
    out
}

/// Draws the positive and negative sets of one anchor of a sequence of `n`
/// frames. The returned sample carries a default [`SeqRef`].
pub fn sample_pairs<R: Rng + ?Sized>(
    n: usize,
    i: usize,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<PairSample, SamplingError> {
    let k = spec.radius;
    let window = temporal_window(i, k, n)?;
    let too_short = || SamplingError::SequenceTooShort {
        len: n,
        radius: k,
        n_pos: spec.n_pos,
        n_neg: spec.n_neg,
    };
    if n < 2 * k + spec.n_neg + 1 || window.indices.len() < spec.n_pos || window.indices.is_empty()
    {
        return Err(too_short());
    }

    let mut pos_w = window
        .indices
        .iter()
        .map(|&j| spec.strategy.positive_profile(k, j.abs_diff(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let positives = draw_without_replacement(&window.indices, &mut pos_w, spec.n_pos, rng);

    let outside: Vec<usize> = (0..n).filter(|&j| j.abs_diff(i) > k).collect();
    if outside.len() < spec.n_neg {
        return Err(too_short());
    }
    let negatives = if spec.n_neg == 0 {
        Vec::new()
    } else {
        let dist: Vec<usize> = outside.iter().map(|&j| j.abs_diff(i)).collect();
        let mut neg_w = negative_weights(&spec.strategy, k, &dist)?;
        draw_without_replacement(&outside, &mut neg_w, spec.n_neg, rng)
    };

    Ok(PairSample {
        seq: SeqRef {
            dataset: 0,
            sequence: 0,
        },
        anchor: i,
        positives,
        negatives,
    })
}

/// Builds one mini-batch of `spec.m` anchors. `datasets[d][s]` is the length
/// of sequence `s` in dataset `d`. Anchors are split evenly across datasets
/// with the remainder assigned round-robin from a random offset.
pub fn build_batch<R: Rng + ?Sized>(
    datasets: &[Vec<usize>],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<PairSample>, SamplingError> {
    spec.validate()?;
    if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
        return Err(SamplingError::InvalidBatch("every dataset must be non-empty".into()));
    }
    let n_sets = datasets.len();
    let base = spec.m / n_sets;
    let remainder = spec.m % n_sets;
    let offset = rng.gen_range(0..n_sets);
    let mut counts = vec![base; n_sets];
    for r in 0..remainder {
        counts[(offset + r) % n_sets] += 1;
    }

    let mut batch = Vec::with_capacity(spec.m);
    for (d, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut anchor_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            batch.push(sample_anchor(d, &datasets[d], spec, &mut anchor_rng)?);
        }
    }
    Ok(batch)
}

fn sample_anchor(
    dataset: usize,
    lengths: &[usize],
    spec: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PairSample, SamplingError> {
    let mut last = None;
    for _ in 0..MAX_ANCHOR_RETRIES {
        let sequence = rng.gen_range(0..lengths.len());
        let n = lengths[sequence];
        if n == 0 {
            continue;
        }
        let anchor = rng.gen_range(0..n);
        match sample_pairs(n, anchor, spec, rng) {
            Ok(mut s) => {
                s.seq = SeqRef { dataset, sequence };
                return Ok(s);
            }
            Err(e @ SamplingError::SequenceTooShort { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(SamplingError::InvalidBatch("all sequences are empty".into())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditRow {
    /// Signed temporal distance from the anchor.
    pub distance: i64,
    pub analytic_p: f64,
    pub empirical_p: f64,
}

/// Compares analytic and empirical single-draw distributions for an anchor
/// of a sequence of `n` frames. Rows with `|distance| <= k` describe
/// positives, the rest negatives.
pub fn audit_sampling(
    strategy: &SamplingStrategy,
    k: usize,
    n: usize,
    anchor: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<AuditRow>, SamplingError> {
    let spec = BatchSpec {
        m: 1,
        n_pos: 1,
        n_neg: 1,
        strategy: *strategy,
        radius: k,
    };
    let window = temporal_window(anchor, k, n)?;
    let pos_raw = window
        .indices
        .iter()
        .map(|&j| strategy.positive_profile(k, j.abs_diff(anchor)))
        .collect::<Result<Vec<_>, _>>()?;
    let pos_total: f64 = pos_raw.iter().sum();
    let outside: Vec<usize> = (0..n).filter(|&j| j.abs_diff(anchor) > k).collect();
    let dist: Vec<usize> = outside.iter().map(|&j| j.abs_diff(anchor)).collect();
    let neg_p = negative_weights(strategy, k, &dist)?;

    let mut pos_counts = vec![0usize; n];
    let mut neg_counts = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        let s = sample_pairs(n, anchor, &spec, &mut rng)?;
        pos_counts[s.positives[0]] += 1;
        neg_counts[s.negatives[0]] += 1;
    }
    let signed = |j: usize| j as i64 - anchor as i64;
    let mut rows = Vec::with_capacity(n - 1);
    for (j, w) in window.indices.iter().zip(&pos_raw) {
        rows.push(AuditRow {
            distance: signed(*j),
            analytic_p: w / pos_total,
            empirical_p: pos_counts[*j] as f64 / draws as f64,
        });
    }
    for (j, p) in outside.iter().zip(&neg_p) {
        rows.push(AuditRow {
            distance: signed(*j),
            analytic_p: *p,
            empirical_p: neg_counts[*j] as f64 / draws as f64,
        });
    }
    rows.sort_by_key(|r| r.distance);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    const KINDS: [StrategyKind; 3] = [StrategyKind::Linear, StrategyKind::Exponential, StrategyKind::Tanh];

    #[test]
    fn window_examples() {
        assert_eq!(temporal_window(5, 2, 100).unwrap().indices, vec![3, 4, 6, 7]);
        assert_eq!(temporal_window(0, 2, 100).unwrap().indices, vec![1, 2]);
        let brute: Vec<usize> = (0..100usize)
            .filter(|&j| j != 99 && j.abs_diff(99) <= 15)
            .collect();
        assert_eq!(temporal_window(99, 15, 100).unwrap().indices, brute);
        assert_eq!(brute, (84..=98).collect::<Vec<_>>());
        assert!(matches!(temporal_window(100, 2, 100), Err(SamplingError::OutOfRange { .. })));
        assert!(temporal_window(0, 0, 10).is_err());
    }

    #[test]
    fn default_radius_examples() {
        assert_eq!(default_radius(30.0), 15);
        assert_eq!(default_radius(10.0), 5);
        assert_eq!(default_radius(1.0), 1);
        assert_eq!(default_radius(0.4), 1);
    }

    #[test]
    fn linear_positive_weights() {
        let w = positive_weights(&SamplingStrategy::linear(), 2).unwrap();
        let expect = [(-2, 1.0 / 6.0), (-1, 2.0 / 6.0), (1, 2.0 / 6.0), (2, 1.0 / 6.0)];
        for ((d, p), (ed, ep)) in w.iter().zip(expect) {
            assert_eq!(*d, ed);
            assert!((p - ep).abs() < 1e-15);
        }
        for kind in KINDS {
            let w = positive_weights(&SamplingStrategy::new(kind), 1).unwrap();
            assert_eq!(w, vec![(-1, 0.5), (1, 0.5)]);
        }
    }

    #[test]
    fn linear_negative_weights() {
        let w = negative_weights(&SamplingStrategy::linear(), 2, &[3, 4, 5]).unwrap();
        for (p, e) in w.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-15);
        }
        for kind in KINDS {
            assert_eq!(negative_weights(&SamplingStrategy::new(kind), 4, &[9]).unwrap(), vec![1.0]);
        }
        assert_eq!(
            negative_weights(&SamplingStrategy::linear(), 2, &[]),
            Err(SamplingError::EmptyCandidates)
        );
        assert!(negative_weights(&SamplingStrategy::linear(), 2, &[2]).is_err());
    }

    #[test]
    fn invalid_sigma_rejected() {
        let s = SamplingStrategy {
            kind: StrategyKind::Tanh,
            sigma: Some(0.0),
        };
        assert!(matches!(positive_weights(&s, 3), Err(SamplingError::InvalidStrategy(_))));
    }

    #[test]
    fn monotone_profiles() {
        for kind in KINDS {
            let s = SamplingStrategy::new(kind);
            for k in 1..=50 {
                let w = positive_weights(&s, k).unwrap();
                let right: Vec<f64> = w[k..].iter().map(|x| x.1).collect();
                assert!(right.windows(2).all(|p| p[0] >= p[1]), "{kind:?} k={k}");
                assert!(w.iter().all(|x| x.1 > 0.0));
                for d in 1..=k {
                    assert_eq!(w[k - d].1, w[k + d - 1].1);
                }
                let dist: Vec<usize> = (k + 1..k + 60).collect();
                let g = negative_weights(&s, k, &dist).unwrap();
                assert!(g.windows(2).all(|p| p[0] <= p[1]), "{kind:?} k={k}");
            }
        }
    }

    #[test]
    fn exhaustion_forces_positives() {
        let spec = BatchSpec {
            m: 1,
            n_pos: 2,
            n_neg: 0,
            strategy: SamplingStrategy::linear(),
            radius: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sample_pairs(3, 1, &spec, &mut rng).unwrap();
        s.positives.sort();
        assert_eq!(s.positives, vec![0, 2]);
        let spec = BatchSpec { n_neg: 1, ..spec };
        assert!(matches!(
            sample_pairs(3, 1, &spec, &mut rng),
            Err(SamplingError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn batch_split_across_datasets() {
        let spec = BatchSpec {
            m: 10,
            n_pos: 2,
            n_neg: 8,
            strategy: SamplingStrategy::linear(),
            radius: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = build_batch(&[vec![60; 3]], &BatchSpec { m: 4, ..spec }, &mut rng).unwrap();
        assert_eq!(one.len(), 4);
        let two = build_batch(&[vec![60; 3], vec![40; 2]], &spec, &mut rng).unwrap();
        assert_eq!(two.iter().filter(|s| s.seq.dataset == 0).count(), 5);
        let mut seen = [0usize; 2];
        for _ in 0..200 {
            let b = build_batch(&[vec![60; 3], vec![40; 2]], &BatchSpec { m: 11, ..spec }, &mut rng)
                .unwrap();
            let c0 = b.iter().filter(|s| s.seq.dataset == 0).count();
            assert!(c0 == 5 || c0 == 6);
            seen[c0 - 5] += 1;
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }

    #[test]
    fn batches_are_reproducible() {
        let spec = BatchSpec {
            m: 8,
            n_pos: 2,
            n_neg: 8,
            strategy: SamplingStrategy::new(StrategyKind::Tanh),
            radius: 15,
        };
        let sets = [vec![60; 10]];
        let a = build_batch(&sets, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_batch(&sets, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_sequences_exhaust_retries() {
        let spec = BatchSpec {
            m: 1,
            n_pos: 2,
            n_neg: 8,
            strategy: SamplingStrategy::linear(),
            radius: 15,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            build_batch(&[vec![20]], &spec, &mut rng),
            Err(SamplingError::SequenceTooShort { .. })
        ));
    }

    proptest! {
        #[test]
        fn pair_invariants(n in 20usize..120, k in 1usize..8, n_pos in 1usize..3, n_neg in 1usize..6,
                           kind in 0usize..4, seed in any::<u64>()) {
            let kind = [StrategyKind::Linear, StrategyKind::Exponential, StrategyKind::Tanh, StrategyKind::Uniform][kind];
            let spec = BatchSpec { m: 1, n_pos, n_neg, strategy: SamplingStrategy::new(kind), radius: k };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = rng.gen_range(0..n);
            let window = temporal_window(i, k, n).unwrap();
            match sample_pairs(n, i, &spec, &mut rng) {
                Ok(s) => {
                    prop_assert_eq!(s.positives.len(), n_pos);
                    prop_assert_eq!(s.negatives.len(), n_neg);
                    let mut p = s.positives.clone(); p.sort(); p.dedup();
                    prop_assert_eq!(p.len(), n_pos);
                    let mut q = s.negatives.clone(); q.sort(); q.dedup();
                    prop_assert_eq!(q.len(), n_neg);
                    prop_assert!(s.positives.iter().all(|j| window.indices.contains(j)));
                    prop_assert!(s.negatives.iter().all(|j| *j < n && *j != i && !window.indices.contains(j)));
                }
                Err(SamplingError::SequenceTooShort { .. }) => prop_assert!(window.indices.len() < n_pos),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}

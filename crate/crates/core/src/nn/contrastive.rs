//! NT-Xent over temporally sampled pairs.
//!
//! For an anchor `i` with positive set `P` and negative set `N`:
//!
//! ```text
//! L_i = -Σ_{j∈P} log( exp(sim(z_i, z_j)/τ) / Σ_{k∈N} exp(sim(z_i, z_k)/τ) )
//! L   = (1/M) Σ_i L_i
//! ```
//!
//! The denominator runs over negatives only. `include_positive` switches to
//! the SimCLR form where each positive also appears in its own denominator.

use serde::{Deserialize, Serialize};

use super::NnError;

pub const MIN_NORM: f64 = 1e-12;

/// Row indices of one anchor and its pairs inside an embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveGroup {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64, NnError> {
    if u.len() != v.len() {
        return Err(NnError::ShapeMismatch(format!(
            "cosine similarity of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if !(nu > MIN_NORM) || !(nv > MIN_NORM) {
        return Err(NnError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn norm(u: &[f32]) -> f64 {
    u.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Loss of a single anchor.
pub fn ntxent_loss(
    anchor: &[f32],
    positives: &[&[f32]],
    negatives: &[&[f32]],
    tau: f64,
) -> Result<f64, NnError> {
    let mut rows: Vec<&[f32]> = vec![anchor];
    rows.extend_from_slice(positives);
    rows.extend_from_slice(negatives);
    let group = ContrastiveGroup {
        anchor: 0,
        positives: (1..=positives.len()).collect(),
        negatives: (positives.len() + 1..rows.len()).collect(),
    };
    let e = anchor.len();
    let mut flat = Vec::with_capacity(rows.len() * e);
    for r in &rows {
        if r.len() != e {
            return Err(NnError::ShapeMismatch("embedding lengths differ".into()));
        }
        flat.extend_from_slice(r);
    }
    batch_contrastive_loss(&flat, e, &[group], tau)
}

/// Mean anchor loss over a batch of groups indexing rows of `z` (`rows × dim`).
pub fn batch_contrastive_loss(
    z: &[f32],
    dim: usize,
    groups: &[ContrastiveGroup],
    tau: f64,
) -> Result<f64, NnError> {
    contrastive_forward_backward(z, dim, groups, tau, false, false).map(|(l, _)| l)
}

/// Loss and (optionally) its gradient with respect to every row of `z`.
pub fn contrastive_forward_backward(
    z: &[f32],
    dim: usize,
    groups: &[ContrastiveGroup],
    tau: f64,
    include_positive: bool,
    want_grad: bool,
) -> Result<(f64, Vec<f64>), NnError> {
    if groups.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if !(tau > 0.0) {
        return Err(NnError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if dim == 0 || z.len() % dim != 0 {
        return Err(NnError::ShapeMismatch("embedding matrix is not rows × dim".into()));
    }
    let rows = z.len() / dim;
    for g in groups {
        if g.positives.is_empty() || g.negatives.is_empty() {
            return Err(NnError::InvalidConfig(
                "every anchor needs at least one positive and one negative".into(),
            ));
        }
        if std::iter::once(&g.anchor)
            .chain(&g.positives)
            .chain(&g.negatives)
            .any(|&r| r >= rows)
        {
            return Err(NnError::ShapeMismatch("group index out of range".into()));
        }
    }

    let mut unit = vec![0.0f64; z.len()];
    let mut norms = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &z[r * dim..(r + 1) * dim];
        let n = norm(row);
        norms[r] = n;
        if n > MIN_NORM {
            for (u, x) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *u = *x as f64 / n;
            }
        }
    }
    let used = |r: usize| -> Result<(), NnError> {
        if norms[r] > MIN_NORM {
            Ok(())
        } else {
            Err(NnError::ZeroVector)
        }
    };
    let dot = |a: usize, b: usize| -> f64 {
        unit[a * dim..(a + 1) * dim]
            .iter()
            .zip(&unit[b * dim..(b + 1) * dim])
            .map(|(x, y)| x * y)
            .sum()
    };

    let m = groups.len() as f64;
    let mut total = 0.0;
    let mut grad_unit = vec![0.0f64; if want_grad { z.len() } else { 0 }];
    for g in groups {
        used(g.anchor)?;
        for &r in g.positives.iter().chain(&g.negatives) {
            used(r)?;
        }
        let s_pos: Vec<f64> = g.positives.iter().map(|&j| dot(g.anchor, j) / tau).collect();
        let s_neg: Vec<f64> = g.negatives.iter().map(|&k| dot(g.anchor, k) / tau).collect();
        let neg_max = s_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let neg_sum: f64 = s_neg.iter().map(|s| (s - neg_max).exp()).sum();

        // ds = dL/d(scaled similarity), already divided by M
        let mut ds_pos = vec![0.0; s_pos.len()];
        let mut ds_neg = vec![0.0; s_neg.len()];
        for (p, &sp) in s_pos.iter().enumerate() {
            let shift = neg_max.max(sp);
            let mut denom = neg_sum * (neg_max - shift).exp();
            if include_positive {
                denom += (sp - shift).exp();
            }
            let lse = shift + denom.ln();
            total += lse - sp;
            if want_grad {
                let pos_share = if include_positive { (sp - lse).exp() } else { 0.0 };
                ds_pos[p] += (pos_share - 1.0) / m;
                for (q, &sn) in s_neg.iter().enumerate() {
                    ds_neg[q] += (sn - lse).exp() / m;
                }
            }
        }
        if want_grad {
            let a = g.anchor;
            for (&j, d) in g.positives.iter().zip(&ds_pos).chain(g.negatives.iter().zip(&ds_neg)) {
                let c = d / tau;
                for e in 0..dim {
                    grad_unit[a * dim + e] += c * unit[j * dim + e];
                    grad_unit[j * dim + e] += c * unit[a * dim + e];
                }
            }
        }
    }

    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0f64; z.len()];
        for r in 0..rows {
            if norms[r] <= MIN_NORM {
                continue;
            }
            let u = &unit[r * dim..(r + 1) * dim];
            let gu = &grad_unit[r * dim..(r + 1) * dim];
            let proj: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
            for e in 0..dim {
                grad[r * dim + e] = (gu[e] - u[e] * proj) / norms[r];
            }
        }
    }
    Ok((total / m, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let u = [1.0f32, 2.0, 3.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let neg = u.map(|x| -x);
        assert!((cosine_sim(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0; 3], &u), Err(NnError::ZeroVector));
    }

    #[test]
    fn equal_similarities_give_zero() {
        let a = [1.0f32, 0.0];
        let p = [0.6f32, 0.8];
        let n = [0.6f32, -0.8];
        assert!(ntxent_loss(&a, &[&p], &[&n], 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn unit_similarity_gap() {
        let a = [1.0f32, 0.0];
        let p = [3.0f32, 0.0];
        let n = [0.0f32, 2.0];
        assert!((ntxent_loss(&a, &[&p], &[&n], 1.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(batch_contrastive_loss(&[1.0, 0.0], 2, &[], 0.5), Err(NnError::EmptyBatch));
        let g = ContrastiveGroup {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2],
        };
        let z = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(batch_contrastive_loss(&z, 2, &[g], 0.5), Err(NnError::ZeroVector));
    }

    fn planar(theta: f64) -> [f32; 3] {
        [theta.cos() as f32, theta.sin() as f32, 0.0]
    }

    fn vec3() -> impl Strategy<Value = [f32; 3]> {
        proptest::array::uniform3(-1.0f32..1.0).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f32>() > 1e-2)
    }

    proptest! {
        #[test]
        fn closer_positive_never_raises_loss(
            others in proptest::collection::vec(vec3(), 3),
            a in 0.0f64..3.1,
            b in 0.0f64..3.1,
            tau in 0.1f64..1.0,
        ) {
            let (near, far) = (a.min(b), a.max(b));
            let anchor = [1.0f32, 0.0, 0.0];
            let loss = |theta: f64| {
                let moving = planar(theta);
                ntxent_loss(&anchor, &[&moving, &others[0]], &[&others[1], &others[2]], tau).unwrap()
            };
            prop_assert!(loss(near) <= loss(far) + 1e-9);
        }

        #[test]
        fn closer_negative_never_lowers_loss(
            others in proptest::collection::vec(vec3(), 3),
            a in 0.0f64..3.1,
            b in 0.0f64..3.1,
            tau in 0.1f64..1.0,
        ) {
            let (near, far) = (a.min(b), a.max(b));
            let anchor = [1.0f32, 0.0, 0.0];
            let loss = |theta: f64| {
                let moving = planar(theta);
                ntxent_loss(&anchor, &[&others[0]], &[&moving, &others[1], &others[2]], tau).unwrap()
            };
            prop_assert!(loss(near) + 1e-9 >= loss(far));
        }

        #[test]
        fn loss_ignores_embedding_scale(
            rows in proptest::collection::vec(vec3(), 5),
            scales in proptest::collection::vec(0.01f32..100.0, 5),
            tau in 0.1f64..1.0,
        ) {
            let g = ContrastiveGroup { anchor: 0, positives: vec![1, 2], negatives: vec![3, 4] };
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let scaled: Vec<f32> = rows
                .iter()
                .zip(&scales)
                .flat_map(|(r, s)| r.map(|x| x * s))
                .collect();
            let a = batch_contrastive_loss(&flat, 3, std::slice::from_ref(&g), tau).unwrap();
            let b = batch_contrastive_loss(&scaled, 3, &[g], tau).unwrap();
            prop_assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn single_anchor_batch_matches_ntxent() {
        let z = [1.0f32, 0.2, 0.3, 0.9, -0.5, 0.4, 0.1, -1.0];
        let g = ContrastiveGroup {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2, 3],
        };
        let direct = ntxent_loss(&z[0..2], &[&z[2..4]], &[&z[4..6], &z[6..8]], 0.5).unwrap();
        assert_eq!(batch_contrastive_loss(&z, 2, &[g], 0.5).unwrap(), direct);
    }

    #[test]
    fn duplicating_anchors_keeps_mean() {
        let z = [1.0f32, 0.2, 0.3, 0.9, -0.5, 0.4, 0.1, -1.0, 0.7, 0.7];
        let groups = vec![
            ContrastiveGroup {
                anchor: 0,
                positives: vec![1],
                negatives: vec![2, 3],
            },
            ContrastiveGroup {
                anchor: 4,
                positives: vec![3],
                negatives: vec![0, 1],
            },
        ];
        let doubled: Vec<ContrastiveGroup> = groups.iter().chain(&groups).cloned().collect();
        let a = batch_contrastive_loss(&z, 2, &groups, 0.3).unwrap();
        let b = batch_contrastive_loss(&z, 2, &doubled, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

//! Keypoint and vertex errors under root, scale-translation and Procrustes
//! alignment, F-scores and acceleration error. Inputs are in meters, every
//! reported distance in millimeters.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hand::{forward_kinematics, KinematicTemplate, Point3};
use crate::nn::{train::predict_sequence, CameraDecoding, ModelParams, NnError};
use crate::synth::Dataset;

const MM: f64 = 1000.0;
const DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate point cloud")]
    DegenerateCloud,
    #[error("trajectory has {0} frames; at least 3 are needed")]
    TooShort(usize),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlignmentMode {
    None,
    RootAligned,
    ScaleTranslationAligned,
    ProcrustesAligned,
}

impl AlignmentMode {
    pub const ALL: [AlignmentMode; 4] = [
        AlignmentMode::None,
        AlignmentMode::RootAligned,
        AlignmentMode::ScaleTranslationAligned,
        AlignmentMode::ProcrustesAligned,
    ];

    pub fn prefix(&self) -> &'static str {
        match self {
            AlignmentMode::None => "",
            AlignmentMode::RootAligned => "RA-",
            AlignmentMode::ScaleTranslationAligned => "STA-",
            AlignmentMode::ProcrustesAligned => "PA-",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            AlignmentMode::None => "none",
            AlignmentMode::RootAligned => "root",
            AlignmentMode::ScaleTranslationAligned => "scale_translation",
            AlignmentMode::ProcrustesAligned => "procrustes",
        }
    }
}

fn check(pred: &[Point3], gt: &[Point3]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted vs {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn v(p: &Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn mean_distance_mm(pred: &[Point3], gt: &[Point3]) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(a, b)| (v(a) - v(b)).norm()).sum();
    Ok(MM * s / pred.len() as f64)
}

/// Mean joint distance in millimeters.
pub fn epe(pred: &[Point3], gt: &[Point3]) -> Result<f64, MetricsError> {
    mean_distance_mm(pred, gt)
}

/// Mean vertex distance in millimeters (over the virtual vertex set).
pub fn v2v(pred: &[Point3], gt: &[Point3]) -> Result<f64, MetricsError> {
    mean_distance_mm(pred, gt)
}

/// Translates `pred` so its root (point 0) coincides with `gt`'s.
pub fn align_root(pred: &[Point3], gt: &[Point3]) -> Result<Vec<Point3>, MetricsError> {
    check(pred, gt)?;
    let d = v(&gt[0]) - v(&pred[0]);
    Ok(pred.iter().map(|p| (v(p) + d).into()).collect())
}

fn centroid(pts: &[Point3]) -> Vector3<f64> {
    pts.iter().map(v).sum::<Vector3<f64>>() / pts.len() as f64
}

/// Least-squares scale and translation.
pub fn align_scale_translation(pred: &[Point3], gt: &[Point3]) -> Result<Vec<Point3>, MetricsError> {
    check(pred, gt)?;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let (mut pg, mut pp) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (v(p) - mp, v(g) - mg);
        pg += a.dot(&b);
        pp += a.dot(&a);
    }
    if pp <= DEGENERATE {
        return Err(MetricsError::DegenerateCloud);
    }
    let s = pg / pp;
    Ok(pred.iter().map(|p| (mg + s * (v(p) - mp)).into()).collect())
}

/// Similarity transform `(s, R, t)` minimizing `Σ‖s R p + t − g‖²` with `det R = +1`.
pub fn procrustes_transform(
    pred: &[Point3],
    gt: &[Point3],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>), MetricsError> {
    check(pred, gt)?;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut pp = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (v(p) - mp, v(g) - mg);
        cov += b * a.transpose();
        pp += a.dot(&a);
    }
    if pp <= DEGENERATE {
        return Err(MetricsError::DegenerateCloud);
    }
    let svd = cov.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(MetricsError::DegenerateCloud);
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= DEGENERATE * sv[0].max(DEGENERATE) {
        return Err(MetricsError::DegenerateCloud);
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // singular values from nalgebra are not guaranteed sorted, so the sign
    // flip goes on the smallest one
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap_or(2);
    if smallest != 2 && d[(2, 2)] < 0.0 {
        d[(2, 2)] = 1.0;
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let s = trace / pp;
    let t = mg - s * r * mp;
    Ok((s, r, t))
}

pub fn align_procrustes(pred: &[Point3], gt: &[Point3]) -> Result<Vec<Point3>, MetricsError> {
    let (s, r, t) = procrustes_transform(pred, gt)?;
    Ok(pred.iter().map(|p| (s * r * v(p) + t).into()).collect())
}

pub fn align(mode: AlignmentMode, pred: &[Point3], gt: &[Point3]) -> Result<Vec<Point3>, MetricsError> {
    match mode {
        AlignmentMode::None => {
            check(pred, gt)?;
            Ok(pred.to_vec())
        }
        AlignmentMode::RootAligned => align_root(pred, gt),
        AlignmentMode::ScaleTranslationAligned => align_scale_translation(pred, gt),
        AlignmentMode::ProcrustesAligned => align_procrustes(pred, gt),
    }
}

fn precision(from: &[Point3], to: &[Point3], threshold_m: f64) -> f64 {
    let hits = from
        .iter()
        .filter(|p| {
            to.iter()
                .map(|q| (v(p) - v(q)).norm())
                .fold(f64::INFINITY, f64::min)
                <= threshold_m
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Harmonic mean of precision and recall at `threshold_mm`.
pub fn fscore(pred: &[Point3], gt: &[Point3], threshold_mm: f64) -> Result<f64, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::ShapeMismatch("empty point set".into()));
    }
    let t = threshold_mm / MM;
    let p = precision(pred, gt, t);
    let r = precision(gt, pred, t);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean norm of the difference of second differences, in mm/s².
pub fn accel_error(pred: &[Vec<Point3>], gt: &[Vec<Point3>], fps: f64) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(MetricsError::TooShort(pred.len()));
    }
    let f2 = fps * fps;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 1..pred.len() - 1 {
        check(&pred[t], &gt[t])?;
        for j in 0..pred[t].len() {
            let acc = |x: &[Vec<Point3>]| (v(&x[t + 1][j]) - 2.0 * v(&x[t][j]) + v(&x[t - 1][j])) * f2;
            sum += (acc(pred) - acc(gt)).norm();
            count += 1;
        }
    }
    Ok(MM * sum / count as f64)
}

pub const DEFAULT_THRESHOLDS_MM: [f64; 2] = [5.0, 15.0];

/// `mode → metric → value` for one sequence or the aggregate.
pub type MetricTable = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub seq_id: String,
    pub n_frames: usize,
    pub metrics: MetricTable,
    pub accel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub thresholds_mm: Vec<f64>,
    pub aggregate: MetricTable,
    pub accel_error: f64,
    pub sequences: Vec<SequenceMetrics>,
}

impl MetricsReport {
    pub fn get(&self, mode: AlignmentMode, metric: &str) -> Option<f64> {
        self.aggregate.get(mode.key()).and_then(|m| m.get(metric)).copied()
    }

    pub fn pa_epe(&self) -> f64 {
        self.get(AlignmentMode::ProcrustesAligned, "epe").unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq_id,mode,metric,value\n");
        let mut row = |id: &str, table: &MetricTable| {
            for (mode, metrics) in table {
                for (name, value) in metrics {
                    out.push_str(&format!("{id},{mode},{name},{value}\n"));
                }
            }
        };
        for s in &self.sequences {
            row(&s.seq_id, &s.metrics);
        }
        row("all", &self.aggregate);
        out
    }
}

fn frame_metrics(
    pred: &[Point3],
    gt: &[Point3],
    tmpl: &KinematicTemplate,
    thresholds: &[f64],
) -> Result<MetricTable, MetricsError> {
    let mut table = MetricTable::new();
    for mode in AlignmentMode::ALL {
        let aligned = align(mode, pred, gt)?;
        let mut m = BTreeMap::new();
        m.insert("epe".to_string(), epe(&aligned, gt)?);
        let pv = tmpl.virtual_vertices(&aligned);
        let gv = tmpl.virtual_vertices(gt);
        m.insert("v2v".to_string(), v2v(&pv, &gv)?);
        for t in thresholds {
            m.insert(format!("f@{t}"), fscore(&pv, &gv, *t)?);
        }
        table.insert(mode.key().to_string(), m);
    }
    Ok(table)
}

fn accumulate(into: &mut MetricTable, from: &MetricTable, weight: f64) {
    for (mode, metrics) in from {
        let slot = into.entry(mode.clone()).or_default();
        for (k, v) in metrics {
            *slot.entry(k.clone()).or_insert(0.0) += weight * v;
        }
    }
}

/// Metrics from predicted joint trajectories, one `Vec` of frames per
/// sequence. Frame errors are averaged per sequence, then over sequences.
pub fn evaluate_predictions(
    dataset: &Dataset,
    predictions: &[Vec<Vec<Point3>>],
    thresholds: &[f64],
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != dataset.sequences.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted sequences for {} in the dataset",
            predictions.len(),
            dataset.sequences.len()
        )));
    }
    let sequences: Vec<SequenceMetrics> = dataset
        .sequences
        .par_iter()
        .zip(predictions.par_iter())
        .map(|(seq, pred)| {
            if pred.len() != seq.len() {
                return Err(MetricsError::ShapeMismatch(format!(
                    "{} predicted frames for sequence {}",
                    pred.len(),
                    seq.seq_id
                )));
            }
            let gt: Vec<Vec<Point3>> = seq.j3d.iter().map(|k| k.0.to_vec()).collect();
            let mut table = MetricTable::new();
            let w = 1.0 / seq.len() as f64;
            for (p, g) in pred.iter().zip(&gt) {
                accumulate(&mut table, &frame_metrics(p, g, &dataset.template, thresholds)?, w);
            }
            for mode in AlignmentMode::ALL {
                let aligned = pred
                    .iter()
                    .zip(&gt)
                    .map(|(p, g)| align(mode, p, g))
                    .collect::<Result<Vec<_>, _>>()?;
                let a = accel_error(&aligned, &gt, seq.fps)?;
                table.entry(mode.key().to_string()).or_default().insert("accel".to_string(), a);
            }
            Ok(SequenceMetrics {
                seq_id: seq.seq_id.clone(),
                n_frames: seq.len(),
                metrics: table,
                accel_error: accel_error(pred, &gt, seq.fps)?,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    let mut aggregate = MetricTable::new();
    let mut accel = 0.0;
    let w = 1.0 / sequences.len().max(1) as f64;
    for s in &sequences {
        accumulate(&mut aggregate, &s.metrics, w);
        accel += w * s.accel_error;
    }
    for value in aggregate.values().flat_map(|m| m.values()).chain(std::iter::once(&accel)) {
        if !value.is_finite() {
            return Err(MetricsError::Model(NnError::NonFinite("metrics".into())));
        }
    }
    Ok(MetricsReport {
        n_sequences: sequences.len(),
        n_frames: dataset.n_frames(),
        thresholds_mm: thresholds.to_vec(),
        aggregate,
        accel_error: accel,
        sequences,
    })
}

/// Predicted 3D joints of every frame of every sequence.
pub fn predict_joints(
    params: &ModelParams,
    dataset: &Dataset,
    camera: &CameraDecoding,
) -> Result<Vec<Vec<Vec<Point3>>>, MetricsError> {
    dataset
        .sequences
        .iter()
        .map(|seq| {
            predict_sequence(params, seq, camera)?
                .iter()
                .map(|(pose, shape, _)| {
                    forward_kinematics(pose, shape, &dataset.template)
                        .map(|k| k.0.to_vec())
                        .map_err(|e| MetricsError::Model(e.into()))
                })
                .collect()
        })
        .collect()
}

/// Runs the model on every frame and scores it.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    camera: &CameraDecoding,
    thresholds: &[f64],
) -> Result<MetricsReport, MetricsError> {
    let preds = predict_joints(params, dataset, camera)?;
    evaluate_predictions(dataset, &preds, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::axis_angle_to_matrix;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
            .collect()
    }

    fn transform(pts: &[Point3], s: f64, r: &Matrix3<f64>, t: Vector3<f64>) -> Vec<Point3> {
        pts.iter().map(|p| (s * r * v(p) + t).into()).collect()
    }

    #[test]
    fn epe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = cloud(&mut rng, 21);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Point3> = gt.iter().map(|p| [p[0] + 0.003, p[1] + 0.004, p[2]]).collect();
        assert!((epe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-9);
        let z: Vec<Point3> = gt.iter().map(|p| [p[0], p[1], p[2] + 0.001]).collect();
        assert!((v2v(&z, &gt).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(epe(&gt[..3], &gt), Err(MetricsError::ShapeMismatch(_))));
    }

    #[test]
    fn root_alignment_cancels_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = cloud(&mut rng, 21);
        assert_eq!(align_root(&gt, &gt).unwrap(), gt);
        let moved = transform(&gt, 1.0, &Matrix3::identity(), Vector3::new(0.3, -0.2, 0.1));
        let ra = align_root(&moved, &gt).unwrap();
        assert!(epe(&ra, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let gt = cloud(&mut rng, 21);
            let axis = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let r = axis_angle_to_matrix(&axis);
            let pred = transform(&gt, rng.gen_range(0.5..2.0), &r, Vector3::new(0.1, 0.2, -0.3));
            let (_, rr, _) = procrustes_transform(&pred, &gt).unwrap();
            assert!((rr.determinant() - 1.0).abs() < 1e-9);
            assert!(epe(&align_procrustes(&pred, &gt).unwrap(), &gt).unwrap() < 1e-9);
            let sta = transform(&gt, 1.7, &Matrix3::identity(), Vector3::new(0.0, 0.5, 0.0));
            assert!(epe(&align_scale_translation(&sta, &gt).unwrap(), &gt).unwrap() < 1e-9);
        }
        let same = cloud(&mut rng, 21);
        let (s, r, t) = procrustes_transform(&same, &same).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && (r - Matrix3::identity()).norm() < 1e-9 && t.norm() < 1e-12);
    }

    #[test]
    fn reflection_is_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = cloud(&mut rng, 21);
        let mirrored: Vec<Point3> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let (_, r, _) = procrustes_transform(&mirrored, &gt).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_clouds_rejected() {
        let pts = vec![[0.1, 0.2, 0.3]; 21];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = cloud(&mut rng, 21);
        assert_eq!(align_scale_translation(&pts, &gt), Err(MetricsError::DegenerateCloud));
        assert_eq!(align_procrustes(&pts, &gt), Err(MetricsError::DegenerateCloud));
        let line: Vec<Point3> = (0..21).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        assert_eq!(align_procrustes(&line, &gt), Err(MetricsError::DegenerateCloud));
    }

    #[test]
    fn fscore_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(&mut rng, 41);
        let b = cloud(&mut rng, 41);
        assert_eq!(fscore(&a, &a, 0.1).unwrap(), 1.0);
        assert_eq!(fscore(&a, &b, 1e9).unwrap(), 1.0);
        let far: Vec<Point3> = a.iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect();
        assert_eq!(fscore(&far, &a, 5.0).unwrap(), 0.0);
        let mut last = 0.0;
        for t in [1.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0] {
            let f = fscore(&a, &b, t).unwrap();
            assert!(f >= last);
            assert_eq!(f, fscore(&b, &a, t).unwrap());
            last = f;
        }
    }

    #[test]
    fn accel_examples() {
        let traj = |a: f64, b: f64| -> Vec<Vec<Point3>> {
            (0..6).map(|t| vec![[a * t as f64 + b, 0.01, -b]; 21]).collect()
        };
        let gt = traj(0.01, 0.2);
        assert_eq!(accel_error(&gt, &gt, 30.0).unwrap(), 0.0);
        assert!(accel_error(&traj(-0.03, 0.1), &gt, 30.0).unwrap() < 1e-6);
        assert_eq!(accel_error(&gt[..2], &gt[..2], 30.0), Err(MetricsError::TooShort(2)));
        // one joint jumps by 1 mm at t = 2: |Δ²| = 2 mm · fps² at t = 2 and 1 mm · fps² at t = 1, 3
        let mut pred = gt.clone();
        pred[2][0][0] += 0.001;
        let expect = (1.0 + 2.0 + 1.0) * 900.0 / (4.0 * 21.0);
        assert!((accel_error(&pred, &gt, 30.0).unwrap() - expect).abs() < 1e-6);
    }

    fn noisy_similarity(seed: u64) -> (Vec<Point3>, Vec<Point3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = cloud(&mut rng, 21);
        let axis = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let t = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let sigma = rng.gen_range(0.0..0.02);
        let mut pred = transform(&gt, rng.gen_range(0.5..2.0), &axis_angle_to_matrix(&axis), t);
        for p in pred.iter_mut() {
            for c in p.iter_mut() {
                *c += rng.gen_range(-sigma..=sigma);
            }
        }
        (pred, gt)
    }

    proptest! {
        #[test]
        fn alignment_ordering(seed in 0u64..1_000_000) {
            let (pred, gt) = noisy_similarity(seed);
            let sse = |x: &[Point3]| x.iter().zip(&gt).map(|(a, b)| (v(a) - v(b)).norm_squared()).sum::<f64>();
            let pa = align_procrustes(&pred, &gt).unwrap();
            let sta = align_scale_translation(&pred, &gt).unwrap();
            let ra = align_root(&pred, &gt).unwrap();
            let tol = 1e-12 * (1.0 + sse(&pred));
            prop_assert!(sse(&pa) <= sse(&sta) + tol);
            prop_assert!(sse(&sta) <= sse(&ra) + tol);
            prop_assert!(sse(&sta) <= sse(&pred) + tol);
        }

        #[test]
        fn fscore_is_symmetric(seed in 0u64..1_000_000, t in 0.1f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 41);
            let b = cloud(&mut rng, 41);
            prop_assert!(fscore(&a, &b, t).unwrap() == fscore(&b, &a, t).unwrap());
        }
    }
}

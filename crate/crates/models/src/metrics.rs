//! Evaluation metrics: feature-distribution distance with a PSD matrix
//! square root, minimum-of-S displacement error, pairwise diversity,
//! recognition faithfulness, and a foot-contact slide diagnostic.

use crate::classifier::MotionClassifier;
use crate::ModelError;
use mfp_motion::{pose_vectorize, MotionSequence, Skeleton, ANKLE_JOINTS};
use serde::{Deserialize, Serialize};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, row-major matrix whose columns are eigenvectors).
pub fn jacobi_eigen_sym(m: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    (values, v)
}

/// Symmetric PSD square root: S with S·S = M. Rejects asymmetric input;
/// eigenvalues down to -1e-9 are clamped to zero.
pub fn matrix_sqrt_psd(m: &[f64], n: usize) -> Result<Vec<f64>, ModelError> {
    if m.len() != n * n {
        return Err(ModelError::Invalid(format!(
            "matrix_sqrt_psd: {} entries for a {n}x{n} matrix",
            m.len()
        )));
    }
    let scale = m.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-9 * scale {
                return Err(ModelError::Invalid(format!(
                    "matrix_sqrt_psd: asymmetric at ({i},{j})"
                )));
            }
        }
    }
    let (values, vecs) = jacobi_eigen_sym(m, n);
    let mut roots = Vec::with_capacity(n);
    for &l in &values {
        if l < -1e-9 * scale.max(1.0) {
            return Err(ModelError::Invalid(format!(
                "matrix_sqrt_psd: negative eigenvalue {l}"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    // S = V diag(sqrt(l)) Vᵀ
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            s[i * n + j] = acc;
        }
    }
    Ok(s)
}

/// Gaussian fit of classifier features: mean, unbiased covariance, count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureDistribution {
    pub mu: Vec<f64>,
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Fit from raw feature rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        if rows.len() < 2 {
            return Err(ModelError::Invalid(
                "feature distribution needs at least 2 samples".into(),
            ));
        }
        let d = rows[0].len();
        let n = rows.len();
        let mut mu = vec![0.0; d];
        for r in rows {
            for i in 0..d {
                mu[i] += r[i];
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mu[i];
                for j in 0..d {
                    cov[i * d + j] += di * (r[j] - mu[j]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= (n - 1) as f64;
        }
        Ok(FeatureDistribution { mu, cov, n })
    }
}

/// Fit the classifier's feature-layer activations over a set of sequences.
pub fn feature_stats(
    seqs: &[MotionSequence],
    clf: &MotionClassifier,
) -> Result<FeatureDistribution, ModelError> {
    let rows: Vec<Vec<f64>> = seqs.iter().map(|s| clf.features(s)).collect();
    FeatureDistribution::fit(&rows)
}

/// Frechet distance between Gaussian feature fits; the cross term uses the
/// symmetric similarity trick sqrt(sqrt(Sg) Sr sqrt(Sg)).
pub fn fid(g: &FeatureDistribution, r: &FeatureDistribution) -> Result<f64, ModelError> {
    let d = g.dim();
    if r.dim() != d {
        return Err(ModelError::Invalid(format!(
            "fid: dimension mismatch {d} vs {}",
            r.dim()
        )));
    }
    let mean_term: f64 = g
        .mu
        .iter()
        .zip(&r.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sg = matrix_sqrt_psd(&g.cov, d)?;
    // inner = sqrt(Sg) * Sr * sqrt(Sg), re-symmetrized against roundoff
    let mut tmp = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += sg[i * d + k] * r.cov[k * d + j];
            }
            tmp[i * d + j] = acc;
        }
    }
    let mut inner = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += tmp[i * d + k] * sg[k * d + j];
            }
            inner[i * d + j] = acc;
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let cross = matrix_sqrt_psd(&inner, d)?;
    let mut trace_term = 0.0;
    for i in 0..d {
        trace_term += g.cov[i * d + i] + r.cov[i * d + i] - 2.0 * cross[i * d + i];
    }
    let val = mean_term + trace_term;
    if val < -1e-6 {
        return Err(ModelError::Invalid(format!("fid diverged negative: {val}")));
    }
    Ok(val.max(0.0))
}

fn flat(seq: &MotionSequence) -> Vec<f64> {
    let mut v = Vec::new();
    for f in &seq.frames {
        v.extend(pose_vectorize(f, None));
    }
    v
}

/// Minimum over samples of the per-frame mean L2 displacement to ground
/// truth, on unnormalized flattened pose vectors.
pub fn ade_min(samples: &[MotionSequence], gt: &MotionSequence) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Invalid("ade: no samples".into()));
    }
    let t = gt.len();
    let mut best = f64::INFINITY;
    for s in samples {
        if s.len() != t {
            return Err(ModelError::Invalid(format!(
                "ade: sample length {} vs ground truth {t}",
                s.len()
            )));
        }
        let mut acc = 0.0;
        for k in 0..t {
            let a = pose_vectorize(&s.frames[k], None);
            let b = pose_vectorize(&gt.frames[k], None);
            acc += a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
        best = best.min(acc / t as f64);
    }
    Ok(best)
}

/// Mean L2 distance between flattened sequences over ordered pairs.
pub fn apd(samples: &[MotionSequence]) -> Result<f64, ModelError> {
    let s = samples.len();
    if s < 2 {
        return Err(ModelError::Invalid("apd needs at least 2 samples".into()));
    }
    let flats: Vec<Vec<f64>> = samples.iter().map(flat).collect();
    let mut total = 0.0;
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            total += flats[i]
                .iter()
                .zip(&flats[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (s * (s - 1)) as f64)
}

/// Recognition accuracy of the conditioning labels on generated motions.
pub fn action_faithfulness(
    seqs: &[MotionSequence],
    clf: &MotionClassifier,
) -> Result<f64, ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::Invalid("action_faithfulness: empty input".into()));
    }
    for s in seqs {
        if s.label.index >= clf.config.num_actions {
            return Err(ModelError::LabelOutOfRange {
                index: s.label.index,
                num_classes: clf.config.num_actions,
            });
        }
    }
    Ok(clf.accuracy(seqs))
}

/// Mean horizontal ankle speed over frames where the ankle sits within
/// 2 cm of the sequence's lowest ankle height.
pub fn foot_skate(seq: &MotionSequence) -> f64 {
    if seq.len() < 2 {
        return 0.0;
    }
    let positions: Vec<_> = seq.frames.iter().map(Skeleton::joint_positions).collect();
    let mut min_h = f64::INFINITY;
    for p in &positions {
        for &a in &ANKLE_JOINTS {
            min_h = min_h.min(p[a][1]);
        }
    }
    let threshold = min_h + 0.02;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..seq.len() - 1 {
        for &a in &ANKLE_JOINTS {
            if positions[k][a][1] <= threshold {
                let dx = positions[k + 1][a][0] - positions[k][a][0];
                let dz = positions[k + 1][a][2] - positions[k][a][2];
                total += (dx * dx + dz * dz).sqrt() * seq.fps;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// The gap between an in-betweening's first frame and the last observed
/// start frame, in unnormalized flattened pose space.
pub fn boundary_gap(inbetween: &MotionSequence, last_start: &mfp_motion::Pose) -> f64 {
    let a = pose_vectorize(&inbetween.frames[0], None);
    let b = pose_vectorize(last_start, None);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid_train: f64,
    pub fid_test: f64,
    pub af: f64,
    pub ade: f64,
    pub apd: f64,
    pub foot_skate: f64,
    pub s: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_identity_and_diagonal() {
        let s = matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[3] - 1.0).abs() < 1e-12);
        let s = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-10 && (s[3] - 3.0).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
    }

    #[test]
    fn asymmetric_rejected() {
        assert!(matrix_sqrt_psd(&[1.0, 0.5, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn one_dimensional_fid_closed_form() {
        let g = FeatureDistribution {
            mu: vec![0.0],
            cov: vec![1.0],
            n: 10,
        };
        let r = FeatureDistribution {
            mu: vec![1.0],
            cov: vec![1.0],
            n: 10,
        };
        // (d mu)^2 + (sigma_g - sigma_r)^2 = 1
        let v = fid(&g, &r).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "fid = {v}");
    }
}

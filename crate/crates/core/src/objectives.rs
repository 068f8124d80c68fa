use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 625.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FmSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub target_v: Vec<f64>,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Linear-path sample `xt = (1 − t)·x0 + t·x1` with velocity `x1 − x0`.
pub fn fm_interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<FmSample> {
    same_len(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParams(alloc::format!(
            "t must lie in [0, 1], got {t}"
        )));
    }
    Ok(FmSample {
        x0: x0.to_vec(),
        x1: x1.to_vec(),
        t,
        xt: x0
            .iter()
            .zip(x1)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect(),
        target_v: x0.iter().zip(x1).map(|(a, b)| b - a).collect(),
    })
}

/// Mean squared velocity error.
pub fn fm_loss(pred_v: &[f64], sample: &FmSample) -> Result<f64> {
    same_len(&sample.target_v, pred_v)?;
    if pred_v.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = pred_v.len() as f64;
    Ok(pred_v
        .iter()
        .zip(&sample.target_v)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`fm_loss`] with respect to `pred_v`.
pub fn fm_loss_grad(pred_v: &[f64], sample: &FmSample) -> Result<Vec<f64>> {
    same_len(&sample.target_v, pred_v)?;
    if pred_v.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = pred_v.len() as f64;
    Ok(pred_v
        .iter()
        .zip(&sample.target_v)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KtoBatch {
    pub log_ratios: Vec<f64>,
    pub desirable: Vec<bool>,
    pub beta: f64,
    /// `(w_desirable, w_undesirable)`
    pub weights: (f64, f64),
    pub z_ref: f64,
}

impl KtoBatch {
    pub fn new(log_ratios: Vec<f64>, desirable: Vec<bool>) -> Self {
        Self {
            log_ratios,
            desirable,
            beta: DEFAULT_BETA,
            weights: (1.0, 1.0),
            z_ref: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_ratios.len() != self.desirable.len() {
            return Err(Error::ShapeMismatch {
                expected: self.log_ratios.len(),
                found: self.desirable.len(),
            });
        }
        if self.log_ratios.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(self.beta > 0.0) || !(self.weights.0 > 0.0 && self.weights.1 > 0.0) {
            return Err(Error::InvalidParams(
                "beta and weights must be positive".into(),
            ));
        }
        Ok(())
    }

    fn margin(&self, i: usize) -> (f64, f64) {
        let z = self.beta * self.log_ratios[i] - self.z_ref;
        if self.desirable[i] {
            (self.weights.0, z)
        } else {
            (self.weights.1, -z)
        }
    }
}

/// Mean of `w(y) · (1 − σ(±(β·r − z_ref)))`, the sign flipped for undesirable samples.
pub fn kto_loss(batch: &KtoBatch) -> Result<f64> {
    batch.validate()?;
    let n = batch.log_ratios.len();
    Ok((0..n)
        .map(|i| {
            let (w, m) = batch.margin(i);
            w * (1.0 - sigmoid(m))
        })
        .sum::<f64>()
        / n as f64)
}

/// Gradient of [`kto_loss`] with respect to each log-ratio.
pub fn kto_loss_grad(batch: &KtoBatch) -> Result<Vec<f64>> {
    batch.validate()?;
    let n = batch.log_ratios.len() as f64;
    Ok((0..batch.log_ratios.len())
        .map(|i| {
            let (w, m) = batch.margin(i);
            let s = sigmoid(m);
            let sign = if batch.desirable[i] { 1.0 } else { -1.0 };
            -w * s * (1.0 - s) * batch.beta * sign / n
        })
        .collect())
}

/// Clipped mean of the batch log-ratios.
pub fn estimate_z_ref(log_ratios: &[f64]) -> Result<f64> {
    if log_ratios.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok((log_ratios.iter().sum::<f64>() / log_ratios.len() as f64).max(0.0))
}

/// Two-parameter toy policy `v = a·xt + b`, with log-ratio `r = a·s + b·u`
/// per preference sample, trained on FM + KTO at equal weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub fm: Vec<FmSample>,
    /// `(s, u, desirable)` features per preference sample.
    pub preferences: Vec<(f64, f64, bool)>,
    pub beta: f64,
    pub weights: (f64, f64),
    pub z_ref: f64,
}

impl ToyModel {
    fn kto_batch(&self, theta: [f64; 2]) -> KtoBatch {
        KtoBatch {
            log_ratios: self
                .preferences
                .iter()
                .map(|&(s, u, _)| theta[0] * s + theta[1] * u)
                .collect(),
            desirable: self.preferences.iter().map(|p| p.2).collect(),
            beta: self.beta,
            weights: self.weights,
            z_ref: self.z_ref,
        }
    }

    pub fn loss(&self, theta: [f64; 2]) -> Result<f64> {
        let mut fm = 0.0;
        for s in &self.fm {
            let pred: Vec<f64> = s.xt.iter().map(|x| theta[0] * x + theta[1]).collect();
            fm += fm_loss(&pred, s)?;
        }
        Ok(fm / self.fm.len().max(1) as f64 + kto_loss(&self.kto_batch(theta))?)
    }

    pub fn grad(&self, theta: [f64; 2]) -> Result<[f64; 2]> {
        let mut g = [0.0; 2];
        let m = self.fm.len().max(1) as f64;
        for s in &self.fm {
            let pred: Vec<f64> = s.xt.iter().map(|x| theta[0] * x + theta[1]).collect();
            for (d, x) in fm_loss_grad(&pred, s)?.iter().zip(&s.xt) {
                g[0] += d * x / m;
                g[1] += d / m;
            }
        }
        let dr = kto_loss_grad(&self.kto_batch(theta))?;
        for (d, &(s, u, _)) in dr.iter().zip(&self.preferences) {
            g[0] += d * s;
            g[1] += d * u;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn interpolation_endpoints() {
        let s = fm_interpolate(&[0.0, 2.0], &[1.0, -2.0], 0.0).unwrap();
        assert_eq!(s.xt, vec![0.0, 2.0]);
        let s = fm_interpolate(&[0.0, 2.0], &[1.0, -2.0], 1.0).unwrap();
        assert_eq!(s.xt, vec![1.0, -2.0]);
        let s = fm_interpolate(&[0.0], &[1.0], 0.5).unwrap();
        assert_eq!((s.xt[0], s.target_v[0]), (0.5, 1.0));
        assert!(fm_interpolate(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn fm_loss_values() {
        let s = fm_interpolate(&[0.0], &[1.0], 0.3).unwrap();
        assert_eq!(fm_loss(&[1.0], &s).unwrap(), 0.0);
        assert_eq!(fm_loss(&[0.0], &s).unwrap(), 1.0);
    }

    #[test]
    fn kto_neutral_sample_is_half() {
        let b = KtoBatch::new(vec![0.0], vec![true]);
        assert!((kto_loss(&b).unwrap() - 0.5).abs() < 1e-12);
        let b = KtoBatch::new(vec![10.0], vec![true]);
        assert!(kto_loss(&b).unwrap() < 1e-12);
    }

    #[test]
    fn z_ref_examples() {
        assert_eq!(estimate_z_ref(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(estimate_z_ref(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(estimate_z_ref(&[-2.0, -4.0]).unwrap(), 0.0);
        assert_eq!(estimate_z_ref(&[]), Err(Error::EmptyBatch));
    }

    #[test]
    fn kto_monotone_on_grid() {
        let grid: Vec<f64> = (0..101).map(|i| -0.01 + 0.0002 * i as f64).collect();
        for desirable in [true, false] {
            let vals: Vec<f64> = grid
                .iter()
                .map(|&r| kto_loss(&KtoBatch::new(vec![r], vec![desirable])).unwrap())
                .collect();
            for w in vals.windows(2) {
                if desirable {
                    assert!(w[1] < w[0]);
                } else {
                    assert!(w[1] > w[0]);
                }
            }
        }
    }

    fn toy() -> ToyModel {
        ToyModel {
            fm: vec![
                fm_interpolate(&[0.1, -0.4, 0.7], &[1.0, 0.5, -0.2], 0.3).unwrap(),
                fm_interpolate(&[-0.3, 0.2, 0.0], &[0.4, 0.9, 1.1], 0.8).unwrap(),
            ],
            preferences: vec![
                (0.002, -0.001, true),
                (-0.0015, 0.003, false),
                (0.001, 0.001, true),
            ],
            beta: DEFAULT_BETA,
            weights: (1.0, 1.3),
            z_ref: 0.2,
        }
    }

    #[test]
    fn toy_gradient_matches_central_differences() {
        let m = toy();
        for theta in [[0.3, -0.2], [1.5, 0.7], [-0.8, 2.0]] {
            let g = m.grad(theta).unwrap();
            for k in 0..2 {
                let h = 1e-6;
                let (mut p, mut q) = (theta, theta);
                p[k] += h;
                q[k] -= h;
                let fd = (m.loss(p).unwrap() - m.loss(q).unwrap()) / (2.0 * h);
                assert!(
                    (g[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "{k}: {} vs {fd}",
                    g[k]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn fm_loss_zero_iff_exact(v in proptest::collection::vec(-5.0f64..5.0, 1..8), d in 1e-6f64..1.0) {
            let x0 = vec![0.0; v.len()];
            let s = fm_interpolate(&x0, &v, 0.5).unwrap();
            prop_assert_eq!(fm_loss(&v, &s).unwrap(), 0.0);
            let mut off = v.clone();
            off[0] += d;
            prop_assert!(fm_loss(&off, &s).unwrap() > 0.0);
        }

        #[test]
        fn kto_per_sample_bounds(r in -0.02f64..0.02, desirable: bool, wd in 0.1f64..3.0, wu in 0.1f64..3.0) {
            let b = KtoBatch { weights: (wd, wu), ..KtoBatch::new(vec![r], vec![desirable]) };
            let l = kto_loss(&b).unwrap();
            prop_assert!(l > 0.0 && l < wd.max(wu));
        }
    }
}

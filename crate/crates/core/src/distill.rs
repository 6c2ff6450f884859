//! Knowledge distillation against cached teacher logits.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Scalar;

/// Teacher logits for every training sample, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsCache {
    pub n_samples: usize,
    pub n_classes: usize,
    /// Row-major `[n_samples, n_classes]`.
    pub logits: Vec<f32>,
}

impl LogitsCache {
    pub fn new(n_samples: usize, n_classes: usize, logits: Vec<f32>) -> Result<Self> {
        if n_classes == 0 || logits.len() != n_samples * n_classes {
            return Err(Error::Dimension(format!(
                "logits cache: {} values for {n_samples} x {n_classes}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits cache entry {i}")));
        }
        Ok(Self { n_samples, n_classes, logits })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Rows for the given sample ids, concatenated.
    pub fn gather(&self, ids: &[usize]) -> Vec<f32> {
        ids.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }

    /// Top-1 accuracy of the cached logits against `labels`.
    pub fn accuracy(&self, labels: &[u8]) -> f64 {
        let hits = (0..self.n_samples).filter(|&i| kernels::argmax(self.row(i)) == labels[i] as usize).count();
        hits as f64 / self.n_samples as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    /// `(1 - alpha) * hard + alpha * T^2 * soft`.
    pub total: Var,
    /// Cross-entropy against the labels at temperature 1.
    pub hard: Var,
    /// Cross-entropy of `softmax(student / T)` against `softmax(teacher / T)`.
    pub soft: Var,
}

/// Distillation loss. Teacher logits are plain data and receive no gradient.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    labels: &[usize],
    teacher: &[f32],
    kd_alpha: f64,
    temperature: f64,
) -> Result<KdTerms> {
    if !(0.0..=1.0).contains(&kd_alpha) {
        return Err(Error::Argument(format!("kd alpha {kd_alpha} outside [0, 1]")));
    }
    if !(temperature >= 1.0) {
        return Err(Error::Argument(format!("kd temperature {temperature} below 1")));
    }
    let shape = g.value(student).shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::Dimension(format!("kd student logits: expected rank 2, got {shape:?}")));
    };
    if teacher.len() != n * c {
        return Err(Error::Dimension(format!(
            "kd teacher logits: expected {} values for [{n}, {c}], got {}",
            n * c,
            teacher.len()
        )));
    }
    let t = T::from_f64(temperature);
    let teacher: Vec<T> = teacher.iter().map(|&x| T::from_f64(x as f64)).collect();
    let targets = kernels::softmax_rows(&teacher, c, t);
    let hard = g.cross_entropy_logits(student, labels)?;
    let soft = g.soft_cross_entropy(student, &targets, t)?;
    let h = g.scale(hard, T::from_f64(1.0 - kd_alpha));
    let s = g.scale(soft, T::from_f64(kd_alpha * temperature * temperature));
    let total = g.add(h, s)?;
    Ok(KdTerms { total, hard, soft })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits() -> Tensor<f64> {
        Tensor::new(vec![2, 4], vec![0.3, -1.2, 2.0, 0.1, 1.5, 0.2, -0.7, 0.9]).unwrap()
    }

    #[test]
    fn alpha_zero_is_plain_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(logits());
        let kd = kd_loss(&mut g, s, &[2, 0], &[0.0; 8], 0.0, 4.0).unwrap();
        let ce = g.cross_entropy_logits(s, &[2, 0]).unwrap();
        assert_eq!(g.scalar(kd.total), g.scalar(ce));
    }

    #[test]
    fn self_distillation_at_t1_is_entropy() {
        let x = logits();
        let mut g = Graph::<f64>::new();
        let s = g.constant(x.clone());
        let teacher: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
        let kd = kd_loss(&mut g, s, &[0, 0], &teacher, 1.0, 1.0).unwrap();
        let mut h = 0.0;
        for row in x.data().chunks(4) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            h -= row.iter().map(|v| (v.exp() / z) * (v.exp() / z).ln()).sum::<f64>();
        }
        assert!((g.scalar(kd.total) - h / 2.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_teacher_matches_scalar_oracle() {
        let x = logits();
        let mut g = Graph::<f64>::new();
        let s = g.constant(x.clone());
        let kd = kd_loss(&mut g, s, &[1, 1], &[0.5; 8], 1.0, 1.0).unwrap();
        // mean over rows of lse(row) - mean(row)
        let mut oracle = 0.0;
        for row in x.data().chunks(4) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += lse - row.iter().sum::<f64>() / 4.0;
        }
        assert!((g.scalar(kd.total) - oracle / 2.0).abs() < 1e-6);
    }

    #[test]
    fn mixture_is_linear_in_alpha_at_t1() {
        let teacher = [0.1f32, 0.4, -0.3, 2.0, 0.0, 1.0, 1.0, -1.0];
        let value = |a: f64| {
            let mut g = Graph::<f64>::new();
            let s = g.constant(logits());
            let kd = kd_loss(&mut g, s, &[3, 1], &teacher, a, 1.0).unwrap();
            (g.scalar(kd.total), g.scalar(kd.hard), g.scalar(kd.soft))
        };
        let (l0, hard, soft) = value(0.0);
        assert_eq!(l0, hard);
        assert!((value(1.0).0 - soft).abs() < 1e-12);
        assert!((value(0.5).0 - 0.5 * (hard + soft)).abs() < 1e-12);
    }

    #[test]
    fn shape_and_argument_errors() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(logits());
        assert!(matches!(kd_loss(&mut g, s, &[0, 0], &[0.0; 6], 0.5, 4.0), Err(Error::Dimension(_))));
        assert!(kd_loss(&mut g, s, &[0, 0], &[0.0; 8], 1.5, 4.0).is_err());
        assert!(kd_loss(&mut g, s, &[0, 0], &[0.0; 8], 0.5, 0.5).is_err());
    }

    #[test]
    fn cache_validates_and_gathers() {
        assert!(LogitsCache::new(2, 2, vec![0.0; 3]).is_err());
        assert!(LogitsCache::new(1, 2, vec![0.0, f32::NAN]).is_err());
        let c = LogitsCache::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(c.gather(&[2, 0]), vec![5.0, 5.0, 1.0, 0.0]);
        assert_eq!(c.accuracy(&[0, 1, 1]), 2.0 / 3.0);
    }
}

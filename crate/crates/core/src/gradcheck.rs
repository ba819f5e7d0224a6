//! Central finite-difference checks of the analytic gradients, in 64-bit.

use rand::Rng;

use crate::data::Dataset;
use crate::error::Result;
use crate::fed::LogitTable;
use crate::model::{Activation, Arch, MiniBatch, ModelParams};
use crate::rng::SimRng;

/// Central-difference gradient of the loss with respect to every parameter.
pub fn numeric_gradient(
    model: &ModelParams<f64>,
    batch: &MiniBatch,
    data: &Dataset,
    teacher: Option<(&LogitTable, f64)>,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.values().len());
    for i in 0..model.values().len() {
        let v = model.values()[i];
        probe.values_mut()[i] = v + h;
        let up = probe.loss(batch, data, teacher)?;
        probe.values_mut()[i] = v - h;
        let down = probe.loss(batch, data, teacher)?;
        probe.values_mut()[i] = v;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A random small network with data, a batch and a complete teacher table.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub model: ModelParams<f64>,
    pub data: Dataset,
    pub batch: MiniBatch,
    pub teacher: LogitTable,
}

impl GradCase {
    pub fn random(rng: &mut SimRng) -> Result<Self> {
        let input = rng.random_range(2..=6);
        let classes = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=7)).collect();
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let dims = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let arch = Arch::new(dims, act)?;
        let n = arch.param_count();
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = ModelParams::from_values(arch, values)?;

        let len = rng.random_range(3..=12);
        let features = (0..len * input).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let labels = (0..len).map(|_| rng.random_range(0..classes) as u16).collect();
        let data = Dataset::new(input, classes, features, labels)?;
        let size = rng.random_range(1..=len);
        let indices = (0..size).map(|_| rng.random_range(0..len)).collect();
        let batch = MiniBatch::new(indices, len)?;

        let entries = (0..classes)
            .map(|_| {
                let raw: Vec<f32> = (0..classes).map(|_| rng.random_range(0.05f32..1.0)).collect();
                let sum: f32 = raw.iter().sum();
                Some(raw.into_iter().map(|v| v / sum).collect())
            })
            .collect();
        let teacher = LogitTable::from_entries(entries)?;
        Ok(Self {
            model,
            data,
            batch,
            teacher,
        })
    }

    /// Relative errors of `grad_fl`, `grad_fd` with beta 0 and with beta 1.
    pub fn errors(&self, h: f64) -> Result<[f64; 3]> {
        let m = &self.model;
        let fl = m.grad_fl(&self.batch, &self.data)?;
        let num_fl = numeric_gradient(m, &self.batch, &self.data, None, h)?;
        let fd0 = m.grad_fd(&self.batch, &self.data, &self.teacher, 0.0)?;
        let num_fd0 = numeric_gradient(m, &self.batch, &self.data, Some((&self.teacher, 0.0)), h)?;
        let fd1 = m.grad_fd(&self.batch, &self.data, &self.teacher, 1.0)?;
        let num_fd1 = numeric_gradient(m, &self.batch, &self.data, Some((&self.teacher, 1.0)), h)?;
        Ok([
            relative_error(&fl.values, &num_fl),
            relative_error(&fd0.values, &num_fd0),
            relative_error(&fd1.values, &num_fd1),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_cases_agree() {
        let mut rng = stream(11, Stream::Validation);
        for _ in 0..5 {
            let case = GradCase::random(&mut rng).unwrap();
            for e in case.errors(1e-5).unwrap() {
                assert!(e < 1e-6, "relative error {e}");
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let mut rng = stream(12, Stream::Validation);
        let case = GradCase::random(&mut rng).unwrap();
        let mut g = case.model.grad_fl(&case.batch, &case.data).unwrap().values;
        let num = numeric_gradient(&case.model, &case.batch, &case.data, None, 1e-5).unwrap();
        g[0] += 0.5 + g[0].abs();
        assert!(relative_error(&g, &num) > 1e-3);
    }
}

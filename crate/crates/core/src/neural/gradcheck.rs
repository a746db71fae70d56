use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nets::Differentiable;
use super::tensor::Tensor4;
use crate::error::Result;

/// Largest relative discrepancies between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub params: f64,
    pub input: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.params.max(self.input)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn probe_loss<M: Differentiable<f64> + ?Sized>(m: &mut M, x: &Tensor4<f64>, r: &[f64]) -> Result<f64> {
    let y = m.forward_train(x)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Checks every parameter and input gradient of `model` under the probe loss
/// `L = Σ r·f(x)` with a seeded random `r`.
pub fn grad_check<M: Differentiable<f64> + ?Sized>(
    model: &mut M,
    input: &Tensor4<f64>,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward_train(input)?;
    let r: Vec<f64> = (0..out.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = Tensor4::from_vec(out.shape(), r.clone())?;
    model.zero_grad();
    let dx = model.backward(&g);
    let analytic: Vec<f64> = model.grads().concat();

    let mut report = GradCheckReport {
        params: 0.0,
        input: 0.0,
        checked: 0,
    };
    let base = model.flat_params();
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + epsilon;
        model.load_params(&theta)?;
        let lp = probe_loss(model, input, &r)?;
        theta[i] = base[i] - epsilon;
        model.load_params(&theta)?;
        let lm = probe_loss(model, input, &r)?;
        theta[i] = base[i];
        let num = (lp - lm) / (2.0 * epsilon);
        report.params = report.params.max(rel_err(analytic[i], num));
        report.checked += 1;
    }
    model.load_params(&base)?;

    let mut x = input.clone();
    for i in 0..x.data().len() {
        let v = input.data()[i];
        x.data_mut()[i] = v + epsilon;
        let lp = probe_loss(model, &x, &r)?;
        x.data_mut()[i] = v - epsilon;
        let lm = probe_loss(model, &x, &r)?;
        x.data_mut()[i] = v;
        let num = (lp - lm) / (2.0 * epsilon);
        report.input = report.input.max(rel_err(dx.data()[i], num));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::{Conv3x3, Dense, Layer};
    use crate::neural::nets::{Classifier, LayerProbe, Translator};

    fn random_input(shape: [usize; 4], seed: u64, away_from_zero: bool) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if away_from_zero {
                    v.signum() * (0.1 + v.abs())
                } else {
                    v
                }
            })
            .collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn dense_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LayerProbe::new(Layer::Dense(Dense::<f64>::new(6, 3, &mut rng)));
        let r = grad_check(&mut p, &random_input([4, 6, 1, 1], 2, false), 1e-3, 3).unwrap();
        assert!(r.max() < 1e-3, "{r:?}");
    }

    #[test]
    fn conv_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LayerProbe::new(Layer::Conv(Conv3x3::<f64>::new(2, 3, &mut rng)));
        let r = grad_check(&mut p, &random_input([2, 2, 5, 4], 2, false), 1e-3, 3).unwrap();
        assert!(r.max() < 1e-3, "{r:?}");
    }

    #[test]
    fn parameter_free_layers() {
        for layer in [Layer::Relu, Layer::MaxPool, Layer::Upsample, Layer::GlobalAvgPool] {
            let mut p = LayerProbe::<f64>::new(layer);
            let r = grad_check(&mut p, &random_input([2, 2, 4, 6], 5, true), 1e-3, 3).unwrap();
            assert!(r.max() < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn whole_networks() {
        let mut c = Classifier::<f64>::new(3, &[3, 4], 4).unwrap();
        let r = grad_check(&mut c, &random_input([2, 3, 8, 8], 6, false), 1e-6, 7).unwrap();
        assert!(r.max() < 1e-3, "{r:?}");
        let mut t = Translator::<f64>::new(&[2, 3, 4], 4).unwrap();
        let r = grad_check(&mut t, &random_input([1, 1, 8, 8], 6, false), 1e-6, 7).unwrap();
        assert!(r.max() < 1e-3, "{r:?}");
    }
}

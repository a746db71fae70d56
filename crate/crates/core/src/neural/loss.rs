use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Class weights `(w_pos, w_neg) = (N/(P+N), P/(P+N))`.
pub fn class_weights(positives: usize, negatives: usize) -> Result<(f64, f64)> {
    let total = positives + negatives;
    if total == 0 {
        return Err(Error::EmptyClass("no samples to weight".into()));
    }
    let t = total as f64;
    Ok((negatives as f64 / t, positives as f64 / t))
}

/// Weighted softmax cross-entropy over two-class logits `[p, n]`.
///
/// Label 1 (positive) targets channel 0. Returns the batch-mean loss and its
/// gradient with respect to the logits.
pub fn weighted_ce_loss<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[u8],
    w_pos: f64,
    w_neg: f64,
) -> Result<(f64, Tensor4<T>)> {
    if logits.channels() != 2 || logits.item_len() != 2 {
        return Err(Error::Shape(format!(
            "logits must be (b, 2, 1, 1), got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != logits.batch() {
        return Err(Error::Shape(format!(
            "{} labels for batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    if !(w_pos >= 0.0 && w_neg >= 0.0) {
        return Err(Error::InvalidParameter("class weights must be non-negative".into()));
    }
    let b = labels.len().max(1) as f64;
    let mut grad = Tensor4::zeros(logits.shape());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let z = logits.item(i);
        let (zp, zn) = (z[0].to_f64(), z[1].to_f64());
        let m = zp.max(zn);
        let lse = m + ((zp - m).exp() + (zn - m).exp()).ln();
        let (target, w) = if label == 1 { (0, w_pos) } else { (1, w_neg) };
        let zt = if target == 0 { zp } else { zn };
        total += w * (lse - zt);
        let sp = (zp - lse).exp();
        let probs = [sp, 1.0 - sp];
        let g = grad.item_mut(i);
        for c in 0..2 {
            let onehot = if c == target { 1.0 } else { 0.0 };
            g[c] = T::from_f64(w * (probs[c] - onehot) / b);
        }
    }
    Ok((total / b, grad))
}

/// Mean absolute error and its subgradient (0 at exact ties).
pub fn l1_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.data().len().max(1) as f64;
    let step = T::from_f64(1.0 / n);
    let mut grad = Tensor4::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.to_f64().abs();
        *g = if d > T::zero() {
            step
        } else if d < T::zero() {
            -step
        } else {
            T::zero()
        };
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn weights_from_counts() {
        let (wp, wn) = class_weights(6883, 222166).unwrap();
        assert!((wp - 0.9700).abs() < 1e-4 && (wn - 0.0300).abs() < 1e-4);
        assert_eq!(class_weights(5, 5).unwrap(), (0.5, 0.5));
        let (wp, _) = class_weights(27833, 1002866).unwrap();
        assert!((wp - 0.9730).abs() < 1e-4);
        assert!(class_weights(0, 0).is_err());
    }

    #[test]
    fn ce_uniform_and_zero_weight() {
        let z = Tensor4::<f64>::zeros([1, 2, 1, 1]);
        let (l, _) = weighted_ce_loss(&z, &[1], 1.0, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, g) = weighted_ce_loss(&z, &[1], 0.0, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = Tensor4::from_vec([5, 2, 1, 1], data).unwrap();
        let labels = [1, 0, 0, 1, 0];
        let (_, g) = weighted_ce_loss(&z, &labels, 0.8, 0.2).unwrap();
        let eps = 1e-5;
        for i in 0..10 {
            let mut zp = z.clone();
            zp.data_mut()[i] += eps;
            let mut zm = z.clone();
            zm.data_mut()[i] -= eps;
            let lp = weighted_ce_loss(&zp, &labels, 0.8, 0.2).unwrap().0;
            let lm = weighted_ce_loss(&zm, &labels, 0.8, 0.2).unwrap().0;
            let num = (lp - lm) / (2.0 * eps);
            let a = g.data()[i];
            assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn unit_weights_equal_plain_ce() {
        let z = Tensor4::<f64>::from_vec([2, 2, 1, 1], vec![1.0, -0.5, 0.3, 2.0]).unwrap();
        let (l, _) = weighted_ce_loss(&z, &[1, 1], 1.0, 1.0).unwrap();
        let ce = |a: f64, b: f64| -(a.exp() / (a.exp() + b.exp())).ln();
        let plain = (ce(1.0, -0.5) + ce(0.3, 2.0)) / 2.0;
        assert!((l - plain).abs() < 1e-12);
    }

    #[test]
    fn l1_cases() {
        let a = Tensor4::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v -= 1.5);
        let (l, g) = l1_loss(&a, &b).unwrap();
        assert!((l - 1.5).abs() < 1e-9);
        assert!(g.data().iter().all(|&v| v == 0.25));
        assert!(l1_loss(&a, &Tensor4::zeros([1, 1, 1, 4])).is_err());
    }
}

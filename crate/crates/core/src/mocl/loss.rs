use log::warn;

use super::confidence::ConfidenceMap;
use super::tensor::Tensor;
use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Loss value together with its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub loss: F,
    pub grad: Tensor<F>,
    pub weight_sum: F,
}

fn check_shapes<F: Scalar>(logits: &Tensor<F>, labels: &LabelMap) -> Result<()> {
    if logits.dims() != labels.classes().dims() {
        return Err(Error::DimensionMismatch {
            what: format!("logits vs label map {}", labels.patch_id),
            expected: labels.classes().dims(),
            actual: logits.dims(),
        });
    }
    if logits.channels != 3 {
        return Err(Error::ContractViolation(format!(
            "expected 3 logit channels, got {}",
            logits.channels
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite(format!("logits for {}", labels.patch_id)));
    }
    Ok(())
}

/// Per-pixel cross-entropy, row-major.
pub fn pixel_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &LabelMap) -> Result<Vec<F>> {
    check_shapes(logits, labels)?;
    let n = logits.plane_len();
    let k = logits.channels;
    Ok(labels
        .classes()
        .as_slice()
        .iter()
        .enumerate()
        .map(|(p, &y)| {
            let m = (0..k).map(|ch| logits.data[ch * n + p]).fold(F::neg_infinity(), F::max);
            let lse = m + (0..k).map(|ch| (logits.data[ch * n + p] - m).exp()).sum::<F>().ln();
            lse - logits.data[usize::from(y) * n + p]
        })
        .collect())
}

/// Σ w·CE / Σ w over pixels. The weights are constants: the gradient is
/// `w (softmax − onehot) / Σ w`. `None` means uniform weight 1.
pub fn mocl_loss<F: Scalar>(
    logits: &Tensor<F>,
    labels: &LabelMap,
    confidence: Option<&ConfidenceMap<F>>,
) -> Result<LossOutput<F>> {
    check_shapes(logits, labels)?;
    if let Some(conf) = confidence {
        if conf.weights.dims() != labels.classes().dims() {
            return Err(Error::DimensionMismatch {
                what: format!("confidence map {}", conf.patch_id),
                expected: labels.classes().dims(),
                actual: conf.weights.dims(),
            });
        }
        if conf.weights.as_slice().iter().any(|&w| !(w >= F::zero() && w <= F::one())) {
            return Err(Error::ContractViolation(format!(
                "confidence weights for {} outside [0, 1]",
                conf.patch_id
            )));
        }
    }
    let n = logits.plane_len();
    let k = logits.channels;
    let weight = |p: usize| confidence.map_or(F::one(), |c| c.weights.as_slice()[p]);
    let weight_sum: F = (0..n).map(weight).sum();
    let mut grad = Tensor::zeros(k, logits.height, logits.width);
    if weight_sum <= F::zero() {
        warn!("all confidence weights are zero for {}; loss set to 0", labels.patch_id);
        return Ok(LossOutput {
            loss: F::zero(),
            grad,
            weight_sum,
        });
    }
    let mut total = F::zero();
    for (p, &y) in labels.classes().as_slice().iter().enumerate() {
        let y = usize::from(y);
        let m = (0..k).map(|ch| logits.data[ch * n + p]).fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for ch in 0..k {
            z += (logits.data[ch * n + p] - m).exp();
        }
        let w = weight(p);
        total += w * (m + z.ln() - logits.data[y * n + p]);
        let scale = w / weight_sum;
        for ch in 0..k {
            let prob = (logits.data[ch * n + p] - m).exp() / z;
            let target = if ch == y { F::one() } else { F::zero() };
            grad.data[ch * n + p] = scale * (prob - target);
        }
    }
    Ok(LossOutput {
        loss: total / weight_sum,
        grad,
        weight_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::seeding;
    use rand::Rng;

    fn random_case(seed: u64, h: usize, w: usize) -> (Tensor<f64>, LabelMap, ConfidenceMap<f64>) {
        let mut rng = seeding::rng_from(seed);
        let logits =
            Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let labels = LabelMap::new(
            "p",
            Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0..3u8)).collect()).unwrap(),
        )
        .unwrap();
        let conf = ConfidenceMap {
            patch_id: "p".into(),
            weights: Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
        };
        (logits, labels, conf)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..20 {
            let (logits, labels, conf) = random_case(seed, 4, 4);
            let out = mocl_loss(&logits, &labels, Some(&conf)).unwrap();
            let eps = 1e-6;
            for i in 0..logits.data.len() {
                let mut plus = logits.clone();
                plus.data[i] += eps;
                let mut minus = logits.clone();
                minus.data[i] -= eps;
                let fd = (mocl_loss(&plus, &labels, Some(&conf)).unwrap().loss
                    - mocl_loss(&minus, &labels, Some(&conf)).unwrap().loss)
                    / (2.0 * eps);
                let an = out.grad.data[i];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn uniform_weights_give_mean_cross_entropy() {
        for seed in 0..20 {
            let (logits, labels, mut conf) = random_case(100 + seed, 5, 7);
            conf.weights = Grid::filled(5, 7, 1.0);
            let ce = pixel_cross_entropy(&logits, &labels).unwrap();
            let mean = ce.iter().sum::<f64>() / ce.len() as f64;
            let weighted = mocl_loss(&logits, &labels, Some(&conf)).unwrap().loss;
            let unweighted = mocl_loss(&logits, &labels, None).unwrap().loss;
            assert!((weighted - mean).abs() < 1e-6);
            assert!((unweighted - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let (logits, labels, mut conf) = random_case(3, 2, 2);
        conf.weights = Grid::filled(2, 2, 0.0);
        let out = mocl_loss(&logits, &labels, Some(&conf)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weighted_mean_of_two_pixels() {
        // Background logit chosen so pixel CE is 0.7 and 3.0.
        let ce_logit = |ce: f64| -> f64 {
            // CE = ln(e^a + 2) - a with the other two logits at 0
            // => e^a = 2 / (e^ce - 1)
            (2.0 / (ce.exp() - 1.0)).ln()
        };
        let logits = Tensor::from_vec(3, 1, 2, vec![ce_logit(0.7), ce_logit(3.0), 0.0, 0.0, 0.0, 0.0]).unwrap();
        let labels = LabelMap::new("p", Grid::filled(1, 2, 0u8)).unwrap();
        let ce = pixel_cross_entropy(&logits, &labels).unwrap();
        assert!((ce[0] - 0.7).abs() < 1e-12 && (ce[1] - 3.0).abs() < 1e-12);
        let conf = ConfidenceMap {
            patch_id: "p".into(),
            weights: Grid::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
        };
        let loss = mocl_loss(&logits, &labels, Some(&conf)).unwrap().loss;
        assert!((loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let (mut logits, labels, conf) = random_case(4, 2, 2);
        logits.data[5] = f64::NAN;
        assert!(matches!(
            mocl_loss(&logits, &labels, Some(&conf)),
            Err(Error::NonFinite(_))
        ));
        logits.data[5] = f64::INFINITY;
        assert!(pixel_cross_entropy(&logits, &labels).is_err());
    }
}

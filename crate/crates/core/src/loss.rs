//! Margin loss on capsule lengths, the masked reconstruction decoder, and
//! their weighted sum.

use crate::tensor::{Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("loss config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
    pub reconstruction_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
            reconstruction_scale: 0.0005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(LossError::Config(format!(
                "need 0 <= m_minus < m_plus <= 1, got m_minus={} m_plus={}",
                self.m_minus, self.m_plus
            )));
        }
        if !(0.0..).contains(&self.reconstruction_scale) || !(0.0..).contains(&self.lambda_down) {
            return Err(LossError::Config(
                "reconstruction_scale and lambda_down must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl DecoderConfig {
    pub fn for_image(pixels: usize) -> Self {
        Self {
            hidden: vec![512, 1024],
            output_dim: pixels,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, first to last.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One dense layer of the decoder: `weight` is `[in, out]`, `bias` is `[out]`.
#[derive(Clone, Copy)]
pub struct DenseLayer<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::Label { label, classes }),
        None => Ok(()),
    }
}

/// Batch-mean margin loss on capsule lengths `[B, M]`.
///
/// Per example: `Σ_k T_k·max(0, m⁺−‖v_k‖)² + λ·(1−T_k)·max(0, ‖v_k‖−m⁻)²`.
/// Capsules at index `num_real_classes` and above (the none-of-the-above
/// capsule) are never targets.
pub fn margin_loss<'t, T: Scalar>(
    lengths: Var<'t, T>,
    labels: &[usize],
    num_real_classes: usize,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    let lv = lengths.value();
    let &[bsz, m] = lv.shape() else {
        return Err(TensorError::Dimension {
            op: "margin_loss",
            detail: format!("lengths must be [B, M], got {:?}", lv.shape()),
        }
        .into());
    };
    if labels.len() != bsz || num_real_classes > m {
        return Err(TensorError::Dimension {
            op: "margin_loss",
            detail: format!(
                "{} labels / {num_real_classes} classes for lengths {:?}",
                labels.len(),
                lv.shape()
            ),
        }
        .into());
    }
    check_labels(labels, num_real_classes)?;
    let (mp, mm, lam) = (
        T::from_f64(cfg.m_plus),
        T::from_f64(cfg.m_minus),
        T::from_f64(cfg.lambda_down),
    );
    let zero = T::zero();
    let mut total = zero;
    let mut grad = vec![zero; bsz * m];
    let two = T::from_f64(2.0);
    let inv_b = T::one() / T::from_f64(bsz as f64);
    for (b, row) in lv.data().chunks(m).enumerate() {
        for (k, &l) in row.iter().enumerate() {
            if k == labels[b] {
                let gap = (mp - l).max(zero);
                total = total + gap * gap;
                grad[b * m + k] = -two * gap * inv_b;
            } else {
                let gap = (l - mm).max(zero);
                total = total + lam * gap * gap;
                grad[b * m + k] = two * lam * gap * inv_b;
            }
        }
    }
    let out = Tensor::scalar(total * inv_b);
    let shape = lv.shape().to_vec();
    Ok(lengths.tape().record("margin_loss", out, &[lengths], move |g, _| {
        let scale = g.data()[0];
        let data = grad.iter().map(|&x| x * scale).collect();
        vec![Some(Tensor::from_vec(shape.clone(), data).unwrap())]
    })?)
}

/// One-hot capsule mask `[B, M, D]` keeping capsule `targets[b]` of example `b`.
pub fn capsule_mask<T: Scalar>(targets: &[usize], num_capsules: usize, dim: usize) -> Tensor<T> {
    let mut mask = Tensor::zeros([targets.len(), num_capsules, dim]);
    for (b, &t) in targets.iter().enumerate() {
        let at = (b * num_capsules + t) * dim;
        mask.data_mut()[at..at + dim].iter_mut().for_each(|x| *x = T::one());
    }
    mask
}

/// Runs the decoder on the activity of capsule `targets[b]` alone (all
/// other capsules zeroed). Hidden layers use ReLU, the output sigmoid.
pub fn decode_masked<'t, T: Scalar>(
    capsules: Var<'t, T>,
    targets: &[usize],
    decoder: &[DenseLayer<'t, T>],
) -> Result<Var<'t, T>> {
    let shape = capsules.shape();
    let &[bsz, m, d] = shape.as_slice() else {
        return Err(TensorError::Dimension {
            op: "decode_masked",
            detail: format!("capsules must be [B, M, D], got {shape:?}"),
        }
        .into());
    };
    if targets.len() != bsz {
        return Err(TensorError::Dimension {
            op: "decode_masked",
            detail: format!("{} targets for batch of {bsz}", targets.len()),
        }
        .into());
    }
    check_labels(targets, m)?;
    let mask = capsules.tape().constant(capsule_mask(targets, m, d));
    let mut h = capsules.mul(mask)?.reshape([bsz, m * d])?;
    for (i, layer) in decoder.iter().enumerate() {
        h = h.matmul(layer.weight)?.add_bias(layer.bias)?;
        h = if i + 1 == decoder.len() {
            h.sigmoid()?
        } else {
            h.relu()?
        };
    }
    Ok(h)
}

/// Masked reconstruction and its batch-mean sum-of-squares loss against
/// `images` (`[B, P]`, values in `[0, 1]`).
pub fn masked_reconstruction<'t, T: Scalar>(
    capsules: Var<'t, T>,
    targets: &[usize],
    decoder: &[DenseLayer<'t, T>],
    images: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let recon = decode_masked(capsules, targets, decoder)?;
    let loss = sum_squared_error(recon, images)?;
    Ok((recon, loss))
}

/// `Σ (a − b)² / B` for `[B, ..]` operands.
pub fn sum_squared_error<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let bsz = a.shape().first().copied().unwrap_or(1).max(1);
    let diff = a.sub(b)?;
    Ok(diff.mul(diff)?.sum()?.scale(T::one() / T::from_f64(bsz as f64))?)
}

/// `margin + reconstruction_scale · reconstruction`.
pub fn total_loss<'t, T: Scalar>(
    margin: Var<'t, T>,
    reconstruction: Var<'t, T>,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    Ok(margin.add(reconstruction.scale(T::from_f64(cfg.reconstruction_scale))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn lengths_of(norms: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, norms.len()], norms.to_vec()).unwrap()
    }

    fn margin(norms: &[f64], label: usize) -> f64 {
        let tape = Tape::new();
        let l = tape.constant(lengths_of(norms));
        margin_loss(l, &[label], norms.len(), &LossConfig::default())
            .unwrap()
            .value()
            .item()
            .unwrap()
    }

    #[test]
    fn margin_loss_hand_values() {
        let mut norms = [0.1; 10];
        norms[3] = 0.9;
        assert_eq!(margin(&norms, 3), 0.0);
        assert!((margin(&[0.0; 10], 3) - 0.81).abs() < 1e-12);
        assert!((margin(&[1.0; 10], 0) - 3.645).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_rejects_bad_label() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(lengths_of(&[0.5; 11]));
        // 11 capsules but only 10 real classes: label 10 is the NOTA slot.
        let err = margin_loss(l, &[10], 10, &LossConfig::default()).unwrap_err();
        assert_eq!(err, LossError::Label { label: 10, classes: 10 });
    }

    #[test]
    fn nota_capsule_is_always_negative() {
        let tape = Tape::<f64>::new();
        let mut norms = vec![0.1; 11];
        norms[2] = 0.9;
        norms[10] = 0.6;
        let l = tape.constant(lengths_of(&norms));
        let loss = margin_loss(l, &[2], 10, &LossConfig::default()).unwrap();
        let expected = 0.5 * (0.6f64 - 0.1).powi(2);
        assert!((loss.value().item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::scalar(1.0));
        let r = tape.constant(Tensor::scalar(1000.0));
        let cfg = LossConfig::default();
        assert!((total_loss(m, r, &cfg).unwrap().value().item().unwrap() - 1.5).abs() < 1e-12);
        let cfg0 = LossConfig {
            reconstruction_scale: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(m, r, &cfg0).unwrap().value().item().unwrap(), 1.0);
        let low = LossConfig {
            reconstruction_scale: 0.0001,
            ..cfg
        };
        assert!((total_loss(m, r, &low).unwrap().value().item().unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            m_minus: 0.95,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoder_layer_sizes() {
        let d = DecoderConfig::for_image(784);
        assert_eq!(d.layer_sizes(160), vec![(160, 512), (512, 1024), (1024, 784)]);
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

/// Trained batch-normalization statistics and affine parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub mu: Vec<T>,
    pub sigma_sq: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let n = self.mu.len();
        if n != channels
            || self.sigma_sq.len() != n
            || self.gamma.len() != n
            || self.beta.len() != n
        {
            return Err(Error::dim(format!(
                "batch norm has {n} channels, layer has {channels}"
            )));
        }
        if self.sigma_sq.iter().any(|&s| s < T::zero()) {
            return Err(Error::invalid("negative variance in batch norm"));
        }
        Ok(())
    }

    fn inv_std(&self, c: usize) -> T {
        (self.sigma_sq[c] + self.epsilon).sqrt().recip()
    }
}

/// `y = gamma * (x - mu) / sqrt(sigma^2 + eps) + beta`, per channel.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, bn: &BnParams<T>) -> Result<Tensor<T>> {
    bn.check(x.channels())?;
    let n = x.plane_len();
    let mut out = x.clone();
    for c in 0..x.channels() {
        let s = bn.gamma[c] * bn.inv_std(c);
        out.data_mut()[c * n..(c + 1) * n]
            .iter_mut()
            .for_each(|v| *v = (*v - bn.mu[c]) * s + bn.beta[c]);
    }
    Ok(out)
}

/// Folds a BN layer into the preceding CONV (`weights: out x K`, one bias per output).
pub fn fold_bn<T: Scalar>(
    weights: &Matrix<T>,
    bias: &[T],
    bn: &BnParams<T>,
) -> Result<(Matrix<T>, Vec<T>)> {
    bn.check(weights.rows())?;
    if bias.len() != weights.rows() {
        return Err(Error::dim("bias length differs from output channels"));
    }
    let mut w = weights.clone();
    let k = w.cols();
    let mut b = Vec::with_capacity(bias.len());
    for c in 0..weights.rows() {
        let s = bn.gamma[c] * bn.inv_std(c);
        w.data_mut()[c * k..(c + 1) * k].iter_mut().for_each(|v| *v *= s);
        b.push((bias[c] - bn.mu[c]) * s + bn.beta[c]);
    }
    Ok((w, b))
}

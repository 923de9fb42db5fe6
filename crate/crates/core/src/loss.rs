//! Transducer negative log-likelihood over the `T x (U+1)` alignment lattice.
//!
//! Log-probabilities are laid out `[t][u][k]` with the blank symbol at the
//! last class index. A path leaves the lattice by emitting blank at
//! `(T-1, U)`, so every path has exactly `T` blanks and `U` labels.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Largest `T + U` accepted by [`brute_force_loss`].
pub const MAX_ENUMERATION: usize = 12;

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Forward/backward log-sums for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub frames: usize,
    pub labels: usize,
    pub classes: usize,
    /// `[T][U+1]`, row-major.
    pub alpha: Vec<f64>,
    /// `[T][U+1]`, row-major.
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
}

impl Lattice {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * (self.labels + 1) + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * (self.labels + 1) + u]
    }
}

fn validate(frames: usize, n_labels: usize, classes: usize, labels: &[usize], len: usize) -> Result<()> {
    if frames < 1 {
        return Err(Error::Lattice("need at least one frame".into()));
    }
    if classes < 2 {
        return Err(Error::Lattice("need at least one label class plus blank".into()));
    }
    if labels.len() != n_labels {
        return Err(Error::Lattice(format!(
            "{} labels given for U = {n_labels}",
            labels.len()
        )));
    }
    let vocab = classes - 1;
    if let Some(&label) = labels.iter().find(|&&l| l >= vocab) {
        return Err(Error::LabelOutOfRange { label, vocab });
    }
    if len != frames * (n_labels + 1) * classes {
        return Err(Error::Lattice(format!(
            "{len} log-probabilities for a {frames}x{}x{classes} lattice",
            n_labels + 1
        )));
    }
    Ok(())
}

/// Run the alpha and beta recursions.
pub fn lattice(log_probs: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<Lattice> {
    let n_labels = labels.len();
    validate(frames, n_labels, classes, labels, log_probs.len())?;
    let u1 = n_labels + 1;
    let blank = classes - 1;
    let lp = |t: usize, u: usize, k: usize| log_probs[(t * u1 + u) * classes + k];

    let mut alpha = vec![f64::NEG_INFINITY; frames * u1];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = log_add(a, alpha[(t - 1) * u1 + u] + lp(t - 1, u, blank));
            }
            if u > 0 {
                a = log_add(a, alpha[t * u1 + u - 1] + lp(t, u - 1, labels[u - 1]));
            }
            alpha[t * u1 + u] = a;
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let b = if t == frames - 1 && u == n_labels {
                lp(t, u, blank)
            } else {
                let mut b = f64::NEG_INFINITY;
                if t + 1 < frames {
                    b = log_add(b, beta[(t + 1) * u1 + u] + lp(t, u, blank));
                }
                if u < n_labels {
                    b = log_add(b, beta[t * u1 + u + 1] + lp(t, u, labels[u]));
                }
                b
            };
            beta[t * u1 + u] = b;
        }
    }

    let log_likelihood = alpha[(frames - 1) * u1 + n_labels] + lp(frames - 1, n_labels, blank);
    Ok(Lattice {
        frames,
        labels: n_labels,
        classes,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Loss and its gradient with respect to every log-probability, on raw slices.
pub(crate) fn lattice_loss(
    log_probs: &[f64],
    frames: usize,
    n_labels: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if labels.len() != n_labels {
        return Err(Error::Lattice("label count mismatch".into()));
    }
    let lat = lattice(log_probs, frames, classes, labels)?;
    let log_z = lat.log_likelihood;
    if log_z == f64::NEG_INFINITY {
        return Err(Error::Lattice("no alignment has nonzero probability".into()));
    }
    let u1 = n_labels + 1;
    let blank = classes - 1;
    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..frames {
        for u in 0..u1 {
            let a = lat.alpha(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            let base = (t * u1 + u) * classes;
            let next_blank = if t + 1 < frames {
                Some(lat.beta(t + 1, u))
            } else if u == n_labels {
                Some(0.0)
            } else {
                None
            };
            if let Some(b) = next_blank {
                grad[base + blank] = -(a + log_probs[base + blank] + b - log_z).exp();
            }
            if let Some(&k) = labels.get(u) {
                grad[base + k] = -(a + log_probs[base + k] + lat.beta(t, u + 1) - log_z).exp();
            }
        }
    }
    Ok((-log_z, grad))
}

fn lattice_dims(log_probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    match *log_probs.shape() {
        [frames, u1, classes] if u1 == labels.len() + 1 => Ok((frames, classes)),
        ref other => Err(Error::Lattice(format!(
            "expected [T, {}, V+1] log-probabilities, got {other:?}",
            labels.len() + 1
        ))),
    }
}

/// Negative log-likelihood and `d nll / d log_probs` for a `[T, U+1, V+1]`
/// tensor of log-softmax outputs.
pub fn rnnt_loss(log_probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (frames, classes) = lattice_dims(log_probs, labels)?;
    let (nll, grad) = lattice_loss(log_probs.data(), frames, labels.len(), classes, labels)?;
    let grad = Tensor::from_parts(log_probs.shape().to_vec(), grad, log_probs.dtype());
    Ok((nll, grad))
}

/// Number of monotone alignments through a `T x (U+1)` lattice.
pub fn path_count(frames: usize, n_labels: usize) -> u128 {
    if frames == 0 {
        return 0;
    }
    // C(T-1+U, U)
    let n = (frames - 1 + n_labels) as u128;
    let k = n_labels as u128;
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Exhaustive log-sum-exp over every alignment path.
pub fn brute_force_loss(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (frames, classes) = lattice_dims(log_probs, labels)?;
    validate(frames, labels.len(), classes, labels, log_probs.numel())?;
    if frames + labels.len() > MAX_ENUMERATION {
        return Err(Error::TooLarge(frames + labels.len()));
    }
    let u1 = labels.len() + 1;
    let blank = classes - 1;
    let data = log_probs.data();
    let lp = |t: usize, u: usize, k: usize| data[(t * u1 + u) * classes + k];

    let mut total = f64::NEG_INFINITY;
    // (t, u, accumulated log-probability)
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if u < labels.len() {
            stack.push((t, u + 1, acc + lp(t, u, labels[u])));
        }
        let with_blank = acc + lp(t, u, blank);
        if t + 1 < frames {
            stack.push((t + 1, u, with_blank));
        } else if u == labels.len() {
            total = log_add(total, with_blank);
        }
    }
    Ok(-total)
}

/// Uniform log-probabilities over `classes` symbols.
pub fn uniform_log_probs(frames: usize, n_labels: usize, classes: usize) -> Tensor {
    Tensor::full(&[frames, n_labels + 1, classes], -(classes as f64).ln(), DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_lattice(seed: u64, frames: usize, n_labels: usize, classes: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..frames * (n_labels + 1) {
            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            data.extend(logits.iter().map(|l| l - lse));
        }
        Tensor::new(vec![frames, n_labels + 1, classes], data, DType::F64).unwrap()
    }

    #[test]
    fn blank_only_path_when_no_labels() {
        let lp = random_lattice(1, 4, 0, 3);
        let (nll, _) = rnnt_loss(&lp, &[]).unwrap();
        let expected: f64 = -(0..4).map(|t| lp.data()[t * 3 + 2]).sum::<f64>();
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn single_frame_single_label() {
        let lp = random_lattice(2, 1, 1, 3);
        let (nll, _) = rnnt_loss(&lp, &[1]).unwrap();
        let d = lp.data();
        let expected = -d[1] - d[3 + 2];
        assert!((nll - expected).abs() < 1e-12);
        assert!((brute_force_loss(&lp, &[1]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(path_count(1, 1), 1);
    }

    #[test]
    fn alpha_beta_agree() {
        let lp = random_lattice(3, 4, 3, 5);
        let labels = [0, 3, 1];
        let lat = lattice(lp.data(), 4, 5, &labels).unwrap();
        assert_eq!(lat.alpha(0, 0), 0.0);
        assert!((lat.log_likelihood - lat.beta(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn occupancy_sums_to_path_length() {
        let lp = random_lattice(4, 3, 2, 4);
        let (_, grad) = rnnt_loss(&lp, &[2, 0]).unwrap();
        let occupancy: f64 = -grad.data().iter().sum::<f64>();
        assert!((occupancy - 5.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lp = random_lattice(5, 2, 1, 3);
        assert!(matches!(
            rnnt_loss(&lp, &[2]),
            Err(Error::LabelOutOfRange { label: 2, vocab: 2 })
        ));
        assert!(rnnt_loss(&lp, &[0, 1]).is_err());
        let big = uniform_log_probs(8, 5, 3);
        assert!(matches!(brute_force_loss(&big, &[0; 5]), Err(Error::TooLarge(13))));
    }

    #[test]
    fn negative_infinity_is_zero_probability() {
        let mut lp = random_lattice(6, 2, 1, 3).into_data();
        // forbid emitting the label at t = 0
        lp[0] = f64::NEG_INFINITY;
        let lp = Tensor::new(vec![2, 2, 3], lp, DType::F64).unwrap();
        let (nll, grad) = rnnt_loss(&lp, &[0]).unwrap();
        assert!(nll.is_finite());
        assert_eq!(grad.data()[0], 0.0);
        assert!((nll - brute_force_loss(&lp, &[0]).unwrap()).abs() < 1e-12);
    }
}

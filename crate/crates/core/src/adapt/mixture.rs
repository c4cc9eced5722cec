//! Softmax-normalized layer mixtures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learned mixture logits over the `n_blocks + 1` encoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub raw: Vec<f32>,
}

impl LayerWeights {
    /// Equal logits, i.e. the arithmetic mean of all layers.
    pub fn uniform(n_layers: usize) -> Self {
        LayerWeights { raw: vec![0.0; n_layers] }
    }

    /// All mass (up to softmax saturation) on `layer`.
    pub fn one_hot(n_layers: usize, layer: usize) -> Self {
        let mut raw = vec![0.0; n_layers];
        raw[layer] = 30.0;
        LayerWeights { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Softmax of the logits, computed in f64.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.raw.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = self.raw.iter().map(|&r| (f64::from(r) - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

fn check<F>(layers: &[Vec<F>], lw: &LayerWeights) -> Result<usize> {
    if layers.len() != lw.len() || layers.is_empty() {
        return Err(Error::Schema(format!("{} layers but {} mixture weights", layers.len(), lw.len())));
    }
    let n = layers[0].len();
    if layers.iter().any(|l| l.len() != n) {
        return Err(Error::Schema("layers differ in shape".into()));
    }
    Ok(n)
}

/// `Σ_i softmax(raw)_i · layers[i]`, elementwise.
pub fn weighted_features<F: Scalar>(layers: &[Vec<F>], lw: &LayerWeights) -> Result<Vec<F>> {
    let n = check(layers, lw)?;
    let w = lw.normalized();
    let mut out = vec![F::zero(); n];
    for (layer, &wi) in layers.iter().zip(&w) {
        let wi = F::from_f64_lossy(wi);
        for (o, &x) in out.iter_mut().zip(layer) {
            *o = *o + wi * x;
        }
    }
    Ok(out)
}

/// Gradients of [`weighted_features`] given `dout`: one tensor per layer and
/// one value per mixture logit (through the softmax Jacobian).
pub fn weighted_features_backward<F: Scalar>(
    layers: &[Vec<F>],
    lw: &LayerWeights,
    dout: &[F],
) -> Result<(Vec<Vec<F>>, Vec<f64>)> {
    let n = check(layers, lw)?;
    if dout.len() != n {
        return Err(Error::Schema("gradient shape differs from the layers".into()));
    }
    let w = lw.normalized();
    let dlayers = w
        .iter()
        .map(|&wi| {
            let wi = F::from_f64_lossy(wi);
            dout.iter().map(|&d| wi * d).collect()
        })
        .collect();
    let dw: Vec<f64> = layers
        .iter()
        .map(|l| l.iter().zip(dout).map(|(&x, &d)| x.to_f64_lossy() * d.to_f64_lossy()).sum())
        .collect();
    let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let draw = w.iter().zip(&dw).map(|(&wi, &g)| wi * (g - mean)).collect();
    Ok((dlayers, draw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers() -> Vec<Vec<f64>> {
        vec![vec![1.0, -2.0, 0.5], vec![3.0, 0.0, -1.0], vec![0.25, 4.0, 2.0]]
    }

    #[test]
    fn saturated_weights_select_a_layer() {
        let l = layers();
        for j in 0..3 {
            let out = weighted_features(&l, &LayerWeights::one_hot(3, j)).unwrap();
            for (a, b) in out.iter().zip(&l[j]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_weights_average() {
        let out = weighted_features(&layers(), &LayerWeights::uniform(3)).unwrap();
        assert!((out[0] - 4.25 / 3.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ln3_versus_zero_is_three_to_one() {
        let lw = LayerWeights { raw: vec![3f32.ln(), 0.0] };
        let w = lw.normalized();
        assert!((w[0] - 0.75).abs() < 1e-7 && (w[1] - 0.25).abs() < 1e-7);
        let out = weighted_features(&[vec![4.0f64], vec![8.0]], &lw).unwrap();
        assert!((out[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(weighted_features(&layers(), &LayerWeights::uniform(2)), Err(Error::Schema(_))));
    }

    #[test]
    fn logit_gradient_matches_differences() {
        let l = layers();
        let lw = LayerWeights { raw: vec![0.3, -0.7, 1.1] };
        let dout = vec![0.5, -1.0, 2.0];
        let f = |lw: &LayerWeights| -> f64 {
            weighted_features(&l, lw).unwrap().iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let (_, draw) = weighted_features_backward(&l, &lw, &dout).unwrap();
        for i in 0..3 {
            let h = 1e-3f32;
            let mut up = lw.clone();
            up.raw[i] += h;
            let mut down = lw.clone();
            down.raw[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * f64::from(h));
            assert!((fd - draw[i]).abs() < 1e-4, "{i}: {fd} vs {}", draw[i]);
        }
    }

    proptest::proptest! {
        #[test]
        fn weights_are_a_distribution(raw in proptest::collection::vec(-50f32..50.0, 1..14)) {
            let w = LayerWeights { raw }.normalized();
            proptest::prop_assert!(w.iter().all(|&x| x >= 0.0));
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

//! Two-layer fully connected decoders over a flat parameter slice.

use crate::error::{Result, SlamError};
use crate::math::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl DecoderDims {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    #[inline]
    pub fn w1(&self) -> usize {
        0
    }
    #[inline]
    pub fn b1(&self) -> usize {
        self.hidden * self.input
    }
    #[inline]
    pub fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    #[inline]
    pub fn b2(&self) -> usize {
        self.w2() + self.output * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Hyperbolic tangent, range [-1, 1] (TSDF head).
    Tanh,
    /// Logistic sigmoid, range [0, 1] (color head).
    Sigmoid,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Forward pass. `hidden` receives the post-rectifier activations (needed by
/// the backward pass); `out` receives the activated outputs.
pub fn decoder_forward<T: Real>(
    params: &[T],
    dims: &DecoderDims,
    input: &[T],
    act: OutputActivation,
    hidden: &mut [T],
    out: &mut [T],
) -> Result<()> {
    if input.len() != dims.input {
        return Err(SlamError::invalid(format!(
            "decoder input dimension {} != expected {}",
            input.len(),
            dims.input
        )));
    }
    debug_assert_eq!(params.len(), dims.param_count());
    debug_assert_eq!(hidden.len(), dims.hidden);
    debug_assert_eq!(out.len(), dims.output);

    let w1 = &params[dims.w1()..dims.b1()];
    let b1 = &params[dims.b1()..dims.w2()];
    for h in 0..dims.hidden {
        let row = &w1[h * dims.input..(h + 1) * dims.input];
        let mut acc = b1[h];
        for i in 0..dims.input {
            acc += row[i] * input[i];
        }
        hidden[h] = if acc > T::zero() { acc } else { T::zero() };
    }
    let w2 = &params[dims.w2()..dims.b2()];
    let b2 = &params[dims.b2()..];
    for o in 0..dims.output {
        let row = &w2[o * dims.hidden..(o + 1) * dims.hidden];
        let mut acc = b2[o];
        for h in 0..dims.hidden {
            acc += row[h] * hidden[h];
        }
        out[o] = match act {
            OutputActivation::Tanh => acc.tanh(),
            OutputActivation::Sigmoid => sigmoid(acc),
        };
    }
    Ok(())
}

/// Backward pass. `d_out` is the adjoint of the *activated* output; gradients
/// are accumulated (`+=`) into `d_params` and `d_input` when provided.
/// `d_hidden` is caller-provided scratch of length `dims.hidden`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_backward<T: Real>(
    params: &[T],
    dims: &DecoderDims,
    input: &[T],
    hidden: &[T],
    out: &[T],
    act: OutputActivation,
    d_out: &[T],
    d_hidden: &mut [T],
    mut d_params: Option<&mut [T]>,
    mut d_input: Option<&mut [T]>,
) {
    // Adjoint of the pre-activation output (at most 3 wide).
    debug_assert!(dims.output <= 4);
    debug_assert_eq!(d_hidden.len(), dims.hidden);
    let mut d_raw = [T::zero(); 4];
    for o in 0..dims.output {
        let dact = match act {
            OutputActivation::Tanh => T::one() - out[o] * out[o],
            OutputActivation::Sigmoid => out[o] * (T::one() - out[o]),
        };
        d_raw[o] = d_out[o] * dact;
    }

    let w2 = &params[dims.w2()..dims.b2()];
    d_hidden.fill(T::zero());
    for o in 0..dims.output {
        let row = &w2[o * dims.hidden..(o + 1) * dims.hidden];
        for h in 0..dims.hidden {
            d_hidden[h] += row[h] * d_raw[o];
        }
    }
    if let Some(dp) = d_params.as_deref_mut() {
        let (w2_off, b2_off) = (dims.w2(), dims.b2());
        for o in 0..dims.output {
            for h in 0..dims.hidden {
                dp[w2_off + o * dims.hidden + h] += d_raw[o] * hidden[h];
            }
            dp[b2_off + o] += d_raw[o];
        }
    }

    // Rectifier mask: hidden holds post-relu values.
    for h in 0..dims.hidden {
        if hidden[h] <= T::zero() {
            d_hidden[h] = T::zero();
        }
    }

    let w1 = &params[dims.w1()..dims.b1()];
    if let Some(dp) = d_params.as_deref_mut() {
        let b1_off = dims.b1();
        for h in 0..dims.hidden {
            let dh = d_hidden[h];
            if dh == T::zero() {
                continue;
            }
            let row = h * dims.input;
            for i in 0..dims.input {
                dp[row + i] += dh * input[i];
            }
            dp[b1_off + h] += dh;
        }
    }
    if let Some(di) = d_input.as_deref_mut() {
        for h in 0..dims.hidden {
            let dh = d_hidden[h];
            if dh == T::zero() {
                continue;
            }
            let row = &w1[h * dims.input..(h + 1) * dims.input];
            for i in 0..dims.input {
                di[i] += row[i] * dh;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_activation_of_zero() {
        let dims = DecoderDims {
            input: 4,
            hidden: 3,
            output: 1,
        };
        let params = vec![0.0f64; dims.param_count()];
        let input = vec![0.3, -0.5, 0.9, 0.1];
        let mut hidden = vec![0.0; 3];
        let mut out = vec![0.0; 1];
        decoder_forward(&params, &dims, &input, OutputActivation::Tanh, &mut hidden, &mut out)
            .unwrap();
        assert_eq!(out[0], 0.0);

        let dims3 = DecoderDims {
            input: 4,
            hidden: 3,
            output: 3,
        };
        let params3 = vec![0.0f64; dims3.param_count()];
        let mut out3 = vec![0.0; 3];
        decoder_forward(
            &params3,
            &dims3,
            &input,
            OutputActivation::Sigmoid,
            &mut hidden,
            &mut out3,
        )
        .unwrap();
        for o in out3 {
            assert!((o - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let dims = DecoderDims {
            input: 4,
            hidden: 3,
            output: 1,
        };
        let params = vec![0.0f64; dims.param_count()];
        let mut hidden = vec![0.0; 3];
        let mut out = vec![0.0; 1];
        assert!(decoder_forward(
            &params,
            &dims,
            &[1.0, 2.0],
            OutputActivation::Tanh,
            &mut hidden,
            &mut out
        )
        .is_err());
    }

    /// Straightforward matrix-multiply oracle for a random small network.
    #[test]
    fn matches_dense_layer_oracle() {
        let dims = DecoderDims {
            input: 5,
            hidden: 4,
            output: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<f64> = (0..dims.param_count())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut hidden = vec![0.0; 4];
        let mut out = vec![0.0; 3];
        decoder_forward(&params, &dims, &input, OutputActivation::Sigmoid, &mut hidden, &mut out)
            .unwrap();

        let w1 = &params[0..20];
        let b1 = &params[20..24];
        let w2 = &params[24..36];
        let b2 = &params[36..39];
        for o in 0..3 {
            let mut acc = b2[o];
            for h in 0..4 {
                let mut pre = b1[h];
                for i in 0..5 {
                    pre += w1[h * 5 + i] * input[i];
                }
                acc += w2[o * 4 + h] * pre.max(0.0);
            }
            let oracle = 1.0 / (1.0 + (-acc).exp());
            assert!((out[o] - oracle).abs() < 1e-6 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dims = DecoderDims {
            input: 6,
            hidden: 5,
            output: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params: Vec<f64> = (0..dims.param_count())
            .map(|_| rng.random_range(-0.7..0.7))
            .collect();
        let input: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seed: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |params: &[f64], input: &[f64]| -> f64 {
            let mut hidden = vec![0.0; 5];
            let mut out = vec![0.0; 2];
            decoder_forward(params, &dims, input, OutputActivation::Tanh, &mut hidden, &mut out)
                .unwrap();
            out.iter().zip(&seed).map(|(o, s)| o * s).sum()
        };

        let mut hidden = vec![0.0; 5];
        let mut out = vec![0.0; 2];
        decoder_forward(&params, &dims, &input, OutputActivation::Tanh, &mut hidden, &mut out)
            .unwrap();
        let mut d_params = vec![0.0; dims.param_count()];
        let mut d_input = vec![0.0; 6];
        let mut d_hidden = vec![0.0; 5];
        decoder_backward(
            &params,
            &dims,
            &input,
            &hidden,
            &out,
            OutputActivation::Tanh,
            &seed,
            &mut d_hidden,
            Some(&mut d_params),
            Some(&mut d_input),
        );

        let h = 1e-6;
        for k in 0..dims.param_count() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp[k] += h;
            pm[k] -= h;
            let fd = (eval(&pp, &input) - eval(&pm, &input)) / (2.0 * h);
            assert!(
                (d_params[k] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "param {k}: {} vs {fd}",
                d_params[k]
            );
        }
        for k in 0..6 {
            let mut ip = input.clone();
            let mut im = input.clone();
            ip[k] += h;
            im[k] -= h;
            let fd = (eval(&params, &ip) - eval(&params, &im)) / (2.0 * h);
            assert!(
                (d_input[k] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "input {k}: {} vs {fd}",
                d_input[k]
            );
        }
    }
}

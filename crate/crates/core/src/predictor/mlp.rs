use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};
use crate::numerics::{
    gelu_backward, gelu_forward, layernorm_backward, layernorm_forward, matmul, matmul_nt,
    matmul_tn, LayerNormCache, Matrix,
};
use crate::rng::{substream, Domain};

/// Widths and depth of the residual MLP.
///
/// `layers` counts weight matrices: one input projection, `layers − 2`
/// residual hidden layers and one output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(embed_dim: usize, hidden: usize, layers: usize) -> Self {
        ModelDims {
            input: embed_dim,
            hidden,
            output: embed_dim,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 {
            return Err(PamError::config("hidden", "model widths must be positive"));
        }
        if self.output < 2 {
            return Err(PamError::config("embed_dim", "output layer norm needs width >= 2"));
        }
        if self.layers < 2 {
            return Err(PamError::config("layers", "need at least input and output layers"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`, applied as `x · W`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        out.add_row_vector(&self.bias);
        Ok(out)
    }
}

/// All learnable parameters of the predictor. The same type doubles as the
/// gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: ModelDims,
    pub input_layer: Dense,
    pub residual_layers: Vec<Dense>,
    pub output_layer: Dense,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

fn xavier(rows: usize, cols: usize, seed: u64, layer: u64) -> Dense {
    let mut rng = substream(seed, Domain::Init, layer);
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Dense {
        weight: Matrix::from_vec(rows, cols, data).expect("sized by construction"),
        bias: vec![0.0; cols],
    }
}

/// Glorot-uniform weights, zero biases, identity layer norm.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<MlpParams> {
    dims.validate()?;
    let residual_layers = (0..dims.layers - 2)
        .map(|l| xavier(dims.hidden, dims.hidden, seed, 1 + l as u64))
        .collect();
    Ok(MlpParams {
        dims,
        input_layer: xavier(dims.input, dims.hidden, seed, 0),
        residual_layers,
        output_layer: xavier(dims.hidden, dims.output, seed, dims.layers as u64 - 1),
        ln_gain: vec![1.0; dims.output],
        ln_bias: vec![0.0; dims.output],
    })
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    input: Matrix,
    /// Pre-activation and post-activation of the input and residual layers.
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    norm: LayerNormCache,
}

impl MlpParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            dims: self.dims,
            input_layer: self.input_layer.zeros_like(),
            residual_layers: self.residual_layers.iter().map(Dense::zeros_like).collect(),
            output_layer: self.output_layer.zeros_like(),
            ln_gain: vec![0.0; self.ln_gain.len()],
            ln_bias: vec![0.0; self.ln_bias.len()],
        }
    }

    /// Flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.input_layer.weight.as_slice(), &self.input_layer.bias];
        for l in &self.residual_layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.output_layer.weight.as_slice());
        out.push(&self.output_layer.bias);
        out.push(&self.ln_gain);
        out.push(&self.ln_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.input_layer.weight.as_mut_slice(),
            &mut self.input_layer.bias,
        ];
        for l in &mut self.residual_layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.output_layer.weight.as_mut_slice());
        out.push(&mut self.output_layer.bias);
        out.push(&mut self.ln_gain);
        out.push(&mut self.ln_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dims.input {
            return Err(PamError::shape(
                "predictor forward",
                format!("input width {} but model expects {}", x.cols(), self.dims.input),
            ));
        }
        Ok(())
    }

    /// Batched forward pass, one input per row.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_cache(x)?.0)
    }

    /// Forward pass for a single embedding.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&m)?.into_vec())
    }

    pub fn forward_with_cache(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.dims.layers - 1);
        let mut post = Vec::with_capacity(self.dims.layers - 1);
        let a = self.input_layer.affine(x)?;
        post.push(gelu_forward(&a));
        pre.push(a);
        for layer in &self.residual_layers {
            let h = post.last().expect("input layer output");
            let a = layer.affine(h)?;
            let mut next = gelu_forward(&a);
            next.add_assign(h);
            pre.push(a);
            post.push(next);
        }
        let z = self.output_layer.affine(post.last().expect("hidden output"))?;
        let (y, norm) = layernorm_forward(&z, &self.ln_gain, &self.ln_bias)?;
        Ok((
            y,
            ForwardCache {
                input: x.clone(),
                pre,
                post,
                norm,
            },
        ))
    }

    /// Gradients of a scalar loss given its gradient `d_out` with respect to
    /// the batched output.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<MlpParams> {
        let mut grads = self.zeros_like();
        let ln = layernorm_backward(d_out, &self.ln_gain, &cache.norm);
        grads.ln_gain = ln.gain;
        grads.ln_bias = ln.bias;
        let d_z = ln.input;

        let h_last = cache.post.last().expect("hidden output");
        grads.output_layer.weight = matmul_tn(h_last, &d_z)?;
        grads.output_layer.bias = d_z.column_sums();
        let mut d_h = matmul_nt(&d_z, &self.output_layer.weight)?;

        for (idx, layer) in self.residual_layers.iter().enumerate().rev() {
            // Layer idx maps post[idx] to post[idx + 1] through pre[idx + 1].
            let d_a = gelu_backward(&cache.pre[idx + 1], &d_h);
            grads.residual_layers[idx].weight = matmul_tn(&cache.post[idx], &d_a)?;
            grads.residual_layers[idx].bias = d_a.column_sums();
            d_h.add_assign(&matmul_nt(&d_a, &layer.weight)?);
        }

        let d_a = gelu_backward(&cache.pre[0], &d_h);
        grads.input_layer.weight = matmul_tn(&cache.input, &d_a)?;
        grads.input_layer.bias = d_a.column_sums();
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testing::{central_difference, max_rel_err, random_matrix};

    #[test]
    fn full_dims_have_about_2_36m_parameters() {
        let p = init_params(ModelDims::new(128, 1024, 4), 0).unwrap();
        let n = p.parameter_count() as f64;
        assert_eq!(p.parameter_count(), 2_362_752);
        assert!((n - 2.36e6).abs() / 2.36e6 < 0.02);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let dims = ModelDims::new(8, 16, 4);
        let a = init_params(dims, 5).unwrap();
        assert_eq!(a, init_params(dims, 5).unwrap());
        assert_ne!(a, init_params(dims, 6).unwrap());
        assert!(a.input_layer.bias.iter().all(|&b| b == 0.0));
        assert!(a.residual_layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(a.output_layer.bias.iter().all(|&b| b == 0.0));
        assert!(a.ln_gain.iter().all(|&g| g == 1.0));
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(a.input_layer.weight.as_slice().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn output_is_standardised_and_shaped() {
        let p = init_params(ModelDims::new(12, 20, 4), 1).unwrap();
        let x = random_matrix(5, 12, 2, 3.0);
        let y = p.forward_batch(&x).unwrap();
        assert_eq!(y.shape(), (5, 12));
        for row in y.row_iter() {
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batched_forward_matches_per_row() {
        let p = init_params(ModelDims::new(6, 10, 4), 3).unwrap();
        let x = random_matrix(7, 6, 4, 2.0);
        let batched = p.forward_batch(&x).unwrap();
        for r in 0..7 {
            let single = p.forward(x.row(r)).unwrap();
            for (a, b) in single.iter().zip(batched.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = init_params(ModelDims::new(6, 10, 3), 3).unwrap();
        assert!(matches!(p.forward(&[1.0; 5]), Err(PamError::Shape { .. })));
    }

    #[test]
    fn backward_matches_finite_differences_for_every_tensor() {
        let dims = ModelDims::new(5, 8, 4);
        let mut p = init_params(dims, 9).unwrap();
        // Non-trivial affine parameters so that their gradients are exercised.
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            let noise = random_matrix(1, t.len(), 100 + i as u64, 0.3);
            for (v, n) in t.iter_mut().zip(noise.as_slice()) {
                *v += n;
            }
        }
        let x = random_matrix(4, 5, 10, 1.5);
        let w = random_matrix(4, 5, 11, 1.0);
        let objective = |p: &MlpParams| -> f64 {
            let y = p.forward_batch(&x).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward_with_cache(&x).unwrap();
        let grads = p.backward(&cache, &w).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, an) in analytic.iter().enumerate() {
            let base = p.tensors()[ti].to_vec();
            let fd = central_difference(&base, 1e-5, |v| {
                let mut probe = p.clone();
                probe.tensors_mut()[ti].copy_from_slice(v);
                objective(&probe)
            });
            let err = max_rel_err(an, &fd);
            assert!(err < 1e-5, "tensor {ti}: rel err {err}");
        }
    }
}

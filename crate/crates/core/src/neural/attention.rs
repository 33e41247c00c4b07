use ndarray::{Array1, Array2};

use super::{add_outer, dot_t, matvec, ParamSet, TensorRef};

/// Additive attention with an optional conditioning input:
///
/// ```text
/// e_i = vᵀ tanh(W_h h_i + W_s s + W_c cv)
/// α   = softmax(e)
/// a   = Σ α_i h_i
/// ```
///
/// `w_c` has zero columns when conditioning is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_h: Array2<f64>,
    pub w_s: Array2<f64>,
    pub w_c: Array2<f64>,
    pub v: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionStep {
    /// `tanh(W_h h_i + W_s s + W_c cv)` per encoder position.
    pub activations: Vec<Array1<f64>>,
    pub weights: Array1<f64>,
    pub context: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(score_dim: usize, encoder_dim: usize, decoder_dim: usize, cond_dim: usize) -> Self {
        Self {
            w_h: Array2::zeros((score_dim, encoder_dim)),
            w_s: Array2::zeros((score_dim, decoder_dim)),
            w_c: Array2::zeros((score_dim, cond_dim)),
            v: Array1::zeros(score_dim),
        }
    }

    pub fn conditioned(&self) -> bool {
        self.w_c.ncols() > 0
    }

    /// `W_h h_i` for every encoder output; computed once per document.
    pub fn project_keys(&self, outputs: &[Array1<f64>]) -> Vec<Array1<f64>> {
        outputs.iter().map(|h| matvec(&self.w_h, h)).collect()
    }

    pub fn forward(
        &self,
        keys: &[Array1<f64>],
        outputs: &[Array1<f64>],
        state: &Array1<f64>,
        cond: Option<&Array1<f64>>,
    ) -> AttentionStep {
        let mut query = matvec(&self.w_s, state);
        if let (Some(cv), true) = (cond, self.conditioned()) {
            query += &matvec(&self.w_c, cv);
        }
        let activations: Vec<Array1<f64>> = keys.iter().map(|k| (k + &query).mapv_into(f64::tanh)).collect();
        let energies: Vec<f64> = activations.iter().map(|u| self.v.dot(u)).collect();
        let weights = Array1::from(softmax(&energies));
        let mut context = Array1::zeros(outputs[0].len());
        for (w, h) in weights.iter().zip(outputs) {
            context.scaled_add(*w, h);
        }
        AttentionStep {
            activations,
            weights,
            context,
        }
    }

    /// Backpropagates `d_context`. Gradients w.r.t. the projected keys and
    /// the encoder outputs are accumulated in place; returns `dL/ds`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        step: &AttentionStep,
        outputs: &[Array1<f64>],
        state: &Array1<f64>,
        cond: Option<&Array1<f64>>,
        d_context: &Array1<f64>,
        grads: &mut AttentionParams,
        d_keys: &mut [Array1<f64>],
        d_outputs: &mut [Array1<f64>],
    ) -> Array1<f64> {
        let alpha = &step.weights;
        let d_alpha: Vec<f64> = outputs.iter().map(|h| d_context.dot(h)).collect();
        for (i, d_out) in d_outputs.iter_mut().enumerate() {
            d_out.scaled_add(alpha[i], d_context);
        }
        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let mut d_query = Array1::zeros(self.w_s.nrows());
        for (i, u) in step.activations.iter().enumerate() {
            let de = alpha[i] * (d_alpha[i] - mean);
            grads.v.scaled_add(de, u);
            let da = (&self.v * de) * &u.mapv(|x| 1.0 - x * x);
            d_query += &da;
            d_keys[i] += &da;
        }
        add_outer(&mut grads.w_s, &d_query, state);
        if let (Some(cv), true) = (cond, self.conditioned()) {
            add_outer(&mut grads.w_c, &d_query, cv);
        }
        dot_t(&self.w_s, &d_query)
    }
}

pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ParamSet for AttentionParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef::matrix(format!("{prefix}.w_h"), &self.w_h));
        out.push(TensorRef::matrix(format!("{prefix}.w_s"), &self.w_s));
        out.push(TensorRef::matrix(format!("{prefix}.w_c"), &self.w_c));
        out.push(TensorRef::vector(format!("{prefix}.v"), &self.v));
    }

    fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w_h.as_slice_mut().expect("standard layout"));
        out.push(self.w_s.as_slice_mut().expect("standard layout"));
        out.push(self.w_c.as_slice_mut().expect("standard layout"));
        out.push(self.v.as_slice_mut().expect("standard layout"));
    }
}

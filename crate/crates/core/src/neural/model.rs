use ndarray::{concatenate, s, Array1, Axis};
use rand::Rng;

use super::{add_dot_t, add_outer, dot_t, matvec, AttentionStep, GruStep, ModelParams, ModelRng};
use crate::cdv::CdvStore;
use crate::corpus::Document;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::taxonomy::{Direction, Taxonomy};

/// Encoder outputs `h_1..h_N`, each `[forward; backward]` of width `2H`.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub outputs: Vec<Array1<f64>>,
}

/// An encoded document plus everything the decoder and the backward pass
/// need from the encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub state: EncoderState,
    /// `W_h h_i`, reused by every decoder step.
    pub keys: Vec<Array1<f64>>,
    pub initial_hidden: Array1<f64>,
    forward_steps: Vec<GruStep>,
    /// In processing order: entry `k` consumed token `N - 1 - k`.
    backward_steps: Vec<GruStep>,
    bridge_input: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    prev_row: usize,
    state: Array1<f64>,
    cond: Option<Array1<f64>>,
    pub attention: AttentionStep,
    input_mask: Option<Array1<f64>>,
    gru: GruStep,
    output_input: Array1<f64>,
    probs: Vec<f64>,
}

impl StepCache {
    /// Conditioning vector fed to attention at this step, if any.
    pub fn conditioning(&self) -> Option<&Array1<f64>> {
        self.cond.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Unmasked output scores over the union vocabulary.
    pub logits: Array1<f64>,
    /// Masked log-probabilities; `-inf` outside the level.
    pub log_probs: Vec<f64>,
    pub hidden: Array1<f64>,
    pub cache: StepCache,
}

#[derive(Debug, Clone)]
pub struct LossCache {
    encoded: Encoded,
    steps: Vec<StepCache>,
    targets: Vec<usize>,
}

impl LossCache {
    pub fn steps(&self) -> &[StepCache] {
        &self.steps
    }
}

/// Log-softmax restricted to `mask`; masked-out entries get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits for a mask of {}",
            logits.len(),
            mask.len()
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Data("level mask selects no class".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

fn dropout_mask(len: usize, rate: f64, rng: Option<&mut ModelRng>) -> Option<Array1<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array1::from_shape_fn(len, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn ensure_finite(values: &Array1<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

impl ModelParams {
    /// Runs both encoder directions and the bridge to the decoder state.
    /// Passing an RNG turns dropout on for the word inputs.
    pub fn encode(&self, words: &[Array1<f64>], mut dropout: Option<&mut ModelRng>) -> Result<Encoded> {
        let cfg = &self.config;
        if words.is_empty() {
            return Err(Error::Data("cannot encode an empty document".into()));
        }
        if let Some(w) = words.iter().find(|w| w.len() != cfg.word_dim) {
            return Err(Error::Shape(format!(
                "word vector of dimension {}, model expects {}",
                w.len(),
                cfg.word_dim
            )));
        }
        let inputs: Vec<Array1<f64>> = words
            .iter()
            .map(|w| match dropout_mask(w.len(), cfg.dropout, dropout.as_deref_mut()) {
                Some(mask) => w * &mask,
                None => w.clone(),
            })
            .collect();

        let h = cfg.hidden;
        let n = inputs.len();
        let mut forward_steps = Vec::with_capacity(n);
        let mut state = Array1::zeros(h);
        for x in &inputs {
            let step = self.encoder_forward.forward(x, &state);
            ensure_finite(&step.h, "forward encoder state")?;
            state = step.h.clone();
            forward_steps.push(step);
        }
        let mut backward_steps = Vec::with_capacity(n);
        let mut state = Array1::zeros(h);
        for x in inputs.iter().rev() {
            let step = self.encoder_backward.forward(x, &state);
            ensure_finite(&step.h, "backward encoder state")?;
            state = step.h.clone();
            backward_steps.push(step);
        }
        let outputs: Vec<Array1<f64>> = (0..n)
            .map(|t| concatenate![Axis(0), forward_steps[t].h, backward_steps[n - 1 - t].h])
            .collect();
        let keys = self.attention.project_keys(&outputs);
        let bridge_input = concatenate![Axis(0), forward_steps[n - 1].h, backward_steps[n - 1].h];
        let initial_hidden = (matvec(&self.bridge_w, &bridge_input) + &self.bridge_b).mapv_into(f64::tanh);
        Ok(Encoded {
            state: EncoderState { outputs },
            keys,
            initial_hidden,
            forward_steps,
            backward_steps,
            bridge_input,
        })
    }

    pub fn encode_tokens(
        &self,
        tokens: &[String],
        table: &EmbeddingTable,
        dropout: Option<&mut ModelRng>,
    ) -> Result<Encoded> {
        self.encode(&table.embed(tokens), dropout)
    }

    /// Attention over `encoded` from decoder state `hidden`.
    pub fn attend(&self, encoded: &Encoded, hidden: &Array1<f64>, cond: Option<&Array1<f64>>) -> AttentionStep {
        self.attention
            .forward(&encoded.keys, &encoded.state.outputs, hidden, cond)
    }

    /// One decoder step. `prev` is the global index of the previously
    /// emitted class, `None` for the start symbol.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        encoded: &Encoded,
        prev: Option<usize>,
        hidden: &Array1<f64>,
        mask: &[bool],
        cond: Option<&Array1<f64>>,
        dropout: Option<&mut ModelRng>,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        if mask.len() != cfg.num_classes {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} classes",
                mask.len(),
                cfg.num_classes
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Data("level mask selects no class".into()));
        }
        let cond = if cfg.pnc { cond } else { None };
        if let Some(cv) = cond {
            if cv.len() != cfg.word_dim {
                return Err(Error::Shape(format!("conditioning vector of dimension {}", cv.len())));
            }
        }
        let prev_row = prev.unwrap_or(cfg.start_index());
        let attention = self.attend(encoded, hidden, cond);
        let raw_input = concatenate![Axis(0), self.class_embeddings.row(prev_row), attention.context];
        let input_mask = dropout_mask(raw_input.len(), cfg.dropout, dropout);
        let input = match &input_mask {
            Some(m) => raw_input * m,
            None => raw_input,
        };
        let gru = self.decoder.forward(&input, hidden);
        ensure_finite(&gru.h, "decoder state")?;
        let output_input = concatenate![Axis(0), gru.h, attention.context];
        let logits = matvec(&self.output_w, &output_input) + &self.output_b;
        ensure_finite(&logits, "output logits")?;
        let log_probs = masked_log_softmax(logits.as_slice().expect("contiguous"), mask)?;
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        let new_hidden = gru.h.clone();
        Ok(StepOutput {
            logits,
            log_probs,
            hidden: new_hidden,
            cache: StepCache {
                prev_row,
                state: hidden.clone(),
                cond: cond.cloned(),
                attention,
                input_mask,
                gru,
                output_input,
                probs,
            },
        })
    }

    /// Teacher-forced negative log-likelihood of `targets` (global class
    /// indices in decode order) under the per-step `masks`.
    ///
    /// With conditioning on, step `j > 0` attends with the CDV of
    /// `targets[j - 1]` and step 0 with zeros.
    pub fn forward_loss(
        &self,
        words: &[Array1<f64>],
        targets: &[usize],
        masks: &[Vec<bool>],
        cdv: Option<&CdvStore>,
        mut dropout: Option<&mut ModelRng>,
    ) -> Result<(f64, LossCache)> {
        if targets.len() != masks.len() || targets.is_empty() {
            return Err(Error::Data(format!(
                "{} targets for {} masks",
                targets.len(),
                masks.len()
            )));
        }
        if let Some((j, _)) = targets
            .iter()
            .zip(masks)
            .enumerate()
            .find(|(_, (&t, m))| !m.get(t).copied().unwrap_or(false))
        {
            return Err(Error::Data(format!("target at step {j} lies outside its level")));
        }
        let cdv = match (self.config.pnc, cdv) {
            (false, _) => None,
            (true, Some(store)) if store.dim() == self.config.word_dim => Some(store),
            (true, Some(store)) => {
                return Err(Error::Shape(format!(
                    "CDV dimension {} differs from word dimension {}",
                    store.dim(),
                    self.config.word_dim
                )))
            }
            (true, None) => return Err(Error::Config("parent-node conditioning needs a CDV store".into())),
        };

        let encoded = self.encode(words, dropout.as_deref_mut())?;
        let mut hidden = encoded.initial_hidden.clone();
        let mut loss = 0.0;
        let mut steps = Vec::with_capacity(targets.len());
        let zeros = Array1::zeros(self.config.word_dim);
        for (j, (&target, mask)) in targets.iter().zip(masks).enumerate() {
            let prev = j.checked_sub(1).map(|p| targets[p]);
            let cond = cdv.map(|store| match prev {
                Some(p) => store.vector(p),
                None => &zeros,
            });
            let out = self.decode_step(&encoded, prev, &hidden, mask, cond, dropout.as_deref_mut())?;
            loss -= out.log_probs[target];
            hidden = out.hidden;
            steps.push(out.cache);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        Ok((
            loss,
            LossCache {
                encoded,
                steps,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Loss of a document's label path in `direction`.
    pub fn forward_loss_doc(
        &self,
        doc: &Document,
        table: &EmbeddingTable,
        taxonomy: &Taxonomy,
        direction: Direction,
        cdv: Option<&CdvStore>,
        dropout: Option<&mut ModelRng>,
    ) -> Result<(f64, LossCache)> {
        let targets: Vec<usize> = doc
            .labels
            .in_order(direction)
            .into_iter()
            .map(|c| taxonomy.global_index(c))
            .collect();
        let masks = (0..taxonomy.num_levels())
            .map(|j| taxonomy.level_mask(j, direction))
            .collect::<Result<Vec<_>>>()?;
        self.forward_loss(&table.embed(&doc.tokens), &targets, &masks, cdv, dropout)
    }

    /// Adds `dLoss/dθ` for the cached pass into `grads`. Word vectors are
    /// inputs, not parameters, and receive nothing.
    pub fn backward(&self, cache: &LossCache, grads: &mut ModelParams) {
        let h = self.config.hidden;
        let d = self.config.word_dim;
        let encoded = &cache.encoded;
        let outputs = &encoded.state.outputs;
        let n = outputs.len();
        let mut d_outputs: Vec<Array1<f64>> = vec![Array1::zeros(2 * h); n];
        let mut d_keys: Vec<Array1<f64>> = vec![Array1::zeros(self.config.attention_dim); n];
        let mut d_state_next: Array1<f64> = Array1::zeros(h);

        for (step, &target) in cache.steps.iter().zip(&cache.targets).rev() {
            let mut d_logits = Array1::from(step.probs.clone());
            d_logits[target] -= 1.0;
            add_outer(&mut grads.output_w, &d_logits, &step.output_input);
            grads.output_b += &d_logits;
            let d_out_in = dot_t(&self.output_w, &d_logits);
            let mut d_hidden = d_out_in.slice(s![..h]).to_owned();
            let mut d_context = d_out_in.slice(s![h..]).to_owned();
            d_hidden += &d_state_next;

            let (dx, d_state) = self.decoder.backward(&step.gru, &d_hidden, &mut grads.decoder, true);
            let mut dx = dx.expect("requested");
            if let Some(mask) = &step.input_mask {
                dx *= mask;
            }
            let mut emb_row = grads.class_embeddings.row_mut(step.prev_row);
            emb_row += &dx.slice(s![..d]);
            d_context += &dx.slice(s![d..]);

            let d_state_att = self.attention.backward(
                &step.attention,
                outputs,
                &step.state,
                step.cond.as_ref(),
                &d_context,
                &mut grads.attention,
                &mut d_keys,
                &mut d_outputs,
            );
            d_state_next = d_state + d_state_att;
        }

        // Bridge: s_0 = tanh(W_b [f_N; b_1] + b_b).
        let s0 = &encoded.initial_hidden;
        let d_pre = &d_state_next * &s0.mapv(|v| 1.0 - v * v);
        add_outer(&mut grads.bridge_w, &d_pre, &encoded.bridge_input);
        grads.bridge_b += &d_pre;
        let d_bridge = dot_t(&self.bridge_w, &d_pre);
        {
            let mut last = d_outputs[n - 1].slice_mut(s![..h]);
            last += &d_bridge.slice(s![..h]);
        }
        {
            let mut first = d_outputs[0].slice_mut(s![h..]);
            first += &d_bridge.slice(s![h..]);
        }

        for (i, dk) in d_keys.iter().enumerate() {
            add_outer(&mut grads.attention.w_h, dk, &outputs[i]);
            add_dot_t(&mut d_outputs[i], &self.attention.w_h, dk);
        }

        let mut carry = Array1::zeros(h);
        for t in (0..n).rev() {
            let dh = d_outputs[t].slice(s![..h]).to_owned() + &carry;
            let (_, d_prev) =
                self.encoder_forward
                    .backward(&encoded.forward_steps[t], &dh, &mut grads.encoder_forward, false);
            carry = d_prev;
        }
        let mut carry = Array1::zeros(h);
        for (t, d_out) in d_outputs.iter().enumerate() {
            let dh = d_out.slice(s![h..]).to_owned() + &carry;
            let (_, d_prev) = self.encoder_backward.backward(
                &encoded.backward_steps[n - 1 - t],
                &dh,
                &mut grads.encoder_backward,
                false,
            );
            carry = d_prev;
        }
    }
}

use rand::RngCore;

use crate::error::{Error, Result};
use crate::lora::{AdaptedLayer, LayerCache};
use crate::matrix::Matrix;
use crate::nn::attention::{AttentionBlock, AttentionCache};
use crate::nn::{accuracy, loss_and_grad, Batch, Grads, LossKind, ParamRef, Targets};

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// Adapted layers with tanh between them; the last layer emits the output.
    Mlp(Vec<AdaptedLayer>),
    /// Self-attention over each example's tokens, mean pooling, then `head`.
    Attention {
        block: AttentionBlock,
        head: AdaptedLayer,
        seq_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    loss: LossKind,
    /// L2 penalty `λ/2·‖p‖²` on every trainable parameter.
    l2: f64,
}

enum Tape {
    Mlp {
        caches: Vec<LayerCache>,
        /// tanh outputs of every hidden layer.
        hidden: Vec<Matrix>,
    },
    Attention {
        block: AttentionCache,
        head: LayerCache,
    },
}

impl Model {
    pub fn mlp(layers: Vec<AdaptedLayer>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model", "mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim("mlp layer chain", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(Model {
            arch: Architecture::Mlp(layers),
            loss,
            l2: 0.0,
        })
    }

    pub fn attention(block: AttentionBlock, head: AdaptedLayer, seq_len: usize, loss: LossKind) -> Result<Self> {
        if head.in_dim() != block.dim() {
            return Err(Error::dim("attention head", block.dim(), head.in_dim()));
        }
        if seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        Ok(Model {
            arch: Architecture::Attention { block, head, seq_len },
            loss,
            l2: 0.0,
        })
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp(layers) => layers[0].in_dim(),
            Architecture::Attention { block, .. } => block.dim(),
        }
    }

    pub fn tokens_per_example(&self) -> usize {
        match &self.arch {
            Architecture::Mlp(_) => 1,
            Architecture::Attention { seq_len, .. } => *seq_len,
        }
    }

    /// All layers in id order.
    pub fn layers(&self) -> Vec<&AdaptedLayer> {
        match &self.arch {
            Architecture::Mlp(layers) => layers.iter().collect(),
            Architecture::Attention { block, head, .. } => vec![&block.query, &block.key, &block.value, head],
        }
    }

    pub fn layers_mut(&mut self) -> Vec<&mut AdaptedLayer> {
        match &mut self.arch {
            Architecture::Mlp(layers) => layers.iter_mut().collect(),
            Architecture::Attention { block, head, .. } => {
                vec![&mut block.query, &mut block.key, &mut block.value, head]
            }
        }
    }

    pub fn layer(&self, id: usize) -> Option<&AdaptedLayer> {
        self.layers().into_iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: usize) -> Option<&mut AdaptedLayer> {
        self.layers_mut().into_iter().find(|l| l.id == id)
    }

    pub fn param(&self, p: ParamRef) -> Option<&Matrix> {
        self.layer(p.layer)?.param(p.role)
    }

    pub fn param_mut(&mut self, p: ParamRef) -> Option<&mut Matrix> {
        self.layer_mut(p.layer)?.param_mut(p.role)
    }

    pub fn is_trainable(&self, p: ParamRef) -> bool {
        self.layer(p.layer)
            .is_some_and(|l| l.trainable.contains(p.role) && l.param(p.role).is_some())
    }

    /// Trainable parameters in `(layer, role)` order.
    pub fn trainable_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for layer in self.layers() {
            for role in layer.trainable.iter() {
                if layer.param(role).is_some() {
                    refs.push(ParamRef::new(layer.id, role));
                }
            }
        }
        refs.sort();
        refs
    }

    /// Sets the trainable role set of every adapted layer.
    pub fn set_trainable(&mut self, roles: crate::nn::RoleSet) {
        for layer in self.layers_mut() {
            if layer.is_adapted() {
                layer.trainable = roles;
            }
        }
    }

    pub fn set_dropout(&mut self, rate: f64) {
        for layer in self.layers_mut() {
            layer.dropout = rate;
        }
    }

    fn forward_tape(&self, inputs: &Matrix, mut rng: Option<&mut dyn RngCore>) -> Result<(Matrix, Tape)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::dim("model input", self.input_dim(), inputs.cols()));
        }
        match &self.arch {
            Architecture::Mlp(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                let mut hidden = Vec::with_capacity(layers.len().saturating_sub(1));
                let mut h = inputs.clone();
                for (i, layer) in layers.iter().enumerate() {
                    let (y, cache) = layer.forward(&h, crate::nn::reborrow(&mut rng))?;
                    caches.push(cache);
                    if i + 1 < layers.len() {
                        let a = y.map(f64::tanh);
                        hidden.push(a.clone());
                        h = a;
                    } else {
                        h = y;
                    }
                }
                Ok((h, Tape::Mlp { caches, hidden }))
            }
            Architecture::Attention { block, head, seq_len } => {
                if inputs.rows() % seq_len != 0 {
                    return Err(Error::dim("attention input rows", format!("multiple of {seq_len}"), inputs.rows()));
                }
                let (o, block_cache) = block.forward(inputs, *seq_len, crate::nn::reborrow(&mut rng))?;
                let n = inputs.rows() / seq_len;
                let mut pooled = Matrix::zeros(n, block.dim());
                let inv = 1.0 / *seq_len as f64;
                for e in 0..n {
                    let dst = pooled.row_mut(e);
                    for t in 0..*seq_len {
                        for (p, v) in dst.iter_mut().zip(o.row(e * seq_len + t)) {
                            *p += v * inv;
                        }
                    }
                }
                let (logits, head_cache) = head.forward(&pooled, rng)?;
                Ok((
                    logits,
                    Tape::Attention {
                        block: block_cache,
                        head: head_cache,
                    },
                ))
            }
        }
    }

    fn last_layer_id(&self) -> usize {
        self.layers().iter().map(|l| l.id).max().unwrap_or(0)
    }

    fn l2_penalty(&self) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .trainable_refs()
            .into_iter()
            .filter_map(|p| self.param(p))
            .map(Matrix::frobenius_sq)
            .sum();
        0.5 * self.l2 * sq
    }

    /// Model output for the given inputs (inference, no dropout).
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(inputs, None)?.0)
    }

    /// Training objective (data loss plus L2 penalty), no dropout.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (out, _) = self.forward_tape(&batch.inputs, None)?;
        let (loss, _) = loss_and_grad(self.loss, &out, &batch.targets)?;
        let total = loss + self.l2_penalty();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                layer: self.last_layer_id(),
            });
        }
        Ok(total)
    }

    /// Data loss and, for classification, accuracy.
    pub fn evaluate(&self, batch: &Batch) -> Result<(f64, Option<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let out = self.predict(&batch.inputs)?;
        let (loss, _) = loss_and_grad(self.loss, &out, &batch.targets)?;
        let acc = match &batch.targets {
            Targets::Classes(labels) => Some(accuracy(&out, labels)),
            Targets::Values(_) => None,
        };
        Ok((loss, acc))
    }

    /// Objective value and gradients of exactly the trainable parameters.
    /// Dropout is active only when `rng` is given.
    pub fn backprop(&self, batch: &Batch, rng: Option<&mut dyn RngCore>) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (out, tape) = self.forward_tape(&batch.inputs, rng)?;
        let (data_loss, d_out) = loss_and_grad(self.loss, &out, &batch.targets)?;
        let loss = data_loss + self.l2_penalty();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                layer: self.last_layer_id(),
            });
        }

        let mut grads = Grads::new();
        match (&self.arch, tape) {
            (Architecture::Mlp(layers), Tape::Mlp { caches, hidden }) => {
                let mut dy = d_out;
                for i in (0..layers.len()).rev() {
                    let dx = layers[i].backward(&caches[i], &dy, &mut grads, i > 0)?;
                    if i > 0 {
                        let a = &hidden[i - 1];
                        dy = dx
                            .expect("input gradient requested")
                            .hadamard(&a.map(|t| 1.0 - t * t))?;
                    }
                }
            }
            (Architecture::Attention { block, head, seq_len }, Tape::Attention { block: bc, head: hc }) => {
                let d_pooled = head.backward(&hc, &d_out, &mut grads, true)?.expect("input gradient requested");
                let inv = 1.0 / *seq_len as f64;
                let mut d_o = Matrix::zeros(batch.inputs.rows(), block.dim());
                for e in 0..d_pooled.rows() {
                    for t in 0..*seq_len {
                        for (dst, g) in d_o.row_mut(e * seq_len + t).iter_mut().zip(d_pooled.row(e)) {
                            *dst = g * inv;
                        }
                    }
                }
                block.backward(&bc, &d_o, &mut grads, false)?;
            }
            _ => unreachable!("tape matches architecture"),
        }

        if self.l2 != 0.0 {
            for p in self.trainable_refs() {
                let value = self.param(p).expect("trainable parameter exists");
                match grads.get_mut(&p) {
                    Some(g) => g.axpy(self.l2, value)?,
                    None => {
                        grads.insert(p, value.scale(self.l2));
                    }
                }
            }
        }
        // Parameters the forward pass never touched still get an explicit zero.
        for p in self.trainable_refs() {
            if !grads.contains_key(&p) {
                let (r, c) = self.param(p).expect("trainable parameter exists").shape();
                grads.insert(p, Matrix::zeros(r, c));
            }
        }
        for (p, g) in &grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { layer: p.layer });
            }
        }
        Ok((loss, grads))
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub(crate) fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64, step: f64) -> Result<f64> {
    Ok((f(x + step)? - f(x - step)?) / (2.0 * step))
}

/// Entrywise central-difference gradient of the training objective with
/// respect to one parameter matrix.
pub fn finite_diff_gradient(model: &Model, batch: &Batch, param: ParamRef, step: f64) -> Result<Matrix> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::config("step", "finite-difference step must be positive"));
    }
    let shape = model
        .param(param)
        .ok_or_else(|| Error::config("param", format!("{param} not present in model")))?
        .shape();
    let mut probe = model.clone();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for idx in 0..out.len() {
        let original = probe.param(param).expect("checked above").data()[idx];
        let value = central_difference(
            |v| {
                let mut m = probe.clone();
                m.param_mut(param).expect("checked above").data_mut()[idx] = v;
                m.loss(batch)
            },
            original,
            step,
        )?;
        out.data_mut()[idx] = value;
        probe.param_mut(param).expect("checked above").data_mut()[idx] = original;
    }
    Ok(out)
}

//! Encoder / decoder / classifier network built from masked layers.

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::masked::{freeze_current, LayerCounts, MaskedLinear, Phase, Proportion, TaskRegistry, FREE};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ae,
    Vae,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ae => "ae",
            Variant::Vae => "vae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Encoder widths; the decoder mirrors them in reverse.
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub class_count: usize,
    pub variant: Variant,
    /// Weight of the KL term (VAE only).
    pub kl_weight: f64,
}

impl ModelConfig {
    /// d→128→64, latent 32: sized for tabular sensor features.
    pub fn structured(input_dim: usize, class_count: usize, variant: Variant) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![128, 64],
            latent_dim: 32,
            class_count,
            variant,
            kl_weight: 0.001,
        }
    }

    /// 784→256→128, latent 64: sized for flattened 28×28 images.
    pub fn image(input_dim: usize, class_count: usize, variant: Variant) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![256, 128],
            latent_dim: 64,
            class_count,
            variant,
            kl_weight: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.class_count == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight {} must be finite and ≥ 0", self.kl_weight)));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let h = self.hidden_dims.len();
        let mu = h;
        let log_var = (self.variant == Variant::Vae).then_some(h + 1);
        let decoder_start = h + 1 + usize::from(log_var.is_some());
        let classifier = decoder_start + h + 1;
        Layout {
            encoder: 0..h,
            mu,
            log_var,
            decoder: decoder_start..classifier,
            classifier,
        }
    }

    /// `(in, out)` per layer in storage order.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut enc = vec![self.input_dim];
        enc.extend(&self.hidden_dims);
        let top = *enc.last().unwrap();
        let mut dims: Vec<(usize, usize)> = enc.windows(2).map(|w| (w[0], w[1])).collect();
        dims.push((top, self.latent_dim));
        if self.variant == Variant::Vae {
            dims.push((top, self.latent_dim));
        }
        let mut dec = vec![self.latent_dim];
        dec.extend(self.hidden_dims.iter().rev());
        dec.push(self.input_dim);
        dims.extend(dec.windows(2).map(|w| (w[0], w[1])));
        dims.push((self.latent_dim, self.class_count));
        dims
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: std::ops::Range<usize>,
    mu: usize,
    log_var: Option<usize>,
    decoder: std::ops::Range<usize>,
    classifier: usize,
}

/// Which sub-network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Encoder,
    Latent,
    LogVar,
    Decoder,
    Classifier,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub input: Var,
    pub reconstruction: Var,
    pub logits: Var,
    pub latent: Var,
    pub mu: Option<Var>,
    pub log_var: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<S> {
    pub reconstruction: Tensor<S>,
    pub logits: Tensor<S>,
    pub latent: Tensor<S>,
    pub mu: Option<Tensor<S>>,
    pub log_var: Option<Tensor<S>>,
    pub per_instance_rec_loss: Vec<S>,
}

/// Loss components as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub classification: Var,
    pub kl: Option<Var>,
}

/// Loss components as numbers, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub classification: f64,
    pub kl: f64,
}

impl LossVars {
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> LossParts {
        let get = |v: Var| tape.value(v).data()[0].to_f64_lossy();
        LossParts {
            total: get(self.total),
            reconstruction: get(self.reconstruction),
            classification: get(self.classification),
            kl: self.kl.map_or(0.0, get),
        }
    }
}

/// Mean squared error of each row of `x` against the same row of `x_hat`.
pub fn per_instance_mse<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>) -> Vec<S> {
    let d = S::of(x.cols() as f64);
    (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x_hat.row(i))
                .fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                / d
        })
        .collect()
}

/// `L_rec + L_cls (+ β·KL)` recorded on the tape.
pub fn hybrid_loss<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ForwardVars,
    labels: &[usize],
    variant: Variant,
    kl_weight: f64,
) -> Result<LossVars> {
    let rec = tape.mse_loss(vars.input, vars.reconstruction)?;
    let cls = tape.cross_entropy_loss(vars.logits, labels)?;
    let mut total = tape.add(rec, cls)?;
    let mut kl = None;
    if variant == Variant::Vae {
        let (mu, lv) = vars
            .mu
            .zip(vars.log_var)
            .ok_or_else(|| Error::Config("VAE loss needs mu and log_var".into()))?;
        let k = tape.kl_standard_normal(mu, lv)?;
        let weighted = tape.scale(k, S::of(kl_weight))?;
        total = tape.add(total, weighted)?;
        kl = Some(k);
    }
    Ok(LossVars {
        total,
        reconstruction: rec,
        classification: cls,
        kl,
    })
}

/// Loss of an already computed forward result, evaluated on a fresh tape.
pub fn training_loss<S: Scalar>(
    input: &Tensor<S>,
    result: &ForwardResult<S>,
    labels: &[usize],
    variant: Variant,
    kl_weight: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let vars = ForwardVars {
        input: tape.constant(input.clone()),
        reconstruction: tape.constant(result.reconstruction.clone()),
        logits: tape.constant(result.logits.clone()),
        latent: tape.constant(result.latent.clone()),
        mu: result.mu.clone().map(|m| tape.constant(m)),
        log_var: result.log_var.clone().map(|l| tape.constant(l)),
    };
    let loss = hybrid_loss(&mut tape, &vars, labels, variant, kl_weight)?;
    Ok(loss.values(&tape))
}

/// Hybrid autoencoder + classifier whose layers isolate parameters per task.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel<S> {
    config: ModelConfig,
    layers: Vec<MaskedLinear<S>>,
    registry: TaskRegistry,
}

impl<S: Scalar> HybridModel<S> {
    /// Every weight starts free; [`HybridModel::begin_task`] draws them.
    pub fn new(config: ModelConfig, total_tasks: usize) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| MaskedLinear::new(i, o))
            .collect();
        Ok(Self {
            config,
            layers,
            registry: TaskRegistry::new(total_tasks),
        })
    }

    /// Conventional network: every weight initialised and owned by task 0.
    /// Trained in [`Phase::Retrain`] it behaves like an unmasked MLP.
    pub fn plain(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut model = Self::new(config, 1)?;
        for layer in &mut model.layers {
            layer.reinit_free(rng);
            let w = layer.weights().data().to_vec();
            let owned = vec![0; w.len()];
            layer.set_state(w, owned);
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, layers: Vec<MaskedLinear<S>>, registry: TaskRegistry) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len()
            || dims
                .iter()
                .zip(&layers)
                .any(|(&(i, o), l)| l.in_dim() != i || l.out_dim() != o)
        {
            return Err(Error::Checkpoint("layer shapes do not match the model config".into()));
        }
        if layers.iter().any(|l| l.current_task() != registry.current_task) {
            return Err(Error::Checkpoint("layer snapshots disagree with registry".into()));
        }
        Ok(Self {
            config,
            layers,
            registry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[MaskedLinear<S>] {
        &self.layers
    }

    /// Mutable layer access for tests and tooling; bypasses the task lifecycle.
    #[doc(hidden)]
    pub fn layers_mut(&mut self) -> &mut [MaskedLinear<S>] {
        &mut self.layers
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn frozen_tasks(&self) -> usize {
        self.registry.current_task
    }

    pub fn current_task(&self) -> usize {
        self.registry.current_task
    }

    pub fn layer_role(&self, index: usize) -> LayerRole {
        let l = self.config.layout();
        if l.encoder.contains(&index) {
            LayerRole::Encoder
        } else if index == l.mu {
            LayerRole::Latent
        } else if Some(index) == l.log_var {
            LayerRole::LogVar
        } else if l.decoder.contains(&index) {
            LayerRole::Decoder
        } else {
            LayerRole::Classifier
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count() + l.out_dim()).sum()
    }

    /// Weight id `2i`, bias id `2i + 1` for layer `i`.
    pub fn param_ids(layer: usize) -> (ParamId, ParamId) {
        (ParamId(2 * layer), ParamId(2 * layer + 1))
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights().shape().to_vec(), l.live_bias().shape().to_vec()])
            .collect()
    }

    pub fn new_optimizer(&self, config: crate::adam::AdamConfig) -> AdamState<S> {
        let shapes = self.param_shapes();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        AdamState::new(config, &refs)
    }

    pub fn layer_counts(&self) -> Vec<LayerCounts> {
        self.registry.counts(&self.layers)
    }

    /// Prepare the current task: every layer needs free capacity, which is
    /// then redrawn at random.
    pub fn begin_task(&mut self, rng: &mut SeededRng) -> Result<()> {
        let task = self.registry.current_task;
        if task >= crate::masked::MAX_TASKS {
            return Err(Error::TooManyTasks(crate::masked::MAX_TASKS));
        }
        if let Some(layer) = self.layers.iter().position(|l| l.free_count() == 0) {
            return Err(Error::CapacityExhausted { layer, task });
        }
        for layer in &mut self.layers {
            layer.reinit_free(rng);
        }
        Ok(())
    }

    pub fn prune(&mut self, lambda: Proportion) -> Result<Vec<usize>> {
        self.layers.iter_mut().map(|l| l.prune(lambda)).collect()
    }

    pub fn mark_trained(&mut self) {
        self.registry.mark_trained();
    }

    pub fn freeze(&mut self) -> Result<()> {
        freeze_current(&mut self.registry, &mut self.layers)
    }

    /// Record a forward pass at visibility `task`. Weights become trainable
    /// leaves when `trainable` is set and `phase` is a training phase.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        task: usize,
        phase: Phase,
        noise: Option<&Tensor<S>>,
        trainable: bool,
    ) -> Result<ForwardVars> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::Config(format!(
                "input shape {:?} does not match input_dim {}",
                x.shape(),
                self.config.input_dim
            )));
        }
        let layout = self.config.layout();
        let ids = |i: usize| trainable.then(|| Self::param_ids(i));
        let input = tape.constant(x.clone());

        let mut h = input;
        for i in layout.encoder.clone() {
            h = self.layers[i].forward_visible(tape, h, task, phase, ids(i))?;
            h = tape.relu(h)?;
        }
        let mu = self.layers[layout.mu].forward_visible(tape, h, task, phase, ids(layout.mu))?;
        let (latent, log_var, code) = match layout.log_var {
            None => (mu, None, mu),
            Some(lv_idx) => {
                let lv = self.layers[lv_idx].forward_visible(tape, h, task, phase, ids(lv_idx))?;
                if phase.is_training() {
                    let noise = noise.ok_or_else(|| Error::Config("VAE training needs injected noise".into()))?;
                    let z = tape.reparameterize(mu, lv, noise)?;
                    (z, Some(lv), z)
                } else {
                    (mu, Some(lv), mu)
                }
            }
        };

        let mut d = latent;
        let last = layout.decoder.end - 1;
        for i in layout.decoder.clone() {
            d = self.layers[i].forward_visible(tape, d, task, phase, ids(i))?;
            if i != last {
                d = tape.relu(d)?;
            }
        }
        let logits = self.layers[layout.classifier].forward_visible(tape, code, task, phase, ids(layout.classifier))?;

        Ok(ForwardVars {
            input,
            reconstruction: d,
            logits,
            latent,
            mu: log_var.map(|_| mu),
            log_var,
        })
    }

    /// Forward pass without trainable leaves.
    pub fn forward(&self, x: &Tensor<S>, task: usize, phase: Phase, noise: Option<&Tensor<S>>) -> Result<ForwardResult<S>> {
        let mut tape = Tape::new();
        let v = self.forward_taped(&mut tape, x, task, phase, noise, false)?;
        let reconstruction = tape.value(v.reconstruction).clone();
        Ok(ForwardResult {
            per_instance_rec_loss: per_instance_mse(x, &reconstruction),
            reconstruction,
            logits: tape.value(v.logits).clone(),
            latent: tape.value(v.latent).clone(),
            mu: v.mu.map(|m| tape.value(m).clone()),
            log_var: v.log_var.map(|l| tape.value(l).clone()),
        })
    }

    /// Gate gradients of frozen weights, then take one Adam step over all
    /// live weights and biases. Missing gradients count as zero.
    pub fn apply_gradients(&mut self, mut grads: Gradients<S>, optimizer: &mut AdamState<S>) -> Result<()> {
        let mut gs = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            let (wid, bid) = Self::param_ids(i);
            let mut wg = grads.take(wid).unwrap_or_else(|| Tensor::zeros(layer.weights().shape()));
            layer.gate_gradients(&mut wg);
            let bg = grads.take(bid).unwrap_or_else(|| Tensor::zeros(layer.live_bias().shape()));
            gs.push(wg);
            gs.push(bg);
        }
        let mut params: Vec<&mut Tensor<S>> = Vec::with_capacity(gs.len());
        for layer in self.layers.iter_mut() {
            let (w, b) = layer.params_mut();
            params.push(w);
            params.push(b);
        }
        let grefs: Vec<&Tensor<S>> = gs.iter().collect();
        optimizer.step(&mut params, &grefs)?;
        Ok(())
    }

    /// Same model in another scalar type.
    pub fn cast<T: Scalar>(&self) -> HybridModel<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                MaskedLinear::from_parts(
                    l.weights().cast(),
                    l.assignment().to_vec(),
                    l.live_bias().cast(),
                    l.bias_snapshots().iter().map(Tensor::cast).collect(),
                )
                .expect("cast preserves layer consistency")
            })
            .collect();
        HybridModel {
            config: self.config.clone(),
            layers,
            registry: self.registry.clone(),
        }
    }

    /// Fraction of all weights still free.
    pub fn free_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(MaskedLinear::weight_count).sum();
        let free: usize = self
            .layers
            .iter()
            .map(|l| l.assignment().iter().filter(|&&a| a == FREE).count())
            .sum();
        free as f64 / total as f64
    }
}

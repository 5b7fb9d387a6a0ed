//! The training loop: warm-up epochs, then selective contrastive epochs.
//!
//! Per batch: a training-mode forward pass yields every sample's keys; each
//! sample picks its positives/negatives (or, during warm-up, itself plus
//! random negatives); the per-sample losses are summed; one momentum-SGD
//! step is taken; finally the banks are updated sample by sample with the
//! keys computed before the step.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::memory::MemoryBanks;
use crate::model::{bind_params, forward_batch, ModelConfig, ModelParams};
use crate::sampling::{partition_and_select, SimilarityConfig};
use crate::synthdata::{flip_horizontal, stream_rng, ImageSample};
use crate::tensor::Tensor;

/// Which anchor keys are fused into the mixture bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureKeys {
    /// Global key, then concatenated local key.
    #[default]
    Joint,
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs trained with the anchor-only warm-up loss.
    pub init_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Probability of a horizontal flip when a sample is loaded.
    pub flip_prob: f64,
    pub mixture_keys: MixtureKeys,
    pub similarity: SimilarityConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            init_epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            flip_prob: 0.5,
            mixture_keys: MixtureKeys::Joint,
            similarity: SimilarityConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.init_epochs == 0 || self.init_epochs >= self.epochs {
            return Err(Error::config(format!(
                "need 1 <= init_epochs < epochs, got {} and {}",
                self.init_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must be in [0, 1]"));
        }
        self.similarity.validate(n_samples)?;
        self.loss.validate()
    }
}

pub type Gradients = BTreeMap<String, Tensor>;

/// One velocity buffer per trainable tensor, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let velocity = params
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect();
        Self { velocity }
    }
}

/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let names = params.trainable_names();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    for name in names {
        let g = &grads[&name];
        let vel = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params
            .tensor_mut(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() || vel.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= learning_rate * *vv;
        }
    }
    Ok(())
}

/// Gradients for every trainable tensor bound in `graph`. Tensors the loss
/// does not reach get zeros; tensors never bound are an error.
pub fn collect_gradients(graph: &Graph, params: &ModelParams) -> Result<Gradients> {
    let mut out = Gradients::new();
    for name in params.trainable_names() {
        let var = graph
            .lookup(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let shape = graph.value(var).shape().to_vec();
        let t = match graph.grad(var) {
            Some(g) => Tensor::new(shape, g.to_vec())?,
            None => Tensor::zeros(&shape),
        };
        out.insert(name, t);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Train => "train",
        }
    }
}

/// Per-sample mean losses over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_total: f64,
    pub steps: usize,
}

/// What one batch touched.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchReport {
    pub epoch: usize,
    pub phase: Phase,
    /// Rows written in the global and local banks.
    pub anchors: Vec<usize>,
    /// Rows written in the mixture bank.
    pub mixture_rows: Vec<usize>,
}

/// Observation points inside an epoch, for instrumentation.
pub trait BatchHook {
    fn before_batch(&mut self, _banks: &MemoryBanks) {}
    /// After backward and the optimizer step, before any bank update.
    fn after_step(&mut self, _banks: &MemoryBanks) {}
    fn after_update(&mut self, _report: &BatchReport, _banks: &MemoryBanks) {}
}

struct NoHook;
impl BatchHook for NoHook {}

const STREAM_SHUFFLE: u64 = 1 << 48;
const STREAM_FLIP: u64 = 2 << 48;
const STREAM_NEGATIVES: u64 = 3 << 48;

fn sample_stream(base: u64, epoch: usize, sample: usize) -> u64 {
    base | ((epoch as u64) << 24) | sample as u64
}

pub struct Trainer {
    pub params: ModelParams,
    pub banks: MemoryBanks,
    pub opt: OptimizerState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
    cameras: Vec<u16>,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: &TrainConfig, cameras: Vec<u16>) -> Result<Self> {
        config.validate(cameras.len())?;
        let params = ModelParams::init(model, config.seed)?;
        let banks = MemoryBanks::new(cameras.len(), model.key_dim, model.stripes)?;
        let opt = OptimizerState::new(&params);
        Ok(Self {
            params,
            banks,
            opt,
            config: config.clone(),
            epoch: 0,
            steps: 0,
            cameras,
        })
    }

    /// Resumes from saved state.
    pub fn from_state(
        params: ModelParams,
        banks: MemoryBanks,
        opt: OptimizerState,
        config: &TrainConfig,
        epoch: usize,
        cameras: Vec<u16>,
    ) -> Result<Self> {
        config.validate(cameras.len())?;
        if banks.len() != cameras.len() {
            return Err(Error::config(format!(
                "checkpoint banks hold {} samples, dataset has {}",
                banks.len(),
                cameras.len()
            )));
        }
        Ok(Self {
            params,
            banks,
            opt,
            config: config.clone(),
            epoch,
            steps: 0,
            cameras,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.config.init_epochs {
            Phase::Init
        } else {
            Phase::Train
        }
    }

    /// Sample order for a 0-based epoch, split into batches.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.cameras.len()).collect();
        let mut rng = stream_rng(self.config.seed, STREAM_SHUFFLE | epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn run_epoch(&mut self, train: &[ImageSample]) -> Result<EpochStats> {
        self.run_epoch_with(train, &mut NoHook)
    }

    /// Runs the next epoch, whichever phase it belongs to.
    pub fn run_epoch_with(&mut self, train: &[ImageSample], hook: &mut dyn BatchHook) -> Result<EpochStats> {
        match self.phase_of(self.epoch) {
            Phase::Init => self.run_init_epoch(train, hook),
            Phase::Train => self.run_train_epoch(train, hook),
        }
    }

    pub fn run_init_epoch(&mut self, train: &[ImageSample], hook: &mut dyn BatchHook) -> Result<EpochStats> {
        self.run_phase(train, Phase::Init, hook)
    }

    pub fn run_train_epoch(&mut self, train: &[ImageSample], hook: &mut dyn BatchHook) -> Result<EpochStats> {
        self.run_phase(train, Phase::Train, hook)
    }

    fn run_phase(&mut self, train: &[ImageSample], phase: Phase, hook: &mut dyn BatchHook) -> Result<EpochStats> {
        if train.len() != self.cameras.len() {
            return Err(Error::config(format!(
                "trainer built for {} samples, got {}",
                self.cameras.len(),
                train.len()
            )));
        }
        let epoch = self.epoch;
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for batch in self.batches(epoch) {
            hook.before_batch(&self.banks);
            let (lg, ll, lt, report) = self.step_batch(train, &batch, epoch, phase, hook)?;
            sums.0 += lg;
            sums.1 += ll;
            sums.2 += lt;
            steps += 1;
            hook.after_update(&report, &self.banks);
        }
        self.epoch += 1;
        self.steps += steps;
        let n = train.len() as f64;
        Ok(EpochStats {
            epoch: epoch + 1,
            phase,
            loss_global: sums.0 / n,
            loss_local: sums.1 / n,
            loss_total: sums.2 / n,
            steps,
        })
    }

    fn step_batch(
        &mut self,
        train: &[ImageSample],
        batch: &[usize],
        epoch: usize,
        phase: Phase,
        hook: &mut dyn BatchHook,
    ) -> Result<(f64, f64, f64, BatchReport)> {
        let cfg = self.config.clone();
        let model_cfg = self.params.config.clone();
        let n = train.len();

        let images: Vec<Vec<f32>> = batch
            .iter()
            .map(|&i| {
                let s = &train[i];
                let mut rng = stream_rng(cfg.seed, sample_stream(STREAM_FLIP, epoch, i));
                if cfg.flip_prob > 0.0 && rand::Rng::random::<f64>(&mut rng) < cfg.flip_prob {
                    flip_horizontal(&s.pixels, s.height, s.width, s.channels)
                } else {
                    s.pixels.clone()
                }
            })
            .collect();
        let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();

        let mut graph = Graph::new();
        let pv = bind_params(&mut graph, &self.params, true);
        let fwd = forward_batch(&mut graph, &pv, &model_cfg, &refs, true)?;

        let mut keys = Vec::with_capacity(batch.len());
        let mut positives = Vec::with_capacity(batch.len());
        let mut per_sample = Vec::with_capacity(batch.len());
        let (mut sum_g, mut sum_l, mut sum_t) = (0.0, 0.0, 0.0);
        for (b, &anchor) in batch.iter().enumerate() {
            let k = fwd.keys(&graph, &model_cfg, b);
            let vg = graph.rows(fwd.v_global, b, 1)?;
            let vl = graph.rows(fwd.v_concat, b, 1)?;
            let (lg, ll, pos) = match phase {
                Phase::Init => {
                    let count = cfg.similarity.n_minus.min(n - 1);
                    let mut rng =
                        stream_rng(cfg.seed, sample_stream(STREAM_NEGATIVES, epoch, anchor));
                    let negatives: Vec<usize> = sample_indices(&mut rng, n - 1, count)
                        .into_iter()
                        .map(|j| if j >= anchor { j + 1 } else { j })
                        .collect();
                    let lg = loss::init_contrastive_loss(
                        &mut graph, vg, &self.banks, anchor, &negatives, &cfg.loss,
                    )?;
                    let ll = loss::init_contrastive_loss(
                        &mut graph, vl, &self.banks, anchor, &negatives, &cfg.loss,
                    )?;
                    (lg, ll, vec![anchor])
                }
                Phase::Train => {
                    let sel = partition_and_select(
                        anchor,
                        &k,
                        &self.banks,
                        &self.cameras,
                        &cfg.similarity,
                    )?;
                    let lg =
                        loss::selective_contrastive_loss(&mut graph, vg, &self.banks, &sel, &cfg.loss)?;
                    let ll =
                        loss::selective_contrastive_loss(&mut graph, vl, &self.banks, &sel, &cfg.loss)?;
                    (lg, ll, sel.positives)
                }
            };
            let lt = loss::total_loss(&mut graph, lg, ll, cfg.loss.lambda_p)?;
            sum_g += graph.value(lg).item();
            sum_l += graph.value(ll).item();
            sum_t += graph.value(lt).item();
            per_sample.push(lt);
            keys.push(k);
            positives.push(pos);
        }
        let mut total = per_sample[0];
        for &l in &per_sample[1..] {
            total = graph.add(total, l)?;
        }
        if !graph.value(total).item().is_finite() {
            return Err(Error::non_finite(format!("batch loss in epoch {}", epoch + 1)));
        }
        graph.backward(total)?;
        let grads = collect_gradients(&graph, &self.params)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::non_finite(format!("gradient of `{name}`")));
        }
        sgd_momentum_step(&mut self.params, &grads, &mut self.opt, cfg.learning_rate, cfg.momentum)?;
        self.params.update_running_stats(&graph, &fwd);
        if !self.params.all_finite() {
            return Err(Error::non_finite("model parameters after update"));
        }
        hook.after_step(&self.banks);

        let mut mixture_rows = Vec::new();
        for ((&anchor, k), pos) in batch.iter().zip(&keys).zip(&positives) {
            self.banks.update_anchor_global(anchor, &k.v_global)?;
            self.banks.update_anchor_local(anchor, &k.v_stripes)?;
            let (first, second) = match cfg.mixture_keys {
                MixtureKeys::Joint => (Some(k.v_global.as_slice()), Some(k.v_local_concat.as_slice())),
                MixtureKeys::Global => (Some(k.v_global.as_slice()), None),
                MixtureKeys::Local => (None, Some(k.v_local_concat.as_slice())),
            };
            self.banks.update_mixture_positives(pos, first, second)?;
            mixture_rows.extend_from_slice(pos);
        }
        mixture_rows.sort_unstable();
        mixture_rows.dedup();
        let report = BatchReport {
            epoch: epoch + 1,
            phase,
            anchors: batch.to_vec(),
            mixture_rows,
        };
        Ok((sum_g, sum_l, sum_t, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            image_height: 4,
            image_width: 2,
            image_channels: 1,
            map_height: 2,
            map_width: 1,
            channels: 2,
            stripes: 2,
            key_dim: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 0).unwrap()
    }

    fn grads_filled(params: &ModelParams, v: f64) -> Gradients {
        params
            .trainable_names()
            .into_iter()
            .map(|n| {
                let shape = params.named_tensors().into_iter().find(|(m, _)| *m == n).unwrap().1.shape().to_vec();
                (n, Tensor::filled(&shape, v))
            })
            .collect()
    }

    #[test]
    fn momentum_hand_updates() {
        let mut params = tiny_params();
        let before = params.enc1.bias.data()[0];
        let mut state = OptimizerState::new(&params);
        let grads = grads_filled(&params, 1.0);
        sgd_momentum_step(&mut params, &grads, &mut state, 1e-3, 0.9).unwrap();
        let after1 = params.enc1.bias.data()[0];
        assert!((before - after1 - 0.001).abs() < 1e-15);
        assert_eq!(state.velocity["enc1.bias"].data()[0], 1.0);
        sgd_momentum_step(&mut params, &grads, &mut state, 1e-3, 0.9).unwrap();
        let after2 = params.enc1.bias.data()[0];
        assert!((after1 - after2 - 0.0019).abs() < 1e-15);
        assert!((state.velocity["enc1.bias"].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = tiny_params();
        let orig = params.clone();
        let mut state = OptimizerState::new(&params);
        sgd_momentum_step(&mut params, &grads_filled(&orig, 0.0), &mut state, 1e-3, 0.9).unwrap();
        assert_eq!(params, orig);
    }

    #[test]
    fn missing_gradient_names_tensor() {
        let mut params = tiny_params();
        let mut state = OptimizerState::new(&params);
        let mut grads = grads_filled(&params, 1.0);
        grads.remove("enc2.weight");
        let err = sgd_momentum_step(&mut params, &grads, &mut state, 1e-3, 0.9).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "enc2.weight"));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(600).is_ok());
        assert!(TrainConfig { init_epochs: 50, ..cfg.clone() }.validate(600).is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate(600).is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg.clone() }.validate(600).is_err());
        assert!(cfg.validate(100).is_err());
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.momentum), (8, 50, 1e-3, 0.9));
    }
}

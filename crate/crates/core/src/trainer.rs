//! Subset-randomized training with Smooth-L1 loss and Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EpochRecord, RngState};
use crate::datastore::{AvailabilityMask, SplitData, VariableUniverse};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::smooth_l1;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    FullOnly,
    UniformNonempty,
    CurriculumList,
}

/// How training draws the observed-variable subset for each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetPolicy {
    pub mode: PolicyMode,
    /// Probability of drawing the complete observation set.
    pub p_full: f64,
    /// Variables present in every drawn subset.
    pub always_include: Vec<String>,
    /// Candidate subsets (`SSH+U` style labels) for `curriculum_list`.
    pub curriculum: Vec<String>,
    pub seed: u64,
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        SubsetPolicy {
            mode: PolicyMode::UniformNonempty,
            p_full: 0.5,
            always_include: vec!["SSH".to_string()],
            curriculum: Vec::new(),
            seed: 0,
        }
    }
}

impl SubsetPolicy {
    pub fn validate(&self, universe: &VariableUniverse) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_full) {
            return Err(Error::Config(format!("p_full = {} is not a probability", self.p_full)));
        }
        for name in &self.always_include {
            if universe.index_of(name).is_none() {
                return Err(Error::Config(format!("always_include names unknown variable {name:?}")));
            }
        }
        if self.mode == PolicyMode::CurriculumList {
            if self.curriculum.is_empty() {
                return Err(Error::Config("curriculum_list policy needs at least one subset".into()));
            }
            for label in &self.curriculum {
                AvailabilityMask::parse(universe, label)?;
            }
        }
        Ok(())
    }

    /// Draws one non-empty mask.
    pub fn sample_mask<R: Rng + ?Sized>(&self, universe: &VariableUniverse, rng: &mut R) -> Result<AvailabilityMask> {
        let n = universe.len();
        if self.mode == PolicyMode::FullOnly || rng.random_bool(self.p_full) {
            return Ok(AvailabilityMask::full(n));
        }
        let required = AvailabilityMask::from_names(universe, &self.always_include)?;
        match self.mode {
            PolicyMode::CurriculumList => {
                let label = &self.curriculum[rng.random_range(0..self.curriculum.len())];
                let mut bits = AvailabilityMask::parse(universe, label)?.bits().to_vec();
                for (b, &r) in bits.iter_mut().zip(required.bits()) {
                    *b |= r;
                }
                Ok(AvailabilityMask::from_bits(bits))
            }
            _ => loop {
                let bits: Vec<bool> = required.bits().iter().map(|&r| r || rng.random_bool(0.5)).collect();
                let mask = AvailabilityMask::from_bits(bits);
                if !mask.is_empty() {
                    return Ok(mask);
                }
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the configured epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Smooth-L1 threshold in normalized target units.
    pub beta_loss: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Save `last.ckpt` every this many epochs (and always after the final one).
    pub checkpoint_every: usize,
    pub schedule: LrSchedule,
    /// Roll each training sample (inputs and target together) by a random
    /// periodic offset.
    pub shift_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 8,
            beta_loss: 1.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1,
            schedule: LrSchedule::Constant,
            shift_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.beta_loss <= 0.0 {
            return Err(Error::Config("beta_loss must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam moments must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// First-order adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Adam {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, cfg.adam_eps as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.try_get(name) else { continue };
            let m = self.m.get_mut(name).data_mut();
            let v = self.v.get_mut(name).data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// Mutable training state; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    /// Per-step mean batch losses of this process (not persisted).
    pub step_losses: Vec<f32>,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub universe: &'a VariableUniverse,
    pub policy: &'a SubsetPolicy,
    pub config: &'a TrainConfig,
    pub train: &'a SplitData,
    pub val: Option<&'a SplitData>,
    val_masks: Vec<AvailabilityMask>,
}

const VAL_STREAM: u64 = u64::MAX;

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        universe: &'a VariableUniverse,
        policy: &'a SubsetPolicy,
        config: &'a TrainConfig,
        train: &'a SplitData,
        val: Option<&'a SplitData>,
    ) -> Result<Trainer<'a>> {
        config.validate()?;
        policy.validate(universe)?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let (_, h, w) = train.surface[0].dims3();
        model.check_grid(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        rng.set_stream(VAL_STREAM);
        let val_masks = match val {
            Some(v) => (0..v.len())
                .map(|_| policy.sample_mask(universe, &mut rng))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Trainer {
            model,
            universe,
            policy,
            config,
            train,
            val,
            val_masks,
        })
    }

    pub fn fresh_state(&self) -> TrainState {
        let params = self.model.init_params::<f32>(self.config.seed);
        TrainState {
            adam: Adam::new(&params),
            params,
            epoch: 0,
            history: Vec::new(),
            best_val: None,
            step_losses: Vec::new(),
        }
    }

    pub fn state_from_checkpoint(&self, ckpt: &Checkpoint) -> Result<TrainState> {
        if ckpt.model != self.model.config {
            return Err(Error::Config("checkpoint model configuration differs from the run".into()));
        }
        if &ckpt.universe != self.universe {
            return Err(Error::Config("checkpoint variable universe differs from the dataset".into()));
        }
        if ckpt.rng.seed != self.config.seed || ckpt.rng.next_epoch != ckpt.epoch {
            return Err(Error::Config("checkpoint RNG state does not match the run seed".into()));
        }
        let fresh = self.fresh_state();
        if fresh.params.names().ne(ckpt.params.names()) {
            return Err(Error::Config("checkpoint parameters do not match the model".into()));
        }
        Ok(TrainState {
            params: ckpt.params.clone(),
            adam: Adam {
                m: ckpt.adam_m.clone(),
                v: ckpt.adam_v.clone(),
                step: ckpt.step,
            },
            epoch: ckpt.epoch,
            history: ckpt.history.clone(),
            best_val: ckpt.best_val,
            step_losses: Vec::new(),
        })
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.config.clone(),
            policy: self.policy.clone(),
            universe: self.universe.clone(),
            epoch: state.epoch,
            step: state.adam.step,
            rng: RngState {
                seed: self.config.seed,
                next_epoch: state.epoch,
            },
            history: state.history.clone(),
            best_val: state.best_val,
            params: state.params.clone(),
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
        }
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Runs one epoch; returns its record.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = state.epoch;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let masks = order
            .iter()
            .map(|_| self.policy.sample_mask(self.universe, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let shifts: Vec<(usize, usize)> = if self.config.shift_augment && !self.train.is_empty() {
            let (_, h, w) = self.train.target[0].dims3();
            order.iter().map(|_| (rng.random_range(0..h), rng.random_range(0..w))).collect()
        } else {
            vec![(0, 0); order.len()]
        };
        let beta = self.config.beta_loss as f32;
        let lr = self.config.lr_at(epoch);
        let mut total = 0.0f64;
        for (batch_no, ((batch, batch_masks), batch_shifts)) in order
            .chunks(self.config.batch_size)
            .zip(masks.chunks(self.config.batch_size))
            .zip(shifts.chunks(self.config.batch_size))
            .enumerate()
        {
            let weight = 1.0 / batch.len() as f32;
            let mut grads = state.params.zeros_like();
            let mut batch_loss = 0.0f32;
            for ((&i, mask), &(dy, dx)) in batch.iter().zip(batch_masks).zip(batch_shifts) {
                let x = self.train.inputs(i, mask).roll(dy, dx);
                let target = self.train.target[i].roll(dy, dx);
                let loss = self.model.accumulate_loss_grad(
                    &state.params,
                    &x,
                    mask,
                    &target,
                    beta,
                    weight,
                    &mut grads,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {} (batch {batch_no}, sample {})",
                        state.adam.step + 1,
                        self.train.indices[i]
                    )));
                }
                batch_loss += loss * weight;
                total += loss as f64;
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name} at epoch {epoch}, step {}",
                    state.adam.step + 1
                )));
            }
            state.adam.update(&mut state.params, &grads, lr, self.config);
            state.step_losses.push(batch_loss);
        }
        let train_loss = total / self.train.len() as f64;
        let val_loss = match self.val {
            Some(v) if !v.is_empty() => Some(self.validation_loss(&state.params, v)?),
            _ => None,
        };
        state.epoch += 1;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        state.history.push(record.clone());
        Ok(record)
    }

    fn validation_loss(&self, params: &ParamStore<f32>, val: &SplitData) -> Result<f64> {
        let beta = self.config.beta_loss as f32;
        let mut total = 0.0;
        for (i, mask) in self.val_masks.iter().enumerate().take(val.len()) {
            let pred = self.model.forward(params, &val.inputs(i, mask), mask)?;
            total += smooth_l1(&pred, &val.target[i], beta)? as f64;
        }
        Ok(total / val.len() as f64)
    }

    /// Trains until `config.epochs` are complete, calling `on_epoch` after
    /// each epoch with the state and whether it is the new best.
    pub fn fit<F>(&self, state: &mut TrainState, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&TrainState, &EpochRecord, bool) -> Result<()>,
    {
        while state.epoch < self.config.epochs {
            let record = self.run_epoch(state)?;
            let score = record.val_loss.unwrap_or(record.train_loss);
            let improved = state.best_val.is_none_or(|b| score < b);
            if improved {
                state.best_val = Some(score);
            }
            on_epoch(state, &record, improved)?;
        }
        Ok(())
    }
}

/// Log lines for one epoch record.
pub fn log_records(record: &EpochRecord) -> Vec<LogRecord> {
    let mut out = vec![LogRecord {
        epoch: record.epoch,
        split: "train".into(),
        loss: record.train_loss,
        wall_time_s: record.wall_time_s,
    }];
    if let Some(v) = record.val_loss {
        out.push(LogRecord {
            epoch: record.epoch,
            split: "val".into(),
            loss: v,
            wall_time_s: record.wall_time_s,
        });
    }
    out
}

/// Prediction of one sample in normalized units.
pub fn predict(model: &Model, params: &ParamStore<f32>, data: &SplitData, i: usize, mask: &AvailabilityMask) -> Result<Tensor<f32>> {
    model.forward(params, &data.inputs(i, mask), mask)
}

/// Checks that two configurations describe the same model apart from the variant.
pub fn same_except_variant(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut b = b.clone();
    b.variant = a.variant;
    a == &b
}

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::tensor::{Tape, Tensor};
use crate::vae::{self, Architecture, VaeModel, DEFAULT_SIGMA0};

use super::lower_bound_graph;

/// Update rule applied to the ascent direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum OptimizerKind {
    /// `θ ← θ + η ∇θ`.
    #[default]
    Sgd,
    /// Heavy-ball: `v ← βv + ∇θ`, `θ ← θ + ηv`.
    Momentum { beta: f64 },
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Radius used as training progresses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum EpsSchedule {
    #[default]
    Constant,
    /// Zero for `warmup` epochs, then grows linearly (per minibatch) to the
    /// target over `ramp` epochs.
    LinearRamp { warmup: usize, ramp: usize },
}

impl EpsSchedule {
    /// Fraction of the target radius reached `progress` epochs into training
    /// (fractional within an epoch).
    pub fn fraction(&self, progress: f64) -> f64 {
        match *self {
            EpsSchedule::Constant => 1.0,
            EpsSchedule::LinearRamp { warmup, ramp } => {
                let t = progress - warmup as f64;
                if t <= 0.0 {
                    0.0
                } else if ramp == 0 || t >= ramp as f64 {
                    1.0
                } else {
                    t / ramp as f64
                }
            }
        }
    }

    pub fn eps_at(&self, target: f64, progress: f64) -> f64 {
        target * self.fraction(progress)
    }

    /// Weight on the clean ELBO: 1 before the ramp, falling linearly to
    /// `target` as the radius reaches its target.
    pub fn clean_weight_at(&self, target: f64, progress: f64) -> f64 {
        1.0 - self.fraction(progress) * (1.0 - target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// ℓ∞ radius of the certified bound being maximized; 0 gives plain VAE training.
    pub eps_train: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sigma0: f64,
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub eps_schedule: EpsSchedule,
    /// Final weight `κ` of the clean ELBO in the ascent objective
    /// `κ·ELBO + (1 - κ)·bound`; 0 ascends the certified bound alone.
    pub clean_weight: f64,
}

impl TrainConfig {
    pub fn new(architecture: Architecture) -> Self {
        TrainConfig {
            eps_train: 0.0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            sigma0: DEFAULT_SIGMA0,
            architecture,
            optimizer: OptimizerKind::Sgd,
            eps_schedule: EpsSchedule::Constant,
            clean_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_train >= 0.0 && self.eps_train.is_finite()) {
            return Err(Error::Config(format!("eps_train must be >= 0, got {}", self.eps_train)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.clean_weight) {
            return Err(Error::Config(format!("clean weight must lie in [0, 1], got {}", self.clean_weight)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be > 0, got {}", self.sigma0)));
        }
        Ok(())
    }
}

/// Fresh model for `cfg`, initialized from `cfg.seed`.
pub fn init_model(cfg: &TrainConfig) -> Result<VaeModel> {
    cfg.validate()?;
    VaeModel::new(cfg.architecture.clone(), cfg.sigma0, cfg.seed)
}

/// Means over the samples seen in one epoch, at the pre-update parameters of
/// each minibatch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Radius used for the last minibatch.
    pub eps_train: f64,
    pub mean_lower: f64,
    pub mean_elbo: f64,
}

/// Mean certified bound and mean clean ELBO over a dataset with shared noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mean_lower: f64,
    pub mean_elbo: f64,
}

/// Runs epochs of certified-bound ascent, keeping optimizer state between them.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    moments: Vec<(Tensor, Tensor)>,
    steps: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, moments: Vec::new(), steps: 0, epoch: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `dataset`: shuffled minibatches, one noise draw per
    /// sample, one ascent step on the minibatch mean of the certified bound.
    pub fn train_epoch(&mut self, model: &mut VaeModel, dataset: &Dataset) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch as u64;
        let order = batches(dataset.len(), self.cfg.batch_size, derive_seed(self.cfg.seed, 2 * epoch))?;
        let mut noise_rng = seeded(derive_seed(self.cfg.seed, 2 * epoch + 1));
        let mut eps = self.cfg.eps_train;
        let (mut lower_sum, mut elbo_sum) = (0.0, 0.0);
        for (bi, idx) in order.iter().enumerate() {
            let xs = dataset.batch(idx)?;
            let noise = standard_normal(&mut noise_rng, [idx.len(), model.latent_dim()])?;
            let progress = self.epoch as f64 + (bi + 1) as f64 / order.len() as f64;
            eps = self.cfg.eps_schedule.eps_at(self.cfg.eps_train, progress);
            let kappa = self.cfg.eps_schedule.clean_weight_at(self.cfg.clean_weight, progress);
            let (lower, elbo) = self.step_mixed(model, &xs, &noise, eps, kappa).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {}, batch {bi}: {msg}", self.epoch)),
                other => other,
            })?;
            lower_sum += lower;
            elbo_sum += elbo;
        }
        let n = dataset.len() as f64;
        let metrics =
            EpochMetrics { epoch: self.epoch, eps_train: eps, mean_lower: lower_sum / n, mean_elbo: elbo_sum / n };
        self.epoch += 1;
        Ok(metrics)
    }

    /// One ascent step on a batch `[B, ...]` with noise `[B, J]`. Returns the
    /// batch sums of the certified bound and of the clean ELBO before the update.
    pub fn step(&mut self, model: &mut VaeModel, xs: &Tensor, noise: &Tensor, eps: f64) -> Result<(f64, f64)> {
        self.step_mixed(model, xs, noise, eps, 0.0)
    }

    /// As [`Trainer::step`], ascending `kappa·ELBO + (1 - kappa)·bound`.
    pub fn step_mixed(
        &mut self,
        model: &mut VaeModel,
        xs: &Tensor,
        noise: &Tensor,
        eps: f64,
        kappa: f64,
    ) -> Result<(f64, f64)> {
        let rows = xs.dims()[0];
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let lb = lower_bound_graph(&bound, xs, eps, noise)?;
        let lower_sum = lb.elbo_lower.to_tensor().sum();
        if !lower_sum.is_finite() {
            return Err(Error::NonFinite(format!("certified bound is {lower_sum}")));
        }
        let mut objective = lb.elbo_lower.sum().scale((1.0 - kappa) / rows as f64);
        if kappa > 0.0 {
            let clean = bound.elbo(tape.constant(xs.clone()), tape.constant(noise.clone()))?;
            objective = objective.add(clean.elbo.sum().scale(kappa / rows as f64))?;
        }
        let grads = tape.backward(objective)?;
        let elbo_sum: f64 = vae::elbo_batch(model, xs, noise)?.iter().map(|t| t.elbo).sum();

        let leaves = bound.params();
        let grads: Vec<&Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            let name = model.params()[i].0.clone();
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.apply(model, &grads);
        Ok((lower_sum, elbo_sum))
    }

    fn apply(&mut self, model: &mut VaeModel, grads: &[&Tensor]) {
        let lr = self.cfg.learning_rate;
        self.steps += 1;
        if self.moments.is_empty() {
            self.moments = grads.iter().map(|g| (Tensor::zeros_like(g), Tensor::zeros_like(g))).collect();
        }
        let t = self.steps as i32;
        for (((_, theta), g), (m, v)) in model.params_mut().into_iter().zip(grads).zip(&mut self.moments) {
            let theta = theta.data_mut();
            match self.cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (p, gi) in theta.iter_mut().zip(g.data()) {
                        *p += lr * gi;
                    }
                }
                OptimizerKind::Momentum { beta } => {
                    for ((p, gi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()) {
                        *vi = beta * *vi + gi;
                        *p += lr * *vi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((p, gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *p += lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Single epoch with fresh optimizer state; `epoch` selects the shuffle and
/// noise streams. Use [`Trainer`] to carry momentum or adaptive state across epochs.
pub fn train_epoch(model: &mut VaeModel, dataset: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochMetrics> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.epoch = epoch;
    trainer.train_epoch(model, dataset)
}

const EVAL_CHUNK: usize = 256;

/// Mean certified bound at radius `eps` and mean clean ELBO, with the noise
/// for sample `i` drawn from stream `i` of `seed` and shared by both terms.
pub fn evaluate(model: &VaeModel, dataset: &Dataset, eps: f64, seed: u64) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let j = model.latent_dim();
    let (mut lower_sum, mut elbo_sum) = (0.0, 0.0);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let xs = dataset.batch(idx)?;
        let rows = idx
            .iter()
            .map(|&i| standard_normal(&mut seeded(derive_seed(seed, i as u64)), [j]))
            .collect::<Result<Vec<_>>>()?;
        let noise = Tensor::stack(&rows.iter().collect::<Vec<_>>())?;
        lower_sum += super::elbo_lower_bound_batch(model, &xs, eps, &noise)?.iter().map(|b| b.elbo_lower).sum::<f64>();
        elbo_sum += vae::elbo_batch(model, &xs, &noise)?.iter().map(|t| t.elbo).sum::<f64>();
    }
    let n = dataset.len() as f64;
    Ok(EvalMetrics { mean_lower: lower_sum / n, mean_elbo: elbo_sum / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn cfg(eps: f64) -> TrainConfig {
        let mut c = TrainConfig::new(Architecture::dense(&[1, 6, 6], 3, &[12]));
        c.eps_train = eps;
        c.batch_size = 8;
        c.learning_rate = 1e-3;
        c.seed = 11;
        c
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(-0.1);
        assert!(c.validate().is_err());
        c.eps_train = 0.1;
        c.learning_rate = 0.0;
        assert!(Trainer::new(c).is_err());
    }

    #[test]
    fn schedule_ramps_then_holds() {
        let s = EpsSchedule::LinearRamp { warmup: 2, ramp: 4 };
        assert_eq!(s.eps_at(0.2, 0.5), 0.0);
        assert_eq!(s.eps_at(0.2, 2.0), 0.0);
        assert!((s.eps_at(0.2, 3.0) - 0.05).abs() < 1e-15);
        assert_eq!(s.eps_at(0.2, 6.0), 0.2);
        assert_eq!(s.eps_at(0.2, 9.5), 0.2);
        assert_eq!(EpsSchedule::Constant.eps_at(0.2, 0.1), 0.2);
        assert_eq!(s.clean_weight_at(0.5, 1.0), 1.0);
        assert!((s.clean_weight_at(0.5, 4.0) - 0.75).abs() < 1e-15);
        assert_eq!(s.clean_weight_at(0.5, 7.0), 0.5);
        assert_eq!(EpsSchedule::Constant.clean_weight_at(0.0, 0.0), 0.0);
    }

    #[test]
    fn epoch_improves_bound_on_toy_set() {
        let data = synthetic_blobs(32, 6, 5).unwrap();
        let c = cfg(0.05);
        let mut model = init_model(&c).unwrap();
        let before = evaluate(&model, &data, c.eps_train, 1).unwrap();
        let mut trainer = Trainer::new(c.clone()).unwrap();
        trainer.train_epoch(&mut model, &data).unwrap();
        let after = evaluate(&model, &data, c.eps_train, 1).unwrap();
        assert!(after.mean_lower > before.mean_lower, "{before:?} -> {after:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_blobs(20, 6, 2).unwrap();
        let run = || {
            let mut c = cfg(0.1);
            c.optimizer = OptimizerKind::adam();
            let mut model = init_model(&c).unwrap();
            let mut t = Trainer::new(c).unwrap();
            let m: Vec<_> = (0..2).map(|_| t.train_epoch(&mut model, &data).unwrap()).collect();
            (m, model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_radius_metrics_coincide() {
        let data = synthetic_blobs(10, 6, 3).unwrap();
        let c = cfg(0.0);
        let mut model = init_model(&c).unwrap();
        let m = train_epoch(&mut model, &data, &c, 0).unwrap();
        assert!((m.mean_lower - m.mean_elbo).abs() < 1e-9);
        let e = evaluate(&model, &data, 0.0, 4).unwrap();
        assert!((e.mean_lower - e.mean_elbo).abs() < 1e-9);
        let e = evaluate(&model, &data, 0.1, 4).unwrap();
        assert!(e.mean_lower <= e.mean_elbo);
    }

    #[test]
    fn clean_weight_is_inert_at_zero_radius() {
        let data = synthetic_blobs(8, 6, 6).unwrap();
        let xs = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let noise = standard_normal(&mut seeded(2), [8, 3]).unwrap();
        let c = cfg(0.0);
        let (mut a, mut b) = (init_model(&c).unwrap(), init_model(&c).unwrap());
        Trainer::new(c.clone()).unwrap().step_mixed(&mut a, &xs, &noise, 0.0, 0.0).unwrap();
        Trainer::new(c.clone()).unwrap().step_mixed(&mut b, &xs, &noise, 0.0, 0.7).unwrap();
        for ((_, p), (_, q)) in a.params().into_iter().zip(b.params()) {
            assert!(p.data().iter().zip(q.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        let mut bad = c;
        bad.clean_weight = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic_blobs(8, 6, 3).unwrap();
        let mut c = cfg(0.0);
        c.learning_rate = 1e300;
        let mut model = init_model(&c).unwrap();
        let mut t = Trainer::new(c).unwrap();
        let err = (0..5).find_map(|_| t.train_epoch(&mut model, &data).err()).unwrap();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("epoch")), "{err}");
    }
}

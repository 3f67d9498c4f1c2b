//! Adam optimizer, mini-batch training steps, the epoch loop with early
//! stopping, and the finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{item_hit_rate, DEFAULT_K};
use crate::exec::Exec;
use crate::model::{EncodedExample, ItemTable, Model, Tape};
use crate::params::{snap, Grads, ParamStore};
use crate::transformer::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Grads,
    v: Grads,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; parameters are re-rounded to `f32`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = params.get_mut(id);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = snap(p[i] - update);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: AdamConfig,
    /// Cutoff for the validation HIT@k.
    pub valid_k: usize,
    /// Examples per parallel work unit. Affects results only through the
    /// order of floating-point summation, never through thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 30,
            patience: 3,
            clip_norm: Some(5.0),
            optimizer: AdamConfig::default(),
            valid_k: DEFAULT_K,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        if self.valid_k == 0 {
            return bad("valid_k must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0 && c.is_finite())) {
            return bad("clip_norm must be positive");
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if o.epsilon.is_nan() || o.epsilon <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (seed, step, example), so dropout masks do not
/// depend on how examples are spread over threads.
fn example_rng(seed: u64, step: u64, example: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(step)) ^ example as u64))
}

/// Mean loss and its gradient over `batch`. `dropout_seed = None` runs in
/// inference mode.
pub fn batch_gradient(
    model: &Model,
    table: &ItemTable,
    batch: &[EncodedExample],
    dropout_seed: Option<(u64, u64)>,
    chunk: usize,
    exec: Exec,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let chunk = chunk.max(1);
    let parts = exec.map_chunks(batch, chunk, |ci, examples| {
        let mut grads = model.params.zeros_like();
        let mut losses = Vec::with_capacity(examples.len());
        for (j, ex) in examples.iter().enumerate() {
            let loss = match dropout_seed {
                Some((seed, step)) => {
                    let mut rng = example_rng(seed, step, ci * chunk + j);
                    model.accumulate(ex, table, &mut Mode::Train(&mut rng), scale, &mut grads)?
                }
                None => model.accumulate(ex, table, &mut Mode::Infer, scale, &mut grads)?,
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} on session `{}` (prefix length {})",
                    ex.example.session_id,
                    ex.example.prefix.len()
                )));
            }
            losses.push(loss);
        }
        Ok((losses, grads))
    });
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (losses, grads) = part?;
        loss += losses.iter().sum::<f64>();
        total.add_assign(&grads);
    }
    Ok((loss * scale, total))
}

/// Optimizer state plus the step counter that keys dropout streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub seed: u64,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model, seed: u64, exec: Exec) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.optimizer, &model.params),
            config,
            seed,
            exec,
        })
    }

    /// Forward and backward over the batch, then one Adam update.
    /// Returns the pre-update mean loss.
    pub fn train_step(&mut self, model: &mut Model, table: &ItemTable, batch: &[EncodedExample]) -> Result<f64> {
        let step = self.adam.steps();
        let (loss, mut grads) =
            batch_gradient(model, table, batch, Some((self.seed, step)), self.config.chunk_size, self.exec)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        if let Some(max) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.adam.step(&mut model.params, &grads);
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub valid_hit: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the best validation epoch (initial ones if none finished).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_hit: Option<f64>,
    pub stop: StopReason,
}

/// Epoch loop with seeded shuffling, validation HIT@k after every epoch and
/// early stopping. A non-finite loss ends training and keeps the best model.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: Model,
    table: &ItemTable,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
    seed: u64,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut model = model;
    let mut trainer = Trainer::new(config.clone(), &model, seed, exec)?;
    let mut best = model.params.clone();
    let mut best_hit: Option<f64> = None;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5348_5546) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<EncodedExample> = idx.iter().map(|&i| train[i].clone()).collect();
            match trainer.train_step(&mut model, table, &batch) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(Error::NonFinite(msg)) => {
                    stop = StopReason::Diverged(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let valid_hit = item_hit_rate(&model, table, valid, config.valid_k, exec)?;
        let improved = best_hit.is_none_or(|b| valid_hit > b);
        if improved {
            best = model.params.clone();
            best_hit = Some(valid_hit);
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            steps: trainer.adam.steps(),
            train_loss: loss_sum / train.len() as f64,
            valid_hit,
            improved,
        };
        on_epoch(&record);
        history.push(record);
        if stale >= config.patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    model.params = best;
    Ok(FitOutcome {
        model,
        history,
        best_epoch,
        best_valid_hit: best_hit,
        stop,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub scalars: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among checked scalars.
    pub max_abs_grad: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Groups with more scalars are checked on a seeded sample of this size.
    pub max_per_group: usize,
    /// Floor on the relative-error denominator, so gradients that are zero
    /// up to rounding do not produce huge ratios.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            max_per_group: 500,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Compare analytic gradients of one example's loss (dropout off) with
/// central differences, reporting the worst relative error per group.
pub fn gradient_check(model: &Model, table: &ItemTable, example: &EncodedExample, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut grads = model.params.zeros_like();
    let mut tape = Tape::new();
    model.forward(table, &example.prefix, &mut Mode::Infer, &mut tape)?;
    model.backward(&tape, table, &example.targets, 1.0, &mut grads)?;

    let mut groups: BTreeMap<String, Vec<(crate::params::ParamId, usize)>> = BTreeMap::new();
    for id in model.params.ids() {
        let t = model.params.tensor(id);
        let g = groups.entry(t.group.clone()).or_default();
        g.extend((0..t.len()).map(|i| (id, i)));
    }

    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(groups.len());
    for (group, scalars) in groups {
        let total = scalars.len();
        let chosen: Vec<_> = if total > config.max_per_group {
            scalars.choose_multiple(&mut rng, config.max_per_group).copied().collect()
        } else {
            scalars
        };
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &(id, i) in &chosen {
            let orig = probe.params.get(id)[i];
            probe.params.get_mut(id)[i] = orig + config.epsilon;
            let up = probe.loss(example, table)?;
            probe.params.get_mut(id)[i] = orig - config.epsilon;
            let down = probe.loss(example, table)?;
            probe.params.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * config.epsilon);
            let analytic = grads.get(id)[i];
            let denom = analytic.abs().max(numeric.abs()).max(config.denominator_floor);
            let rel = (analytic - numeric).abs() / denom;
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            max_abs = max_abs.max(analytic.abs());
        }
        out.push(GroupCheck {
            group,
            scalars: total,
            checked: chosen.len(),
            max_rel_error: worst,
            max_abs_grad: max_abs,
            pass: worst <= config.tolerance,
        });
    }
    let pass = out.iter().all(|g| g.pass);
    Ok(GradCheckReport {
        epsilon: config.epsilon,
        tolerance: config.tolerance,
        groups: out,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{tiny_config, tiny_model};
    use crate::heads::Variant;

    fn encoded(model: &Model, data: &crate::pipeline::PreparedData) -> (ItemTable, Vec<EncodedExample>) {
        let table = model.item_table(&data.catalog).unwrap();
        let ex = model.encode_examples(&data.train, &table);
        (table, ex)
    }

    fn longest(ex: &[EncodedExample]) -> &EncodedExample {
        ex.iter().max_by_key(|e| e.prefix.len()).unwrap()
    }

    #[test]
    fn gradient_check_passes_for_every_variant() {
        for v in Variant::ALL {
            let (model, data) = tiny_model(v, 3);
            let (table, ex) = encoded(&model, &data);
            let report = gradient_check(&model, &table, longest(&ex), &GradCheckConfig::default()).unwrap();
            for g in &report.groups {
                assert!(g.max_abs_grad > 0.0, "{v}: group {} has an all-zero gradient", g.group);
                assert!(g.pass, "{v}: group {} rel error {:e}", g.group, g.max_rel_error);
            }
            assert!(report.pass);
        }
    }

    #[test]
    fn flipped_attention_backward_is_caught() {
        let (mut model, data) = tiny_model(Variant::M2TRec, 3);
        model.encoder.fault_flip_attention = true;
        let (table, ex) = encoded(&model, &data);
        let report = gradient_check(&model, &table, longest(&ex), &GradCheckConfig::default()).unwrap();
        assert!(!report.group("encoder.layer0.attention").unwrap().pass);
        assert!(!report.pass);
    }

    #[test]
    fn zero_weight_head_gets_zero_gradient() {
        let (mut model, data) = tiny_model(Variant::M2TRec, 3);
        let t = model.task_index("category").unwrap();
        model.spec.tasks[t].weight = 0.0;
        let (table, ex) = encoded(&model, &data);
        let report = gradient_check(&model, &table, longest(&ex), &GradCheckConfig::default()).unwrap();
        let g = report.group("head.category").unwrap();
        assert_eq!(g.max_abs_grad, 0.0);
        assert!(g.pass);
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let (mut model, data) = tiny_model(Variant::M2TRec, 1);
        let (table, ex) = encoded(&model, &data);
        let before = model.params.clone();
        let mut cfg = tiny_config().training;
        cfg.optimizer.learning_rate = 0.0;
        let mut trainer = Trainer::new(cfg, &model, 1, Exec::Sequential).unwrap();
        trainer.train_step(&mut model, &table, &ex[..8]).unwrap();
        for (a, b) in before.tensors().iter().zip(model.params.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
    }

    #[test]
    fn repeated_example_loss_decreases() {
        let (mut model, data) = tiny_model(Variant::M2TRec, 2);
        let (table, ex) = encoded(&model, &data);
        let batch = vec![longest(&ex).clone()];
        let mut trainer = Trainer::new(tiny_config().training, &model, 2, Exec::Sequential).unwrap();
        let losses: Vec<f64> = (0..200).map(|_| trainer.train_step(&mut model, &table, &batch).unwrap()).collect();
        assert!(losses[199] < losses[0]);
        // monotone trend over 50-step windows
        let window = |i: usize| losses[i..i + 50].iter().sum::<f64>();
        assert!(window(0) > window(50) && window(50) > window(100) && window(100) > window(150));
    }

    #[test]
    fn batch_of_copies_matches_single_example() {
        let (model, data) = tiny_model(Variant::M2TRec, 4);
        let (table, ex) = encoded(&model, &data);
        let one = vec![ex[3].clone()];
        let many = vec![ex[3].clone(); 6];
        let (l1, g1) = batch_gradient(&model, &table, &one, None, 4, Exec::Sequential).unwrap();
        let (l6, g6) = batch_gradient(&model, &table, &many, None, 4, Exec::Sequential).unwrap();
        assert!((l1 - l6).abs() < 1e-12);
        for (a, b) in g1.iter().zip(g6.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (model, data) = tiny_model(Variant::M2TRec, 5);
        let (table, ex) = encoded(&model, &data);
        let a = batch_gradient(&model, &table, &ex, Some((9, 0)), 4, Exec::Sequential).unwrap();
        let b = batch_gradient(&model, &table, &ex, Some((9, 0)), 4, Exec::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        for (x, y) in a.1.iter().zip(b.1.iter()) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn fit_rejects_empty_validation() {
        let (model, data) = tiny_model(Variant::MeTRec, 1);
        let (table, ex) = encoded(&model, &data);
        let err = fit(model, &table, &ex, &[], &tiny_config().training, 1, Exec::Sequential, &mut |_| {});
        assert!(matches!(err, Err(Error::Empty(_))));
    }

    #[test]
    fn fit_is_deterministic_and_keeps_the_best_epoch() {
        let run = || {
            let (model, data) = tiny_model(Variant::M2TRec, 6);
            let table = model.item_table(&data.catalog).unwrap();
            let train = model.encode_examples(&data.train, &table);
            let valid = model.encode_examples(&data.valid, &table);
            let mut cfg = tiny_config().training;
            cfg.max_epochs = 4;
            fit(model, &table, &train, &valid, &cfg, 6, Exec::Parallel, &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 4);
        let best = a.history.iter().map(|r| r.valid_hit).fold(f64::MIN, f64::max);
        assert_eq!(a.best_valid_hit, Some(best));
        for (x, y) in a.model.params.tensors().iter().zip(b.model.params.tensors()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn adam_keeps_parameters_on_the_f32_grid() {
        let (mut model, data) = tiny_model(Variant::TRecId, 1);
        let (table, ex) = encoded(&model, &data);
        let mut trainer = Trainer::new(tiny_config().training, &model, 1, Exec::Sequential).unwrap();
        trainer.train_step(&mut model, &table, &ex[..4]).unwrap();
        assert!(model.params.tensors().iter().all(|t| t.data.iter().all(|&v| v as f32 as f64 == v)));
    }
}

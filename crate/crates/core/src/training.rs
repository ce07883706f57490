//! Mini-batch training with Adam, learning curves, checkpoints and the
//! gradient-check harness.
//!
//! A batch is cut into fixed-size chunks whose gradients are computed on a
//! rayon pool and then summed in chunk order, so the result does not depend
//! on the number of workers.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{truncate_history, Corpus, Instance, DEFAULT_MAX_HISTORY};
use crate::embedding::{sample_negative, EmbeddingTable, LineReader, PADDING_ID};
use crate::error::{Error, Result};
use crate::model::{
    aux_loss, model_backward, target_loss, total_loss, Model, ModelDims, ModelGrads, ModelVariant, ParamGroup,
};
use crate::numerics::{finite_diff_grad, Vector};

/// Instances per gradient chunk; fixed so reductions are worker-independent.
pub const CHUNK_SIZE: usize = 16;
const CHECKPOINT_MAGIC: &str = "dien-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Width of each of the item and category embeddings.
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub max_history: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::Dien,
            alpha: 1.0,
            epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            embedding_dim: 16,
            hidden_dim: 32,
            mlp_hidden: vec![32],
            max_history: DEFAULT_MAX_HISTORY,
            workers: 1,
        }
    }
}

pub(crate) fn parse_list(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{w}` is not a non-negative integer")))
        })
        .collect()
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "variant",
        "alpha",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "embedding_dim",
        "hidden_dim",
        "mlp_hidden",
        "max_history",
        "workers",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(value)?,
            "max_history" => self.max_history = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mlp = self.mlp_hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("variant", self.variant.to_string()),
            ("alpha", format!("{:?}", self.alpha)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("mlp_hidden", mlp),
            ("max_history", self.max_history.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_history", self.max_history),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("MLP hidden widths must be positive"));
        }
        if self.variant.uses_aux_loss() && self.hidden_dim != 2 * self.embedding_dim {
            return Err(Error::config(format!(
                "DIEN needs hidden_dim = 2 × embedding_dim ({}), got {}",
                2 * self.embedding_dim,
                self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn dims(&self, item_vocab: usize, cat_vocab: usize) -> ModelDims {
        ModelDims {
            item_vocab,
            cat_vocab,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            mlp_hidden: self.mlp_hidden.clone(),
        }
    }

    /// Auxiliary weight actually applied to the loss.
    pub fn effective_alpha(&self) -> f64 {
        if self.variant.uses_aux_loss() {
            self.alpha
        } else {
            0.0
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_target: f64,
    pub l_aux: f64,
    pub l_total: f64,
}

pub const CURVE_HEADER: &str = "epoch,step,l_target,l_aux,l_total";

pub fn write_curves(path: &Path, curve: &[CurveRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{CURVE_HEADER}")?;
        for r in curve {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.l_target, r.l_aux, r.l_total)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) over a flat slice.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(format!(
            "adam_step over {n} parameters got {} gradients and {}/{} moments",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Domain("Adam steps are counted from 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Moment estimates for every parameter of a model; embedding rows are
/// updated lazily, only when they receive gradient.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    dense: Vec<(ParamGroup, Vec<(Vec<f64>, Vec<f64>)>)>,
    item: (Vec<f64>, Vec<f64>),
    cat: (Vec<f64>, Vec<f64>),
}

impl AdamState {
    pub fn new(model: &mut Model) -> Self {
        let mut dense = Vec::new();
        for g in model.groups() {
            if matches!(g, ParamGroup::ItemEmbedding | ParamGroup::CatEmbedding) {
                continue;
            }
            let moments = model
                .group_slices_mut(g)
                .iter()
                .map(|s| (vec![0.0; s.len()], vec![0.0; s.len()]))
                .collect();
            dense.push((g, moments));
        }
        let zeros = |t: &EmbeddingTable| {
            let n = t.vocab_size() * t.dim();
            (vec![0.0; n], vec![0.0; n])
        };
        AdamState {
            t: 0,
            dense,
            item: zeros(&model.item_embedding),
            cat: zeros(&model.cat_embedding),
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &ModelGrads, cfg: &AdamConfig) -> Result<()> {
        self.t += 1;
        let t = self.t;
        for (group, moments) in &mut self.dense {
            let g = grads.dense_slices(*group);
            for ((p, g), (m, v)) in model.group_slices_mut(*group).into_iter().zip(g).zip(moments.iter_mut()) {
                adam_step(p, g, m, v, t, cfg)?;
            }
        }
        for (table, sparse, (m, v)) in [
            (&mut model.item_embedding, &grads.item, &mut self.item),
            (&mut model.cat_embedding, &grads.cat, &mut self.cat),
        ] {
            let dim = table.dim();
            for (&id, g) in sparse {
                if id == PADDING_ID {
                    continue;
                }
                let rows = id * dim..(id + 1) * dim;
                let w = &mut table.weights_mut().as_mut_slice()[rows.clone()];
                adam_step(w, g, &mut m[rows.clone()], &mut v[rows], t, cfg)?;
            }
        }
        Ok(())
    }
}

/// A trained model with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "[config]")?;
        write!(out, "{}", self.config)?;
        writeln!(out, "[params]")?;
        self.model.write_to(out)
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Checkpoint> {
        let mut reader = LineReader::new(input);
        reader.expect_line(CHECKPOINT_MAGIC)?;
        reader.expect_line("[config]")?;
        let mut config = TrainConfig::default();
        loop {
            let line = reader.require_line()?;
            if line == "[params]" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| reader.error(format!("expected `key = value`, found `{line}`")))?;
            config.set(k.trim(), v.trim()).map_err(|e| reader.error(e.to_string()))?;
        }
        let model = Model::read_from(&mut reader)?;
        if model.variant != config.variant {
            return Err(reader.error(format!(
                "checkpoint config says {} but parameters are for {}",
                config.variant, model.variant
            )));
        }
        Ok(Checkpoint { config, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(BufReader::new(file))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRecord>,
}

/// Draws one negative per step `t ≥ 1` of the valid history, never equal to
/// the real behavior at that step. Entry 0 is padding and unused.
pub fn sample_step_negatives<R: Rng + ?Sized>(
    inst: &Instance,
    item_category: &[usize],
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let real_items = item_category.len() - 1;
    let mut out = vec![(PADDING_ID, PADDING_ID); inst.history_len()];
    for t in 1..inst.history_len() {
        let pos = inst.history_items[t];
        if pos == PADDING_ID {
            break;
        }
        let item = sample_negative(rng, real_items, pos - 1)? + 1;
        out[t] = (item, item_category[item]);
    }
    Ok(out)
}

pub(crate) fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

/// Gradient of one batch, computed chunk-parallel and reduced in order.
fn batch_gradients(
    pool: &rayon::ThreadPool,
    model: &Model,
    batch: &[Instance],
    negatives: Option<&[Vec<(usize, usize)>]>,
    alpha: f64,
) -> Result<crate::model::BatchGradients> {
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<_> = pool.install(|| {
        batch
            .par_chunks(CHUNK_SIZE)
            .enumerate()
            .map(|(c, chunk)| {
                let negs = negatives.map(|n| &n[c * CHUNK_SIZE..c * CHUNK_SIZE + chunk.len()]);
                model_backward(model, chunk, negs, alpha, scale)
            })
            .collect()
    });
    let mut parts = parts.into_iter();
    let mut total = parts.next().expect("non-empty batch")?;
    for part in parts {
        let part = part?;
        total.loss.target += part.loss.target;
        total.loss.aux += part.loss.aux;
        total.grads.add_assign(&part.grads);
    }
    Ok(total)
}

fn divergence_guard(config: &TrainConfig, epoch: usize, step: usize, l_target: f64, l_aux: f64, l_total: f64) -> Result<()> {
    if l_target.is_finite() && l_aux.is_finite() && l_total.is_finite() {
        return Ok(());
    }
    Err(Error::Divergence {
        epoch,
        step,
        detail: format!(
            "l_target={l_target} l_aux={l_aux} (variant={}, alpha={}, learning_rate={}, batch_size={}, seed={})",
            config.variant, config.alpha, config.learning_rate, config.batch_size, config.seed
        ),
    })
}

pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Usage("the corpus has no training instances".into()));
    }
    let pool = build_pool(config.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.variant, &config.dims(corpus.n_items(), corpus.n_cats()), &mut rng)?;
    let mut adam = AdamState::new(&mut model);
    let adam_cfg = AdamConfig::with_lr(config.learning_rate);
    let alpha = config.effective_alpha();
    let use_aux = alpha > 0.0;

    let data: Vec<Instance> = corpus
        .train
        .iter()
        .map(|i| truncate_history(i, config.max_history))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let shuffled: Vec<Instance> = order.iter().map(|&i| data[i].clone()).collect();
        let negatives: Option<Vec<Vec<(usize, usize)>>> = if use_aux {
            Some(
                shuffled
                    .iter()
                    .map(|inst| sample_step_negatives(inst, &corpus.item_category, &mut rng))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        for (b, batch) in shuffled.chunks(config.batch_size).enumerate() {
            step += 1;
            let start = b * config.batch_size;
            let negs = negatives.as_ref().map(|n| &n[start..start + batch.len()]);
            let result = batch_gradients(&pool, &model, batch, negs, alpha)?;
            let l_target = result.loss.target;
            let l_aux = result.loss.aux;
            let l_total = total_loss(l_target, l_aux, alpha)?;
            divergence_guard(config, epoch, step, l_target, l_aux, l_total)?;
            adam.apply(&mut model, &result.grads, &adam_cfg)?;
            curve.push(CurveRecord {
                epoch,
                step,
                l_target,
                l_aux,
                l_total,
            });
        }
        if let Some(last) = curve.last() {
            log::info!(
                "{} epoch {epoch}: step {step} l_target {:.5} l_aux {:.5}",
                config.variant,
                last.l_target,
                last.l_aux
            );
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            model,
        },
        curve,
    })
}

/// Batch loss through the forward-only public functions, used as the
/// finite-difference objective.
pub fn forward_loss(model: &Model, batch: &[Instance], negatives: &[Vec<(usize, usize)>], alpha: f64) -> Result<f64> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut traces = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (inst, n) in batch.iter().zip(negatives) {
        let emb = model.embed(inst)?;
        let p = model.forward(&emb, false)?;
        if alpha > 0.0 {
            if let Some(trace) = &p.interest {
                traces.push(trace.clone());
                pos.push(
                    emb.behavior_item_vecs
                        .iter()
                        .zip(&emb.behavior_cat_vecs)
                        .map(|(i, c)| Vector::concat(&[i, c]))
                        .collect(),
                );
                neg.push(
                    n.iter()
                        .map(|&(i, c)| Ok(Vector::concat(&[model.item_embedding.row(i)?, model.cat_embedding.row(c)?])))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        preds.push(p);
    }
    let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();
    let l_target = target_loss(&preds, &labels)?;
    let l_aux = if traces.is_empty() { 0.0 } else { aux_loss(&traces, &pos, &neg)? };
    total_loss(l_target, l_aux, alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub coordinates: usize,
    pub max_relative: f64,
    pub max_absolute: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: ModelVariant,
    pub tolerance: f64,
    pub epsilon: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check for {} (tolerance {:e}, epsilon {:e})",
            self.variant, self.tolerance, self.epsilon
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<15} coords {:>5}  max rel {:.3e}  max abs {:.3e}  {}",
                g.group.name(),
                g.coordinates,
                g.max_relative,
                g.max_absolute,
                if g.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Relative error with a `1e-6` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const GRAD_CHECK_ITEMS: usize = 12;
const GRAD_CHECK_CATS: usize = 5;
const GRAD_CHECK_BATCH: usize = 4;
const GRAD_CHECK_MAX_PARAMS: usize = 20_000;

/// Compares the analytic batch gradient against central finite differences
/// on a seeded toy batch whose histories are `config.max_history` long.
pub fn grad_check(config: &TrainConfig, tolerance: f64, epsilon: f64) -> Result<GradCheckReport> {
    config.validate()?;
    if !(tolerance >= 0.0) {
        return Err(Error::config(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::new(config.variant, &config.dims(GRAD_CHECK_ITEMS, GRAD_CHECK_CATS), &mut rng)?;
    let n_params: usize = model.groups().iter().map(|&g| model.group_values(g).len()).sum();
    if n_params > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::config(format!(
            "gradient check needs toy dimensions; this model has {n_params} parameters (limit {GRAD_CHECK_MAX_PARAMS})"
        )));
    }
    let item_category: Vec<usize> = (0..GRAD_CHECK_ITEMS)
        .map(|i| if i == 0 { 0 } else { (i - 1) % (GRAD_CHECK_CATS - 1) + 1 })
        .collect();
    let t = config.max_history;
    let mut batch = Vec::new();
    for b in 0..GRAD_CHECK_BATCH {
        // one shorter history exercises the padding mask
        let valid = if b == 1 { t.div_ceil(2) } else { t };
        let mut items: Vec<usize> = (0..t).map(|_| rng.random_range(1..GRAD_CHECK_ITEMS)).collect();
        items[valid..].fill(PADDING_ID);
        let cats = items.iter().map(|&i| item_category[i]).collect();
        let target_item = rng.random_range(1..GRAD_CHECK_ITEMS);
        batch.push(Instance {
            history_items: items,
            history_cats: cats,
            target_item,
            target_cat: item_category[target_item],
            label: (b % 2) as u8,
        });
    }
    let negatives: Vec<Vec<(usize, usize)>> = batch
        .iter()
        .map(|i| sample_step_negatives(i, &item_category, &mut rng))
        .collect::<Result<_>>()?;
    let alpha = config.effective_alpha();

    let analytic = model_backward(&model, &batch, Some(&negatives), alpha, 1.0 / batch.len() as f64)?;
    let mut groups = Vec::new();
    for group in model.groups() {
        let base = model.group_values(group);
        let numeric = finite_diff_grad(
            |v| {
                let mut m = model.clone();
                m.set_group_values(group, v);
                forward_loss(&m, &batch, &negatives, alpha).unwrap_or(f64::NAN)
            },
            &base,
            epsilon,
        )?;
        let a = analytic.grads.group_values(group, &model);
        let (mut max_relative, mut max_absolute) = (0.0f64, 0.0f64);
        for (&a, &n) in a.iter().zip(numeric.iter()) {
            max_relative = max_relative.max(relative_error(a, n));
            max_absolute = max_absolute.max((a - n).abs());
        }
        groups.push(GroupCheck {
            group,
            coordinates: base.len(),
            max_relative,
            max_absolute,
            passed: max_relative <= tolerance,
        });
    }
    Ok(GradCheckReport {
        variant: config.variant,
        tolerance,
        epsilon,
        groups,
    })
}

/// Toy configuration used for gradient checks: T=5, 2+2 embedding, hidden 4, MLP [8, 1].
pub fn toy_config(variant: ModelVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        embedding_dim: 2,
        hidden_dim: 4,
        mlp_hidden: Vec::new(),
        max_history: 5,
        seed,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn small_corpus(seed: u64) -> Corpus {
        synth_generate(&SynthConfig {
            n_users: 400,
            n_items: 120,
            n_cats: 6,
            t: 8,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_config(variant: ModelVariant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 2,
            batch_size: 40,
            embedding_dim: 4,
            hidden_dim: 8,
            mlp_hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_matches_direct_transcription() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut p = vec![0.5, -1.0, 2.0];
        let g = vec![0.2, -3.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, &cfg).unwrap();
        for i in 0..3 {
            let m1 = 0.1 * g[i];
            let v1 = 0.001 * g[i] * g[i];
            let mhat = m1 / (1.0 - 0.9);
            let vhat = v1 / (1.0 - 0.999);
            let want = [0.5, -1.0, 2.0][i] - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[i] - want).abs() < 1e-15, "{i}: {} vs {want}", p[i]);
        }
        // first step moves each nonzero coordinate by about lr against its gradient sign
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 2.0);
        assert!(adam_step(&mut p, &g[..2], &mut m, &mut v, 2, &cfg).is_err());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut model = Model::new(ModelVariant::Dien, &toy_config(ModelVariant::Dien, 1).dims(10, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let before = model.clone();
        let mut state = AdamState::new(&mut model);
        let zero = ModelGrads::zeros_for(&model);
        state.apply(&mut model, &zero, &AdamConfig::with_lr(1e-3)).unwrap();
        assert_eq!(state.t, 1);
        assert_eq!(model, before);
    }

    #[test]
    fn sparse_updates_touch_only_batch_ids() {
        let corpus = small_corpus(5);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..small_config(ModelVariant::Dien)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model::new(cfg.variant, &cfg.dims(corpus.n_items(), corpus.n_cats()), &mut rng).unwrap();
        let before = model.clone();
        let inst = corpus.train[0].clone();
        let negs = sample_step_negatives(&inst, &corpus.item_category, &mut rng).unwrap();
        let g = model_backward(&model, &[inst.clone()], Some(&[negs.clone()]), 1.0, 1.0).unwrap();
        let mut state = AdamState::new(&mut model);
        state.apply(&mut model, &g.grads, &AdamConfig::with_lr(1e-3)).unwrap();
        let mut expected: Vec<usize> = inst.history_items.clone();
        expected.push(inst.target_item);
        expected.extend(negs[1..].iter().map(|n| n.0));
        for id in 0..corpus.n_items() {
            let changed = model.item_embedding.row(id).unwrap() != before.item_embedding.row(id).unwrap();
            assert_eq!(changed, expected.contains(&id), "item {id}");
        }
    }

    #[test]
    fn step_negatives_avoid_the_real_behavior() {
        let corpus = small_corpus(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for inst in corpus.train.iter().take(200) {
            let negs = sample_step_negatives(inst, &corpus.item_category, &mut rng).unwrap();
            assert_eq!(negs[0], (PADDING_ID, PADDING_ID));
            for t in 1..inst.history_len() {
                assert_ne!(negs[t].0, inst.history_items[t]);
                assert_ne!(negs[t].0, PADDING_ID);
                assert_eq!(negs[t].1, corpus.item_category[negs[t].0]);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let corpus = small_corpus(7);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config(ModelVariant::Dien)
        };
        let out = train(&corpus, &cfg).unwrap();
        assert!(out.curve.is_empty());
        let init = Model::new(cfg.variant, &cfg.dims(corpus.n_items(), corpus.n_cats()), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.checkpoint.model, init);
    }

    #[test]
    fn training_is_deterministic_across_worker_counts() {
        let corpus = small_corpus(8);
        let cfg = small_config(ModelVariant::Dien);
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        let c = train(&corpus, &TrainConfig { workers: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.model, c.checkpoint.model);
        assert_eq!(a.curve, c.curve);
        assert_eq!(a.curve.len(), 2 * corpus.train.len().div_ceil(40));
        assert!(a.curve.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn aux_loss_is_zero_without_dien() {
        let corpus = small_corpus(9);
        let out = train(&corpus, &small_config(ModelVariant::GruAugru)).unwrap();
        assert!(out.curve.iter().all(|r| r.l_aux == 0.0 && r.l_total == r.l_target));
        let dien = train(&corpus, &TrainConfig { alpha: 0.0, ..small_config(ModelVariant::Dien) }).unwrap();
        assert!(dien.curve.iter().all(|r| r.l_aux == 0.0));
        let with = train(&corpus, &small_config(ModelVariant::Dien)).unwrap();
        assert!(with.curve.iter().all(|r| r.l_aux > 0.0));
    }

    #[test]
    fn empty_training_split_is_a_usage_error() {
        let mut corpus = small_corpus(10);
        corpus.train.clear();
        assert!(matches!(train(&corpus, &small_config(ModelVariant::Base)), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small_config(ModelVariant::Base);
        for bad in [
            TrainConfig { alpha: -1.0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { workers: 0, ..base.clone() },
            TrainConfig { variant: ModelVariant::Dien, hidden_dim: 7, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let cfg = small_config(ModelVariant::Dien);
        assert!(divergence_guard(&cfg, 1, 1, 0.7, 1.3, 2.0).is_ok());
        for (lt, la) in [(f64::NAN, 1.0), (0.5, f64::INFINITY)] {
            match divergence_guard(&cfg, 2, 17, lt, la, lt + la) {
                Err(Error::Divergence { epoch: 2, step: 17, detail }) => {
                    assert!(detail.contains("learning_rate") && detail.contains("DIEN"));
                }
                other => panic!("expected divergence, got {other:?}"),
            }
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let corpus = small_corpus(12);
        let out = train(&corpus, &TrainConfig { epochs: 1, ..small_config(ModelVariant::Dien) }).unwrap();
        let mut buf = Vec::new();
        out.checkpoint.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, out.checkpoint);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn grad_check_reports() {
        let dien = grad_check(&toy_config(ModelVariant::Dien, 3), 1e-4, 1e-5).unwrap();
        assert!(dien.passed(), "{dien}");
        assert_eq!(dien.groups.len(), 6);
        let base = grad_check(&toy_config(ModelVariant::Base, 3), 1e-4, 1e-5).unwrap();
        assert!(base.passed(), "{base}");
        assert_eq!(
            base.groups.iter().map(|g| g.group).collect::<Vec<_>>(),
            vec![ParamGroup::ItemEmbedding, ParamGroup::CatEmbedding, ParamGroup::Mlp]
        );
        let strict = grad_check(&toy_config(ModelVariant::Dien, 3), 0.0, 1e-5).unwrap();
        assert!(!strict.passed());
        assert!(strict.groups.iter().any(|g| g.max_relative > 0.0));
    }

    #[test]
    fn config_entries_round_trip() {
        let cfg = TrainConfig {
            alpha: 0.25,
            mlp_hidden: vec![7, 3],
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("nope", "1").is_err());
        assert_eq!(TrainConfig::KEYS.to_vec(), cfg.entries().iter().map(|e| e.0).collect::<Vec<_>>());
    }
}

//! Full networks and their losses.
//!
//! Every variant shares the same outer shape: embed the behaviors and the
//! target, turn the behavior sequence into one interest vector, concatenate
//! it with the target embedding (and an optional profile vector), and feed a
//! ReLU MLP ending in a single sigmoid logit.
//!
//! | variant             | interest vector                                         |
//! |---------------------|---------------------------------------------------------|
//! | `BASE`              | sum of valid behavior embeddings                        |
//! | `TWO_LAYER_GRU_ATT` | attention-weighted sum of second-layer GRU states       |
//! | `GRU_AIGRU`         | last state of a GRU over attention-scaled interests     |
//! | `GRU_AGRU`          | last state of AGRU over extractor states                |
//! | `GRU_AUGRU`         | last state of AUGRU over extractor states               |
//! | `DIEN`              | as `GRU_AUGRU`, trained with the auxiliary loss         |
//!
//! The auxiliary loss scores each extractor state against the next real
//! behavior and a sampled negative with `σ(⟨h_t, e⟩)`, which requires the
//! hidden size to equal the behavior embedding width.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;

use crate::data::Instance;
use crate::embedding::{write_row, EmbeddingTable, LineReader, PADDING_ID};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gemv_into, gemv_t_add, add_outer, sigmoid_scalar, softplus, Matrix, Vector};
use crate::recurrent::{
    AttentionParams, EvolutionCell, EvolutionTrace, GruParams, InterestStack, InterestTrace, StackGrads,
    StackMode, StackOutput, GRU_PARAM_NAMES,
};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    Base,
    TwoLayerGruAtt,
    GruAigru,
    GruAgru,
    GruAugru,
    Dien,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Base,
        ModelVariant::TwoLayerGruAtt,
        ModelVariant::GruAigru,
        ModelVariant::GruAgru,
        ModelVariant::GruAugru,
        ModelVariant::Dien,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Base => "BASE",
            ModelVariant::TwoLayerGruAtt => "TWO_LAYER_GRU_ATT",
            ModelVariant::GruAigru => "GRU_AIGRU",
            ModelVariant::GruAgru => "GRU_AGRU",
            ModelVariant::GruAugru => "GRU_AUGRU",
            ModelVariant::Dien => "DIEN",
        }
    }

    pub fn stack_mode(self) -> Option<StackMode> {
        match self {
            ModelVariant::Base => None,
            ModelVariant::TwoLayerGruAtt => Some(StackMode::TwoLayerAttention),
            ModelVariant::GruAigru => Some(StackMode::Evolve(EvolutionCell::Aigru)),
            ModelVariant::GruAgru => Some(StackMode::Evolve(EvolutionCell::Agru)),
            ModelVariant::GruAugru | ModelVariant::Dien => Some(StackMode::Evolve(EvolutionCell::Augru)),
        }
    }

    /// Only DIEN trains with the auxiliary loss.
    pub fn uses_aux_loss(self) -> bool {
        self == ModelVariant::Dien
    }

    pub fn is_recurrent(self) -> bool {
        self != ModelVariant::Base
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == upper)
            .ok_or_else(|| Error::config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

/// ReLU MLP with a single output logit.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
struct MlpTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpParams {
    /// `widths` runs from the input width to the final `1`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.last() != Some(&1) || widths.contains(&0) {
            return Err(Error::config(format!(
                "MLP widths must be positive, at least two long and end in 1, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                DenseLayer {
                    w: Matrix::new(fan_out, fan_in, data).expect("positive widths"),
                    b: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: Vector::zeros(l.b.len()),
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.w.rows()));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), &mut l.b[..]])
            .collect()
    }

    fn forward(&self, x: &[f64], record: bool) -> Result<(f64, Option<MlpTape>)> {
        if x.len() != self.input_width() {
            return Err(Error::config(format!(
                "MLP expects {} inputs, the concatenated features have {}",
                self.input_width(),
                x.len()
            )));
        }
        let mut tape = MlpTape {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.w.rows()];
            gemv_into(&layer.w, &a, &mut z);
            axpy(1.0, &layer.b, &mut z);
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            if record {
                tape.inputs.push(std::mem::replace(&mut a, next));
                tape.pre.push(z);
            } else {
                a = next;
            }
        }
        Ok((a[0], record.then_some(tape)))
    }

    fn backward(&self, tape: &MlpTape, d_logit: f64, grads: &mut MlpParams) -> Vec<f64> {
        let mut d = vec![d_logit];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            add_outer(&mut grads.layers[l].w, &d, &tape.inputs[l]);
            axpy(1.0, &d, &mut grads.layers[l].b);
            let mut d_in = vec![0.0; layer.w.cols()];
            gemv_t_add(&layer.w, &d, &mut d_in);
            if l > 0 {
                for (g, z) in d_in.iter_mut().zip(&tape.pre[l - 1]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = d_in;
        }
        d
    }

    fn add_assign(&mut self, other: &MlpParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(1.0, src, dst);
        }
    }
}

/// Embedded features of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbeddings {
    pub behavior_item_vecs: Vec<Vector>,
    pub behavior_cat_vecs: Vec<Vector>,
    /// Concatenated item and category embedding of the target.
    pub target_vec: Vector,
    pub profile_vec: Option<Vector>,
    pub valid_len: usize,
}

impl FeatureEmbeddings {
    fn behavior_inputs(&self) -> Result<Vec<Vec<f64>>> {
        if self.behavior_item_vecs.len() != self.behavior_cat_vecs.len() {
            return Err(Error::shape(format!(
                "{} item vectors but {} category vectors",
                self.behavior_item_vecs.len(),
                self.behavior_cat_vecs.len()
            )));
        }
        if self.valid_len > self.behavior_item_vecs.len() {
            return Err(Error::shape(format!(
                "valid_len {} exceeds history length {}",
                self.valid_len,
                self.behavior_item_vecs.len()
            )));
        }
        Ok(self
            .behavior_item_vecs
            .iter()
            .zip(&self.behavior_cat_vecs)
            .map(|(i, c)| [i.as_slice(), c.as_slice()].concat())
            .collect())
    }

    pub fn behavior_width(&self) -> usize {
        self.behavior_item_vecs
            .first()
            .map_or(0, |v| v.len() + self.behavior_cat_vecs[0].len())
    }
}

/// Cached forward state of one instance.
#[derive(Clone, Debug)]
pub struct ForwardContext {
    inputs: Vec<Vec<f64>>,
    valid_len: usize,
    interest_width: usize,
    stack: Option<StackOutput>,
    mlp: MlpTape,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub p: f64,
    pub logit: f64,
    pub interest: Option<InterestTrace>,
    pub evolution: Option<EvolutionTrace>,
    context: Option<ForwardContext>,
}

impl Prediction {
    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }
}

fn head_input(interest: &[f64], emb: &FeatureEmbeddings) -> Vec<f64> {
    let mut x = Vec::with_capacity(interest.len() + emb.target_vec.len() + 8);
    x.extend_from_slice(interest);
    x.extend_from_slice(&emb.target_vec);
    if let Some(p) = &emb.profile_vec {
        x.extend_from_slice(p);
    }
    x
}

fn predict_with(
    interest: Vec<f64>,
    emb: &FeatureEmbeddings,
    mlp: &MlpParams,
    inputs: Vec<Vec<f64>>,
    stack: Option<StackOutput>,
    record: bool,
) -> Result<Prediction> {
    let x = head_input(&interest, emb);
    let (logit, tape) = mlp.forward(&x, record)?;
    let (interest_trace, evolution) = match &stack {
        Some(s) => (Some(s.interest.clone()), Some(s.evolution.clone())),
        None => (None, None),
    };
    Ok(Prediction {
        p: sigmoid_scalar(logit),
        logit,
        interest: interest_trace,
        evolution,
        context: tape.map(|mlp| ForwardContext {
            inputs,
            valid_len: emb.valid_len,
            interest_width: interest.len(),
            stack,
            mlp,
        }),
    })
}

fn base_forward_impl(emb: &FeatureEmbeddings, mlp: &MlpParams, record: bool) -> Result<Prediction> {
    let inputs = emb.behavior_inputs()?;
    let width = if inputs.is_empty() {
        emb.target_vec.len()
    } else {
        inputs[0].len()
    };
    let mut pooled = vec![0.0; width];
    for x in &inputs[..emb.valid_len] {
        axpy(1.0, x, &mut pooled);
    }
    predict_with(pooled, emb, mlp, inputs, None, record)
}

/// BaseModel: sum pooling over valid behaviors, then the MLP head.
pub fn base_forward(embeddings: &FeatureEmbeddings, mlp: &MlpParams) -> Result<Prediction> {
    base_forward_impl(embeddings, mlp, false)
}

fn recurrent_forward_impl(emb: &FeatureEmbeddings, variant: ModelVariant, model: &Model, record: bool) -> Result<Prediction> {
    let mode = variant
        .stack_mode()
        .ok_or_else(|| Error::config("the BASE variant has no recurrent interest layers"))?;
    let inputs = emb.behavior_inputs()?;
    let stack = model.stack(mode);
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let out = stack.forward(&refs, emb.valid_len, &emb.target_vec, record)?;
    let interest = out.interest_vector.to_vec();
    predict_with(interest, emb, &model.mlp, inputs, Some(out), record)
}

/// Extractor GRU → attention → evolution (per variant) → MLP head.
pub fn dien_forward(embeddings: &FeatureEmbeddings, variant: ModelVariant, model: &Model) -> Result<Prediction> {
    recurrent_forward_impl(embeddings, variant, model, false)
}

/// Binary cross-entropy of one clamped probability.
pub fn log_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn log_loss_grad(p: f64, label: u8) -> f64 {
    if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
        0.0
    } else {
        p - label as f64
    }
}

/// Mean binary cross-entropy over a batch.
pub fn target_loss(preds: &[Prediction], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Usage("target loss over an empty batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(preds.iter().zip(labels).map(|(p, &y)| log_loss(p.p, y)).sum::<f64>() / preds.len() as f64)
}

fn aux_terms(h: &[f64], pos: &[f64], neg: &[f64]) -> (f64, f64, f64) {
    let zp = dot(h, pos);
    let zn = dot(h, neg);
    // -log σ(zp) - log(1 - σ(zn))
    let loss = softplus(-zp) + softplus(zn);
    (loss, sigmoid_scalar(zp) - 1.0, sigmoid_scalar(zn))
}

/// Next-behavior discrimination loss over extractor states.
///
/// `pos_seqs[i][t]` is the real behavior embedding at step `t` and
/// `neg_seqs[i][t]` the sampled negative for that step; state `h_t` is
/// scored against step `t + 1` for every `t < valid_len - 1`.
pub fn aux_loss(traces: &[InterestTrace], pos_seqs: &[Vec<Vector>], neg_seqs: &[Vec<Vector>]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Usage("auxiliary loss over an empty batch".into()));
    }
    if pos_seqs.len() != traces.len() || neg_seqs.len() != traces.len() {
        return Err(Error::shape("auxiliary loss needs one positive and one negative sequence per trace"));
    }
    let mut total = 0.0;
    for ((trace, pos), neg) in traces.iter().zip(pos_seqs).zip(neg_seqs) {
        let steps = trace.valid_len.saturating_sub(1);
        if pos.len() < trace.valid_len || neg.len() < trace.valid_len {
            return Err(Error::shape("behavior sequences shorter than the trace"));
        }
        for t in 0..steps {
            let h = &trace.hidden[t];
            if h.len() != pos[t + 1].len() || h.len() != neg[t + 1].len() {
                return Err(Error::config(format!(
                    "hidden size {} differs from behavior embedding width {}",
                    h.len(),
                    pos[t + 1].len()
                )));
            }
            total += aux_terms(h, &pos[t + 1], &neg[t + 1]).0;
        }
    }
    Ok(total / traces.len() as f64)
}

pub fn total_loss(l_target: f64, l_aux: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(l_target + alpha * l_aux)
}

/// Sizes needed to build a [`Model`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub item_vocab: usize,
    pub cat_vocab: usize,
    /// Width of each of the item and category embeddings.
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Hidden widths of the MLP head; the input width and final 1 are implied.
    pub mlp_hidden: Vec<usize>,
}

impl ModelDims {
    pub fn behavior_width(&self) -> usize {
        2 * self.embedding_dim
    }

    pub fn mlp_widths(&self, variant: ModelVariant) -> Vec<usize> {
        let interest = if variant.is_recurrent() {
            self.hidden_dim
        } else {
            self.behavior_width()
        };
        let mut w = vec![interest + self.behavior_width()];
        w.extend(&self.mlp_hidden);
        w.push(1);
        w
    }
}

/// Parameter groups, in the order used by the optimizer and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ItemEmbedding,
    CatEmbedding,
    Extractor,
    Evolution,
    Attention,
    Mlp,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ItemEmbedding => "item_embedding",
            ParamGroup::CatEmbedding => "cat_embedding",
            ParamGroup::Extractor => "extractor",
            ParamGroup::Evolution => "evolution",
            ParamGroup::Attention => "attention",
            ParamGroup::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub item_embedding: EmbeddingTable,
    pub cat_embedding: EmbeddingTable,
    pub extractor: GruParams,
    pub evolution: GruParams,
    pub attention: AttentionParams,
    pub mlp: MlpParams,
}

/// Gradients of every parameter group; embedding gradients are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub item: BTreeMap<usize, Vec<f64>>,
    pub cat: BTreeMap<usize, Vec<f64>>,
    pub stack: StackGrads,
    pub mlp: MlpParams,
}

impl ModelGrads {
    pub fn zeros_for(model: &Model) -> Self {
        let mode = model.variant.stack_mode().unwrap_or(StackMode::TwoLayerAttention);
        ModelGrads {
            item: BTreeMap::new(),
            cat: BTreeMap::new(),
            stack: StackGrads::zeros_like(&model.stack(mode)),
            mlp: model.mlp.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (mine, theirs) in [(&mut self.item, &other.item), (&mut self.cat, &other.cat)] {
            for (id, g) in theirs {
                match mine.get_mut(id) {
                    Some(slot) => axpy(1.0, g, slot),
                    None => {
                        mine.insert(*id, g.clone());
                    }
                }
            }
        }
        self.stack.extractor.add_assign(&other.stack.extractor);
        self.stack.evolution.add_assign(&other.stack.evolution);
        axpy(1.0, other.stack.attention.as_slice(), self.stack.attention.as_mut_slice());
        self.mlp.add_assign(&other.mlp);
    }

    /// Gradient slices of a dense group, aligned with [`Model::group_slices_mut`].
    pub fn dense_slices(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::ItemEmbedding | ParamGroup::CatEmbedding => Vec::new(),
            ParamGroup::Extractor => self.stack.extractor.slices().into(),
            ParamGroup::Evolution => self.stack.evolution.slices().into(),
            ParamGroup::Attention => vec![self.stack.attention.as_slice()],
            ParamGroup::Mlp => self.mlp.slices(),
        }
    }

    /// Dense flattening of one group, matching [`Model::group_values`].
    pub fn group_values(&self, group: ParamGroup, model: &Model) -> Vec<f64> {
        let sparse = |map: &BTreeMap<usize, Vec<f64>>, table: &EmbeddingTable| {
            let mut dense = vec![0.0; table.vocab_size() * table.dim()];
            for (id, g) in map {
                dense[id * table.dim()..(id + 1) * table.dim()].copy_from_slice(g);
            }
            dense
        };
        match group {
            ParamGroup::ItemEmbedding => sparse(&self.item, &model.item_embedding),
            ParamGroup::CatEmbedding => sparse(&self.cat, &model.cat_embedding),
            ParamGroup::Extractor => self.stack.extractor.slices().concat(),
            ParamGroup::Evolution => self.stack.evolution.slices().concat(),
            ParamGroup::Attention => self.stack.attention.as_slice().to_vec(),
            ParamGroup::Mlp => self.mlp.slices().concat(),
        }
    }
}

/// Loss terms of one instance (already divided by the batch size).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InstanceLoss {
    pub target: f64,
    pub aux: f64,
}

/// Summed scaled losses and gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: InstanceLoss,
    pub grads: ModelGrads,
}

/// Reverse pass over `batch` in order, each instance weighted by `scale`.
///
/// `negatives[i]` holds the per-step negatives of instance `i`; pass `None`
/// to train without the auxiliary loss.
pub fn model_backward(
    model: &Model,
    batch: &[Instance],
    negatives: Option<&[Vec<(usize, usize)>]>,
    alpha: f64,
    scale: f64,
) -> Result<BatchGradients> {
    if let Some(n) = negatives {
        if n.len() != batch.len() {
            return Err(Error::shape(format!("{} negative sequences for {} instances", n.len(), batch.len())));
        }
    }
    let mut grads = ModelGrads::zeros_for(model);
    let mut loss = InstanceLoss::default();
    for (i, inst) in batch.iter().enumerate() {
        let neg = negatives.map(|n| n[i].as_slice());
        let l = model.accumulate_instance(inst, neg, alpha, scale, &mut grads)?;
        loss.target += l.target;
        loss.aux += l.aux;
    }
    Ok(BatchGradients { loss, grads })
}

impl Model {
    pub fn new<R: Rng + ?Sized>(variant: ModelVariant, dims: &ModelDims, rng: &mut R) -> Result<Model> {
        if dims.embedding_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::config("embedding and hidden sizes must be positive"));
        }
        if variant.uses_aux_loss() && dims.hidden_dim != dims.behavior_width() {
            return Err(Error::config(format!(
                "{variant} scores hidden states against behavior embeddings, so hidden_dim ({}) \
                 must equal twice embedding_dim ({})",
                dims.hidden_dim,
                dims.behavior_width()
            )));
        }
        let item_embedding = EmbeddingTable::init(dims.item_vocab, dims.embedding_dim, rng)?;
        let cat_embedding = EmbeddingTable::init(dims.cat_vocab, dims.embedding_dim, rng)?;
        let n = dims.hidden_dim;
        let extractor = GruParams::init(n, dims.behavior_width(), rng);
        let evolution = GruParams::init(n, n, rng);
        let attention = AttentionParams::init(n, dims.behavior_width(), rng);
        let mlp = MlpParams::init(&dims.mlp_widths(variant), rng)?;
        Ok(Model {
            variant,
            item_embedding,
            cat_embedding,
            extractor,
            evolution,
            attention,
            mlp,
        })
    }

    /// The auxiliary weight actually applied: `alpha` for DIEN, 0 otherwise.
    pub fn effective_alpha(&self, alpha: f64) -> f64 {
        if self.variant.uses_aux_loss() {
            alpha
        } else {
            0.0
        }
    }

    pub fn dims(&self) -> ModelDims {
        let widths = self.mlp.widths();
        ModelDims {
            item_vocab: self.item_embedding.vocab_size(),
            cat_vocab: self.cat_embedding.vocab_size(),
            embedding_dim: self.item_embedding.dim(),
            hidden_dim: self.extractor.hidden_dim(),
            mlp_hidden: widths[1..widths.len() - 1].to_vec(),
        }
    }

    pub fn stack(&self, mode: StackMode) -> InterestStack<'_> {
        InterestStack {
            extractor: &self.extractor,
            evolution: &self.evolution,
            attention: &self.attention,
            mode,
        }
    }

    /// Groups that receive gradient under this model's variant.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::ItemEmbedding, ParamGroup::CatEmbedding];
        if self.variant.is_recurrent() {
            g.extend([ParamGroup::Extractor, ParamGroup::Evolution, ParamGroup::Attention]);
        }
        g.push(ParamGroup::Mlp);
        g
    }

    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::ItemEmbedding => self.item_embedding.weights().as_slice().to_vec(),
            ParamGroup::CatEmbedding => self.cat_embedding.weights().as_slice().to_vec(),
            ParamGroup::Extractor => self.extractor.slices().concat(),
            ParamGroup::Evolution => self.evolution.slices().concat(),
            ParamGroup::Attention => self.attention.w.as_slice().to_vec(),
            ParamGroup::Mlp => self.mlp.slices().concat(),
        }
    }

    /// Mutable views of the dense parameter slices of a group.
    pub fn group_slices_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::ItemEmbedding => vec![self.item_embedding.weights_mut().as_mut_slice()],
            ParamGroup::CatEmbedding => vec![self.cat_embedding.weights_mut().as_mut_slice()],
            ParamGroup::Extractor => self.extractor.slices_mut().into(),
            ParamGroup::Evolution => self.evolution.slices_mut().into(),
            ParamGroup::Attention => vec![self.attention.w.as_mut_slice()],
            ParamGroup::Mlp => self.mlp.slices_mut(),
        }
    }

    pub fn set_group_values(&mut self, group: ParamGroup, values: &[f64]) {
        let mut offset = 0;
        for s in self.group_slices_mut(group) {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        debug_assert_eq!(offset, values.len());
    }

    fn behavior_vec(&self, item: usize, cat: usize) -> Result<Vec<f64>> {
        Ok([self.item_embedding.row(item)?, self.cat_embedding.row(cat)?].concat())
    }

    /// Looks up an instance. The history is valid up to its first padding id.
    pub fn embed(&self, inst: &Instance) -> Result<FeatureEmbeddings> {
        if inst.history_items.len() != inst.history_cats.len() {
            return Err(Error::shape("history items and categories are not aligned"));
        }
        let valid_len = inst
            .history_items
            .iter()
            .position(|&id| id == PADDING_ID)
            .unwrap_or(inst.history_items.len());
        let zeros = Vector::zeros(self.item_embedding.dim());
        let mut items = Vec::with_capacity(inst.history_items.len());
        let mut cats = Vec::with_capacity(inst.history_items.len());
        for (t, (&i, &c)) in inst.history_items.iter().zip(&inst.history_cats).enumerate() {
            if t < valid_len {
                items.push(self.item_embedding.lookup(i)?);
                cats.push(self.cat_embedding.lookup(c)?);
            } else {
                items.push(zeros.clone());
                cats.push(zeros.clone());
            }
        }
        Ok(FeatureEmbeddings {
            behavior_item_vecs: items,
            behavior_cat_vecs: cats,
            target_vec: Vector::from_vec(self.behavior_vec(inst.target_item, inst.target_cat)?),
            profile_vec: None,
            valid_len,
        })
    }

    pub fn forward(&self, emb: &FeatureEmbeddings, record: bool) -> Result<Prediction> {
        if self.variant.is_recurrent() {
            recurrent_forward_impl(emb, self.variant, self, record)
        } else {
            base_forward_impl(emb, &self.mlp, record)
        }
    }

    pub fn predict(&self, inst: &Instance) -> Result<f64> {
        Ok(self.forward(&self.embed(inst)?, false)?.p)
    }

    /// Adds the gradient of `scale · (log_loss + alpha · aux)` for one
    /// instance into `grads` and returns the scaled loss terms.
    ///
    /// `negatives[t]` is the sampled (item, category) paired with behavior
    /// `t`; entry 0 is unused. Pass `None` or `alpha = 0` to skip the
    /// auxiliary loss.
    pub fn accumulate_instance(
        &self,
        inst: &Instance,
        negatives: Option<&[(usize, usize)]>,
        alpha: f64,
        scale: f64,
        grads: &mut ModelGrads,
    ) -> Result<InstanceLoss> {
        let emb = self.embed(inst)?;
        let pred = self.forward(&emb, true)?;
        let target = log_loss(pred.p, inst.label) * scale;
        let d_logit = log_loss_grad(pred.p, inst.label) * scale;

        let ctx = pred.context.as_ref().expect("recorded forward");
        let valid_len = ctx.valid_len;
        let use_aux = alpha > 0.0 && self.variant.is_recurrent() && negatives.is_some();

        let mut aux = 0.0;
        let mut d_extractor: Option<Vec<Vec<f64>>> = None;
        let mut d_neg: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let mut d_inputs_aux: Vec<Vec<f64>> = Vec::new();
        if use_aux {
            let negatives = negatives.unwrap_or_default();
            if negatives.len() < valid_len {
                return Err(Error::shape(format!(
                    "{} negatives for a history of {valid_len} behaviors",
                    negatives.len()
                )));
            }
            let stack = ctx.stack.as_ref().expect("recurrent context");
            let hidden = &stack.interest.hidden;
            let n = self.extractor.hidden_dim();
            if n != emb.behavior_width() {
                return Err(Error::config(format!(
                    "hidden size {n} differs from behavior embedding width {}",
                    emb.behavior_width()
                )));
            }
            let mut d_h = vec![vec![0.0; n]; hidden.len()];
            d_inputs_aux = vec![vec![0.0; n]; hidden.len()];
            let w = alpha * scale;
            for t in 0..valid_len.saturating_sub(1) {
                let (ni, nc) = negatives[t + 1];
                let neg = self.behavior_vec(ni, nc)?;
                let pos = &ctx.inputs[t + 1];
                let (l, dp, dn) = aux_terms(&hidden[t], pos, &neg);
                aux += l * scale;
                axpy(w * dp, pos, &mut d_h[t]);
                axpy(w * dn, &neg, &mut d_h[t]);
                axpy(w * dp, &hidden[t], &mut d_inputs_aux[t + 1]);
                d_neg.push((ni, nc, hidden[t].iter().map(|v| w * dn * v).collect()));
            }
            d_extractor = Some(d_h);
        }

        let d_head = self.mlp.backward(&ctx.mlp, d_logit, &mut grads.mlp);
        let (d_interest, rest) = d_head.split_at(ctx.interest_width);
        let d_target = &rest[..emb.target_vec.len()];

        let mut d_inputs = match &ctx.stack {
            Some(out) => {
                let stack = self.stack(self.variant.stack_mode().expect("recurrent"));
                let g = out.backward(&stack, d_interest, d_extractor.as_deref(), &mut grads.stack)?;
                let mut d_e_a = g.d_e_a;
                axpy(1.0, d_target, &mut d_e_a);
                (g.d_inputs, d_e_a)
            }
            None => {
                let mut d = vec![vec![0.0; emb.behavior_width()]; ctx.inputs.len()];
                for row in d.iter_mut().take(valid_len) {
                    row.copy_from_slice(d_interest);
                }
                (d, d_target.to_vec())
            }
        };
        for (t, extra) in d_inputs_aux.iter().enumerate() {
            axpy(1.0, extra, &mut d_inputs.0[t]);
        }

        let dim = self.item_embedding.dim();
        let add = |map: &mut BTreeMap<usize, Vec<f64>>, id: usize, g: &[f64]| match map.get_mut(&id) {
            Some(slot) => axpy(1.0, g, slot),
            None => {
                map.insert(id, g.to_vec());
            }
        };
        for t in 0..valid_len {
            let g = &d_inputs.0[t];
            add(&mut grads.item, inst.history_items[t], &g[..dim]);
            add(&mut grads.cat, inst.history_cats[t], &g[dim..]);
        }
        add(&mut grads.item, inst.target_item, &d_inputs.1[..dim]);
        add(&mut grads.cat, inst.target_cat, &d_inputs.1[dim..2 * dim]);
        for (ni, nc, g) in &d_neg {
            add(&mut grads.item, *ni, &g[..dim]);
            add(&mut grads.cat, *nc, &g[dim..]);
        }
        Ok(InstanceLoss { target, aux })
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "variant {}", self.variant)?;
        writeln!(out, "mlp_widths {}", join(&self.mlp.widths()))?;
        writeln!(out, "embedding item")?;
        self.item_embedding.write_to(out)?;
        writeln!(out, "embedding cat")?;
        self.cat_embedding.write_to(out)?;
        for (prefix, gru) in [("extractor", &self.extractor), ("evolution", &self.evolution)] {
            let mats = [&gru.w_u, &gru.w_r, &gru.w_h, &gru.u_u, &gru.u_r, &gru.u_h];
            for (name, m) in GRU_PARAM_NAMES.iter().zip(mats) {
                write_matrix(out, &format!("{prefix}.{name}"), m.rows(), m.cols(), m.as_slice())?;
            }
            for (name, b) in GRU_PARAM_NAMES[6..].iter().zip([&gru.b_u, &gru.b_r, &gru.b_h]) {
                write_matrix(out, &format!("{prefix}.{name}"), 1, b.len(), b)?;
            }
        }
        let w = &self.attention.w;
        write_matrix(out, "attention.w", w.rows(), w.cols(), w.as_slice())?;
        for (l, layer) in self.mlp.layers.iter().enumerate() {
            write_matrix(out, &format!("mlp.{l}.w"), layer.w.rows(), layer.w.cols(), layer.w.as_slice())?;
            write_matrix(out, &format!("mlp.{l}.b"), 1, layer.b.len(), &layer.b)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut LineReader<R>) -> Result<Model> {
        let variant: ModelVariant = keyed(input, "variant")?.parse()?;
        let widths: Vec<usize> = keyed(input, "mlp_widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| input.error(format!("bad MLP width `{w}`"))))
            .collect::<Result<_>>()?;
        input.expect_line("embedding item")?;
        let item_embedding = EmbeddingTable::read_from(input)?;
        input.expect_line("embedding cat")?;
        let cat_embedding = EmbeddingTable::read_from(input)?;
        let mut grus = Vec::new();
        for prefix in ["extractor", "evolution"] {
            let mut mats = Vec::new();
            for name in &GRU_PARAM_NAMES[..6] {
                mats.push(read_matrix(input, &format!("{prefix}.{name}"))?);
            }
            let mut biases = Vec::new();
            for name in &GRU_PARAM_NAMES[6..] {
                biases.push(Vector::new(read_matrix(input, &format!("{prefix}.{name}"))?.as_slice().to_vec())?);
            }
            let mut m = mats.into_iter();
            let mut b = biases.into_iter();
            let gru = GruParams {
                w_u: m.next().unwrap(),
                w_r: m.next().unwrap(),
                w_h: m.next().unwrap(),
                u_u: m.next().unwrap(),
                u_r: m.next().unwrap(),
                u_h: m.next().unwrap(),
                b_u: b.next().unwrap(),
                b_r: b.next().unwrap(),
                b_h: b.next().unwrap(),
            };
            gru.validate()?;
            grus.push(gru);
        }
        let attention = AttentionParams {
            w: read_matrix(input, "attention.w")?,
        };
        let mut layers = Vec::new();
        for l in 0..widths.len().saturating_sub(1) {
            let w = read_matrix(input, &format!("mlp.{l}.w"))?;
            let b = Vector::new(read_matrix(input, &format!("mlp.{l}.b"))?.as_slice().to_vec())?;
            if w.cols() != widths[l] || w.rows() != widths[l + 1] || b.len() != widths[l + 1] {
                return Err(input.error(format!("MLP layer {l} does not match widths {widths:?}")));
            }
            layers.push(DenseLayer { w, b });
        }
        if layers.is_empty() {
            return Err(input.error("MLP needs at least one layer"));
        }
        let evolution = grus.pop().unwrap();
        let extractor = grus.pop().unwrap();
        Ok(Model {
            variant,
            item_embedding,
            cat_embedding,
            extractor,
            evolution,
            attention,
            mlp: MlpParams { layers },
        })
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn keyed<R: BufRead>(input: &mut LineReader<R>, key: &str) -> Result<String> {
    let line = input.require_line()?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.to_string()),
        _ => Err(input.error(format!("expected `{key} ...`, found `{line}`"))),
    }
}

fn write_matrix<W: Write>(out: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    writeln!(out, "matrix {name} {rows} {cols}")?;
    for r in data.chunks(cols) {
        write_row(out, r)?;
    }
    Ok(())
}

fn read_matrix<R: BufRead>(input: &mut LineReader<R>, name: &str) -> Result<Matrix> {
    let line = input.require_line()?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let (rows, cols) = match parts[..] {
        ["matrix", n, r, c] if n == name => match (r.parse::<usize>(), c.parse::<usize>()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(input.error(format!("bad dimensions for `{name}`"))),
        },
        _ => return Err(input.error(format!("expected `matrix {name} <rows> <cols>`, found `{line}`"))),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row = input.next_values::<f64>()?;
        if row.len() != cols {
            return Err(input.error(format!("`{name}` row has {} values, expected {cols}", row.len())));
        }
        data.extend(row);
    }
    Matrix::new(rows, cols, data)
}

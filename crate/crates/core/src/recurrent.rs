//! Gated recurrent cells, target attention, and the interest stack.
//!
//! One step kernel serves every cell type. A [`Gate`] selects how the blend
//! between the previous state and the candidate is computed:
//!
//! ```text
//! u  = σ(W_u x + U_u h + b_u)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + r ∘ (U_h h) + b_h)
//! g  = u            (GRU)
//!    = a · u        (AUGRU, attentional update gate)
//!    = a            (AGRU, attention replaces the update gate; u is not computed)
//! h' = (1 − g) ∘ h + g ∘ h̃
//! ```
//!
//! AIGRU does not need its own gate: it is a plain GRU whose inputs were
//! scaled by the attention scores (see [`aigru_inputs`]).
//!
//! Sequences carry a `valid_len`. Steps at or beyond it are padding: their
//! state is a frozen copy of the last valid state, they receive zero
//! attention, and no gradient reaches their inputs.
//!
//! Backward passes are derived by hand per cell and replay the gate values
//! cached during the forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    add_outer, axpy, dot, gemv_into, gemv_t_add, sigmoid_scalar, softmax_in_place, tanh_scalar,
    Matrix, Vector,
};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_u: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_u: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_u: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
}

pub const GRU_PARAM_NAMES: [&str; 9] = ["w_u", "w_r", "w_h", "u_u", "u_r", "u_h", "b_u", "b_r", "b_h"];

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_u: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_u: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_u: Vector::zeros(hidden),
            b_r: Vector::zeros(hidden),
            b_h: Vector::zeros(hidden),
        }
    }

    /// Uniform init in `[-1/√hidden, 1/√hidden]` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = GruParams::zeros(hidden, input);
        for slice in p.slices_mut() {
            slice.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_u.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_u.cols()
    }

    /// Checks that every parameter agrees with `hidden_dim` and `input_dim`.
    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                Err(Error::shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )))
            } else {
                Ok(())
            }
        };
        check("w_u", &self.w_u, h, i)?;
        check("w_r", &self.w_r, h, i)?;
        check("w_h", &self.w_h, h, i)?;
        check("u_u", &self.u_u, h, h)?;
        check("u_r", &self.u_r, h, h)?;
        check("u_h", &self.u_h, h, h)?;
        for (name, b) in [("b_r", &self.b_r), ("b_h", &self.b_h)] {
            if b.len() != h {
                return Err(Error::shape(format!("{name} has length {}, expected {h}", b.len())));
            }
        }
        Ok(())
    }

    pub fn slices(&self) -> [&[f64]; 9] {
        [
            self.w_u.as_slice(),
            self.w_r.as_slice(),
            self.w_h.as_slice(),
            self.u_u.as_slice(),
            self.u_r.as_slice(),
            self.u_h.as_slice(),
            &self.b_u,
            &self.b_r,
            &self.b_h,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_u.as_mut_slice(),
            self.w_r.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.u_u.as_mut_slice(),
            self.u_r.as_mut_slice(),
            self.u_h.as_mut_slice(),
            &mut self.b_u,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub(crate) fn add_assign(&mut self, other: &GruParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(1.0, src, dst);
        }
    }

    fn check_step_shapes(&self, x: &[f64], h_prev: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} does not match w_u/w_r/w_h input width {}",
                x.len(),
                self.input_dim()
            )));
        }
        if h_prev.len() != self.hidden_dim() {
            return Err(Error::shape(format!(
                "previous state of length {} does not match u_u/u_r/u_h width {}",
                h_prev.len(),
                self.hidden_dim()
            )));
        }
        Ok(())
    }
}

/// Bilinear attention `a_t ∝ exp(h_t · W e_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w: Matrix,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, target: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let data = (0..hidden * target)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        AttentionParams {
            w: Matrix::new(hidden, target, data).expect("positive attention dims"),
        }
    }
}

/// Extractor (or plain GRU) states `h_1..h_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestTrace {
    pub hidden: Vec<Vector>,
    pub valid_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionTrace {
    pub scores: Vector,
    pub evolved: Vec<Vector>,
    pub final_state: Vector,
}

/// Attention-fused evolution cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvolutionCell {
    Aigru,
    Agru,
    Augru,
}

impl fmt::Display for EvolutionCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvolutionCell::Aigru => "AIGRU",
            EvolutionCell::Agru => "AGRU",
            EvolutionCell::Augru => "AUGRU",
        })
    }
}

impl FromStr for EvolutionCell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AIGRU" => Ok(EvolutionCell::Aigru),
            "AGRU" => Ok(EvolutionCell::Agru),
            "AUGRU" => Ok(EvolutionCell::Augru),
            other => Err(Error::config(format!("unknown evolution cell `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Gate {
    Update,
    Replace(f64),
    Scaled(f64),
}

impl Gate {
    fn for_cell(cell: EvolutionCell, a: f64) -> Gate {
        match cell {
            EvolutionCell::Aigru => Gate::Update,
            EvolutionCell::Agru => Gate::Replace(a),
            EvolutionCell::Augru => Gate::Scaled(a),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    c: Vec<f64>,
    gate: Gate,
}

pub(crate) struct StepGrads {
    pub d_x: Vec<f64>,
    pub d_h_prev: Vec<f64>,
    pub d_a: f64,
}

fn step_forward(
    p: &GruParams,
    gate: Gate,
    x: &[f64],
    h_prev: &[f64],
    record: bool,
) -> (Vec<f64>, Option<StepCache>) {
    let n = p.hidden_dim();
    let mut tmp = vec![0.0; n];

    let u = if matches!(gate, Gate::Replace(_)) {
        Vec::new()
    } else {
        let mut u = vec![0.0; n];
        gemv_into(&p.w_u, x, &mut u);
        gemv_into(&p.u_u, h_prev, &mut tmp);
        for i in 0..n {
            u[i] = sigmoid_scalar(u[i] + tmp[i] + p.b_u[i]);
        }
        u
    };

    let mut r = vec![0.0; n];
    gemv_into(&p.w_r, x, &mut r);
    gemv_into(&p.u_r, h_prev, &mut tmp);
    for i in 0..n {
        r[i] = sigmoid_scalar(r[i] + tmp[i] + p.b_r[i]);
    }

    let mut q = vec![0.0; n];
    gemv_into(&p.u_h, h_prev, &mut q);
    let mut c = vec![0.0; n];
    gemv_into(&p.w_h, x, &mut c);
    for i in 0..n {
        c[i] = tanh_scalar(c[i] + r[i] * q[i] + p.b_h[i]);
    }

    let mut h = vec![0.0; n];
    for i in 0..n {
        let g = match gate {
            Gate::Update => u[i],
            Gate::Scaled(a) => a * u[i],
            Gate::Replace(a) => a,
        };
        h[i] = (1.0 - g) * h_prev[i] + g * c[i];
    }

    let cache = record.then(|| StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        u,
        r,
        q,
        c,
        gate,
    });
    (h, cache)
}

fn step_backward(p: &GruParams, cache: &StepCache, dh: &[f64], grads: &mut GruParams) -> StepGrads {
    let n = p.hidden_dim();
    let mut d_h_prev = vec![0.0; n];
    let mut dpc = vec![0.0; n];
    let mut dq = vec![0.0; n];
    let mut dpr = vec![0.0; n];
    let mut dpu = vec![0.0; n];
    let mut d_a = 0.0;
    let has_u = !matches!(cache.gate, Gate::Replace(_));

    for i in 0..n {
        let (r, c, h) = (cache.r[i], cache.c[i], cache.h_prev[i]);
        let g = match cache.gate {
            Gate::Update => cache.u[i],
            Gate::Scaled(a) => a * cache.u[i],
            Gate::Replace(a) => a,
        };
        d_h_prev[i] = (1.0 - g) * dh[i];
        let dg = dh[i] * (c - h);
        dpc[i] = dh[i] * g * (1.0 - c * c);
        dq[i] = dpc[i] * r;
        dpr[i] = dpc[i] * cache.q[i] * r * (1.0 - r);
        let du = match cache.gate {
            Gate::Update => dg,
            Gate::Scaled(a) => {
                d_a += dg * cache.u[i];
                a * dg
            }
            Gate::Replace(_) => {
                d_a += dg;
                0.0
            }
        };
        if has_u {
            let u = cache.u[i];
            dpu[i] = du * u * (1.0 - u);
        }
    }

    add_outer(&mut grads.w_h, &dpc, &cache.x);
    add_outer(&mut grads.u_h, &dq, &cache.h_prev);
    axpy(1.0, &dpc, &mut grads.b_h);
    add_outer(&mut grads.w_r, &dpr, &cache.x);
    add_outer(&mut grads.u_r, &dpr, &cache.h_prev);
    axpy(1.0, &dpr, &mut grads.b_r);

    let mut d_x = vec![0.0; p.input_dim()];
    gemv_t_add(&p.w_h, &dpc, &mut d_x);
    gemv_t_add(&p.w_r, &dpr, &mut d_x);
    gemv_t_add(&p.u_h, &dq, &mut d_h_prev);
    gemv_t_add(&p.u_r, &dpr, &mut d_h_prev);
    if has_u {
        add_outer(&mut grads.w_u, &dpu, &cache.x);
        add_outer(&mut grads.u_u, &dpu, &cache.h_prev);
        axpy(1.0, &dpu, &mut grads.b_u);
        gemv_t_add(&p.w_u, &dpu, &mut d_x);
        gemv_t_add(&p.u_u, &dpu, &mut d_h_prev);
    }
    StepGrads { d_x, d_h_prev, d_a }
}

fn check_score(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("attention score {a} outside [0, 1]")));
    }
    Ok(())
}

pub fn gru_step(params: &GruParams, i_t: &[f64], h_prev: &[f64]) -> Result<Vector> {
    params.check_step_shapes(i_t, h_prev)?;
    Ok(Vector::from_vec(step_forward(params, Gate::Update, i_t, h_prev, false).0))
}

pub fn agru_step(params: &GruParams, i_t: &[f64], h_prev: &[f64], a_t: f64) -> Result<Vector> {
    check_score(a_t)?;
    params.check_step_shapes(i_t, h_prev)?;
    Ok(Vector::from_vec(step_forward(params, Gate::Replace(a_t), i_t, h_prev, false).0))
}

pub fn augru_step(params: &GruParams, i_t: &[f64], h_prev: &[f64], a_t: f64) -> Result<Vector> {
    check_score(a_t)?;
    params.check_step_shapes(i_t, h_prev)?;
    Ok(Vector::from_vec(step_forward(params, Gate::Scaled(a_t), i_t, h_prev, false).0))
}

/// Cached forward pass of one recurrent sequence.
#[derive(Clone, Debug)]
pub(crate) struct SequenceTape {
    steps: Vec<StepCache>,
    len: usize,
}

/// Runs one cell type over `inputs[..valid_len]`; later states are frozen.
///
/// `scores` supplies the per-step attention for AGRU/AUGRU gates.
fn run_sequence(
    params: &GruParams,
    inputs: &[&[f64]],
    h0: &[f64],
    valid_len: usize,
    cell: Option<EvolutionCell>,
    scores: Option<&[f64]>,
    record: bool,
) -> Result<(Vec<Vec<f64>>, Option<SequenceTape>)> {
    if inputs.is_empty() {
        return Err(Error::shape("recurrent sequence needs at least one input"));
    }
    if valid_len > inputs.len() {
        return Err(Error::shape(format!(
            "valid_len {valid_len} exceeds sequence length {}",
            inputs.len()
        )));
    }
    if h0.len() != params.hidden_dim() {
        return Err(Error::shape(format!(
            "initial state of length {} for hidden size {}",
            h0.len(),
            params.hidden_dim()
        )));
    }
    for x in &inputs[..valid_len] {
        params.check_step_shapes(x, h0)?;
    }
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(if record { valid_len } else { 0 });
    let mut h = h0.to_vec();
    for (t, x) in inputs[..valid_len].iter().enumerate() {
        let gate = match (cell, scores) {
            (Some(cell), Some(s)) => Gate::for_cell(cell, s[t]),
            _ => Gate::Update,
        };
        let (next, cache) = step_forward(params, gate, x, &h, record);
        if let Some(c) = cache {
            steps.push(c);
        }
        h = next;
        hidden.push(h.clone());
    }
    for _ in valid_len..inputs.len() {
        hidden.push(h.clone());
    }
    Ok((
        hidden,
        record.then(|| SequenceTape {
            steps,
            len: inputs.len(),
        }),
    ))
}

struct SequenceBackward {
    d_inputs: Vec<Vec<f64>>,
    d_scores: Vec<f64>,
}

/// Backpropagates `d_hidden` (one gradient per position, frozen positions
/// included) through a recorded sequence.
fn sequence_backward(
    params: &GruParams,
    tape: &SequenceTape,
    d_hidden: &[Vec<f64>],
    grads: &mut GruParams,
) -> SequenceBackward {
    let n = params.hidden_dim();
    let valid_len = tape.steps.len();
    let mut carry = vec![0.0; n];
    for d in &d_hidden[valid_len..tape.len] {
        axpy(1.0, d, &mut carry);
    }
    let mut d_inputs = vec![vec![0.0; params.input_dim()]; tape.len];
    let mut d_scores = vec![0.0; tape.len];
    for t in (0..valid_len).rev() {
        axpy(1.0, &d_hidden[t], &mut carry);
        let g = step_backward(params, &tape.steps[t], &carry, grads);
        d_inputs[t] = g.d_x;
        d_scores[t] = g.d_a;
        carry = g.d_h_prev;
    }
    SequenceBackward { d_inputs, d_scores }
}

fn as_slices(v: &[Vector]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

fn to_vectors(v: Vec<Vec<f64>>) -> Vec<Vector> {
    v.into_iter().map(Vector::from_vec).collect()
}

pub fn gru_sequence(
    params: &GruParams,
    inputs: &[Vector],
    h0: &[f64],
    valid_len: usize,
) -> Result<InterestTrace> {
    let (hidden, _) = run_sequence(params, &as_slices(inputs), h0, valid_len, None, None, false)?;
    Ok(InterestTrace {
        hidden: to_vectors(hidden),
        valid_len,
    })
}

fn attention_logits_into(
    hidden: &[&[f64]],
    valid_len: usize,
    e_a: &[f64],
    params: &AttentionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if valid_len == 0 {
        return Err(Error::DegenerateSequence(
            "attention over a sequence with no valid positions".into(),
        ));
    }
    if e_a.len() != params.w.cols() {
        return Err(Error::shape(format!(
            "target embedding of length {} for attention width {}",
            e_a.len(),
            params.w.cols()
        )));
    }
    if hidden[0].len() != params.w.rows() {
        return Err(Error::shape(format!(
            "hidden state of length {} for attention height {}",
            hidden[0].len(),
            params.w.rows()
        )));
    }
    let mut projected = vec![0.0; params.w.rows()];
    gemv_into(&params.w, e_a, &mut projected);
    let mut scores = vec![0.0; hidden.len()];
    for t in 0..valid_len {
        scores[t] = dot(hidden[t], &projected);
    }
    softmax_in_place(&mut scores[..valid_len]);
    Ok((scores, projected))
}

/// Softmax over `h_t · W e_a` for the valid positions; padding scores 0.
pub fn attention_scores(hidden: &InterestTrace, e_a: &[f64], params: &AttentionParams) -> Result<Vector> {
    let (scores, _) = attention_logits_into(&as_slices(&hidden.hidden), hidden.valid_len, e_a, params)?;
    Ok(Vector::from_vec(scores))
}

fn attention_backward(
    params: &AttentionParams,
    hidden: &[&[f64]],
    valid_len: usize,
    e_a: &[f64],
    scores: &[f64],
    projected: &[f64],
    d_scores: &[f64],
    d_hidden: &mut [Vec<f64>],
    d_w: &mut Matrix,
) -> Vec<f64> {
    let weighted: f64 = (0..valid_len).map(|t| scores[t] * d_scores[t]).sum();
    let mut d_projected = vec![0.0; projected.len()];
    for t in 0..valid_len {
        let d_logit = scores[t] * (d_scores[t] - weighted);
        axpy(d_logit, projected, &mut d_hidden[t]);
        axpy(d_logit, hidden[t], &mut d_projected);
    }
    add_outer(d_w, &d_projected, e_a);
    let mut d_e_a = vec![0.0; e_a.len()];
    gemv_t_add(&params.w, &d_projected, &mut d_e_a);
    d_e_a
}

pub fn aigru_inputs(hidden: &InterestTrace, scores: &[f64]) -> Result<Vec<Vector>> {
    if scores.len() != hidden.hidden.len() {
        return Err(Error::shape(format!(
            "{} scores for {} states",
            scores.len(),
            hidden.hidden.len()
        )));
    }
    Ok(hidden.hidden.iter().zip(scores).map(|(h, &a)| h.scale(a)).collect())
}

/// Runs the chosen evolution cell over the interest states.
pub fn evolve(
    params: &GruParams,
    interest: &InterestTrace,
    scores: &[f64],
    cell: EvolutionCell,
    h0: &[f64],
) -> Result<EvolutionTrace> {
    let len = interest.hidden.len();
    if scores.len() != len {
        return Err(Error::shape(format!("{} scores for {len} states", scores.len())));
    }
    for &a in &scores[..interest.valid_len] {
        check_score(a)?;
    }
    let valid_len = interest.valid_len;
    let hidden = match cell {
        EvolutionCell::Aigru => {
            let inputs = aigru_inputs(interest, scores)?;
            run_sequence(params, &as_slices(&inputs), h0, valid_len, None, None, false)?.0
        }
        EvolutionCell::Agru | EvolutionCell::Augru => {
            run_sequence(params, &as_slices(&interest.hidden), h0, valid_len, Some(cell), Some(scores), false)?.0
        }
    };
    let mut masked = scores.to_vec();
    masked[valid_len..].iter_mut().for_each(|a| *a = 0.0);
    let final_state = hidden.last().cloned().expect("non-empty sequence");
    Ok(EvolutionTrace {
        scores: Vector::from_vec(masked),
        evolved: to_vectors(hidden),
        final_state: Vector::from_vec(final_state),
    })
}

/// How the second recurrent stage consumes the extractor states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackMode {
    /// Plain second GRU, then attention-weighted sum of its states.
    TwoLayerAttention,
    /// Attention over extractor states gates the evolution cell; the
    /// interest vector is the last evolved state.
    Evolve(EvolutionCell),
}

/// The extractor GRU, target attention, and second recurrent stage.
#[derive(Clone, Copy, Debug)]
pub struct InterestStack<'a> {
    pub extractor: &'a GruParams,
    pub evolution: &'a GruParams,
    pub attention: &'a AttentionParams,
    pub mode: StackMode,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub interest: InterestTrace,
    pub evolution: EvolutionTrace,
    /// Vector handed to the prediction head.
    pub interest_vector: Vector,
    tape: Option<StackTape>,
}

#[derive(Clone, Debug)]
struct StackTape {
    e_a: Vec<f64>,
    extractor: SequenceTape,
    second: SequenceTape,
    second_inputs: Vec<Vec<f64>>,
    projected: Vec<f64>,
}

/// Gradients of the stack parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub extractor: GruParams,
    pub evolution: GruParams,
    pub attention: Matrix,
}

impl StackGrads {
    pub fn zeros_like(stack: &InterestStack<'_>) -> Self {
        StackGrads {
            extractor: GruParams::zeros(stack.extractor.hidden_dim(), stack.extractor.input_dim()),
            evolution: GruParams::zeros(stack.evolution.hidden_dim(), stack.evolution.input_dim()),
            attention: Matrix::zeros(stack.attention.w.rows(), stack.attention.w.cols()),
        }
    }
}

pub struct StackInputGrads {
    pub d_inputs: Vec<Vec<f64>>,
    pub d_e_a: Vec<f64>,
}

impl InterestStack<'_> {
    fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.evolution.validate()?;
        let n = self.extractor.hidden_dim();
        if self.evolution.input_dim() != n || self.evolution.hidden_dim() != n {
            return Err(Error::config(format!(
                "evolution GRU must be {n}x{n} to consume extractor states, got {}x{}",
                self.evolution.hidden_dim(),
                self.evolution.input_dim()
            )));
        }
        if self.attention.w.rows() != n {
            return Err(Error::config(format!(
                "attention matrix has {} rows, hidden size is {n}",
                self.attention.w.rows()
            )));
        }
        Ok(())
    }

    /// Forward pass; `record` keeps the caches needed by [`StackOutput::backward`].
    pub fn forward(&self, inputs: &[&[f64]], valid_len: usize, e_a: &[f64], record: bool) -> Result<StackOutput> {
        self.validate()?;
        let n = self.extractor.hidden_dim();
        let h0 = vec![0.0; n];
        let (hidden, ext_tape) = run_sequence(self.extractor, inputs, &h0, valid_len, None, None, record)?;
        let hidden_refs: Vec<&[f64]> = hidden.iter().map(Vec::as_slice).collect();

        let (scores, projected, second, second_inputs, second_tape, interest_vector);
        match self.mode {
            StackMode::TwoLayerAttention => {
                let (s, s_tape) = run_sequence(self.evolution, &hidden_refs, &h0, valid_len, None, None, record)?;
                let s_refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
                let (a, proj) = attention_logits_into(&s_refs, valid_len, e_a, self.attention)?;
                let mut pooled = vec![0.0; n];
                for t in 0..valid_len {
                    axpy(a[t], &s[t], &mut pooled);
                }
                scores = a;
                projected = proj;
                second_inputs = Vec::new();
                second_tape = s_tape;
                second = s;
                interest_vector = pooled;
            }
            StackMode::Evolve(cell) => {
                let (a, proj) = attention_logits_into(&hidden_refs, valid_len, e_a, self.attention)?;
                let (evolved, tape, scaled) = match cell {
                    EvolutionCell::Aigru => {
                        let scaled: Vec<Vec<f64>> = hidden
                            .iter()
                            .zip(&a)
                            .map(|(h, &s)| h.iter().map(|v| v * s).collect())
                            .collect();
                        let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
                        let (e, t) = run_sequence(self.evolution, &refs, &h0, valid_len, None, None, record)?;
                        (e, t, scaled)
                    }
                    EvolutionCell::Agru | EvolutionCell::Augru => {
                        let (e, t) =
                            run_sequence(self.evolution, &hidden_refs, &h0, valid_len, Some(cell), Some(&a), record)?;
                        (e, t, Vec::new())
                    }
                };
                interest_vector = evolved.last().cloned().expect("non-empty sequence");
                scores = a;
                projected = proj;
                second_inputs = scaled;
                second_tape = tape;
                second = evolved;
            }
        }

        let tape = if record {
            Some(StackTape {
                e_a: e_a.to_vec(),
                extractor: ext_tape.expect("recorded"),
                second: second_tape.expect("recorded"),
                second_inputs,
                projected,
            })
        } else {
            None
        };
        let final_state = Vector::from_vec(second.last().cloned().expect("non-empty sequence"));
        Ok(StackOutput {
            interest: InterestTrace {
                hidden: to_vectors(hidden),
                valid_len,
            },
            evolution: EvolutionTrace {
                scores: Vector::from_vec(scores),
                evolved: to_vectors(second),
                final_state,
            },
            interest_vector: Vector::from_vec(interest_vector),
            tape,
        })
    }
}

impl StackOutput {
    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    /// Backpropagates `d_interest` (gradient of the interest vector) plus
    /// optional direct gradients on the extractor states.
    pub fn backward(
        &self,
        stack: &InterestStack<'_>,
        d_interest: &[f64],
        d_extractor_extra: Option<&[Vec<f64>]>,
        grads: &mut StackGrads,
    ) -> Result<StackInputGrads> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called on an unrecorded forward pass".into()))?;
        let n = stack.extractor.hidden_dim();
        let len = self.interest.hidden.len();
        let valid_len = self.interest.valid_len;
        let hidden: Vec<&[f64]> = self.interest.hidden.iter().map(|v| v.as_slice()).collect();
        let second: Vec<&[f64]> = self.evolution.evolved.iter().map(|v| v.as_slice()).collect();
        let scores = self.evolution.scores.as_slice();

        let mut d_hidden = match d_extractor_extra {
            Some(extra) => extra.to_vec(),
            None => vec![vec![0.0; n]; len],
        };
        let d_e_a = match stack.mode {
            StackMode::TwoLayerAttention => {
                let mut d_second = vec![vec![0.0; n]; len];
                let mut d_scores = vec![0.0; len];
                for t in 0..valid_len {
                    d_scores[t] = dot(d_interest, second[t]);
                    axpy(scores[t], d_interest, &mut d_second[t]);
                }
                let d_e_a = attention_backward(
                    stack.attention,
                    &second,
                    valid_len,
                    &tape.e_a,
                    scores,
                    &tape.projected,
                    &d_scores,
                    &mut d_second,
                    &mut grads.attention,
                );
                let back = sequence_backward(stack.evolution, &tape.second, &d_second, &mut grads.evolution);
                for t in 0..len {
                    axpy(1.0, &back.d_inputs[t], &mut d_hidden[t]);
                }
                d_e_a
            }
            StackMode::Evolve(cell) => {
                let mut d_second = vec![vec![0.0; n]; len];
                d_second[len - 1].copy_from_slice(d_interest);
                let back = sequence_backward(stack.evolution, &tape.second, &d_second, &mut grads.evolution);
                let d_scores = match cell {
                    EvolutionCell::Aigru => {
                        debug_assert_eq!(tape.second_inputs.len(), len);
                        let mut d_scores = vec![0.0; len];
                        for t in 0..valid_len {
                            d_scores[t] = dot(&back.d_inputs[t], hidden[t]);
                            axpy(scores[t], &back.d_inputs[t], &mut d_hidden[t]);
                        }
                        d_scores
                    }
                    EvolutionCell::Agru | EvolutionCell::Augru => {
                        for t in 0..len {
                            axpy(1.0, &back.d_inputs[t], &mut d_hidden[t]);
                        }
                        back.d_scores
                    }
                };
                attention_backward(
                    stack.attention,
                    &hidden,
                    valid_len,
                    &tape.e_a,
                    scores,
                    &tape.projected,
                    &d_scores,
                    &mut d_hidden,
                    &mut grads.attention,
                )
            }
        };
        let back = sequence_backward(stack.extractor, &tape.extractor, &d_hidden, &mut grads.extractor);
        Ok(StackInputGrads {
            d_inputs: back.d_inputs,
            d_e_a,
        })
    }
}

/// Backward of a single recorded cell step, exposed for tests and tooling.
pub fn cell_step_with_grad(
    params: &GruParams,
    cell: Option<EvolutionCell>,
    a_t: f64,
    i_t: &[f64],
    h_prev: &[f64],
    d_out: &[f64],
) -> Result<(Vector, GruParams, Vector, Vector, f64)> {
    params.check_step_shapes(i_t, h_prev)?;
    let gate = match cell {
        None => Gate::Update,
        Some(c) => {
            check_score(a_t)?;
            Gate::for_cell(c, a_t)
        }
    };
    let (h, cache) = step_forward(params, gate, i_t, h_prev, true);
    let mut grads = GruParams::zeros(params.hidden_dim(), params.input_dim());
    let g = step_backward(params, &cache.expect("recorded"), d_out, &mut grads);
    Ok((
        Vector::from_vec(h),
        grads,
        Vector::from_vec(g.d_x),
        Vector::from_vec(g.d_h_prev),
        g.d_a,
    ))
}

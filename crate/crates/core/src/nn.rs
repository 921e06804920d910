//! Layers built on the tape: linear maps, GRU and LSTM cells, a tanh MLP,
//! multi-head self-attention, and the variable-token attention encoder.
//!
//! Every layer is batched along rows. Attention works on token matrices of
//! shape `(B·n)×width`, where each consecutive block of `n` rows belongs to
//! one sample and only attends within its block.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

type LayerResult<'t> = Result<Var<'t>, TensorError>;

/// `y = x·Wᵀ + b` with `W` stored `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::without_bias(store, name, input, output, rng);
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        layer
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, output, input));
        Self {
            weight,
            bias: None,
            input,
            output,
        }
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        output * input + output
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> LayerResult<'t> {
        let y = x.matmul_nt(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Input-to-hidden and hidden-to-hidden weights plus bias for one gate.
#[derive(Clone, Debug)]
struct Gate {
    w_in: ParamId,
    w_hid: ParamId,
    bias: ParamId,
}

impl Gate {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_in: store.add(format!("{name}.w_in"), glorot(rng, hidden, input)),
            w_hid: store.add(format!("{name}.w_hid"), glorot(rng, hidden, hidden)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[hidden])),
        }
    }

    fn input_part<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> LayerResult<'t> {
        x.matmul_nt(p.get(self.w_in))?.add_row(p.get(self.bias))
    }

    fn hidden_part<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> LayerResult<'t> {
        h.matmul_nt(p.get(self.w_hid))
    }

    fn pre_activation<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> LayerResult<'t> {
        self.input_part(p, x)?.add(self.hidden_part(p, h)?)
    }
}

/// Cho-style GRU cell:
///
/// ```text
/// u  = σ(W_u x + U_u h + b_u)
/// r  = σ(W_r x + U_r h + b_r)
/// c  = tanh(W_c x + r ⊙ (U_c h) + b_c)
/// h' = (1 − u) ⊙ h + u ⊙ c
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    update: Gate,
    reset: Gate,
    candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            update: Gate::new(store, &format!("{name}.update"), input, hidden, rng),
            reset: Gate::new(store, &format!("{name}.reset"), input, hidden, rng),
            candidate: Gate::new(store, &format!("{name}.candidate"), input, hidden, rng),
            input,
            hidden,
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (hidden * input + hidden * hidden + hidden)
    }

    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> LayerResult<'t> {
        let u = self.update.pre_activation(p, x, h)?.sigmoid()?;
        let r = self.reset.pre_activation(p, x, h)?.sigmoid()?;
        let c = self
            .candidate
            .input_part(p, x)?
            .add(r.mul(self.candidate.hidden_part(p, h)?)?)?
            .tanh()?;
        // (1 − u) ⊙ h + u ⊙ c  ==  h + u ⊙ (c − h)
        h.add(u.mul(c.sub(h)?)?)
    }

    /// Runs the cell over `inputs` (each `B×input`) from a zero state and
    /// returns the final hidden state.
    pub fn encode<'t>(&self, p: &Bound<'t>, inputs: &[Var<'t>]) -> LayerResult<'t> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("GRU over an empty sequence".into()))?;
        let batch = first.shape().first().copied().unwrap_or(1);
        let mut h = first.tape().constant(&Tensor::zeros(&[batch, self.hidden]));
        for &x in inputs {
            h = self.step(p, x, h)?;
        }
        Ok(h)
    }
}

/// Standard LSTM cell with input, forget, output and candidate gates.
#[derive(Clone, Debug)]
pub struct Lstm {
    input_gate: Gate,
    forget_gate: Gate,
    output_gate: Gate,
    candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input_gate: Gate::new(store, &format!("{name}.input"), input, hidden, rng),
            forget_gate: Gate::new(store, &format!("{name}.forget"), input, hidden, rng),
            output_gate: Gate::new(store, &format!("{name}.output"), input, hidden, rng),
            candidate: Gate::new(store, &format!("{name}.candidate"), input, hidden, rng),
            input,
            hidden,
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * (hidden * input + hidden * hidden + hidden)
    }

    /// One step; returns `(h', c')`.
    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let i = self.input_gate.pre_activation(p, x, h)?.sigmoid()?;
        let f = self.forget_gate.pre_activation(p, x, h)?.sigmoid()?;
        let o = self.output_gate.pre_activation(p, x, h)?.sigmoid()?;
        let g = self.candidate.pre_activation(p, x, h)?.tanh()?;
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh()?)?;
        Ok((h_next, c_next))
    }

    /// Hidden state after every input, starting from zeros.
    pub fn unroll<'t>(&self, p: &Bound<'t>, inputs: &[Var<'t>]) -> Result<Vec<Var<'t>>, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("LSTM over an empty sequence".into()))?;
        let batch = first.shape().first().copied().unwrap_or(1);
        let zeros = Tensor::zeros(&[batch, self.hidden]);
        let tape = first.tape();
        let (mut h, mut c) = (tape.constant(&zeros), tape.constant(&zeros));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.step(p, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// `linear → tanh → linear`, width-preserving.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    output: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), width, width, rng),
            output: Linear::new(store, &format!("{name}.1"), width, width, rng),
        }
    }

    pub fn param_count(width: usize) -> usize {
        2 * Linear::param_count(width, width)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> LayerResult<'t> {
        let h = self.hidden.forward(p, x)?.tanh()?;
        self.output.forward(p, h)
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` applied independently to each block of `group`
/// token rows. Returns the output and the attention weights `(B·g)×g`.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    group: usize,
) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let d_k = *q.shape().last().unwrap_or(&0);
    if d_k == 0 {
        return Err(TensorError::Invalid("attention with d_k = 0".into()));
    }
    let weights = q
        .group_matmul_nt(k, group)?
        .scale(1.0 / (d_k as f64).sqrt())?
        .softmax_rows()?;
    let out = weights.group_matmul(v, group)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
}

/// `Concat(head_1..head_h)·W^O` with per-head query/key/value projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: Vec<Head>,
    output: Linear,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let d_head = head_width(d_model, heads)?;
        let heads = (0..heads)
            .map(|i| Head {
                query: Linear::new(store, &format!("{name}.head{i}.query"), d_model, d_head, rng),
                // a key bias only shifts each score row by a constant, which softmax cancels
                key: Linear::without_bias(store, &format!("{name}.head{i}.key"), d_model, d_head, rng),
                value: Linear::new(store, &format!("{name}.head{i}.value"), d_model, d_head, rng),
            })
            .collect::<Vec<_>>();
        let output = Linear::new(store, &format!("{name}.output"), heads.len() * d_head, d_model, rng);
        Ok(Self {
            heads,
            output,
            d_model,
        })
    }

    pub fn param_count(d_model: usize, heads: usize) -> usize {
        let d_head = d_model / heads;
        heads * (3 * Linear::param_count(d_model, d_head) - d_head)
            + Linear::param_count(heads * d_head, d_model)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Self-attention over `tokens` (`(B·n)×d_model`, blocks of `n`).
    /// Returns the projected output and each head's weight matrix.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        n: usize,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), TensorError> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(p, tokens)?;
            let k = head.key.forward(p, tokens)?;
            let v = head.value.forward(p, tokens)?;
            let (o, w) = scaled_dot_attention(q, k, v, n)?;
            outs.push(o);
            weights.push(w);
        }
        let concat = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)?
        };
        Ok((self.output.forward(p, concat)?, weights))
    }
}

fn head_width(d_model: usize, heads: usize) -> Result<usize, TensorError> {
    if heads == 0 || d_model == 0 || d_model % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "d_model={d_model} is not divisible into {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// Self-attention encoder over exogenous variables.
///
/// Each of the `N` variables is a token: its length-`T` history is embedded
/// to `d_model` by a shared linear map, the tokens attend to each other, and
/// the outputs are mean-pooled and projected to the latent width.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    embed: Linear,
    attention: MultiHeadAttention,
    pool: Linear,
    pub window: usize,
    pub latent: usize,
}

/// Output of [`AttentionBlock::forward`].
pub struct AttentionOutput<'t> {
    /// `B×latent`.
    pub latent: Var<'t>,
    /// `B×N`; row `b` is the column mean of sample `b`'s head-averaged
    /// attention matrix, so each row sums to one.
    pub variable_weights: Tensor,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        window: usize,
        d_model: usize,
        heads: usize,
        latent: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        if window == 0 || latent == 0 {
            return Err(TensorError::Invalid(format!(
                "degenerate attention block: window={window}, latent={latent}"
            )));
        }
        head_width(d_model, heads)?;
        Ok(Self {
            embed: Linear::new(store, &format!("{name}.embed"), window, d_model, rng),
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), d_model, heads, rng)?,
            pool: Linear::new(store, &format!("{name}.pool"), d_model, latent, rng),
            window,
            latent,
        })
    }

    pub fn param_count(window: usize, d_model: usize, heads: usize, latent: usize) -> usize {
        Linear::param_count(window, d_model)
            + MultiHeadAttention::param_count(d_model, heads)
            + Linear::param_count(d_model, latent)
    }

    /// `tokens` is `(B·N)×T`: row `b·N + i` holds variable `i` of sample `b`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        n_vars: usize,
    ) -> Result<AttentionOutput<'t>, TensorError> {
        let shape = tokens.shape();
        if n_vars == 0 || shape.len() != 2 || shape[1] != self.window || shape[0] % n_vars != 0 {
            return Err(TensorError::Invalid(format!(
                "attention block expects (B·{n_vars})×{} tokens, got {shape:?}",
                self.window
            )));
        }
        let embedded = self.embed.forward(p, tokens)?;
        let (attended, head_weights) = self.attention.forward(p, embedded, n_vars)?;
        let pooled = attended.group_mean_rows(n_vars)?;
        let latent = self.pool.forward(p, pooled)?;
        let variable_weights = variable_weights(&head_weights, n_vars);
        Ok(AttentionOutput {
            latent,
            variable_weights,
        })
    }
}

/// Head-averaged column means of per-sample attention matrices.
fn variable_weights(head_weights: &[Var<'_>], n: usize) -> Tensor {
    let values: Vec<_> = head_weights.iter().map(|w| w.value_rc()).collect();
    let rows = values[0].len() / n;
    let batch = rows / n;
    let scale = 1.0 / (head_weights.len() * n) as f64;
    let mut out = vec![0.0; batch * n];
    for w in &values {
        for b in 0..batch {
            for r in 0..n {
                let row = &w[(b * n + r) * n..(b * n + r + 1) * n];
                for (c, v) in row.iter().enumerate() {
                    out[b * n + c] += v * scale;
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, n], out)
}

/// Zero state for recurrent layers, used by callers that manage their own loop.
pub fn zeros<'t>(tape: &'t Tape, batch: usize, width: usize) -> Var<'t> {
    tape.constant(&Tensor::zeros(&[batch, width]))
}

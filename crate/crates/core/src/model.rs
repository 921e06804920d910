//! The exogenous-guided forecaster.
//!
//! `encode` turns a window into the initial joint state `[z_x | z]`,
//! [`JointDynamics`] is the coupled vector field, and `forecast` integrates
//! it to the requested horizons and decodes the target half.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::WindowSample;
use crate::error::{Error, Result, TensorError};
use crate::nn::{AttentionBlock, Gru, Linear, Lstm, Mlp};
use crate::ode::{ode_solve, SolverConfig, VectorField};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Offset keeping `pos(v) = softplus(v) + ε` away from zero under `ln`.
pub const POS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// GRU over the exogenous rows instead of the attention encoder.
    NoSelfAtt,
    /// No exogenous ODE; an LSTM emits one guidance vector per forecast step.
    NoZxOde,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_self_att" => Ok(Self::NoSelfAtt),
            "no_zx_ode" => Ok(Self::NoZxOde),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected full, no_self_att or no_zx_ode)"
            ))),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoSelfAtt => "no_self_att",
            Self::NoZxOde => "no_zx_ode",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window `T`.
    pub window: usize,
    /// Number of exogenous variables `N`.
    pub n_exogenous: usize,
    /// Training horizon `K` (integer offsets `1..=K`).
    pub horizon: usize,
    /// Latent width `d` of both `z_x` and `z`.
    pub latent: usize,
    pub rnn_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    #[serde(default)]
    pub ablation: AblationMode,
}

impl ModelConfig {
    pub fn new(window: usize, n_exogenous: usize, horizon: usize) -> Self {
        Self {
            window,
            n_exogenous,
            horizon,
            latent: 16,
            rnn_hidden: 32,
            d_model: 16,
            heads: 4,
            ablation: AblationMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("n_exogenous", self.n_exogenous),
            ("horizon", self.horizon),
            ("latent", self.latent),
            ("rnn_hidden", self.rnn_hidden),
            ("d_model", self.d_model),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} must be divisible by heads={}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Width of the solver state.
    pub fn state_width(&self) -> usize {
        match self.ablation {
            AblationMode::NoZxOde => self.latent,
            _ => 2 * self.latent,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.latent;
        let exo = match self.ablation {
            AblationMode::NoSelfAtt => Gru::param_count(self.n_exogenous, d),
            _ => AttentionBlock::param_count(self.window, self.d_model, self.heads, d),
        };
        let guidance = match self.ablation {
            AblationMode::NoZxOde => Lstm::param_count(d, d),
            _ => Mlp::param_count(d),
        };
        exo + guidance
            + Gru::param_count(1, self.rnn_hidden)
            + Linear::param_count(self.rnn_hidden, d)
            + Mlp::param_count(d)
            + Linear::param_count(d, 1)
    }
}

#[derive(Clone, Debug)]
enum ExoEncoder {
    Attention(AttentionBlock),
    Gru(Gru),
}

#[derive(Clone, Debug)]
enum Guidance {
    /// `dz_x/dt = g(z_x)`.
    Ode(Mlp),
    /// One guidance vector per forecast step, unrolled from `z_x(0)`.
    Lstm(Lstm),
}

/// A batch of windows laid out for the encoders.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `(B·N)×T`: row `b·N + i` is variable `i` of sample `b`.
    pub tokens: Tensor,
    /// `T` matrices of shape `B×N`, oldest first.
    pub exo_steps: Vec<Tensor>,
    /// `T` matrices of shape `B×1`, oldest first.
    pub history: Vec<Tensor>,
    pub batch: usize,
}

impl ModelInput {
    pub fn new(samples: &[&WindowSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let (t, n) = (first.window(), first.n_exogenous());
        let b = samples.len();
        if samples.iter().any(|s| s.window() != t || s.n_exogenous() != n) {
            return Err(Error::Config("windows in a batch must share T and N".into()));
        }
        let mut tokens = vec![0.0; b * n * t];
        let mut exo_steps = vec![vec![0.0; b * n]; t];
        let mut history = vec![vec![0.0; b]; t];
        for (bi, s) in samples.iter().enumerate() {
            let x = s.exogenous.data();
            for step in 0..t {
                for i in 0..n {
                    let v = x[step * n + i];
                    tokens[(bi * n + i) * t + step] = v;
                    exo_steps[step][bi * n + i] = v;
                }
                history[step][bi] = s.history[step];
            }
        }
        Ok(Self {
            tokens: Tensor::from_parts(vec![b * n, t], tokens),
            exo_steps: exo_steps
                .into_iter()
                .map(|d| Tensor::from_parts(vec![b, n], d))
                .collect(),
            history: history
                .into_iter()
                .map(|d| Tensor::from_parts(vec![b, 1], d))
                .collect(),
            batch: b,
        })
    }

    pub fn from_windows(samples: &[WindowSample]) -> Result<Self> {
        Self::new(&samples.iter().collect::<Vec<_>>())
    }

    pub fn window(&self) -> usize {
        self.history.len()
    }

    pub fn n_exogenous(&self) -> usize {
        self.tokens.shape()[0] / self.batch
    }
}

/// Initial state and per-window side outputs of [`EgpdeNet::encode`].
pub struct Encoded<'t> {
    /// `B×2d` (`[z_x | z]`), or `B×d` under `no_zx_ode`.
    pub state: Var<'t>,
    /// `K` guidance vectors (`B×d`) under `no_zx_ode`, empty otherwise.
    pub guidance: Vec<Var<'t>>,
    /// `B×N` attention mass per variable, when an attention encoder exists.
    pub variable_weights: Option<Tensor>,
}

pub struct Forecast<'t> {
    /// `B×M`, one column per requested time.
    pub predictions: Var<'t>,
    pub variable_weights: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EgpdeNet {
    config: ModelConfig,
    params: ParamStore,
    exo: ExoEncoder,
    gru: Gru,
    bridge: Linear,
    guidance: Guidance,
    f_net: Mlp,
    decoder: Linear,
}

impl EgpdeNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.latent;
        let exo = match config.ablation {
            AblationMode::NoSelfAtt => {
                ExoEncoder::Gru(Gru::new(&mut params, "exo_gru", config.n_exogenous, d, &mut rng))
            }
            _ => ExoEncoder::Attention(AttentionBlock::new(
                &mut params,
                "attention",
                config.window,
                config.d_model,
                config.heads,
                d,
                &mut rng,
            )?),
        };
        let gru = Gru::new(&mut params, "gru", 1, config.rnn_hidden, &mut rng);
        let bridge = Linear::new(&mut params, "bridge", config.rnn_hidden, d, &mut rng);
        let guidance = match config.ablation {
            AblationMode::NoZxOde => Guidance::Lstm(Lstm::new(&mut params, "guide_lstm", d, d, &mut rng)),
            _ => Guidance::Ode(Mlp::new(&mut params, "g_net", d, &mut rng)),
        };
        let f_net = Mlp::new(&mut params, "f_net", d, &mut rng);
        let decoder = Linear::new(&mut params, "decoder", d, 1, &mut rng);
        Ok(Self {
            config,
            params,
            exo,
            gru,
            bridge,
            guidance,
            f_net,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.window() != self.config.window || input.n_exogenous() != self.config.n_exogenous {
            return Err(Error::Config(format!(
                "model expects T={}, N={}; got T={}, N={}",
                self.config.window,
                self.config.n_exogenous,
                input.window(),
                input.n_exogenous()
            )));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, tape: &'t Tape, input: &ModelInput) -> Result<Encoded<'t>> {
        self.check_input(input)?;
        let (z_x0, variable_weights) = match &self.exo {
            ExoEncoder::Attention(block) => {
                let out = block.forward(p, tape.constant(&input.tokens), self.config.n_exogenous)?;
                (out.latent, Some(out.variable_weights))
            }
            ExoEncoder::Gru(gru) => {
                let rows: Vec<_> = input.exo_steps.iter().map(|x| tape.constant(x)).collect();
                (gru.encode(p, &rows)?, None)
            }
        };
        let ys: Vec<_> = input.history.iter().map(|y| tape.constant(y)).collect();
        let z0 = self.bridge.forward(p, self.gru.encode(p, &ys)?)?;
        let (state, guidance) = match &self.guidance {
            Guidance::Ode(_) => (Var::concat_cols(&[z_x0, z0])?, Vec::new()),
            Guidance::Lstm(lstm) => {
                let inputs = vec![z_x0; self.config.horizon];
                (z0, lstm.unroll(p, &inputs)?)
            }
        };
        Ok(Encoded {
            state,
            guidance,
            variable_weights,
        })
    }

    /// `f(z)`, the target-side factor of the guided dynamics.
    pub fn f_net<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.f_net.forward(p, z)
    }

    /// Decoded predictions at `times` (strictly increasing, positive).
    pub fn forecast<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        input: &ModelInput,
        times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Forecast<'t>> {
        let enc = self.encode(p, tape, input)?;
        let field = JointDynamics::new(self, p, &enc.guidance);
        let states = ode_solve(&field, enc.state, times, solver)?;
        let d = self.config.latent;
        let offset = self.config.state_width() - d;
        let columns = states
            .into_iter()
            .map(|s| self.decoder.forward(p, s.slice_cols(offset, d)?))
            .collect::<Result<Vec<_>, _>>()?;
        let predictions = if columns.len() == 1 {
            columns[0]
        } else {
            Var::concat_cols(&columns)?
        };
        Ok(Forecast {
            predictions,
            variable_weights: enc.variable_weights,
        })
    }

    /// Inference without gradient tracking; returns `B×M`.
    pub fn predict(&self, input: &ModelInput, times: &[f64], solver: &SolverConfig) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        Ok(self.forecast(&p, &tape, input, times, solver)?.predictions.value())
    }

    /// Per-window attention mass over the exogenous variables (`B×N`).
    pub fn variable_weights(&self, input: &ModelInput) -> Result<Tensor> {
        if matches!(self.exo, ExoEncoder::Gru(_)) {
            return Err(Error::Unsupported(
                "variable contributions need the attention encoder, which no_self_att replaces".into(),
            ));
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        Ok(self
            .encode(&p, &tape, input)?
            .variable_weights
            .expect("attention encoder yields weights"))
    }
}

/// `pos(v) = softplus(v) + ε`
pub fn pos(v: Var<'_>) -> Result<Var<'_>, TensorError> {
    v.softplus()?.affine(1.0, POS_EPS)
}

/// The coupled field: `dz_x/dt = g(z_x)`, `dz/dt = ln(pos(z_x) ⊙ pos(f(z)))`.
///
/// Under `no_zx_ode` the state is `z` alone and `pos(z_x)` is replaced by the
/// guidance vector of the current unit-length segment, latched per step.
pub struct JointDynamics<'a, 't> {
    model: &'a EgpdeNet,
    p: &'a Bound<'t>,
    guidance: &'a [Var<'t>],
    segment: Cell<usize>,
}

impl<'a, 't> JointDynamics<'a, 't> {
    pub fn new(model: &'a EgpdeNet, p: &'a Bound<'t>, guidance: &'a [Var<'t>]) -> Self {
        Self {
            model,
            p,
            guidance,
            segment: Cell::new(0),
        }
    }
}

impl<'t> VectorField<'t> for JointDynamics<'_, 't> {
    fn begin_step(&self, t0: f64) {
        if !self.guidance.is_empty() {
            let k = (t0 + 1e-9).floor().max(0.0) as usize;
            self.segment.set(k.min(self.guidance.len() - 1));
        }
    }

    fn eval(&self, _t: f64, state: Var<'t>) -> Result<Var<'t>, TensorError> {
        let d = self.model.config.latent;
        match &self.model.guidance {
            Guidance::Ode(g_net) => {
                let z_x = state.slice_cols(0, d)?;
                let z = state.slice_cols(d, d)?;
                let dz_x = g_net.forward(self.p, z_x)?;
                let dz = pos(z_x)?.mul(pos(self.model.f_net(self.p, z)?)?)?.ln()?;
                Var::concat_cols(&[dz_x, dz])
            }
            Guidance::Lstm(_) => {
                let w = self.guidance[self.segment.get()];
                pos(w)?.mul(pos(self.model.f_net(self.p, state)?)?)?.ln()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, objective, GradCheckConfig};
    use crate::ode::rk4_step;
    use rand::Rng;

    fn tiny(ablation: AblationMode) -> ModelConfig {
        ModelConfig {
            window: 5,
            n_exogenous: 3,
            horizon: 2,
            latent: 4,
            rnn_hidden: 8,
            d_model: 4,
            heads: 2,
            ablation,
        }
    }

    fn windows(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, n) = (cfg.window, cfg.n_exogenous);
        (0..count)
            .map(|i| WindowSample {
                exogenous: Tensor::from_parts(vec![t, n], (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                history: (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                targets: (0..cfg.horizon).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                offsets: (1..=cfg.horizon).map(|k| k as f64).collect(),
                anchor: i,
            })
            .collect()
    }

    fn zero_params(model: &mut EgpdeNet) {
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for mode in [AblationMode::Full, AblationMode::NoSelfAtt, AblationMode::NoZxOde] {
            let cfg = ModelConfig {
                ablation: mode,
                ..ModelConfig::new(20, 13, 3)
            };
            let model = EgpdeNet::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(), "{mode}");
            assert_eq!(EgpdeNet::new(cfg, 9).unwrap().param_count(), model.param_count());
        }
        assert_eq!(Linear::param_count(4, 1), 5);
    }

    #[test]
    fn ablation_deltas() {
        let full = ModelConfig::new(20, 13, 3);
        let d = full.latent;
        let no_att = ModelConfig {
            ablation: AblationMode::NoSelfAtt,
            ..full.clone()
        };
        let no_zx = ModelConfig {
            ablation: AblationMode::NoZxOde,
            ..full.clone()
        };
        let count = |c: &ModelConfig| EgpdeNet::new(c.clone(), 0).unwrap().param_count() as i64;
        let att = AttentionBlock::param_count(20, full.d_model, full.heads, d) as i64;
        assert_eq!(count(&full) - count(&no_att), att - Gru::param_count(13, d) as i64);
        assert_eq!(
            count(&full) - count(&no_zx),
            Mlp::param_count(d) as i64 - Lstm::param_count(d, d) as i64
        );
    }

    #[test]
    fn zero_params_give_zero_state() {
        let cfg = tiny(AblationMode::Full);
        let mut model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        zero_params(&mut model);
        let input = ModelInput::from_windows(&windows(&cfg, 3, 1)).unwrap();
        let tape = Tape::new();
        let p = model.params().bind_const(&tape);
        let enc = model.encode(&p, &tape, &input).unwrap();
        assert_eq!(enc.state.shape(), vec![3, 8]);
        assert!(enc.state.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smallest_window_runs() {
        let cfg = ModelConfig {
            window: 1,
            n_exogenous: 1,
            ..tiny(AblationMode::Full)
        };
        let model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_windows(&windows(&cfg, 2, 3)).unwrap();
        let out = model.predict(&input, &[1.0, 2.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny(AblationMode::Full);
        let input = ModelInput::from_windows(&windows(&cfg, 4, 2)).unwrap();
        let state = |seed| {
            let model = EgpdeNet::new(cfg.clone(), seed).unwrap();
            let tape = Tape::new();
            let p = model.params().bind_const(&tape);
            model.encode(&p, &tape, &input).unwrap().state.value()
        };
        assert_eq!(state(5), state(5));
        assert_ne!(state(5), state(6));
    }

    #[test]
    fn wrong_window_shape_is_rejected() {
        let model = EgpdeNet::new(tiny(AblationMode::Full), 0).unwrap();
        let other = ModelConfig {
            window: 6,
            ..tiny(AblationMode::Full)
        };
        let input = ModelInput::from_windows(&windows(&other, 2, 0)).unwrap();
        assert!(matches!(
            model.predict(&input, &[1.0], &SolverConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_product_splits_into_sum() {
        let cfg = tiny(AblationMode::Full);
        let model = EgpdeNet::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let p = model.params().bind_const(&tape);
        let field = JointDynamics::new(&model, &p, &[]);
        for _ in 0..20 {
            let s = Tensor::from_parts(vec![2, 8], (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let state = tape.constant(&s);
            let dz = field.eval(0.0, state).unwrap().slice_cols(4, 4).unwrap().value();
            let z_x = state.slice_cols(0, 4).unwrap();
            let f = model.f_net(&p, state.slice_cols(4, 4).unwrap()).unwrap();
            let sum = pos(z_x).unwrap().ln().unwrap().add(pos(f).unwrap().ln().unwrap()).unwrap().value();
            assert!(dz.max_abs_diff(&sum) < 1e-10);
        }
    }

    /// Sets every weight of one MLP to zero and its output bias to `b`.
    fn pin_mlp(model: &mut EgpdeNet, name: &str, b: f64) {
        let store = model.params_mut();
        for suffix in ["0.weight", "0.bias", "1.weight"] {
            let id = store.id(&format!("{name}.{suffix}")).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let id = store.id(&format!("{name}.1.bias")).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = b);
    }

    #[test]
    fn frozen_dynamics_give_constant_forecast() {
        // softplus(s) + ε = 1  ⇒  ln(1·1) = 0
        let s = ((1.0 - POS_EPS).exp() - 1.0).ln();
        let cfg = tiny(AblationMode::Full);
        let mut model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        pin_mlp(&mut model, "g_net", 0.0);
        pin_mlp(&mut model, "f_net", s);
        // pin z_x(0) to s as well via the attention pooling bias
        let store = model.params_mut();
        let w = store.id("attention.pool.weight").unwrap();
        store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = store.id("attention.pool.bias").unwrap();
        store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = s);
        let input = ModelInput::from_windows(&windows(&cfg, 3, 0)).unwrap();
        let out = model.predict(&input, &[0.5, 1.0, 2.0, 3.0], &SolverConfig::default()).unwrap();
        for r in 0..3 {
            let row = out.row(r);
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12), "{row:?}");
        }
    }

    #[test]
    fn one_rk4_step_matches_scalar_oracle() {
        // d = 2 with hand-set nets: g(z_x) = tanh(z_x)·a,  f(z) = tanh(z)·c + e
        let cfg = ModelConfig {
            latent: 2,
            d_model: 2,
            heads: 1,
            ..tiny(AblationMode::Full)
        };
        let mut model = EgpdeNet::new(cfg, 0).unwrap();
        let (a, c, e) = (0.7, -0.4, 0.3);
        let store = model.params_mut();
        let set = |store: &mut ParamStore, name: &str, data: &[f64]| {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().copy_from_slice(data);
        };
        set(store, "g_net.0.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(store, "g_net.0.bias", &[0.0, 0.0]);
        set(store, "g_net.1.weight", &[a, 0.0, 0.0, a]);
        set(store, "g_net.1.bias", &[0.0, 0.0]);
        set(store, "f_net.0.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(store, "f_net.0.bias", &[0.0, 0.0]);
        set(store, "f_net.1.weight", &[c, 0.0, 0.0, c]);
        set(store, "f_net.1.bias", &[e, e]);

        let sp = |v: f64| (1.0 + v.exp()).ln() + POS_EPS;
        let field_scalar = |zx: f64, z: f64| (a * zx.tanh(), (sp(zx) * sp(c * z.tanh() + e)).ln());
        let s0 = [0.5, -1.0, 0.2, 0.8];
        let h = 0.1;
        let mut expect = [0.0; 4];
        for i in 0..2 {
            let (x, z) = (s0[i], s0[2 + i]);
            let (k1x, k1z) = field_scalar(x, z);
            let (k2x, k2z) = field_scalar(x + h / 2.0 * k1x, z + h / 2.0 * k1z);
            let (k3x, k3z) = field_scalar(x + h / 2.0 * k2x, z + h / 2.0 * k2z);
            let (k4x, k4z) = field_scalar(x + h * k3x, z + h * k3z);
            expect[i] = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            expect[2 + i] = z + h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
        }

        let tape = Tape::new();
        let p = model.params().bind_const(&tape);
        let field = JointDynamics::new(&model, &p, &[]);
        let state = tape.constant(&Tensor::from_parts(vec![1, 4], s0.to_vec()));
        let next = rk4_step(&field, state, 0.0, h).unwrap().value();
        for (got, want) in next.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn shared_times_agree_across_grids() {
        let cfg = tiny(AblationMode::Full);
        let model = EgpdeNet::new(cfg.clone(), 1).unwrap();
        let input = ModelInput::from_windows(&windows(&cfg, 4, 8)).unwrap();
        let solver = SolverConfig::default();
        let three = model.predict(&input, &[1.0, 2.0, 3.0], &solver).unwrap();
        let five = model.predict(&input, &[1.0, 1.5, 2.0, 2.5, 3.0], &solver).unwrap();
        for b in 0..4 {
            for (i, j) in [(0, 0), (1, 2), (2, 4)] {
                assert!((three.at(b, i) - five.at(b, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sml_shaped_input_gives_finite_fractional_forecasts() {
        let cfg = ModelConfig::new(20, 13, 3);
        let model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_windows(&windows(&cfg, 2, 4)).unwrap();
        let out = model.predict(&input, &[1.0, 1.5, 2.0, 2.5, 3.0], &SolverConfig::default()).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exogenous_trajectory_ignores_target_history() {
        let cfg = tiny(AblationMode::Full);
        let model = EgpdeNet::new(cfg.clone(), 2).unwrap();
        let mut w = windows(&cfg, 2, 5);
        let z_x = |w: &[WindowSample]| {
            let input = ModelInput::from_windows(w).unwrap();
            let tape = Tape::new();
            let p = model.params().bind_const(&tape);
            let enc = model.encode(&p, &tape, &input).unwrap();
            let field = JointDynamics::new(&model, &p, &enc.guidance);
            ode_solve(&field, enc.state, &[1.0, 2.5], &SolverConfig::default())
                .unwrap()
                .iter()
                .map(|s| s.slice_cols(0, 4).unwrap().value())
                .collect::<Vec<_>>()
        };
        let before = z_x(&w);
        for s in &mut w {
            s.history.reverse();
        }
        assert_eq!(before, z_x(&w));
    }

    #[test]
    fn no_zx_ode_emits_one_vector_per_step() {
        let cfg = ModelConfig {
            horizon: 3,
            ..tiny(AblationMode::NoZxOde)
        };
        let model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_windows(&windows(&cfg, 2, 0)).unwrap();
        let tape = Tape::new();
        let p = model.params().bind_const(&tape);
        let enc = model.encode(&p, &tape, &input).unwrap();
        assert_eq!(enc.guidance.len(), 3);
        assert_eq!(enc.state.shape(), vec![2, 4]);
        let out = model.predict(&input, &[0.5, 1.5, 2.5, 4.0], &SolverConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn segment_latch_clamps() {
        let model = EgpdeNet::new(tiny(AblationMode::NoZxOde), 0).unwrap();
        let tape = Tape::new();
        let p = model.params().bind_const(&tape);
        let g = vec![tape.constant(&Tensor::zeros(&[1, 4])); 2];
        let field = JointDynamics::new(&model, &p, &g);
        for (t, k) in [(0.0, 0), (0.95, 0), (0.9999999999, 1), (1.0, 1), (7.3, 1)] {
            field.begin_step(t);
            assert_eq!(field.segment.get(), k, "t={t}");
        }
    }

    #[test]
    fn variable_weights_need_attention() {
        let cfg = tiny(AblationMode::NoSelfAtt);
        let model = EgpdeNet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_windows(&windows(&cfg, 2, 0)).unwrap();
        assert!(matches!(model.variable_weights(&input), Err(Error::Unsupported(_))));
        let full = EgpdeNet::new(tiny(AblationMode::Full), 0).unwrap();
        let w = full.variable_weights(&input).unwrap();
        for b in 0..2 {
            assert!((w.row(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn end_to_end_check(mode: AblationMode) -> f64 {
        let cfg = tiny(mode);
        let model = EgpdeNet::new(cfg.clone(), 3).unwrap();
        let samples = windows(&cfg, 2, 9);
        let input = ModelInput::from_windows(&samples).unwrap();
        let truth: Vec<f64> = samples.iter().flat_map(|s| s.targets.clone()).collect();
        let truth = Tensor::from_parts(vec![2, 2], truth);
        let params: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let solver = SolverConfig::rk4(0.1);
        let f = objective(|tape, vars| {
            let p = model.params().bind_vars(vars);
            let pred = model.forecast(&p, tape, &input, &[1.0, 2.0], &solver)?.predictions;
            let diff = pred.sub(tape.constant(&truth))?;
            Ok(diff.mul(diff)?.mean()?)
        });
        grad_check(f, &params, &GradCheckConfig::default()).unwrap().max_rel_error
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let err = end_to_end_check(AblationMode::Full);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn ablation_gradients_match_finite_differences() {
        // The LSTM guidance path has gradient entries near 1e-7, where the
        // finite difference itself is only good to about 1e-4 relative.
        for mode in [AblationMode::NoSelfAtt, AblationMode::NoZxOde] {
            let err = end_to_end_check(mode);
            assert!(err < 1e-3, "{mode}: {err}");
        }
    }
}

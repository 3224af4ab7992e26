//! Online encoder/projector/predictor and their EMA target twins.
//!
//! Every MLP has the shape `linear -> [batch norm] -> relu -> linear`. The
//! target side mirrors the encoder and projector only; the predictor has no
//! target twin.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{BatchNormState, Mode, Tape, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_EMA_RATE: f64 = 0.996;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    #[serde(default = "yes")]
    pub use_batch_norm: bool,
}

fn yes() -> bool {
    true
}

impl MlpSpec {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            use_batch_norm: true,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::Spec(format!(
                "{what}: all layer sizes must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sizes of the three online networks plus the target EMA rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: MlpSpec,
    pub projector: MlpSpec,
    pub predictor: MlpSpec,
    pub ema_rate: f64,
}

impl NetworkConfig {
    /// Desk-scale sizes: encoder `d -> 128 -> 64`, projector `64 -> 128 -> 32`,
    /// predictor `32 -> 128 -> 32`.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            encoder: MlpSpec::new(input_dim, 128, 64),
            projector: MlpSpec::new(64, 128, 32),
            predictor: MlpSpec::new(32, 128, 32),
            ema_rate: DEFAULT_EMA_RATE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BatchNormScale,
    BatchNormShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub kind: ParamKind,
}

impl<S: Scalar> Param<S> {
    pub fn is_bias(&self) -> bool {
        self.kind == ParamKind::Bias
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(
            self.kind,
            ParamKind::BatchNormScale | ParamKind::BatchNormShift
        )
    }

    pub fn tensor(&self) -> Tensor<S> {
        Tensor::new(self.shape.clone(), self.value.clone()).expect("param shape matches value")
    }
}

/// Two-layer perceptron with optional batch norm after the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    spec: MlpSpec,
    params: Vec<Param<S>>,
    bn: Option<BatchNormState<S>>,
}

impl<S: Scalar> Mlp<S> {
    fn init(spec: MlpSpec, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![
            glorot(format!("{prefix}.w1"), spec.input, spec.hidden, rng),
            zeros(format!("{prefix}.b1"), spec.hidden, ParamKind::Bias),
        ];
        let bn = spec.use_batch_norm.then(|| {
            params.push(Param {
                name: format!("{prefix}.bn.scale"),
                shape: vec![spec.hidden],
                value: vec![S::one(); spec.hidden],
                kind: ParamKind::BatchNormScale,
            });
            params.push(zeros(
                format!("{prefix}.bn.shift"),
                spec.hidden,
                ParamKind::BatchNormShift,
            ));
            BatchNormState::new(spec.hidden)
        });
        params.push(glorot(
            format!("{prefix}.w2"),
            spec.hidden,
            spec.output,
            rng,
        ));
        params.push(zeros(format!("{prefix}.b2"), spec.output, ParamKind::Bias));
        Self { spec, params, bn }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn batch_norm_state(&self) -> Option<&BatchNormState<S>> {
        self.bn.as_ref()
    }

    fn constants(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(Param::tensor).collect()
    }

    /// Runs the layer stack with the given parameter tensors (leaves or
    /// constants). In train mode the batch moments are folded into the
    /// running state when `track` is set.
    fn run(
        &mut self,
        tape: &Tape<S>,
        weights: &[Tensor<S>],
        x: &Tensor<S>,
        mode: Mode,
        track: bool,
    ) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.cols() != self.spec.input {
            return Err(Error::Dimension {
                op: "mlp",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.input],
            });
        }
        let h = tape.matmul(x, &weights[0])?;
        let mut h = tape.add_row(&h, &weights[1])?;
        let mut next = 2;
        if let Some(state) = self.bn.as_mut() {
            let (out, moments) = tape.batch_norm(&h, &weights[2], &weights[3], state, mode)?;
            if let (true, Some(m)) = (track, moments) {
                state.absorb(&m);
            }
            h = out;
            next = 4;
        }
        let h = tape.relu(&h)?;
        let out = tape.matmul(&h, &weights[next])?;
        tape.add_row(&out, &weights[next + 1])
    }

    fn ema_from(&mut self, online: &Mlp<S>, rate: S) {
        let keep = rate;
        let take = S::one() - rate;
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            for (tv, &ov) in t.value.iter_mut().zip(&o.value) {
                *tv = keep * *tv + take * ov;
            }
        }
        if let (Some(t), Some(o)) = (self.bn.as_mut(), online.bn.as_ref()) {
            for (tv, &ov) in t.running_mean.iter_mut().zip(&o.running_mean) {
                *tv = keep * *tv + take * ov;
            }
            for (tv, &ov) in t.running_var.iter_mut().zip(&o.running_var) {
                *tv = keep * *tv + take * ov;
            }
        }
    }

    fn state_entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [S])>) {
        for p in &self.params {
            out.push((format!("{prefix}.{}", p.name), p.shape.clone(), &p.value));
        }
        if let Some(bn) = &self.bn {
            let name = self.params[0].name.trim_end_matches(".w1").to_string();
            out.push((
                format!("{prefix}.{name}.bn.running_mean"),
                vec![self.spec.hidden],
                &bn.running_mean,
            ));
            out.push((
                format!("{prefix}.{name}.bn.running_var"),
                vec![self.spec.hidden],
                &bn.running_var,
            ));
        }
    }

    fn restore(
        &mut self,
        prefix: &str,
        table: &BTreeMap<String, (Vec<usize>, Vec<S>)>,
    ) -> Result<()> {
        let fetch = |key: String, shape: &[usize]| -> Result<Vec<S>> {
            match table.get(&key) {
                Some((s, v)) if s == shape => Ok(v.clone()),
                Some((s, _)) => Err(Error::Dimension {
                    op: "restore",
                    lhs: shape.to_vec(),
                    rhs: s.clone(),
                }),
                None => Err(Error::Spec(format!("missing tensor {key}"))),
            }
        };
        for p in &mut self.params {
            p.value = fetch(format!("{prefix}.{}", p.name), &p.shape)?;
        }
        if self.bn.is_some() {
            let name = self.params[0].name.trim_end_matches(".w1").to_string();
            let hidden = [self.spec.hidden];
            let mean = fetch(format!("{prefix}.{name}.bn.running_mean"), &hidden)?;
            let var = fetch(format!("{prefix}.{name}.bn.running_var"), &hidden)?;
            self.bn = Some(BatchNormState {
                running_mean: mean,
                running_var: var,
            });
        }
        Ok(())
    }
}

fn glorot<S: Scalar>(
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Param<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let value = (0..fan_in * fan_out)
        .map(|_| S::lit(rng.random_range(-limit..limit)))
        .collect();
    Param {
        name,
        shape: vec![fan_in, fan_out],
        value,
        kind: ParamKind::Weight,
    }
}

fn zeros<S: Scalar>(name: String, len: usize, kind: ParamKind) -> Param<S> {
    Param {
        name,
        shape: vec![len],
        value: vec![S::zero(); len],
        kind,
    }
}

/// Online parameters registered as leaves on one tape, in the same order as
/// [`NetworkPair::online_params_mut`].
pub struct OnlineLeaves<S> {
    encoder: Vec<Tensor<S>>,
    projector: Vec<Tensor<S>>,
    predictor: Vec<Tensor<S>>,
}

impl<S: Scalar> OnlineLeaves<S> {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .chain(&self.predictor)
    }

    pub fn len(&self) -> usize {
        self.encoder.len() + self.projector.len() + self.predictor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Online networks `f`, `g`, `h` and target networks `f_t`, `g_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPair<S> {
    encoder: Mlp<S>,
    projector: Mlp<S>,
    predictor: Mlp<S>,
    target_encoder: Mlp<S>,
    target_projector: Mlp<S>,
    ema_rate: S,
}

/// Builds the online networks from `seed` and copies `f`, `g` into the
/// target side.
pub fn build_networks<S: Scalar>(
    encoder: MlpSpec,
    projector: MlpSpec,
    predictor: MlpSpec,
    seed: u64,
) -> Result<NetworkPair<S>> {
    NetworkPair::build(
        &NetworkConfig {
            encoder,
            projector,
            predictor,
            ema_rate: DEFAULT_EMA_RATE,
        },
        seed,
    )
}

impl<S: Scalar> NetworkPair<S> {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.encoder.validate("encoder")?;
        config.projector.validate("projector")?;
        config.predictor.validate("predictor")?;
        if config.projector.input != config.encoder.output {
            return Err(Error::Spec(format!(
                "projector input {} does not match encoder output {}",
                config.projector.input, config.encoder.output
            )));
        }
        if config.predictor.input != config.projector.output {
            return Err(Error::Spec(format!(
                "predictor input {} does not match projector output {}",
                config.predictor.input, config.projector.output
            )));
        }
        if !(0.0..=1.0).contains(&config.ema_rate) {
            return Err(Error::Spec(format!(
                "ema rate {} outside [0, 1]",
                config.ema_rate
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(config.encoder, "encoder", &mut rng);
        let projector = Mlp::init(config.projector, "projector", &mut rng);
        let predictor = Mlp::init(config.predictor, "predictor", &mut rng);
        Ok(Self {
            target_encoder: encoder.clone(),
            target_projector: projector.clone(),
            encoder,
            projector,
            predictor,
            ema_rate: S::lit(config.ema_rate),
        })
    }

    pub fn ema_rate(&self) -> S {
        self.ema_rate
    }

    pub fn encoder(&self) -> &Mlp<S> {
        &self.encoder
    }

    pub fn projector(&self) -> &Mlp<S> {
        &self.projector
    }

    pub fn predictor(&self) -> &Mlp<S> {
        &self.predictor
    }

    pub fn target_encoder(&self) -> &Mlp<S> {
        &self.target_encoder
    }

    pub fn target_projector(&self) -> &Mlp<S> {
        &self.target_projector
    }

    /// Registers every online parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape<S>) -> OnlineLeaves<S> {
        let leaves = |m: &Mlp<S>| m.params.iter().map(|p| tape.leaf(&p.tensor())).collect();
        OnlineLeaves {
            encoder: leaves(&self.encoder),
            projector: leaves(&self.projector),
            predictor: leaves(&self.predictor),
        }
    }

    /// The parameters an optimizer may update: online `f`, `g`, `h` only.
    pub fn online_params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.encoder
            .params
            .iter_mut()
            .chain(self.projector.params.iter_mut())
            .chain(self.predictor.params.iter_mut())
            .collect()
    }

    pub fn online_params(&self) -> impl Iterator<Item = &Param<S>> {
        self.encoder
            .params
            .iter()
            .chain(&self.projector.params)
            .chain(&self.predictor.params)
    }

    pub fn target_params(&self) -> impl Iterator<Item = &Param<S>> {
        self.target_encoder
            .params
            .iter()
            .chain(&self.target_projector.params)
    }

    /// `l2_normalize(h(g(f(x))))` on the tape.
    pub fn forward_online(
        &mut self,
        tape: &Tape<S>,
        leaves: &OnlineLeaves<S>,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        let z = self.encoder.run(tape, &leaves.encoder, x, mode, true)?;
        let z = self
            .projector
            .run(tape, &leaves.projector, &z, mode, true)?;
        let z = self
            .predictor
            .run(tape, &leaves.predictor, &z, mode, true)?;
        tape.l2_normalize(&z)
    }

    /// `l2_normalize(g_t(f_t(x)))`, detached. Train mode normalizes with the
    /// batch moments but never touches the target running statistics.
    pub fn forward_target(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let enc = self.target_encoder.constants();
        let proj = self.target_projector.constants();
        let z = self
            .target_encoder
            .run(&tape, &enc, &x.detach(), mode, false)?;
        let z = self.target_projector.run(&tape, &proj, &z, mode, false)?;
        tape.l2_normalize(&z)
    }

    /// Frozen online encoder output in eval mode.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let mut encoder = self.encoder.clone();
        let weights = encoder.constants();
        encoder.run(&tape, &weights, &x.detach(), Mode::Eval, false)
    }

    /// Online projector output `g(f(x))`, normalized, eval mode, detached.
    pub fn project_online(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let mut enc = self.encoder.clone();
        let mut proj = self.projector.clone();
        let (we, wp) = (enc.constants(), proj.constants());
        let z = enc.run(&tape, &we, &x.detach(), Mode::Eval, false)?;
        let z = proj.run(&tape, &wp, &z, Mode::Eval, false)?;
        tape.l2_normalize(&z)
    }

    /// `t <- rate * t + (1 - rate) * o` for every target weight and
    /// running moment.
    pub fn ema_update(&mut self) {
        let rate = self.ema_rate;
        self.target_encoder.ema_from(&self.encoder, rate);
        self.target_projector.ema_from(&self.projector, rate);
    }

    /// All persistent state as `(name, shape, values)`, online first.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        self.encoder.state_entries("online", &mut out);
        self.projector.state_entries("online", &mut out);
        self.predictor.state_entries("online", &mut out);
        self.target_encoder.state_entries("target", &mut out);
        self.target_projector.state_entries("target", &mut out);
        out
    }

    pub fn restore_state(&mut self, table: &BTreeMap<String, (Vec<usize>, Vec<S>)>) -> Result<()> {
        self.encoder.restore("online", table)?;
        self.projector.restore("online", table)?;
        self.predictor.restore("online", table)?;
        self.target_encoder.restore("target", table)?;
        self.target_projector.restore("target", table)?;
        Ok(())
    }
}

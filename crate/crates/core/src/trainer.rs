//! Toy segmentation models, optimizers, the training loop and the ablation
//! harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::losses::{
    attentive_ce, combined_objective, cross_entropy, soft_dice_against, soft_dice_loss,
    weighted_sum, RegistrationMode, RegistrationTarget, Schedules, DEFAULT_ALPHA_MAX,
};
use crate::metrics::{evaluate_segmentation, fissure_name, lobe_name, MetricsReport};
use crate::morphology::{fgm_forward, fissure_gt_from_lobes, FissureAdjacency, DEFAULT_RADIUS};
use crate::registration::{RegistrationConfig, RegistrationOperator};
use crate::synth::PhantomCase;
use crate::volume::{argmax_channel, one_hot, ChannelVolume, LabelVolume, ScalarVolume, Shape3};
use crate::{Error, Result};

/// Hidden width of the tiny convolutional model.
pub const TINY_HIDDEN: usize = 8;

/// Standard deviation of the direct-logit initialization.
const LOGIT_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "baseline-ce")]
    BaselineCe,
    #[serde(rename = "ace")]
    Ace,
    #[serde(rename = "ace+dice-fissure")]
    AceDiceFissure,
    #[serde(rename = "ace+reg")]
    AceReg,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::BaselineCe, Arm::Ace, Arm::AceDiceFissure, Arm::AceReg];

    pub fn name(self) -> &'static str {
        match self {
            Arm::BaselineCe => "baseline-ce",
            Arm::Ace => "ace",
            Arm::AceDiceFissure => "ace+dice-fissure",
            Arm::AceReg => "ace+reg",
        }
    }

    pub fn valid_names() -> String {
        Arm::ALL.map(Arm::name).join(", ")
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::param(format!(
                "unknown arm '{s}'; valid arms: {}",
                Arm::valid_names()
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One free logit per voxel and class, fitted to a single case.
    #[default]
    DirectLogit,
    /// conv3 → tanh → conv3 over the image and three coordinate channels.
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step with weight decay added to the gradient.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter and gradient lengths differ"
    );
    assert_eq!(
        params.len(),
        state.m.len(),
        "parameter and moment lengths differ"
    );
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = g + cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn sgd_update(params: &mut [f64], grads: &[f64], cfg: &OptimizerConfig) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter and gradient lengths differ"
    );
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= cfg.learning_rate * (g + cfg.weight_decay * *p);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha_max: f64,
    pub radius: usize,
    pub registration: RegistrationConfig,
    pub registration_mode: RegistrationMode,
    pub adjacency: FissureAdjacency,
    pub model: ModelKind,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to the input image each step.
    pub input_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha_max: DEFAULT_ALPHA_MAX,
            radius: DEFAULT_RADIUS,
            registration: RegistrationConfig::default(),
            registration_mode: RegistrationMode::Collapsed,
            adjacency: FissureAdjacency::five_lobe(),
            model: ModelKind::DirectLogit,
            seed: 0,
            input_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::param(msg));
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return fail(format!(
                "alpha_max must lie in [0, 1], got {}",
                self.alpha_max
            ));
        }
        if self.radius == 0 {
            return fail("radius must be at least 1".into());
        }
        if !(self.input_noise >= 0.0 && self.input_noise.is_finite()) {
            return fail(format!(
                "input_noise must be non-negative, got {}",
                self.input_noise
            ));
        }
        RegistrationOperator::from_config(&self.registration)?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.adjacency.max_lobe() as usize + 1
    }
}

/// Trainable parameters of a model; every tensor becomes a leaf on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    num_classes: usize,
    shape: Option<Shape3>,
    params: Vec<ChannelVolume>,
}

fn normal_volume(rng: &mut ChaCha8Rng, channels: usize, shape: Shape3, std: f64) -> ChannelVolume {
    let d = Normal::new(0.0, std).expect("positive std");
    let data = (0..channels * shape.len()).map(|_| d.sample(rng)).collect();
    ChannelVolume::from_raw(channels, shape, data)
}

impl Model {
    pub fn direct_logit(shape: Shape3, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            kind: ModelKind::DirectLogit,
            num_classes,
            shape: Some(shape),
            params: vec![normal_volume(&mut rng, num_classes, shape, LOGIT_INIT_STD)],
        }
    }

    pub fn tiny_conv(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Shape3::cube(3).expect("3³");
        let c_in = 4;
        let w1 = normal_volume(
            &mut rng,
            TINY_HIDDEN * c_in,
            k,
            1.0 / ((c_in * 27) as f64).sqrt(),
        );
        let w2 = normal_volume(
            &mut rng,
            num_classes * TINY_HIDDEN,
            k,
            1.0 / ((TINY_HIDDEN * 27) as f64).sqrt(),
        );
        Self {
            kind: ModelKind::TinyConv,
            num_classes,
            shape: None,
            params: vec![
                w1,
                ChannelVolume::zeros(TINY_HIDDEN, Shape3::unit()),
                w2,
                ChannelVolume::zeros(num_classes, Shape3::unit()),
            ],
        }
    }

    pub fn new(kind: ModelKind, shape: Shape3, num_classes: usize, seed: u64) -> Self {
        match kind {
            ModelKind::DirectLogit => Self::direct_logit(shape, num_classes, seed),
            ModelKind::TinyConv => Self::tiny_conv(num_classes, seed),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[ChannelVolume] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(ChannelVolume::len).sum()
    }

    fn check_input(&self, image: &ScalarVolume) -> Result<()> {
        match self.shape {
            Some(s) if s != image.shape() => Err(Error::param(format!(
                "direct-logit model is {:?}, image is {:?}",
                s.dims(),
                image.shape().dims()
            ))),
            _ => Ok(()),
        }
    }

    /// Logits with `num_classes` channels for `image`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        image: &ScalarVolume,
    ) -> Result<NodeId> {
        self.check_input(image)?;
        match self.kind {
            ModelKind::DirectLogit => Ok(params[0]),
            ModelKind::TinyConv => {
                let x = tape.constant(with_coordinates(image));
                let h = tape.conv3(x, params[0], params[1])?;
                let h = tape.tanh(h);
                tape.conv3(h, params[2], params[3])
            }
        }
    }

    pub fn predict(&self, image: &ScalarVolume) -> Result<LabelVolume> {
        let mut tape = Tape::new();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let logits = self.forward(&mut tape, &params, image)?;
        argmax_channel(tape.value(logits)).with_num_classes(self.num_classes)
    }
}

/// The image followed by x, y, z coordinates scaled to `[-1, 1]`.
fn with_coordinates(image: &ScalarVolume) -> ChannelVolume {
    let shape = image.shape();
    let n = shape.len();
    let mut data = Vec::with_capacity(4 * n);
    data.extend_from_slice(image.data());
    let dims = shape.dims();
    for axis in 0..3 {
        data.extend((0..n).map(|i| {
            let (x, y, z) = shape.coords(i);
            2.0 * ([x, y, z][axis] as f64 + 0.5) / dims[axis] as f64 - 1.0
        }));
    }
    ChannelVolume::from_raw(4, shape, data)
}

/// Loss components of one step. `total = λ₁·l_ace + λ₂·l_dc + λ₃·l_aux`, where
/// `l_ace` is plain cross entropy for the baseline arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub l_ace: f64,
    pub l_dc: f64,
    pub l_aux: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub arm: Arm,
    pub model: ModelKind,
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    /// Metrics of the final-step model on each training case; there is no
    /// validation-based model selection.
    pub final_metrics: Vec<MetricsReport>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const STEP_CSV_HEADER: [&str; 9] = [
    "step", "alpha", "lambda1", "lambda2", "lambda3", "l_ace", "l_dc", "l_aux", "total",
];

impl TrainReport {
    /// Per-step log, one row per step.
    pub fn steps_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record(STEP_CSV_HEADER).expect("writing to memory");
        for r in &self.steps {
            w.serialize(r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
    }

    /// Deterministic summary: configuration, last step and final metrics.
    /// Wall-clock time is left out so that reruns compare byte for byte.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            arm: Arm,
            model: ModelKind,
            config: &'a TrainConfig,
            steps: usize,
            last: Option<&'a StepRecord>,
            final_metrics: &'a [MetricsReport],
            note: &'static str,
        }
        let s = Summary {
            arm: self.arm,
            model: self.model,
            config: &self.config,
            steps: self.steps.len(),
            last: self.steps.last(),
            final_metrics: &self.final_metrics,
            note: "metrics are for the final-step model; no validation-based selection",
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }

    pub fn timing_json(&self) -> String {
        serde_json::json!({ "wall_clock_secs": self.wall_clock_secs }).to_string()
    }

    pub fn final_mean_dsc(&self) -> f64 {
        let n = self.final_metrics.len() as f64;
        self.final_metrics.iter().map(|m| m.mean_dsc).sum::<f64>() / n
    }
}

/// Per-case data prepared once before training.
struct Prepared<'a> {
    case: &'a PhantomCase,
    fissure_target: ChannelVolume,
    reg_target: Option<RegistrationTarget>,
}

struct Terms {
    total: NodeId,
    ace: NodeId,
    dice: NodeId,
    aux: Option<NodeId>,
    alpha: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
}

#[allow(clippy::too_many_arguments)]
fn objective(
    tape: &mut Tape,
    probs: NodeId,
    data: &Prepared<'_>,
    arm: Arm,
    step: usize,
    schedules: &Schedules,
    config: &TrainConfig,
    op: &RegistrationOperator,
) -> Result<Terms> {
    let labels = &data.case.lobes;
    let (l1, l2) = (schedules.weights.lambda1, schedules.weights.lambda2);
    match arm {
        Arm::BaselineCe => {
            let ace = cross_entropy(tape, probs, labels)?;
            let dice = soft_dice_loss(tape, probs, labels)?;
            let total = tape.scalar_mul(ace, l1);
            Ok(Terms {
                total,
                ace,
                dice,
                aux: None,
                alpha: 0.0,
                lambda1: l1,
                lambda2: 0.0,
                lambda3: 0.0,
            })
        }
        Arm::Ace => {
            let alpha = schedules.alpha.at(step);
            let ace = attentive_ce(tape, probs, labels, alpha)?;
            let dice = soft_dice_loss(tape, probs, labels)?;
            let total = weighted_sum(tape, &[(ace, l1), (dice, l2)])?;
            Ok(Terms {
                total,
                ace,
                dice,
                aux: None,
                alpha,
                lambda1: l1,
                lambda2: l2,
                lambda3: 0.0,
            })
        }
        Arm::AceDiceFissure => {
            let alpha = schedules.alpha.at(step);
            let lambda3 = schedules.weights.lambda3(step);
            let ace = attentive_ce(tape, probs, labels, alpha)?;
            let dice = soft_dice_loss(tape, probs, labels)?;
            let fissures = fgm_forward(tape, probs, &config.adjacency, config.radius)?;
            let aux = soft_dice_against(tape, fissures, &data.fissure_target)?;
            let total = weighted_sum(tape, &[(ace, l1), (dice, l2), (aux, lambda3)])?;
            Ok(Terms {
                total,
                ace,
                dice,
                aux: Some(aux),
                alpha,
                lambda1: l1,
                lambda2: l2,
                lambda3,
            })
        }
        Arm::AceReg => {
            let target = data
                .reg_target
                .as_ref()
                .expect("registration target prepared");
            let t = combined_objective(
                tape,
                probs,
                labels,
                target,
                &config.adjacency,
                config.radius,
                step,
                schedules,
                op,
            )?;
            Ok(Terms {
                total: t.total,
                ace: t.ace,
                dice: t.dice,
                aux: Some(t.reg),
                alpha: t.alpha,
                lambda1: l1,
                lambda2: l2,
                lambda3: t.lambda3,
            })
        }
    }
}

fn prepare<'a>(
    case: &'a PhantomCase,
    arm: Arm,
    config: &TrainConfig,
    op: &RegistrationOperator,
) -> Result<Prepared<'a>> {
    let fissure_gt = fissure_gt_from_lobes(&case.lobes, config.radius, &config.adjacency)?;
    let fissure_target = one_hot(&fissure_gt, fissure_gt.num_classes())?;
    let reg_target = match arm {
        Arm::AceReg => Some(RegistrationTarget::new(
            &fissure_gt,
            op,
            config.registration_mode,
        )?),
        _ => None,
    };
    Ok(Prepared {
        case,
        fissure_target,
        reg_target,
    })
}

fn noisy_input(image: &ScalarVolume, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ScalarVolume> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let d = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    ScalarVolume::new(
        image.shape(),
        image.data().iter().map(|&v| v + d.sample(rng)).collect(),
    )
}

/// Trains `model` in place on `cases` (one case per step, cycling) and
/// reports every step plus the final metrics on each case.
pub fn train(
    model: &mut Model,
    cases: &[PhantomCase],
    config: &TrainConfig,
    arm: Arm,
) -> Result<TrainReport> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::param("training needs at least one case"));
    }
    if model.kind == ModelKind::DirectLogit && cases.len() != 1 {
        return Err(Error::param(format!(
            "a direct-logit model fits exactly one case, got {}",
            cases.len()
        )));
    }
    if model.num_classes != config.num_classes() {
        return Err(Error::param(format!(
            "model has {} classes, adjacency implies {}",
            model.num_classes,
            config.num_classes()
        )));
    }
    for case in cases {
        model.check_input(&case.image)?;
        if case.lobes.num_classes() != model.num_classes {
            return Err(Error::param(format!(
                "labels use {} classes, model predicts {}",
                case.lobes.num_classes(),
                model.num_classes
            )));
        }
    }
    let started = Instant::now();
    let op = RegistrationOperator::from_config(&config.registration)?;
    let prepared = cases
        .iter()
        .map(|c| prepare(c, arm, config, &op))
        .collect::<Result<Vec<_>>>()?;
    let schedules = Schedules::new(config.alpha_max, config.total_steps)?;
    let opt = config.optimizer_config();
    let mut states: Vec<AdamState> = model
        .params
        .iter()
        .map(|p| AdamState::new(p.len()))
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(7);

    let mut records = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let data = &prepared[step % prepared.len()];
        let input = noisy_input(&data.case.image, config.input_noise, &mut noise_rng)?;
        let mut tape = Tape::new();
        let params: Vec<NodeId> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let logits = model.forward(&mut tape, &params, &input)?;
        let probs = tape.softmax_channels(logits)?;
        let t = objective(&mut tape, probs, data, arm, step, &schedules, config, &op)?;
        let record = StepRecord {
            step,
            alpha: t.alpha,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lambda3: t.lambda3,
            l_ace: tape.scalar(t.ace),
            l_dc: tape.scalar(t.dice),
            l_aux: t.aux.map_or(0.0, |a| tape.scalar(a)),
            total: tape.scalar(t.total),
        };
        if ![record.l_ace, record.l_dc, record.l_aux, record.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Diverged { step });
        }
        let mut grads = tape.backward(t.total)?;
        for (k, &id) in params.iter().enumerate() {
            let g = grads
                .take(id)
                .unwrap_or_else(|| vec![0.0; model.params[k].len()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step });
            }
            let p = model.params[k].data_mut();
            match opt.kind {
                OptimizerKind::Adam => adam_update(p, &g, &mut states[k], &opt),
                OptimizerKind::Sgd => sgd_update(p, &g, &opt),
            }
        }
        if model
            .params
            .iter()
            .any(|p| p.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { step });
        }
        records.push(record);
    }

    let final_metrics = prepared
        .iter()
        .map(|d| {
            let pred = model.predict(&d.case.image)?;
            evaluate_segmentation(&pred, &d.case.lobes, &config.adjacency, config.radius)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        arm,
        model: model.kind,
        config: config.clone(),
        steps: records,
        final_metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub defined: usize,
    pub total: usize,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Option<Stat> {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        if defined.is_empty() {
            return None;
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            defined: defined.len(),
            total: values.len(),
        })
    }

    fn cell(stat: Option<Stat>, scale: f64) -> String {
        match stat {
            None => crate::metrics::UNDEFINED.to_string(),
            Some(s) => {
                let base = format!("{:.2}±{:.2}", s.mean * scale, s.std * scale);
                if s.defined < s.total {
                    format!("{base} (n={}/{})", s.defined, s.total)
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    /// `None` when the arm failed; the message is kept in `failure`.
    pub dsc: Vec<Option<Stat>>,
    pub mean_dsc: Option<Stat>,
    pub assd: Vec<Option<Stat>>,
    pub mean_assd: Option<Stat>,
    pub failure: Option<String>,
}

/// Per-arm, per-class statistics across held-out cases, laid out like the
/// paper's ablation table: a DSC block followed by a fissure ASSD block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub lobe_names: Vec<String>,
    pub fissure_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Builds the table from per-arm metrics (one report per case) or a
    /// failure message per arm.
    pub fn from_reports(
        arms: Vec<(String, std::result::Result<Vec<MetricsReport>, String>)>,
        num_classes: usize,
        adj: &FissureAdjacency,
    ) -> Self {
        let lobe_names = (1..num_classes as u8)
            .map(|c| lobe_name(c, num_classes))
            .collect();
        let fissure_names = adj
            .entries()
            .iter()
            .map(|e| fissure_name(e.fissure, adj))
            .collect();
        let rows = arms
            .into_iter()
            .map(|(arm, outcome)| match outcome {
                Ok(reports) => {
                    let lobes = num_classes - 1;
                    let dsc = (0..lobes)
                        .map(|k| {
                            Stat::of(
                                &reports
                                    .iter()
                                    .map(|r| Some(r.lobes[k].dsc))
                                    .collect::<Vec<_>>(),
                            )
                        })
                        .collect();
                    let assd = (0..adj.num_fissures())
                        .map(|k| {
                            Stat::of(
                                &reports
                                    .iter()
                                    .map(|r| r.fissures[k].assd)
                                    .collect::<Vec<_>>(),
                            )
                        })
                        .collect();
                    AblationRow {
                        arm,
                        dsc,
                        mean_dsc: Stat::of(
                            &reports.iter().map(|r| Some(r.mean_dsc)).collect::<Vec<_>>(),
                        ),
                        assd,
                        mean_assd: Stat::of(
                            &reports.iter().map(|r| r.mean_assd).collect::<Vec<_>>(),
                        ),
                        failure: None,
                    }
                }
                Err(msg) => AblationRow {
                    arm,
                    dsc: vec![None; num_classes - 1],
                    mean_dsc: None,
                    assd: vec![None; adj.num_fissures()],
                    mean_assd: None,
                    failure: Some(msg),
                },
            })
            .collect();
        Self {
            lobe_names,
            fissure_names,
            rows,
        }
    }

    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }

    /// DSC in percent and ASSD in voxels, `mean±std` per cell. Rows of failed
    /// arms read `failed` in every cell.
    pub fn to_csv(&self) -> String {
        let width = 1 + self.lobe_names.len().max(self.fissure_names.len()) + 1;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |mut rec: Vec<String>| {
            rec.resize(width, String::new());
            w.write_record(&rec).expect("writing to memory");
        };
        let header = |title: &str, names: &[String]| {
            std::iter::once(title.to_string())
                .chain(names.iter().cloned())
                .chain(std::iter::once("Mean".to_string()))
                .collect::<Vec<_>>()
        };
        let cells = |row: &AblationRow, stats: &[Option<Stat>], mean: Option<Stat>, scale: f64| {
            std::iter::once(row.arm.clone())
                .chain(stats.iter().chain(std::iter::once(&mean)).map(|s| {
                    if row.failure.is_some() {
                        "failed".to_string()
                    } else {
                        Stat::cell(*s, scale)
                    }
                }))
                .collect::<Vec<_>>()
        };
        put(header("DSC(%)", &self.lobe_names));
        for row in &self.rows {
            put(cells(row, &row.dsc, row.mean_dsc, 100.0));
        }
        put(header("ASSD", &self.fissure_names));
        for row in &self.rows {
            put(cells(row, &row.assd, row.mean_assd, 1.0));
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
    }

    /// Plain-language comparisons of each arm's mean DSC and mean ASSD
    /// against the first row. Reported only; nothing is asserted about them.
    pub fn directional_summary(&self) -> Vec<String> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        let describe = |a: Option<Stat>, b: Option<Stat>, higher_better: bool| match (a, b) {
            (Some(a), Some(b)) if a.mean == b.mean => "equal to".to_string(),
            (Some(a), Some(b)) => {
                let better = (a.mean > b.mean) == higher_better;
                format!(
                    "{} than ({:.4} vs {:.4})",
                    if better { "better" } else { "worse" },
                    a.mean,
                    b.mean
                )
            }
            _ => "not comparable with".to_string(),
        };
        self.rows
            .iter()
            .skip(1)
            .map(|r| {
                format!(
                    "{}: mean DSC {} {}; mean ASSD {} {}",
                    r.arm,
                    describe(r.mean_dsc, first.mean_dsc, true),
                    first.arm,
                    describe(r.mean_assd, first.mean_assd, false),
                    first.arm
                )
            })
            .collect()
    }
}

/// Trains every arm with shared seeds and data, then evaluates on the
/// held-out cases.
///
/// A tiny-conv model is trained on `train_cases` and applied to each held-out
/// case. A direct-logit model cannot transfer between cases, so each held-out
/// case gets its own fit and `train_cases` only has to be nonempty.
pub fn run_ablation(
    train_cases: &[PhantomCase],
    held_out: &[PhantomCase],
    config: &TrainConfig,
) -> Result<AblationTable> {
    config.validate()?;
    if train_cases.is_empty() || held_out.is_empty() {
        return Err(Error::param(
            "ablation needs at least one training and one held-out case",
        ));
    }
    let num_classes = config.num_classes();
    let mut arms = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let outcome = ablation_arm(train_cases, held_out, config, arm, num_classes);
        match outcome {
            Ok(reports) => arms.push((arm.name().to_string(), Ok(reports))),
            Err(e @ Error::Diverged { .. }) => {
                arms.push((arm.name().to_string(), Err(e.to_string())))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AblationTable::from_reports(
        arms,
        num_classes,
        &config.adjacency,
    ))
}

fn ablation_arm(
    train_cases: &[PhantomCase],
    held_out: &[PhantomCase],
    config: &TrainConfig,
    arm: Arm,
    num_classes: usize,
) -> Result<Vec<MetricsReport>> {
    let evaluate = |model: &Model, case: &PhantomCase| {
        let pred = model.predict(&case.image)?;
        evaluate_segmentation(&pred, &case.lobes, &config.adjacency, config.radius)
    };
    match config.model {
        ModelKind::TinyConv => {
            let mut model = Model::tiny_conv(num_classes, config.seed);
            train(&mut model, train_cases, config, arm)?;
            held_out.iter().map(|c| evaluate(&model, c)).collect()
        }
        ModelKind::DirectLogit => held_out
            .iter()
            .map(|c| {
                let mut model = Model::direct_logit(c.image.shape(), num_classes, config.seed);
                train(&mut model, std::slice::from_ref(c), config, arm)?;
                evaluate(&model, c)
            })
            .collect(),
    }
}

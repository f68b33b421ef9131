//! Training losses: attentive cross entropy, soft Dice, the registration loss
//! on generated fissures, and their scheduled combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::morphology::{fgm_forward, FissureAdjacency};
use crate::registration::RegistrationOperator;
use crate::volume::{one_hot, ChannelVolume, LabelVolume, ScalarVolume};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Default final attention strength.
pub const DEFAULT_ALPHA_MAX: f64 = 0.9;

/// Linear ramp of the attention strength from 0 to `alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub total_steps: usize,
}

impl AlphaSchedule {
    pub fn new(alpha_max: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_max) {
            return Err(Error::param(format!(
                "alpha_max {alpha_max} outside [0, 1]"
            )));
        }
        if total_steps == 0 {
            return Err(Error::param("total_steps must be positive"));
        }
        Ok(Self {
            alpha_max,
            total_steps,
        })
    }

    pub fn at(&self, step: usize) -> f64 {
        self.alpha_max * ramp(step, self.total_steps)
    }
}

fn ramp(step: usize, total: usize) -> f64 {
    step.min(total) as f64 / total as f64
}

/// λ₁ and λ₂ are fixed; λ₃ ramps linearly from 0 to 1 over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub total_steps: usize,
}

impl LossWeights {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("total_steps must be positive"));
        }
        Ok(Self {
            lambda1: 1.0,
            lambda2: 1.0,
            total_steps,
        })
    }

    pub fn lambda3(&self, step: usize) -> f64 {
        ramp(step, self.total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub alpha: AlphaSchedule,
    pub weights: LossWeights,
}

impl Schedules {
    pub fn new(alpha_max: f64, total_steps: usize) -> Result<Self> {
        Ok(Self {
            alpha: AlphaSchedule::new(alpha_max, total_steps)?,
            weights: LossWeights::new(total_steps)?,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.weights.total_steps
    }
}

fn target_for(tape: &Tape, probs: NodeId, labels: &LabelVolume) -> Result<ChannelVolume> {
    let p = tape.value(probs);
    if p.shape() != labels.shape() {
        return Err(Error::param(format!(
            "probabilities {:?} and labels {:?} differ in shape",
            p.shape().dims(),
            labels.shape().dims()
        )));
    }
    one_hot(labels, p.channels())
}

/// Predicted probability of the true class, one channel.
fn true_class_prob(tape: &mut Tape, probs: NodeId, labels: &LabelVolume) -> Result<NodeId> {
    let t = target_for(tape, probs, labels)?;
    let t = tape.constant(t);
    let picked = tape.mul(probs, t)?;
    Ok(tape.channel_sum(picked))
}

/// Mean cross entropy `-mean_i log y_{i,g(i)}`.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, labels: &LabelVolume) -> Result<NodeId> {
    let y = true_class_prob(tape, probs, labels)?;
    let logy = tape.log(y);
    let m = tape.mean_all(logy);
    Ok(tape.scalar_mul(m, -1.0))
}

/// Attentive cross entropy: `-mean_i w_i log y_{i,g(i)}` with
/// `w_i = 1 - α y_{i,g(i)}`. The weight is part of the differentiated graph.
pub fn attentive_ce(
    tape: &mut Tape,
    probs: NodeId,
    labels: &LabelVolume,
    alpha: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha {alpha} outside [0, 1]")));
    }
    let y = true_class_prob(tape, probs, labels)?;
    let scaled = tape.scalar_mul(y, alpha);
    let w = tape.one_minus(scaled);
    let logy = tape.log(y);
    let weighted = tape.mul(w, logy)?;
    let m = tape.mean_all(weighted);
    Ok(tape.scalar_mul(m, -1.0))
}

/// `1 - mean_{c ≥ 1} (2 Σ p_c t_c + ε) / (Σ p_c + Σ t_c + ε)` against an
/// explicit per-channel target; channel 0 (background) is excluded.
pub fn soft_dice_against(tape: &mut Tape, probs: NodeId, target: &ChannelVolume) -> Result<NodeId> {
    let p = tape.value(probs);
    if !p.same_layout(target) {
        return Err(Error::param(
            "dice target layout differs from probabilities",
        ));
    }
    let c = p.channels();
    if c < 2 {
        return Err(Error::param(
            "dice needs a background and at least one class",
        ));
    }
    let t_sums = ChannelVolume::from_raw(
        c,
        crate::volume::Shape3::unit(),
        (0..c).map(|k| target.channel(k).iter().sum()).collect(),
    );
    let t = tape.constant(target.clone());
    let inter = tape.mul(probs, t)?;
    let inter = tape.spatial_sum(inter);
    let num = tape.scalar_mul(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let p_sum = tape.spatial_sum(probs);
    let t_sum = tape.constant(t_sums);
    let den = tape.add(p_sum, t_sum)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let dice = tape.div(num, den)?;
    let fg: Vec<usize> = (1..c).collect();
    let fg = tape.select_channels(dice, &fg)?;
    let mean = tape.mean_all(fg);
    Ok(tape.one_minus(mean))
}

/// Soft Dice loss of a probability map against a label map.
pub fn soft_dice_loss(tape: &mut Tape, probs: NodeId, labels: &LabelVolume) -> Result<NodeId> {
    let t = target_for(tape, probs, labels)?;
    soft_dice_against(tape, probs, &t)
}

/// How fissure maps are presented to the registration operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationMode {
    /// All foreground fissure classes merged into one sheet image.
    #[default]
    Collapsed,
    /// One registration per fissure class; fields are stacked.
    PerClass,
}

/// Fixed-side images and the cached self-registration offset for one fissure
/// ground truth.
#[derive(Debug, Clone)]
pub struct RegistrationTarget {
    mode: RegistrationMode,
    num_classes: usize,
    references: Vec<ScalarVolume>,
    offset: ChannelVolume,
}

impl RegistrationTarget {
    pub fn new(
        fissure_gt: &LabelVolume,
        op: &RegistrationOperator,
        mode: RegistrationMode,
    ) -> Result<Self> {
        let shape = fissure_gt.shape();
        let k = fissure_gt.num_classes();
        if k < 2 {
            return Err(Error::param(
                "fissure ground truth needs at least one fissure class",
            ));
        }
        let references: Vec<ScalarVolume> = match mode {
            RegistrationMode::Collapsed => {
                let data = fissure_gt
                    .data()
                    .iter()
                    .map(|&l| if l != 0 { 1.0 } else { 0.0 })
                    .collect();
                vec![ScalarVolume::new(shape, data)?]
            }
            RegistrationMode::PerClass => (1..k)
                .map(|c| {
                    let data = fissure_gt
                        .data()
                        .iter()
                        .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
                        .collect();
                    ScalarVolume::new(shape, data)
                })
                .collect::<Result<_>>()?,
        };
        // Err_φ = φ(G, G); depends only on the ground truth.
        let mut tape = Tape::new();
        let mut fields = Vec::with_capacity(references.len());
        for r in &references {
            let m = tape.constant(r.clone().into_channels());
            fields.push(op.register(&mut tape, m, r)?);
        }
        let all = tape.concat_channels(&fields)?;
        let offset = tape.value(all).clone();
        Ok(Self {
            mode,
            num_classes: k,
            references,
            offset,
        })
    }

    pub fn offset(&self) -> &ChannelVolume {
        &self.offset
    }

    pub fn references(&self) -> &[ScalarVolume] {
        &self.references
    }

    /// Moving-side images derived from a generated fissure probability map.
    fn moving(&self, tape: &mut Tape, generated: NodeId) -> Result<Vec<NodeId>> {
        let g = tape.value(generated);
        if g.shape() != self.references[0].shape() {
            return Err(Error::param(format!(
                "generated fissure map {:?} and ground truth {:?} differ in shape",
                g.shape().dims(),
                self.references[0].shape().dims()
            )));
        }
        if g.channels() != self.num_classes {
            return Err(Error::param(format!(
                "generated fissure map has {} channels, ground truth uses {} classes",
                g.channels(),
                self.num_classes
            )));
        }
        match self.mode {
            RegistrationMode::Collapsed => {
                let fg: Vec<usize> = (1..self.num_classes).collect();
                let sel = tape.select_channels(generated, &fg)?;
                Ok(vec![tape.channel_sum(sel)])
            }
            RegistrationMode::PerClass => (1..self.num_classes)
                .map(|c| tape.select_channel(generated, c))
                .collect(),
        }
    }

    /// `mean |φ(Z, G) - Err_φ|` over all field entries.
    pub fn loss(
        &self,
        tape: &mut Tape,
        generated: NodeId,
        op: &RegistrationOperator,
    ) -> Result<NodeId> {
        let moving = self.moving(tape, generated)?;
        let mut fields = Vec::with_capacity(moving.len());
        for (m, r) in moving.into_iter().zip(&self.references) {
            fields.push(op.register(tape, m, r)?);
        }
        let field = tape.concat_channels(&fields)?;
        let offset = tape.constant(self.offset.clone());
        let d = tape.sub(field, offset)?;
        let l1 = tape.l1_norm(d);
        Ok(tape.scalar_mul(l1, 1.0 / self.offset.len() as f64))
    }
}

/// Registration loss of a generated fissure map against its ground truth,
/// collapsed to a single sheet image.
pub fn registration_loss(
    tape: &mut Tape,
    generated: NodeId,
    fissure_gt: &LabelVolume,
    op: &RegistrationOperator,
) -> Result<NodeId> {
    RegistrationTarget::new(fissure_gt, op, RegistrationMode::Collapsed)?.loss(tape, generated, op)
}

/// Scalar nodes and schedule values of one evaluation of the full objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: NodeId,
    pub ace: NodeId,
    pub dice: NodeId,
    pub reg: NodeId,
    pub alpha: f64,
    pub lambda3: f64,
}

/// `λ₁ L_ace(α(step)) + λ₂ L_dice + λ₃(step) L_reg(FGM(probs))`.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective(
    tape: &mut Tape,
    lobe_probs: NodeId,
    labels: &LabelVolume,
    target: &RegistrationTarget,
    adj: &FissureAdjacency,
    radius: usize,
    step: usize,
    schedules: &Schedules,
    op: &RegistrationOperator,
) -> Result<ObjectiveTerms> {
    if step > schedules.total_steps() {
        return Err(Error::param(format!(
            "step {step} beyond total_steps {}",
            schedules.total_steps()
        )));
    }
    let alpha = schedules.alpha.at(step);
    let lambda3 = schedules.weights.lambda3(step);
    let ace = attentive_ce(tape, lobe_probs, labels, alpha)?;
    let dice = soft_dice_loss(tape, lobe_probs, labels)?;
    let fissures = fgm_forward(tape, lobe_probs, adj, radius)?;
    let reg = target.loss(tape, fissures, op)?;
    let total = weighted_sum(
        tape,
        &[
            (ace, schedules.weights.lambda1),
            (dice, schedules.weights.lambda2),
            (reg, lambda3),
        ],
    )?;
    Ok(ObjectiveTerms {
        total,
        ace,
        dice,
        reg,
        alpha,
        lambda3,
    })
}

/// `Σ λ_k L_k`, accumulated left to right.
pub fn weighted_sum(tape: &mut Tape, terms: &[(NodeId, f64)]) -> Result<NodeId> {
    let (&(first, w0), rest) = terms
        .split_first()
        .ok_or_else(|| Error::param("empty weighted sum"))?;
    let mut acc = tape.scalar_mul(first, w0);
    for &(node, w) in rest {
        let scaled = tape.scalar_mul(node, w);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

//! Seeded random gradient checks of the losses on small 3-lobe volumes.
//!
//! Each trial draws a slab-like 3-lobe labelling of a 4×4×4 grid and a random
//! probability map, rejects draws that sit near a non-differentiable point of
//! the checked function, and compares the tape adjoint with central
//! differences.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{analytic_gradient, evaluate, numeric_gradient, rel_error, STEP, TOLERANCE};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::{
    attentive_ce, combined_objective, registration_loss, soft_dice_against, soft_dice_loss,
    RegistrationMode, RegistrationTarget, Schedules,
};
use crate::morphology::{fgm_forward, fissure_gt_from_lobes, FissureAdjacency};
use crate::registration::{demons_register, RegistrationConfig, RegistrationOperator};
use crate::volume::{one_hot, ChannelVolume, LabelVolume, ScalarVolume, Shape3};

/// Minimum gap between the two largest entries of every pooling window.
pub const TIE_MARGIN: f64 = 1e-3;

/// Minimum distance from the kinks of `|·|` and of trilinear resampling.
pub const KINK_MARGIN: f64 = 1e-4;

const EDGE: usize = 4;
const RADIUS: usize = 1;
const SCHEDULE_STEPS: usize = 100;
const CONV_SEED: u64 = 11;
const MAX_REJECTED: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Ace,
    Dice,
    Fgm,
    RegDemons,
    RegConv,
    Combined,
}

impl GradOp {
    pub const ALL: [GradOp; 6] = [
        GradOp::Ace,
        GradOp::Dice,
        GradOp::Fgm,
        GradOp::RegDemons,
        GradOp::RegConv,
        GradOp::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Ace => "ace",
            GradOp::Dice => "dice",
            GradOp::Fgm => "fgm",
            GradOp::RegDemons => "reg-demons",
            GradOp::RegConv => "reg-conv",
            GradOp::Combined => "combined",
        }
    }

    /// Channels of the differentiated input: lobe probabilities for the
    /// lobe losses, fissure probabilities for the registration loss.
    fn input_channels(self) -> usize {
        match self {
            GradOp::RegDemons | GradOp::RegConv => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = GradOp::ALL.iter().map(|op| op.name()).collect();
                format!("unknown op '{s}', expected one of: {}", names.join(", "))
            })
    }
}

/// The worst entry of a trial whose relative error reached the tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialExcess {
    pub trial: usize,
    pub rel_error: f64,
    /// Magnitude of the analytic gradient entry with the worst error.
    pub magnitude: f64,
    pub largest: f64,
    pub loss: f64,
    /// `|analytic - numeric| * 2h` in units of the loss value's last place.
    pub ulps: f64,
}

impl fmt::Display for TrialExcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trial {}: rel err {:.2e} at an entry of magnitude {:.1e} (largest {:.1e}), \
             loss {:.3e}, disagreement {:.1} ulp of the loss over 2h",
            self.trial, self.rel_error, self.magnitude, self.largest, self.loss, self.ulps
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub op: GradOp,
    pub trials: usize,
    pub worst: f64,
    /// Draws discarded for lying near a non-differentiable point.
    pub rejected: usize,
    pub excess: Vec<TrialExcess>,
}

impl TrialSummary {
    pub fn passed(&self) -> bool {
        self.excess.is_empty()
    }
}

impl fmt::Display for TrialSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} trials, max rel err {:.2e}, {} over tolerance, {} draws rejected",
            self.op,
            self.trials,
            self.worst,
            self.excess.len(),
            self.rejected
        )
    }
}

/// Adjacency of the 3-lobe instances: lobes 1|2 and 2|3.
pub fn three_lobe() -> FissureAdjacency {
    FissureAdjacency::new(&[[1, 1, 2], [2, 2, 3]]).expect("valid table")
}

/// Slab-like 3-lobe labelling with a tilted cut along a random axis and one
/// background corner voxel.
pub fn slab_labels(rng: &mut impl Rng, shape: Shape3) -> LabelVolume {
    let [nx, ny, nz] = shape.dims();
    let axis = rng.random_range(0..3);
    let tilt: f64 = rng.random_range(-0.5..0.5);
    let data = (0..shape.len())
        .map(|i| {
            let (x, y, z) = shape.coords(i);
            if x == 0 && y == 0 && z == 0 {
                return 0;
            }
            let (p, q, n) = match axis {
                0 => (x, y, nx),
                1 => (y, z, ny),
                _ => (z, x, nz),
            };
            let t = (p as f64 + 0.5 + tilt * q as f64) / n as f64;
            if t < 0.4 {
                1
            } else if t < 0.7 {
                2
            } else {
                3
            }
        })
        .collect();
    LabelVolume::new(shape, data, 4).expect("labels below 4")
}

/// Per-voxel normalized probabilities, each at least about `1 / (20 * channels)`.
pub fn random_probs(rng: &mut impl Rng, channels: usize, shape: Shape3) -> ChannelVolume {
    let n = shape.len();
    let mut data: Vec<f64> = (0..channels * n)
        .map(|_| rng.random_range(0.05..1.0))
        .collect();
    for v in 0..n {
        let s: f64 = (0..channels).map(|c| data[c * n + v]).sum();
        for c in 0..channels {
            data[c * n + v] /= s;
        }
    }
    ChannelVolume::new(channels, shape, data).expect("finite probabilities")
}

/// Smallest gap between the largest and second largest entry over every
/// zero-padded `(2r+1)^3` window of every channel.
pub fn pool_tie_gap(v: &ChannelVolume, radius: usize) -> f64 {
    let s = v.shape();
    let [nx, ny, nz] = s.dims();
    let r = radius as isize;
    let mut gap = f64::INFINITY;
    for c in 0..v.channels() {
        for i in 0..s.len() {
            let (x, y, z) = s.coords(i);
            let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        let inside = (0..nx as isize).contains(&xx)
                            && (0..ny as isize).contains(&yy)
                            && (0..nz as isize).contains(&zz);
                        let val = if inside {
                            v.get(c, xx as usize, yy as usize, zz as usize)
                        } else {
                            0.0
                        };
                        if val > best {
                            second = best;
                            best = val;
                        } else if val > second {
                            second = val;
                        }
                    }
                }
            }
            gap = gap.min(best - second);
        }
    }
    gap
}

/// Smallest distance of a nonzero entry from zero.
fn zero_margin(values: &[f64]) -> f64 {
    values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Smallest distance of a nonzero displacement from an integer.
fn integer_margin(values: &[f64]) -> f64 {
    values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Distance of a generated fissure map from the kinks of the collapsed
/// registration loss: the l1 argument and, for demons, every intermediate
/// displacement that feeds a resampling step.
pub fn registration_margin(
    generated: &ChannelVolume,
    fissure_gt: &LabelVolume,
    op: &RegistrationOperator,
) -> Result<f64> {
    let target = RegistrationTarget::new(fissure_gt, op, RegistrationMode::Collapsed)?;
    let n = generated.shape().len();
    let sheet: Vec<f64> = (0..n)
        .map(|i| {
            (1..generated.channels())
                .map(|c| generated.channel(c)[i])
                .sum()
        })
        .collect();
    let moving = ScalarVolume::new(generated.shape(), sheet)?;
    let fixed = &target.references()[0];
    let mut t = Tape::new();
    let m = t.constant(moving.clone().into_channels());
    let u = op.register(&mut t, m, fixed)?;
    let diffs: Vec<f64> = t
        .value(u)
        .data()
        .iter()
        .zip(target.offset().data())
        .map(|(a, b)| a - b)
        .collect();
    let mut margin = zero_margin(&diffs);
    if let RegistrationOperator::Demons { iterations, sigma } = op {
        for k in 1..*iterations {
            let mut t = Tape::new();
            let m = t.constant(moving.clone().into_channels());
            let u = demons_register(&mut t, m, fixed, k, *sigma)?;
            margin = margin.min(integer_margin(t.value(u).data()));
        }
    }
    Ok(margin)
}

struct Context {
    adj: FissureAdjacency,
    demons: RegistrationOperator,
    conv: RegistrationOperator,
    schedules: Schedules,
}

impl Context {
    fn new() -> Result<Self> {
        Ok(Self {
            adj: three_lobe(),
            demons: RegistrationOperator::demons(),
            conv: RegistrationOperator::from_config(&RegistrationConfig::SeededConv {
                seed: CONV_SEED,
            })?,
            schedules: Schedules::new(0.9, SCHEDULE_STEPS)?,
        })
    }

    fn pool_ok(&self, probs: &ChannelVolume) -> bool {
        pool_tie_gap(probs, RADIUS) >= TIE_MARGIN
    }

    fn reg_ok(
        &self,
        generated: &ChannelVolume,
        labels: &LabelVolume,
        op: &RegistrationOperator,
    ) -> Result<bool> {
        let gt = fissure_gt_from_lobes(labels, RADIUS, &self.adj)?;
        Ok(registration_margin(generated, &gt, op)? >= KINK_MARGIN)
    }

    fn accept(&self, op: GradOp, input: &ChannelVolume, labels: &LabelVolume) -> Result<bool> {
        match op {
            GradOp::Ace | GradOp::Dice => Ok(true),
            GradOp::Fgm => Ok(self.pool_ok(input)),
            GradOp::RegDemons => self.reg_ok(input, labels, &self.demons),
            GradOp::RegConv => self.reg_ok(input, labels, &self.conv),
            GradOp::Combined => {
                if !self.pool_ok(input) {
                    return Ok(false);
                }
                let mut t = Tape::new();
                let p = t.constant(input.clone());
                let z = fgm_forward(&mut t, p, &self.adj, RADIUS)?;
                self.reg_ok(t.value(z), labels, &self.demons)
            }
        }
    }

    fn objective(
        &self,
        op: GradOp,
        tape: &mut Tape,
        x: NodeId,
        labels: &LabelVolume,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        match op {
            GradOp::Ace => {
                let alpha = rng.random_range(0.0..1.0);
                attentive_ce(tape, x, labels, alpha)
            }
            GradOp::Dice => soft_dice_loss(tape, x, labels),
            GradOp::Fgm => {
                let z = fgm_forward(tape, x, &self.adj, RADIUS)?;
                let gt = fissure_gt_from_lobes(labels, RADIUS, &self.adj)?;
                let target = one_hot(&gt, self.adj.num_fissures() + 1)?;
                soft_dice_against(tape, z, &target)
            }
            GradOp::RegDemons | GradOp::RegConv => {
                let reg = if op == GradOp::RegDemons {
                    &self.demons
                } else {
                    &self.conv
                };
                let gt = fissure_gt_from_lobes(labels, RADIUS, &self.adj)?;
                registration_loss(tape, x, &gt, reg)
            }
            GradOp::Combined => {
                let step = rng.random_range(0..=SCHEDULE_STEPS);
                let gt = fissure_gt_from_lobes(labels, RADIUS, &self.adj)?;
                let target =
                    RegistrationTarget::new(&gt, &self.demons, RegistrationMode::Collapsed)?;
                let terms = combined_objective(
                    tape,
                    x,
                    labels,
                    &target,
                    &self.adj,
                    RADIUS,
                    step,
                    &self.schedules,
                    &self.demons,
                )?;
                Ok(terms.total)
            }
        }
    }
}

/// Runs `trials` accepted gradient checks of `op` from `seed`.
pub fn run_trials(op: GradOp, trials: usize, seed: u64) -> Result<TrialSummary> {
    let ctx = Context::new()?;
    let shape = Shape3::cube(EDGE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = TrialSummary {
        op,
        trials,
        worst: 0.0,
        rejected: 0,
        excess: Vec::new(),
    };
    let mut done = 0;
    while done < trials {
        if summary.rejected > MAX_REJECTED {
            return Err(Error::Numeric(format!(
                "{op}: more than {MAX_REJECTED} draws rejected by the margins"
            )));
        }
        let labels = slab_labels(&mut rng, shape);
        let input = random_probs(&mut rng, op.input_channels(), shape);
        if !ctx.accept(op, &input, &labels)? {
            summary.rejected += 1;
            continue;
        }
        let trial_seed: u64 = rng.random();
        let f = |t: &mut Tape, x: NodeId| {
            let mut r = ChaCha8Rng::seed_from_u64(trial_seed);
            ctx.objective(op, t, x, &labels, &mut r)
        };
        let analytic = analytic_gradient(&input, &f)?;
        let numeric = numeric_gradient(&input, STEP, &f)?;
        let err = rel_error(&analytic, &numeric);
        if !(err < TOLERANCE) {
            let loss = evaluate(&input, &f)?;
            let (i, _) = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, e)| {
                    if e > best.1 {
                        (i, e)
                    } else {
                        best
                    }
                });
            summary.excess.push(TrialExcess {
                trial: done,
                rel_error: err,
                magnitude: analytic[i].abs(),
                largest: analytic.iter().fold(0.0, |m, a| m.max(a.abs())),
                loss,
                ulps: (analytic[i] - numeric[i]).abs() * 2.0 * STEP / (loss.abs() * f64::EPSILON),
            });
        }
        summary.worst = summary.worst.max(err);
        done += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        let err = "softmax".parse::<GradOp>().unwrap_err();
        assert!(err.contains("reg-demons"), "{err}");
    }

    #[test]
    fn tie_gap_counts_padding() {
        let shape = Shape3::new(2, 1, 1).unwrap();
        let v = ChannelVolume::new(1, shape, vec![0.5, 0.2]).unwrap();
        assert_eq!(pool_tie_gap(&v, 1), 0.3);
        let tied = ChannelVolume::new(1, shape, vec![0.5, 0.5]).unwrap();
        assert_eq!(pool_tie_gap(&tied, 1), 0.0);
    }

    #[test]
    fn slab_labels_use_three_lobes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = slab_labels(&mut rng, Shape3::cube(4).unwrap());
        assert_eq!(l.data()[0], 0);
        for c in 1..=3 {
            assert!(l.data().contains(&c));
        }
    }

    #[test]
    fn ace_trials_pass() {
        let s = run_trials(GradOp::Ace, 3, 1).unwrap();
        assert!(s.passed(), "{s}");
        assert_eq!(s.trials, 3);
    }

    #[test]
    fn deterministic_summary() {
        let a = run_trials(GradOp::Fgm, 2, 9).unwrap();
        let b = run_trials(GradOp::Fgm, 2, 9).unwrap();
        assert_eq!(a, b);
    }
}

//! Deterministic differentiable registration operators.
//!
//! An operator maps a (moving, fixed) image pair to a three-channel
//! displacement field in voxel units. Both operators are recorded on the tape
//! so that the field is differentiable with respect to the moving image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::volume::{ChannelVolume, ScalarVolume, Shape3};

/// Stabilizer in the demons force denominator.
pub const DEMONS_EPS: f64 = 1e-6;

/// Hidden width of the seeded convolutional operator.
pub const CONV_HIDDEN: usize = 8;

/// Operator selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegistrationConfig {
    Demons {
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    SeededConv {
        seed: u64,
    },
}

fn default_iterations() -> usize {
    3
}

fn default_sigma() -> f64 {
    1.0
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig::Demons {
            iterations: default_iterations(),
            sigma: default_sigma(),
        }
    }
}

/// Frozen two-layer 3×3×3 convolution stack over the (moving, fixed) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRegistrar {
    w1: ChannelVolume,
    b1: ChannelVolume,
    w2: ChannelVolume,
    b2: ChannelVolume,
}

impl ConvRegistrar {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Shape3::cube(3).expect("3³");
        let mut draw = |count: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..count).map(|_| d.sample(&mut rng)).collect()
        };
        let w1 = draw(CONV_HIDDEN * 2 * 27, 1.0 / (2.0 * 27.0f64).sqrt());
        let b1 = draw(CONV_HIDDEN, 0.1);
        let w2 = draw(
            3 * CONV_HIDDEN * 27,
            1.0 / (CONV_HIDDEN as f64 * 27.0).sqrt(),
        );
        let b2 = draw(3, 0.1);
        Self {
            w1: ChannelVolume::from_raw(CONV_HIDDEN * 2, k, w1),
            b1: ChannelVolume::from_raw(CONV_HIDDEN, Shape3::unit(), b1),
            w2: ChannelVolume::from_raw(3 * CONV_HIDDEN, k, w2),
            b2: ChannelVolume::from_raw(3, Shape3::unit(), b2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegistrationOperator {
    Demons { iterations: usize, sigma: f64 },
    SeededConv(ConvRegistrar),
}

impl RegistrationOperator {
    pub fn from_config(cfg: &RegistrationConfig) -> Result<Self> {
        match *cfg {
            RegistrationConfig::Demons { iterations, sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::param(format!(
                        "demons sigma must be positive, got {sigma}"
                    )));
                }
                Ok(RegistrationOperator::Demons { iterations, sigma })
            }
            RegistrationConfig::SeededConv { seed } => Ok(RegistrationOperator::SeededConv(
                ConvRegistrar::from_seed(seed),
            )),
        }
    }

    pub fn demons() -> Self {
        RegistrationOperator::Demons {
            iterations: default_iterations(),
            sigma: default_sigma(),
        }
    }

    /// Displacement field φ(moving, fixed).
    pub fn register(
        &self,
        tape: &mut Tape,
        moving: NodeId,
        fixed: &ScalarVolume,
    ) -> Result<NodeId> {
        match self {
            RegistrationOperator::Demons { iterations, sigma } => {
                demons_register(tape, moving, fixed, *iterations, *sigma)
            }
            RegistrationOperator::SeededConv(reg) => conv_register(tape, moving, fixed, reg),
        }
    }
}

fn check_pair(tape: &Tape, moving: NodeId, fixed: &ScalarVolume) -> Result<()> {
    let m = tape.value(moving);
    if m.channels() != 1 || m.shape() != fixed.shape() {
        return Err(Error::param(format!(
            "moving image ({}×{:?}) must be single-channel with the fixed shape {:?}",
            m.channels(),
            m.shape().dims(),
            fixed.shape().dims()
        )));
    }
    Ok(())
}

/// Central differences with border indices clamped, halved spacing.
pub fn image_gradient(image: &ScalarVolume) -> ChannelVolume {
    let s = image.shape();
    let n = s.len();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (x, y, z) = s.coords(i);
        let pos = [x, y, z];
        let dims = s.dims();
        for a in 0..3 {
            let mut lo = pos;
            let mut hi = pos;
            lo[a] = pos[a].saturating_sub(1);
            hi[a] = (pos[a] + 1).min(dims[a] - 1);
            out[a * n + i] =
                (image.get(hi[0], hi[1], hi[2]) - image.get(lo[0], lo[1], lo[2])) / 2.0;
        }
    }
    ChannelVolume::from_raw(3, s, out)
}

/// `iterations` rounds of the demons update
/// `u += smooth((m∘u - f) ∇f / (|∇f|² + (m∘u - f)² + ε), σ)`, where `m∘u`
/// resamples the moving image at `x - u(x)`. Starts from the zero field.
pub fn demons_register(
    tape: &mut Tape,
    moving: NodeId,
    fixed: &ScalarVolume,
    iterations: usize,
    sigma: f64,
) -> Result<NodeId> {
    check_pair(tape, moving, fixed)?;
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let shape = fixed.shape();
    let grad = image_gradient(fixed);
    let n = shape.len();
    let denom_base: Vec<f64> = (0..n)
        .map(|i| {
            grad.data()[i].powi(2)
                + grad.data()[n + i].powi(2)
                + grad.data()[2 * n + i].powi(2)
                + DEMONS_EPS
        })
        .collect();
    let f = tape.constant(fixed.clone().into_channels());
    let g = tape.constant(grad);
    let base = tape.constant(ChannelVolume::from_raw(1, shape, denom_base));

    let mut field = tape.constant(ChannelVolume::zeros(3, shape));
    for k in 0..iterations {
        let warped = if k == 0 {
            moving
        } else {
            tape.warp(moving, field)?
        };
        let diff = tape.sub(warped, f)?;
        let diff3 = tape.repeat_channels(diff, 3)?;
        let num = tape.mul(diff3, g)?;
        let sq = tape.mul(diff, diff)?;
        let den = tape.add(base, sq)?;
        let den3 = tape.repeat_channels(den, 3)?;
        let force = tape.div(num, den3)?;
        let step = tape.gaussian_smooth(force, sigma)?;
        field = tape.add(field, step)?;
    }
    Ok(field)
}

/// Field from the frozen seeded convolution stack applied to (moving, fixed).
pub fn conv_register(
    tape: &mut Tape,
    moving: NodeId,
    fixed: &ScalarVolume,
    reg: &ConvRegistrar,
) -> Result<NodeId> {
    check_pair(tape, moving, fixed)?;
    let f = tape.constant(fixed.clone().into_channels());
    let pair = tape.concat_channels(&[moving, f])?;
    let w1 = tape.constant(reg.w1.clone());
    let b1 = tape.constant(reg.b1.clone());
    let w2 = tape.constant(reg.w2.clone());
    let b2 = tape.constant(reg.b2.clone());
    let h = tape.conv3(pair, w1, b1)?;
    let h = tape.tanh(h);
    tape.conv3(h, w2, b2)
}

/// Separable Gaussian smoothing of every channel of `field`.
pub fn gaussian_smooth(tape: &mut Tape, field: NodeId, sigma: f64) -> Result<NodeId> {
    tape.gaussian_smooth(field, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::Rng;

    fn random_image(shape: Shape3, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::new(
            shape,
            (0..shape.len())
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn field_of(
        op: &RegistrationOperator,
        moving: &ScalarVolume,
        fixed: &ScalarVolume,
    ) -> ChannelVolume {
        let mut t = Tape::new();
        let m = t.constant(moving.clone().into_channels());
        let u = op.register(&mut t, m, fixed).unwrap();
        t.value(u).clone()
    }

    #[test]
    fn demons_self_registration_is_zero() {
        let img = random_image(Shape3::new(5, 4, 6).unwrap(), 1);
        let u = field_of(&RegistrationOperator::demons(), &img, &img);
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn demons_constant_fixed_is_zero() {
        let shape = Shape3::cube(4).unwrap();
        let fixed = ScalarVolume::filled(shape, 0.3);
        let moving = random_image(shape, 2);
        let u = field_of(&RegistrationOperator::demons(), &moving, &fixed);
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    /// Plain re-evaluation of the demons recurrence on a single x-line.
    fn line_demons(m: &[f64], f: &[f64], iters: usize, sigma: f64) -> Vec<f64> {
        let n = f.len();
        let grad: Vec<f64> = (0..n)
            .map(|i| (f[(i + 1).min(n - 1)] - f[i.saturating_sub(1)]) / 2.0)
            .collect();
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-r..=r)
            .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sample = |u: &[f64], i: usize| -> f64 {
            let p = i as f64 - u[i];
            let x0 = p.floor();
            let t = p - x0;
            let at = |j: f64| {
                if j >= 0.0 && (j as usize) < n {
                    m[j as usize]
                } else {
                    0.0
                }
            };
            (1.0 - t) * at(x0) + t * at(x0 + 1.0)
        };
        let mut u = vec![0.0; n];
        for it in 0..iters {
            let force: Vec<f64> = (0..n)
                .map(|i| {
                    let mw = if it == 0 { m[i] } else { sample(&u, i) };
                    let d = mw - f[i];
                    d * grad[i] / (grad[i] * grad[i] + d * d + DEMONS_EPS)
                })
                .collect();
            for i in 0..n {
                let (mut acc, mut norm) = (0.0, 0.0);
                for j in -r..=r {
                    let q = i as isize + j;
                    if q >= 0 && (q as usize) < n {
                        acc += k[(j + r) as usize] * force[q as usize];
                        norm += k[(j + r) as usize];
                    }
                }
                u[i] += acc / norm;
            }
        }
        u
    }

    #[test]
    fn demons_shifted_ramp_matches_line_recurrence() {
        let n = 8;
        let shape = Shape3::new(n, 1, 1).unwrap();
        let f: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        // Moving content sits one voxel further along +x.
        let m: Vec<f64> = (0..n)
            .map(|i| (i as f64 - 1.0).max(0.0) / n as f64)
            .collect();
        let fixed = ScalarVolume::new(shape, f.clone()).unwrap();
        let moving = ScalarVolume::new(shape, m.clone()).unwrap();
        let op = RegistrationOperator::Demons {
            iterations: 3,
            sigma: 1.0,
        };
        let u = field_of(&op, &moving, &fixed);
        let expected = line_demons(&m, &f, 3, 1.0);
        for i in 0..n {
            assert!((u.data()[i] - expected[i]).abs() < 1e-12, "voxel {i}");
            assert_eq!(u.data()[n + i], 0.0);
            assert_eq!(u.data()[2 * n + i], 0.0);
        }
        // Interior displacement points back toward the fixed structure.
        assert!(u.data()[n / 2] < 0.0);
    }

    #[test]
    fn demons_force_bound() {
        let shape = Shape3::cube(5).unwrap();
        let moving = random_image(shape, 3);
        let fixed = random_image(shape, 4);
        let op = RegistrationOperator::Demons {
            iterations: 1,
            sigma: 1.0,
        };
        let u = field_of(&op, &moving, &fixed);
        assert!(u.data().iter().all(|v| v.abs() <= 500.0));
        // The smoothed force is a convex combination of values bounded by 1/2.
        assert!(u.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn conv_is_deterministic_and_nonzero_on_identical_pair() {
        let img = random_image(Shape3::cube(4).unwrap(), 5);
        let op =
            RegistrationOperator::from_config(&RegistrationConfig::SeededConv { seed: 9 }).unwrap();
        let a = field_of(&op, &img, &img);
        let b = field_of(&op, &img, &img);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().any(|&v| v != 0.0));
        let other = RegistrationOperator::from_config(&RegistrationConfig::SeededConv { seed: 10 })
            .unwrap();
        assert_ne!(field_of(&other, &img, &img).data(), a.data());
    }

    #[test]
    fn shape_mismatch_and_bad_sigma() {
        let mut t = Tape::new();
        let m = t.constant(ChannelVolume::zeros(1, Shape3::cube(3).unwrap()));
        let f = ScalarVolume::filled(Shape3::cube(4).unwrap(), 0.0);
        assert!(demons_register(&mut t, m, &f, 3, 1.0).is_err());
        let f = ScalarVolume::filled(Shape3::cube(3).unwrap(), 0.0);
        assert!(demons_register(&mut t, m, &f, 3, 0.0).is_err());
        assert!(gaussian_smooth(&mut t, m, -1.0).is_err());
    }

    #[test]
    fn smooth_constant_and_impulse() {
        let shape = Shape3::cube(7).unwrap();
        let mut t = Tape::new();
        let c = t.constant(ChannelVolume::filled(2, shape, 0.75));
        let s = gaussian_smooth(&mut t, c, 1.0).unwrap();
        assert!(t.value(s).data().iter().all(|v| (v - 0.75).abs() < 1e-15));

        // Far enough from the border that no clipped kernel touches the bump.
        let shape = Shape3::cube(13).unwrap();
        let mut imp = ChannelVolume::zeros(1, shape);
        imp.data_mut()[shape.index(6, 6, 6)] = 1.0;
        let i = t.constant(imp);
        let s = gaussian_smooth(&mut t, i, 1.0).unwrap();
        let v = t.value(s);
        let total: f64 = v.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Centre weight of the normalized 7-tap kernel, cubed.
        let k: Vec<f64> = (-3i32..=3).map(|j| (-(j * j) as f64 / 2.0).exp()).collect();
        let w0 = 1.0 / k.iter().sum::<f64>();
        assert!((v.get(0, 6, 6, 6) - w0.powi(3)).abs() < 1e-15);
        assert!((v.get(0, 7, 6, 6) - w0.powi(3) * k[4]).abs() < 1e-15);
    }

    #[test]
    fn smoothing_is_per_channel() {
        let shape = Shape3::cube(4).unwrap();
        let a = random_image(shape, 6);
        let b = random_image(shape, 7);
        let mut t = Tape::new();
        let both = t.constant(ChannelVolume::stack(&[&a, &b]).unwrap());
        let only_b = t.constant(b.into_channels());
        let s_both = gaussian_smooth(&mut t, both, 0.7).unwrap();
        let s_b = gaussian_smooth(&mut t, only_b, 0.7).unwrap();
        assert_eq!(t.value(s_both).channel(1), t.value(s_b).channel(0));
    }

    #[test]
    fn field_l1_gradients() {
        let shape = Shape3::cube(4).unwrap();
        let fixed = random_image(shape, 8);
        let moving = random_image(shape, 9).into_channels();
        for op in [
            RegistrationOperator::demons(),
            RegistrationOperator::from_config(&RegistrationConfig::SeededConv { seed: 3 }).unwrap(),
        ] {
            let err = check_gradient(&moving, 1e-6, |t, m| {
                let u = op.register(t, m, &fixed)?;
                Ok(t.l1_norm(u))
            })
            .unwrap();
            assert!(err < 1e-5, "{op:?}: rel err {err}");
        }
    }

    #[test]
    fn config_json_forms() {
        let d: RegistrationConfig =
            serde_json::from_str(r#"{"kind":"demons","iterations":3,"sigma":1.0}"#).unwrap();
        assert_eq!(d, RegistrationConfig::default());
        let c: RegistrationConfig =
            serde_json::from_str(r#"{"kind":"seeded-conv","seed":4}"#).unwrap();
        assert_eq!(c, RegistrationConfig::SeededConv { seed: 4 });
        assert!(
            serde_json::from_str::<RegistrationConfig>(r#"{"kind":"demons","sigmaa":1}"#).is_err()
        );
    }
}

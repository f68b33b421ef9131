//! Pure-Rust rendering used by the browser bindings.

use lobeseg::autodiff::{NodeId, Tape};
use lobeseg::losses::AlphaSchedule;
use lobeseg::morphology::{fgm_forward, fissure_gt_from_lobes, FissureAdjacency};
use lobeseg::synth::{generate_phantom, PhantomCase, PhantomSpec, NUM_CLASSES};
use lobeseg::volume::{argmax_channel, one_hot, ChannelVolume, Shape3};
use lobeseg::{Error, Result};

/// LU, LL, RU, RM, RL.
const LOBE_COLORS: [[u8; 3]; 5] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [204, 121, 167],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl TryFrom<u8> for Axis {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Axis::X),
            1 => Ok(Axis::Y),
            2 => Ok(Axis::Z),
            _ => Err(Error::Parameter(format!("axis {v} is not 0, 1 or 2"))),
        }
    }
}

/// Image extent and voxel index of each pixel, top row first. The second
/// in-plane axis points up on screen.
pub fn slice_pixels(shape: Shape3, axis: Axis, index: usize) -> Result<(usize, usize, Vec<usize>)> {
    let [nx, ny, nz] = shape.dims();
    let len = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= len {
        return Err(Error::Parameter(format!("slice {index} outside 0..{len}")));
    }
    let (w, h) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut idx = Vec::with_capacity(w * h);
    for row in 0..h {
        let r = h - 1 - row;
        for c in 0..w {
            let (x, y, z) = match axis {
                Axis::X => (index, c, r),
                Axis::Y => (c, index, r),
                Axis::Z => (c, r, index),
            };
            idx.push(shape.index(x, y, z));
        }
    }
    Ok((w, h, idx))
}

pub struct Scene {
    pub case: PhantomCase,
    adj: FissureAdjacency,
}

impl Scene {
    pub fn new(size: usize, seed: u64, incompleteness: f64, noise_sigma: f64) -> Result<Self> {
        let spec = PhantomSpec {
            incompleteness,
            noise_sigma,
            ..PhantomSpec::cube(size, seed)
        };
        Ok(Self {
            case: generate_phantom(&spec)?,
            adj: FissureAdjacency::five_lobe(),
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.case.image.shape()
    }

    /// Gray image as RGBA, with lobes tinted when `overlay` is set.
    pub fn image_rgba(&self, axis: Axis, index: usize, overlay: bool) -> Result<Vec<u8>> {
        let (_, _, idx) = slice_pixels(self.shape(), axis, index)?;
        let mut out = Vec::with_capacity(idx.len() * 4);
        for i in idx {
            let g = (self.case.image.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            let lobe = self.case.lobes.data()[i];
            let rgb = if overlay && lobe > 0 {
                let c = LOBE_COLORS[lobe as usize - 1];
                [0, 1, 2].map(|k| ((g as u16 + c[k] as u16) / 2) as u8)
            } else {
                [g, g, g]
            };
            out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
        Ok(out)
    }

    /// Soft lobe probabilities: softmax of `sharpness` times the one-hot lobe
    /// map, Gaussian-blurred first when `blur > 0`.
    fn lobe_probs(&self, tape: &mut Tape, sharpness: f64, blur: f64) -> Result<NodeId> {
        let mut map = tape.constant(one_hot(&self.case.lobes, NUM_CLASSES)?);
        if blur > 0.0 {
            map = tape.gaussian_smooth(map, blur)?;
        }
        let logits = tape.scalar_mul(map, sharpness);
        tape.softmax_channels(logits)
    }

    /// Fissure probability map of the FGM applied to soft lobe probabilities.
    pub fn fissure_probs(&self, radius: usize, sharpness: f64, blur: f64) -> Result<ChannelVolume> {
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::Parameter(format!(
                "sharpness must be positive, got {sharpness}"
            )));
        }
        if !(blur >= 0.0 && blur.is_finite()) {
            return Err(Error::Parameter(format!(
                "blur must be non-negative, got {blur}"
            )));
        }
        let mut tape = Tape::new();
        let p = self.lobe_probs(&mut tape, sharpness, blur)?;
        let z = fgm_forward(&mut tape, p, &self.adj, radius)?;
        Ok(tape.value(z).clone())
    }

    /// Heat map of `1 - Z_0` in red/yellow, with the morphological fissure
    /// band drawn in cyan where the generated probability is below one half.
    pub fn fissure_rgba(
        &self,
        axis: Axis,
        index: usize,
        radius: usize,
        sharpness: f64,
        blur: f64,
    ) -> Result<Vec<u8>> {
        let z = self.fissure_probs(radius, sharpness, blur)?;
        let gt = fissure_gt_from_lobes(&self.case.lobes, radius, &self.adj)?;
        let (_, _, idx) = slice_pixels(self.shape(), axis, index)?;
        let mut out = Vec::with_capacity(idx.len() * 4);
        for i in idx {
            let p = 1.0 - z.channel(0)[i];
            let rgb = if gt.data()[i] > 0 && p < 0.5 {
                [0, 200, 220]
            } else {
                let v = (p * 255.0).round() as u8;
                [v, (p * p * 255.0).round() as u8, 0]
            };
            out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
        Ok(out)
    }

    /// Fraction of voxels where the FGM argmax equals the morphological
    /// fissure label.
    pub fn fissure_agreement(&self, radius: usize, sharpness: f64, blur: f64) -> Result<f64> {
        let z = self.fissure_probs(radius, sharpness, blur)?;
        let gt = fissure_gt_from_lobes(&self.case.lobes, radius, &self.adj)?;
        let am = argmax_channel(&z);
        let same = am
            .data()
            .iter()
            .zip(gt.data())
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / gt.data().len() as f64)
    }
}

/// Attentive weight `1 - α(step) y` at `samples` evenly spaced `y` in `[0, 1]`.
pub fn ace_weights(
    alpha_max: f64,
    step: usize,
    total_steps: usize,
    samples: usize,
) -> Result<Vec<f64>> {
    let alpha = AlphaSchedule::new(alpha_max, total_steps)?.at(step);
    Ok(unit_grid(samples)?.map(|y| 1.0 - alpha * y).collect())
}

/// Per-voxel attentive term `-(1 - α y) ln y` on the same grid; the `y = 0`
/// end is clamped like the loss's logarithm.
pub fn ace_terms(
    alpha_max: f64,
    step: usize,
    total_steps: usize,
    samples: usize,
) -> Result<Vec<f64>> {
    let alpha = AlphaSchedule::new(alpha_max, total_steps)?.at(step);
    Ok(unit_grid(samples)?
        .map(|y| -(1.0 - alpha * y) * y.max(1e-12).ln())
        .collect())
}

fn unit_grid(samples: usize) -> Result<impl Iterator<Item = f64>> {
    if samples < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    Ok((0..samples).map(move |i| i as f64 / (samples - 1) as f64))
}

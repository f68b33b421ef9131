//! Binary dilation, fissure ground-truth synthesis, and the differentiable
//! fissure generation module (FGM).
//!
//! A fissure between two lobes is the overlap of the two lobe masks after each
//! has been dilated by a cube of edge `2r + 1`. The FGM mirrors this on lobe
//! probability maps: dilation becomes max pooling and intersection becomes a
//! voxel-wise product, so fissure probabilities stay differentiable with
//! respect to the lobe prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume, Shape3};

/// Default structuring element radius (3×3×3 cube).
pub const DEFAULT_RADIUS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FissureEntry {
    pub fissure: u8,
    pub lobe_a: u8,
    pub lobe_b: u8,
}

/// Maps each fissure class to the two lobe classes it separates.
///
/// Serialized as a list of `[fissure, lobe_a, lobe_b]` triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u8; 3]>", into = "Vec<[u8; 3]>")]
pub struct FissureAdjacency {
    entries: Vec<FissureEntry>,
}

impl FissureAdjacency {
    /// Fissure classes must be `1..=n` in order; each pairs two distinct
    /// foreground lobes.
    pub fn new(triples: &[[u8; 3]]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::param("adjacency table is empty"));
        }
        let mut entries = Vec::with_capacity(triples.len());
        for (k, &[fissure, lobe_a, lobe_b]) in triples.iter().enumerate() {
            if fissure as usize != k + 1 {
                return Err(Error::param(format!(
                    "fissure classes must be consecutive from 1; entry {k} has class {fissure}"
                )));
            }
            if lobe_a == 0 || lobe_b == 0 {
                return Err(Error::param(format!(
                    "fissure {fissure} references the background class"
                )));
            }
            if lobe_a == lobe_b {
                return Err(Error::param(format!(
                    "fissure {fissure} pairs lobe {lobe_a} with itself"
                )));
            }
            entries.push(FissureEntry {
                fissure,
                lobe_a,
                lobe_b,
            });
        }
        Ok(Self { entries })
    }

    /// Five-lobe anatomy: LOF (LU/LL), RHF (RU/RM), upper ROF (RU/RL) and
    /// lower ROF (RM/RL).
    pub fn five_lobe() -> Self {
        Self::new(&[[1, 1, 2], [2, 3, 4], [3, 3, 5], [4, 4, 5]]).expect("valid table")
    }

    pub fn entries(&self) -> &[FissureEntry] {
        &self.entries
    }

    /// Number of fissure foreground classes.
    pub fn num_fissures(&self) -> usize {
        self.entries.len()
    }

    /// Largest lobe class referenced.
    pub fn max_lobe(&self) -> u8 {
        self.entries
            .iter()
            .map(|e| e.lobe_a.max(e.lobe_b))
            .max()
            .unwrap_or(0)
    }

    /// Checks that every referenced lobe is below `num_lobe_classes`
    /// (which counts the background).
    pub fn validate_for(&self, num_lobe_classes: usize) -> Result<()> {
        let m = self.max_lobe() as usize;
        if m >= num_lobe_classes {
            return Err(Error::param(format!(
                "adjacency references lobe class {m} but only {} lobe classes exist",
                num_lobe_classes.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

impl Default for FissureAdjacency {
    fn default() -> Self {
        Self::five_lobe()
    }
}

impl TryFrom<Vec<[u8; 3]>> for FissureAdjacency {
    type Error = Error;

    fn try_from(v: Vec<[u8; 3]>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<FissureAdjacency> for Vec<[u8; 3]> {
    fn from(a: FissureAdjacency) -> Self {
        a.entries
            .iter()
            .map(|e| [e.fissure, e.lobe_a, e.lobe_b])
            .collect()
    }
}

fn dilate_axis(src: &[bool], shape: Shape3, axis: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; src.len()];
    let dims = shape.dims();
    let len = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => shape.nx,
        _ => shape.nx * shape.ny,
    };
    for (i, o) in out.iter_mut().enumerate() {
        let (x, y, z) = shape.coords(i);
        let p = [x, y, z][axis];
        let lo = p.saturating_sub(radius);
        let hi = (p + radius).min(len - 1);
        let line_start = i - p * stride;
        *o = (lo..=hi).any(|q| src[line_start + q * stride]);
    }
    out
}

/// Dilation by a cube of edge `2 * radius + 1`, clipped at the borders.
pub fn dilate_binary(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::param("dilation radius must be at least 1"));
    }
    let shape = mask.shape();
    let a = dilate_axis(mask.data(), shape, 0, radius);
    let b = dilate_axis(&a, shape, 1, radius);
    let c = dilate_axis(&b, shape, 2, radius);
    BinaryMask::new(shape, c)
}

/// Fissure label map from a lobe label map.
///
/// Fissure `c` covers the overlap of its two dilated lobe masks. Where several
/// fissures overlap, the lowest fissure class wins.
pub fn fissure_gt_from_lobes(
    lobes: &LabelVolume,
    radius: usize,
    adj: &FissureAdjacency,
) -> Result<LabelVolume> {
    adj.validate_for(lobes.num_classes())?;
    if radius == 0 {
        return Err(Error::param("dilation radius must be at least 1"));
    }
    let shape = lobes.shape();
    let mut dilated: Vec<Option<BinaryMask>> = vec![None; adj.max_lobe() as usize + 1];
    let mut out = vec![0u8; shape.len()];
    for e in adj.entries() {
        for lobe in [e.lobe_a, e.lobe_b] {
            if dilated[lobe as usize].is_none() {
                dilated[lobe as usize] = Some(dilate_binary(&lobes.mask(lobe), radius)?);
            }
        }
        let a = dilated[e.lobe_a as usize].as_ref().expect("dilated");
        let b = dilated[e.lobe_b as usize].as_ref().expect("dilated");
        for (i, o) in out.iter_mut().enumerate() {
            if *o == 0 && a.data()[i] && b.data()[i] {
                *o = e.fissure;
            }
        }
    }
    LabelVolume::new(shape, out, adj.num_fissures() + 1)
}

/// Unnormalized fissure scores: channel `c ≥ 1` is the product of the pooled
/// probabilities of the two adjacent lobes, channel 0 is `Π_c (1 - score_c)`.
pub fn fgm_unnormalized(
    tape: &mut Tape,
    lobe_probs: NodeId,
    adj: &FissureAdjacency,
    radius: usize,
) -> Result<NodeId> {
    let channels = tape.value(lobe_probs).channels();
    if adj.max_lobe() as usize >= channels {
        return Err(Error::param(format!(
            "adjacency references lobe {} but the probability map has {channels} channels",
            adj.max_lobe()
        )));
    }
    let mut pooled: Vec<Option<NodeId>> = vec![None; channels];
    let mut scores = Vec::with_capacity(adj.num_fissures());
    for e in adj.entries() {
        let mut pool = |tape: &mut Tape, lobe: u8| -> Result<NodeId> {
            if let Some(id) = pooled[lobe as usize] {
                return Ok(id);
            }
            let ch = tape.select_channel(lobe_probs, lobe as usize)?;
            let id = tape.maxpool3(ch, radius)?;
            pooled[lobe as usize] = Some(id);
            Ok(id)
        };
        let a = pool(tape, e.lobe_a)?;
        let b = pool(tape, e.lobe_b)?;
        scores.push(tape.mul(a, b)?);
    }
    let fg = tape.concat_channels(&scores)?;
    let complement = tape.one_minus(fg);
    let background = tape.channel_product(complement);
    tape.concat_channels(&[background, fg])
}

/// Fissure probability map with `num_fissures + 1` channels summing to one.
pub fn fgm_forward(
    tape: &mut Tape,
    lobe_probs: NodeId,
    adj: &FissureAdjacency,
    radius: usize,
) -> Result<NodeId> {
    let scores = fgm_unnormalized(tape, lobe_probs, adj, radius)?;
    Ok(tape.normalize_channels(scores))
}

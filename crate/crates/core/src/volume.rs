//! Dense voxel containers.
//!
//! Every volume is linearized x-fastest, then y, then z. Multi-channel volumes
//! store channels contiguously with the channel index varying slowest, so
//! channel `c` occupies `data[c * n .. (c + 1) * n]` where `n = nx * ny * nz`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::param(format!(
                "shape [{nx},{ny},{nz}] has a zero extent"
            )));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::param(format!("shape [{nx},{ny},{nz}] overflows")))?;
        Ok(Self { nx, ny, nz })
    }

    /// Cubic shape `n × n × n`.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    /// A single voxel; used for scalar nodes on the tape.
    pub const fn unit() -> Self {
        Self {
            nx: 1,
            ny: 1,
            nz: 1,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Single-channel real volume, e.g. a CT image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    shape: Shape3,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "scalar volume expects {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn into_channels(self) -> ChannelVolume {
        ChannelVolume {
            channels: 1,
            shape: self.shape,
            data: self.data,
        }
    }
}

/// Multi-channel real volume: probability maps, logits, displacement fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    channels: usize,
    shape: Shape3,
    data: Vec<f64>,
}

impl ChannelVolume {
    pub fn new(channels: usize, shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channel volume needs at least one channel"));
        }
        if data.len() != channels * shape.len() {
            return Err(Error::param(format!(
                "channel volume expects {} values, got {}",
                channels * shape.len(),
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            shape,
            data,
        })
    }

    /// Constructor for values produced internally; finiteness is the caller's concern.
    pub(crate) fn from_raw(channels: usize, shape: Shape3, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * shape.len());
        Self {
            channels,
            shape,
            data,
        }
    }

    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self::from_raw(channels, shape, vec![0.0; channels * shape.len()])
    }

    pub fn filled(channels: usize, shape: Shape3, value: f64) -> Self {
        Self::from_raw(channels, shape, vec![value; channels * shape.len()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, Shape3::unit(), vec![value])
    }

    /// Stacks single-channel volumes of equal shape.
    pub fn stack(parts: &[&ScalarVolume]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("cannot stack zero volumes"))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(parts.len() * shape.len());
        for p in parts {
            if p.shape() != shape {
                return Err(Error::param("stacked volumes differ in shape"));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_raw(parts.len(), shape, data))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.shape.len() + self.shape.index(x, y, z)]
    }

    pub fn channel_volume(&self, c: usize) -> ScalarVolume {
        ScalarVolume {
            shape: self.shape,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn same_layout(&self, other: &ChannelVolume) -> bool {
        self.channels == other.channels && self.shape == other.shape
    }
}

/// Integer class map with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(shape: Shape3, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "label volume expects {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::param(format!(
                "num_classes {num_classes} not in 1..=256"
            )));
        }
        if let Some(i) = data.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Range(format!(
                "label {} at index {i} >= num_classes {num_classes}",
                data[i]
            )));
        }
        Ok(Self {
            shape,
            data,
            num_classes,
        })
    }

    /// Builds a label volume whose class count is one past the largest label.
    pub fn inferred(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        let n = data.iter().copied().max().map_or(1, |m| m as usize + 1);
        Self::new(shape, data, n)
    }

    pub fn zeros(shape: Shape3, num_classes: usize) -> Result<Self> {
        Self::new(shape, vec![0; shape.len()], num_classes)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.shape.index(x, y, z)]
    }

    /// Reinterprets with a different class count, validating every label.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.shape, self.data, num_classes)
    }

    pub fn mask(&self, class: u8) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.data.iter().map(|&l| l == class).collect(),
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.data.iter().map(|&l| l != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Shape3,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Shape3, data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "mask expects {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![false; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_none(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

/// Indicator encoding: channel `k` is 1.0 where the label equals `k`.
pub fn one_hot(labels: &LabelVolume, num_classes: usize) -> Result<ChannelVolume> {
    if num_classes == 0 {
        return Err(Error::param("one_hot needs at least one class"));
    }
    let n = labels.shape().len();
    let mut data = vec![0.0; num_classes * n];
    for (i, &l) in labels.data().iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Range(format!(
                "label {l} at index {i} >= num_classes {num_classes}"
            )));
        }
        data[l * n + i] = 1.0;
    }
    Ok(ChannelVolume::from_raw(num_classes, labels.shape(), data))
}

/// Per-voxel argmax over channels; ties resolve to the lowest channel index.
pub fn argmax_channel(probs: &ChannelVolume) -> LabelVolume {
    let n = probs.shape().len();
    let c = probs.channels();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = probs.data()[i];
            for k in 1..c {
                let v = probs.data()[k * n + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume {
        shape: probs.shape(),
        data,
        num_classes: c.min(256),
    }
}

/// Default CT intensity window in Hounsfield units.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// Maps intensities linearly from `[lo, hi]` onto `[0, 1]`, clamping outside.
pub fn hu_window_normalize(image: &ScalarVolume, lo: f64, hi: f64) -> Result<ScalarVolume> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::param(format!("HU window [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    let data = image
        .data()
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    Ok(ScalarVolume {
        shape: image.shape(),
        data,
    })
}

//! Binary 8-bit PGM (P5) slice images.

use lobeseg::volume::{LabelVolume, Shape3};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Linear indices of the voxels of slice `index` along `axis`, row-major
/// with the lower remaining axis varying fastest.
fn slice_indices(shape: Shape3, axis: usize, index: usize) -> (usize, usize, Vec<usize>) {
    let [nx, ny, nz] = shape.dims();
    let (w, h) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let mut idx = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let (x, y, z) = match axis {
                0 => (index, c, r),
                1 => (c, index, r),
                _ => (c, r, index),
            };
            idx.push(shape.index(x, y, z));
        }
    }
    (w, h, idx)
}

/// Class `k` of `n` maps to gray level `255 k / (n - 1)`.
pub fn label_slice(labels: &LabelVolume, axis: usize, index: usize) -> Gray {
    let (width, height, idx) = slice_indices(labels.shape(), axis, index);
    let top = labels.num_classes().saturating_sub(1).max(1);
    let pixels = idx
        .iter()
        .map(|&i| (labels.data()[i] as usize * 255 / top) as u8)
        .collect();
    Gray {
        width,
        height,
        pixels,
    }
}

/// Min-max scaled over the slice; a constant slice maps to black.
pub fn scalar_slice(data: &[f64], shape: Shape3, axis: usize, index: usize) -> Gray {
    let (width, height, idx) = slice_indices(shape, axis, index);
    let vals: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = vals
        .iter()
        .map(|v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Gray {
        width,
        height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let g = Gray {
            width: 2,
            height: 1,
            pixels: vec![0, 255],
        };
        assert_eq!(g.encode(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn z_slice_orientation() {
        let shape = Shape3::new(3, 2, 2).unwrap();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let g = scalar_slice(&data, shape, 2, 1);
        assert_eq!((g.width, g.height), (3, 2));
        assert_eq!(g.pixels, vec![0, 51, 102, 153, 204, 255]);
    }

    #[test]
    fn x_slice_uses_y_then_z() {
        let shape = Shape3::new(2, 3, 2).unwrap();
        let (w, h, idx) = slice_indices(shape, 0, 1);
        assert_eq!((w, h), (3, 2));
        assert_eq!(idx, vec![1, 3, 5, 7, 9, 11]);
    }

    #[test]
    fn labels_get_distinct_levels() {
        let shape = Shape3::new(6, 1, 1).unwrap();
        let l = LabelVolume::new(shape, vec![0, 1, 2, 3, 4, 5], 6).unwrap();
        let g = label_slice(&l, 2, 0);
        assert_eq!(g.pixels, vec![0, 51, 102, 153, 204, 255]);
    }
}

//! Forward and adjoint kernels for the structural tape operations.
//!
//! All kernels work on channel-major, x-fastest buffers.

use crate::volume::Shape3;

/// Sentinel stored in a max-pool argmax table when the winner was zero padding.
pub(crate) const PADDED: usize = usize::MAX;

/// Cubic-window max pooling with zero padding. Returns the pooled values and,
/// per output entry, the flat input index of the first maximum in window scan
/// order (z outermost, x innermost), or [`PADDED`].
///
/// Runs as three one-dimensional passes (x, then y, then z). Each pass keeps
/// the first strict maximum along its axis, which selects the same winner as
/// a lexicographic `(dz, dy, dx)` scan of the full cube.
pub(crate) fn maxpool_forward(
    data: &[f64],
    channels: usize,
    shape: Shape3,
    radius: usize,
) -> (Vec<f64>, Vec<usize>) {
    let n = shape.len();
    let mut val = data.to_vec();
    let mut arg: Vec<usize> = (0..channels * n).collect();
    for axis in 0..3 {
        let (v, a) = maxpool_axis(&val, &arg, channels, shape, axis, radius);
        val = v;
        arg = a;
    }
    (val, arg)
}

/// Starting offsets of every line along `axis` within one channel.
fn line_starts(shape: Shape3, axis: usize) -> impl Iterator<Item = usize> {
    let dims = shape.dims();
    let strides = [1, shape.nx, shape.nx * shape.ny];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (0..dims[o2]).flat_map(move |b| (0..dims[o1]).map(move |a| a * strides[o1] + b * strides[o2]))
}

fn axis_stride(shape: Shape3, axis: usize) -> usize {
    [1, shape.nx, shape.nx * shape.ny][axis]
}

fn maxpool_axis(
    val: &[f64],
    arg: &[usize],
    channels: usize,
    shape: Shape3,
    axis: usize,
    radius: usize,
) -> (Vec<f64>, Vec<usize>) {
    let n = shape.len();
    let len = shape.dims()[axis];
    let stride = axis_stride(shape, axis);
    let width = 2 * radius + 1;
    let mut out = vec![0.0; channels * n];
    let mut out_arg = vec![PADDED; channels * n];
    // Line copies with `radius` padding entries on each side, so window `p`
    // is `lv[p..p + width]` in scan order.
    let mut lv = vec![0.0; len + 2 * radius];
    let mut la = vec![PADDED; len + 2 * radius];
    for c in 0..channels {
        for start in line_starts(shape, axis) {
            let line = c * n + start;
            for p in 0..len {
                lv[radius + p] = val[line + p * stride];
                la[radius + p] = arg[line + p * stride];
            }
            for p in 0..len {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = PADDED;
                for (&v, &a) in lv[p..p + width].iter().zip(&la[p..p + width]) {
                    if v > best {
                        best = v;
                        best_at = a;
                    }
                }
                let o = line + p * stride;
                out[o] = best;
                out_arg[o] = best_at;
            }
        }
    }
    (out, out_arg)
}

/// Same-size 3×3×3 convolution with zero padding.
///
/// `weight` holds `c_out * c_in` kernels of 27 taps each, kernel `(o, i)` at
/// offset `(o * c_in + i) * 27`, taps linearized x-fastest.
pub(crate) fn conv3_forward(
    input: &[f64],
    c_in: usize,
    shape: Shape3,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let n = shape.len();
    let mut out = vec![0.0; c_out * n];
    for o in 0..c_out {
        out[o * n..(o + 1) * n].fill(bias[o]);
    }
    for o in 0..c_out {
        for i in 0..c_in {
            let k = &weight[(o * c_in + i) * 27..(o * c_in + i + 1) * 27];
            let src = &input[i * n..(i + 1) * n];
            let dst_base = o * n;
            for_each_tap(shape, |tap, d, s| {
                out[dst_base + d] += k[tap] * src[s];
            });
        }
    }
    out
}

/// Adjoints of [`conv3_forward`] with respect to input, weight and bias.
pub(crate) fn conv3_backward(
    input: &[f64],
    c_in: usize,
    shape: Shape3,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = shape.len();
    let mut gi = vec![0.0; c_in * n];
    let mut gw = vec![0.0; c_out * c_in * 27];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let g = &grad_out[o * n..(o + 1) * n];
        gb[o] = g.iter().sum();
        for i in 0..c_in {
            let kbase = (o * c_in + i) * 27;
            let src = &input[i * n..(i + 1) * n];
            let gi_base = i * n;
            for_each_tap(shape, |tap, d, s| {
                gi[gi_base + s] += weight[kbase + tap] * g[d];
                gw[kbase + tap] += src[s] * g[d];
            });
        }
    }
    (gi, gw, gb)
}

/// Visits every (tap, destination voxel, source voxel) triple of a 3×3×3
/// stencil whose source lies inside the volume.
#[inline]
fn for_each_tap(shape: Shape3, mut f: impl FnMut(usize, usize, usize)) {
    let (nx, ny, nz) = (shape.nx as isize, shape.ny as isize, shape.nz as isize);
    for kz in 0..3isize {
        let dz = kz - 1;
        let z_lo = (-dz).max(0);
        let z_hi = (nz - dz).min(nz);
        for ky in 0..3isize {
            let dy = ky - 1;
            let y_lo = (-dy).max(0);
            let y_hi = (ny - dy).min(ny);
            for kx in 0..3isize {
                let dx = kx - 1;
                let x_lo = (-dx).max(0);
                let x_hi = (nx - dx).min(nx);
                let tap = (kx + 3 * (ky + 3 * kz)) as usize;
                for z in z_lo..z_hi {
                    for y in y_lo..y_hi {
                        let row_d = nx * (y + ny * z);
                        let row_s = nx * (y + dy + ny * (z + dz));
                        for x in x_lo..x_hi {
                            f(tap, (row_d + x) as usize, (row_s + x + dx) as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Sampled Gaussian truncated at `ceil(3σ)`, unnormalized (border
/// renormalization happens per output voxel).
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// One separable smoothing pass along `axis` (0 = x, 1 = y, 2 = z). The clipped
/// kernel is renormalized at the borders. With `transpose` the adjoint of the
/// pass is applied instead.
pub(crate) fn smooth_axis(
    data: &[f64],
    channels: usize,
    shape: Shape3,
    axis: usize,
    kernel: &[f64],
    transpose: bool,
) -> Vec<f64> {
    let n = shape.len();
    let len = shape.dims()[axis];
    let inner = axis_stride(shape, axis);
    let block = inner * len;
    let r = kernel.len() / 2;

    // Border-renormalized weights: output `p` takes taps `lo(p)..=hi(p)`,
    // weight of tap `q` at `p * width + (q + r - p)`.
    let width = kernel.len();
    let span = |p: usize| (p.saturating_sub(r), (p + r).min(len - 1));
    let mut weights = vec![0.0; len * width];
    for p in 0..len {
        let (lo, hi) = span(p);
        let norm: f64 = (lo..=hi).map(|q| kernel[q + r - p]).sum();
        for q in lo..=hi {
            weights[p * width + q + r - p] = kernel[q + r - p] / norm;
        }
    }

    let mut out = vec![0.0; channels * n];
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        if inner == 1 {
            // Contiguous line along x.
            for p in 0..len {
                let (lo, hi) = span(p);
                let w = &weights[p * width + lo + r - p..p * width + hi + r - p + 1];
                if transpose {
                    let g = src[p];
                    for (d, &w) in dst[lo..hi + 1].iter_mut().zip(w) {
                        *d += w * g;
                    }
                } else {
                    let mut acc = 0.0;
                    for (&v, &w) in src[lo..hi + 1].iter().zip(w) {
                        acc += w * v;
                    }
                    dst[p] = acc;
                }
            }
            continue;
        }
        // Rows of length `inner` are contiguous; combine whole rows.
        for p in 0..len {
            let (lo, hi) = span(p);
            for q in lo..=hi {
                let w = weights[p * width + q + r - p];
                let (from, to) = if transpose { (p, q) } else { (q, p) };
                let s_row = &src[from * inner..(from + 1) * inner];
                let d_row = &mut dst[to * inner..(to + 1) * inner];
                for (d, &v) in d_row.iter_mut().zip(s_row) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

pub(crate) fn smooth(data: &[f64], channels: usize, shape: Shape3, kernel: &[f64]) -> Vec<f64> {
    let a = smooth_axis(data, channels, shape, 0, kernel, false);
    let b = smooth_axis(&a, channels, shape, 1, kernel, false);
    smooth_axis(&b, channels, shape, 2, kernel, false)
}

pub(crate) fn smooth_adjoint(
    grad: &[f64],
    channels: usize,
    shape: Shape3,
    kernel: &[f64],
) -> Vec<f64> {
    let a = smooth_axis(grad, channels, shape, 2, kernel, true);
    let b = smooth_axis(&a, channels, shape, 1, kernel, true);
    smooth_axis(&b, channels, shape, 0, kernel, true)
}

/// Trilinear corner weights and indices for sampling at `(px, py, pz)`;
/// out-of-volume corners are reported as `None`.
#[inline]
fn trilinear_corners(shape: Shape3, p: [f64; 3]) -> ([Option<usize>; 8], [f64; 3]) {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let dims = shape.dims();
    let mut idx = [None; 8];
    for (corner, slot) in idx.iter_mut().enumerate() {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut ok = true;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = base[a] as i64 + off[a] as i64;
            if v < 0 || v >= dims[a] as i64 {
                ok = false;
                break;
            }
            c[a] = v as usize;
        }
        if ok {
            *slot = Some(shape.index(c[0], c[1], c[2]));
        }
    }
    (idx, frac)
}

#[inline]
fn corner_weight(corner: usize, frac: [f64; 3]) -> f64 {
    let mut w = 1.0;
    for (a, &f) in frac.iter().enumerate() {
        w *= if (corner >> a) & 1 == 1 { f } else { 1.0 - f };
    }
    w
}

/// Resamples a single-channel `image` at `v - u(v)` with trilinear
/// interpolation and zero extension outside the volume.
pub(crate) fn warp_forward(image: &[f64], field: &[f64], shape: Shape3) -> Vec<f64> {
    let n = shape.len();
    (0..n)
        .map(|v| {
            let (x, y, z) = shape.coords(v);
            let p = [
                x as f64 - field[v],
                y as f64 - field[n + v],
                z as f64 - field[2 * n + v],
            ];
            let (idx, frac) = trilinear_corners(shape, p);
            idx.iter()
                .enumerate()
                .filter_map(|(c, i)| i.map(|i| corner_weight(c, frac) * image[i]))
                .sum()
        })
        .collect()
}

/// Adjoints of [`warp_forward`] with respect to the image and the field.
pub(crate) fn warp_backward(
    image: &[f64],
    field: &[f64],
    shape: Shape3,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = shape.len();
    let mut gi = vec![0.0; n];
    let mut gf = vec![0.0; 3 * n];
    for v in 0..n {
        let g = grad_out[v];
        if g == 0.0 {
            continue;
        }
        let (x, y, z) = shape.coords(v);
        let p = [
            x as f64 - field[v],
            y as f64 - field[n + v],
            z as f64 - field[2 * n + v],
        ];
        let (idx, frac) = trilinear_corners(shape, p);
        let mut dp = [0.0; 3];
        for (c, i) in idx.iter().enumerate() {
            let Some(i) = *i else { continue };
            gi[i] += corner_weight(c, frac) * g;
            for a in 0..3 {
                let mut w = if (c >> a) & 1 == 1 { 1.0 } else { -1.0 };
                for b in 0..3 {
                    if b != a {
                        w *= if (c >> b) & 1 == 1 {
                            frac[b]
                        } else {
                            1.0 - frac[b]
                        };
                    }
                }
                dp[a] += w * image[i];
            }
        }
        // Sample position is v - u, so d/du = -d/dp.
        for a in 0..3 {
            gf[a * n + v] -= dp[a] * g;
        }
    }
    (gi, gf)
}

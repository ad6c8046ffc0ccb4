//! Shared convolution machinery: geometry, im2col patch gathering, tiled
//! drivers, and the inner dot products for both precisions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::graph::ConvAttrs;

/// Spatial layout of one Conv3D for a fixed input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    /// Geometry for `attrs` applied to an input of extent `input`. The caller
    /// guarantees the attributes passed shape inference.
    pub fn new(attrs: &ConvAttrs, input: [usize; 3]) -> Self {
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = (input[ax] + 2 * attrs.padding[ax] - attrs.kernel[ax]) / attrs.stride[ax] + 1;
        }
        Self {
            in_channels: attrs.in_channels,
            out_channels: attrs.out_channels,
            kernel: attrs.kernel,
            stride: attrs.stride,
            padding: attrs.padding,
            input,
            output,
        }
    }

    pub fn attrs(&self) -> ConvAttrs {
        ConvAttrs {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }

    /// Reduction length `in_channels * kd * kh * kw`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    /// Whether the stated output extent is consistent with the other fields.
    pub fn is_consistent(&self) -> bool {
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return false;
        }
        let sizes = [self.out_channels, self.in_channels]
            .into_iter()
            .chain(self.kernel)
            .try_fold(4usize, |a, d| a.checked_mul(d));
        let extents = self
            .input
            .into_iter()
            .chain(self.output)
            .try_fold(1usize, |a, d| a.checked_mul(d));
        if sizes.is_none() || extents.is_none() {
            return false;
        }
        (0..3).all(|ax| {
            let padded = self.input[ax] + 2 * self.padding[ax];
            padded >= self.kernel[ax] && self.output[ax] == (padded - self.kernel[ax]) / self.stride[ax] + 1
        })
    }

    /// im2col for one output position: writes `fan_in` entries of `x` (one
    /// batch item) into `dst` in `(ci, kd, kh, kw)` order, mapping each
    /// element through `map` and using `pad` outside the input.
    #[inline]
    pub fn gather<T: Copy, U: Copy>(&self, x: &[T], pos: usize, pad: U, map: impl Fn(T) -> U, dst: &mut [U]) {
        let [_, oh_n, ow_n] = self.output;
        let ow = pos % ow_n;
        let oh = (pos / ow_n) % oh_n;
        let od = pos / (ow_n * oh_n);
        let [d_n, h_n, w_n] = self.input;
        let [kd_n, kh_n, kw_n] = self.kernel;
        let d0 = (od * self.stride[0]) as isize - self.padding[0] as isize;
        let h0 = (oh * self.stride[1]) as isize - self.padding[1] as isize;
        let w0 = (ow * self.stride[2]) as isize - self.padding[2] as isize;
        let plane = h_n * w_n;
        let chan = d_n * plane;
        let mut k = 0;
        for ci in 0..self.in_channels {
            let xc = &x[ci * chan..(ci + 1) * chan];
            for kd in 0..kd_n {
                let id = d0 + kd as isize;
                if id < 0 || id >= d_n as isize {
                    dst[k..k + kh_n * kw_n].fill(pad);
                    k += kh_n * kw_n;
                    continue;
                }
                let xd = &xc[id as usize * plane..(id as usize + 1) * plane];
                for kh in 0..kh_n {
                    let ih = h0 + kh as isize;
                    if ih < 0 || ih >= h_n as isize {
                        dst[k..k + kw_n].fill(pad);
                        k += kw_n;
                        continue;
                    }
                    let row = &xd[ih as usize * w_n..(ih as usize + 1) * w_n];
                    for kw in 0..kw_n {
                        let iw = w0 + kw as isize;
                        dst[k] = if iw < 0 || iw >= w_n as isize {
                            pad
                        } else {
                            map(row[iw as usize])
                        };
                        k += 1;
                    }
                }
            }
        }
    }

    /// Positions per im2col tile, sized so a tile of patches stays cache resident.
    pub(crate) fn tile_positions(&self) -> usize {
        (8192 / self.fan_in().max(1)).clamp(4, 64)
    }
}

/// Thread configuration for kernels. Results never depend on it.
#[derive(Clone, Default)]
pub struct Parallelism {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parallelism({})", self.threads())
    }
}

impl Parallelism {
    pub fn sequential() -> Self {
        Self { pool: None }
    }

    /// `threads <= 1` runs everything on the calling thread.
    pub fn with_threads(threads: usize) -> Self {
        if threads <= 1 {
            return Self::sequential();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        Self {
            pool: Some(Arc::new(pool)),
        }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Call `f(chunk_index, chunk, scratch)` for every `chunk_len` slice of `out`.
    pub(crate) fn for_each_chunk<T, S, F>(
        &self,
        out: &mut [T],
        chunk_len: usize,
        scratch: impl Fn() -> S + Sync + Send,
        f: F,
    ) where
        T: Send,
        F: Fn(usize, &mut [T], &mut S) + Sync + Send,
    {
        match &self.pool {
            None => {
                let mut s = scratch();
                for (i, c) in out.chunks_mut(chunk_len).enumerate() {
                    f(i, c, &mut s);
                }
            }
            Some(pool) => pool.install(|| {
                out.par_chunks_mut(chunk_len)
                    .enumerate()
                    .for_each_init(&scratch, |s, (i, c)| f(i, c, s));
            }),
        }
    }
}

/// Canonical FP32 reduction: four f64 lanes over `k ≡ lane (mod 4)` for the
/// first `4⌊K/4⌋` terms, combined as `(l0 + l1) + (l2 + l3)`, then the tail
/// added in order. Fixed for every caller so results never depend on tiling
/// or threading.
#[inline]
pub fn dot_f32_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            lanes[j] += x[j] as f64 * y[j] as f64;
        }
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ta.iter().zip(tb) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// Integer dot product over zero-point-corrected differences. Wrapping adds
/// never wrap in practice: plans are rejected at build time when
/// `fan_in * 255^2` exceeds `i32::MAX`.
#[inline]
pub fn dot_i16_i32(a: &[i16], b: &[i16]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32))
}

/// Largest fan-in whose worst-case accumulator `fan_in * 255^2` fits in i32.
pub const MAX_INT8_FAN_IN: usize = (i32::MAX as usize) / (255 * 255);

/// FP32 Conv3D over a batch: `out = W · im2col(x) + b`, accumulated in f64
/// with [`dot_f32_f64`] and rounded once to f32.
pub fn conv3d_f32(
    geom: &ConvGeometry,
    batch: usize,
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    par: &Parallelism,
) -> Vec<f32> {
    let k = geom.fan_in();
    let cout = geom.out_channels;
    let positions = geom.out_positions();
    let tile = geom.tile_positions();
    let in_len = geom.in_channels * geom.in_positions();
    let mut out = vec![0.0f32; batch * cout * positions];
    let mut pm = vec![0.0f32; positions * cout];
    for n in 0..batch {
        let xb = &x[n * in_len..(n + 1) * in_len];
        par.for_each_chunk(
            &mut pm,
            tile * cout,
            || vec![0.0f32; tile * k],
            |ti, chunk, patches| {
                let p0 = ti * tile;
                let count = chunk.len() / cout;
                for j in 0..count {
                    geom.gather(xb, p0 + j, 0.0f32, |v| v, &mut patches[j * k..(j + 1) * k]);
                }
                for co in 0..cout {
                    let wrow = &weight[co * k..(co + 1) * k];
                    let b = bias.map_or(0.0, |b| b[co] as f64);
                    for j in 0..count {
                        let acc = dot_f32_f64(wrow, &patches[j * k..(j + 1) * k]);
                        chunk[j * cout + co] = (acc + b) as f32;
                    }
                }
            },
        );
        let ob = &mut out[n * cout * positions..(n + 1) * cout * positions];
        transpose_into(&pm, positions, cout, ob);
    }
    out
}

/// `dst[c * rows + r] = src[r * cols + c]`.
pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        let s = &src[r * cols..(r + 1) * cols];
        for (c, &v) in s.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(input: usize, kernel: usize, stride: usize, pad: usize, cin: usize, cout: usize) -> ConvGeometry {
        ConvGeometry::new(
            &ConvAttrs {
                kernel: [kernel; 3],
                stride: [stride; 3],
                padding: [pad; 3],
                in_channels: cin,
                out_channels: cout,
            },
            [input; 3],
        )
    }

    #[test]
    fn counting_kernel_interior() {
        let g = geom(5, 3, 1, 1, 1, 1);
        let x = vec![1.0f32; 125];
        let w = vec![1.0f32; 27];
        let y = conv3d_f32(&g, 1, &x, &w, None, &Parallelism::sequential());
        // interior voxel (2,2,2)
        assert_eq!(y[2 * 25 + 2 * 5 + 2], 27.0);
        // corner sees 2x2x2 in-bounds taps
        assert_eq!(y[0], 8.0);
    }

    #[test]
    fn pointwise_conv_with_bias() {
        let g = geom(1, 1, 1, 0, 1, 1);
        let y = conv3d_f32(&g, 1, &[3.0], &[2.0], Some(&[1.0]), &Parallelism::sequential());
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn threads_do_not_change_results() {
        let g = geom(7, 3, 2, 1, 3, 5);
        let x: Vec<f32> = (0..3 * 343).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
        let w: Vec<f32> = (0..g.weight_len())
            .map(|i| ((i * 13) % 17) as f32 / 8.0 - 1.0)
            .collect();
        let a = conv3d_f32(&g, 1, &x, &w, None, &Parallelism::sequential());
        let b = conv3d_f32(&g, 1, &x, &w, None, &Parallelism::with_threads(3));
        assert_eq!(a, b);
    }

    #[test]
    fn fan_in_bound() {
        assert_eq!(MAX_INT8_FAN_IN, 33025);
    }
}

//! Reference implementations of the non-convolution operators. The pooling,
//! upsampling and concat kernels are generic so the integer engine runs the
//! same code on U8 codes.

/// `(outer, len, inner)` strides for reducing or splitting along `axis`.
fn axis_split(shape: &[usize; 5], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn pool_output(shape: [usize; 5], kernel: [usize; 3], stride: [usize; 3]) -> [usize; 5] {
    let mut out = shape;
    for ax in 0..3 {
        out[ax + 2] = (shape[ax + 2] - kernel[ax]) / stride[ax] + 1;
    }
    out
}

/// Max over each (unpadded) window.
pub fn maxpool3d<T: Copy + PartialOrd>(x: &[T], shape: [usize; 5], kernel: [usize; 3], stride: [usize; 3]) -> Vec<T> {
    let out_shape = pool_output(shape, kernel, stride);
    let [_, _, d, h, w] = shape;
    let [_, _, od, oh, ow] = out_shape;
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for p in 0..planes {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let (d0, h0, w0) = (zd * stride[0], zh * stride[1], zw * stride[2]);
                    let mut m = xp[(d0 * h + h0) * w + w0];
                    for kd in 0..kernel[0] {
                        for kh in 0..kernel[1] {
                            let row = ((d0 + kd) * h + h0 + kh) * w + w0;
                            for &v in &xp[row..row + kernel[2]] {
                                if v > m {
                                    m = v;
                                }
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling: `out[z] = x[z / scale]` per axis.
pub fn upsample3d<T: Copy>(x: &[T], shape: [usize; 5], scale: [usize; 3]) -> Vec<T> {
    let [_, _, d, h, w] = shape;
    let (od, oh, ow) = (d * scale[0], h * scale[1], w * scale[2]);
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for p in 0..planes {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        for zd in 0..od {
            for zh in 0..oh {
                let row = &xp[((zd / scale[0]) * h + zh / scale[1]) * w..][..w];
                for zw in 0..ow {
                    out.push(row[zw / scale[2]]);
                }
            }
        }
    }
    out
}

/// Concatenate along `axis`.
pub fn concat<T: Copy>(parts: &[(&[T], [usize; 5])], axis: usize) -> Vec<T> {
    let outer: usize = parts[0].1[..axis].iter().product();
    let total: usize = parts.iter().map(|(x, _)| x.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (x, shape) in parts {
            let block: usize = shape[axis..].iter().product();
            out.extend_from_slice(&x[o * block..(o + 1) * block]);
        }
    }
    out
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Numerically stable softmax along `axis`, evaluated in f64.
pub fn softmax(x: &[f32], shape: [usize; 5], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(&shape, axis);
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * len + c) * inner + i;
            let m = (0..len).map(|c| x[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = (x[at(c)] as f64 - m).exp();
                sum += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                out[at(c)] = (b / sum) as f32;
            }
        }
    }
    out
}

/// Index of the first maximum along `axis`, as f32, with that axis collapsed.
pub fn argmax<T: Copy + PartialOrd>(x: &[T], shape: [usize; 5], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut best_v = x[o * len * inner + i];
            for c in 1..len {
                let v = x[(o * len + c) * inner + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as f32);
        }
    }
    out
}

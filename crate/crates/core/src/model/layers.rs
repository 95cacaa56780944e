//! Channel-major tensors and the layer primitives of the network, each with
//! its backward pass.

/// `channels` stacked grids of extent `ext`, channel-major, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub channels: usize,
    pub ext: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, ext: [usize; 3]) -> Self {
        Self {
            channels,
            ext,
            data: vec![0.0; channels * ext[0] * ext[1] * ext[2]],
        }
    }

    pub fn voxels(&self) -> usize {
        self.ext[0] * self.ext[1] * self.ext[2]
    }
}

/// Position of a convolution's weights inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
}

impl Conv {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.taps()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }

    /// Input in the layout the matrix product consumes: the patch matrix for
    /// spatial kernels, the tensor itself for pointwise ones.
    pub fn lower(&self, input: Tensor) -> Lowered {
        let data = if self.is_pointwise() {
            input.data
        } else {
            im2col(&input, self.kernel)
        };
        Lowered { ext: input.ext, data }
    }

    /// Same-padded convolution, stride 1.
    pub fn forward(&self, params: &[f64], input: &Tensor) -> Tensor {
        self.forward_lowered(params, &self.lower(input.clone()))
    }

    pub fn forward_lowered(&self, params: &[f64], input: &Lowered) -> Tensor {
        let n: usize = input.ext.iter().product();
        let k = self.fan_in();
        let mut out = Tensor::zeros(self.cout, input.ext);
        let w = &params[self.weight..self.weight + self.weight_len()];
        gemm(
            self.cout, k, n, w, (k, 1), &input.data, (n, 1), 0.0, &mut out.data, (n, 1),
        );
        for (c, row) in out.data.chunks_mut(n).enumerate() {
            let b = params[self.bias + c];
            if b != 0.0 {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &[f64],
        input: &Tensor,
        grad_out: &Tensor,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        self.backward_lowered(params, &self.lower(input.clone()), grad_out, grads, want_input)
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// gradient with respect to the input when `want_input` is set.
    pub fn backward_lowered(
        &self,
        params: &[f64],
        input: &Lowered,
        grad_out: &Tensor,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        let n: usize = input.ext.iter().product();
        let k = self.fan_in();
        let wlen = self.weight_len();
        gemm(
            self.cout,
            n,
            k,
            &grad_out.data,
            (n, 1),
            &input.data,
            (1, n),
            1.0,
            &mut grads[self.weight..self.weight + wlen],
            (k, 1),
        );
        for (c, row) in grad_out.data.chunks(n).enumerate() {
            grads[self.bias + c] += row.iter().sum::<f64>();
        }
        if !want_input {
            return None;
        }
        let w = &params[self.weight..self.weight + wlen];
        let mut dcols = vec![0.0; k * n];
        gemm(
            k,
            self.cout,
            n,
            w,
            (1, k),
            &grad_out.data,
            (n, 1),
            0.0,
            &mut dcols,
            (n, 1),
        );
        if self.is_pointwise() {
            Some(Tensor {
                channels: self.cin,
                ext: input.ext,
                data: dcols,
            })
        } else {
            Some(col2im(&dcols, self.cin, input.ext, self.kernel))
        }
    }
}

/// A convolution input after [`Conv::lower`].
pub(crate) struct Lowered {
    pub ext: [usize; 3],
    pub data: Vec<f64>,
}

/// c = a * b + beta * c with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strided access can reach
    // for the dense row/column-major layouts used by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Valid output range along one axis for kernel offset `off` (centred kernel).
#[inline]
fn valid_range(len: usize, ksize: usize, off: usize) -> (usize, usize, isize) {
    let shift = off as isize - (ksize / 2) as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((len as isize - shift).min(len as isize)).max(0) as usize;
    (lo, hi.max(lo), shift)
}

fn im2col(input: &Tensor, kernel: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = input.ext;
    let n = h * w * d;
    let taps = kernel[0] * kernel[1] * kernel[2];
    let mut cols = vec![0.0; input.channels * taps * n];
    let mut row = 0;
    for c in 0..input.channels {
        let src = &input.data[c * n..(c + 1) * n];
        for a in 0..kernel[0] {
            let (i0, i1, si) = valid_range(h, kernel[0], a);
            for b in 0..kernel[1] {
                let (j0, j1, sj) = valid_range(w, kernel[1], b);
                for e in 0..kernel[2] {
                    let (k0, k1, sk) = valid_range(d, kernel[2], e);
                    let dst = &mut cols[row * n..(row + 1) * n];
                    row += 1;
                    for i in i0..i1 {
                        let ii = (i as isize + si) as usize;
                        if d == 1 {
                            let base = i * w;
                            let sbase = ii * w;
                            let jlo = (j0 as isize + sj) as usize;
                            dst[base + j0..base + j1]
                                .copy_from_slice(&src[sbase + jlo..sbase + jlo + (j1 - j0)]);
                        } else {
                            for j in j0..j1 {
                                let jj = (j as isize + sj) as usize;
                                let base = (i * w + j) * d;
                                let sbase = (ii * w + jj) * d;
                                let klo = (k0 as isize + sk) as usize;
                                dst[base + k0..base + k1]
                                    .copy_from_slice(&src[sbase + klo..sbase + klo + (k1 - k0)]);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, ext: [usize; 3], kernel: [usize; 3]) -> Tensor {
    let [h, w, d] = ext;
    let n = h * w * d;
    let mut out = Tensor::zeros(channels, ext);
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut out.data[c * n..(c + 1) * n];
        for a in 0..kernel[0] {
            let (i0, i1, si) = valid_range(h, kernel[0], a);
            for b in 0..kernel[1] {
                let (j0, j1, sj) = valid_range(w, kernel[1], b);
                for e in 0..kernel[2] {
                    let (k0, k1, sk) = valid_range(d, kernel[2], e);
                    let src = &cols[row * n..(row + 1) * n];
                    row += 1;
                    let klo = (k0 as isize + sk) as usize;
                    for i in i0..i1 {
                        let ii = (i as isize + si) as usize;
                        if d == 1 {
                            let jlo = (j0 as isize + sj) as usize;
                            let from = &src[i * w + j0..i * w + j1];
                            let to = &mut dst[ii * w + jlo..ii * w + jlo + (j1 - j0)];
                            for (t, f) in to.iter_mut().zip(from) {
                                *t += f;
                            }
                            continue;
                        }
                        for j in j0..j1 {
                            let jj = (j as isize + sj) as usize;
                            let base = (i * w + j) * d;
                            let dbase = (ii * w + jj) * d;
                            let from = &src[base + k0..base + k1];
                            let to = &mut dst[dbase + klo..dbase + klo + (k1 - k0)];
                            for (t, f) in to.iter_mut().zip(from) {
                                *t += f;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn relu_inplace(t: &mut Tensor) -> Vec<bool> {
    t.data
        .iter_mut()
        .map(|v| {
            if *v > 0.0 {
                true
            } else {
                *v = 0.0;
                false
            }
        })
        .collect()
}

pub(crate) fn relu_backward(grad: &mut Tensor, active: &[bool]) {
    for (g, &a) in grad.data.iter_mut().zip(active) {
        if !a {
            *g = 0.0;
        }
    }
}

/// Non-overlapping max pooling; returns the pooled tensor and, for every
/// output element, the flat index of the winning input element.
pub(crate) fn max_pool(input: &Tensor, factor: [usize; 3]) -> (Tensor, Vec<usize>) {
    let [h, w, d] = input.ext;
    let ext = [h / factor[0], w / factor[1], d / factor[2]];
    let mut out = Tensor::zeros(input.channels, ext);
    let mut argmax = vec![0; out.data.len()];
    let n_in = input.voxels();
    let n_out = out.voxels();
    for c in 0..input.channels {
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            for e in 0..factor[2] {
                                let idx = c * n_in
                                    + ((i * factor[0] + a) * w + j * factor[1] + b) * d
                                    + k * factor[2]
                                    + e;
                                if input.data[idx] > best {
                                    best = input.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = c * n_out + (i * ext[1] + j) * ext[2] + k;
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(grad: &Tensor, argmax: &[usize], input_ext: [usize; 3]) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, input_ext);
    for (&g, &idx) in grad.data.iter().zip(argmax) {
        out.data[idx] += g;
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor per axis.
pub(crate) fn upsample(input: &Tensor, factor: [usize; 3]) -> Tensor {
    let [h, w, d] = input.ext;
    let ext = [h * factor[0], w * factor[1], d * factor[2]];
    let mut out = Tensor::zeros(input.channels, ext);
    let n_in = input.voxels();
    let n_out = out.voxels();
    for c in 0..input.channels {
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    out.data[c * n_out + (i * ext[1] + j) * ext[2] + k] = input.data
                        [c * n_in + ((i / factor[0]) * w + j / factor[1]) * d + k / factor[2]];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(grad: &Tensor, factor: [usize; 3], input_ext: [usize; 3]) -> Tensor {
    let [_, w, d] = input_ext;
    let ext = grad.ext;
    let mut out = Tensor::zeros(grad.channels, input_ext);
    let n_in = out.voxels();
    let n_out = grad.voxels();
    for c in 0..grad.channels {
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    out.data[c * n_in + ((i / factor[0]) * w + j / factor[1]) * d + k / factor[2]] +=
                        grad.data[c * n_out + (i * ext[1] + j) * ext[2] + k];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(params: &[f64], conv: &Conv, input: &Tensor) -> Tensor {
        let [h, w, d] = input.ext;
        let n = input.voxels();
        let mut out = Tensor::zeros(conv.cout, input.ext);
        for o in 0..conv.cout {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for k in 0..d as isize {
                        let mut acc = params[conv.bias + o];
                        for c in 0..conv.cin {
                            for a in 0..conv.kernel[0] {
                                for b in 0..conv.kernel[1] {
                                    for e in 0..conv.kernel[2] {
                                        let ii = i + a as isize - (conv.kernel[0] / 2) as isize;
                                        let jj = j + b as isize - (conv.kernel[1] / 2) as isize;
                                        let kk = k + e as isize - (conv.kernel[2] / 2) as isize;
                                        if ii < 0
                                            || jj < 0
                                            || kk < 0
                                            || ii >= h as isize
                                            || jj >= w as isize
                                            || kk >= d as isize
                                        {
                                            continue;
                                        }
                                        let widx = conv.weight
                                            + ((o * conv.cin + c) * conv.kernel[0] + a)
                                                * conv.kernel[1]
                                                * conv.kernel[2]
                                            + b * conv.kernel[2]
                                            + e;
                                        let x = input.data[c * n
                                            + ((ii as usize) * w + jj as usize) * d
                                            + kk as usize];
                                        acc += params[widx] * x;
                                    }
                                }
                            }
                        }
                        out.data[o * n + ((i as usize) * w + j as usize) * d + k as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for kernel in [[3, 3, 1], [3, 3, 3], [1, 1, 1]] {
            let conv = Conv {
                weight: 0,
                bias: 3 * 2 * 27,
                cin: 2,
                cout: 3,
                kernel,
            };
            let params = pseudo(conv.bias + 3, 7);
            let input = Tensor {
                channels: 2,
                ext: [4, 5, if kernel[2] == 3 { 3 } else { 1 }],
                data: pseudo(2 * 20 * 3, 9)[..2 * 20 * if kernel[2] == 3 { 3 } else { 1 }].to_vec(),
            };
            let fast = conv.forward(&params, &input);
            let slow = naive_conv(&params, &conv, &input);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), g> is linear in x, so its gradient is col2im(W^T g).
        let conv = Conv {
            weight: 0,
            bias: 2 * 2 * 9,
            cin: 2,
            cout: 2,
            kernel: [3, 3, 1],
        };
        let params = pseudo(conv.bias + 2, 3);
        let x = Tensor {
            channels: 2,
            ext: [3, 4, 1],
            data: pseudo(24, 5),
        };
        let g = Tensor {
            channels: 2,
            ext: [3, 4, 1],
            data: pseudo(24, 11),
        };
        let mut grads = vec![0.0; params.len()];
        let dx = conv.backward(&params, &x, &g, &mut grads, true).unwrap();
        let f = |x: &Tensor| -> f64 {
            conv.forward(&params, x)
                .data
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let t = Tensor {
            channels: 1,
            ext: [4, 4, 1],
            data: (0..16).map(|v| v as f64).collect(),
        };
        let (p, arg) = max_pool(&t, [2, 2, 1]);
        assert_eq!(p.data, vec![5.0, 7.0, 13.0, 15.0]);
        let back = max_pool_backward(&p, &arg, t.ext);
        assert_eq!(back.data[5], 5.0);
        assert_eq!(back.data[0], 0.0);
        let u = upsample(&p, [2, 2, 1]);
        assert_eq!(u.ext, [4, 4, 1]);
        assert_eq!(u.data[0], 5.0);
        assert_eq!(u.data[15], 15.0);
        let ub = upsample_backward(&u, [2, 2, 1], [2, 2, 1]);
        assert_eq!(ub.data, vec![20.0, 28.0, 52.0, 60.0]);
    }
}

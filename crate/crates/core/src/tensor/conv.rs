use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Geometry> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, kc, kh, kw) = kernel.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!("conv2d needs a square odd kernel, got {kh}x{kw}")));
    }
    if kc != c_in {
        return Err(Error::shape(format!("conv2d: input has {c_in} channels, kernel expects {kc}")));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!("conv2d: bias shape {:?}, expected [{c_out}]", b.shape())));
        }
    }
    Ok(Geometry { n, c_in, c_out, h, w, k: kh })
}

/// Unfolds one sample into a `(c_in*k*k) x (h*w)` patch matrix with zero padding.
fn im2col<T: Scalar>(g: &Geometry, sample: &[T], cols: &mut [T]) {
    let pad = g.k / 2;
    let plane = g.plane();
    for ci in 0..g.c_in {
        let src = &sample[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let line = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &src[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let shift = kx as isize - pad as isize;
                    for (x, out) in line.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *out = if sx < 0 || sx >= g.w as isize { T::zero() } else { src_line[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Scatters patch-matrix gradients back onto one sample (adjoint of `im2col`).
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], sample: &mut [T]) {
    let pad = g.k / 2;
    let plane = g.plane();
    for ci in 0..g.c_in {
        let dst = &mut sample[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let shift = kx as isize - pad as isize;
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let dst_line = &mut dst[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for x in 0..g.w {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < g.w as isize {
                            dst_line[sx as usize] += src[y * g.w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 2D convolution (cross-correlation, as in every DL framework).
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, Some(bias))?;
    let plane = g.plane();
    let patch = g.patch();
    let mut out = Tensor::zeros(&[g.n, g.c_out, g.h, g.w]);
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * plane] };
    for s in 0..g.n {
        let sample = &input.data()[s * g.c_in * plane..(s + 1) * g.c_in * plane];
        let out_s = &mut out.data_mut()[s * g.c_out * plane..(s + 1) * g.c_out * plane];
        for (co, chunk) in out_s.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let cols_ref: &[T] = if g.k == 1 {
            sample
        } else {
            im2col(&g, sample, &mut cols);
            &cols
        };
        T::gemm(g.c_out, patch, plane, T::one(), kernel.data(), patch, 1, cols_ref, plane, 1, T::one(), out_s, plane, 1);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, d_out: &Tensor<T>) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, kernel, None)?;
    if d_out.shape() != [g.n, g.c_out, g.h, g.w] {
        return Err(Error::shape(format!("conv2d_backward: output gradient shape {:?}", d_out.shape())));
    }
    let plane = g.plane();
    let patch = g.patch();
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[g.c_out]);
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * plane] };
    let mut d_cols = vec![T::zero(); patch * plane];

    for s in 0..g.n {
        let sample = &input.data()[s * g.c_in * plane..(s + 1) * g.c_in * plane];
        let d_out_s = &d_out.data()[s * g.c_out * plane..(s + 1) * g.c_out * plane];
        for (co, chunk) in d_out_s.chunks(plane).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.k == 1 {
            sample
        } else {
            im2col(&g, sample, &mut cols);
            &cols
        };
        // dK += dY * cols^T
        T::gemm(g.c_out, plane, patch, T::one(), d_out_s, plane, 1, cols_ref, 1, plane, T::one(), d_kernel.data_mut(), patch, 1);
        // dcols = K^T * dY
        let d_in_s = &mut d_input.data_mut()[s * g.c_in * plane..(s + 1) * g.c_in * plane];
        if g.k == 1 {
            T::gemm(patch, g.c_out, plane, T::one(), kernel.data(), 1, patch, d_out_s, plane, 1, T::zero(), d_in_s, plane, 1);
        } else {
            T::gemm(patch, g.c_out, plane, T::one(), kernel.data(), 1, patch, d_out_s, plane, 1, T::zero(), &mut d_cols, plane, 1);
            col2im(&g, &d_cols, d_in_s);
        }
    }
    Ok(Conv2dGrads { input: d_input, kernel: d_kernel, bias: d_bias })
}

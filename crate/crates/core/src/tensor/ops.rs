use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`], given its output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Flat argmax positions (into the pooled input) for each pooled output value.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties resolve to the first window element in row-major order.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let src = plane * h * w;
        for y in 0..oh {
            for x_ in 0..ow {
                let mut best = src + 2 * y * w + 2 * x_;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = src + (2 * y + dy) * w + 2 * x_ + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + y) * ow + x_;
                out.data_mut()[o] = x.data()[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, PoolIndices { input_shape: x.shape().to_vec(), argmax }))
}

pub fn max_pool2_backward<T: Scalar>(indices: &PoolIndices, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if d_out.len() != indices.argmax.len() {
        return Err(Error::shape("max_pool2_backward: gradient does not match pooled output"));
    }
    let mut d_in = Tensor::zeros(&indices.input_shape);
    for (&idx, &g) in indices.argmax.iter().zip(d_out.data()) {
        d_in.data_mut()[idx] += g;
    }
    Ok(d_in)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        for y in 0..oh {
            for x_ in 0..ow {
                out.data_mut()[(plane * oh + y) * ow + x_] = x.data()[(plane * h + y / 2) * w + x_ / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = d_out.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample2_backward: odd gradient dims"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut d_in = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        for y in 0..oh {
            for x_ in 0..ow {
                d_in.data_mut()[(plane * h + y / 2) * w + x_ / 2] += d_out.data()[(plane * oh + y) * ow + x_];
            }
        }
    }
    Ok(d_in)
}

/// Concatenates two `[N, C, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if first > c {
        return Err(Error::shape(format!("split: {first} > {c} channels")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for s in 0..n {
        let sample = &x.data()[s * c * plane..(s + 1) * c * plane];
        a.extend_from_slice(&sample[..first * plane]);
        b.extend_from_slice(&sample[first * plane..]);
    }
    Ok((Tensor::new(vec![n, first, h, w], a)?, Tensor::new(vec![n, c - first, h, w], b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_basics() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::<f64>::scalar(0.0)).data(), &[0.5]);
        assert!(sigmoid(&Tensor::<f32>::scalar(-200.0)).all_finite());
    }

    #[test]
    fn pool_routes_gradient_to_max() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = max_pool2_backward(&idx, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_ties_go_to_first_index() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 5.0);
        let (_, idx) = max_pool2(&x).unwrap();
        let g = max_pool2_backward(&idx, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        assert!(matches!(max_pool2(&Tensor::<f64>::zeros(&[1, 1, 3, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample2_backward(&Tensor::full(&[1, 1, 2, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0, 4.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 2, 1, 2], (0..8).map(|v| v as f64 * 10.0).collect()).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 0.0, 10.0, 20.0, 30.0]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}

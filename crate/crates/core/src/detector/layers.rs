//! Layer primitives on `C × H × W` feature maps.

use ndarray::{Array2, Array3, ArrayView2};

use crate::scalar::Scalar;

pub fn out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Unfolds zero-padded ("same" padding, `kernel / 2`) patches into columns:
/// row `(c·k + ki)·k + kj`, column `oy·Wo + ox`.
pub fn im2col<T: Scalar>(x: &Array3<T>, kernel: usize, stride: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = kernel as isize / 2;
    let (ho, wo) = (out_size(h, kernel, stride), out_size(w, kernel, stride));
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![T::zero(); c * kernel * kernel * ho * wo];
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kernel * kernel, ho * wo), cols).unwrap()
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(
    cols: ArrayView2<T>,
    shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array3<T> {
    let (c, h, w) = shape;
    let pad = kernel as isize / 2;
    let (ho, wo) = (out_size(h, kernel, stride), out_size(w, kernel, stride));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), x).unwrap()
}

/// Convolution via im2col; returns the output and the unfolded input.
pub fn conv_forward<T: Scalar>(
    x: &Array3<T>,
    weight: &Array2<T>,
    bias: &ndarray::Array1<T>,
    kernel: usize,
    stride: usize,
) -> (Array3<T>, Array2<T>) {
    let (_, h, w) = x.dim();
    let (ho, wo) = (out_size(h, kernel, stride), out_size(w, kernel, stride));
    let cols = im2col(x, kernel, stride);
    let mut out = weight.dot(&cols);
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    let out_ch = weight.nrows();
    (out.into_shape_with_order((out_ch, ho, wo)).unwrap(), cols)
}

pub fn relu<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(out: &Array3<T>, grad: &Array3<T>) -> Array3<T> {
    let mut g = grad.clone();
    ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    g
}

/// 2×2 stride-2 max pooling. The first maximal element in row-major window
/// order wins ties and receives the gradient.
pub fn maxpool_forward<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = xs[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > best {
                        best = xs[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (Array3::from_shape_vec((c, ho, wo), out).unwrap(), arg)
}

pub fn maxpool_backward<T: Scalar>(
    grad: &Array3<T>,
    argmax: &[u32],
    in_shape: (usize, usize, usize),
) -> Array3<T> {
    let mut g = Array3::<T>::zeros(in_shape);
    let gs = g.as_slice_mut().unwrap();
    for (&idx, &v) in argmax.iter().zip(grad.iter()) {
        gs[idx as usize] += v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng as _;

    fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = crate::seed::rng(seed);
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct convolution sum, independent of the im2col path.
    fn conv_oracle(x: &Array3<f64>, w: &ndarray::Array4<f64>, b: &Array1<f64>, stride: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let pad = k as isize / 2;
        let (ho, wo) = (out_size(h, k, stride), out_size(wd, k, stride));
        Array3::from_shape_fn((oc, ho, wo), |(o, oy, ox)| {
            let mut acc = b[o];
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[o, ch, ki, kj]] * x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum_oracle() {
        let mut rng = crate::seed::rng(11);
        for &(c, oc, h, k, stride) in &[(1, 1, 5, 3, 1), (3, 4, 7, 3, 1), (2, 3, 8, 3, 2), (4, 2, 6, 1, 1)] {
            let x = rand3((c, h, h), rng.random());
            let w4 = ndarray::Array4::from_shape_fn((oc, c, k, k), |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(oc, |_| rng.random_range(-1.0..1.0));
            let w2 = w4.clone().into_shape_with_order((oc, c * k * k)).unwrap();
            let (out, _) = conv_forward(&x, &w2, &b, k, stride);
            let oracle = conv_oracle(&x, &w4, &b, stride);
            assert_eq!(out.dim(), oracle.dim());
            for (a, e) in out.iter().zip(oracle.iter()) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = rand3((3, 6, 6), 2);
        let cols = im2col(&x, 3, 1);
        let mut rng = crate::seed::rng(3);
        let g = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &g).sum();
        let rhs: f64 = (&x * &col2im(g.view(), (3, 6, 6), 3, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_ties_go_to_first_element() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0_f64, 1.0, 1.0, 0.0]).unwrap();
        let (out, arg) = maxpool_forward(&x);
        assert_eq!(out[[0, 0, 0]], 1.0);
        assert_eq!(arg, vec![0]);
        let g = maxpool_backward(&Array3::from_elem((1, 1, 1), 2.0), &arg, (1, 2, 2));
        assert_eq!(g.as_slice().unwrap(), &[2.0, 0.0, 0.0, 0.0]);
    }
}

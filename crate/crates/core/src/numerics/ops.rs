//! Forward and backward kernels for every differentiable primitive.
//!
//! Backward functions return the vector-Jacobian product for each input given
//! the upstream gradient. None of these functions mutates its arguments.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Real};

/// A 2-D kernel given as the outer product of a vertical (row axis) and a
/// horizontal (column axis) 1-D kernel. Both lengths must be odd.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel<T> {
    vertical: Vec<T>,
    horizontal: Vec<T>,
}

impl<T: Real> SeparableKernel<T> {
    pub fn new(vertical: Vec<T>, horizontal: Vec<T>) -> Result<Self> {
        if vertical.len() % 2 == 0 || horizontal.len() % 2 == 0 {
            return Err(Error::contract(format!(
                "separable kernel lengths must be odd, got {}x{}",
                vertical.len(),
                horizontal.len()
            )));
        }
        Ok(Self {
            vertical,
            horizontal,
        })
    }

    pub fn vertical(&self) -> &[T] {
        &self.vertical
    }

    pub fn horizontal(&self) -> &[T] {
        &self.horizontal
    }

    pub fn vertical_radius(&self) -> usize {
        self.vertical.len() / 2
    }

    pub fn horizontal_radius(&self) -> usize {
        self.horizontal.len() / 2
    }

    /// Dense `vertical.len() x horizontal.len()` outer product.
    pub fn outer(&self) -> DenseArray<T> {
        DenseArray::from_fn(self.vertical.len(), self.horizontal.len(), |r, c| {
            self.vertical[r] * self.horizontal[c]
        })
    }

    pub fn cast<U: Real>(&self) -> SeparableKernel<U> {
        SeparableKernel {
            vertical: self.vertical.iter().map(|v| U::lit(v.as_f64())).collect(),
            horizontal: self.horizontal.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: &DenseArray<T>, b: &DenseArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_with<T: Real>(
    op: &'static str,
    a: &DenseArray<T>,
    b: &DenseArray<T>,
    f: impl Fn(T, T) -> T,
) -> Result<DenseArray<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseArray::new(a.shape().to_vec(), data)
}

/// `out[n, j] = sum_i input[n, i] * weight[i, j] + bias[j]`.
pub fn affine_forward<T: Real>(
    input: &DenseArray<T>,
    weight: &DenseArray<T>,
    bias: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    let (n, din) = input.dims2("affine")?;
    let (win, dout) = weight.dims2("affine")?;
    if win != din || bias.len() != dout {
        return Err(Error::dim(
            "affine",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        din,
        dout,
        input.data(),
        (din, 1),
        weight.data(),
        (dout, 1),
        T::one(),
        &mut out,
    );
    DenseArray::new([n, dout], out)
}

pub struct AffineGrads<T> {
    pub input: Option<DenseArray<T>>,
    pub weight: DenseArray<T>,
    pub bias: DenseArray<T>,
}

pub fn affine_backward<T: Real>(
    input: &DenseArray<T>,
    weight: &DenseArray<T>,
    grad_out: &DenseArray<T>,
    need_input_grad: bool,
) -> AffineGrads<T> {
    let n = input.rows();
    let din = input.cols();
    let dout = weight.cols();

    // dW = input^T . grad_out
    let mut gw = vec![T::zero(); din * dout];
    T::gemm(
        din,
        n,
        dout,
        input.data(),
        (1, din),
        grad_out.data(),
        (dout, 1),
        T::zero(),
        &mut gw,
    );

    let mut gb = vec![T::zero(); dout];
    for row in grad_out.data().chunks_exact(dout) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }

    let gx = need_input_grad.then(|| {
        // dX = grad_out . W^T
        let mut gx = vec![T::zero(); n * din];
        T::gemm(
            n,
            dout,
            din,
            grad_out.data(),
            (dout, 1),
            weight.data(),
            (1, dout),
            T::zero(),
            &mut gx,
        );
        DenseArray::new([n, din], gx).expect("affine input gradient shape")
    });

    AffineGrads {
        input: gx,
        weight: DenseArray::new([din, dout], gw).expect("affine weight gradient shape"),
        bias: DenseArray::new([dout], gb).expect("affine bias gradient shape"),
    }
}

pub fn relu<T: Real>(input: &DenseArray<T>) -> DenseArray<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient only where the input was strictly positive.
pub fn relu_backward<T: Real>(input: &DenseArray<T>, grad_out: &DenseArray<T>) -> DenseArray<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    DenseArray::new(input.shape().to_vec(), data).expect("relu gradient shape")
}

/// Column-wise concatenation of two 2-D arrays with equal row counts.
pub fn concat_cols<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    let (ra, ca) = a.dims2("concat")?;
    let (rb, cb) = b.dims2("concat")?;
    if ra != rb {
        return Err(Error::dim("concat", format!("row counts {ra} and {rb} differ")));
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for (row_a, row_b) in a.data().chunks_exact(ca.max(1)).zip(b.data().chunks_exact(cb.max(1))) {
        data.extend_from_slice(&row_a[..ca]);
        data.extend_from_slice(&row_b[..cb]);
    }
    DenseArray::new([ra, ca + cb], data)
}

pub fn concat_cols_backward<T: Real>(
    left_cols: usize,
    grad_out: &DenseArray<T>,
) -> (DenseArray<T>, DenseArray<T>) {
    let rows = grad_out.rows();
    let cols = grad_out.cols();
    let right_cols = cols - left_cols;
    let mut left = Vec::with_capacity(rows * left_cols);
    let mut right = Vec::with_capacity(rows * right_cols);
    for row in grad_out.data().chunks_exact(cols) {
        left.extend_from_slice(&row[..left_cols]);
        right.extend_from_slice(&row[left_cols..]);
    }
    (
        DenseArray::new([rows, left_cols], left).expect("concat gradient shape"),
        DenseArray::new([rows, right_cols], right).expect("concat gradient shape"),
    )
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

fn check_conv_dims<T: Real>(image: &DenseArray<T>, kernel: &SeparableKernel<T>) -> Result<(usize, usize)> {
    let (h, w) = image.dims2("conv2d_separable")?;
    if h < kernel.vertical_radius() + 1 || w < kernel.horizontal_radius() + 1 {
        return Err(Error::dim(
            "conv2d_separable",
            format!(
                "image {h}x{w} smaller than kernel radius+1 ({}x{})",
                kernel.vertical_radius() + 1,
                kernel.horizontal_radius() + 1
            ),
        ));
    }
    Ok((h, w))
}

/// Same-size 2-D convolution with edge-clamped (replicate) padding, computed
/// as a vertical 1-D pass followed by a horizontal 1-D pass.
pub fn conv2d_separable<T: Real>(
    image: &DenseArray<T>,
    kernel: &SeparableKernel<T>,
) -> Result<DenseArray<T>> {
    let (h, w) = check_conv_dims(image, kernel)?;
    let src = image.data();
    let kv = kernel.vertical();
    let kh = kernel.horizontal();
    let rv = kernel.vertical_radius() as isize;
    let rh = kernel.horizontal_radius() as isize;

    let mut tmp = vec![T::zero(); h * w];
    for r in 0..h {
        let out_row = &mut tmp[r * w..(r + 1) * w];
        for (t, &k) in kv.iter().enumerate() {
            let sr = clamp_index(r as isize + rv - t as isize, h);
            let in_row = &src[sr * w..(sr + 1) * w];
            for (o, &v) in out_row.iter_mut().zip(in_row) {
                *o = *o + k * v;
            }
        }
    }

    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        let in_row = &tmp[r * w..(r + 1) * w];
        let out_row = &mut out[r * w..(r + 1) * w];
        for (c, o) in out_row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (t, &k) in kh.iter().enumerate() {
                acc = acc + k * in_row[clamp_index(c as isize + rh - t as isize, w)];
            }
            *o = acc;
        }
    }
    DenseArray::new([h, w], out)
}

/// Adjoint of [`conv2d_separable`]: correlation with the flipped kernels,
/// with clamped taps scattering back onto the edge pixels they replicated.
pub fn conv2d_separable_backward<T: Real>(
    grad_out: &DenseArray<T>,
    kernel: &SeparableKernel<T>,
) -> Result<DenseArray<T>> {
    let (h, w) = check_conv_dims(grad_out, kernel)?;
    let g = grad_out.data();
    let kv = kernel.vertical();
    let kh = kernel.horizontal();
    let rv = kernel.vertical_radius() as isize;
    let rh = kernel.horizontal_radius() as isize;

    let mut gtmp = vec![T::zero(); h * w];
    for r in 0..h {
        let g_row = &g[r * w..(r + 1) * w];
        let t_row = &mut gtmp[r * w..(r + 1) * w];
        for (c, &gv) in g_row.iter().enumerate() {
            for (t, &k) in kh.iter().enumerate() {
                let sc = clamp_index(c as isize + rh - t as isize, w);
                t_row[sc] = t_row[sc] + k * gv;
            }
        }
    }

    let mut gin = vec![T::zero(); h * w];
    for r in 0..h {
        for (t, &k) in kv.iter().enumerate() {
            let sr = clamp_index(r as isize + rv - t as isize, h);
            for c in 0..w {
                gin[sr * w + c] = gin[sr * w + c] + k * gtmp[r * w + c];
            }
        }
    }
    DenseArray::new([h, w], gin)
}

pub fn add<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn div<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    zip_with("div", a, b, |x, y| x / y)
}

pub fn scale<T: Real>(a: &DenseArray<T>, factor: T) -> DenseArray<T> {
    a.map(|v| v * factor)
}

pub fn add_scalar<T: Real>(a: &DenseArray<T>, offset: T) -> DenseArray<T> {
    a.map(|v| v + offset)
}

pub fn square<T: Real>(a: &DenseArray<T>) -> DenseArray<T> {
    a.map(|v| v * v)
}

/// Rows `[start, start + count)` of a 2-D array.
pub fn crop_rows<T: Real>(a: &DenseArray<T>, start: usize, count: usize) -> Result<DenseArray<T>> {
    a.row_slice(start, start + count)
}

pub fn crop_rows_backward<T: Real>(
    input_shape: &[usize],
    start: usize,
    grad_out: &DenseArray<T>,
) -> DenseArray<T> {
    let mut g = DenseArray::zeros(input_shape.to_vec());
    let cols = grad_out.cols();
    g.data_mut()[start * cols..start * cols + grad_out.len()].copy_from_slice(grad_out.data());
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 2], rng: &mut impl Rng) -> DenseArray<f64> {
        DenseArray::from_fn(shape[0], shape[1], |_, _| rng.random_range(-1.0..1.0))
    }

    // Direct 2-D convolution with the dense outer-product kernel, clamped
    // indices, no separability.
    fn brute_conv(img: &DenseArray<f64>, k: &DenseArray<f64>) -> DenseArray<f64> {
        let (h, w) = img.dims2("t").unwrap();
        let (kh, kw) = k.dims2("t").unwrap();
        let (rv, rh) = ((kh / 2) as isize, (kw / 2) as isize);
        DenseArray::from_fn(h, w, |r, c| {
            let mut acc = 0.0;
            for i in 0..kh {
                for j in 0..kw {
                    let sr = (r as isize + rv - i as isize).clamp(0, h as isize - 1) as usize;
                    let sc = (c as isize + rh - j as isize).clamp(0, w as isize - 1) as usize;
                    acc += k.get(i, j) * img.get(sr, sc);
                }
            }
            acc
        })
    }

    fn asymmetric_kernel() -> SeparableKernel<f64> {
        SeparableKernel::new(vec![0.1, 0.5, 0.2, 0.15, 0.05], vec![0.3, 0.6, 0.1]).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_value() {
        let x = DenseArray::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = affine_forward(&x, &eye, &DenseArray::zeros([2])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let x = DenseArray::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = DenseArray::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let out = affine_forward(&x, &w, &DenseArray::filled([1], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn affine_zero_weight_rows_equal_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([5, 3], &mut rng);
        let b = DenseArray::new([4], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        let out = affine_forward(&x, &DenseArray::zeros([3, 4]), &b).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = DenseArray::<f64>::zeros([2, 3]);
        assert!(matches!(
            affine_forward(&x, &DenseArray::zeros([2, 2]), &DenseArray::zeros([2])),
            Err(Error::Dimension { .. })
        ));
        assert!(affine_forward(&x, &DenseArray::zeros([3, 2]), &DenseArray::zeros([3])).is_err());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = DenseArray::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &DenseArray::filled([3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let neg = DenseArray::new([3], vec![-3.0, -0.1, -7.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_constant_image_is_preserved() {
        let k = SeparableKernel::new(vec![0.25, 0.5, 0.25], vec![0.2, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let img = DenseArray::filled([7, 9], 3.25);
        let out = conv2d_separable(&img, &k).unwrap();
        for v in out.data() {
            assert_relative_eq!(*v, 3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_impulse_response_is_the_kernel() {
        let k = asymmetric_kernel();
        let mut img = DenseArray::zeros([15, 15]);
        img.set(7, 7, 1.0);
        let out = conv2d_separable(&img, &k).unwrap();
        let dense = k.outer();
        for i in 0..5 {
            for j in 0..3 {
                assert_relative_eq!(out.get(7 + i - 2, 7 + j - 1), dense.get(i, j), epsilon = 1e-15);
            }
        }
        assert_relative_eq!(out.sum(), dense.sum(), epsilon = 1e-12);
    }

    #[test]
    fn conv_matches_dense_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = asymmetric_kernel();
        let img = random([16, 16], &mut rng);
        let fast = conv2d_separable(&img, &k).unwrap();
        let slow = brute_conv(&img, &k.outer());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_small_image() {
        let k = asymmetric_kernel();
        assert!(conv2d_separable(&DenseArray::<f64>::zeros([2, 8]), &k).is_err());
        assert!(conv2d_separable(&DenseArray::<f64>::zeros([3, 2]), &k).is_ok());
        assert!(conv2d_separable(&DenseArray::<f64>::zeros([3, 1]), &k).is_err());
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> for random x, g.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = asymmetric_kernel();
        let x = random([9, 6], &mut rng);
        let g = random([9, 6], &mut rng);
        let lhs: f64 = conv2d_separable(&x, &k)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let gt = conv2d_separable_backward(&g, &k).unwrap();
        let rhs: f64 = x.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn affine_backward_matches_hand_values() {
        let x = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = DenseArray::from_rows(&[vec![1.0, -1.0, 0.5], vec![2.0, 0.0, 1.0]]).unwrap();
        let g = DenseArray::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let grads = affine_backward(&x, &w, &g, true);
        // x^T g
        assert_eq!(grads.weight.data(), &[1.0, 3.0, -1.0, 2.0, 4.0, 0.0]);
        assert_eq!(grads.bias.data(), &[1.0, 1.0, 1.0]);
        // g w^T
        assert_eq!(grads.input.unwrap().data(), &[2.0, 4.0, -1.5, -1.0]);
    }

    #[test]
    fn concat_and_split() {
        let a = DenseArray::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = DenseArray::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (ga, gb) = concat_cols_backward(1, &c);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}

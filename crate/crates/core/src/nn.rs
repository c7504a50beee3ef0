//! Minimal neural-network layers with explicit forward/backward passes.
//!
//! Everything is generic over the float type so the production model runs
//! in f32 while gradient checks instantiate the same code at f64.
//! Convolutions are computed via im2col + matrix multiplication; the
//! transposed convolution is the exact adjoint (see the adjointness tests).

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Converts an f64 constant into the model scalar type.
pub fn fl<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("constant representable in model float")
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu<F: NdFloat>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient through ReLU given the *post-activation* values.
pub fn relu_backward<F: NdFloat>(y: &Array2<F>, grad_out: &Array2<F>) -> Array2<F> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

pub fn relu4<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu4_backward<F: NdFloat>(y: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

/// Bounded output `s * tanh(u / s)`, used by the property heads so
/// predictions stay inside [-s, s].
pub fn squash<F: NdFloat>(u: &Array2<F>, s: f64) -> Array2<F> {
    let sf = fl::<F>(s);
    u.mapv(|v| sf * (v / sf).tanh())
}

pub fn squash_backward<F: NdFloat>(u: &Array2<F>, grad_out: &Array2<F>, s: f64) -> Array2<F> {
    let sf = fl::<F>(s);
    let mut g = grad_out.clone();
    g.zip_mut_with(u, |gv, &uv| {
        let t = (uv / sf).tanh();
        *gv = *gv * (F::one() - t * t);
    });
    g
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer; `weight` is `[in, out]` so a batch `[n, in]`
/// maps to `[n, out]` by right multiplication.
#[derive(Debug, Clone)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Dense<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { weight: Array2::zeros((in_dim, out_dim)), bias: Array1::zeros(out_dim) }
    }

    /// Uniform fan-in initialization, weights from U(-1/sqrt(in), 1/sqrt(in)),
    /// biases zero. Draw order is row-major and fixed.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<F> =
            (0..in_dim * out_dim).map(|_| fl(rng.random_range(-scale..scale))).collect();
        Dense {
            weight: Array2::from_shape_vec((in_dim, out_dim), data).expect("dense shape"),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, x: &Array2<F>, grad_out: &Array2<F>, grads: &mut Dense<F>) -> Array2<F> {
        grads.weight += &x.t().dot(grad_out);
        grads.bias += &grad_out.sum_axis(ndarray::Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` `[n, c, h, w]` into `[n*oh*ow, c*k*k]` patches for a
/// convolution with the given kernel/stride/padding.
pub fn im2col<F: NdFloat>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut col = Array2::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, (ci * k + ky) * k + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back into an
/// image of shape `[n, c, h, w]`.
pub fn col2im<F: NdFloat>(
    col: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(col.dim(), (n * oh * ow, c * k * k));
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[ni, ci, iy as usize, ix as usize]] +=
                                col[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn to_nchw<F: NdFloat>(mat: &Array2<F>, n: usize, ch: usize, h: usize, w: usize) -> Array4<F> {
    // mat rows iterate (n, h, w), columns are channels
    let nhwc = mat
        .to_owned()
        .into_shape_with_order((n, h, w, ch))
        .expect("nhwc shape");
    nhwc.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}

fn to_mat<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    // [n, c, h, w] -> rows (n, h, w), columns c
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("mat shape")
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Strided convolution; `weight` is `[out_c, in_c, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_c, in_c, k, k)),
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn init(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / ((in_c * k * k) as f64).sqrt();
        let data: Vec<F> =
            (0..out_c * in_c * k * k).map(|_| fl(rng.random_range(-scale..scale))).collect();
        Conv2d {
            weight: Array4::from_shape_vec((out_c, in_c, k, k), data).expect("conv shape"),
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_mat(&self) -> Array2<F> {
        let (oc, ic, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("weight contiguous")
            .to_owned()
    }

    /// Returns `(output, col)`; the patch matrix is cached for backward.
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (n, _c, h, w) = x.dim();
        let k = self.kernel();
        let oh = conv_out_dim(h, k, self.stride, self.padding);
        let ow = conv_out_dim(w, k, self.stride, self.padding);
        let col = im2col(x, k, self.stride, self.padding);
        let mut y_mat = col.dot(&self.weight_mat().t());
        y_mat += &self.bias;
        let oc = self.weight.dim().0;
        (to_nchw(&y_mat, n, oc, oh, ow), col)
    }

    pub fn backward(
        &self,
        col: &Array2<F>,
        x_dim: (usize, usize, usize, usize),
        grad_out: &Array4<F>,
        grads: &mut Conv2d<F>,
    ) -> Array4<F> {
        let (n, c, h, w) = x_dim;
        let k = self.kernel();
        let (oc, ic, kh, kw) = self.weight.dim();
        let gy_mat = to_mat(grad_out); // [n*oh*ow, oc]
        grads.bias += &gy_mat.sum_axis(ndarray::Axis(0));
        let gw_mat = gy_mat.t().dot(col); // [oc, ic*k*k]
        grads.weight += &gw_mat
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("grad weight shape");
        let gcol = gy_mat.dot(&self.weight_mat()); // [n*oh*ow, ic*k*k]
        col2im(&gcol, n, c, h, w, k, self.stride, self.padding)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

/// Transposed convolution; `weight` is `[in_c, out_c, k, k]`. Output size is
/// `(in - 1) * stride - 2 * pad + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<F: NdFloat> ConvTranspose2d<F> {
    pub fn zeros(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Self {
        ConvTranspose2d {
            weight: Array4::zeros((in_c, out_c, k, k)),
            bias: Array1::zeros(out_c),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn init(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / ((in_c * k * k) as f64).sqrt();
        let data: Vec<F> =
            (0..in_c * out_c * k * k).map(|_| fl(rng.random_range(-scale..scale))).collect();
        ConvTranspose2d {
            weight: Array4::from_shape_vec((in_c, out_c, k, k), data).expect("tconv shape"),
            bias: Array1::zeros(out_c),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel() + self.output_padding - 2 * self.padding
    }

    fn weight_mat(&self) -> Array2<F> {
        let (ic, oc, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((ic, oc * kh * kw))
            .expect("weight contiguous")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, _ic, h, w) = x.dim();
        let (_ic2, oc, _kh, _kw) = self.weight.dim();
        let (out_h, out_w) = (self.out_size(h), self.out_size(w));
        let x_mat = to_mat(x); // [n*h*w, ic]
        let col = x_mat.dot(&self.weight_mat()); // [n*h*w, oc*k*k]
        let mut y =
            col2im(&col, n, oc, out_h, out_w, self.kernel(), self.stride, self.padding);
        for mut ch in y.axis_iter_mut(ndarray::Axis(1)).zip(self.bias.iter()).map(|(a, b)| (a, b))
        {
            ch.0.mapv_inplace(|v| v + *ch.1);
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array4<F>,
        grad_out: &Array4<F>,
        grads: &mut ConvTranspose2d<F>,
    ) -> Array4<F> {
        let (n, ic, h, w) = x.dim();
        let (_ic, oc, kh, kw) = self.weight.dim();
        let gcol = im2col(grad_out, self.kernel(), self.stride, self.padding); // [n*h*w, oc*k*k]
        let x_mat = to_mat(x);
        let gw_mat = x_mat.t().dot(&gcol); // [ic, oc*k*k]
        grads.weight += &gw_mat
            .into_shape_with_order((ic, oc, kh, kw))
            .expect("grad weight shape");
        for (b, ch) in grads.bias.iter_mut().zip(grad_out.axis_iter(ndarray::Axis(1))) {
            *b += ch.sum();
        }
        let gx_mat = gcol.dot(&self.weight_mat().t()); // [n*h*w, ic]
        to_nchw(&gx_mat, n, ic, h, w)
    }
}

// ---------------------------------------------------------------------------
// Center crop
// ---------------------------------------------------------------------------

/// Crops the two spatial axes to `target` centered, used by the conv
/// decoder to trim its 48x48 canvas to 44x44.
pub fn center_crop<F: NdFloat>(x: &Array4<F>, target: usize) -> Array4<F> {
    let (_n, _c, h, w) = x.dim();
    let off_y = (h - target) / 2;
    let off_x = (w - target) / 2;
    x.slice(ndarray::s![.., .., off_y..off_y + target, off_x..off_x + target]).to_owned()
}

pub fn center_crop_backward<F: NdFloat>(
    grad_out: &Array4<F>,
    full: (usize, usize, usize, usize),
) -> Array4<F> {
    let (n, c, h, w) = full;
    let target = grad_out.dim().2;
    let off_y = (h - target) / 2;
    let off_x = (w - target) / 2;
    let mut g = Array4::zeros((n, c, h, w));
    g.slice_mut(ndarray::s![.., .., off_y..off_y + target, off_x..off_x + target])
        .assign(grad_out);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array4};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_arr4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let n = dim.0 * dim.1 * dim.2 * dim.3;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array4::from_shape_vec(dim, data).unwrap()
    }

    fn rand_arr2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
        let data: Vec<f64> = (0..dim.0 * dim.1).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array2::from_shape_vec(dim, data).unwrap()
    }

    /// Direct six-loop convolution used as the oracle.
    fn conv_brute(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oc, _ic, k, _) = conv.weight.dim();
        let oh = conv_out_dim(h, k, conv.stride, conv.padding);
        let ow = conv_out_dim(w, k, conv.stride, conv.padding);
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize
                                        - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize
                                        - conv.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * conv.weight[[o, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_brute_force() {
        let mut r = rng(0);
        let mut conv = Conv2d::<f64>::init(3, 2, 3, 2, 1, &mut r);
        conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let x = rand_arr4(&mut r, (2, 2, 7, 6));
        let (y, _) = conv.forward(&x);
        let oracle = conv_brute(&conv, &x);
        assert_eq!(y.dim(), oracle.dim());
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_spatial_progression_44_to_3() {
        // stride-2, pad-1, kernel-3 halves each stage: 44 -> 22 -> 11 -> 6 -> 3
        let mut d = 44;
        let mut sizes = vec![d];
        for _ in 0..4 {
            d = conv_out_dim(d, 3, 2, 1);
            sizes.push(d);
        }
        assert_eq!(sizes, vec![44, 22, 11, 6, 3]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let mut r = rng(1);
        let x = rand_arr4(&mut r, (2, 3, 6, 5));
        let (k, stride, pad) = (3, 2, 1);
        let col = im2col(&x, k, stride, pad);
        let c = rand_arr2(&mut r, col.dim());
        let lhs: f64 = (&col * &c).sum();
        let back = col2im(&c, 2, 3, 6, 5, k, stride, pad);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        let mut r = rng(2);
        let conv = Conv2d::<f64>::init(4, 2, 3, 2, 1, &mut r);
        // same kernel viewed as [in_c=4, out_c=2, k, k], zero bias
        let mut tconv = ConvTranspose2d::<f64>::zeros(4, 2, 3, 2, 1, 1);
        tconv.weight = conv.weight.clone();

        let x = rand_arr4(&mut r, (1, 2, 8, 8)); // conv: 8 -> 4
        let mut czero = conv.clone();
        czero.bias.fill(0.0);
        let (y, _) = czero.forward(&x);
        let u = rand_arr4(&mut r, y.dim());
        let lhs: f64 = (&y * &u).sum();
        // tconv with output_padding 1 maps 4 back to 8
        let v = tconv.forward(&u);
        assert_eq!(v.dim(), x.dim());
        let rhs: f64 = (&x * &v).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn dense_gradcheck() {
        let mut r = rng(3);
        let layer = Dense::<f64>::init(4, 3, &mut r);
        let x = rand_arr2(&mut r, (2, 4));
        let probe = rand_arr2(&mut r, (2, 3));
        let loss = |l: &Dense<f64>, x: &Array2<f64>| (l.forward(x) * &probe).sum();

        let mut grads = Dense::<f64>::zeros(4, 3);
        let gx = layer.backward(&x, &probe, &mut grads);

        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.weight[[i, j]] += eps;
                lm.weight[[i, j]] -= eps;
                let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
                assert!((num - grads.weight[[i, j]]).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.bias[j] += eps;
            lm.bias[j] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((num - grads.bias[j]).abs() < 1e-8);
        }
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += eps;
                xm[[i, j]] -= eps;
                let num = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
                assert!((num - gx[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn conv_gradcheck() {
        let mut r = rng(4);
        let conv = Conv2d::<f64>::init(3, 2, 3, 2, 1, &mut r);
        let x = rand_arr4(&mut r, (2, 2, 5, 5));
        let (y, col) = conv.forward(&x);
        let probe = rand_arr4(&mut r, y.dim());
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| {
            let (y, _) = c.forward(x);
            (y * &probe).sum()
        };

        let mut grads = Conv2d::<f64>::zeros(3, 2, 3, 2, 1);
        let gx = conv.backward(&col, x.dim(), &probe, &mut grads);

        let eps = 1e-6;
        // every weight and bias
        for idx in 0..conv.weight.len() {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.as_slice_mut().unwrap()[idx] += eps;
            cm.weight.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grads.weight.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for j in 0..3 {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.bias[j] += eps;
            cm.bias[j] -= eps;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((num - grads.bias[j]).abs() < 1e-8);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - gx.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn tconv_gradcheck() {
        let mut r = rng(5);
        let tconv = ConvTranspose2d::<f64>::init(3, 2, 3, 2, 1, 1, &mut r);
        let x = rand_arr4(&mut r, (2, 3, 3, 3));
        let y = tconv.forward(&x);
        assert_eq!(y.dim(), (2, 2, 6, 6));
        let probe = rand_arr4(&mut r, y.dim());
        let loss = |t: &ConvTranspose2d<f64>, x: &Array4<f64>| (t.forward(x) * &probe).sum();

        let mut grads = ConvTranspose2d::<f64>::zeros(3, 2, 3, 2, 1, 1);
        let gx = tconv.backward(&x, &probe, &mut grads);

        let eps = 1e-6;
        for idx in 0..tconv.weight.len() {
            let mut tp = tconv.clone();
            let mut tm = tconv.clone();
            tp.weight.as_slice_mut().unwrap()[idx] += eps;
            tm.weight.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&tp, &x) - loss(&tm, &x)) / (2.0 * eps);
            assert!((num - grads.weight.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for j in 0..2 {
            let mut tp = tconv.clone();
            let mut tm = tconv.clone();
            tp.bias[j] += eps;
            tm.bias[j] -= eps;
            let num = (loss(&tp, &x) - loss(&tm, &x)) / (2.0 * eps);
            assert!((num - grads.bias[j]).abs() < 1e-8);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&tconv, &xp) - loss(&tconv, &xm)) / (2.0 * eps);
            assert!((num - gx.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn tconv_doubles_then_crop_recovers_44() {
        let t = ConvTranspose2d::<f64>::zeros(8, 4, 3, 2, 1, 1);
        let mut d = 3;
        for _ in 0..4 {
            d = t.out_size(d);
        }
        assert_eq!(d, 48);
        let x = Array4::<f64>::zeros((1, 1, 48, 48));
        assert_eq!(center_crop(&x, 44).dim(), (1, 1, 44, 44));
    }

    #[test]
    fn crop_backward_is_adjoint() {
        let mut r = rng(6);
        let x = rand_arr4(&mut r, (1, 2, 8, 8));
        let y = center_crop(&x, 4);
        let u = rand_arr4(&mut r, y.dim());
        let lhs: f64 = (&y * &u).sum();
        let v = center_crop_backward(&u, x.dim());
        let rhs: f64 = (&x * &v).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn relu_and_squash_shapes() {
        let x = Array::from_shape_vec((1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x), Array::from_shape_vec((1, 3), vec![0.0, 0.0, 2.0]).unwrap());
        let s = squash(&x, 1.5);
        assert!(s[[0, 0]] > -1.5 && s[[0, 0]] < 0.0);
        assert_eq!(s[[0, 1]], 0.0);
        assert!(s[[0, 2]] < 1.5 && s[[0, 2]] > 1.0);
    }

    #[test]
    fn squash_gradcheck() {
        let mut r = rng(7);
        let u = rand_arr2(&mut r, (2, 3));
        let probe = rand_arr2(&mut r, (2, 3));
        let g = squash_backward(&u, &probe, 1.5);
        let eps = 1e-6;
        for idx in 0..u.len() {
            let mut up = u.clone();
            let mut um = u.clone();
            up.as_slice_mut().unwrap()[idx] += eps;
            um.as_slice_mut().unwrap()[idx] -= eps;
            let num = ((squash(&up, 1.5) * &probe).sum() - (squash(&um, 1.5) * &probe).sum())
                / (2.0 * eps);
            assert!((num - g.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }
}

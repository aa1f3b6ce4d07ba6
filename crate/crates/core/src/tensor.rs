//! Dense row-major f64 arrays plus the handful of kernels the rest of the
//! pipeline is built on: convolution, 2x2 max-pooling, ReLU, softmax and
//! bilinear resize.
//!
//! Everything here is a pure function on immutable inputs; all of it is safe
//! to call concurrently from any number of threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense numeric array. `data` is row-major and its length always equals the
/// product of `shape`; every shape entry is at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dim(format!("invalid tensor shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dim(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Borrow channel `c` of a CxHxW tensor as a flat HxW slice.
    pub fn channel(&self, c: usize) -> Result<&[f64]> {
        let [ch, h, w] = self.dims3()?;
        if c >= ch {
            return Err(Error::Dim(format!("channel {c} out of range 0..{ch}")));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Dim(format!(
                "expected 2-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Dim(format!(
                "expected 3-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Dim(format!(
                "expected 4-d tensor, got {:?}",
                self.shape
            ))),
        }
    }
}

/// 2-d cross-correlation ("convolution" in CNN usage) of a CinxHxW input with
/// Cout x Cin x k x k kernels, zero padding and a per-output-channel bias.
///
/// Output spatial size is `(H + 2*padding - k) / stride + 1`; it must come out
/// a positive integer or the call is rejected.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [c_in, h, w] = input.dims3()?;
    let [c_out, kc, kh, kw] = kernels.dims4()?;
    if kc != c_in {
        return Err(Error::Dim(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if kh != kw {
        return Err(Error::Dim(format!("kernels must be square, got {kh}x{kw}")));
    }
    let k = kh;
    if bias.len() != c_out {
        return Err(Error::Dim(format!(
            "bias length {} does not match {c_out} output channels",
            bias.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::Config(format!(
            "kernel {k} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    if (h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0 {
        return Err(Error::Config(format!(
            "output size for input {h}x{w}, kernel {k}, stride {stride}, padding {padding} \
             is not integral"
        )));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;

    let mut out = vec![0.0; c_out * oh * ow];
    if stride == 1 {
        conv2d_stride1(input, kernels, bias, padding, oh, ow, &mut out);
    } else {
        conv2d_strided(input, kernels, bias, stride, padding, oh, ow, &mut out);
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Stride-1 path: per kernel tap, one shifted row axpy over the whole output
/// row, which the compiler vectorizes.
fn conv2d_stride1(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let [c_in, h, w] = input.dims3().expect("checked by conv2d");
    let [c_out, _, k, _] = kernels.dims4().expect("checked by conv2d");
    for co in 0..c_out {
        let out_ch = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_ch.fill(bias[co]);
        for ci in 0..c_in {
            let in_ch = &input.data[ci * h * w..(ci + 1) * h * w];
            let ker = &kernels.data[((co * c_in + ci) * k) * k..][..k * k];
            for ky in 0..k {
                let oy0 = padding.saturating_sub(ky);
                let oy1 = oh.min((h + padding).saturating_sub(ky));
                for kx in 0..k {
                    let wv = ker[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox0 = padding.saturating_sub(kx);
                    let ox1 = ow.min((w + padding).saturating_sub(kx));
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + ky - padding;
                        let src = &in_ch[iy * w + ox0 + kx - padding..iy * w + ox1 + kx - padding];
                        let dst = &mut out_ch[oy * ow + ox0..oy * ow + ox1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// General strided path: plain window dot products.
#[allow(clippy::too_many_arguments)]
fn conv2d_strided(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let [c_in, h, w] = input.dims3().expect("checked by conv2d");
    let [c_out, _, k, _] = kernels.dims4().expect("checked by conv2d");
    for co in 0..c_out {
        for oy in 0..oh {
            let y0 = oy * stride;
            let ky0 = padding.saturating_sub(y0);
            let ky1 = k.min((h + padding).saturating_sub(y0));
            for ox in 0..ow {
                let x0 = ox * stride;
                let kx0 = padding.saturating_sub(x0);
                let kx1 = k.min((w + padding).saturating_sub(x0));
                let mut acc = bias[co];
                for ci in 0..c_in {
                    let in_ch = &input.data[ci * h * w..(ci + 1) * h * w];
                    let ker = &kernels.data[((co * c_in + ci) * k) * k..];
                    for ky in ky0..ky1 {
                        let iy = y0 + ky - padding;
                        let in_row = &in_ch[iy * w..iy * w + w];
                        let ker_row = &ker[ky * k..ky * k + k];
                        for kx in kx0..kx1 {
                            acc += in_row[x0 + kx - padding] * ker_row[kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// 2x2 non-overlapping max-pooling with stride 2. H and W must be even.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let ch = &input.data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let m = ch[y * w + x]
                    .max(ch[y * w + x + 1])
                    .max(ch[(y + 1) * w + x])
                    .max(ch[(y + 1) * w + x + 1]);
                out[(ci * oh + oy) * ow + ox] = m;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Elementwise max(x, 0). Rejects non-finite input.
pub fn relu(input: &Tensor) -> Result<Tensor> {
    if !input.data.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite input to relu".into()));
    }
    let data = input.data.iter().map(|&x| x.max(0.0)).collect();
    Tensor::new(input.shape.clone(), data)
}

/// Numerically stable softmax (max-subtraction). Output entries are strictly
/// positive and sum to 1.
pub fn softmax(input: &[f64]) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::Dim("softmax of empty vector".into()));
    }
    if !input.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite input to softmax".into()));
    }
    let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = input.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Bilinear resize of a 2-d tensor with corner-aligned sampling: output corner
/// pixels sample input corner pixels exactly, so a same-size resize is the
/// identity.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = input.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dim("resize target must be at least 1x1".into()));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let sy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let v00 = input.data[y0 * w + x0];
            let v01 = input.data[y0 * w + x1];
            let v10 = input.data[y1 * w + x0];
            let v11 = input.data[y1 * w + x1];
            out[oy * out_w + ox] = v00 * (1.0 - dy) * (1.0 - dx)
                + v01 * (1.0 - dy) * dx
                + v10 * dy * (1.0 - dx)
                + v11 * dy * dx;
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Plain reference convolution: pad explicitly, then six nested loops.
    /// Kept deliberately independent of the production kernel.
    fn conv2d_reference(
        input: &Tensor,
        kernels: &Tensor,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let [c_in, h, w] = input.dims3().unwrap();
        let [c_out, _, k, _] = kernels.dims4().unwrap();
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        let mut padded = vec![0.0; c_in * ph * pw];
        for ci in 0..c_in {
            for y in 0..h {
                for x in 0..w {
                    padded[(ci * ph + y + padding) * pw + x + padding] =
                        input.data()[(ci * h + y) * w + x];
                }
            }
        }
        let oh = (ph - k) / stride + 1;
        let ow = (pw - k) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += padded[(ci * ph + oy * stride + ky) * pw + ox * stride + kx]
                                    * kernels.data()[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, oh, ow], out).unwrap()
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tensor_invariants_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn conv_uniform_case() {
        let input = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let kernels = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let out = conv2d(&input, &kernels, &[0.0], 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let input = rand_tensor(vec![1, 4, 5], &mut rng);
        let kernels = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&input, &kernels, &[0.0], 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_reference_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let input = rand_tensor(vec![1, 5, 5], &mut rng);
        let kernels = rand_tensor(vec![2, 1, 3, 3], &mut rng);
        let bias = [0.3, -0.2];
        for padding in 0..=2 {
            let got = conv2d(&input, &kernels, &bias, 1, padding).unwrap();
            let want = conv2d_reference(&input, &kernels, &bias, 1, padding);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_strided_matches_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let input = rand_tensor(vec![3, 7, 7], &mut rng);
        let kernels = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let bias = [0.0, 1.0];
        let got = conv2d(&input, &kernels, &bias, 2, 1).unwrap();
        let want = conv2d_reference(&input, &kernels, &bias, 2, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::new(vec![2, 4, 4], vec![0.0; 32]).unwrap();
        let kernels = Tensor::new(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(matches!(
            conv2d(&input, &kernels, &[0.0], 1, 0),
            Err(Error::Dim(_))
        ));
        // 4 + 2*0 - 3 = 1, stride 2 -> non-integral output.
        let kernels = Tensor::new(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
        assert!(matches!(
            conv2d(&input, &kernels, &[0.0], 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn maxpool_basics() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);

        let constant = Tensor::new(vec![2, 4, 4], vec![0.7; 32]).unwrap();
        let out = maxpool2(&constant).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));

        let odd = Tensor::new(vec![1, 3, 4], vec![0.0; 12]).unwrap();
        assert!(matches!(maxpool2(&odd), Err(Error::Dim(_))));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let input = rand_tensor(vec![1, 6, 6], &mut rng);
        let out = maxpool2(&input).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(out.data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn relu_and_softmax_cases() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).unwrap().data(), &[0.0, 0.0, 2.0]);

        let s = softmax(&[0.0, 0.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);

        // Would overflow exp() without max-subtraction.
        let s = softmax(&[1000.0, 1000.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);

        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(
            relu(&Tensor::new(vec![1], vec![f64::INFINITY]).unwrap()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let input = rand_tensor(vec![4, 6], &mut rng);
        let out = resize_bilinear(&input, 4, 6).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let input = Tensor::new(vec![3, 3], vec![0.42; 9]).unwrap();
        for (oh, ow) in [(1, 1), (2, 5), (7, 7), (10, 2)] {
            let out = resize_bilinear(&input, oh, ow).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_hand_interpolation_case() {
        // Rows [0,0] and [2,2]; the inserted middle row sits halfway.
        let input = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let out = resize_bilinear(&input, 3, 3).unwrap();
        for x in 0..3 {
            assert!((out.data()[3 + x] - 1.0).abs() < 1e-15);
        }
        assert_eq!(&out.data()[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&out.data()[6..9], &[2.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = rand_tensor(vec![2, 5, 5], &mut rng);
            let y = rand_tensor(vec![2, 5, 5], &mut rng);
            let kernels = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mixed_data: Vec<f64> = x.data().iter().zip(y.data())
                .map(|(xi, yi)| a * xi + b * yi).collect();
            let mixed = Tensor::new(vec![2, 5, 5], mixed_data).unwrap();
            let bias = [0.0; 3];
            let cm = conv2d(&mixed, &kernels, &bias, 1, 1).unwrap();
            let cx = conv2d(&x, &kernels, &bias, 1, 1).unwrap();
            let cy = conv2d(&y, &kernels, &bias, 1, 1).unwrap();
            let scale = cm.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
            for i in 0..cm.len() {
                let want = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((cm.data()[i] - want).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn maxpool_bounded_by_input_max(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let input = rand_tensor(vec![1, 4, 4], &mut rng);
            let out = maxpool2(&input).unwrap();
            let in_max = input.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out_max = out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out_max <= in_max);
            prop_assert_eq!(out_max, in_max); // 2x2/stride-2 windows cover every element
        }

        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&v).unwrap();
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

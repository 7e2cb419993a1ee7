use crate::error::{Error, Result};

use super::{Raster, Shape};

/// 2-d convolution (cross-correlation) with square kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out_channels × in_channels × k × k`
    pub weight: Raster,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub grad_weight: Raster,
    pub grad_bias: Option<Vec<f64>>,
}

/// Gradients of `⟨grad_out, conv2d(input)⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Raster,
    pub weight: Raster,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(weight: Raster, bias: Option<Vec<f64>>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w || ws.h == 0 {
            return Err(Error::Shape(format!("conv kernel must be square and non-empty, got {ws}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if let Some(b) = &bias {
            if b.len() != ws.n {
                return Err(Error::Shape(format!(
                    "conv bias has {} entries for {} output channels",
                    b.len(),
                    ws.n
                )));
            }
        }
        let grad_bias = bias.as_ref().map(|b| vec![0.0; b.len()]);
        Ok(Conv2d {
            grad_weight: Raster::zeros(ws),
            weight,
            bias,
            stride,
            padding,
            grad_bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        output_dim(h, self.kernel(), self.stride, self.padding)
            .zip(output_dim(w, self.kernel(), self.stride, self.padding))
            .ok_or_else(|| {
                Error::Shape(format!(
                    "conv k={} s={} p={} does not fit {h}x{w} input",
                    self.kernel(),
                    self.stride,
                    self.padding
                ))
            })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {} (input {input})",
                self.in_channels(),
                input.c
            )));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels(), h, w))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.data_mut().fill(0.0);
        if let Some(g) = &mut self.grad_bias {
            g.fill(0.0);
        }
    }
}

pub(crate) fn output_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one c×h×w sample into a `(c·k·k) × (ho·wo)` matrix.
fn im2col(src: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a sample.
fn col2im(cols: &[f64], g: &Geometry, dst: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller provides buffers covering the strided m×k, k×n and
    // m×n extents; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn geometry(input: Shape, conv: &Conv2d) -> Result<(Geometry, Shape)> {
    let out = conv.output_shape(input)?;
    Ok((
        Geometry {
            c: input.c,
            h: input.h,
            w: input.w,
            k: conv.kernel(),
            stride: conv.stride,
            pad: conv.padding,
            ho: out.h,
            wo: out.w,
        },
        out,
    ))
}

/// Cross-correlation plus per-output-channel bias.
pub fn conv2d(input: &Raster, conv: &Conv2d) -> Result<Raster> {
    let (g, out_shape) = geometry(input.shape(), conv)?;
    let mut out = Raster::zeros(out_shape);
    let (rows, ncols) = (g.rows(), g.cols());
    let cout = conv.out_channels();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
    for n in 0..out_shape.n {
        let src = input.sample(n);
        let b: &[f64] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut cols);
            &cols
        };
        let dst = out.sample_mut(n);
        gemm(
            cout,
            rows,
            ncols,
            conv.weight.data(),
            (rows as isize, 1),
            b,
            (ncols as isize, 1),
            0.0,
            dst,
        );
        if let Some(bias) = &conv.bias {
            for (oc, plane) in dst.chunks_exact_mut(ncols).enumerate() {
                let bv = bias[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `⟨grad_out, conv2d(input)⟩` with respect to input,
/// weights and bias. The bias gradient is returned even when the layer has
/// no bias term.
pub fn conv2d_grad(input: &Raster, conv: &Conv2d, grad_out: &Raster) -> Result<ConvGrads> {
    let mut weight = Raster::zeros(conv.weight.shape());
    let mut bias = vec![0.0; conv.out_channels()];
    let grad_in = conv2d_backward(input, conv, grad_out, &mut weight, &mut bias, true)?;
    Ok(ConvGrads {
        input: grad_in.expect("input gradient requested"),
        weight,
        bias,
    })
}

/// Accumulates weight/bias gradients into the given buffers and optionally
/// returns the input gradient.
pub fn conv2d_backward(
    input: &Raster,
    conv: &Conv2d,
    grad_out: &Raster,
    grad_weight: &mut Raster,
    grad_bias: &mut [f64],
    want_input: bool,
) -> Result<Option<Raster>> {
    let (g, out_shape) = geometry(input.shape(), conv)?;
    grad_out.expect_shape(out_shape, "conv2d_grad grad_out")?;
    grad_weight.expect_shape(conv.weight.shape(), "conv2d_grad weight buffer")?;
    if grad_bias.len() != conv.out_channels() {
        return Err(Error::Shape("conv2d_grad bias buffer length".into()));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let cout = conv.out_channels();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
    let mut gcols = vec![0.0; rows * ncols];
    let mut grad_in = want_input.then(|| Raster::zeros(input.shape()));
    for n in 0..out_shape.n {
        let gout = grad_out.sample(n);
        for (oc, plane) in gout.chunks_exact(ncols).enumerate() {
            grad_bias[oc] += plane.iter().sum::<f64>();
        }
        let src = input.sample(n);
        let b: &[f64] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut cols);
            &cols
        };
        // grad_w[cout×rows] += gout[cout×ncols] · colsᵀ[ncols×rows]
        gemm(
            cout,
            ncols,
            rows,
            gout,
            (ncols as isize, 1),
            b,
            (1, ncols as isize),
            1.0,
            grad_weight.data_mut(),
        );
        if let Some(gi) = grad_in.as_mut() {
            // gcols[rows×ncols] = Wᵀ[rows×cout] · gout[cout×ncols]
            gemm(
                rows,
                cout,
                ncols,
                conv.weight.data(),
                (1, rows as isize),
                gout,
                (ncols as isize, 1),
                0.0,
                &mut gcols,
            );
            if g.is_pointwise() {
                gi.sample_mut(n).copy_from_slice(&gcols);
            } else {
                col2im(&gcols, &g, gi.sample_mut(n));
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, test_rng, random_raster};

    /// Six-nested-loop reference convolution.
    fn conv_reference(input: &Raster, conv: &Conv2d) -> Raster {
        let s = input.shape();
        let out_shape = conv.output_shape(s).unwrap();
        let k = conv.kernel();
        Raster::from_fn(out_shape, |n, oc, oy, ox| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[oc]);
            for ic in 0..s.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += input.get(n, ic, iy as usize, ix as usize) * conv.weight.get(oc, ic, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_scaled_kernel() {
        let input = Raster::filled(Shape::new(1, 1, 3, 3), 1.0);
        let conv = Conv2d::new(Raster::filled(Shape::new(1, 1, 1, 1), 2.0), Some(vec![0.0]), 1, 0).unwrap();
        let out = conv2d(&input, &conv).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn summation_case() {
        let input = Raster::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let conv = Conv2d::new(Raster::filled(Shape::new(1, 1, 2, 2), 1.0), Some(vec![0.0]), 1, 0).unwrap();
        let out = conv2d(&input, &conv).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn strided_padded_matches_loop_oracle() {
        let mut rng = test_rng(7);
        let input = random_raster(&mut rng, Shape::new(2, 3, 8, 8));
        let w = random_raster(&mut rng, Shape::new(4, 3, 3, 3));
        let b = random_raster(&mut rng, Shape::new(1, 1, 1, 4)).into_vec();
        let conv = Conv2d::new(w, Some(b), 2, 1).unwrap();
        let out = conv2d(&input, &conv).unwrap();
        let reference = conv_reference(&input, &conv);
        assert_eq!(out.shape(), Shape::new(2, 4, 4, 4));
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let conv = Conv2d::new(Raster::zeros(Shape::new(2, 3, 3, 3)), None, 1, 0).unwrap();
        let err = conv2d(&Raster::zeros(Shape::new(1, 2, 5, 5)), &conv).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        assert!(conv2d(&Raster::zeros(Shape::new(1, 3, 2, 2)), &conv).is_err());
        assert!(Conv2d::new(Raster::zeros(Shape::new(1, 1, 3, 3)), None, 0, 0).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = test_rng(1);
        let input = random_raster(&mut rng, Shape::new(2, 2, 5, 5));
        let conv = Conv2d::new(random_raster(&mut rng, Shape::new(3, 2, 3, 3)), Some(vec![0.1, 0.2, 0.3]), 1, 1).unwrap();
        let grads = conv2d_grad(&input, &conv, &Raster::zeros(Shape::new(2, 3, 5, 5))).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let mut rng = test_rng(2);
        let input = random_raster(&mut rng, Shape::new(2, 2, 6, 6));
        let conv = Conv2d::new(random_raster(&mut rng, Shape::new(3, 2, 3, 3)), Some(vec![0.0; 3]), 2, 1).unwrap();
        let gout = random_raster(&mut rng, Shape::new(2, 3, 3, 3));
        let grads = conv2d_grad(&input, &conv, &gout).unwrap();
        for oc in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        s += gout.get(n, oc, y, x);
                    }
                }
            }
            assert!((grads.bias[oc] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = test_rng(3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let input = random_raster(&mut rng, Shape::new(2, 2, 6, 6));
            let conv = Conv2d::new(random_raster(&mut rng, Shape::new(3, 2, k, k)), Some(vec![0.3, -0.2, 0.1]), s, p).unwrap();
            let out_shape = conv.output_shape(input.shape()).unwrap();
            let gout = random_raster(&mut rng, out_shape);
            let grads = conv2d_grad(&input, &conv, &gout).unwrap();

            let err = grad_check(
                |x| {
                    let inp = Raster::from_vec(input.shape(), x.to_vec()).unwrap();
                    conv2d(&inp, &conv).unwrap().dot(&gout).unwrap()
                },
                input.data(),
                grads.input.data(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "input grad rel err {err}");

            let err = grad_check(
                |wv| {
                    let mut c = conv.clone();
                    c.weight = Raster::from_vec(conv.weight.shape(), wv.to_vec()).unwrap();
                    conv2d(&input, &c).unwrap().dot(&gout).unwrap()
                },
                conv.weight.data(),
                grads.weight.data(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "weight grad rel err {err}");
        }
    }

    #[test]
    fn fixed_kernel_check_is_tight() {
        let mut rng = test_rng(5);
        let conv = Conv2d::new(random_raster(&mut rng, Shape::new(2, 2, 3, 3)), None, 1, 1).unwrap();
        let input = random_raster(&mut rng, Shape::new(1, 2, 5, 5));
        let gout = random_raster(&mut rng, Shape::new(1, 2, 5, 5));
        let grads = conv2d_grad(&input, &conv, &gout).unwrap();
        let err = grad_check(
            |x| conv2d(&Raster::from_vec(input.shape(), x.to_vec()).unwrap(), &conv).unwrap().dot(&gout).unwrap(),
            input.data(),
            grads.input.data(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn linear_in_input() {
        let mut rng = test_rng(4);
        let conv = Conv2d::new(random_raster(&mut rng, Shape::new(2, 2, 3, 3)), None, 1, 1).unwrap();
        let x = random_raster(&mut rng, Shape::new(1, 2, 5, 5));
        let y = random_raster(&mut rng, Shape::new(1, 2, 5, 5));
        let (a, b) = (0.7, -1.3);
        let mut comb = x.scale(a);
        comb.axpy(b, &y).unwrap();
        let lhs = conv2d(&comb, &conv).unwrap();
        let mut rhs = conv2d(&x, &conv).unwrap().scale(a);
        rhs.axpy(b, &conv2d(&y, &conv).unwrap()).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }
}

use crate::error::{Error, Result};

use super::{Raster, Shape};

/// Winning flat input index for every pooled output entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Argmax {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub indices: Vec<usize>,
}

/// 2×2 non-overlapping max pooling. Ties go to the first entry of the window
/// in row-major order.
pub fn maxpool2(input: &Raster) -> Result<(Raster, Argmax)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Shape(format!("maxpool2 needs even spatial dims, got {s}")));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut indices = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let first = base + 2 * oy * s.w + 2 * ox;
                let mut best = first;
                for idx in [first + 1, first + s.w, first + s.w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Raster::from_vec(out_shape, out)?,
        Argmax {
            input_shape: s,
            output_shape: out_shape,
            indices,
        },
    ))
}

/// Routes each output gradient to the winning input position.
pub fn maxpool2_grad(argmax: &Argmax, grad_out: &Raster) -> Result<Raster> {
    if grad_out.shape() != argmax.output_shape || argmax.indices.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool2_grad: argmax is for output {}, grad_out is {}",
            argmax.output_shape,
            grad_out.shape()
        )));
    }
    let mut grad_in = Raster::zeros(argmax.input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(grad_out.data()) {
        gi[idx] += g;
    }
    Ok(grad_in)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(input: &Raster) -> Raster {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    Raster::from_fn(out_shape, |n, c, y, x| input.get(n, c, y / 2, x / 2))
}

pub fn upsample2_grad(grad_out: &Raster) -> Result<Raster> {
    let s = grad_out.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Shape(format!("upsample2_grad needs even spatial dims, got {s}")));
    }
    let mut grad_in = Raster::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = grad_in.index(n, c, y / 2, x / 2);
                    grad_in.data_mut()[i] += grad_out.get(n, c, y, x);
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, random_raster, test_rng};

    fn square(values: [f64; 4]) -> Raster {
        Raster::from_vec(Shape::new(1, 1, 2, 2), values.to_vec()).unwrap()
    }

    #[test]
    fn picks_maximum() {
        let (out, arg) = maxpool2(&square([1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg.indices, vec![3]);
    }

    #[test]
    fn ties_break_to_first_index() {
        let input = Raster::filled(Shape::new(1, 2, 4, 4), 0.5);
        let (out, arg) = maxpool2(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let expected: Vec<usize> = (0..2)
            .flat_map(|c| (0..2).flat_map(move |oy| (0..2).map(move |ox| c * 16 + 2 * oy * 4 + 2 * ox)))
            .collect();
        assert_eq!(arg.indices, expected);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool2(&Raster::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = test_rng(11);
        let input = random_raster(&mut rng, Shape::new(1, 2, 6, 6));
        let (out, _) = maxpool2(&input).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(input.get(0, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    assert_eq!(out.get(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn grad_routes_to_winner() {
        let (_, arg) = maxpool2(&square([1.0, 2.0, 3.0, 4.0])).unwrap();
        let g = maxpool2_grad(&arg, &Raster::filled(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        let z = maxpool2_grad(&arg, &Raster::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_argmax_rejected() {
        let (_, arg) = maxpool2(&Raster::zeros(Shape::new(1, 1, 4, 4))).unwrap();
        assert!(maxpool2_grad(&arg, &Raster::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn grad_matches_finite_differences_at_untied_points() {
        let mut rng = test_rng(12);
        let input = random_raster(&mut rng, Shape::new(2, 2, 6, 6));
        let gout = random_raster(&mut rng, Shape::new(2, 2, 3, 3));
        let (_, arg) = maxpool2(&input).unwrap();
        let g = maxpool2_grad(&arg, &gout).unwrap();
        let err = grad_check(
            |x| {
                let r = Raster::from_vec(input.shape(), x.to_vec()).unwrap();
                maxpool2(&r).unwrap().0.dot(&gout).unwrap()
            },
            input.data(),
            g.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn upsample_grad_is_adjoint() {
        let mut rng = test_rng(13);
        let x = random_raster(&mut rng, Shape::new(1, 2, 3, 3));
        let g = random_raster(&mut rng, Shape::new(1, 2, 6, 6));
        let lhs = upsample2(&x).dot(&g).unwrap();
        let rhs = x.dot(&upsample2_grad(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

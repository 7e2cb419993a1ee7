use crate::error::{Error, Result};

use super::Raster;

fn check_slope(slope: f64) -> Result<()> {
    // slope 1 is accepted: it degenerates to the identity.
    if !(0.0..=1.0).contains(&slope) {
        return Err(Error::InvalidArgument(format!("leaky relu slope {slope} outside [0, 1]")));
    }
    Ok(())
}

pub fn leaky_relu(input: &Raster, slope: f64) -> Result<Raster> {
    check_slope(slope)?;
    Ok(input.map(|x| if x > 0.0 { x } else { slope * x }))
}

/// Derivative is 1 for x > 0 and `slope` otherwise (including x = 0).
pub fn leaky_relu_grad(input: &Raster, slope: f64, grad_out: &Raster) -> Result<Raster> {
    check_slope(slope)?;
    grad_out.expect_shape(input.shape(), "leaky_relu_grad")?;
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv *= slope;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, test_rng};
    use crate::tensor::Shape;
    use rand::Rng;

    #[test]
    fn small_slope() {
        let x = Raster::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = leaky_relu(&x, 0.01).unwrap();
        assert_eq!(y.data(), &[-0.01, 0.0, 2.0]);
        let g = leaky_relu_grad(&x, 0.01, &Raster::filled(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.01, 0.01, 1.0]);
    }

    #[test]
    fn unit_slope_is_identity() {
        let x = Raster::from_vec(Shape::new(1, 1, 1, 4), vec![-3.0, -0.5, 0.0, 7.0]).unwrap();
        assert_eq!(leaky_relu(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn invalid_slope_rejected() {
        let x = Raster::zeros(Shape::new(1, 1, 1, 1));
        assert!(leaky_relu(&x, -0.1).is_err());
        assert!(leaky_relu(&x, 1.5).is_err());
    }

    #[test]
    fn grad_matches_finite_differences_away_from_zero() {
        let mut rng = test_rng(21);
        let shape = Shape::new(2, 3, 4, 4);
        let data: Vec<f64> = (0..shape.len())
            .map(|_| {
                let m: f64 = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let x = Raster::from_vec(shape, data).unwrap();
        let gout = crate::tensor::gradcheck::random_raster(&mut rng, shape);
        let g = leaky_relu_grad(&x, 0.2, &gout).unwrap();
        let err = grad_check(
            |v| leaky_relu(&Raster::from_vec(shape, v.to_vec()).unwrap(), 0.2).unwrap().dot(&gout).unwrap(),
            x.data(),
            g.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

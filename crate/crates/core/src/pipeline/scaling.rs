//! The boundary between the VAE's `[0, 1]` domain and the refiner's `[-1, 1]`.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Tolerated overshoot of the source range before a value is rejected.
pub const GUARD_BAND: f64 = 0.01;

fn check_range(x: &Tensor, lo: f64, hi: f64, what: &str) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(**v >= lo - GUARD_BAND && **v <= hi + GUARD_BAND)) {
        return Err(Error::data(format!("{what}: value {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// `x -> 2x - 1`.
pub fn scale_to_ddpm(x01: &Tensor) -> Result<Tensor> {
    check_range(x01, 0.0, 1.0, "scale_to_ddpm")?;
    Ok(x01.map(|v| 2.0 * v - 1.0))
}

/// `x -> (x + 1) / 2`.
pub fn scale_to_vae(x11: &Tensor) -> Result<Tensor> {
    check_range(x11, -1.0, 1.0, "scale_to_vae")?;
    Ok(x11.map(|v| (v + 1.0) / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let x = Tensor::from_vec(vec![0.0, 0.5, 1.0]);
        assert_eq!(scale_to_ddpm(&x).unwrap().data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(scale_to_vae(&scale_to_ddpm(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn out_of_range_is_a_data_error() {
        assert!(matches!(scale_to_ddpm(&Tensor::from_vec(vec![1.2])), Err(Error::Data(_))));
        assert!(matches!(scale_to_vae(&Tensor::from_vec(vec![-1.5])), Err(Error::Data(_))));
        assert!(scale_to_ddpm(&Tensor::from_vec(vec![1.005])).is_ok());
        assert!(scale_to_ddpm(&Tensor::from_vec(vec![f64::NAN])).is_err());
    }
}

use crate::error::{Result, SonicError};
use crate::fields::Field;
use crate::scalar::Scalar;

use super::{ClassId, VelocityModel};

/// `v(x, s) = c` everywhere. Its denoiser is `x_T - c` and its Jacobian is
/// zero.
#[derive(Clone, Debug)]
pub struct ConstantVelocity<T> {
    value: Field<T>,
}

impl<T: Scalar> ConstantVelocity<T> {
    pub fn new(value: Field<T>) -> Self {
        ConstantVelocity { value }
    }
}

impl<T: Scalar> VelocityModel<T> for ConstantVelocity<T> {
    fn eval(&self, x: &Field<T>, _s: T, _class: ClassId) -> Result<Field<T>> {
        x.ensure_same_shape(&self.value, "constant velocity")?;
        Ok(self.value.clone())
    }

    fn vjp_input(
        &self,
        x: &Field<T>,
        _s: T,
        _class: ClassId,
        cotangent: &Field<T>,
    ) -> Result<Field<T>> {
        x.ensure_same_shape(cotangent, "constant velocity vjp")?;
        Field::zeros(x.shape())
    }
}

/// Exact flow-matching velocity for a point-mass data distribution at `c`:
/// `v(x, s) = (x - c) / s`. Trajectories are the straight lines
/// `x(s) = c + s (x_T - c)`.
#[derive(Clone, Debug)]
pub struct DiracVelocity<T> {
    target: Field<T>,
}

impl<T: Scalar> DiracVelocity<T> {
    pub fn new(target: Field<T>) -> Self {
        DiracVelocity { target }
    }

    pub fn target(&self) -> &Field<T> {
        &self.target
    }
}

fn reject_zero_time<T: Scalar>(s: T) -> Result<()> {
    if s == T::zero() {
        return Err(SonicError::InvalidTime {
            value: 0.0,
            range: "(0, 1] (the point-mass flow is singular at s = 0)",
        });
    }
    Ok(())
}

impl<T: Scalar> VelocityModel<T> for DiracVelocity<T> {
    fn eval(&self, x: &Field<T>, s: T, _class: ClassId) -> Result<Field<T>> {
        reject_zero_time(s)?;
        x.zip_map(&self.target, |a, c| (a - c) / s)
    }

    fn vjp_input(
        &self,
        x: &Field<T>,
        s: T,
        _class: ClassId,
        cotangent: &Field<T>,
    ) -> Result<Field<T>> {
        reject_zero_time(s)?;
        x.ensure_same_shape(cotangent, "dirac velocity vjp")?;
        Ok(cotangent.scale(T::one() / s))
    }
}

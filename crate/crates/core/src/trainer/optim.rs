//! SGD with momentum for the student and the EMA update of the teacher.

use crate::error::{Error, Result};
use crate::nn::ModelState;

/// Classical momentum SGD: `v <- momentum * v + g + wd * θ`, `θ <- θ - lr * v`.
///
/// Non-finite gradients abort before any parameter is touched.
pub fn sgd_step(
    params: &mut ModelState,
    grads: &ModelState,
    velocity: &mut ModelState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.ensure_compatible(grads)?;
    params.ensure_compatible(velocity)?;
    if grads.flat_values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
        });
    }
    for ((p, g), v) in params
        .params_mut()
        .iter_mut()
        .zip(grads.params())
        .zip(velocity.params_mut())
    {
        for ((theta, &grad), vel) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.value.data())
            .zip(v.value.data_mut())
        {
            *vel = momentum * *vel + grad + weight_decay * *theta;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// `θ_t <- γ θ_t + (1 - γ) θ_s` for every parameter, in place.
pub fn ema_update_in_place(teacher: &mut ModelState, student: &ModelState, gamma: f64) -> Result<()> {
    teacher.ensure_compatible(student)?;
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = gamma * *a + (1.0 - gamma) * b;
        }
    }
    Ok(())
}

pub fn ema_update(teacher: &ModelState, student: &ModelState, gamma: f64) -> Result<ModelState> {
    let mut next = teacher.clone();
    ema_update_in_place(&mut next, student, gamma)?;
    Ok(next)
}

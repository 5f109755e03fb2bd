use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient. Fails on the first non-finite gradient, naming its parameter.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", p.name),
                    index: g.first_non_finite().unwrap_or(0),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(EPSILON);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            *w = *w - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

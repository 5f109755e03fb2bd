use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Analytic and central-difference values at `worst_index`.
    pub worst_pair: (f64, f64),
    /// ReLU inputs that sat exactly on the kink; the check is unreliable when nonzero.
    pub kinks: usize,
}

impl GradCheck {
    pub fn nondifferentiable(&self) -> bool {
        self.kinks > 0
    }
}

fn eval<T, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = f(&mut tape, xv)?;
    let t = tape.value(y);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0].f64())
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_at<T, F>(f: F, x: &Tensor<T>, step: f64, coords: &[usize]) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let kinks = tape.kinks();
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if let Some(i) = analytic.first_non_finite() {
        return Err(Error::NonFinite {
            what: "analytic gradient".into(),
            index: i,
        });
    }

    let mut worst = (0.0f64, 0usize);
    let mut pair = (0.0, 0.0);
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + step);
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = T::of(orig.f64() - step);
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                what: "central difference".into(),
                index: i,
            });
        }
        let a = analytic.data()[i].f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > worst.0 {
            worst = (rel, i);
            pair = (a, numeric);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        worst_pair: pair,
        kinks,
    })
}

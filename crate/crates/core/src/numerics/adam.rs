use super::{NumericsError, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for every parameter, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: T::lit(ADAM_BETA1),
            beta2: T::lit(ADAM_BETA2),
            eps: T::lit(ADAM_EPS),
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(
        step: u64,
        first: Vec<Vec<T>>,
        second: Vec<Vec<T>>,
    ) -> Result<Self, NumericsError> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(NumericsError::Shape(
                "first and second moments disagree in shape".into(),
            ));
        }
        Ok(Self {
            step,
            first,
            second,
            ..Self::new(&[])
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

/// One bias-corrected Adam update using the gradient stored in each tensor's grad slot.
///
/// Every gradient is validated before any parameter moves, so a NaN aborts the
/// step without a partial update.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<(), NumericsError> {
    if params.len() != state.first.len() {
        return Err(NumericsError::Shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (k, (name, p)) in params.iter().enumerate() {
        let grad = p
            .grad()
            .ok_or_else(|| NumericsError::NonFinite(format!("parameter {name} has no gradient")))?;
        if grad.len() != state.first[k].len() {
            return Err(NumericsError::Shape(format!(
                "parameter {name}: gradient length {} but optimizer slot {}",
                grad.len(),
                state.first[k].len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NumericsError::NonFinite(format!(
                "parameter {name}: gradient element {i} is {}",
                grad[i]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("validated above").to_vec();
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

//! Central finite differences against analytic gradients.

use super::{Gradients, ParamId, ParamStore, Tensor};

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude, to spot vacuous checks.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Central difference `(L(p + h) - L(p - h)) / 2h` for every element of one
/// parameter. The parameter is restored bit-exactly afterwards.
pub fn finite_difference<E>(
    store: &mut ParamStore,
    id: ParamId,
    step: f64,
    loss: &mut impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<Tensor, E> {
    let shape = store.get(id).tensor.shape().to_vec();
    let n = store.get(id).tensor.numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = store.get(id).tensor.data()[i];
        store.get_mut(id).tensor.data_mut()[i] = orig + step;
        let up = loss(store);
        store.get_mut(id).tensor.data_mut()[i] = orig - step;
        let down = loss(store);
        store.get_mut(id).tensor.data_mut()[i] = orig;
        *slot = (up? - down?) / (2.0 * step);
    }
    Ok(Tensor::new(shape, out).expect("shape preserved"))
}

/// Compare `analytic` against central differences for every trainable
/// parameter, in store order.
pub fn check_trainable<E>(
    store: &mut ParamStore,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<GradcheckReport, E> {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numeric = finite_difference(store, id, step, &mut loss)?;
        let a = analytic.get_or_zeros(store, id);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            numel: a.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_abs_grad: 0.0,
        };
        for (&x, &f) in a.data().iter().zip(numeric.data()) {
            check.max_rel_err = check.max_rel_err.max(relative_error(x, f));
            check.max_abs_err = check.max_abs_err.max((x - f).abs());
            check.max_abs_grad = check.max_abs_grad.max(x.abs());
        }
        params.push(check);
    }
    Ok(GradcheckReport { step, tolerance, params })
}

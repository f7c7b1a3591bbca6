//! Central finite-difference verification of tape gradients (64-bit only).

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradEntry>,
    pub entries: Vec<GradEntry>,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn summarize(entries: Vec<GradEntry>) -> GradCheckReport {
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
        .cloned();
    GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, GradEntry::rel_error),
        worst,
        entries,
    }
}

/// Checks every coordinate of every parameter in `store`.
///
/// `program` builds a scalar loss on the supplied tape from the current
/// parameter values. Gradients already in `store` are discarded.
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = program(&mut tape, store)?;
        tape.value(loss).item()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = program(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut entries = Vec::new();
    for p in 0..store.len() {
        let id = super::ParamId(p);
        let analytic = store.get(id).grad.clone();
        let name = store.get(id).name.clone();
        for i in 0..analytic.numel() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            entries.push(GradEntry {
                param: name.clone(),
                index: i,
                analytic: analytic.data()[i],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(summarize(entries))
}

/// Checks the gradient with respect to a non-parameter input tensor.
pub fn input_grad_check<F>(x: &Tensor<f64>, h: f64, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let loss = program(&mut tape, xv)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = program(&mut tape, xv)?;
    let grads = tape.backward(loss, &mut ParamStore::new())?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut probe = x.clone();
    let mut entries = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        entries.push(GradEntry {
            param: "input".into(),
            index: i,
            analytic: analytic.data()[i],
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(summarize(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_tight() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("theta", Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.9]).unwrap())
            .unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, store| {
            let t = tape.param(store, super::super::ParamId(0));
            let sq = tape.square(t);
            let s = tape.scale(sq, 0.5);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn disconnected_parameter_has_zero_difference() {
        let mut store = ParamStore::<f64>::new();
        store.add("used", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.add("unused", Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, store| {
            let t = tape.param(store, super::super::ParamId(0));
            let sq = tape.square(t);
            Ok(tape.sum(sq))
        })
        .unwrap();
        for e in report.entries.iter().filter(|e| e.param == "unused") {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() < 1e-9);
        }
    }
}

//! Finite-difference validation of the tape's analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::store::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Central-difference check of `d loss / d theta` against the tape.
///
/// `build` must construct the same scalar loss from the current store
/// contents every time it is called. `samples_per_param` coordinates of every
/// parameter are probed (all of them if the parameter is smaller).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    build: F,
    samples_per_param: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.backward(loss, store.len())
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.scalar(loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for pid in store.ids().collect::<Vec<ParamId>>() {
        let n = store.get(pid).len();
        let indices: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..samples_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for idx in indices {
            let a = analytic
                .get(pid)
                .map(|g| g.as_slice().expect("gradients are contiguous")[idx])
                .unwrap_or(0.0);
            let orig = store.get(pid).as_slice().unwrap()[idx];
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig + h;
            let f_plus = eval(store);
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig - h;
            let f_minus = eval(store);
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(pid).to_string(), idx, a, numeric));
            }
        }
    }
    report
}

//! Central finite differences over parameters, shared by unit tests and the
//! acceptance suite.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamId, ParamStore};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Picks `count` distinct `(param, element)` coordinates uniformly over all scalars.
pub fn sample_coordinates(store: &ParamStore, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let total = store.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    let mut offset = 0;
    let mut it = picks.into_iter().peekable();
    for (id, _, value) in store.iter() {
        while let Some(&p) = it.peek() {
            if p < offset + value.len() {
                out.push((id, p - offset));
                it.next();
            } else {
                break;
            }
        }
        offset += value.len();
    }
    out
}

/// `(f(w + h) - f(w - h)) / 2h` for one scalar, restoring the parameter after.
pub fn central_difference<F>(store: &mut ParamStore, id: ParamId, index: usize, step: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + step;
    let plus = f(store);
    store.get_mut(id).data_mut()[index] = orig - step;
    let minus = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}

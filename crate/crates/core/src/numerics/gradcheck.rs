use serde::Serialize;

use super::{Gradients, ParamId, ParamStore, Rng};

/// Which coordinates of each trainable tensor get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum CoordinateSelection {
    All,
    /// Up to `per_group` coordinates per tensor, drawn without replacement.
    Sample { per_group: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Analytic and numeric values at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn coordinates_checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

/// Compare `analytic` against central differences of `f` around the current
/// parameter values. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` must be deterministic; every perturbed value is restored bit-exactly.
pub fn finite_difference_check<E>(
    store: &mut ParamStore,
    analytic: &Gradients,
    eps: f64,
    selection: CoordinateSelection,
    mut f: impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<GradCheckReport, E> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut rng = match selection {
        CoordinateSelection::Sample { seed, .. } => Some(Rng::new(seed)),
        CoordinateSelection::All => None,
    };
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match (selection, rng.as_mut()) {
            (CoordinateSelection::Sample { per_group, .. }, Some(rng)) if per_group < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(per_group);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        let mut worst_index = None;
        let (mut worst_a, mut worst_n, mut max_abs) = (0.0, 0.0, 0.0f64);
        for &i in &coords {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + eps;
            let plus = f(store);
            store.value_mut(id).data_mut()[i] = original - eps;
            let minus = f(store);
            store.value_mut(id).data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            let rel = relative_error(a, numeric);
            max_abs = max_abs.max((a - numeric).abs());
            if rel > worst || worst_index.is_none() {
                worst = worst.max(rel);
                worst_index = Some(i);
                (worst_a, worst_n) = (a, numeric);
            }
        }
        groups.push(GroupReport {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
            worst_index,
            worst_analytic: worst_a,
            worst_numeric: worst_n,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let max_abs_error = groups.iter().map(|g| g.max_abs_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        groups,
        max_rel_error,
        max_abs_error,
    })
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

use std::collections::BTreeMap;

use super::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over every parameter.
    pub max_rel_error: f64,
    /// Largest relative error within each parameter group.
    pub by_group: BTreeMap<ParamGroup, f64>,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Groups whose error reaches `tol`.
    pub fn failing_groups(&self, tol: f64) -> Vec<ParamGroup> {
        self.by_group
            .iter()
            .filter(|(_, &e)| !(e < tol))
            .map(|(&g, _)| g)
            .collect()
    }
}

fn eval_loss<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = loss(&g, store)?;
    let v = g.item(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Reverse-mode gradient of `loss` for every parameter, in store order.
/// Parameters the loss does not touch get zeros.
pub fn analytic_gradients<F>(store: &ParamStore, loss: F) -> Result<Vec<Tensor>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = loss(&g, store)?;
    if !g.item(out).is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", g.item(out))));
    }
    let grads = g.backward(out)?;
    let mut result: Vec<Tensor> = store
        .iter()
        .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
        .collect();
    for (id, t) in grads.params() {
        result[id.index()].add_assign(t);
    }
    Ok(result)
}

/// Central finite differences `(f(p+h) - f(p-h)) / 2h`, one entry at a time.
pub fn numeric_gradients<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<Vec<Tensor>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut result = Vec::with_capacity(ids.len());
    for id in ids {
        let (r, c) = store.value(id).shape();
        let mut fd = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = store.value(id).data()[k];
            store.param_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval_loss(store, &loss);
            store.param_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval_loss(store, &loss);
            store.param_mut(id).value.data_mut()[k] = orig;
            fd.data_mut()[k] = (plus? - minus?) / (2.0 * h);
        }
        result.push(fd);
    }
    Ok(result)
}

/// Denominator floor for relative errors. Central differences with a 1e-5 step
/// carry about 1e-11 absolute noise, so smaller gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Elementwise relative error `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn compare_gradients(store: &ParamStore, analytic: &[Tensor], numeric: &[Tensor]) -> Result<GradCheckReport> {
    if analytic.len() != store.len() || numeric.len() != store.len() {
        return Err(Error::Shape("gradient lists do not match the parameter store".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        by_group: BTreeMap::new(),
        worst: None,
        checked: 0,
    };
    for ((p, a), n) in store.iter().zip(analytic).zip(numeric) {
        if a.shape() != n.shape() || a.shape() != p.value.shape() {
            return Err(Error::Shape(format!("gradient shape for `{}`", p.name)));
        }
        let group = report.by_group.entry(p.group).or_insert(0.0);
        for (k, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(REL_ERROR_FLOOR);
            let err = (x - y).abs() / denom;
            let err = if err.is_nan() { f64::INFINITY } else { err };
            *group = group.max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.name.clone(), k));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the reverse-mode gradient of `loss` against central differences
/// with step `h`.
///
/// ```
/// use ctpp::nn::{grad_check, ParamGroup, ParamStore, Tensor};
///
/// let mut store = ParamStore::new();
/// store.register("p", ParamGroup::Other, Tensor::row_vector(&[0.5, -1.5, 2.0])).unwrap();
/// let report = grad_check(&mut store, 1e-5, |g, s| {
///     let p = g.param(s, s.id("p").unwrap());
///     Ok(g.scale(g.sum(g.square(p)), 0.5))
/// })
/// .unwrap();
/// assert!(report.max_rel_error < 1e-8);
/// ```
pub fn grad_check<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss)?;
    let numeric = numeric_gradients(store, h, &loss)?;
    compare_gradients(store, &analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{PairMode, ParamId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_param(store: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> ParamId {
        store.register_uniform(name, ParamGroup::Other, r, c, 1.0, rng).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store
            .register("p", ParamGroup::Other, Tensor::row_vector(&[0.5, -1.5, 2.0, 1e-3]))
            .unwrap();
        let report = grad_check(&mut store, 1e-5, |g, s| {
            let p = g.param(s, s.id("p").unwrap());
            Ok(g.scale(g.sum(g.square(p)), 0.5))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = ParamStore::new();
        store.register("p", ParamGroup::Other, Tensor::row_vector(&[0.5, -1.5])).unwrap();
        let loss = |g: &Graph, s: &ParamStore| {
            let p = g.param(s, s.id("p").unwrap());
            Ok(g.scale(g.sum(g.square(p)), 0.5))
        };
        let mut analytic = analytic_gradients(&store, loss).unwrap();
        analytic[0].data_mut()[1] += 1.0;
        let numeric = numeric_gradients(&mut store, 1e-5, loss).unwrap();
        let report = compare_gradients(&store, &analytic, &numeric).unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst, Some(("p".to_string(), 1)));
        assert_eq!(report.failing_groups(1e-4), vec![ParamGroup::Other]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.register("p", ParamGroup::Other, Tensor::row_vector(&[-1.0])).unwrap();
        let r = grad_check(&mut store, 1e-5, |g, s| Ok(g.sum(g.ln(g.param(s, s.id("p").unwrap())))));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    /// Every primitive on the tape against central differences, ten seeds.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            let a = random_param(&mut s, "a", 3, 4, &mut rng);
            let b = random_param(&mut s, "b", 4, 2, &mut rng);
            let c = random_param(&mut s, "c", 3, 4, &mut rng);
            let row = random_param(&mut s, "row", 1, 4, &mut rng);
            let col = random_param(&mut s, "col", 3, 1, &mut rng);
            let gain = random_param(&mut s, "gain", 1, 4, &mut rng);
            let bias = random_param(&mut s, "bias", 1, 4, &mut rng);
            let kfull = random_param(&mut s, "kfull", 3, 16, &mut rng);
            let kdw = random_param(&mut s, "kdw", 2, 4, &mut rng);
            let pick: Vec<(usize, usize, f64)> = (0..5)
                .map(|_| (rng.random_range(0..3), rng.random_range(0..4), rng.random_range(-1.0..1.0)))
                .collect();
            let mask = vec![true, false, true];

            let report = grad_check(&mut s, 1e-5, |g, s| {
                let p = |id| g.param(s, id);
                let (a, b, c) = (p(a), p(b), p(c));
                let mm = g.matmul(a, b)?;
                let ab = g.add(a, c)?;
                let sb = g.sub(ab, g.mul(a, c)?)?;
                let r = g.add_row(sb, p(row))?;
                let rc = g.add_col(r, p(col))?;
                let mc = g.mul_col(rc, p(col))?;
                let sn = g.sin(g.scale(mc, 0.7));
                let ex = g.exp(g.scale(sn, 0.5));
                let th = g.tanh(g.add_scalar(ex, -1.0));
                let sg = g.sigmoid(th);
                let ln = g.ln(g.add_scalar(g.square(sg), 0.1));
                let cl = g.clamp(ln, -1.5, 10.0);
                let ls = g.log_softmax(cl);
                let lse = g.logsumexp(g.scale(a, 2.0));
                let ln_ = g.layer_norm(c, p(gain), p(bias), 1e-5)?;
                let cat = g.concat_cols(&[ls, mm, lse])?;
                let cat2 = g.concat_rows(&[ln_, g.scale(c, -1.0)])?;
                let gat = g.gather_rows(cat2, vec![5, 0, 0, 3])?;
                let sel = g.select_rows(ln_, c, mask.clone())?;
                let conv = g.pair_conv(p(kfull), sel, vec![(1, 0), (2, 0), (2, 1)], PairMode::Full)?;
                let conv2 = g.pair_conv(p(kdw), a, vec![(0, 2), (0, 1)], PairMode::Depthwise)?;
                let picked = g.pick(cat, pick.clone())?;
                let t1 = g.sum(g.square(gat));
                let t2 = g.sum(g.mul(conv, conv2)?);
                let t3 = g.add(picked, t1)?;
                g.add(t3, t2)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}

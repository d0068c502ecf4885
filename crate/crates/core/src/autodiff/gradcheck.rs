use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{NodeId, Tape};

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.shape() != [1, 1] {
        return Err(Error::shape("grad_check", "loss is not scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check objective".into(),
        });
    }
    Ok(v)
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// over every entry of every parameter in `store`.
pub fn grad_check<F>(f: F, store: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Invalid(format!("finite-difference step {step} not in (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.gradients(loss)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let analytic = grads.dense(name, store)?;
        for k in 0..analytic.len() {
            let original = store.value(name)?.as_slice()[k];
            probe.get_mut(name)?.value.as_mut_slice()[k] = original + step;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.value.as_mut_slice()[k] = original - step;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.value.as_mut_slice()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), k));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;
    use crate::tensor::Tensor;

    #[test]
    fn squared_norm_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert(
                "theta",
                Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap(),
                Init::Given,
            )
            .unwrap();
        let report = grad_check(
            |tape, s| {
                let t = tape.param(s, "theta")?;
                let sq = tape.mul(t, t)?;
                tape.sum(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_relative_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn step_out_of_range_rejected() {
        let store = ParamStore::new();
        let f = |tape: &mut Tape, _: &ParamStore| tape.constant(Tensor::scalar(1.0));
        assert!(grad_check(f, &store, 0.0).is_err());
        assert!(grad_check(f, &store, 0.1).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut store = ParamStore::new();
        let a = Tensor::from_rows(&[
            vec![2.0, 0.3, -0.1],
            vec![0.2, 1.5, 0.4],
            vec![-0.3, 0.1, 1.8],
        ])
        .unwrap();
        store.insert("a", a, Init::Given).unwrap();
        store
            .insert("v", Tensor::row_vector(&[0.4, -0.7, 0.9]), Init::Given)
            .unwrap();
        store.insert("emb", Tensor::from_fn(4, 3, |i, j| 0.1 * (i as f64) - 0.2 * j as f64 + 0.05), Init::Given).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<NodeId> {
            let a = tape.param(s, "a")?;
            let v = tape.param(s, "v")?;
            let e = tape.gather(s, "emb", &[2, 0, 2])?;
            let inv = tape.inverse(a)?;
            let ld = tape.logdet(a)?;
            let t = tape.transpose(inv)?;
            let m = tape.matmul(e, t)?;
            let m = tape.add(m, v)?;
            let m = tape.tanh(m)?;
            let sm = tape.softmax_rows(m)?;
            let sg = tape.sigmoid(m)?;
            let d = tape.div(sm, sg)?;
            let ex = tape.exp(d)?;
            let lg = tape.log(ex)?;
            let rs = tape.row_sums(lg)?;
            let cs = tape.col_sums(sg)?;
            let cat = tape.concat_cols(&[cs, v])?;
            let sl = tape.slice(cat, (0, 1), (1, 5))?;
            let cl = tape.clamp(sl, -0.5, 0.8)?;
            let mf = tape.masked_fill(cl, &[false, true, false, false], 3.0)?;
            let r = tape.relu(mf)?;
            let stacked = tape.concat_rows(&[r, r, r])?;
            let p = tape.mul(stacked, rs)?;
            let p = tape.sub(p, ld)?;
            let p = tape.scale(p, 0.7)?;
            let p = tape.add_scalar(p, 1.0)?;
            let sq = tape.mul(p, p)?;
            tape.sum(sq)
        };
        let report = grad_check(f, &store, 1e-5).unwrap();
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }
}

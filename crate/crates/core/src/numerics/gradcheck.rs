//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls the forward closure, so it stays
//! independent of the backward rules it is used to verify.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var, NORM_EPS};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, since FD round-off (~1e-11 at h = 1e-5) dominates below it.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Central difference of `f` with respect to a single scalar of `id`.
pub fn numeric_partial<F>(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    f: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + h;
    let plus = f(store);
    store.get_mut(id).data_mut()[index] = orig - h;
    let minus = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares the gradients produced by `backward` (which must populate the
/// store's gradient buffers) against central differences of `forward` for
/// every scalar of every listed parameter.
pub fn check<F, B>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut forward: F,
    mut backward: B,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    B: FnMut(&mut ParamStore) -> Result<()>,
{
    store.zero_grads();
    backward(store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    store.zero_grads();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).len() {
            let num = numeric_partial(store, id, j, h, &mut forward)?;
            let ana = analytic[k][j];
            let err = relative_error(ana, num);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
                report.analytic = ana;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

/// Builds a scalar on a fresh tape from the parameters in `store`.
type Build = dyn Fn(&mut Tape, &ParamStore, &[ParamId]) -> Result<Var>;

/// Checks `build` against central differences over every scalar in `store`.
pub fn check_scalar(store: &mut ParamStore, build: &Build) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = store.ids().collect();
    let fwd_ids = ids.clone();
    check(
        store,
        &ids,
        DEFAULT_STEP,
        |s| {
            let mut tape = Tape::new();
            let out = build(&mut tape, s, &fwd_ids)?;
            Ok(tape.scalar_value(out))
        },
        |s| {
            let mut tape = Tape::new();
            let out = build(&mut tape, s, &ids)?;
            tape.backward(out, s)
        },
    )
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// One finite-difference check per differentiable tape op (related ops
/// share a case), with inputs drawn uniformly from `[-1.5, 1.5]` under
/// `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    type Case = (&'static str, Vec<Vec<usize>>, Box<Build>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.param(s, ids[1]);
                let c = t.matmul(a, b)?;
                weighted_sum(t, c, 0)
            }),
        ),
        (
            "transpose",
            vec![vec![3, 2]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.transpose(a);
                weighted_sum(t, b, 1)
            }),
        ),
        (
            "add/sub/mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.param(s, ids[1]);
                let c = t.add(a, b)?;
                let d = t.sub(c, b)?;
                let e = t.mul(d, b)?;
                weighted_sum(t, e, 2)
            }),
        ),
        (
            "add_row/mul_row",
            vec![vec![3, 4], vec![4], vec![1, 4]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let r = t.param(s, ids[1]);
                let q = t.param(s, ids[2]);
                let b = t.add_row(a, r)?;
                let c = t.mul_row(b, q)?;
                weighted_sum(t, c, 3)
            }),
        ),
        (
            "scale/add_scalar",
            vec![vec![5]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.scale(a, -1.7);
                let c = t.add_scalar(b, 0.3);
                weighted_sum(t, c, 4)
            }),
        ),
        (
            "leaky_relu",
            vec![vec![2, 5]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.leaky_relu(a, 0.2);
                weighted_sum(t, b, 5)
            }),
        ),
        (
            "relu",
            vec![vec![2, 5]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.relu(a);
                weighted_sum(t, b, 6)
            }),
        ),
        (
            "sin/cos",
            vec![vec![6]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.sin(a);
                let c = t.cos(b);
                weighted_sum(t, c, 7)
            }),
        ),
        (
            "recip",
            vec![vec![4]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.add_scalar(a, 3.0);
                let c = t.recip(b);
                weighted_sum(t, c, 8)
            }),
        ),
        (
            "ln_floor",
            vec![vec![4]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.add_scalar(a, 2.0);
                let c = t.ln_floor(b, 1e-12);
                weighted_sum(t, c, 9)
            }),
        ),
        (
            "neg_log_sigmoid",
            vec![vec![6]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.scale(a, 4.0);
                let c = t.neg_log_sigmoid(b);
                weighted_sum(t, c, 10)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.softmax(a)?;
                weighted_sum(t, b, 11)
            }),
        ),
        (
            "row_l2_normalize",
            vec![vec![3, 4]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.row_l2_normalize(a, NORM_EPS);
                weighted_sum(t, b, 12)
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 5]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.layer_norm(a, 1e-5);
                weighted_sum(t, b, 13)
            }),
        ),
        (
            "gather/slice/concat",
            vec![vec![4, 3]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let g = t.gather_rows(a, &[2, 0, 2])?;
                let r = t.slice_rows(a, 1, 3)?;
                let c0 = t.slice_cols(g, 0, 2)?;
                let c1 = t.slice_cols(r, 1, 2)?;
                let cat = t.concat_cols(&[c0, c1])?;
                weighted_sum(t, cat, 14)
            }),
        ),
        (
            "reshape/row_sums/mean_rows/pick",
            vec![vec![2, 6]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.reshape(a, &[3, 4])?;
                let rs = t.row_sums(b);
                let m = t.mean_rows(b);
                let p = t.pick(b, 5)?;
                let x = weighted_sum(t, rs, 15)?;
                let y = weighted_sum(t, m, 16)?;
                t.add_n(&[x, y, p])
            }),
        ),
        (
            "dropout",
            vec![vec![4, 5]],
            Box::new(|t, s, ids| {
                // a fixed seed gives every forward pass the same mask
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let a = t.param(s, ids[0]);
                let b = t.dropout(a, 0.3, &mut rng)?;
                weighted_sum(t, b, 17)
            }),
        ),
        (
            "sum_squares",
            vec![vec![3, 3]],
            Box::new(|t, s, ids| {
                let a = t.param(s, ids[0]);
                Ok(t.sum_squares(a))
            }),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, build) in &cases {
        let mut store = ParamStore::new();
        for (i, sh) in shapes.iter().enumerate() {
            store.register(format!("p{i}"), Tensor::uniform(sh, -1.5, 1.5, &mut rng))?;
        }
        out.push((*name, check_scalar(&mut store, build.as_ref())?));
    }
    Ok(out)
}

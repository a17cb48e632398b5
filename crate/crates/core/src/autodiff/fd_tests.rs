//! Central finite-difference checks of every recorded operation.

use proptest::prelude::*;

use super::*;
use crate::error::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Scalar loss `sum(w ⊙ f(x))` with fixed, irregular weights.
fn weighted<F>(t: &mut Tape, x: DiffArray, f: &F) -> Result<DiffArray>
where
    F: Fn(&mut Tape, DiffArray) -> Result<DiffArray>,
{
    let y = f(t, x)?;
    let (r, c) = y.shape();
    let w = t.constant(Matrix::from_fn(r, c, |i, j| 0.5 + ((i * c + j) as f64 * 1.7).sin()));
    let p = t.mul(&y, &w)?;
    t.sum(&p)
}

fn loss_value<F>(x: &Matrix, f: &F) -> f64
where
    F: Fn(&mut Tape, DiffArray) -> Result<DiffArray>,
{
    let mut t = Tape::new();
    let xa = t.constant(x.clone());
    let l = weighted(&mut t, xa, f).unwrap();
    t.value(&l).get(0, 0)
}

/// Norm-wise relative error between the tape gradient and central differences.
fn fd_error<F>(x: &Matrix, f: F) -> f64
where
    F: Fn(&mut Tape, DiffArray) -> Result<DiffArray>,
{
    let mut t = Tape::new();
    let xa = t.variable(x.clone());
    let l = weighted(&mut t, xa, &f).unwrap();
    let g = t.gradient(&l, &[xa]).unwrap().remove(0);

    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[k] += STEP;
        let mut xm = x.clone();
        xm.as_mut_slice()[k] -= STEP;
        let fd = (loss_value(&xp, &f) - loss_value(&xm, &f)) / (2.0 * STEP);
        num += (g.as_slice()[k] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1e-3)
}

fn mat(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn away_from_zero(m: &Matrix) -> bool {
    m.as_slice().iter().all(|v| v.abs() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affine_relu_mean(x in mat(5, 3, -2.0, 2.0), w in mat(3, 4, -1.0, 1.0), b in mat(1, 4, -0.5, 0.5)) {
        // Gradient with respect to the input, the weights and the bias.
        let pre = {
            let mut t = Tape::new();
            let xa = t.constant(x.clone());
            let wa = t.constant(w.clone());
            let ba = t.constant(b.clone());
            let y = t.affine(&xa, &wa, &ba, Activation::Identity).unwrap();
            t.value(&y).clone()
        };
        prop_assume!(away_from_zero(&pre));
        let (w1, b1) = (w.clone(), b.clone());
        let e = fd_error(&x, move |t, xa| {
            let wa = t.constant(w1.clone());
            let ba = t.constant(b1.clone());
            let h = t.affine(&xa, &wa, &ba, Activation::Relu)?;
            t.mean(&h)
        });
        prop_assert!(e <= TOL, "x: {e}");
        let (x1, b1) = (x.clone(), b.clone());
        let e = fd_error(&w, move |t, wa| {
            let xa = t.constant(x1.clone());
            let ba = t.constant(b1.clone());
            let h = t.affine(&xa, &wa, &ba, Activation::Relu)?;
            t.mean(&h)
        });
        prop_assert!(e <= TOL, "W: {e}");
        let (x1, w1) = (x.clone(), w.clone());
        let e = fd_error(&b, move |t, ba| {
            let xa = t.constant(x1.clone());
            let wa = t.constant(w1.clone());
            let h = t.affine(&xa, &wa, &ba, Activation::Relu)?;
            t.mean(&h)
        });
        prop_assert!(e <= TOL, "B: {e}");
    }

    #[test]
    fn unary_ops(x in mat(4, 2, -3.0, 3.0), p in mat(4, 2, 0.1, 3.0)) {
        prop_assume!(away_from_zero(&x));
        for f in [Unary::Relu, Unary::Softplus, Unary::Exp, Unary::Tanh, Unary::Square] {
            let e = fd_error(&x, move |t, a| t.unary(&a, f));
            prop_assert!(e <= TOL, "{f:?}: {e}");
        }
        for f in [Unary::Log, Unary::Sqrt] {
            let e = fd_error(&p, move |t, a| t.unary(&a, f));
            prop_assert!(e <= TOL, "{f:?}: {e}");
        }
    }

    #[test]
    fn binary_ops_with_broadcasting(a in mat(4, 3, -2.0, 2.0), col in mat(4, 1, 0.5, 2.0), row in mat(1, 3, 0.5, 2.0)) {
        for f in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
            let c1 = col.clone();
            let e = fd_error(&a, move |t, x| { let y = t.constant(c1.clone()); t.binary(&x, &y, f) });
            prop_assert!(e <= TOL, "{f:?} lhs: {e}");
            let a1 = a.clone();
            let e = fd_error(&col, move |t, y| { let x = t.constant(a1.clone()); t.binary(&x, &y, f) });
            prop_assert!(e <= TOL, "{f:?} column rhs: {e}");
            let a1 = a.clone();
            let e = fd_error(&row, move |t, y| { let x = t.constant(a1.clone()); t.binary(&x, &y, f) });
            prop_assert!(e <= TOL, "{f:?} row rhs: {e}");
        }
    }

    #[test]
    fn shape_and_reduction_ops(x in mat(6, 3, -2.0, 2.0), dt in 0.001f64..0.5) {
        let e = fd_error(&x, |t, a| t.scale(&a, -1.3));
        prop_assert!(e <= TOL);
        let e = fd_error(&x, |t, a| t.add_scalar(&a, 0.4));
        prop_assert!(e <= TOL);
        let e = fd_error(&x, |t, a| { let b = t.columns(&a, 1, 3)?; let s = t.square(&b)?; t.concat_cols(&[s, a]) });
        prop_assert!(e <= TOL);
        let e = fd_error(&x, move |t, a| t.tame(&a, dt));
        prop_assert!(e <= TOL, "tame: {e}");
        let e = fd_error(&x, |t, a| t.mean(&a));
        prop_assert!(e <= TOL);
        let e = fd_error(&x, |t, a| t.sample_variance(&a));
        prop_assert!(e <= TOL, "variance: {e}");
        let e = fd_error(&x, |t, a| { let s = t.square(&a)?; t.sum(&s) });
        prop_assert!(e <= TOL);
    }

    #[test]
    fn running_max_away_from_ties(x in mat(5, 4, -2.0, 2.0)) {
        // Columns act as the sequence; skip inputs with near-ties.
        let ok = (0..5).all(|i| {
            let mut r = x.row_slice(i).to_vec();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r[3] - r[2] > 1e-3
        });
        prop_assume!(ok);
        let e = fd_error(&x, |t, a| {
            let cols: Vec<DiffArray> = (0..4).map(|j| t.columns(&a, j, j + 1)).collect::<Result<_>>()?;
            t.running_max(&cols)
        });
        prop_assert!(e <= TOL);
    }

    #[test]
    fn replay_is_bit_identical(x in mat(7, 2, -2.0, 2.0), w in mat(2, 3, -1.0, 1.0)) {
        let run = || {
            let mut s = ParamStore::new();
            let id = s.add("w", w.clone()).unwrap();
            let b = s.add("b", Matrix::zeros(1, 3)).unwrap();
            let mut t = Tape::new();
            let xa = t.constant(x.clone());
            let (wa, ba) = (t.param(&s, id), t.param(&s, b));
            let h = t.affine(&xa, &wa, &ba, Activation::Relu).unwrap();
            let sp = t.softplus(&h).unwrap();
            let v = t.sample_variance(&sp).unwrap();
            let l = t.sum(&v).unwrap();
            t.backward(&l, &mut s).unwrap();
            (t.value(&l).clone(), s.grad(id).clone(), s.grad(b).clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn eager_matches_tape_values(x in mat(5, 2, -2.0, 2.0), w in mat(2, 3, -1.0, 1.0)) {
        fn model<B: Backend>(be: &mut B, x: &Matrix, w: &Matrix) -> Matrix {
            let xa = be.constant(x.clone());
            let wa = be.constant(w.clone());
            let ba = be.constant(Matrix::row(vec![0.1, -0.2, 0.3]));
            let h = be.affine(&xa, &wa, &ba, Activation::Relu).unwrap();
            let sp = be.softplus(&h).unwrap();
            let tm = be.tame(&sp, 0.01).unwrap();
            let m = be.mean(&tm).unwrap();
            be.value(&m).clone()
        }
        prop_assert_eq!(model(&mut Tape::new(), &x, &w), model(&mut Eager::new(), &x, &w));
    }
}

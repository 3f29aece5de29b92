use grumt::numerics::{
    cross_entropy, finite_difference_check, glorot_bound, glorot_uniform, matvec, softmax, Matrix,
};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, 1..=50)
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(l in logits(), c in -100.0..100.0f64) {
        let p = softmax(&l);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_differences(l in prop::collection::vec(-3.0..3.0f64, 2..=50), pick in any::<prop::sample::Index>()) {
        let target = pick.index(l.len());
        let (_, grad) = cross_entropy(&softmax(&l), target).unwrap();
        let err = finite_difference_check(
            |x| cross_entropy(&softmax(x), target).unwrap().0,
            &l,
            &grad,
            1e-4,
        )
        .unwrap();
        prop_assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn matvec_distributes(
        rows in 1..6usize,
        cols in 1..6usize,
        seed in any::<u64>(),
        u in prop::collection::vec(-10.0..10.0f64, 6),
        v in prop::collection::vec(-10.0..10.0f64, 6),
    ) {
        let m = glorot_uniform::<f64>(rows, cols, seed);
        let (u, v) = (&u[..cols], &v[..cols]);
        let sum: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + b).collect();
        let lhs = matvec(&m, &sum).unwrap();
        let mu = matvec(&m, u).unwrap();
        let mv = matvec(&m, v).unwrap();
        for i in 0..rows {
            prop_assert!((lhs[i] - (mu[i] + mv[i])).abs() < 1e-6);
        }
    }
}

#[test]
fn glorot_bound_and_variance() {
    for (rows, cols) in [(100, 100), (500, 20), (20, 500)] {
        let m: Matrix<f64> = glorot_uniform(rows, cols, 42);
        let b = glorot_bound(rows, cols);
        let data = m.as_slice();
        assert!(data.iter().all(|x| x.abs() <= b));
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let expected = b * b / 3.0;
        assert!((var / expected - 1.0).abs() < 0.1, "{rows}x{cols}: {var} vs {expected}");
    }
}

use proptest::prelude::*;
use qverify_core::numerics::{
    dequantize, gemm_f, gemm_i8, quantize_value, softmax_temperature, MatrixF, MatrixI32, MatrixI8,
    StepSize,
};

fn i8_matrix(rows: usize, cols: usize) -> impl Strategy<Value = MatrixI8> {
    prop::collection::vec(-127i8..=127, rows * cols)
        .prop_map(move |d| MatrixI8::from_vec(rows, cols, d).unwrap())
}

fn f_matrix(rows: usize, cols: usize) -> impl Strategy<Value = MatrixF> {
    prop::collection::vec(-4.0f32..4.0, rows * cols)
        .prop_map(move |d| MatrixF::from_vec(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn roundoff_is_at_most_half_a_step(step in 1e-4f32..10.0, frac in -1.0f32..=1.0) {
        let step = StepSize::new(step).unwrap();
        let v = frac * 127.0 * step.get();
        let code = quantize_value(v, step);
        let back = code as f64 * step.get() as f64;
        // Half a step, plus the two f32 roundings in v / Δ and in v itself.
        let tol = step.get() as f64 / 2.0 + 2.0 * f32::EPSILON as f64 * (v.abs() as f64 + step.get() as f64);
        prop_assert!((back - v as f64).abs() <= tol, "v={v} code={code}");
        prop_assert!((-127..=127).contains(&code));
    }

    #[test]
    fn i8_gemm_equals_float_gemm_on_cast_values(
        (a, b) in (1usize..9, 1usize..40, 1usize..9)
            .prop_flat_map(|(m, k, n)| (i8_matrix(m, k), i8_matrix(k, n)))
    ) {
        let exact = gemm_i8(&a, &b).unwrap();
        let fa = MatrixF::from_vec(a.rows(), a.cols(), a.data().iter().map(|&v| v as f32).collect()).unwrap();
        let fb = MatrixF::from_vec(b.rows(), b.cols(), b.data().iter().map(|&v| v as f32).collect()).unwrap();
        // |sum| < 40·127² < 2^24, so every f32 partial sum is an exact integer.
        let float = gemm_f(&fa, &fb).unwrap();
        for (e, f) in exact.data().iter().zip(float.data()) {
            prop_assert_eq!(*e as f32, *f);
        }
    }

    #[test]
    fn i8_gemm_matches_naive_i64(
        (a, b) in (1usize..6, 1usize..300, 1usize..6)
            .prop_flat_map(|(m, k, n)| (i8_matrix(m, k), i8_matrix(k, n)))
    ) {
        let c = gemm_i8(&a, &b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let want: i64 = (0..a.cols()).map(|t| a.get(i, t) as i64 * b.get(t, j) as i64).sum();
                prop_assert_eq!(c.get(i, j) as i64, want);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        logits in prop::collection::vec(-30.0f32..30.0, 1..50),
        shift in -100.0f32..100.0,
        t in prop_oneof![Just(0.0f32), 0.05f32..4.0],
    ) {
        let p = softmax_temperature(&logits, t).unwrap();
        prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f32> = logits.iter().map(|l| l + shift).collect();
        let q = softmax_temperature(&shifted, t).unwrap();
        // Adding the shift in f32 can itself perturb near-ties.
        let distinct_top = {
            let mut s = logits.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s.len() == 1 || s[0] - s[1] > 1e-3
        };
        if distinct_top {
            prop_assert_eq!(p.argmax(), q.argmax());
        }
        if t > 0.0 {
            for (a, b) in p.probs().iter().zip(q.probs()) {
                // f32 rounding of l + shift moves each logit by up to
                // ulp(130)/2 ≈ 7.6e-6, scaled by 1/T.
                let tol = 1e-6f64.max(4.0 * 7.7e-6 / t as f64 * a.max(*b));
                prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn deterministic_gemm_is_bitwise_repeatable(
        (a, b) in (1usize..12, 1usize..64, 1usize..12)
            .prop_flat_map(|(m, k, n)| (f_matrix(m, k), f_matrix(k, n)))
    ) {
        let first = gemm_f(&a, &b).unwrap();
        for _ in 0..3 {
            let again = gemm_f(&a, &b).unwrap();
            prop_assert!(first.data().iter().zip(again.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dequantize_is_outer_product_of_steps(
        codes in prop::collection::vec(-100_000i32..100_000, 12),
        rs in prop::collection::vec(1e-3f32..1.0, 3),
        cs in prop::collection::vec(1e-3f32..1.0, 4),
    ) {
        let c = MatrixI32::from_vec(3, 4, codes).unwrap();
        let rsteps: Vec<StepSize> = rs.iter().map(|&v| StepSize::new(v).unwrap()).collect();
        let csteps: Vec<StepSize> = cs.iter().map(|&v| StepSize::new(v).unwrap()).collect();
        let d = dequantize(&c, &rsteps, &csteps).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want = c.get(i, j) as f64 * rs[i] as f64 * cs[j] as f64;
                let got = d.get(i, j) as f64;
                prop_assert!((got - want).abs() <= 2.0 * f32::EPSILON as f64 * want.abs());
            }
        }
    }
}

#[test]
fn softmax_rejects_bad_input() {
    assert!(softmax_temperature(&[], 1.0).is_err());
    assert!(softmax_temperature(&[1.0, f32::NAN], 1.0).is_err());
    assert!(softmax_temperature(&[1.0], -1.0).is_err());
}

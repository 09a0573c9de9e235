//! Property-based invariants for the numerical kernels.

use bdlab_core::align::{align, blend, FlatGradient, LayoutEntry};
use bdlab_core::probe::{decompose, gaussian_kernel};
use bdlab_core::tensor::DenseMatrix;
use proptest::prelude::*;

fn flat(v: Vec<f64>) -> FlatGradient {
    let cols = v.len();
    FlatGradient {
        data: v,
        layout: vec![LayoutEntry {
            name: "g".to_string(),
            offset: 0,
            rows: 1,
            cols,
        }],
    }
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    /// The aligned gradient is invariant to positive rescaling of the clean
    /// gradient: the |g . g_c| / ||g_c||^2 coefficient cancels the scale.
    #[test]
    fn align_positive_scale_invariant(
        g in finite_vec(8),
        gc in finite_vec(8),
        c in 0.25..8.0f64,
    ) {
        let scaled: Vec<f64> = gc.iter().map(|x| c * x).collect();
        let a = align(&flat(g.clone()), &flat(gc), 1e-30).unwrap();
        let b = align(&flat(g), &flat(scaled), 1e-30).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    /// The aligned gradient always points along +g_c (non-negative dot).
    #[test]
    fn align_never_opposes_clean_gradient(
        g in finite_vec(8),
        gc in finite_vec(8),
    ) {
        let gc = flat(gc);
        let a = align(&flat(g), &gc, 1e-30).unwrap();
        prop_assert!(a.dot(&gc) >= -1e-12);
    }

    /// blend(g_a, g, mu) lies on the segment between g_a and g.
    #[test]
    fn blend_is_convex_combination(
        ga in finite_vec(6),
        g in finite_vec(6),
        mu in 0.0..=1.0f64,
    ) {
        let out = blend(&flat(ga.clone()), &flat(g.clone()), mu).unwrap();
        for i in 0..6 {
            let want = (1.0 - mu) * ga[i] + mu * g[i];
            prop_assert!((out.data[i] - want).abs() <= 1e-12);
        }
    }

    /// Low- and high-frequency parts always reconstruct the original mapping,
    /// and the kernel stays symmetric with unit diagonal.
    #[test]
    fn decompose_reconstructs(
        vals in prop::collection::vec(-5.0..5.0f64, 6 * 3),
        emb in prop::collection::vec(-3.0..3.0f64, 6 * 4),
        delta in 0.5..8.0f64,
    ) {
        let m = DenseMatrix::from_vec(6, 3, vals);
        let e = DenseMatrix::from_vec(6, 4, emb);
        let g = gaussian_kernel(&e, delta).unwrap();
        for i in 0..6 {
            prop_assert_eq!(g.get(i, i), 1.0);
            for j in 0..6 {
                prop_assert!((g.get(i, j) - g.get(j, i)).abs() <= 1e-15);
            }
        }
        let (low, high) = decompose(&m, &g).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let recon = low.get(i, j) + high.get(i, j);
                prop_assert!((recon - m.get(i, j)).abs() <= 1e-12);
            }
        }
    }
}

use npo_core::{assemble, CsrMatrix, GridSpec, PdeFamily, Preconditioner};
use npo_neural::autodiff::{softmax_rows, Mat};
use npo_neural::namg::{NamgConfig, NamgModel, NamgPreconditioner};
use proptest::prelude::*;
use std::sync::Arc;

fn poisson(n: usize) -> (Arc<CsrMatrix>, GridSpec) {
    let grid = GridSpec::unit_1d(n).unwrap();
    (Arc::new(assemble(&PdeFamily::Poisson1D, &grid).unwrap()), grid)
}

fn close(x: &[f64], y: &[f64], tol: f64) -> bool {
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    x.iter().zip(y).all(|(a, b)| (a - b).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn namg_is_linear_in_the_residual(
        n in 8usize..80,
        seed in 0u64..1000,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        r1 in prop::collection::vec(-1.0f64..1.0, 80),
        r2 in prop::collection::vec(-1.0f64..1.0, 80),
    ) {
        let (a, grid) = poisson(n);
        let model = NamgModel::new(NamgConfig::default(), seed).unwrap();
        let m = NamgPreconditioner::new(&model, a, &grid).unwrap();
        let (r1, r2) = (&r1[..n], &r2[..n]);
        let mix: Vec<f64> = r1.iter().zip(r2).map(|(x, y)| alpha * x + beta * y).collect();
        let (z1, z2) = (m.apply(r1).unwrap(), m.apply(r2).unwrap());
        let want: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| alpha * x + beta * y).collect();
        prop_assert!(close(&m.apply(&mix).unwrap(), &want, 1e-10));
    }

    #[test]
    fn scaling_the_matrix_scales_the_preconditioner_inversely(
        n in 8usize..80,
        seed in 0u64..1000,
        log_c in -4.0f64..4.0,
        r in prop::collection::vec(-1.0f64..1.0, 80),
    ) {
        let c = 10f64.powf(log_c);
        let (a, grid) = poisson(n);
        let scaled = Arc::new(a.scaled(c));
        let model = NamgModel::new(NamgConfig::default(), seed).unwrap();
        let z = NamgPreconditioner::new(&model, a, &grid).unwrap().apply(&r[..n]).unwrap();
        let zc = NamgPreconditioner::new(&model, scaled, &grid).unwrap().apply(&r[..n]).unwrap();
        let want: Vec<f64> = z.iter().map(|v| v / c).collect();
        prop_assert!(close(&zc, &want, 1e-9));
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        tau in 0.05f64..5.0,
        vals in prop::collection::vec(-50.0f64..50.0, 54),
        keep in prop::collection::vec(any::<bool>(), 54),
    ) {
        let x = Mat::from_row_slice(rows, cols, &vals[..rows * cols]);
        // Every row keeps at least its first column.
        let mask: Vec<bool> = (0..rows * cols).map(|k| k % cols == 0 || keep[k]).collect();
        let y = softmax_rows(&x, tau, Some(&mask));
        for i in 0..rows {
            let sum: f64 = (0..cols).map(|j| y[(i, j)]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for j in 0..cols {
                prop_assert!(y[(i, j)] >= 0.0);
                if !mask[i * cols + j] {
                    prop_assert_eq!(y[(i, j)], 0.0);
                }
            }
        }
    }
}

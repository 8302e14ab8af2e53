use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use tomopd_core::linop::{adjoint_test, materialize, op_norm, stack_with_norms, Dense, OpRef};
use tomopd_core::tomo::{
    make_directional_diff, make_finite_diff, make_gaussian_blur, make_hanning_sqrt_filter, make_projector,
};
use tomopd_core::{Axis, GridSpec, LinearOperator, PowerConfig, ScanGeometry};

fn tight() -> PowerConfig {
    PowerConfig { tol: 1e-13, max_iter: 100_000, seed: 5 }
}

fn largest_singular_value(op: &dyn LinearOperator) -> f64 {
    let s = op.shape();
    let m = DMatrix::from_row_slice(s.codomain_len, s.domain_len, &materialize(op));
    m.singular_values().max()
}

#[test]
fn power_norm_matches_svd() {
    let grid = GridSpec::new_2d(10, 7, 0.2, 0.3).unwrap();
    let geom = ScanGeometry::fitted(&grid, 6, 25.0, 16).unwrap();
    let ops: Vec<OpRef> = vec![
        make_projector(&grid, &geom).unwrap(),
        make_finite_diff(&grid, Axis::Z).unwrap(),
        make_directional_diff(&grid, 15.0).unwrap(),
        make_hanning_sqrt_filter(&geom, 0.5).unwrap(),
    ];
    for op in &ops {
        let svd = largest_singular_value(op.as_ref());
        let pow = op_norm(op.as_ref(), &tight()).unwrap();
        assert!((pow - svd).abs() <= 1e-6 * svd, "{pow} vs {svd}");
    }
}

#[test]
fn stacked_blocks_have_unit_norm() {
    let grid = GridSpec::square_2d(9, 2.0).unwrap();
    let geom = ScanGeometry::fitted(&grid, 5, 25.0, 14).unwrap();
    let k = stack_with_norms(
        vec![make_projector(&grid, &geom).unwrap(), make_finite_diff(&grid, Axis::X).unwrap()],
        vec![1.0, 1.0],
        &tight(),
    )
    .unwrap();
    for i in 0..k.num_blocks() {
        let ratio = largest_singular_value(k.block(i).as_ref()) / k.norms()[i];
        assert!((ratio - 1.0).abs() < 1e-6, "{ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projector_is_adjoint(nx in 3usize..14, nz in 3usize..14, views in 1usize..8, half in 5.0f64..60.0, bins in 4usize..30, seed in 0u64..1000) {
        let grid = GridSpec::new_2d(nx, nz, 0.25, 0.2).unwrap();
        let geom = ScanGeometry::fitted(&grid, views, half, bins).unwrap();
        let op = make_projector(&grid, &geom).unwrap();
        prop_assert!(adjoint_test(op.as_ref(), 4, seed) <= 1e-10);
    }

    #[test]
    fn projector_3d_is_adjoint(nx in 2usize..8, ny in 1usize..5, nz in 2usize..8, views in 1usize..6, seed in 0u64..1000) {
        let grid = GridSpec::new_3d([nx, ny, nz], [0.3, 0.25, 0.2]).unwrap();
        let geom = ScanGeometry::fitted(&grid, views, 25.0, 12).unwrap();
        let op = make_projector(&grid, &geom).unwrap();
        prop_assert!(adjoint_test(op.as_ref(), 4, seed) <= 1e-10);
    }

    #[test]
    fn differences_and_filters_are_adjoint(n in 2usize..12, theta in -45.0f64..45.0, cutoff in 0.1f64..1.0, sigma in 0.05f64..0.6, seed in 0u64..1000) {
        let grid = GridSpec::new_2d(n, n + 1, 0.2, 0.2).unwrap();
        let geom = ScanGeometry::fitted(&grid, 3, 25.0, n + 4).unwrap();
        let ops: Vec<OpRef> = vec![
            make_finite_diff(&grid, Axis::X).unwrap(),
            make_finite_diff(&grid, Axis::Z).unwrap(),
            make_directional_diff(&grid, theta).unwrap(),
            make_hanning_sqrt_filter(&geom, cutoff).unwrap(),
            make_gaussian_blur(&grid, &[sigma, sigma * 0.5]).unwrap(),
        ];
        for op in &ops {
            prop_assert!(adjoint_test(op.as_ref(), 3, seed) <= 1e-10);
        }
    }

    #[test]
    fn dense_blocks_normalize(rows in 1usize..6, cols in 1usize..6, scale in -3.0f64..3.0, seed in 0u64..1000) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| 10f64.powf(scale) * (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0))
            .collect();
        prop_assume!(data.iter().any(|v| *v != 0.0));
        let dense = Dense::new(rows, cols, data).unwrap();
        let k = stack_with_norms(vec![Arc::new(dense) as OpRef], vec![1.0], &tight()).unwrap();
        prop_assert!((largest_singular_value(k.block(0).as_ref()) / k.norms()[0] - 1.0).abs() < 1e-8);
    }
}

use lingrow_core::analysis::{curl_free_test, reconstruct_potential};
use lingrow_core::domain::{CellField, Grid, Mask, NodeField, Norm};
use proptest::prelude::*;

/// Dense `G` built column by column from unit nodal fields.
fn dense_gradient(grid: &Grid) -> Vec<Vec<f64>> {
    let dofs = grid.n_nodes() * grid.components();
    (0..dofs)
        .map(|j| {
            let mut u = grid.zero_nodes();
            u.values[j] = 1.0;
            grid.gradient(&u).unwrap().values
        })
        .collect()
}

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(prop::bool::weighted(0.8), n * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_matches_dense_transpose(flags in mask_strategy(4), comps in 1usize..3, seed in any::<u64>()) {
        let Ok(grid) = Grid::rectangle((0.0, 1.0), (0.0, 2.0), 4, 4, &Mask::Explicit(flags), comps) else {
            return Ok(());
        };
        let cols = dense_gradient(&grid);
        let cell_len = cols[0].len();
        let mut chi = CellField::zeros(grid.n_cells(), comps, 2);
        let mut x = seed;
        for v in chi.values.iter_mut() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        }
        let got = grid.gradient_adjoint(&chi).unwrap();
        let w = grid.cell_volume();
        for (j, col) in cols.iter().enumerate() {
            let expect: f64 = (0..cell_len).map(|i| w * col[i] * chi.values[i]).sum();
            prop_assert!((got.values[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pairing_is_adjoint(values in prop::collection::vec(-1.0f64..1.0, 25), chi in prop::collection::vec(-1.0f64..1.0, 32)) {
        let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 4, 4, &Mask::Full, 1).unwrap();
        let u = NodeField { components: 1, values };
        let chi = CellField { rows: 1, cols: 2, values: chi };
        let lhs = grid.divergence_pairing(&chi, &u).unwrap();
        let rhs: f64 = grid.gradient_adjoint(&chi).unwrap().values.iter().zip(&u.values).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn curl_of_gradient_vanishes(values in prop::collection::vec(-10.0f64..10.0, 49)) {
        let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 6, 6, &Mask::Full, 1).unwrap();
        let e = grid.gradient(&NodeField { components: 1, values }).unwrap();
        let rep = curl_free_test(&grid, &e, 1e-10).unwrap();
        prop_assert!(rep.is_curl_free, "curl {}", rep.curl_max);
    }

    #[test]
    fn reconstruction_roundtrip(values in prop::collection::vec(-1.0f64..1.0, 81), comps in 1usize..3) {
        let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 8, 8, &Mask::Full, comps).unwrap();
        let mut u = grid.zero_nodes();
        for (i, v) in u.values.iter_mut().enumerate() {
            *v = values[i % 81] * (1.0 + (i / 81) as f64);
        }
        let e = grid.gradient(&u).unwrap();
        let rec = reconstruct_potential(&grid, &e).unwrap();
        prop_assert!(rec.residual_l1 <= 1e-9 * grid.cell_norm(&e, Norm::L1).max(1e-300));
        prop_assert!(rec.v.max_abs_diff(&grid.project_out_kernel(&u)) < 1e-9);
    }

    #[test]
    fn kernel_projection_is_idempotent(values in prop::collection::vec(-1.0f64..1.0, 36)) {
        let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 5, 5, &Mask::Full, 1).unwrap();
        let u = NodeField { components: 1, values };
        let p = grid.project_out_kernel(&u);
        prop_assert!(grid.project_out_kernel(&p).max_abs_diff(&p) < 1e-13);
        prop_assert!(grid.mean(&p)[0].abs() < 1e-13);
    }
}

#[test]
fn euler_characteristic_counts_holes() {
    let n = 9;
    let mut flags = vec![true; n * n];
    flags[2 * n + 2] = false;
    flags[6 * n + 6] = false;
    let two = Grid::rectangle((0.0, 1.0), (0.0, 1.0), n, n, &Mask::Explicit(flags.clone()), 1).unwrap();
    assert_eq!(two.hole_count(), 2);
    assert_eq!(two.hole_loops().len(), 2);
    // a notch cut from the border is not a hole
    flags[n * 4] = false;
    let notched = Grid::rectangle((0.0, 1.0), (0.0, 1.0), n, n, &Mask::Explicit(flags), 1).unwrap();
    assert_eq!(notched.hole_count(), 2);
}

#[test]
fn loop_around_a_single_cell_hole_sees_the_vortex() {
    let n = 11;
    let mut flags = vec![true; n * n];
    flags[5 * n + 5] = false;
    let grid = Grid::rectangle((-1.0, 1.0), (-1.0, 1.0), n, n, &Mask::Explicit(flags), 1).unwrap();
    let e = grid.cell_field_from_fn(1, 2, |p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        vec![-p[1] / r2, p[0] / r2]
    });
    let rep = curl_free_test(&grid, &e, f64::INFINITY).unwrap();
    assert_eq!(rep.hole_circulations.len(), 1);
    assert!((rep.hole_circulations[0] - std::f64::consts::TAU).abs() < 0.5);
}

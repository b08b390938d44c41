mod common;

use common::*;

#[test]
fn brute_force_assignment_on_a_known_matrix() {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    // 1 + 2 + 2 via (0->1, 1->0, 2->2).
    assert!((assignment_brute_force(&cost) - 5.0 / 3.0).abs() < 1e-15);
}

#[test]
fn closed_forms_are_continuous() {
    assert!((triple_potential(1.0 / 3.0) - 15.0 / 4.0).abs() < 1e-12);
    assert!((triple_potential(2.0 / 3.0) - 15.0 / 4.0).abs() < 1e-12);
    assert!((ball_map(ball_map(0.7)) - 0.7).abs() < 1e-12);
}

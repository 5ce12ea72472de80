//! Distributing a correction along the chain reproduces it exactly.

mod common;

use common::criteria::backprop_errors;
use common::{random_pose, random_transform, rng};
use hitl_slam::correction::backpropagate;
use hitl_slam::geometry::Transform2D;
use hitl_slam::model::FactorGraph;
use nalgebra::Matrix3;
use proptest::prelude::*;

#[test]
fn thousand_chains_heal_exactly() {
    let (product, link) = backprop_errors(1000, 7);
    eprintln!("product error {product:e}, link error {link:e}");
    assert!(product <= 1e-9);
    assert!(link <= 1e-9);
}

#[test]
fn rejects_empty_and_out_of_range() {
    let g = FactorGraph::from_poses(vec![Default::default(); 4], Matrix3::identity());
    let c = Transform2D::new(0.1, 1.0, 0.0);
    assert!(backpropagate(&g, 2, 2, &c).is_err());
    assert!(backpropagate(&g, 0, 4, &c).is_err());
}

proptest! {
    #[test]
    fn fractions_sum_to_one_and_product_matches(seed in any::<u64>(), n in 3usize..30) {
        let mut r = rng(seed);
        let mut poses = vec![random_pose(&mut r, 3.0)];
        for _ in 1..n {
            let step = random_transform(&mut r, 1.0, 0.5);
            poses.push(poses.last().unwrap().compose(&step));
        }
        let g = FactorGraph::from_poses(poses, Matrix3::identity());
        let c = random_transform(&mut r, 3.0, 3.0);
        let (out, bp) = backpropagate(&g, 0, n - 1, &c).unwrap();
        prop_assert!((bp.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(bp.fractions.iter().all(|f| *f >= 0.0));
        let diff = bp.product().to_matrix() - c.to_matrix();
        prop_assert!(diff.abs().max() < 1e-9);
        prop_assert_eq!(out.poses[0], g.poses[0]);
        let last = c.apply_to_pose(&g.poses[n - 1]);
        prop_assert!((out.poses[n - 1].position() - last.position()).norm() < 1e-9);
    }
}

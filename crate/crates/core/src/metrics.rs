//! Evaluation metrics comparing estimated soft labels against a reference.

use crate::data::SoftLabels;
use crate::error::{Error, Result};

fn check_shapes(estimate: &SoftLabels, reference: &SoftLabels) -> Result<()> {
    if estimate.num_tasks() != reference.num_tasks()
        || estimate.num_classes() != reference.num_classes()
    {
        return Err(Error::Validation(format!(
            "shape mismatch: estimate {}x{}, reference {}x{}",
            estimate.num_tasks(),
            estimate.num_classes(),
            reference.num_tasks(),
            reference.num_classes()
        )));
    }
    Ok(())
}

/// Mean absolute error over all task-class entries. For two classes this
/// equals the per-task error on either class, since rows sum to 1.
pub fn mae(estimate: &SoftLabels, reference: &SoftLabels) -> Result<f64> {
    check_shapes(estimate, reference)?;
    let total: f64 = estimate
        .rows()
        .zip(reference.rows())
        .flat_map(|(e, r)| e.iter().zip(r).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(total / (estimate.num_tasks() * estimate.num_classes()) as f64)
}

/// Mean signed deviation on one class (zero-based index). Values near zero
/// indicate the estimate is not systematically skewed on that class.
pub fn bias(estimate: &SoftLabels, reference: &SoftLabels, class: usize) -> Result<f64> {
    check_shapes(estimate, reference)?;
    if class >= estimate.num_classes() {
        return Err(Error::Validation(format!(
            "class index {class} out of range for {} classes",
            estimate.num_classes()
        )));
    }
    let total: f64 = estimate
        .rows()
        .zip(reference.rows())
        .map(|(e, r)| e[class] - r[class])
        .sum();
    Ok(total / estimate.num_tasks() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn soft(rows: Vec<Vec<f64>>) -> SoftLabels {
        SoftLabels::new(rows).unwrap()
    }

    #[test]
    fn identical_labels_have_zero_error() {
        let z = soft(vec![vec![0.6, 0.4], vec![0.2, 0.8]]);
        assert_eq!(mae(&z, &z).unwrap(), 0.0);
        assert_eq!(bias(&z, &z, 0).unwrap(), 0.0);
    }

    #[test]
    fn opposite_vertices_have_unit_mae() {
        let a = soft(vec![vec![1.0, 0.0]]);
        let b = soft(vec![vec![0.0, 1.0]]);
        assert_abs_diff_eq!(mae(&a, &b).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mae_hand_example() {
        let a = soft(vec![vec![0.6, 0.4], vec![0.5, 0.5]]);
        let b = soft(vec![vec![0.7, 0.3], vec![0.5, 0.5]]);
        // (0.1 + 0.1 + 0 + 0) / 4
        assert_abs_diff_eq!(mae(&a, &b).unwrap(), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn bias_hand_example() {
        let a = soft(vec![vec![0.8, 0.2]]);
        let b = soft(vec![vec![0.6, 0.4]]);
        assert_abs_diff_eq!(bias(&a, &b, 0).unwrap(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn bias_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..20 {
            let rows_a: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let p: f64 = rng.gen_range(0.0..1.0);
                    vec![p, 1.0 - p]
                })
                .collect();
            let rows_b: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let p: f64 = rng.gen_range(0.0..1.0);
                    vec![p, 1.0 - p]
                })
                .collect();
            let a = soft(rows_a);
            let b = soft(rows_b);
            assert_abs_diff_eq!(
                bias(&a, &b, 1).unwrap(),
                -bias(&b, &a, 1).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn per_class_bias_bounded_by_per_class_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let rows_a: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let p: f64 = rng.gen_range(0.0..1.0);
                    vec![p, 1.0 - p]
                })
                .collect();
            let rows_b: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let p: f64 = rng.gen_range(0.0..1.0);
                    vec![p, 1.0 - p]
                })
                .collect();
            let a = soft(rows_a);
            let b = soft(rows_b);
            for class in 0..2 {
                // K = 2 symmetric case: all-entry MAE equals per-class MAE
                assert!(bias(&a, &b, class).unwrap().abs() <= mae(&a, &b).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = soft(vec![vec![0.6, 0.4]]);
        let b = soft(vec![vec![0.6, 0.4], vec![0.5, 0.5]]);
        assert!(mae(&a, &b).is_err());
        assert!(bias(&a, &b, 0).is_err());
        assert!(bias(&a, &a, 2).is_err());
    }

    #[test]
    fn mae_zero_only_for_near_equal() {
        let a = soft(vec![vec![0.6, 0.4]]);
        let b = soft(vec![vec![0.6 + 1e-6, 0.4 - 1e-6]]);
        assert!(mae(&a, &b).unwrap() > 0.0);
    }
}

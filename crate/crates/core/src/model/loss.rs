//! Per-sample losses and their gradients with respect to logits.
//!
//! Multiclass uses softmax cross-entropy; multilabel uses the mean of
//! per-attribute binary cross-entropies. Distillation terms use the
//! KL divergence from a teacher's output distribution to the student's
//! at temperature 1.

use ndarray::{Array1, Array2, ArrayView2};

use super::config::{Label, TaskKind};
use crate::error::{Error, Result};

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_sum).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy with logits.
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_labels(labels: &[Label], task_kind: TaskKind, num_outputs: usize) -> Result<()> {
    for label in labels {
        label.validate(task_kind, num_outputs)?;
    }
    Ok(())
}

/// Loss of each sample in a batch of logits. Always non-negative.
pub fn per_sample_loss(
    logits: ArrayView2<f64>,
    labels: &[Label],
    task_kind: TaskKind,
) -> Result<Array1<f64>> {
    let (batch, num_outputs) = logits.dim();
    if labels.len() != batch {
        return Err(Error::input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    check_labels(labels, task_kind, num_outputs)?;
    let mut out = Array1::zeros(batch);
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).to_vec();
        out[i] = match (label, task_kind) {
            (Label::Class(c), TaskKind::Multiclass) => -log_softmax_row(&row)[*c],
            (Label::Flags(flags), TaskKind::Multilabel) => {
                let sum: f64 = row
                    .iter()
                    .zip(flags)
                    .map(|(&z, &f)| bce_with_logits(z, f64::from(u8::from(f))))
                    .sum();
                sum / num_outputs as f64
            }
            _ => unreachable!("arity validated above"),
        };
    }
    Ok(out)
}

/// Per-sample loss plus d(mean batch loss)/d(logits).
pub(crate) fn task_loss_and_grad(
    logits: ArrayView2<f64>,
    labels: &[Label],
    task_kind: TaskKind,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let losses = per_sample_loss(logits, labels, task_kind)?;
    let (batch, num_outputs) = logits.dim();
    let scale = 1.0 / batch as f64;
    let mut grad = Array2::zeros((batch, num_outputs));
    for (i, label) in labels.iter().enumerate() {
        match (label, task_kind) {
            (Label::Class(c), TaskKind::Multiclass) => {
                let log_p = log_softmax_row(&logits.row(i).to_vec());
                for j in 0..num_outputs {
                    let p = log_p[j].exp();
                    grad[[i, j]] = (p - f64::from(u8::from(j == *c))) * scale;
                }
            }
            (Label::Flags(flags), TaskKind::Multilabel) => {
                for j in 0..num_outputs {
                    let y = f64::from(u8::from(flags[j]));
                    grad[[i, j]] = (sigmoid(logits[[i, j]]) - y) / num_outputs as f64 * scale;
                }
            }
            _ => unreachable!(),
        }
    }
    Ok((losses, grad))
}

/// Per-sample KL divergence from the teacher's output distribution to
/// the student's, at matching logits. Zero when the logits agree.
pub fn kd_per_sample(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    task_kind: TaskKind,
) -> Result<Array1<f64>> {
    let (kd, _) = kd_loss_and_grad(student_logits, teacher_logits, task_kind)?;
    Ok(kd)
}

/// KL(teacher || student) per sample plus d(mean KD)/d(student logits).
pub(crate) fn kd_loss_and_grad(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    task_kind: TaskKind,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::input(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    let (batch, num_outputs) = student_logits.dim();
    if batch == 0 {
        return Err(Error::input("empty batch"));
    }
    let scale = 1.0 / batch as f64;
    let mut kd = Array1::zeros(batch);
    let mut grad = Array2::zeros((batch, num_outputs));
    for i in 0..batch {
        match task_kind {
            TaskKind::Multiclass => {
                let log_ps = log_softmax_row(&student_logits.row(i).to_vec());
                let log_pt = log_softmax_row(&teacher_logits.row(i).to_vec());
                let mut total = 0.0;
                for j in 0..num_outputs {
                    let pt = log_pt[j].exp();
                    total += pt * (log_pt[j] - log_ps[j]);
                    grad[[i, j]] = (log_ps[j].exp() - pt) * scale;
                }
                kd[i] = total;
            }
            TaskKind::Multilabel => {
                let mut total = 0.0;
                for j in 0..num_outputs {
                    let ps = sigmoid(student_logits[[i, j]]);
                    let pt = sigmoid(teacher_logits[[i, j]]);
                    total += bernoulli_kl(pt, ps);
                    grad[[i, j]] = (ps - pt) / num_outputs as f64 * scale;
                }
                kd[i] = total / num_outputs as f64;
            }
        }
    }
    Ok((kd, grad))
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else {
            a * (a.ln() - b.ln())
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    #[test]
    fn uniform_logits_cost_ln_of_class_count() {
        let logits = Array2::zeros((3, 8));
        let labels = vec![Label::Class(0), Label::Class(3), Label::Class(7)];
        let losses = per_sample_loss(logits.view(), &labels, TaskKind::Multiclass).unwrap();
        for l in losses {
            assert_abs_diff_eq!(l, (8.0f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_vanishes_with_growing_margin() {
        let labels = vec![Label::Class(0)];
        let mut last = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let logits = arr2(&[[margin, 0.0, 0.0]]);
            let l = per_sample_loss(logits.view(), &labels, TaskKind::Multiclass).unwrap()[0];
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn multilabel_zero_logits_cost_ln_two() {
        let logits = Array2::zeros((2, 3));
        let labels = vec![
            Label::Flags(vec![true, false, true]),
            Label::Flags(vec![false, false, false]),
        ];
        let losses = per_sample_loss(logits.view(), &labels, TaskKind::Multilabel).unwrap();
        for l in losses {
            assert_abs_diff_eq!(l, (2.0f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let logits = Array2::zeros((1, 4));
        let err = per_sample_loss(logits.view(), &[Label::Class(4)], TaskKind::Multiclass)
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn kd_is_zero_when_student_equals_teacher() {
        let logits = arr2(&[[0.4, -1.2, 2.0], [0.0, 0.0, 0.0]]);
        for kind in [TaskKind::Multiclass, TaskKind::Multilabel] {
            let labels_dummy = logits.clone();
            let (kd, grad) = kd_loss_and_grad(logits.view(), labels_dummy.view(), kind).unwrap();
            for v in &kd {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
            }
            for v in &grad {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn kd_positive_when_distributions_differ() {
        let student = arr2(&[[2.0, 0.0, -1.0]]);
        let teacher = arr2(&[[0.0, 1.0, 0.0]]);
        for kind in [TaskKind::Multiclass, TaskKind::Multilabel] {
            let kd = kd_per_sample(student.view(), teacher.view(), kind).unwrap();
            assert!(kd[0] > 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn losses_are_never_negative(
            raw in proptest::collection::vec(-30.0f64..30.0, 8),
            class in 0usize..4,
            flags in proptest::collection::vec(proptest::bool::ANY, 4),
        ) {
            let logits = Array2::from_shape_vec((2, 4), raw).unwrap();
            let mc = per_sample_loss(
                logits.view(),
                &[Label::Class(class), Label::Class(3 - class)],
                TaskKind::Multiclass,
            ).unwrap();
            proptest::prop_assert!(mc.iter().all(|&l| l >= 0.0));
            let ml = per_sample_loss(
                logits.view(),
                &[Label::Flags(flags.clone()), Label::Flags(flags)],
                TaskKind::Multilabel,
            ).unwrap();
            proptest::prop_assert!(ml.iter().all(|&l| l >= 0.0));
        }
    }
}

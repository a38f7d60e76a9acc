use super::config::AdvSign;
use crate::model::Layout;
use crate::tensor::Tensor;

/// `−ε·g/‖g‖` (or `+ε·g/‖g‖` for [`AdvSign::Verbatim`]); zero when `g` is zero.
pub fn normalized_step(g: &[f64], epsilon: f64, sign: AdvSign) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || epsilon == 0.0 {
        return vec![0.0; g.len()];
    }
    let s = match sign {
        AdvSign::WorstCase => -1.0,
        AdvSign::Verbatim => 1.0,
    };
    g.iter().map(|v| s * epsilon * v / norm).collect()
}

/// Builds one perturbation tensor per step from the loss gradient w.r.t. the
/// embedded inputs. Each example is normalized jointly over every non-pad token of
/// its current and history utterances.
///
/// The log-likelihood gradient is the negated loss gradient; any positive scale on
/// the loss (batch mean) cancels in the normalization.
pub fn adversarial_perturbation(
    layout: &Layout,
    loss_grads: &[Tensor],
    dim: usize,
    epsilon: f64,
    sign: AdvSign,
) -> Vec<Tensor> {
    let rows = layout.rows();
    let mut norms = vec![0.0f64; layout.batch];
    for (t, g) in loss_grads.iter().enumerate() {
        for u in 0..rows {
            if t < layout.lengths[u] {
                norms[layout.owner[u]] += g.row(u).iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let s = match sign {
        AdvSign::WorstCase => 1.0,
        AdvSign::Verbatim => -1.0,
    };
    let scale: Vec<f64> = norms
        .iter()
        .map(|n| if *n == 0.0 { 0.0 } else { s * epsilon / n.sqrt() })
        .collect();
    loss_grads
        .iter()
        .enumerate()
        .map(|(t, g)| {
            let mut r = Tensor::zeros(&[rows, dim]);
            for u in 0..rows {
                if t < layout.lengths[u] {
                    let k = scale[layout.owner[u]];
                    for (o, v) in r.data_mut()[u * dim..(u + 1) * dim].iter_mut().zip(g.row(u)) {
                        *o = k * v;
                    }
                }
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Batch, EncodedExample};

    #[test]
    fn three_four_example() {
        let r = normalized_step(&[3.0, 4.0], 3.0, AdvSign::WorstCase);
        assert!((r[0] + 1.8).abs() < 1e-12 && (r[1] + 2.4).abs() < 1e-12);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 3.0).abs() < 1e-12);
        assert_eq!(normalized_step(&[3.0, 4.0], 3.0, AdvSign::Verbatim), vec![1.8, 2.4]);
        assert_eq!(normalized_step(&[3.0, 4.0], 0.0, AdvSign::WorstCase), vec![0.0, 0.0]);
        assert_eq!(normalized_step(&[0.0, 0.0], 3.0, AdvSign::WorstCase), vec![0.0, 0.0]);
    }

    #[test]
    fn per_example_norm_covers_history_and_skips_pads() {
        let a = EncodedExample {
            current: vec![2, 3],
            history: vec![vec![4]],
            label: 0,
        };
        let b = EncodedExample {
            current: vec![5],
            history: vec![],
            label: 1,
        };
        let batch = Batch::from_examples(&[&a, &b]);
        let layout = Layout::new(&batch).unwrap();
        // rows: 0 = a.current, 1 = b.current, 2 = a.history[0]
        let grads = vec![
            Tensor::matrix(&[&[1.0, 0.0], &[0.0, 2.0], &[2.0, 0.0]]),
            Tensor::matrix(&[&[0.0, 2.0], &[9.0, 9.0], &[9.0, 9.0]]),
        ];
        let r = adversarial_perturbation(&layout, &grads, 2, 3.0, AdvSign::WorstCase);
        // example a: ‖(1,0,0,2,2,0)‖ = 3, so r = grad
        assert_eq!(r[0].row(0), &[1.0, 0.0]);
        assert_eq!(r[1].row(0), &[0.0, 2.0]);
        assert_eq!(r[0].row(2), &[2.0, 0.0]);
        assert_eq!(r[1].row(2), &[0.0, 0.0]);
        // example b: ‖(0,2)‖ = 2
        assert_eq!(r[0].row(1), &[0.0, 3.0]);
        assert_eq!(r[1].row(1), &[0.0, 0.0]);
    }
}

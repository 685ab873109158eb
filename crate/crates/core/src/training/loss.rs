use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};
use crate::transformer::PAD;

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, one row per target. PAD targets are ignored.
pub fn cross_entropy_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let vocab = shape[1];
    let mut picks = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t as usize >= vocab {
            return Err(Error::Input(format!(
                "target id {t} outside vocabulary of {vocab}"
            )));
        }
        picks.push((r, t as usize));
    }
    if picks.is_empty() {
        return Err(Error::Input("no non-PAD targets".into()));
    }
    let logp = g.log_softmax(logits);
    let chosen = g.pick(logp, &picks)?;
    let mean = g.mean(chosen);
    Ok(g.scale(mean, -T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};

    fn loss(logits: Tensor<f64>, targets: &[u32]) -> f64 {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(logits);
        let l = cross_entropy_loss(&mut g, x, targets).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let l = loss(Tensor::zeros(&[3, 7]), &[4, 5, 6]);
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero() {
        let mut t = Tensor::filled(&[2, 5], -1e4);
        t.data_mut()[4] = 0.0;
        t.data_mut()[5 + 2] = 0.0;
        assert!(loss(t, &[4, 2]).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case_and_pad_invariance() {
        // V = 4, T = 3: row-wise -log softmax at the target, averaged
        let rows = vec![
            vec![1.0, 2.0, 0.5, -1.0],
            vec![0.0, 0.3, 0.2, 0.1],
            vec![-0.5, 1.5, 2.5, 0.0],
        ];
        let targets = [1, 3, 2];
        let expected = 0.7810056202337723;
        let l = loss(Tensor::from_rows(&rows).unwrap(), &targets);
        assert!((l - expected).abs() < 1e-12, "{l}");

        // extra PAD row with arbitrary logits changes nothing
        let mut padded = rows.clone();
        padded.push(vec![100.0, -3.0, 7.0, 2.0]);
        let l2 = loss(Tensor::from_rows(&padded).unwrap(), &[1, 3, 2, PAD]);
        assert_eq!(l, l2);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::<f64>::zeros(&[2, 4]));
        assert!(matches!(
            cross_entropy_loss(&mut g, x, &[1, 2, 3]),
            Err(Error::Shape { .. })
        ));
    }
}

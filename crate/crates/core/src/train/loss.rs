use crate::tensor::{shape_err, Result, Scalar, Shape, Tape, Var};

/// Smoothed Dice loss averaged over classes.
///
/// With `p = σ(logits)` and binary targets `g`, class `c` contributes
/// `1 − (2Σpg + ε)/(Σp + Σg + ε)`, the sums running over batch and pixels.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: Var, smooth: T) -> Result<Var> {
    let (ls, ts) = (tape.shape(logits), tape.shape(target));
    if ls != ts {
        return Err(shape_err("dice_loss", format!("logits {ls} and target {ts} differ")));
    }
    let per_class = Shape::new(1, ls.c(), 1, 1);
    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, target)?;
    let inter = tape.sum_to(pg, per_class)?;
    let sp = tape.sum_to(p, per_class)?;
    let sg = tape.sum_to(target, per_class)?;
    let num = tape.affine(inter, T::from_f64_lossy(2.0), smooth)?;
    let den = tape.add(sp, sg)?;
    let den = tape.affine(den, T::one(), smooth)?;
    let ratio = tape.div(num, den)?;
    let per_class_loss = tape.affine(ratio, -T::one(), T::one())?;
    tape.mean_all(per_class_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 3)));
        assert!(dice_loss(&mut tape, a, b, 1.0).is_err());
    }
}

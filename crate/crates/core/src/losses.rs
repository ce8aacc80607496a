//! Composite objectives shared by the three training stages.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Pixel L1 plus L1 between image gradients. The two gradient planes are
/// treated as one stacked tensor, so the gradient term is the mean of the
/// per-plane L1 values.
pub fn rec_loss<T: Element>(tape: &mut Tape<T>, reconstruction: Var, target: Var) -> Result<Var> {
    let pix = tape.l1_loss(reconstruction, target)?;
    let (rx, ry) = tape.image_gradient(reconstruction)?;
    let (tx, ty) = tape.image_gradient(target)?;
    let gx = tape.l1_loss(rx, tx)?;
    let gy = tape.l1_loss(ry, ty)?;
    let g = tape.add(gx, gy)?;
    let g = tape.scale(g, T::from_f64(0.5))?;
    tape.add(pix, g)
}

/// Mean L1 between penultimate discriminator features. The real branch
/// enters as a constant.
pub fn feature_loss<T: Element>(tape: &mut Tape<T>, real: &Tensor<T>, fake: Var) -> Result<Var> {
    let r = tape.constant(real.clone());
    tape.l1_loss(fake, r)
}

fn labels<T: Element>(tape: &Tape<T>, logits: Var, value: f64) -> Result<Tensor<T>> {
    Ok(Tensor::full(tape.value(logits)?.shape(), T::from_f64(value)))
}

/// `BCE(real, 1) + BCE(fake, 0)`, two means added.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let ones = labels(tape, real_logits, 1.0)?;
    let zeros = labels(tape, fake_logits, 0.0)?;
    let a = tape.bce_with_logits(real_logits, ones)?;
    let b = tape.bce_with_logits(fake_logits, zeros)?;
    tape.add(a, b)
}

/// Non-saturating generator term: fakes labelled real.
pub fn generator_adv_loss<T: Element>(tape: &mut Tape<T>, fake_logits: Var) -> Result<Var> {
    let ones = labels(tape, fake_logits, 1.0)?;
    tape.bce_with_logits(fake_logits, ones)
}

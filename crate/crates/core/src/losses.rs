//! Adversarial and cycle-consistency terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which player's objective to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `mean log σ(real) + mean log(1 − σ(fake))`, maximized by the discriminator.
    Discriminator,
    /// Non-saturating `mean log σ(fake)`, maximized by the generator.
    Generator,
}

/// Adversarial objective on a tape. Patch maps are averaged over batch and
/// patches; the discriminator side needs `real`, the generator side ignores it.
pub fn gan_objective<T: Real>(tape: &mut Tape<T>, real: Option<Var>, fake: Var, side: Side) -> Result<Var> {
    match side {
        Side::Generator => {
            let l = tape.log_sigmoid(fake);
            Ok(tape.mean(l))
        }
        Side::Discriminator => {
            let real = real.ok_or_else(|| Error::Invalid("discriminator objective needs real scores".into()))?;
            let lr = tape.log_sigmoid(real);
            let lr = tape.mean(lr);
            // log(1 − σ(x)) = log σ(−x)
            let nf = tape.neg(fake);
            let lf = tape.log_sigmoid(nf);
            let lf = tape.mean(lf);
            tape.add(lr, lf)
        }
    }
}

/// Value-level [`gan_objective`].
pub fn gan_loss<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, side: Side) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let v = gan_objective(&mut tape, Some(r), f, side)?;
    Ok(tape.value(v).item().to_f64())
}

/// Mean absolute error between two same-shaped nodes.
pub fn cycle_objective<T: Real>(tape: &mut Tape<T>, reconstructed: Var, original: Var) -> Result<Var> {
    if tape.shape(reconstructed) != tape.shape(original) {
        return Err(Error::Shape(format!(
            "cycle loss inputs differ: {:?} vs {:?}",
            tape.shape(reconstructed),
            tape.shape(original)
        )));
    }
    let d = tape.sub(reconstructed, original)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Value-level [`cycle_objective`].
pub fn cycle_loss<T: Real>(reconstructed: &Tensor<T>, original: &Tensor<T>) -> Result<f64> {
    if reconstructed.shape() != original.shape() {
        return Err(Error::Shape(format!(
            "cycle loss inputs differ: {:?} vs {:?}",
            reconstructed.shape(),
            original.shape()
        )));
    }
    let total: f64 = reconstructed.data().iter().zip(original.data()).map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs()).sum();
    Ok(total / reconstructed.numel().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, cyc: 10.0 }
    }
}

/// Loss terms of one scale. `gan_*` are the discriminator-side adversarial
/// values, `cyc_*` the L1 cycle errors of the blur and sharp cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleLosses {
    pub gan_bs: f64,
    pub gan_sb: f64,
    pub cyc_b: f64,
    pub cyc_s: f64,
}

impl ScaleLosses {
    pub fn weighted(&self, w: LossWeights) -> f64 {
        w.adv * (self.gan_bs + self.gan_sb) + w.cyc * (self.cyc_b + self.cyc_s)
    }

    pub fn cycle(&self) -> f64 {
        self.cyc_b + self.cyc_s
    }

    /// The first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("gan_bs", self.gan_bs), ("gan_sb", self.gan_sb), ("cyc_b", self.cyc_b), ("cyc_s", self.cyc_s)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Weighted sum over scales.
pub fn total_loss(per_scale: &[ScaleLosses], weights: LossWeights) -> Result<f64> {
    if per_scale.is_empty() {
        return Err(Error::Invalid("total loss needs at least one scale".into()));
    }
    Ok(per_scale.iter().map(|s| s.weighted(weights)).sum())
}

/// Per-scale terms (coarsest first) with their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub scales: Vec<ScaleLosses>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn new(scales: Vec<ScaleLosses>, weights: LossWeights) -> Result<Self> {
        let total = total_loss(&scales, weights)?;
        Ok(Self { scales, weights, total })
    }

    pub fn finest(&self) -> &ScaleLosses {
        self.scales.last().expect("bundle has at least one scale")
    }

    /// Component-wise sum over scales.
    pub fn summed(&self) -> ScaleLosses {
        self.scales.iter().fold(ScaleLosses::default(), |a, s| ScaleLosses {
            gan_bs: a.gan_bs + s.gan_bs,
            gan_sb: a.gan_sb + s.gan_sb,
            cyc_b: a.cyc_b + s.cyc_b,
            cyc_s: a.cyc_s + s.cyc_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn uninformative_discriminator_value() {
        let z = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let v = gan_loss(&z, &z, Side::Discriminator).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn generator_objective_approaches_zero_from_below() {
        let mut prev = f64::NEG_INFINITY;
        for logit in [-2.0, 0.0, 2.0, 5.0, 10.0, 30.0] {
            let v = gan_loss(&t(&[0.0]), &t(&[logit]), Side::Generator).unwrap();
            assert!(v < 0.0 || logit >= 30.0);
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > -1e-12);
    }

    #[test]
    fn discriminator_objective_peaks_at_confident_correct_scores() {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for r in -6..=6 {
            for f in -6..=6 {
                let (r, f) = (r as f64, f as f64);
                let v = gan_loss(&t(&[r]), &t(&[f]), Side::Discriminator).unwrap();
                if v > best.0 {
                    best = (v, r, f);
                }
            }
        }
        assert_eq!((best.1, best.2), (6.0, -6.0));
    }

    #[test]
    fn batch_permutation_invariant() {
        let a = gan_loss(&t(&[0.3, -1.0, 2.0]), &t(&[1.5, 0.1, -0.7]), Side::Discriminator).unwrap();
        let b = gan_loss(&t(&[2.0, 0.3, -1.0]), &t(&[-0.7, 1.5, 0.1]), Side::Discriminator).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn cycle_loss_cases() {
        let a = t(&[0.1, -0.4, 0.9, 0.0]);
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.1);
        assert!((cycle_loss(&shifted, &a).unwrap() - 0.1).abs() < 1e-12);
        let b = t(&[0.5, 0.2, -0.3, 0.7]);
        assert_eq!(cycle_loss(&a, &b).unwrap(), cycle_loss(&b, &a).unwrap());
        assert!(cycle_loss(&a, &t(&[0.0])).is_err());

        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(shifted);
        let v = cycle_objective(&mut tape, y, x).unwrap();
        assert!((tape.value(v).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_composition() {
        let row = ScaleLosses { gan_bs: 0.0, gan_sb: 0.0, cyc_b: 0.2, cyc_s: 0.2 };
        let w = LossWeights::default();
        assert!((total_loss(&[row], w).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(total_loss(&[row], LossWeights { adv: 0.0, cyc: 0.0 }).unwrap(), 0.0);
        let one = total_loss(&[row], w).unwrap();
        assert!((total_loss(&[row; 3], w).unwrap() - 3.0 * one).abs() < 1e-12);
        assert!(total_loss(&[], w).is_err());
    }

    #[test]
    fn non_finite_term_is_named() {
        let row = ScaleLosses { cyc_s: f64::NAN, ..Default::default() };
        assert_eq!(row.non_finite(), Some("cyc_s"));
        assert_eq!(ScaleLosses::default().non_finite(), None);
    }
}

//! Adversarial losses for the standard and Wasserstein objectives.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Standard,
    Wgan,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Standard => "standard",
            Objective::Wgan => "wgan",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Objective::Standard),
            "wgan" => Ok(Objective::Wgan),
            _ => Err(Error::Config(format!(
                "unknown objective `{s}` (expected standard or wgan)"
            ))),
        }
    }
}

/// Generator loss for the standard objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GeneratorLoss {
    /// `-mean(log D(G(z)))`
    #[default]
    NonSaturating,
    /// `mean(log(1 - D(G(z))))`
    Minimax,
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non-saturating",
            GeneratorLoss::Minimax => "minimax",
        })
    }
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-saturating" => Ok(GeneratorLoss::NonSaturating),
            "minimax" => Ok(GeneratorLoss::Minimax),
            _ => Err(Error::Config(format!(
                "unknown generator loss `{s}` (expected non-saturating or minimax)"
            ))),
        }
    }
}

fn check_probabilities<T: Real>(tape: &Tape<T>, v: Var, which: &str) -> Result<()> {
    let bad = tape
        .value(v)
        .data()
        .iter()
        .find(|x| !(**x >= T::zero() && **x <= T::one()));
    match bad {
        Some(x) => Err(Error::Domain(format!(
            "{which} output {x} is not a probability"
        ))),
        None => Ok(()),
    }
}

fn mean_log<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    let eps = T::lit(PROB_EPS);
    let l = tape.log_clamped(p, eps, T::one() - eps);
    tape.mean(l)
}

fn mean_log_complement<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    let q = tape.scale_shift(p, -T::one(), T::one());
    mean_log(tape, q)
}

/// Discriminator (critic) loss from its outputs on a real and a fake batch.
pub fn d_loss<T: Real>(
    tape: &mut Tape<T>,
    objective: Objective,
    real: Var,
    fake: Var,
) -> Result<Var> {
    match objective {
        Objective::Standard => {
            check_probabilities(tape, real, "discriminator")?;
            check_probabilities(tape, fake, "discriminator")?;
            let a = mean_log(tape, real);
            let b = mean_log_complement(tape, fake);
            let s = tape.add(a, b)?;
            Ok(tape.scale_shift(s, -T::one(), T::zero()))
        }
        Objective::Wgan => {
            let r = tape.mean(real);
            let f = tape.mean(fake);
            let neg_r = tape.scale_shift(r, -T::one(), T::zero());
            tape.add(f, neg_r)
        }
    }
}

pub fn g_loss<T: Real>(
    tape: &mut Tape<T>,
    objective: Objective,
    form: GeneratorLoss,
    fake: Var,
) -> Result<Var> {
    match objective {
        Objective::Standard => {
            check_probabilities(tape, fake, "discriminator")?;
            Ok(match form {
                GeneratorLoss::NonSaturating => {
                    let l = mean_log(tape, fake);
                    tape.scale_shift(l, -T::one(), T::zero())
                }
                GeneratorLoss::Minimax => mean_log_complement(tape, fake),
            })
        }
        Objective::Wgan => {
            let m = tape.mean(fake);
            Ok(tape.scale_shift(m, -T::one(), T::zero()))
        }
    }
}

fn batch(values: &[f64]) -> Result<Tensor<f64>> {
    Tensor::new([values.len()], values.to_vec())
}

/// [`d_loss`] evaluated on plain values.
pub fn d_loss_value(objective: Objective, real: &[f64], fake: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(batch(real)?);
    let f = tape.constant(batch(fake)?);
    let l = d_loss(&mut tape, objective, r, f)?;
    Ok(tape.value(l).data()[0])
}

/// [`g_loss`] evaluated on plain values.
pub fn g_loss_value(objective: Objective, form: GeneratorLoss, fake: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(batch(fake)?);
    let l = g_loss(&mut tape, objective, form, f)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn standard_losses_at_chance() {
        let half = [0.5; 4];
        let d = d_loss_value(Objective::Standard, &half, &half).unwrap();
        assert!((d - 2.0 * LN2).abs() < 1e-12);
        let g = g_loss_value(Objective::Standard, GeneratorLoss::NonSaturating, &half).unwrap();
        assert!((g - LN2).abs() < 1e-12);
        let mm = g_loss_value(Objective::Standard, GeneratorLoss::Minimax, &half).unwrap();
        assert!((mm + LN2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let eps = 1e-9;
        let d = d_loss_value(Objective::Standard, &[1.0 - eps], &[eps]).unwrap();
        assert!(d.abs() < 1e-6, "{d}");
        let saturated = d_loss_value(Objective::Standard, &[1.0], &[0.0]).unwrap();
        assert!(saturated.is_finite() && saturated >= 0.0);
    }

    #[test]
    fn wgan_losses_follow_definition() {
        let d = d_loss_value(Objective::Wgan, &[2.0, 4.0], &[1.0, 1.0]).unwrap();
        assert!((d + 2.0).abs() < 1e-12);
        let g = g_loss_value(Objective::Wgan, GeneratorLoss::NonSaturating, &[0.5, 1.5]).unwrap();
        assert!((g + 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_rejects_non_probabilities() {
        assert!(matches!(
            d_loss_value(Objective::Standard, &[1.5], &[0.5]),
            Err(Error::Domain(_))
        ));
        assert!(g_loss_value(Objective::Standard, GeneratorLoss::Minimax, &[f64::NAN]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for o in [Objective::Standard, Objective::Wgan] {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        for g in [GeneratorLoss::NonSaturating, GeneratorLoss::Minimax] {
            assert_eq!(g.to_string().parse::<GeneratorLoss>().unwrap(), g);
        }
    }
}

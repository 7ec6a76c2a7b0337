//! The three objective terms (content adversarial, domain adversarial, KL)
//! and their weighted total.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` here and only here
//! before any logarithm.

use std::fmt::Display;

use crate::error::{Error, Result};
use crate::model::StyleCode;
use crate::scalar::Scalar;
use crate::tensor::{ReduceOp, Tape, Var};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub content: f64,
    pub domain: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { content: 1.0, domain: 1.0, kl: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.content, self.domain, self.kl].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub content_adv: T,
    pub domain_adv: T,
    pub kl: T,
    pub total: T,
    pub content_disc: T,
    pub domain_disc: T,
}

pub const LOSS_CSV_HEADER: &str = "step,content_adv,domain_adv,kl,total,content_disc,domain_disc";

impl<T: Scalar> LossBreakdown<T> {
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.content_adv, self.domain_adv, self.kl, self.total, self.content_disc, self.domain_disc
        )
    }

    pub fn terms(&self) -> [(&'static str, T); 6] {
        [
            ("content_adv", self.content_adv),
            ("domain_adv", self.domain_adv),
            ("kl", self.kl),
            ("total", self.total),
            ("content_disc", self.content_disc),
            ("domain_disc", self.domain_disc),
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Parses one CSV row back into `(step, breakdown)`.
pub fn parse_csv_row<T: Scalar + std::str::FromStr>(line: &str) -> Result<(u64, LossBreakdown<T>)>
where
    <T as std::str::FromStr>::Err: Display,
{
    let bad = |m: String| Error::Config(format!("bad loss row `{line}`: {m}"));
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 7 {
        return Err(bad(format!("expected 7 fields, got {}", fields.len())));
    }
    let step = fields[0].parse::<u64>().map_err(|e| bad(e.to_string()))?;
    let mut v = [T::zero(); 6];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f.parse::<T>().map_err(|e| bad(e.to_string()))?;
    }
    Ok((
        step,
        LossBreakdown { content_adv: v[0], domain_adv: v[1], kl: v[2], total: v[3], content_disc: v[4], domain_disc: v[5] },
    ))
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if let Some(i) = tape.value(v).data().iter().position(|x| x.is_nan()) {
        return Err(Error::NonFinite(format!("{what}: NaN at index {i}")));
    }
    Ok(())
}

fn clamp_prob<T: Scalar>(tape: &mut Tape<T>, p: Var, what: &str) -> Result<Var> {
    check_finite(tape, p, what)?;
    tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// `mean(log p)` over a clamped probability vector.
fn mean_log<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let l = tape.log(p)?;
    tape.mean_all(l)
}

/// `mean(log(1 − p))`.
fn mean_log_complement<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let q = tape.affine(p, -1.0, 1.0)?;
    mean_log(tape, q)
}

/// `mean[½ log d + ½ log(1 − d)]` for one population.
fn symmetric_term<T: Scalar>(tape: &mut Tape<T>, d: Var) -> Result<Var> {
    let a = mean_log(tape, d)?;
    let b = mean_log_complement(tape, d)?;
    let s = tape.add(a, b)?;
    tape.affine(s, 0.5, 0.0)
}

/// Content adversarial objective on real codes `E(x)` and re-encoded generated
/// codes `E(G(·))`. Peaks at `2·log ½` when both populations score ½; the
/// encoder/generator side maximizes it.
pub fn content_adv_loss_g<T: Scalar>(tape: &mut Tape<T>, dc_real: Var, dc_fake: Var) -> Result<Var> {
    let r = clamp_prob(tape, dc_real, "content discriminator (real)")?;
    let f = clamp_prob(tape, dc_fake, "content discriminator (fake)")?;
    let a = symmetric_term(tape, r)?;
    let b = symmetric_term(tape, f)?;
    tape.add(a, b)
}

/// Binary cross-entropy with real = 1, fake = 0.
fn bce_real_fake<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, what: &str) -> Result<Var> {
    let r = clamp_prob(tape, real, what)?;
    let f = clamp_prob(tape, fake, what)?;
    let lr = mean_log(tape, r)?;
    let lf = mean_log_complement(tape, f)?;
    let s = tape.add(lr, lf)?;
    tape.neg(s)
}

/// Content discriminator loss: real codes from X, fake codes from generated images.
pub fn content_disc_loss<T: Scalar>(tape: &mut Tape<T>, dc_real: Var, dc_fake: Var) -> Result<Var> {
    bce_real_fake(tape, dc_real, dc_fake, "content discriminator")
}

pub fn domain_disc_loss<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    bce_real_fake(tape, d_real, d_fake, "domain discriminator")
}

/// Non-saturating generator loss `−mean log d_fake`.
pub fn domain_gen_loss<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let f = clamp_prob(tape, d_fake, "domain discriminator (fake)")?;
    let l = mean_log(tape, f)?;
    tape.neg(l)
}

/// `(disc_loss, gen_loss)` for the domain discriminator.
pub fn domain_adv_losses<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    Ok((domain_disc_loss(tape, d_real, d_fake)?, domain_gen_loss(tape, d_fake)?))
}

/// Closed-form `KL(N(mu, diag e^{log_var}) ‖ N(0, I))`, averaged over the batch.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, code: &StyleCode) -> Result<Var> {
    for (v, what) in [(code.mu, "mu"), (code.log_var, "log_var")] {
        if let Some(i) = tape.value(v).data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("kl_loss: {what} non-finite at index {i}")));
        }
    }
    let n = tape.shape(code.mu)[0];
    let mu2 = tape.square(code.mu)?;
    let ev = tape.exp(code.log_var)?;
    let s = tape.add(mu2, ev)?;
    let s = tape.sub(s, code.log_var)?;
    let s = tape.affine(s, 1.0, -1.0)?;
    let per_sample = tape.reduce(s, &[1], ReduceOp::Sum)?;
    let per_sample = tape.reshape(per_sample, &[n])?;
    let m = tape.mean_all(per_sample)?;
    tape.affine(m, 0.5, 0.0)
}

/// `λ_content·content_adv + λ_domain·domain_adv + λ_kl·kl`.
pub fn total_loss<T: Scalar>(content_adv: T, domain_adv: T, kl: T, w: &LossWeights) -> T {
    T::lit(w.content) * content_adv + T::lit(w.domain) * domain_adv + T::lit(w.kl) * kl
}

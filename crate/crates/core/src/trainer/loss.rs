//! Losses over the tabular backend with exact gradients.
//!
//! Per token, with `ρ = exp(new − old)` and `d = ref − new`:
//!
//! ```text
//! surrogate = min(ρ·A, clip(ρ, 1 − ε_lo, 1 + ε_hi)·A)
//! k3        = exp(d) − d − 1
//! loss      = −mean_seq mean_tok surrogate + β · mean_seq mean_tok k3
//! ```

use crate::policy::{Gradient, Row, TabularPolicy, TokenSite};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub clip_lower: f64,
    pub clip_upper: f64,
    pub kl_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    pub site: TokenSite,
    pub old_logprob: f64,
    pub ref_logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<TokenRecord>,
    pub advantage: f64,
}

/// A successful-or-not second attempt re-keyed to the deployment context.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample {
    pub tokens: Vec<TokenRecord>,
    pub reward: f64,
}

/// A state visited by the deployment policy, seen from both contexts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePair {
    pub student: Row,
    pub teacher: Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdSample {
    pub states: Vec<StatePair>,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Gradient,
    pub active_tokens: usize,
    /// Tokens dropped because their importance ratio was not finite.
    pub masked_tokens: usize,
    /// Zero-probability support mismatches clamped in the KL variant.
    pub support_mismatches: usize,
    /// Nothing contributed; the caller must not step.
    pub skipped: bool,
}

pub fn clip(ratio: f64, clip: &ClipParams) -> f64 {
    ratio.clamp(1.0 - clip.clip_lower, 1.0 + clip.clip_upper)
}

pub fn surrogate(ratio: f64, advantage: f64, params: &ClipParams) -> f64 {
    (ratio * advantage).min(clip(ratio, params) * advantage)
}

pub fn k3(ref_logprob: f64, new_logprob: f64) -> f64 {
    let d = ref_logprob - new_logprob;
    d.exp() - d - 1.0
}

/// Clipped surrogate with k3 regularization, averaged per sequence then
/// over sequences.
pub fn policy_loss(policy: &TabularPolicy, batch: &[SequenceSample], params: &ClipParams, temperature: f64) -> LossOutput {
    let mut out = LossOutput { grad: Gradient::new(policy.n_actions()), ..Default::default() };
    let live: Vec<(&SequenceSample, Vec<(TokenRecord, f64, f64)>)> = batch
        .iter()
        .map(|seq| {
            let mut kept = Vec::with_capacity(seq.tokens.len());
            for tok in &seq.tokens {
                let new = policy.log_prob(&tok.site, temperature);
                let ratio = (new - tok.old_logprob).exp();
                if !ratio.is_finite() || !new.is_finite() || !seq.advantage.is_finite() {
                    out.masked_tokens += 1;
                } else {
                    kept.push((*tok, new, ratio));
                }
            }
            (seq, kept)
        })
        .filter(|(_, kept)| !kept.is_empty())
        .collect();
    if live.is_empty() {
        out.skipped = true;
        return out;
    }
    let n_seq = live.len() as f64;
    for (seq, kept) in &live {
        let a = seq.advantage;
        let weight = 1.0 / (n_seq * kept.len() as f64);
        for (tok, new, ratio) in kept {
            let unclipped = ratio * a;
            let clipped = clip(*ratio, params) * a;
            let kl = k3(tok.ref_logprob, *new);
            out.loss += weight * (-unclipped.min(clipped) + params.kl_coef * kl);
            // d(−surrogate)/d new: the unclipped branch carries ρ·A, the clipped
            // branch is constant outside the trust region.
            let d_surr = if unclipped <= clipped { -unclipped } else { 0.0 };
            let d_kl = params.kl_coef * (1.0 - (tok.ref_logprob - new).exp());
            policy.accumulate_log_prob_grad(&tok.site, temperature, weight * (d_surr + d_kl), &mut out.grad);
            out.active_tokens += 1;
        }
    }
    out
}

/// Supervised internalization: `−𝕀(r2 > 0) · mean_tok log π(y2 | x)`,
/// averaged over all samples. Each token's log-probability is capped at
/// `old + ln(1 + clip_upper)` so the off-policy step stays in the same trust
/// region as the RL update.
pub fn distill_loss(policy: &TabularPolicy, batch: &[DistillSample], clip_upper: f64, temperature: f64) -> LossOutput {
    let mut out = LossOutput { grad: Gradient::new(policy.n_actions()), ..Default::default() };
    if batch.is_empty() {
        out.skipped = true;
        return out;
    }
    let n = batch.len() as f64;
    let cap_offset = (1.0 + clip_upper).ln();
    for sample in batch.iter().filter(|s| s.reward > 0.0) {
        let kept: Vec<(&TokenRecord, f64)> = sample
            .tokens
            .iter()
            .filter_map(|t| {
                let lp = policy.log_prob(&t.site, temperature);
                if lp.is_finite() && t.old_logprob.is_finite() {
                    Some((t, lp))
                } else {
                    out.masked_tokens += 1;
                    None
                }
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        let weight = 1.0 / (n * kept.len() as f64);
        for (tok, lp) in kept {
            let cap = tok.old_logprob + cap_offset;
            out.loss -= weight * lp.min(cap);
            if lp < cap {
                policy.accumulate_log_prob_grad(&tok.site, temperature, -weight, &mut out.grad);
            }
            out.active_tokens += 1;
        }
    }
    out.skipped = out.active_tokens == 0;
    out
}

/// Probabilities below this are treated as zero support.
pub const SUPPORT_FLOOR: f64 = 1e-300;

/// `KL(p ‖ q)` over a shared finite support, with the number of actions where
/// `p > 0` but `q` is numerically zero (those terms use `q = SUPPORT_FLOOR`).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> (f64, usize) {
    let mut kl = 0.0;
    let mut mismatches = 0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        let qi = if qi < SUPPORT_FLOOR {
            mismatches += 1;
            SUPPORT_FLOOR
        } else {
            qi
        };
        kl += pi * (pi.ln() - qi.ln());
    }
    (kl, mismatches)
}

/// On-policy reverse-KL internalization:
/// `𝕀(r2 > 0) · mean_states KL(π(·|x,Δ) ‖ π(·|x))` on states visited by the
/// deployment policy. Only the deployment logits receive gradient.
pub fn od_loss(policy: &TabularPolicy, batch: &[OdSample], temperature: f64) -> LossOutput {
    let mut out = LossOutput { grad: Gradient::new(policy.n_actions()), ..Default::default() };
    if batch.is_empty() {
        out.skipped = true;
        return out;
    }
    let n = batch.len() as f64;
    for sample in batch.iter().filter(|s| s.reward > 0.0 && !s.states.is_empty()) {
        let weight = 1.0 / (n * sample.states.len() as f64);
        for pair in &sample.states {
            let teacher = policy.distribution(&pair.teacher, temperature);
            let student = policy.distribution(&pair.student, temperature);
            let (kl, mismatches) = kl_divergence(&teacher, &student);
            out.loss += weight * kl;
            out.support_mismatches += mismatches;
            // ∂KL/∂l_b = (q_b − p_b)/T for b in the student's support.
            for b in 0..policy.n_actions() {
                if pair.student.allowed & (1 << b) != 0 {
                    out.grad.add_row(&pair.student, b, weight * (student[b] - teacher[b]) / temperature);
                }
            }
            out.active_tokens += 1;
        }
    }
    out.skipped = out.active_tokens == 0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ACTIONS;
    use crate::policy::ContextKey;

    const PARAMS: ClipParams = ClipParams { clip_lower: 0.2, clip_upper: 0.28, kl_coef: 0.001 };

    fn site(key: u64, action: usize) -> TokenSite {
        TokenSite { row: Row::plain(ContextKey(key), 0b1111), action }
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate(1.0, 0.7, &PARAMS), 0.7);
        assert!((surrogate(1.5, 1.0, &PARAMS) - 1.28).abs() < 1e-15);
        assert_eq!(k3(-0.3, -0.3), 0.0);
    }

    #[test]
    fn on_policy_loss_is_minus_advantage() {
        let p = TabularPolicy::new(&ACTIONS);
        let lp = 0.25f64.ln();
        let tok = TokenRecord { site: site(1, 0), old_logprob: lp, ref_logprob: lp };
        let out = policy_loss(&p, &[SequenceSample { tokens: vec![tok], advantage: 0.4 }], &PARAMS, 1.0);
        assert!((out.loss + 0.4).abs() < 1e-12);
        assert_eq!(out.active_tokens, 1);
    }

    #[test]
    fn non_finite_ratio_is_masked() {
        let p = TabularPolicy::new(&ACTIONS);
        let lp = 0.25f64.ln();
        let bad = TokenRecord { site: site(1, 0), old_logprob: f64::NEG_INFINITY, ref_logprob: lp };
        let good = TokenRecord { site: site(1, 1), old_logprob: lp, ref_logprob: lp };
        let out = policy_loss(&p, &[SequenceSample { tokens: vec![bad, good], advantage: 1.0 }], &PARAMS, 1.0);
        assert_eq!((out.masked_tokens, out.active_tokens), (1, 1));
        let all_bad = policy_loss(&p, &[SequenceSample { tokens: vec![bad], advantage: 1.0 }], &PARAMS, 1.0);
        assert!(all_bad.skipped);
    }

    #[test]
    fn distill_indicator() {
        let mut p = TabularPolicy::new(&ACTIONS);
        p.set_logit(ContextKey(1), 2, 1.0);
        let lp = p.log_prob(&site(1, 2), 1.0);
        let tok = TokenRecord { site: site(1, 2), old_logprob: lp, ref_logprob: lp };
        let off = distill_loss(&p, &[DistillSample { tokens: vec![tok], reward: 0.0 }], 0.28, 1.0);
        assert_eq!(off.loss, 0.0);
        assert!(off.grad.is_zero());
        let on = distill_loss(&p, &[DistillSample { tokens: vec![tok], reward: 1.0 }], 0.28, 1.0);
        assert!((on.loss + lp).abs() < 1e-12);
    }

    #[test]
    fn two_action_kl_closed_form() {
        let (kl, m) = kl_divergence(&[0.8, 0.2], &[0.5, 0.5]);
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.1927).abs() < 5e-5);
        assert_eq!(m, 0);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).0, 0.0);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).1, 1);
    }

    #[test]
    fn od_loss_zero_when_contexts_agree_or_reward_zero() {
        let mut p = TabularPolicy::new(&ACTIONS);
        p.set_logit(ContextKey(2), 0, 2.0);
        let row = |k| Row::plain(ContextKey(k), 0b1111);
        let pair = StatePair { student: row(1), teacher: row(2) };
        assert_eq!(od_loss(&p, &[OdSample { states: vec![pair], reward: 0.0 }], 1.0).loss, 0.0);
        let same = StatePair { student: row(1), teacher: row(3) };
        assert_eq!(od_loss(&p, &[OdSample { states: vec![same], reward: 1.0 }], 1.0).loss, 0.0);
        let out = od_loss(&p, &[OdSample { states: vec![pair], reward: 1.0 }], 1.0);
        assert!(out.loss > 0.0);
        // Descending moves the student toward the teacher's favourite action.
        let mut q = p.clone();
        q.descend(&out.grad, 0.5);
        assert!(q.log_prob(&site(1, 0), 1.0) > p.log_prob(&site(1, 0), 1.0));
    }
}

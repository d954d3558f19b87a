//! Softmax policy over a finite action vocabulary with one logit row per
//! context key. Rows that were never written read as zeros (uniform).
//!
//! A context conditioned on reflection or memory scores actions with its own
//! row plus the row of the same context with the conditioning stripped, so
//! whatever the deployment context has learned carries over. With
//! temperature `T`, allowed set `M` (from advice) and `l = θ[key] + θ[base]`:
//!
//! ```text
//! π(a | row) = exp(l[a] / T) / Σ_{b ∈ M} exp(l[b] / T)      a ∈ M
//! ∂ log π(a | row) / ∂ θ[·, b] = (1[a = b] − π(b | row)) / T   b ∈ M, for both rows
//! ```

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::advice::{action_mask, parse_advice};
use super::{Backend, Completion, Context, ContextKey, Guidance, Policy, PolicyError, SamplingParams};

/// Bit `i` set ⇔ action `i` may be chosen.
pub type ActionMask = u32;

/// Where a decision is scored: the context's own row, the shared
/// deployment-context row when the context is conditioned, and the actions
/// advice leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Row {
    pub key: ContextKey,
    pub base: Option<ContextKey>,
    pub allowed: ActionMask,
}

impl Row {
    /// An unconditioned row over `allowed`.
    pub fn plain(key: ContextKey, allowed: ActionMask) -> Self {
        Row { key, base: None, allowed }
    }

    fn permits(&self, action: usize) -> bool {
        self.allowed & (1 << action) != 0
    }
}

/// A single scored decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSite {
    pub row: Row,
    pub action: usize,
}

/// Sparse gradient over logit rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: HashMap<ContextKey, Vec<f64>>,
    width: usize,
}

impl Gradient {
    pub fn new(width: usize) -> Self {
        Gradient { rows: HashMap::new(), width }
    }

    pub fn add(&mut self, key: ContextKey, action: usize, value: f64) {
        let width = self.width;
        self.rows.entry(key).or_insert_with(|| vec![0.0; width])[action] += value;
    }

    /// Adds `value` to the entry of `action` in every parameter row of `row`.
    pub fn add_row(&mut self, row: &Row, action: usize, value: f64) {
        self.add(row.key, action, value);
        if let Some(base) = row.base {
            self.add(base, action, value);
        }
    }

    pub fn get(&self, key: ContextKey, action: usize) -> f64 {
        self.rows.get(&key).map_or(0.0, |r| r[action])
    }

    pub fn merge(&mut self, other: &Gradient, scale: f64) {
        for (k, row) in &other.rows {
            for (a, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    self.add(*k, a, scale * v);
                }
            }
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = ContextKey> + '_ {
        self.rows.keys().copied()
    }

    pub fn norm(&self) -> f64 {
        self.rows.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSnapshot {
    pub actions: Vec<String>,
    /// Hex context key → logits.
    pub rows: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    actions: Vec<String>,
    table: HashMap<ContextKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(actions: &[&str]) -> Self {
        assert!(!actions.is_empty() && actions.len() <= 32, "1..=32 actions supported");
        TabularPolicy { actions: actions.iter().map(|a| a.to_string()).collect(), table: HashMap::new() }
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn full_mask(&self) -> ActionMask {
        if self.actions.len() == 32 {
            u32::MAX
        } else {
            (1 << self.actions.len()) - 1
        }
    }

    /// Number of rows that have been written.
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn logit(&self, key: ContextKey, action: usize) -> f64 {
        self.table.get(&key).map_or(0.0, |row| row[action])
    }

    pub fn set_logit(&mut self, key: ContextKey, action: usize, value: f64) {
        let n = self.actions.len();
        self.table.entry(key).or_insert_with(|| vec![0.0; n])[action] = value;
    }

    pub fn action_index(&self, token: &str) -> Result<usize, PolicyError> {
        self.actions
            .iter()
            .position(|a| a == token)
            .ok_or_else(|| PolicyError::UnknownToken(token.to_string()))
    }

    fn check_vocabulary(&self, ctx: &Context<'_>) -> Result<(), PolicyError> {
        let same = ctx.action_space.len() == self.actions.len()
            && ctx.action_space.iter().zip(&self.actions).all(|(a, b)| *a == b);
        if same {
            Ok(())
        } else {
            Err(PolicyError::Unsupported(format!(
                "tabular backend needs the finite action space {:?}, context offers {:?}",
                self.actions, ctx.action_space
            )))
        }
    }

    /// Actions permitted by reflection or memory advice at this observation.
    pub fn mask_for(&self, ctx: &Context<'_>) -> ActionMask {
        let mut advice = Vec::new();
        if let Guidance::Reflection(text) = &ctx.conditioning.guidance {
            advice.extend(parse_advice(text));
        }
        if let Some(m) = &ctx.conditioning.memory {
            advice.extend(parse_advice(m));
        }
        let names: Vec<&str> = self.actions.iter().map(String::as_str).collect();
        action_mask(&advice, ctx.observation, &names) & self.full_mask()
    }

    pub fn row_for(&self, ctx: &Context<'_>) -> Row {
        let base = (!ctx.conditioning.is_plain()).then(|| ctx.deploy_key());
        Row { key: ctx.key(), base, allowed: self.mask_for(ctx) }
    }

    pub fn site(&self, ctx: &Context<'_>, token: &str) -> Result<TokenSite, PolicyError> {
        Ok(TokenSite { row: self.row_for(ctx), action: self.action_index(token)? })
    }

    fn effective_logit(&self, row: &Row, action: usize) -> f64 {
        self.logit(row.key, action) + row.base.map_or(0.0, |b| self.logit(b, action))
    }

    /// Tempered distribution over all actions (zeros outside `row.allowed`).
    /// `temperature == 0` yields the greedy one-hot.
    pub fn distribution(&self, row: &Row, temperature: f64) -> Vec<f64> {
        let n = self.actions.len();
        let allowed_idx: Vec<usize> = (0..n).filter(|&i| row.permits(i)).collect();
        let mut probs = vec![0.0; n];
        if allowed_idx.is_empty() {
            return probs;
        }
        if temperature <= 0.0 {
            let best = allowed_idx
                .iter()
                .copied()
                .max_by(|&a, &b| self.effective_logit(row, a).total_cmp(&self.effective_logit(row, b)).then(b.cmp(&a)))
                .expect("non-empty");
            probs[best] = 1.0;
            return probs;
        }
        let z: Vec<f64> = allowed_idx.iter().map(|&i| self.effective_logit(row, i) / temperature).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (&i, e) in allowed_idx.iter().zip(exps) {
            probs[i] = e / total;
        }
        probs
    }

    pub fn log_prob(&self, site: &TokenSite, temperature: f64) -> f64 {
        let row = &site.row;
        if !row.permits(site.action) {
            return f64::NEG_INFINITY;
        }
        if temperature <= 0.0 {
            return self.distribution(row, 0.0)[site.action].ln();
        }
        let z: Vec<f64> = (0..self.actions.len())
            .filter(|&i| row.permits(i))
            .map(|i| self.effective_logit(row, i) / temperature)
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.effective_logit(row, site.action) / temperature - lse
    }

    /// Accumulates `scale · ∂ log π(site) / ∂ θ` into `grad`.
    pub fn accumulate_log_prob_grad(&self, site: &TokenSite, temperature: f64, scale: f64, grad: &mut Gradient) {
        let probs = self.distribution(&site.row, temperature);
        for (b, p) in probs.iter().enumerate() {
            if !site.row.permits(b) {
                continue;
            }
            let indicator = if b == site.action { 1.0 } else { 0.0 };
            grad.add_row(&site.row, b, scale * (indicator - p) / temperature);
        }
    }

    /// `θ ← θ − step · grad`.
    pub fn descend(&mut self, grad: &Gradient, step: f64) {
        let n = self.actions.len();
        for (key, row) in &grad.rows {
            let target = self.table.entry(*key).or_insert_with(|| vec![0.0; n]);
            for (t, g) in target.iter_mut().zip(row) {
                *t -= step * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.table.values().flatten().all(|v| v.is_finite())
    }

    /// Exact per-token log-probabilities of `completion` under this table.
    pub fn score(&self, ctx: &Context<'_>, completion: &Completion, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        self.check_vocabulary(ctx)?;
        completion
            .tokens
            .iter()
            .map(|t| self.site(ctx, t).map(|s| self.log_prob(&s, temperature)))
            .collect()
    }

    pub fn snapshot(&self) -> TabularSnapshot {
        TabularSnapshot {
            actions: self.actions.clone(),
            rows: self.table.iter().map(|(k, v)| (k.to_hex(), v.clone())).collect(),
        }
    }

    pub fn from_snapshot(snap: &TabularSnapshot) -> Result<Self, String> {
        if snap.actions.is_empty() || snap.actions.len() > 32 {
            return Err("1..=32 actions supported".into());
        }
        let mut table = HashMap::with_capacity(snap.rows.len());
        for (hex, row) in &snap.rows {
            let key = ContextKey::from_hex(hex).ok_or_else(|| format!("bad context key {hex:?}"))?;
            if row.len() != snap.actions.len() || row.iter().any(|v| !v.is_finite()) {
                return Err(format!("row {hex} malformed"));
            }
            table.insert(key, row.clone());
        }
        Ok(TabularPolicy { actions: snap.actions.clone(), table })
    }
}

/// Keeps the `top_k` most likely actions, then the smallest prefix whose mass
/// reaches `top_p`, and renormalizes.
fn truncate(probs: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for i in kept {
        out[i] = probs[i] / mass;
    }
    out
}

impl Policy for TabularPolicy {
    fn backend(&self) -> Backend {
        Backend::Tabular
    }

    fn generate(
        &self,
        ctx: &Context<'_>,
        sampling: &SamplingParams,
        rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        self.check_vocabulary(ctx)?;
        let row = self.row_for(ctx);
        let probs = self.distribution(&row, sampling.temperature);
        let decode = truncate(&probs, sampling.top_k, sampling.top_p);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = decode.iter().rposition(|p| *p > 0.0).expect("some action allowed");
        for (i, p) in decode.iter().enumerate() {
            acc += p;
            if *p > 0.0 && u < acc {
                choice = i;
                break;
            }
        }
        let site = TokenSite { row, action: choice };
        let action = self.actions[choice].clone();
        Ok(Completion {
            text: format!("```{action}```"),
            tokens: vec![action],
            logprobs: Some(vec![self.log_prob(&site, sampling.temperature)]),
            backend: Backend::Tabular,
        })
    }
}

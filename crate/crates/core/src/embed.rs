//! Action embeddings.

use crate::model::{fnv1a, ActionRecord, FactValue};

pub trait Embedder: Send + Sync {
    fn dimensionality(&self) -> usize;
    fn embed(&self, action: &ActionRecord) -> Vec<f64>;
}

/// Bag of hashed tokens, L2-normalised. Tokens are `key:value` pairs of the
/// canonical action plus the word pieces of every value. The action id and
/// timestamp are left out so that re-submissions of the same action embed
/// identically.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim: dim.max(1) }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(Self::DEFAULT_DIM)
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn push_value(out: &mut Vec<String>, key: &str, value: &str) {
    out.push(format!("{key}:{}", value.to_lowercase()));
    out.extend(words(value));
}

pub fn tokens(action: &ActionRecord) -> Vec<String> {
    let mut out = Vec::new();
    push_value(&mut out, "action", &action.action);
    push_value(&mut out, "intent", &action.intent);
    push_value(&mut out, "actor", &action.actor);
    for (k, v) in &action.context_facts {
        match v {
            FactValue::List(items) => {
                for item in items {
                    push_value(&mut out, k, &item.render());
                }
            }
            other => push_value(&mut out, k, &other.render()),
        }
    }
    if let Some(s) = action.data_sensitivity {
        push_value(&mut out, "data_sensitivity", s.as_str());
    }
    out
}

impl Embedder for HashEmbedder {
    fn dimensionality(&self) -> usize {
        self.dim
    }

    fn embed(&self, action: &ActionRecord) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens(action) {
            v[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        normalize(&mut v);
        v
    }
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

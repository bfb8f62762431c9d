//! Normal-prototype extraction, nearest-prototype assignment and the two
//! prototype losses (coherence and diversity-aware alignment).

use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, FeedForward, Norm, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeConfig {
    /// Number of prototypes `M`.
    pub count: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            count: 6,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Learnable tokens plus one pre-norm cross-attention block and FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorLayout {
    pub tokens: ParamId,
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub mlp: FeedForward,
    pub count: usize,
    pub dim: usize,
}

impl ExtractorLayout {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        dim: usize,
        config: &PrototypeConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.count == 0 {
            return Err(Error::Config("at least one prototype is required".into()));
        }
        let tokens = (0..config.count * dim)
            .map(|_| T::lit(rng.trunc_normal(crate::nn::INIT_STD)))
            .collect();
        let tokens = ps.add(
            "proto.tokens",
            Tensor::new(vec![config.count, dim], tokens)?,
        );
        Ok(ExtractorLayout {
            tokens,
            norm_q: Norm::init(ps, "proto.norm_q", dim),
            norm_kv: Norm::init(ps, "proto.norm_kv", dim),
            attn: Attention::init(ps, "proto.attn", dim, config.heads, rng)?,
            norm_ffn: Norm::init(ps, "proto.norm_ffn", dim),
            mlp: FeedForward::init(ps, "proto.mlp", dim, dim * config.mlp_ratio, rng),
            count: config.count,
            dim,
        })
    }
}

pub struct Extraction {
    /// Prototypes `P`, `M × C`.
    pub prototypes: Var,
    /// Per-head `M × N` attention of tokens over features.
    pub attention: Vec<Var>,
}

/// `P = x + FFN(LN(x))` with `x = t + CrossAttn(LN(t), LN(F_Q))`.
pub fn extract_prototypes<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: &ExtractorLayout,
    features: Var,
) -> Result<Extraction> {
    let c = *g.shape(features).last().unwrap_or(&0);
    if g.shape(features).len() != 2 || c != layout.dim {
        return Err(Error::Config(format!(
            "extractor expects N x {} features, got {:?}",
            layout.dim,
            g.shape(features)
        )));
    }
    let tokens = p.var(layout.tokens);
    let q = layout.norm_q.forward(g, p, tokens)?;
    let kv = layout.norm_kv.forward(g, p, features)?;
    let att = layout.attn.forward_with_weights(g, p, q, kv)?;
    let x = g.add(tokens, att.out)?;
    let h = layout.norm_ffn.forward(g, p, x)?;
    let h = layout.mlp.forward(g, p, h)?;
    let prototypes = g.add(x, h)?;
    Ok(Extraction {
        prototypes,
        attention: att.weights,
    })
}

/// Nearest-prototype assignment of every feature token.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTable {
    /// Owning prototype per token.
    pub owner: Vec<usize>,
    /// Token indices per prototype; a partition of `0..N`.
    pub groups: Vec<Vec<usize>>,
    /// Cosine distance of each token to its owner.
    pub distance: Vec<f64>,
}

impl AssignmentTable {
    fn from_distances<T: Real>(d: &[T], n: usize, m: usize) -> Self {
        let mut owner = Vec::with_capacity(n);
        let mut distance = Vec::with_capacity(n);
        let mut groups = vec![Vec::new(); m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let mut best = 0;
            for j in 1..m {
                // strict: ties keep the lowest index
                if row[j] < row[best] {
                    best = j;
                }
            }
            owner.push(best);
            distance.push(row[best].f64());
            groups[best].push(i);
        }
        AssignmentTable {
            owner,
            groups,
            distance,
        }
    }

    pub fn tokens(&self) -> usize {
        self.owner.len()
    }

    pub fn histogram(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.len()).collect()
    }
}

/// Exact argmin of cosine distance per token; ties go to the lowest index.
pub fn assign<T: Real>(features: &Tensor<T>, prototypes: &Tensor<T>) -> Result<AssignmentTable> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let p = g.constant(prototypes.clone());
    let d = g.cosine_distance_matrix(f, p)?;
    let (n, m) = (g.shape(d)[0], g.shape(d)[1]);
    Ok(AssignmentTable::from_distances(g.value(d).data(), n, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoLossKind {
    Coherence,
    Daa,
}

impl ProtoLossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtoLossKind::Coherence => "coherence",
            ProtoLossKind::Daa => "daa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "coherence" | "coh" => Some(ProtoLossKind::Coherence),
            "daa" => Some(ProtoLossKind::Daa),
            _ => None,
        }
    }
}

pub struct ProtoLoss {
    pub loss: Var,
    pub table: AssignmentTable,
}

/// Shared machinery of both losses: distances from detached features to the
/// prototypes, hard assignment on their values, then a fixed linear
/// combination of the assigned distances.
fn assigned_distance_loss<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    prototypes: Var,
    coeff: impl Fn(&AssignmentTable, usize, usize) -> f64,
) -> Result<ProtoLoss> {
    let f = g.stop_gradient(features);
    let d = g.cosine_distance_matrix(f, prototypes)?;
    let (n, m) = (g.shape(d)[0], g.shape(d)[1]);
    let table = AssignmentTable::from_distances(g.value(d).data(), n, m);
    let mut weights = vec![T::zero(); n * m];
    for (i, &j) in table.owner.iter().enumerate() {
        weights[i * m + j] = T::lit(coeff(&table, i, j));
    }
    let w = g.constant(Tensor::new(vec![n, m], weights)?);
    let weighted = g.mul(d, w)?;
    let loss = g.sum(weighted);
    Ok(ProtoLoss { loss, table })
}

/// Mean over tokens of the distance to the nearest prototype.
pub fn coherence_loss<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    prototypes: Var,
) -> Result<ProtoLoss> {
    let n = g.shape(features)[0] as f64;
    assigned_distance_loss(g, features, prototypes, |_, _, _| 1.0 / n)
}

/// Per-prototype mean distance of its assigned tokens, summed over non-empty
/// groups and divided by `M`.
pub fn daa_loss<T: Real>(g: &mut Graph<T>, features: Var, prototypes: Var) -> Result<ProtoLoss> {
    let m = g.shape(prototypes)[0] as f64;
    assigned_distance_loss(g, features, prototypes, |table, _, j| {
        1.0 / (m * table.groups[j].len() as f64)
    })
}

pub fn prototype_loss<T: Real>(
    g: &mut Graph<T>,
    kind: ProtoLossKind,
    features: Var,
    prototypes: Var,
) -> Result<ProtoLoss> {
    match kind {
        ProtoLossKind::Coherence => coherence_loss(g, features, prototypes),
        ProtoLossKind::Daa => daa_loss(g, features, prototypes),
    }
}

/// Token count per prototype.
pub fn assignment_histogram(table: &AssignmentTable, m: usize) -> Vec<usize> {
    let mut counts = vec![0; m];
    for &o in &table.owner {
        counts[o] += 1;
    }
    counts
}

/// Shannon entropy (natural log) of the normalized counts.
pub fn assignment_entropy(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Argument("entropy of an empty histogram".into()));
    }
    let total = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Fraction of tokens owned by the most popular prototype.
pub fn max_share(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / total as f64
}

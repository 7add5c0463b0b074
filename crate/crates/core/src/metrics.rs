//! Embedding-based diversity and coherence metrics, and PCA plot data.
//!
//! The encoder is the deterministic base model itself: the mean of its
//! final-norm hidden states over the text positions, L2-normalized.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelRef, NoHooks};
use crate::tokenizer;

/// Unit-norm vector, or a flagged zero vector for empty input.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub empty: bool,
}

/// Text encoder backed by a frozen model; memoizes repeated inputs.
pub struct Encoder<'m> {
    model: ModelRef<'m, f32>,
    memo: HashMap<Vec<u32>, Embedding>,
}

impl<'m> Encoder<'m> {
    pub fn new(params: &'m ModelParams<f32>) -> Self {
        Self { model: ModelRef::new(params), memo: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.model.config().d_model
    }

    /// Mean final hidden state over `tokens`, read with a leading `BOS` as
    /// context but averaged over the given tokens only.
    pub fn embed(&mut self, tokens: &[u32]) -> Result<Embedding> {
        if tokens.is_empty() {
            return Ok(Embedding { vector: vec![0.0; self.dim()], empty: true });
        }
        if let Some(e) = self.memo.get(tokens) {
            return Ok(e.clone());
        }
        let max = self.model.config().max_seq_len;
        let mut input = vec![tokenizer::BOS];
        input.extend_from_slice(&tokens[..tokens.len().min(max - 1)]);
        let hidden = self.model.hidden(&input, 1, &mut NoHooks)?;
        let d = hidden.cols();
        let mut v = vec![0.0; d];
        for row in hidden.data().chunks(d).skip(1) {
            v.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric("embedding has zero or non-finite norm".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let e = Embedding { vector: v, empty: false };
        self.memo.insert(tokens.to_vec(), e.clone());
        Ok(e)
    }

    /// Embeds text; characters outside the vocabulary are an error.
    pub fn embed_text(&mut self, text: &str) -> Result<Embedding> {
        let ids = tokenizer::encode(text)?;
        self.embed(&ids)
    }
}

/// `a·b / (|a||b| + 1e-8)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-8)
}

/// Mean of `1 − cos` over all unordered pairs. Identical embeddings are at
/// distance exactly 0; the guard in [`cosine`] would otherwise leave a
/// residue of order `1e-8 / |x|²`.
pub fn pairwise_cosine_diversity(vectors: &[Vec<f64>]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Contract(format!("diversity needs at least 2 vectors, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if vectors[i] != vectors[j] {
                total += 1.0 - cosine(&vectors[i], &vectors[j]);
            }
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Newline-delimited reasoning steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepChain {
    pub steps: Vec<String>,
}

/// Splits on newlines and drops blank segments.
pub fn segment_steps(text: &str) -> StepChain {
    StepChain { steps: text.split('\n').filter(|s| !s.trim().is_empty()).map(String::from).collect() }
}

/// Mean cosine between consecutive step embeddings; `None` for fewer than
/// two steps.
pub fn scs(chain: &StepChain, mut encode: impl FnMut(&str) -> Result<Vec<f64>>) -> Result<Option<f64>> {
    if chain.steps.len() < 2 {
        return Ok(None);
    }
    let embs = chain.steps.iter().map(|s| encode(s)).collect::<Result<Vec<_>>>()?;
    let total: f64 = embs.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(Some(total / (embs.len() - 1) as f64))
}

/// Principal-component projection.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `n × out_dim` coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal axes, one per output dimension (zeros when padded).
    pub components: Vec<Vec<f64>>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set when the data has fewer than `out_dim` non-trivial directions.
    pub degenerate: bool,
}

/// Projects onto the top `out_dim` eigenvectors of the (1/n) covariance.
/// Each axis is oriented so its largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>], out_dim: usize) -> Result<Projection> {
    let n = points.len();
    if n <= out_dim {
        return Err(Error::Contract(format!("PCA to {out_dim} dims needs more than {out_dim} points, got {n}")));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("points must share a positive dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(1e-300);
    let mut components = Vec::with_capacity(out_dim);
    let mut degenerate = false;
    for c in 0..out_dim {
        if c >= d || eigenvalues[c] <= 1e-12 * scale || eigenvalues[c] == 0.0 {
            degenerate = true;
            components.push(vec![0.0; d]);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(order[c]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    let coords = (0..n)
        .map(|i| components.iter().map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum()).collect())
        .collect();
    Ok(Projection { coords, components, eigenvalues, mean, degenerate })
}

/// One row of the diversity table.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    pub config: String,
    pub sigma: f64,
    pub temperature: f64,
    pub diversity: f64,
    pub scs_mean: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn diversity_csv(rows: &[DiversityRow]) -> String {
    let mut s = String::from("config,sigma,temperature,diversity,scs_mean\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{}", r.config, r.sigma, r.temperature, r.diversity, opt(r.scs_mean));
    }
    s
}

/// One point of the PCA scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub prompt_id: usize,
    pub member_k: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub label: String,
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut s = String::from("prompt_id,member_k,pc1,pc2,label\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.prompt_id, r.member_k, r.pc1, r.pc2, r.label);
    }
    s
}

//! Label inference by an honest-but-curious non-label party.
//!
//! Both attacks only read what that party legitimately sees: the cut
//! gradients it receives and the federated embeddings it produces.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};
use crate::metrics;
use crate::protocol::{MessageKind, ProtocolMessage};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceEntry {
    pub sample_id: String,
    /// Most recent cut-gradient row received for the sample.
    pub gradient: Option<Vec<f64>>,
    /// Most recent federated-embedding row sent for the sample.
    pub embedding: Option<Vec<f64>>,
    pub gradients_seen: usize,
}

/// Per-sample view accumulated from boundary messages, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackTrace {
    entries: Vec<TraceEntry>,
    index: HashMap<String, usize>,
}

impl AttackTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_messages<'a>(msgs: impl IntoIterator<Item = &'a ProtocolMessage>) -> Self {
        let mut t = AttackTrace::new();
        msgs.into_iter().for_each(|m| t.observe(m));
        t
    }

    fn entry(&mut self, id: &str) -> &mut TraceEntry {
        let idx = match self.index.get(id) {
            Some(&i) => i,
            None => {
                self.entries.push(TraceEntry {
                    sample_id: id.to_string(),
                    ..TraceEntry::default()
                });
                self.index.insert(id.to_string(), self.entries.len() - 1);
                self.entries.len() - 1
            }
        };
        &mut self.entries[idx]
    }

    pub fn observe(&mut self, msg: &ProtocolMessage) {
        let rows = msg.to_tensor();
        for (i, id) in msg.batch_ids.iter().enumerate() {
            let row = rows.row(i).to_vec();
            let e = self.entry(id);
            match msg.kind {
                MessageKind::CutGradientBatch => {
                    e.gradient = Some(row);
                    e.gradients_seen += 1;
                }
                MessageKind::FederatedEmbeddingBatch => e.embedding = Some(row),
            }
        }
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Scores keyed by sample ID; higher means "more likely positive".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub sample_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Samples that could not be scored (no gradient observed).
    pub excluded: usize,
    /// Cluster attack: hard assignment to the smaller cluster.
    pub predicted_positive: Option<Vec<bool>>,
    /// Set when the attack could not separate anything (e.g. identical inputs).
    pub degenerate: bool,
}

impl AttackScores {
    /// Aligns scores with a label lookup and computes LeakAUC.
    pub fn leak_auc(&self, labels: &HashMap<String, u8>) -> Result<f64> {
        let mut s = Vec::with_capacity(self.scores.len());
        let mut y = Vec::with_capacity(self.scores.len());
        for (id, &score) in self.sample_ids.iter().zip(&self.scores) {
            let l = labels
                .get(id)
                .ok_or_else(|| VflError::invalid(format!("no label for {id}")))?;
            s.push(score);
            y.push(*l);
        }
        leak_auc(&s, &y)
    }
}

/// Gradient-norm attack: score = ‖g‖₂ of the last gradient seen per sample.
pub fn norm_attack(trace: &AttackTrace) -> Result<AttackScores> {
    if trace.is_empty() {
        return Err(VflError::invalid("empty attack trace"));
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut excluded = 0;
    for e in trace.entries() {
        match &e.gradient {
            Some(g) => {
                ids.push(e.sample_id.clone());
                scores.push(l2_norm(g));
            }
            None => excluded += 1,
        }
    }
    Ok(AttackScores {
        sample_ids: ids,
        scores,
        excluded,
        predicted_positive: None,
        degenerate: false,
    })
}

pub const KMEANS_ITERATIONS: usize = 50;

#[derive(Clone, Debug)]
pub struct TwoMeans {
    pub centroids: [Vec<f64>; 2],
    pub assignment: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn farthest_from(x: &Tensor, p: &[f64]) -> usize {
    let mut best = (0, -1.0);
    for (i, row) in x.iter_rows().enumerate() {
        let d = sq_dist(row, p);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Lloyd's 2-means. Initialization approximates the farthest pair with two
/// sweeps from a seeded random start: a = farthest(start), b = farthest(a).
pub fn two_means<R: Rng + ?Sized>(x: &Tensor, iterations: usize, rng: &mut R) -> Option<TwoMeans> {
    let n = x.rows();
    if n < 2 {
        return None;
    }
    let start = rng.random_range(0..n);
    let a = farthest_from(x, x.row(start));
    let b = farthest_from(x, x.row(a));
    if sq_dist(x.row(a), x.row(b)) == 0.0 {
        return None;
    }
    let mut centroids = [x.row(a).to_vec(), x.row(b).to_vec()];
    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, row) in x.iter_rows().enumerate() {
            let c = usize::from(sq_dist(row, &centroids[1]) < sq_dist(row, &centroids[0]));
            if c != assignment[i] {
                assignment[i] = c;
                changed = true;
            }
        }
        let mut sums = [vec![0.0; x.cols()], vec![0.0; x.cols()]];
        let mut counts = [0usize; 2];
        for (row, &c) in x.iter_rows().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for c in 0..2 {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && counts.iter().all(|&c| c > 0) {
            break;
        }
    }
    Some(TwoMeans {
        centroids,
        assignment,
    })
}

/// Embedding-clustering attack. The smaller of two clusters is taken to be the
/// positive class; score = d(x, c_large) − d(x, c_small), so members of the
/// smaller cluster score higher. Equal cluster sizes treat cluster 0 as small.
pub fn cluster_attack<R: Rng + ?Sized>(
    sample_ids: &[String],
    embeddings: &Tensor,
    rng: &mut R,
) -> Result<AttackScores> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(VflError::invalid("cluster attack needs at least 2 embeddings"));
    }
    if sample_ids.len() != n {
        return Err(VflError::dim("cluster_attack", n, sample_ids.len()));
    }
    let Some(km) = two_means(embeddings, KMEANS_ITERATIONS, rng) else {
        return Ok(AttackScores {
            sample_ids: sample_ids.to_vec(),
            scores: vec![0.0; n],
            excluded: 0,
            predicted_positive: Some(vec![false; n]),
            degenerate: true,
        });
    };
    let size0 = km.assignment.iter().filter(|&&c| c == 0).count();
    let small = if size0 <= n - size0 { 0 } else { 1 };
    let large = 1 - small;
    let scores = embeddings
        .iter_rows()
        .map(|row| sq_dist(row, &km.centroids[large]).sqrt() - sq_dist(row, &km.centroids[small]).sqrt())
        .collect();
    Ok(AttackScores {
        sample_ids: sample_ids.to_vec(),
        scores,
        excluded: 0,
        predicted_positive: Some(km.assignment.iter().map(|&c| c == small).collect()),
        degenerate: false,
    })
}

/// Rank AUC of attacker scores against true labels.
pub fn leak_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    metrics::auc(scores, labels)
}

/// JSON attack report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub leak_auc: f64,
    pub n_samples: usize,
    pub params: serde_json::Value,
}

//! Relation-aware attentive propagation over a knowledge network and the
//! translational (projected-space) triple decoder.
//!
//! One propagation layer, for every entity `h` simultaneously:
//!
//! ```text
//! logit(h,r,t) = (W_r e_t)ᵀ tanh(W_r e_h + e_r)
//! π            = softmax over the neighbor entries of h
//! e_N(h)       = Σ π(h,r,t) e_t                      (zero when isolated)
//! e_h'         = LeakyReLU(W1 (e_h + e_N)) + LeakyReLU(W2 (e_h ⊙ e_N))
//! ```
//!
//! Triples are decoded with `g(h,r,t) = ‖W_r e_h + e_r − W_r e_t‖²` and
//! trained with `−ln σ(g(h,r,t') − g(h,r,t))` against corrupted tails.

use std::collections::{HashMap, HashSet};

use log::debug;
use rand::Rng;

use crate::attr::EntityVocab;
use crate::error::{Error, Result};
use crate::graph::{EntityKind, KnowledgeNetwork, Relation};
use crate::linalg::{
    add_assign, axpy, dot, join, leaky_relu, leaky_relu_grad, log_sigmoid, sigmoid, softmax,
    softmax_backward, visit_mat, visit_vec, Mat, Params,
};

pub const NUM_RELATIONS: usize = Relation::ALL.len();

#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    /// `W_r`, `dr × de`.
    pub w: Mat,
    /// `e_r`, length `dr`.
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w1: Mat,
    pub w2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KgParams {
    pub relations: Vec<RelationParams>,
    pub layers: Vec<LayerParams>,
}

impl KgParams {
    pub fn init<R: Rng + ?Sized>(de: usize, dr: usize, layers: usize, rng: &mut R) -> Self {
        let relations = (0..NUM_RELATIONS)
            .map(|_| RelationParams {
                w: Mat::xavier(dr, de, rng),
                e: crate::linalg::uniform_vec(dr, 1.0 / (dr as f64).sqrt(), rng),
            })
            .collect();
        let layers = (0..layers)
            .map(|_| LayerParams {
                w1: Mat::xavier(de, de, rng),
                w2: Mat::xavier(de, de, rng),
            })
            .collect();
        KgParams { relations, layers }
    }

    pub fn zeros_like(&self) -> Self {
        KgParams {
            relations: self
                .relations
                .iter()
                .map(|r| RelationParams {
                    w: Mat::zeros(r.w.rows, r.w.cols),
                    e: vec![0.0; r.e.len()],
                })
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w1: Mat::zeros(l.w1.rows, l.w1.cols),
                    w2: Mat::zeros(l.w2.rows, l.w2.cols),
                })
                .collect(),
        }
    }

    pub fn entity_dim(&self) -> usize {
        self.relations[0].w.cols
    }

    pub fn relation_dim(&self) -> usize {
        self.relations[0].w.rows
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

impl Params for KgParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        for (r, rp) in Relation::ALL.iter().zip(&self.relations) {
            let p = join(prefix, r.as_str());
            visit_mat(&p, "w", &rp.w, f);
            visit_vec(&p, "e", &rp.e, f);
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            visit_mat(&p, "w1", &l.w1, f);
            visit_mat(&p, "w2", &l.w2, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (r, rp) in Relation::ALL.iter().zip(self.relations.iter_mut()) {
            let p = join(prefix, r.as_str());
            f(join(&p, "w"), &mut rp.w.data);
            f(join(&p, "e"), &mut rp.e);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            f(join(&p, "w1"), &mut l.w1.data);
            f(join(&p, "w2"), &mut l.w2.data);
        }
    }
}

// ---------------------------------------------------------------------------
// Elementary operations

/// `(W_r e_t)ᵀ tanh(W_r e_h + e_r)`
pub fn attention_logit(e_h: &[f64], e_t: &[f64], rel: &RelationParams) -> f64 {
    let ph = rel.w.matvec(e_h);
    let pt = rel.w.matvec(e_t);
    ph.iter()
        .zip(&rel.e)
        .zip(&pt)
        .map(|((a, b), c)| c * (a + b).tanh())
        .sum()
}

/// Softmax over one entity's neighbor logits.
pub fn attention_weights(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// `Σ π_i · tail_i`; the zero vector when there are no tails.
pub fn aggregate(dim: usize, tails: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (t, w) in tails.iter().zip(weights) {
        axpy(*w, t, &mut out);
    }
    out
}

pub fn bi_interaction(e_h: &[f64], e_n: &[f64], layer: &LayerParams) -> Vec<f64> {
    let sum: Vec<f64> = e_h.iter().zip(e_n).map(|(a, b)| a + b).collect();
    let prod: Vec<f64> = e_h.iter().zip(e_n).map(|(a, b)| a * b).collect();
    let z1 = layer.w1.matvec(&sum);
    let z2 = layer.w2.matvec(&prod);
    z1.iter()
        .zip(&z2)
        .map(|(a, b)| leaky_relu(*a) + leaky_relu(*b))
        .collect()
}

/// `‖W_r e_h + e_r − W_r e_t‖²`
pub fn transr_score(e_h: &[f64], e_t: &[f64], rel: &RelationParams) -> f64 {
    let diff: Vec<f64> = e_h.iter().zip(e_t).map(|(a, b)| a - b).collect();
    let mut q = rel.w.matvec(&diff);
    add_assign(&mut q, &rel.e);
    dot(&q, &q)
}

/// `−ln σ(g_neg − g_pos)`
pub fn ranking_loss(g_pos: f64, g_neg: f64) -> f64 {
    -log_sigmoid(g_neg - g_pos)
}

// ---------------------------------------------------------------------------
// Indexed graph

/// A network compiled against an entity vocabulary: compact local node
/// indices, symmetric neighbor lists, and the triple set for rejection
/// sampling.
#[derive(Debug, Clone)]
pub struct IndexedGraph {
    /// Vocabulary row of each local node.
    pub nodes: Vec<usize>,
    local: HashMap<usize, usize>,
    kinds: Vec<EntityKind>,
    /// Per local node: `(relation index, neighbor local index)`, one entry per
    /// incident triple.
    adjacency: Vec<Vec<(usize, usize)>>,
    /// `(head, relation, tail)` in local indices, canonical direction.
    triples: Vec<(usize, usize, usize)>,
    triple_set: HashSet<(usize, usize, usize)>,
    by_kind: [Vec<usize>; 4],
}

impl IndexedGraph {
    pub fn new(net: &KnowledgeNetwork, vocab: &EntityVocab) -> Result<Self> {
        let mut nodes = Vec::with_capacity(net.entities().len());
        for e in net.entities() {
            nodes.push(
                vocab
                    .get(e)
                    .ok_or_else(|| Error::UnknownEntity(e.to_string()))?,
            );
        }
        let kinds: Vec<EntityKind> = net.entities().iter().map(|e| e.kind).collect();
        let local: HashMap<usize, usize> =
            nodes.iter().enumerate().map(|(i, &row)| (row, i)).collect();
        let triples: Vec<(usize, usize, usize)> = net
            .triples()
            .iter()
            .map(|t| {
                let h = local[&vocab.get(&t.head).expect("checked above")];
                let tl = local[&vocab.get(&t.tail).expect("checked above")];
                (h, t.relation.index(), tl)
            })
            .collect();
        Ok(Self::assemble(nodes, kinds, triples))
    }

    /// Builds from explicit local nodes and triples. Nodes without triples are
    /// isolated.
    pub fn from_parts(
        nodes: Vec<usize>,
        kinds: Vec<EntityKind>,
        triples: Vec<(usize, usize, usize)>,
    ) -> Self {
        Self::assemble(nodes, kinds, triples)
    }

    fn assemble(
        nodes: Vec<usize>,
        kinds: Vec<EntityKind>,
        triples: Vec<(usize, usize, usize)>,
    ) -> Self {
        let local = nodes.iter().enumerate().map(|(i, &row)| (row, i)).collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(h, r, t) in &triples {
            adjacency[h].push((r, t));
            adjacency[t].push((r, h));
        }
        for a in adjacency.iter_mut() {
            a.sort_unstable();
        }
        let triple_set = triples.iter().copied().collect();
        let mut by_kind: [Vec<usize>; 4] = Default::default();
        for (i, k) in kinds.iter().enumerate() {
            by_kind[*k as usize].push(i);
        }
        IndexedGraph {
            nodes,
            local,
            kinds,
            adjacency,
            triples,
            triple_set,
            by_kind,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn local_index(&self, vocab_row: usize) -> Option<usize> {
        self.local.get(&vocab_row).copied()
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn contains(&self, h: usize, r: usize, t: usize) -> bool {
        self.triple_set.contains(&(h, r, t))
    }

    pub fn neighbors(&self, local: usize) -> &[(usize, usize)] {
        &self.adjacency[local]
    }

    pub fn kind(&self, local: usize) -> EntityKind {
        self.kinds[local]
    }

    pub fn nodes_of_kind(&self, kind: EntityKind) -> &[usize] {
        &self.by_kind[kind as usize]
    }

    /// Gathers this graph's rows out of a vocabulary-indexed table.
    pub fn gather(&self, table: &Mat) -> Mat {
        let mut out = Mat::zeros(self.nodes.len(), table.cols);
        for (i, &row) in self.nodes.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(row));
        }
        out
    }

    /// Adds local rows back into a vocabulary-indexed table.
    pub fn scatter_add(&self, local: &Mat, table: &mut Mat) {
        for (i, &row) in self.nodes.iter().enumerate() {
            add_assign(table.row_mut(row), local.row(i));
        }
    }
}

/// Replaces the tail with a uniformly drawn entity of the same kind such that
/// the corrupted triple is absent from the graph. Returns `None` after
/// `|candidates|` failed draws.
pub fn negative_sample<R: Rng + ?Sized>(
    graph: &IndexedGraph,
    triple: (usize, usize, usize),
    rng: &mut R,
) -> Option<usize> {
    let (h, r, t) = triple;
    let candidates = graph.nodes_of_kind(graph.kind(t));
    for _ in 0..candidates.len() {
        let c = candidates[rng.random_range(0..candidates.len())];
        if !graph.contains(h, r, c) {
            return Some(c);
        }
    }
    debug!("no corrupted tail found for triple {triple:?}");
    None
}

// ---------------------------------------------------------------------------
// Propagation

#[derive(Debug, Clone)]
struct LayerCache {
    input: Mat,
    /// `W_r e` for every node, per relation.
    proj: Vec<Mat>,
    /// `tanh(W_r e_h + e_r)` for every node, per relation.
    tanh: Vec<Mat>,
    /// Attention weights aligned with `graph.adjacency` entries.
    pi: Vec<Vec<f64>>,
    agg: Mat,
    z1: Mat,
    z2: Mat,
}

#[derive(Debug, Clone)]
pub struct PropagationCache {
    layers: Vec<LayerCache>,
}

fn relations_in_use(graph: &IndexedGraph) -> [bool; NUM_RELATIONS] {
    let mut used = [false; NUM_RELATIONS];
    for &(_, r, _) in &graph.triples {
        used[r] = true;
    }
    used
}

fn layer_forward(graph: &IndexedGraph, h: &Mat, rels: &[RelationParams], layer: &LayerParams) -> (Mat, LayerCache) {
    let n = graph.num_nodes();
    let de = h.cols;
    let used = relations_in_use(graph);
    let mut proj = Vec::with_capacity(NUM_RELATIONS);
    let mut tanh = Vec::with_capacity(NUM_RELATIONS);
    for (r, rp) in rels.iter().enumerate() {
        if !used[r] {
            proj.push(Mat::zeros(0, 0));
            tanh.push(Mat::zeros(0, 0));
            continue;
        }
        let dr = rp.w.rows;
        let mut p = Mat::zeros(n, dr);
        let mut th = Mat::zeros(n, dr);
        for i in 0..n {
            rp.w.matvec_into(h.row(i), p.row_mut(i));
            for ((o, a), b) in th.row_mut(i).iter_mut().zip(p.row(i)).zip(&rp.e) {
                *o = (a + b).tanh();
            }
        }
        proj.push(p);
        tanh.push(th);
    }

    let mut pi = Vec::with_capacity(n);
    let mut agg = Mat::zeros(n, de);
    for i in 0..n {
        let nb = graph.neighbors(i);
        if nb.is_empty() {
            pi.push(Vec::new());
            continue;
        }
        let logits: Vec<f64> = nb
            .iter()
            .map(|&(r, t)| dot(proj[r].row(t), tanh[r].row(i)))
            .collect();
        let w = softmax(&logits);
        let a = agg.row_mut(i);
        for (&(_, t), wi) in nb.iter().zip(&w) {
            axpy(*wi, h.row(t), a);
        }
        pi.push(w);
    }

    let mut z1 = Mat::zeros(n, de);
    let mut z2 = Mat::zeros(n, de);
    let mut out = Mat::zeros(n, de);
    let mut sum = vec![0.0; de];
    let mut prod = vec![0.0; de];
    for i in 0..n {
        for k in 0..de {
            sum[k] = h.row(i)[k] + agg.row(i)[k];
            prod[k] = h.row(i)[k] * agg.row(i)[k];
        }
        layer.w1.matvec_into(&sum, z1.row_mut(i));
        layer.w2.matvec_into(&prod, z2.row_mut(i));
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(z1.row(i)).zip(z2.row(i)) {
            *o = leaky_relu(*a) + leaky_relu(*b);
        }
    }
    (
        out,
        LayerCache {
            input: h.clone(),
            proj,
            tanh,
            pi,
            agg,
            z1,
            z2,
        },
    )
}

fn layer_backward(
    graph: &IndexedGraph,
    cache: &LayerCache,
    d_out: &Mat,
    rels: &[RelationParams],
    layer: &LayerParams,
    grad_rels: &mut [RelationParams],
    grad_layer: &mut LayerParams,
) -> Mat {
    let n = graph.num_nodes();
    let de = d_out.cols;
    let h = &cache.input;
    let mut d_h = Mat::zeros(n, de);
    let mut d_agg = Mat::zeros(n, de);
    let mut dz1 = vec![0.0; de];
    let mut dz2 = vec![0.0; de];
    let mut sum = vec![0.0; de];
    let mut prod = vec![0.0; de];
    for i in 0..n {
        let g = d_out.row(i);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for k in 0..de {
            dz1[k] = g[k] * leaky_relu_grad(cache.z1.row(i)[k]);
            dz2[k] = g[k] * leaky_relu_grad(cache.z2.row(i)[k]);
            sum[k] = h.row(i)[k] + cache.agg.row(i)[k];
            prod[k] = h.row(i)[k] * cache.agg.row(i)[k];
        }
        grad_layer.w1.add_outer(&dz1, &sum);
        grad_layer.w2.add_outer(&dz2, &prod);
        let g1 = layer.w1.matvec_t(&dz1);
        let g2 = layer.w2.matvec_t(&dz2);
        let dh = d_h.row_mut(i);
        for k in 0..de {
            dh[k] += g1[k] + g2[k] * cache.agg.row(i)[k];
        }
        let da = d_agg.row_mut(i);
        for k in 0..de {
            da[k] = g1[k] + g2[k] * h.row(i)[k];
        }
    }

    let mut d_proj: Vec<Mat> = cache.proj.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    let mut d_tanh: Vec<Mat> = cache.tanh.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    for i in 0..n {
        let nb = graph.neighbors(i);
        let da = d_agg.row(i);
        if nb.is_empty() || da.iter().all(|v| *v == 0.0) {
            continue;
        }
        let pi = &cache.pi[i];
        let mut d_pi = Vec::with_capacity(nb.len());
        for (&(_, t), w) in nb.iter().zip(pi) {
            d_pi.push(dot(da, h.row(t)));
            axpy(*w, da, d_h.row_mut(t));
        }
        let d_logit = softmax_backward(pi, &d_pi);
        for (&(r, t), dl) in nb.iter().zip(&d_logit) {
            if *dl == 0.0 {
                continue;
            }
            axpy(*dl, cache.tanh[r].row(i), d_proj[r].row_mut(t));
            axpy(*dl, cache.proj[r].row(t), d_tanh[r].row_mut(i));
        }
    }

    for (r, rp) in rels.iter().enumerate() {
        if cache.proj[r].rows == 0 {
            continue;
        }
        let gr = &mut grad_rels[r];
        for i in 0..n {
            let dt = d_tanh[r].row(i);
            let th = cache.tanh[r].row(i);
            let dp = d_proj[r].row_mut(i);
            for k in 0..dt.len() {
                let du = dt[k] * (1.0 - th[k] * th[k]);
                dp[k] += du;
                gr.e[k] += du;
            }
            let dp = d_proj[r].row(i);
            if dp.iter().all(|v| *v == 0.0) {
                continue;
            }
            gr.w.add_outer(dp, h.row(i));
            rp.w.matvec_t_acc(dp, d_h.row_mut(i));
        }
    }
    d_h
}

/// Runs `params.layers.len()` synchronous propagation layers. `base` is a
/// local (graph-ordered) embedding table.
pub fn propagate(graph: &IndexedGraph, base: &Mat, params: &KgParams) -> (Mat, PropagationCache) {
    let mut h = base.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (out, cache) = layer_forward(graph, &h, &params.relations, lp);
        layers.push(cache);
        h = out;
    }
    (h, PropagationCache { layers })
}

/// Backward of [`propagate`]: accumulates parameter gradients into `grads`
/// and returns the gradient w.r.t. `base`.
pub fn propagate_backward(
    graph: &IndexedGraph,
    cache: &PropagationCache,
    d_out: &Mat,
    params: &KgParams,
    grads: &mut KgParams,
) -> Mat {
    let mut d = d_out.clone();
    for (i, lc) in cache.layers.iter().enumerate().rev() {
        d = layer_backward(
            graph,
            lc,
            &d,
            &params.relations,
            &params.layers[i],
            &mut grads.relations,
            &mut grads.layers[i],
        );
    }
    d
}

// ---------------------------------------------------------------------------
// Triple decoding loss

/// Positive triple and its corrupted tail, in local indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankingPair {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub neg_tail: usize,
}

/// Draws one negative per positive triple; triples with no valid corruption
/// are skipped.
pub fn sample_pairs<R: Rng + ?Sized>(
    graph: &IndexedGraph,
    triples: &[(usize, usize, usize)],
    rng: &mut R,
) -> Vec<RankingPair> {
    triples
        .iter()
        .filter_map(|&(h, r, t)| {
            negative_sample(graph, (h, r, t), rng).map(|neg| RankingPair {
                head: h,
                relation: r,
                tail: t,
                neg_tail: neg,
            })
        })
        .collect()
}

fn score_grad(
    emb: &Mat,
    h: usize,
    t: usize,
    rel: &RelationParams,
    upstream: f64,
    d_emb: &mut Mat,
    grad_rel: &mut RelationParams,
) {
    let diff: Vec<f64> = emb.row(h).iter().zip(emb.row(t)).map(|(a, b)| a - b).collect();
    let mut q = rel.w.matvec(&diff);
    add_assign(&mut q, &rel.e);
    let dq: Vec<f64> = q.iter().map(|v| 2.0 * upstream * v).collect();
    grad_rel.w.add_outer(&dq, &diff);
    add_assign(&mut grad_rel.e, &dq);
    let dd = rel.w.matvec_t(&dq);
    add_assign(d_emb.row_mut(h), &dd);
    axpy(-1.0, &dd, d_emb.row_mut(t));
}

/// Mean ranking loss over `pairs`, scored on `emb` (local rows). When `grad`
/// is given, accumulates `∂loss/∂emb` and relation-parameter gradients.
pub fn ranking_loss_batch(
    emb: &Mat,
    pairs: &[RankingPair],
    params: &KgParams,
    mut grad: Option<(&mut Mat, &mut KgParams)>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let rel = &params.relations[p.relation];
        let g_pos = transr_score(emb.row(p.head), emb.row(p.tail), rel);
        let g_neg = transr_score(emb.row(p.head), emb.row(p.neg_tail), rel);
        total += ranking_loss(g_pos, g_neg);
        if let Some((d_emb, gp)) = grad.as_mut() {
            // d/dg_pos = σ(g_pos − g_neg), d/dg_neg = −σ(g_pos − g_neg)
            let s = sigmoid(g_pos - g_neg) * scale;
            let gr = &mut gp.relations[p.relation];
            score_grad(emb, p.head, p.tail, rel, s, d_emb, gr);
            score_grad(emb, p.head, p.neg_tail, rel, -s, d_emb, gr);
        }
    }
    total * scale
}

/// Mean 1-based rank of the true tail among itself plus up to
/// `candidates − 1` random same-kind distractors (lower is better).
pub fn mean_tail_rank<R: Rng + ?Sized>(
    graph: &IndexedGraph,
    emb: &Mat,
    params: &KgParams,
    candidates: usize,
    rng: &mut R,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &(h, r, t) in graph.triples() {
        let pool = graph.nodes_of_kind(graph.kind(t));
        let rel = &params.relations[r];
        let g_true = transr_score(emb.row(h), emb.row(t), rel);
        let mut rank = 1usize;
        let draws = candidates.saturating_sub(1).min(pool.len().saturating_sub(1));
        let mut seen = HashSet::new();
        let mut attempts = 0;
        while seen.len() < draws && attempts < 20 * candidates {
            attempts += 1;
            let c = pool[rng.random_range(0..pool.len())];
            if c == t || !seen.insert(c) {
                continue;
            }
            if transr_score(emb.row(h), emb.row(c), rel) < g_true {
                rank += 1;
            }
        }
        total += rank as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ident_rel(d: usize) -> RelationParams {
        RelationParams {
            w: Mat::identity(d),
            e: vec![0.0; d],
        }
    }

    #[test]
    fn attention_logit_cases() {
        let zero = RelationParams {
            w: Mat::zeros(2, 2),
            e: vec![0.3, -0.2],
        };
        assert_eq!(attention_logit(&[1.0, 2.0], &[3.0, 4.0], &zero), 0.0);
        let id = ident_rel(2);
        assert_eq!(attention_logit(&[0.0, 0.0], &[5.0, -7.0], &id), 0.0);
        let v = attention_logit(&[10.0, 0.0], &[10.0, 0.0], &id);
        assert!((v - 10.0 * 10f64.tanh()).abs() < 1e-12);
        assert!((v - 9.99999).abs() < 1e-5);
    }

    #[test]
    fn attention_weight_cases() {
        assert_eq!(attention_weights(&[3.7]), vec![1.0]);
        assert_eq!(attention_weights(&[1.2, 1.2]), vec![0.5, 0.5]);
        let w = attention_weights(&[0.0, 3f64.ln()]);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn aggregate_cases() {
        let u = [1.0, 2.0];
        let v = [3.0, -2.0];
        assert_eq!(aggregate(2, &[&u], &[1.0]), u.to_vec());
        assert_eq!(aggregate(2, &[], &[]), vec![0.0, 0.0]);
        assert_eq!(aggregate(2, &[&u, &v], &[0.5, 0.5]), vec![2.0, 0.0]);
    }

    #[test]
    fn bi_interaction_cases() {
        let id = LayerParams {
            w1: Mat::identity(2),
            w2: Mat::identity(2),
        };
        let v = [0.5, 2.0];
        assert_eq!(bi_interaction(&v, &v, &id), vec![2.0 * 0.5 + 0.25, 4.0 + 4.0]);
        assert_eq!(bi_interaction(&[0.0, 0.0], &[0.0, 0.0], &id), vec![0.0, 0.0]);
        let half = LayerParams {
            w1: Mat::identity(2),
            w2: Mat::zeros(2, 2),
        };
        assert_eq!(bi_interaction(&[1.0, -1.0], &[0.0, 0.0], &half), vec![1.0, -0.01]);
    }

    #[test]
    fn transr_cases() {
        let mut rel = ident_rel(2);
        assert_eq!(transr_score(&[0.4, 0.1], &[0.4, 0.1], &rel), 0.0);
        rel.e = vec![0.0, 1.0];
        assert_eq!(transr_score(&[1.0, 0.0], &[1.0, 1.0], &rel), 0.0);
        assert_eq!(transr_score(&[1.0, 0.0], &[0.0, 0.0], &rel), 2.0);
    }

    #[test]
    fn ranking_loss_cases() {
        assert!((ranking_loss(1.3, 1.3) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = ranking_loss(0.0, 20.0);
        assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-22);
        assert!((v - 2.0611536e-9).abs() < 1e-15);
    }

    fn path_graph() -> IndexedGraph {
        // patient 0 -- doctor 1 -- hospital 2
        IndexedGraph::from_parts(
            vec![0, 1, 2],
            vec![EntityKind::Patient, EntityKind::Doctor, EntityKind::Hospital],
            vec![(0, Relation::PatDoc.index(), 1), (1, Relation::DocHosp.index(), 2)],
        )
    }

    #[test]
    fn one_layer_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = KgParams::init(4, 3, 1, &mut rng);
        let g = path_graph();
        let base = Mat::uniform(3, 4, 1.0, &mut rng);
        let (out, _) = propagate(&g, &base, &params);
        for i in 0..3 {
            let nb = g.neighbors(i);
            let logits: Vec<f64> = nb
                .iter()
                .map(|&(r, t)| attention_logit(base.row(i), base.row(t), &params.relations[r]))
                .collect();
            let w = attention_weights(&logits);
            let tails: Vec<&[f64]> = nb.iter().map(|&(_, t)| base.row(t)).collect();
            let agg = aggregate(4, &tails, &w);
            let expect = bi_interaction(base.row(i), &agg, &params.layers[0]);
            for (a, b) in out.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn edgeless_graph_maps_through_zero_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = KgParams::init(3, 2, 1, &mut rng);
        let g = IndexedGraph::from_parts(vec![0, 1], vec![EntityKind::Patient, EntityKind::Doctor], vec![]);
        let base = Mat::uniform(2, 3, 1.0, &mut rng);
        let (out, _) = propagate(&g, &base, &params);
        for i in 0..2 {
            assert_eq!(out.row(i), bi_interaction(base.row(i), &[0.0; 3], &params.layers[0]).as_slice());
        }
    }

    #[test]
    fn two_hop_reachability_matches_unrolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = KgParams::init(3, 2, 2, &mut rng);
        let g = path_graph();
        let base = Mat::uniform(3, 3, 1.0, &mut rng);
        let (out, _) = propagate(&g, &base, &params);

        // Hand-unrolled two layers.
        let layer = |h: &Mat, lp: &LayerParams| -> Mat {
            let mut o = Mat::zeros(3, 3);
            for i in 0..3 {
                let nb = g.neighbors(i);
                let logits: Vec<f64> = nb
                    .iter()
                    .map(|&(r, t)| attention_logit(h.row(i), h.row(t), &params.relations[r]))
                    .collect();
                let w = attention_weights(&logits);
                let tails: Vec<&[f64]> = nb.iter().map(|&(_, t)| h.row(t)).collect();
                let agg = aggregate(3, &tails, &w);
                o.row_mut(i).copy_from_slice(&bi_interaction(h.row(i), &agg, lp));
            }
            o
        };
        let h1 = layer(&base, &params.layers[0]);
        let h2 = layer(&h1, &params.layers[1]);
        for (a, b) in out.data.iter().zip(&h2.data) {
            assert!((a - b).abs() < 1e-13);
        }

        // Node 0 (patient) depends on node 2 (hospital) after two layers...
        let mut moved = base.clone();
        moved.row_mut(2)[0] += 0.5;
        let (out2, _) = propagate(&g, &moved, &params);
        assert_ne!(out.row(0), out2.row(0));
        // ...but not after one.
        let one = KgParams {
            relations: params.relations.clone(),
            layers: vec![params.layers[0].clone()],
        };
        assert_eq!(propagate(&g, &base, &one).0.row(0), propagate(&g, &moved, &one).0.row(0));
    }

    #[test]
    fn negative_sampling_properties() {
        // patient 0 linked to doctors 1, 2; doctors 3, 4 are free.
        let pd = Relation::PatDoc.index();
        let g = IndexedGraph::from_parts(
            vec![0, 1, 2, 3, 4],
            vec![
                EntityKind::Patient,
                EntityKind::Doctor,
                EntityKind::Doctor,
                EntityKind::Doctor,
                EntityKind::Doctor,
            ],
            vec![(0, pd, 1), (0, pd, 2)],
        );
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| negative_sample(&g, (0, pd, 1), &mut rng))
                .collect::<Vec<_>>()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        // Up to |candidates| draws, so a miss is possible but rare.
        let a: Vec<usize> = a.into_iter().flatten().collect();
        assert!(a.len() >= 40, "{}", a.len());
        for c in a {
            assert!(c == 3 || c == 4);
            assert!(!g.contains(0, pd, c));
            assert_eq!(g.kind(c), EntityKind::Doctor);
        }

        // Saturated: every doctor already linked.
        let g = IndexedGraph::from_parts(
            vec![0, 1],
            vec![EntityKind::Patient, EntityKind::Doctor],
            vec![(0, pd, 1)],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(negative_sample(&g, (0, pd, 1), &mut rng), None);
    }
}

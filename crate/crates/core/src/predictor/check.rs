//! Finite-difference certification of every hand-derived backward pass,
//! block by block and end to end.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::{bce_loss_weighted, classifier_backward, classifier_forward, AblationMode, ClassifierParams, ModelConfig};
use crate::attr::{encode_all, encode_all_backward, AttrDims, AttrEncoderParams};
use crate::error::Result;
use crate::fusion::{CrossAttnParams, CrossMpm, Modality, RepKey, Role};
use crate::gradcheck::{check, GradReport};
use crate::graph::{EntityKind, Relation};
use crate::kg::{propagate, propagate_backward, ranking_loss_batch, sample_pairs, IndexedGraph, KgParams};
use crate::linalg::{join, visit_mat, Mat, Params};
use crate::synthgen::{generate, GenConfig};
use crate::temporal::{fuse_local_global, fuse_local_global_backward, TemporalParams};

/// Tolerance for blocks with nonlinearities.
pub const TOLERANCE: f64 = 1e-3;
/// Tolerance for blocks whose loss is linear in the checked parameters.
pub const LINEAR_TOLERANCE: f64 = 1e-6;

const MAX_COORDS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradBlock {
    /// Classifier output layer with frozen hidden activations.
    Linear,
    Attr,
    KgAttention,
    KgBiInteraction,
    KgTransR,
    KgPropagate,
    Temporal,
    CrossMpm,
    Classifier,
    EndToEnd,
}

impl GradBlock {
    pub const ALL: [GradBlock; 10] = [
        GradBlock::Linear,
        GradBlock::Attr,
        GradBlock::KgAttention,
        GradBlock::KgBiInteraction,
        GradBlock::KgTransR,
        GradBlock::KgPropagate,
        GradBlock::Temporal,
        GradBlock::CrossMpm,
        GradBlock::Classifier,
        GradBlock::EndToEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradBlock::Linear => "linear",
            GradBlock::Attr => "attr",
            GradBlock::KgAttention => "kg-attention",
            GradBlock::KgBiInteraction => "kg-bi-interaction",
            GradBlock::KgTransR => "kg-transr",
            GradBlock::KgPropagate => "kg-propagate",
            GradBlock::Temporal => "temporal",
            GradBlock::CrossMpm => "cross-mpm",
            GradBlock::Classifier => "classifier",
            GradBlock::EndToEnd => "end-to-end",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradBlock::Linear => LINEAR_TOLERANCE,
            _ => TOLERANCE,
        }
    }
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradBlock {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        GradBlock::ALL
            .iter()
            .copied()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = GradBlock::ALL.iter().map(|b| b.as_str()).collect();
                format!("unknown block `{s}` ({})", names.join(", "))
            })
    }
}

// ---------------------------------------------------------------------------
// Parameter wrappers for mixed inputs

#[derive(Debug, Clone)]
struct Tensors(Vec<Mat>);

impl Params for Tensors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        for (i, m) in self.0.iter().enumerate() {
            visit_mat(prefix, &format!("x{i}"), m, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, m) in self.0.iter_mut().enumerate() {
            f(join(prefix, &format!("x{i}")), &mut m.data);
        }
    }
}

#[derive(Debug, Clone)]
struct Both<A, B>(A, B);

impl<A: Params, B: Params> Params for Both<A, B> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.0.visit(&join(prefix, "params"), f);
        self.1.visit(&join(prefix, "input"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.0.visit_mut(&join(prefix, "params"), f);
        self.1.visit_mut(&join(prefix, "input"), f);
    }
}

/// KG parameters restricted to the relation tensors (attention and TransR)
/// or to the layer tensors (bi-interaction aggregator).
#[derive(Debug, Clone)]
struct KgPart {
    kg: KgParams,
    relations: bool,
}

impl Params for KgPart {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        let keep = self.relations;
        self.kg.visit(prefix, &mut |name, dims, d| {
            if is_layer(prefix, &name) != keep {
                f(name, dims, d)
            }
        });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        let keep = self.relations;
        self.kg.visit_mut(prefix, &mut |name, d| {
            if is_layer(prefix, &name) != keep {
                f(name, d)
            }
        });
    }
}

fn is_layer(prefix: &str, name: &str) -> bool {
    name.strip_prefix(prefix)
        .unwrap_or(name)
        .trim_start_matches('.')
        .starts_with("layer")
}

/// Output-layer weights of a classifier.
#[derive(Debug, Clone)]
struct Head {
    w3: Vec<f64>,
    b3: f64,
}

impl Params for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(join(prefix, "w3"), vec![self.w3.len()], &self.w3);
        f(join(prefix, "b3"), vec![1], std::slice::from_ref(&self.b3));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "w3"), &mut self.w3);
        f(join(prefix, "b3"), std::slice::from_mut(&mut self.b3));
    }
}

// ---------------------------------------------------------------------------
// Fixtures

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::uniform(rows, cols, 1.0, rng)
}

fn half_sq_err(out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
    (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
}

/// Moves every coordinate off its initial value; zero-initialized biases
/// would otherwise sit exactly on LeakyReLU kinks.
fn jitter<P: Params>(p: &mut P, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
}

/// A small heterogeneous graph with every relation present.
fn small_graph(rng: &mut ChaCha8Rng) -> IndexedGraph {
    let kinds: Vec<EntityKind> = [
        (EntityKind::Patient, 3),
        (EntityKind::Doctor, 3),
        (EntityKind::Hospital, 2),
        (EntityKind::Disease, 2),
    ]
    .iter()
    .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
    .collect();
    let of = |k: EntityKind| -> Vec<usize> { (0..kinds.len()).filter(|&i| kinds[i] == k).collect() };
    let mut triples = Vec::new();
    for r in Relation::ALL {
        let (hk, tk) = r.endpoints();
        let (hs, ts) = (of(hk), of(tk));
        for _ in 0..3 {
            let t = (hs[rng.random_range(0..hs.len())], r.index(), ts[rng.random_range(0..ts.len())]);
            if !triples.contains(&t) {
                triples.push(t);
            }
        }
    }
    IndexedGraph::from_parts((0..kinds.len()).collect(), kinds, triples)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        entity_dim: 6,
        relation_dim: 4,
        attr_dim: 4,
        id_dim: 4,
        layers: 2,
        text_dim: 8,
        fusion_dim: 16,
        hidden: 6,
        window_length: 14 * 86_400,
        observation_span: 60 * 86_400,
        ..ModelConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Checks

/// Certifies one block on a seeded random instance.
pub fn grad_check(block: GradBlock, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = block.tolerance();
    let name = block.as_str();
    Ok(match block {
        GradBlock::Linear => {
            let base = ClassifierParams::init(5, 4, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let with_head = |h: &Head| {
                let mut p = base.clone();
                p.w3.clone_from(&h.w3);
                p.b3 = h.b3;
                p
            };
            let head = Head {
                w3: base.w3.clone(),
                b3: 0.3,
            };
            let p = with_head(&head);
            let (_, cache) = classifier_forward(&x, &p);
            let mut g = p.zeros_like();
            classifier_backward(&cache, 1.0, &p, &mut g);
            let analytic = Head { w3: g.w3, b3: g.b3 };
            check(name, &head, &analytic, |h| classifier_forward(&x, &with_head(h)).0, tol, MAX_COORDS)
        }
        GradBlock::Attr => {
            let (k, n) = (6, 5);
            let mut p = AttrEncoderParams::init(k, n, AttrDims { attr: 4, id: 3, out: 5 }, &mut rng);
            jitter(&mut p, &mut rng);
            let lists: Vec<Vec<usize>> = (0..n)
                .map(|i| rand::seq::index::sample(&mut rng, k, i % 4).into_vec())
                .collect();
            let target = random_mat(n, 5, &mut rng);
            let loss = |p: &AttrEncoderParams| {
                let (out, _) = encode_all(&lists, p).expect("valid fixture");
                half_sq_err(&out.data, &target.data).0
            };
            let (out, caches) = encode_all(&lists, &p)?;
            let d = Mat {
                data: half_sq_err(&out.data, &target.data).1,
                ..out
            };
            let mut g = p.zeros_like();
            encode_all_backward(&caches, &d, &p, &mut g);
            check(name, &p, &g, loss, tol, MAX_COORDS)
        }
        GradBlock::KgAttention | GradBlock::KgBiInteraction => {
            let graph = small_graph(&mut rng);
            let kg = KgParams::init(4, 3, 1, &mut rng);
            let base = random_mat(graph.num_nodes(), 4, &mut rng);
            let target = random_mat(graph.num_nodes(), 4, &mut rng);
            let relations = block == GradBlock::KgAttention;
            let loss = |p: &KgPart| half_sq_err(&propagate(&graph, &base, &p.kg).0.data, &target.data).0;
            let (out, cache) = propagate(&graph, &base, &kg);
            let d = Mat {
                data: half_sq_err(&out.data, &target.data).1,
                ..out
            };
            let mut g = kg.zeros_like();
            propagate_backward(&graph, &cache, &d, &kg, &mut g);
            check(
                name,
                &KgPart { kg, relations },
                &KgPart { kg: g, relations },
                loss,
                tol,
                MAX_COORDS,
            )
        }
        GradBlock::KgTransR => {
            let graph = small_graph(&mut rng);
            let kg = KgParams::init(4, 3, 1, &mut rng);
            let emb = random_mat(graph.num_nodes(), 4, &mut rng);
            let pairs = sample_pairs(&graph, graph.triples(), &mut rng);
            let point = Both(KgPart { kg: kg.clone(), relations: true }, Tensors(vec![emb.clone()]));
            let loss = |p: &Both<KgPart, Tensors>| ranking_loss_batch(&p.1 .0[0], &pairs, &p.0.kg, None);
            let mut d_emb = Mat::zeros(emb.rows, emb.cols);
            let mut g = kg.zeros_like();
            ranking_loss_batch(&emb, &pairs, &kg, Some((&mut d_emb, &mut g)));
            let analytic = Both(KgPart { kg: g, relations: true }, Tensors(vec![d_emb]));
            check(name, &point, &analytic, loss, tol, MAX_COORDS)
        }
        GradBlock::KgPropagate => {
            let graph = small_graph(&mut rng);
            let kg = KgParams::init(4, 3, 2, &mut rng);
            let base = random_mat(graph.num_nodes(), 4, &mut rng);
            let target = random_mat(graph.num_nodes(), 4, &mut rng);
            let loss = |p: &Both<KgParams, Tensors>| {
                half_sq_err(&propagate(&graph, &p.1 .0[0], &p.0).0.data, &target.data).0
            };
            let (out, cache) = propagate(&graph, &base, &kg);
            let d = Mat {
                data: half_sq_err(&out.data, &target.data).1,
                ..out
            };
            let mut g = kg.zeros_like();
            let d_base = propagate_backward(&graph, &cache, &d, &kg, &mut g);
            check(name, &Both(kg, Tensors(vec![base])), &Both(g, Tensors(vec![d_base])), loss, tol, MAX_COORDS)
        }
        GradBlock::Temporal => {
            let de = 4;
            let mut p = TemporalParams::init(de, &mut rng);
            p.beta = 0.35;
            let (m, present) = (4, [1usize, 3, 4]);
            let mut inputs: Vec<Mat> = present.iter().map(|_| random_mat(1, de, &mut rng)).collect();
            inputs.push(random_mat(1, de, &mut rng));
            let target: Vec<f64> = (0..de).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |p: &TemporalParams, x: &Tensors| {
                let locals: Vec<(usize, &[f64])> =
                    present.iter().zip(&x.0).map(|(&k, v)| (k, v.data.as_slice())).collect();
                let global = &x.0[present.len()].data;
                fuse_local_global(&locals, global, m, p).expect("valid fixture")
            };
            let x = Tensors(inputs);
            let (out, cache) = run(&p, &x);
            let (_, d) = half_sq_err(&out, &target);
            let mut g = p.zeros_like();
            let locals: Vec<(usize, &[f64])> = present.iter().zip(&x.0).map(|(&k, v)| (k, v.data.as_slice())).collect();
            let (d_locals, d_global) = fuse_local_global_backward(&locals, m, &cache, &d, &p, &mut g);
            let mut dx: Vec<Mat> = d_locals.into_iter().map(|v| Mat { rows: 1, cols: de, data: v }).collect();
            dx.push(Mat {
                rows: 1,
                cols: de,
                data: d_global,
            });
            check(
                name,
                &Both(p.clone(), x.clone()),
                &Both(g, Tensors(dx)),
                |q: &Both<TemporalParams, Tensors>| half_sq_err(&run(&q.0, &q.1).0, &target).0,
                tol,
                MAX_COORDS,
            )
        }
        GradBlock::CrossMpm => {
            let d = 32;
            let keys = [
                (RepKey::new(Modality::Dialogue, Role::Patient), 6),
                (RepKey::new(Modality::Dialogue, Role::Doctor), 6),
                (RepKey::new(Modality::Online, Role::Doctor), 4),
                (RepKey::new(Modality::Offline, Role::Disease), 4),
            ];
            let mpm = CrossMpm::new(seed, d, &keys)?;
            let attn = CrossAttnParams::init(d, &mut rng);
            let x = Tensors(keys.iter().map(|&(_, n)| random_mat(1, n, &mut rng)).collect());
            let target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |a: &CrossAttnParams, x: &Tensors| {
                let reps: Vec<(RepKey, &[f64])> = keys.iter().zip(&x.0).map(|((k, _), v)| (*k, v.data.as_slice())).collect();
                mpm.fuse_all(&reps, a).expect("valid fixture")
            };
            let (mix, cache) = run(&attn, &x);
            let (_, d_mix) = half_sq_err(&mix, &target);
            let mut g = attn.zeros_like();
            let reps: Vec<(RepKey, &[f64])> = keys.iter().zip(&x.0).map(|((k, _), v)| (*k, v.data.as_slice())).collect();
            let d_reps = mpm.fuse_all_backward(&reps, &cache, &d_mix, &attn, &mut g);
            let dx = Tensors(d_reps.into_iter().map(|v| Mat { rows: 1, cols: v.len(), data: v }).collect());
            check(
                name,
                &Both(attn.clone(), x.clone()),
                &Both(g, dx),
                |q: &Both<CrossAttnParams, Tensors>| half_sq_err(&run(&q.0, &q.1).0, &target).0,
                tol,
                MAX_COORDS,
            )
        }
        GradBlock::Classifier => {
            let p = ClassifierParams::init(6, 5, &mut rng);
            let x = Tensors(vec![random_mat(1, 6, &mut rng)]);
            let loss = |q: &Both<ClassifierParams, Tensors>| {
                bce_loss_weighted(&[classifier_forward(&q.1 .0[0].data, &q.0).0], &[1], 2.0).0
            };
            let (logit, cache) = classifier_forward(&x.0[0].data, &p);
            let (_, dl) = bce_loss_weighted(&[logit], &[1], 2.0);
            let mut g = p.zeros_like();
            let dx = classifier_backward(&cache, dl[0], &p, &mut g);
            check(
                name,
                &Both(p.clone(), x.clone()),
                &Both(g, Tensors(vec![Mat { rows: 1, cols: 6, data: dx }])),
                loss,
                tol,
                MAX_COORDS,
            )
        }
        GradBlock::EndToEnd => grad_check_end_to_end(AblationMode::Full, seed)?,
    })
}

/// The whole stack for one ablation mode on a tiny generated dataset: BCE
/// over all consultations w.r.t. every parameter.
pub fn grad_check_end_to_end(mode: AblationMode, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = TOLERANCE;
    let ds = generate(&GenConfig {
        patients: 10,
        doctors: 5,
        hospitals: 2,
        diseases: 4,
        consultations: 16,
        offline_visits: 12,
        failure_rate: 0.3,
        span_days: 60,
        seed,
        ..GenConfig::default()
    })?;
    let mut model = Model::new(&ds, tiny_model_config(), mode, seed, 0.5)?;
    jitter(&mut model.params, &mut rng);
    let prepared = model.prepare(&ds)?;
    let batch: Vec<usize> = (0..prepared.instances.len()).collect();
    let loss_grad = |z: &[f64], insts: &[&super::Instance]| {
        let y: Vec<u8> = insts.iter().map(|i| i.label.unwrap_or(0)).collect();
        bce_loss_weighted(z, &y, 1.0)
    };
    let mut g = model.params.zeros_like();
    model.batch_backward(&prepared, &batch, &loss_grad, &mut g)?;
    let loss = |p: &super::ModelParams| {
        let mut m = model.clone();
        m.params = p.clone();
        let mut scratch = p.zeros_like();
        m.batch_backward(&prepared, &batch, &loss_grad, &mut scratch).expect("valid fixture")
    };
    Ok(check(&format!("end-to-end/{mode}"), &model.params, &g, loss, tol, MAX_COORDS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in GradBlock::ALL {
            assert_eq!(b.as_str().parse::<GradBlock>().unwrap(), b);
        }
        assert!("nope".parse::<GradBlock>().is_err());
    }

    #[test]
    fn part_filters_split_the_kg() {
        let kg = KgParams::init(3, 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let rel = KgPart { kg: kg.clone(), relations: true }.num_params();
        let lay = KgPart { kg: kg.clone(), relations: false }.num_params();
        assert_eq!(rel + lay, kg.num_params());
        assert_eq!(lay, 2 * 2 * 9);
    }
}

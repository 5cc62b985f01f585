//! The end-to-end forward/backward stack:
//! attributes → per-view propagation (+ temporal fusion) → cross-modal
//! sketch fusion → classifier.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    classifier_backward, classifier_forward, decide, AblationMode, ClassifierCache,
    ClassifierParams, ModelConfig,
};
use crate::attr::{
    attribute_indices, encode_all, encode_all_backward, encode_rows, encode_rows_backward, AttrDims, AttrEncoderParams,
    AttributeVocabulary, EntityCache, EntityVocab,
};
use crate::dataset::Dataset;
use crate::dialogue::{
    embed_consultation, truncate, ConsultationRecord, HashEmbedder, Label, SentenceEmbedder, TruncateMode,
};
use crate::error::{Error, Result};
use crate::fusion::{CrossAttnParams, CrossMpm, FusionCache, Modality, RepKey, Role};
use crate::graph::{split_windows_in, KnowledgeNetwork, View};
use crate::kg::{
    propagate, propagate_backward, ranking_loss_batch, sample_pairs, IndexedGraph, KgParams,
    PropagationCache,
};
use crate::linalg::{add_assign, sigmoid, Mat, Params};
use crate::temporal::{fuse_local_global, fuse_local_global_backward, FuseCache, TemporalParams};

// RNG stream identifiers for parameter initialization.
const STREAM_ATTR: u64 = 1;
const STREAM_ONLINE: u64 = 2;
const STREAM_OFFLINE: u64 = 3;
const STREAM_TEMPORAL: u64 = 4;
const STREAM_OFFLINE_TEMPORAL: u64 = 5;
const STREAM_CLASSIFIER: u64 = 7;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Every trainable tensor Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attr: AttrEncoderParams,
    pub online: KgParams,
    pub offline: KgParams,
    pub temporal: TemporalParams,
    pub offline_temporal: TemporalParams,
    pub cross: CrossAttnParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, num_attrs: usize, num_entities: usize, seed: u64) -> Self {
        let de = cfg.entity_dim;
        let dims = AttrDims {
            attr: cfg.attr_dim,
            id: cfg.id_dim,
            out: de,
        };
        ModelParams {
            attr: AttrEncoderParams::init(num_attrs, num_entities, dims, &mut stream(seed, STREAM_ATTR)),
            online: KgParams::init(de, cfg.relation_dim, cfg.layers, &mut stream(seed, STREAM_ONLINE)),
            offline: KgParams::init(de, cfg.relation_dim, cfg.layers, &mut stream(seed, STREAM_OFFLINE)),
            temporal: TemporalParams::init(de, &mut stream(seed, STREAM_TEMPORAL)),
            offline_temporal: TemporalParams::init(de, &mut stream(seed, STREAM_OFFLINE_TEMPORAL)),
            // Uniform pair attention at the start; random logits over 45
            // pairs let a few noisy pairs dominate early training.
            cross: CrossAttnParams::zeros(cfg.fusion_dim),
            classifier: ClassifierParams::init(
                cfg.fusion_dim,
                cfg.hidden,
                &mut stream(seed, STREAM_CLASSIFIER),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            attr: self.attr.zeros_like(),
            online: self.online.zeros_like(),
            offline: self.offline.zeros_like(),
            temporal: self.temporal.zeros_like(),
            offline_temporal: self.offline_temporal.zeros_like(),
            cross: self.cross.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        let o = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            let n = d.len();
            for (x, y) in d.iter_mut().zip(&o[off..off + n]) {
                *x += s * y;
            }
            off += n;
        });
    }
}

impl Params for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        use crate::linalg::join;
        self.attr.visit(&join(prefix, "attr"), f);
        self.online.visit(&join(prefix, "online"), f);
        self.offline.visit(&join(prefix, "offline"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.offline_temporal.visit(&join(prefix, "offline_temporal"), f);
        self.cross.visit(&join(prefix, "cross"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        use crate::linalg::join;
        self.attr.visit_mut(&join(prefix, "attr"), f);
        self.online.visit_mut(&join(prefix, "online"), f);
        self.offline.visit_mut(&join(prefix, "offline"), f);
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
        self.offline_temporal.visit_mut(&join(prefix, "offline_temporal"), f);
        self.cross.visit_mut(&join(prefix, "cross"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Fusion membership and input widths for a mode.
pub(crate) fn membership(mode: AblationMode, cfg: &ModelConfig) -> Vec<(RepKey, usize)> {
    cfg.membership
        .iter()
        .filter(|k| match k.modality {
            Modality::Dialogue => true,
            Modality::Online => mode.uses_online(),
            Modality::Offline => mode.uses_offline(),
        })
        .map(|&k| {
            let dim = if k.modality == Modality::Dialogue { cfg.text_dim } else { cfg.entity_dim };
            (k, dim)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Inputs

/// One view compiled against the entity vocabulary. The global graph holds
/// every vocabulary entity (local index = vocabulary row); window graphs
/// hold only the entities present in them.
#[derive(Debug, Clone)]
pub(crate) struct ViewGraphs {
    pub view: View,
    pub global: IndexedGraph,
    pub windows: Vec<Option<IndexedGraph>>,
    pub dynamic: bool,
}

impl ViewGraphs {
    pub fn m(&self) -> usize {
        self.windows.len()
    }

    /// Graphs whose triples enter the ranking loss.
    pub fn ranking_graphs(&self) -> Vec<&IndexedGraph> {
        let mut v = vec![&self.global];
        if self.dynamic {
            v.extend(self.windows.iter().flatten());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GraphInputs {
    pub attr_lists: Vec<Vec<usize>>,
    pub online: Option<ViewGraphs>,
    pub offline: Option<ViewGraphs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    /// Vocabulary rows in [`Role::ALL`] order.
    pub roles: [usize; 4],
    /// Patient and doctor dialogue vectors; `None` when that speaker is
    /// silent.
    pub dialogue: [Option<Vec<f64>>; 2],
    pub label: Option<Label>,
}

/// A dataset compiled for one model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub(crate) graphs: Arc<GraphInputs>,
    pub instances: Vec<Instance>,
}

impl Prepared {
    pub fn labels(&self) -> Option<Vec<Label>> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub logit: f64,
    pub probability: f64,
    pub predicted: Label,
    pub label: Option<Label>,
}

// ---------------------------------------------------------------------------
// Forward state

struct ViewState {
    global: Mat,
    global_cache: PropagationCache,
    windows: Vec<Option<(Mat, PropagationCache)>>,
}

pub(crate) struct GraphState {
    attr_caches: Vec<EntityCache>,
    online: Option<ViewState>,
    offline: Option<ViewState>,
}

type RepTable = BTreeMap<usize, (Vec<f64>, Option<FuseCache>)>;

struct InstanceForward {
    keys: Vec<RepKey>,
    fusion: Option<FusionCache>,
    classifier: ClassifierCache,
    logit: f64,
}

/// A trained (or freshly initialized) predictor.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: AblationMode,
    pub threshold: f64,
    pub seed: u64,
    /// Train/validation/test fractions the model was trained with.
    pub split: (f64, f64, f64),
    pub params: ModelParams,
    pub entities: EntityVocab,
    pub attributes: AttributeVocabulary,
    fusion: CrossMpm,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.mode == other.mode
            && self.threshold.to_bits() == other.threshold.to_bits()
            && self.seed == other.seed
            && self.split == other.split
            && self.params.flatten().iter().map(|v| v.to_bits()).eq(other
                .params
                .flatten()
                .iter()
                .map(|v| v.to_bits()))
            && self.entities == other.entities
            && self.attributes == other.attributes
    }
}

impl Model {
    /// Seeded initialization with vocabularies taken from `dataset`.
    pub fn new(
        dataset: &Dataset,
        config: ModelConfig,
        mode: AblationMode,
        seed: u64,
        threshold: f64,
    ) -> Result<Self> {
        let entities = EntityVocab::new(dataset.entities());
        let attributes = AttributeVocabulary::from_table(&dataset.attributes);
        let params = ModelParams::init(&config, attributes.len(), entities.len(), seed);
        Self::from_parts(config, mode, seed, threshold, params, entities, attributes)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        mode: AblationMode,
        seed: u64,
        threshold: f64,
        params: ModelParams,
        entities: EntityVocab,
        attributes: AttributeVocabulary,
    ) -> Result<Self> {
        config.validate()?;
        let fusion = CrossMpm::new(config.fusion_seed, config.fusion_dim, &membership(mode, &config))?;
        Ok(Model {
            config,
            mode,
            threshold,
            seed,
            split: (0.8, 0.1, 0.1),
            params,
            entities,
            attributes,
            fusion,
        })
    }

    pub fn fusion(&self) -> &CrossMpm {
        &self.fusion
    }

    pub fn default_embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.config.text_dim, self.config.text_seed)
    }

    // -----------------------------------------------------------------------
    // Compilation

    pub fn prepare(&self, dataset: &Dataset) -> Result<Prepared> {
        self.prepare_with(dataset, &self.default_embedder(), None)
    }

    pub fn prepare_with(
        &self,
        dataset: &Dataset,
        embedder: &dyn SentenceEmbedder,
        truncation: Option<(TruncateMode, usize)>,
    ) -> Result<Prepared> {
        Ok(Prepared {
            graphs: Arc::new(self.compile_graphs(dataset)?),
            instances: self.instances(&dataset.consultations, embedder, truncation)?,
        })
    }

    /// Re-embeds `records` (e.g. truncated) while sharing compiled graphs.
    pub fn reprepare(
        &self,
        prepared: &Prepared,
        records: &[ConsultationRecord],
        embedder: &dyn SentenceEmbedder,
        truncation: Option<(TruncateMode, usize)>,
    ) -> Result<Prepared> {
        Ok(Prepared {
            graphs: Arc::clone(&prepared.graphs),
            instances: self.instances(records, embedder, truncation)?,
        })
    }

    fn instances(
        &self,
        records: &[ConsultationRecord],
        embedder: &dyn SentenceEmbedder,
        truncation: Option<(TruncateMode, usize)>,
    ) -> Result<Vec<Instance>> {
        if embedder.dim() != self.config.text_dim {
            return Err(Error::Dimension {
                expected: self.config.text_dim,
                got: embedder.dim(),
            });
        }
        let row = |e| {
            self.entities
                .get(e)
                .ok_or_else(|| Error::UnknownEntity(e.to_string()))
        };
        records
            .iter()
            .map(|c| {
                let truncated;
                let record = match truncation {
                    Some((mode, k)) => {
                        truncated = truncate(c, mode, k)?;
                        &truncated
                    }
                    None => c,
                };
                let (p, d) = embed_consultation(record, embedder, self.config.position_mode)?;
                let keep = |v: crate::dialogue::DialogueVector| (!v.missing).then_some(v.vector);
                Ok(Instance {
                    id: c.id.clone(),
                    roles: [row(&c.patient)?, row(&c.doctor)?, row(&c.hospital)?, row(&c.disease)?],
                    dialogue: [keep(p), keep(d)],
                    label: c.label,
                })
            })
            .collect()
    }

    fn compile_graphs(&self, dataset: &Dataset) -> Result<GraphInputs> {
        let attr_lists = attribute_indices(&self.entities, &dataset.attributes, &self.attributes);
        let mut out = GraphInputs {
            attr_lists,
            online: None,
            offline: None,
        };
        if !self.mode.uses_graph() {
            return Ok(out);
        }
        let span = self.observation_span(&dataset.network);
        if self.mode.uses_online() {
            let net = dataset.network.filter_view(View::Online);
            out.online = Some(self.compile_view(&net, View::Online, self.mode.online_dynamic(), span)?);
        }
        if self.mode.uses_offline() {
            let net = dataset.network.filter_view(View::Offline);
            out.offline = Some(self.compile_view(&net, View::Offline, self.config.offline_dynamic, span)?);
        }
        Ok(out)
    }

    /// The trailing `observation_span` seconds of the data, clipped to the
    /// first timestamp.
    fn observation_span(&self, net: &KnowledgeNetwork) -> Option<(i64, i64)> {
        let (lo, hi) = net.time_range()?;
        Some(((hi - self.config.observation_span).max(lo), hi))
    }

    fn compile_view(
        &self,
        net: &KnowledgeNetwork,
        view: View,
        dynamic: bool,
        span: Option<(i64, i64)>,
    ) -> Result<ViewGraphs> {
        let n = self.entities.len();
        let kinds: Vec<_> = self.entities.entities().iter().map(|e| e.kind).collect();
        let Some(span) = span else {
            return Ok(ViewGraphs {
                view,
                global: IndexedGraph::from_parts((0..n).collect(), kinds, Vec::new()),
                windows: Vec::new(),
                dynamic,
            });
        };
        let windowed = split_windows_in(net, self.config.window_length, span)?;
        let global_triples = self.local_triples(&windowed.global, |row| Some(row));
        let global = IndexedGraph::from_parts((0..n).collect(), kinds.clone(), global_triples);
        let mut windows = Vec::new();
        if dynamic {
            for w in &windowed.windows {
                if w.is_empty() {
                    windows.push(None);
                    continue;
                }
                let nodes: Vec<usize> = w.entities().iter().filter_map(|e| self.entities.get(e)).collect();
                let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &r)| (r, i)).collect();
                let triples = self.local_triples(w, |row| local.get(&row).copied());
                let wk = nodes.iter().map(|&r| kinds[r]).collect();
                windows.push(Some(IndexedGraph::from_parts(nodes, wk, triples)));
            }
        }
        Ok(ViewGraphs {
            view,
            global,
            windows,
            dynamic,
        })
    }

    /// Triples mapped to local indices; triples touching entities outside
    /// the vocabulary are dropped.
    fn local_triples(
        &self,
        net: &KnowledgeNetwork,
        local: impl Fn(usize) -> Option<usize>,
    ) -> Vec<(usize, usize, usize)> {
        net.triples()
            .iter()
            .filter_map(|t| {
                let h = local(self.entities.get(&t.head)?)?;
                let tl = local(self.entities.get(&t.tail)?)?;
                Some((h, t.relation.index(), tl))
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Forward

    pub(crate) fn graph_forward(&self, g: &GraphInputs) -> Result<Option<GraphState>> {
        if !self.mode.uses_graph() {
            return Ok(None);
        }
        let (base, attr_caches) = encode_all(&g.attr_lists, &self.params.attr)?;
        let view = |vg: &Option<ViewGraphs>, kg: &KgParams| {
            vg.as_ref().map(|vg| {
                let (global, global_cache) = propagate(&vg.global, &base, kg);
                let windows = vg
                    .windows
                    .iter()
                    .map(|w| w.as_ref().map(|w| propagate(w, &w.gather(&base), kg)))
                    .collect();
                ViewState {
                    global,
                    global_cache,
                    windows,
                }
            })
        };
        let online = view(&g.online, &self.params.online);
        let offline = view(&g.offline, &self.params.offline);
        Ok(Some(GraphState {
            attr_caches,
            online,
            offline,
        }))
    }

    fn temporal_for(&self, view: View) -> &TemporalParams {
        match view {
            View::Online => &self.params.temporal,
            View::Offline => &self.params.offline_temporal,
        }
    }

    fn locals<'a>(vg: &ViewGraphs, vs: &'a ViewState, e: usize) -> Vec<(usize, &'a [f64])> {
        vg.windows
            .iter()
            .zip(&vs.windows)
            .enumerate()
            .filter_map(|(k, (g, s))| {
                let (g, (out, _)) = (g.as_ref()?, s.as_ref()?);
                let local = g.local_index(e)?;
                Some((k + 1, out.row(local)))
            })
            .collect()
    }

    fn view_reps(&self, vg: &ViewGraphs, vs: &ViewState, entities: impl Iterator<Item = usize>) -> Result<RepTable> {
        let mut table = RepTable::new();
        for e in entities {
            if table.contains_key(&e) {
                continue;
            }
            let global = vs.global.row(e);
            let entry = if vg.dynamic {
                let locals = Self::locals(vg, vs, e);
                let (v, c) = fuse_local_global(&locals, global, vg.m(), self.temporal_for(vg.view))?;
                (v, Some(c))
            } else {
                (global.to_vec(), None)
            };
            table.insert(e, entry);
        }
        Ok(table)
    }

    fn rep_tables(
        &self,
        g: &GraphInputs,
        state: Option<&GraphState>,
        instances: &[&Instance],
    ) -> Result<(Option<RepTable>, Option<RepTable>)> {
        let Some(state) = state else {
            return Ok((None, None));
        };
        let ents = || instances.iter().flat_map(|i| i.roles.iter().copied());
        let online = match (&g.online, &state.online) {
            (Some(vg), Some(vs)) => Some(self.view_reps(vg, vs, ents())?),
            _ => None,
        };
        let offline = match (&g.offline, &state.offline) {
            (Some(vg), Some(vs)) => Some(self.view_reps(vg, vs, ents())?),
            _ => None,
        };
        Ok((online, offline))
    }

    /// The instance's representations that are fusion members.
    fn gather_reps<'a>(
        &self,
        inst: &'a Instance,
        online: Option<&'a RepTable>,
        offline: Option<&'a RepTable>,
    ) -> Vec<(RepKey, &'a [f64])> {
        let mut reps = Vec::with_capacity(10);
        for (role, v) in [Role::Patient, Role::Doctor].iter().zip(&inst.dialogue) {
            if let Some(v) = v {
                reps.push((RepKey::new(Modality::Dialogue, *role), v.as_slice()));
            }
        }
        for (modality, table) in [(Modality::Online, online), (Modality::Offline, offline)] {
            if let Some(t) = table {
                for (role, e) in Role::ALL.iter().zip(&inst.roles) {
                    reps.push((RepKey::new(modality, *role), t[e].0.as_slice()));
                }
            }
        }
        reps.retain(|(k, _)| self.fusion.is_member(*k));
        reps
    }

    fn instance_forward(
        &self,
        inst: &Instance,
        online: Option<&RepTable>,
        offline: Option<&RepTable>,
    ) -> Result<InstanceForward> {
        let reps = self.gather_reps(inst, online, offline);
        let keys = reps.iter().map(|(k, _)| *k).collect();
        // Fewer than two present representations: nothing to fuse, the
        // classifier sees the zero vector.
        let (mix, fusion) = if reps.len() < 2 {
            (vec![0.0; self.config.fusion_dim], None)
        } else {
            let (mix, cache) = self.fusion.fuse_all(&reps, &self.params.cross)?;
            (mix, Some(cache))
        };
        let (logit, classifier) = classifier_forward(&mix, &self.params.classifier);
        Ok(InstanceForward {
            keys,
            fusion,
            classifier,
            logit,
        })
    }

    pub fn predict(&self, prepared: &Prepared) -> Result<Vec<Prediction>> {
        let all: Vec<usize> = (0..prepared.instances.len()).collect();
        self.predict_indices(prepared, &all)
    }

    /// Predictions for the instances at `indices`, in that order.
    pub fn predict_indices(&self, prepared: &Prepared, indices: &[usize]) -> Result<Vec<Prediction>> {
        let state = self.graph_forward(&prepared.graphs)?;
        let insts: Vec<&Instance> = indices.iter().map(|&i| &prepared.instances[i]).collect();
        let (online, offline) = self.rep_tables(&prepared.graphs, state.as_ref(), &insts)?;
        insts
            .iter()
            .map(|inst| {
                let f = self.instance_forward(inst, online.as_ref(), offline.as_ref())?;
                let probability = sigmoid(f.logit);
                Ok(Prediction {
                    id: inst.id.clone(),
                    logit: f.logit,
                    probability,
                    predicted: decide(probability, self.threshold),
                    label: inst.label,
                })
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Backward

    /// Loss over `batch` given per-instance loss gradients: `loss_grad`
    /// receives the logits and returns `(loss, ∂loss/∂logit)`. Parameter
    /// gradients are accumulated into `grads`.
    pub(crate) fn batch_backward(
        &self,
        prepared: &Prepared,
        batch: &[usize],
        loss_grad: &dyn Fn(&[f64], &[&Instance]) -> (f64, Vec<f64>),
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let g = &*prepared.graphs;
        let insts: Vec<&Instance> = batch.iter().map(|&i| &prepared.instances[i]).collect();
        let state = self.graph_forward(g)?;
        let (online, offline) = self.rep_tables(g, state.as_ref(), &insts)?;
        let fwd: Vec<InstanceForward> = insts
            .iter()
            .map(|i| self.instance_forward(i, online.as_ref(), offline.as_ref()))
            .collect::<Result<_>>()?;
        let logits: Vec<f64> = fwd.iter().map(|f| f.logit).collect();
        let (loss, d_logits) = loss_grad(&logits, &insts);

        let mut d_online: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut d_offline: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for ((inst, f), dl) in insts.iter().zip(&fwd).zip(&d_logits) {
            let d_mix = classifier_backward(&f.classifier, *dl, &self.params.classifier, &mut grads.classifier);
            let Some(cache) = &f.fusion else { continue };
            let reps = self.gather_reps(inst, online.as_ref(), offline.as_ref());
            debug_assert!(reps.iter().map(|r| r.0).eq(f.keys.iter().copied()));
            let d_reps = self
                .fusion
                .fuse_all_backward(&reps, cache, &d_mix, &self.params.cross, &mut grads.cross);
            for ((key, _), d) in reps.iter().zip(d_reps) {
                let target = match key.modality {
                    Modality::Dialogue => continue,
                    Modality::Online => &mut d_online,
                    Modality::Offline => &mut d_offline,
                };
                let e = inst.roles[key.role as usize];
                match target.get_mut(&e) {
                    Some(acc) => add_assign(acc, &d),
                    None => {
                        target.insert(e, d);
                    }
                }
            }
        }

        if let Some(state) = &state {
            let n = self.entities.len();
            let mut d_base = Mat::zeros(n, self.config.entity_dim);
            if let (Some(vg), Some(vs), Some(t)) = (&g.online, &state.online, &online) {
                let (kg, tp) = (&mut grads.online, &mut grads.temporal);
                self.view_backward(vg, vs, t, &d_online, &self.params.online, kg, tp, &mut d_base);
            }
            if let (Some(vg), Some(vs), Some(t)) = (&g.offline, &state.offline, &offline) {
                let (kg, tp) = (&mut grads.offline, &mut grads.offline_temporal);
                self.view_backward(vg, vs, t, &d_offline, &self.params.offline, kg, tp, &mut d_base);
            }
            encode_all_backward(&state.attr_caches, &d_base, &self.params.attr, &mut grads.attr);
        }
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    fn view_backward(
        &self,
        vg: &ViewGraphs,
        vs: &ViewState,
        reps: &RepTable,
        d_reps: &BTreeMap<usize, Vec<f64>>,
        kg: &KgParams,
        grad_kg: &mut KgParams,
        grad_tp: &mut TemporalParams,
        d_base: &mut Mat,
    ) {
        let de = self.config.entity_dim;
        let mut d_global = Mat::zeros(vs.global.rows, de);
        let mut d_windows: Vec<Option<Mat>> = vs
            .windows
            .iter()
            .map(|w| w.as_ref().map(|(out, _)| Mat::zeros(out.rows, de)))
            .collect();
        for (&e, d) in d_reps {
            match &reps[&e].1 {
                None => add_assign(d_global.row_mut(e), d),
                Some(cache) => {
                    let locals = Self::locals(vg, vs, e);
                    let (d_locals, d_glob) =
                        fuse_local_global_backward(&locals, vg.m(), cache, d, self.temporal_for(vg.view), grad_tp);
                    add_assign(d_global.row_mut(e), &d_glob);
                    for ((k, _), dl) in locals.iter().zip(d_locals) {
                        let g = vg.windows[k - 1].as_ref().expect("present window");
                        let local = g.local_index(e).expect("present entity");
                        let dw = d_windows[k - 1].as_mut().expect("present window");
                        add_assign(dw.row_mut(local), &dl);
                    }
                }
            }
        }
        let d = propagate_backward(&vg.global, &vs.global_cache, &d_global, kg, grad_kg);
        add_assign(&mut d_base.data, &d.data);
        for ((g, s), dw) in vg.windows.iter().zip(&vs.windows).zip(&d_windows) {
            let (Some(g), Some((_, cache)), Some(dw)) = (g, s, dw) else {
                continue;
            };
            if dw.data.iter().all(|v| *v == 0.0) {
                continue;
            }
            let d = propagate_backward(g, cache, dw, kg, grad_kg);
            g.scatter_add(&d, d_base);
        }
    }

    /// One ranking-loss evaluation on `graph`'s `triples` (a view's global
    /// or window graph), scored on the attribute-encoded base embeddings.
    /// Accumulates gradients into `grads` when given.
    pub(crate) fn ranking_step<R: Rng + ?Sized>(
        &self,
        g: &GraphInputs,
        view: View,
        graph: &IndexedGraph,
        triples: &[(usize, usize, usize)],
        rng: &mut R,
        grads: Option<&mut ModelParams>,
    ) -> Result<(f64, usize)> {
        let pairs = sample_pairs(graph, triples, rng);
        // Only the entities the batch touches need encoding.
        let mut rows: Vec<usize> = pairs
            .iter()
            .flat_map(|p| [p.head, p.tail, p.neg_tail])
            .map(|l| graph.nodes[l])
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let (base, caches) = encode_rows(&g.attr_lists, &rows, &self.params.attr)?;
        let is_global = graph.num_nodes() == base.rows && graph.nodes.iter().enumerate().all(|(i, &r)| i == r);
        let emb = if is_global { base } else { graph.gather(&base) };
        let kg = match view {
            View::Online => &self.params.online,
            View::Offline => &self.params.offline,
        };
        let Some(grads) = grads else {
            return Ok((ranking_loss_batch(&emb, &pairs, kg, None), pairs.len()));
        };
        let mut d_emb = Mat::zeros(emb.rows, emb.cols);
        let grad_kg = match view {
            View::Online => &mut grads.online,
            View::Offline => &mut grads.offline,
        };
        let loss = ranking_loss_batch(&emb, &pairs, kg, Some((&mut d_emb, grad_kg)));
        let d_base = if is_global {
            d_emb
        } else {
            let mut d = Mat::zeros(self.entities.len(), emb.cols);
            graph.scatter_add(&d_emb, &mut d);
            d
        };
        encode_rows_backward(&caches, &d_base, &self.params.attr, &mut grads.attr);
        Ok((loss, pairs.len()))
    }
}

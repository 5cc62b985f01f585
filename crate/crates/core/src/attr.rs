//! Attribute-interaction encoder producing the initial entity embeddings.
//!
//! For an entity with categorical attributes `a_1..a_n` and identity row
//! `e_id`:
//!
//! ```text
//! s     = Σ_{i<j} E_att[a_i] ⊙ E_att[a_j]
//! e_att = LeakyReLU(w1·s + b1)
//! ẽ     = LeakyReLU(w2·[e_att ; e_id] + b2)
//! ```

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AttributeTable, EntityRef};
use crate::linalg::{
    add_assign, leaky_relu, leaky_relu_grad, visit_mat, visit_vec, join, Mat, Params,
};

/// Dense index over `(name, value)` attribute pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeVocabulary {
    index: BTreeMap<(String, String), usize>,
}

impl AttributeVocabulary {
    pub fn from_table(table: &AttributeTable) -> Self {
        let mut pairs: Vec<(String, String)> = table
            .entries
            .values()
            .flat_map(|v| v.iter().cloned())
            .collect();
        pairs.sort();
        pairs.dedup();
        Self::from_pairs(pairs)
    }

    /// Indices follow the iteration order of `pairs` after deduplication.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut index = BTreeMap::new();
        for p in pairs {
            let next = index.len();
            index.entry(p).or_insert(next);
        }
        AttributeVocabulary { index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, name: &str, value: &str) -> Option<usize> {
        self.index.get(&(name.to_string(), value.to_string())).copied()
    }

    /// Pairs ordered by index.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<_> = self.index.iter().map(|(k, &i)| (i, k.clone())).collect();
        v.sort_by_key(|(i, _)| *i);
        v.into_iter().map(|(_, k)| k).collect()
    }

    /// Attribute indices for one entity; unknown pairs are skipped.
    pub fn lookup(&self, attrs: &[(String, String)]) -> Vec<usize> {
        attrs
            .iter()
            .filter_map(|(n, v)| self.get(n, v))
            .collect()
    }
}

/// Dense row index over entities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityVocab {
    entities: Vec<EntityRef>,
    index: BTreeMap<EntityRef, usize>,
}

impl EntityVocab {
    pub fn new(entities: impl IntoIterator<Item = EntityRef>) -> Self {
        let mut entities: Vec<EntityRef> = entities.into_iter().collect();
        entities.sort();
        entities.dedup();
        let index = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        EntityVocab { entities, index }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, e: &EntityRef) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn entity(&self, i: usize) -> &EntityRef {
        &self.entities[i]
    }

    pub fn entities(&self) -> &[EntityRef] {
        &self.entities
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttrDims {
    /// Attribute embedding width `e`.
    pub attr: usize,
    /// Identity embedding width.
    pub id: usize,
    /// Output width `de`.
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttrEncoderParams {
    pub attr_embeddings: Mat,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub id_embeddings: Mat,
}

impl AttrEncoderParams {
    pub fn init<R: Rng + ?Sized>(
        num_attrs: usize,
        num_entities: usize,
        dims: AttrDims,
        rng: &mut R,
    ) -> Self {
        let attr_embeddings = Mat::uniform(num_attrs, dims.attr, 1.0 / (dims.attr as f64).sqrt(), rng);
        let w1 = Mat::xavier(dims.attr, dims.attr, rng);
        let w2 = Mat::xavier(dims.out, dims.attr + dims.id, rng);
        let id_embeddings = Mat::uniform(num_entities, dims.id, 1.0 / (dims.id as f64).sqrt(), rng);
        AttrEncoderParams {
            attr_embeddings,
            w1,
            b1: vec![0.0; dims.attr],
            w2,
            b2: vec![0.0; dims.out],
            id_embeddings,
        }
    }

    pub fn zeros_like(&self) -> Self {
        AttrEncoderParams {
            attr_embeddings: Mat::zeros(self.attr_embeddings.rows, self.attr_embeddings.cols),
            w1: Mat::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Mat::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
            id_embeddings: Mat::zeros(self.id_embeddings.rows, self.id_embeddings.cols),
        }
    }

    pub fn dims(&self) -> AttrDims {
        AttrDims {
            attr: self.w1.rows,
            id: self.id_embeddings.cols,
            out: self.w2.rows,
        }
    }
}

impl Params for AttrEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        visit_mat(prefix, "attr_embeddings", &self.attr_embeddings, f);
        visit_mat(prefix, "w1", &self.w1, f);
        visit_vec(prefix, "b1", &self.b1, f);
        visit_mat(prefix, "w2", &self.w2, f);
        visit_vec(prefix, "b2", &self.b2, f);
        visit_mat(prefix, "id_embeddings", &self.id_embeddings, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "attr_embeddings"), &mut self.attr_embeddings.data);
        f(join(prefix, "w1"), &mut self.w1.data);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2.data);
        f(join(prefix, "b2"), &mut self.b2);
        f(join(prefix, "id_embeddings"), &mut self.id_embeddings.data);
    }
}

/// Intermediates kept for the backward pass of one entity.
#[derive(Debug, Clone)]
pub struct EntityCache {
    attrs: Vec<usize>,
    /// Pre-activation of `e_att`.
    z1: Vec<f64>,
    /// `[e_att ; e_id]`.
    concat: Vec<f64>,
    /// Pre-activation of `ẽ`.
    z2: Vec<f64>,
}

fn check_attrs(attrs: &[usize], params: &AttrEncoderParams) -> Result<()> {
    let k = params.attr_embeddings.rows;
    if let Some(&bad) = attrs.iter().find(|&&a| a >= k) {
        return Err(Error::OutOfRange {
            what: "attribute vocabulary",
            index: bad,
            len: k,
        });
    }
    Ok(())
}

/// Sum of elementwise products over unordered index pairs. Indices are
/// sorted first so the result does not depend on input order.
fn pair_sum(sorted: &[usize], table: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; table.cols];
    for i in 0..sorted.len() {
        let a = table.row(sorted[i]);
        for &j in &sorted[i + 1..] {
            let b = table.row(j);
            for ((sk, ak), bk) in s.iter_mut().zip(a).zip(b) {
                *sk += ak * bk;
            }
        }
    }
    s
}

fn interaction(attrs: &[usize], params: &AttrEncoderParams) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    check_attrs(attrs, params)?;
    let mut sorted = attrs.to_vec();
    sorted.sort_unstable();
    let s = pair_sum(&sorted, &params.attr_embeddings);
    let mut z1 = params.w1.matvec(&s);
    add_assign(&mut z1, &params.b1);
    Ok((s, sorted, z1))
}

/// `e_att` for an attribute index list.
pub fn attr_interaction(attrs: &[usize], params: &AttrEncoderParams) -> Result<Vec<f64>> {
    let (_, _, z1) = interaction(attrs, params)?;
    Ok(z1.into_iter().map(leaky_relu).collect())
}

/// Forward pass for one entity, returning `ẽ` and the backward cache.
pub fn encode_entity_cached(
    entity_row: usize,
    attrs: &[usize],
    params: &AttrEncoderParams,
) -> Result<(Vec<f64>, EntityCache)> {
    if entity_row >= params.id_embeddings.rows {
        return Err(Error::OutOfRange {
            what: "identity embeddings",
            index: entity_row,
            len: params.id_embeddings.rows,
        });
    }
    let (_, sorted, z1) = interaction(attrs, params)?;
    let mut concat: Vec<f64> = z1.iter().map(|&v| leaky_relu(v)).collect();
    concat.extend_from_slice(params.id_embeddings.row(entity_row));
    let mut z2 = params.w2.matvec(&concat);
    add_assign(&mut z2, &params.b2);
    let out = z2.iter().map(|&v| leaky_relu(v)).collect();
    Ok((
        out,
        EntityCache {
            attrs: sorted,
            z1,
            concat,
            z2,
        },
    ))
}

pub fn encode_entity(entity_row: usize, attrs: &[usize], params: &AttrEncoderParams) -> Result<Vec<f64>> {
    encode_entity_cached(entity_row, attrs, params).map(|(v, _)| v)
}

/// Accumulates into `grads` the gradient of a loss with upstream `d_out`
/// w.r.t. `ẽ` of entity `entity_row`.
pub fn encode_entity_backward(
    entity_row: usize,
    cache: &EntityCache,
    d_out: &[f64],
    params: &AttrEncoderParams,
    grads: &mut AttrEncoderParams,
) {
    let e = params.w1.rows;
    let dz2: Vec<f64> = d_out
        .iter()
        .zip(&cache.z2)
        .map(|(g, z)| g * leaky_relu_grad(*z))
        .collect();
    grads.w2.add_outer(&dz2, &cache.concat);
    add_assign(&mut grads.b2, &dz2);
    let d_concat = params.w2.matvec_t(&dz2);
    add_assign(grads.id_embeddings.row_mut(entity_row), &d_concat[e..]);
    let dz1: Vec<f64> = d_concat[..e]
        .iter()
        .zip(&cache.z1)
        .map(|(g, z)| g * leaky_relu_grad(*z))
        .collect();
    if dz1.iter().all(|v| *v == 0.0) {
        return;
    }
    add_assign(&mut grads.b1, &dz1);
    if cache.attrs.len() < 2 {
        return;
    }
    let table = &params.attr_embeddings;
    let s = pair_sum(&cache.attrs, table);
    grads.w1.add_outer(&dz1, &s);
    let ds = params.w1.matvec_t(&dz1);
    // ∂s/∂E[a_i] = Σ_{j≠i} E[a_j]
    let mut total = vec![0.0; table.cols];
    for &a in &cache.attrs {
        add_assign(&mut total, table.row(a));
    }
    for &a in &cache.attrs {
        let row = table.row(a);
        let g = grads.attr_embeddings.row_mut(a);
        for k in 0..row.len() {
            g[k] += ds[k] * (total[k] - row[k]);
        }
    }
}

/// Attribute index lists aligned with an entity vocabulary.
pub fn attribute_indices(
    entities: &EntityVocab,
    table: &AttributeTable,
    vocab: &AttributeVocabulary,
) -> Vec<Vec<usize>> {
    entities
        .entities()
        .iter()
        .map(|e| vocab.lookup(table.get(e)))
        .collect()
}

/// Encodes every entity; rows align with the identity table.
pub fn encode_all(
    attr_lists: &[Vec<usize>],
    params: &AttrEncoderParams,
) -> Result<(Mat, Vec<EntityCache>)> {
    let n = params.id_embeddings.rows;
    if attr_lists.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: attr_lists.len(),
        });
    }
    let mut out = Mat::zeros(n, params.w2.rows);
    let mut caches = Vec::with_capacity(n);
    for (i, attrs) in attr_lists.iter().enumerate() {
        let (v, c) = encode_entity_cached(i, attrs, params)?;
        out.row_mut(i).copy_from_slice(&v);
        caches.push(c);
    }
    Ok((out, caches))
}

/// Backward of [`encode_all`]; rows of `d_out` that are entirely zero are
/// skipped.
pub fn encode_all_backward(
    caches: &[EntityCache],
    d_out: &Mat,
    params: &AttrEncoderParams,
    grads: &mut AttrEncoderParams,
) {
    for (i, cache) in caches.iter().enumerate() {
        let g = d_out.row(i);
        if g.iter().any(|v| *v != 0.0) {
            encode_entity_backward(i, cache, g, params, grads);
        }
    }
}

/// [`encode_all`] restricted to `rows`; every other row of the table is
/// left zero. Caches are returned alongside their row.
pub fn encode_rows(
    attr_lists: &[Vec<usize>],
    rows: &[usize],
    params: &AttrEncoderParams,
) -> Result<(Mat, Vec<(usize, EntityCache)>)> {
    let n = params.id_embeddings.rows;
    let mut out = Mat::zeros(n, params.w2.rows);
    let mut caches = Vec::with_capacity(rows.len());
    for &i in rows {
        let attrs = attr_lists.get(i).ok_or(Error::OutOfRange {
            what: "attribute lists",
            index: i,
            len: attr_lists.len(),
        })?;
        let (v, c) = encode_entity_cached(i, attrs, params)?;
        out.row_mut(i).copy_from_slice(&v);
        caches.push((i, c));
    }
    Ok((out, caches))
}

/// Backward of [`encode_rows`].
pub fn encode_rows_backward(
    caches: &[(usize, EntityCache)],
    d_out: &Mat,
    params: &AttrEncoderParams,
    grads: &mut AttrEncoderParams,
) {
    for (i, cache) in caches {
        let g = d_out.row(*i);
        if g.iter().any(|v| *v != 0.0) {
            encode_entity_backward(*i, cache, g, params, grads);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(k: usize, n: usize, d: usize) -> AttrEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        AttrEncoderParams::init(k, n, AttrDims { attr: d, id: d, out: d }, &mut rng)
    }

    #[test]
    fn empty_and_singleton_pair_sets_give_bias_only() {
        let mut p = params(4, 1, 3);
        p.b1 = vec![0.5, -1.0, 0.0];
        for attrs in [vec![], vec![2]] {
            let e = attr_interaction(&attrs, &p).unwrap();
            assert_eq!(e, vec![0.5, -0.01, 0.0]);
        }
    }

    #[test]
    fn identity_case() {
        let mut p = params(2, 1, 3);
        p.attr_embeddings.fill(1.0);
        p.w1 = Mat::identity(3);
        p.b1 = vec![0.0; 3];
        assert_eq!(attr_interaction(&[0, 1], &p).unwrap(), vec![1.0; 3]);
        // A negative pair product passes through the leaky slope.
        p.attr_embeddings.set(1, 0, -1.0);
        assert_eq!(attr_interaction(&[0, 1], &p).unwrap()[0], -0.01);
    }

    #[test]
    fn out_of_range_attribute() {
        let p = params(2, 1, 3);
        assert!(matches!(
            attr_interaction(&[0, 2], &p),
            Err(Error::OutOfRange { index: 2, .. })
        ));
        assert!(encode_entity(1, &[], &p).is_err());
    }

    #[test]
    fn encode_zero_and_identity() {
        let d = 3;
        let mut p = params(2, 1, d);
        p.w1 = Mat::zeros(d, d);
        p.b1 = vec![0.0; d];
        p.id_embeddings.fill(0.0);
        p.b2 = vec![0.0; d];
        assert_eq!(encode_entity(0, &[0, 1], &p).unwrap(), vec![0.0; d]);

        // w2 = [I | I] with non-negative inputs gives u + v.
        let mut w2 = Mat::zeros(d, 2 * d);
        for i in 0..d {
            w2.set(i, i, 1.0);
            w2.set(i, d + i, 1.0);
        }
        p.w2 = w2;
        p.w1 = Mat::identity(d);
        p.attr_embeddings = Mat::from_rows(&[vec![1.0, 2.0, 0.5], vec![1.0, 1.0, 2.0]]);
        p.id_embeddings = Mat::from_rows(&[vec![0.25, 0.0, 3.0]]);
        let u = attr_interaction(&[0, 1], &p).unwrap();
        assert_eq!(u, vec![1.0, 2.0, 1.0]);
        assert_eq!(encode_entity(0, &[1, 0], &p).unwrap(), vec![1.25, 2.0, 4.0]);
    }

    #[test]
    fn no_attributes_reduces_to_bias_composition() {
        let p = params(3, 2, 4);
        let e_att: Vec<f64> = p.b1.iter().map(|&b| leaky_relu(b)).collect();
        let mut concat = e_att;
        concat.extend_from_slice(p.id_embeddings.row(1));
        let expect: Vec<f64> = p
            .w2
            .matvec(&concat)
            .iter()
            .zip(&p.b2)
            .map(|(z, b)| leaky_relu(z + b))
            .collect();
        assert_eq!(encode_entity(1, &[], &p).unwrap(), expect);
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let p = params(6, 1, 8);
        let a = attr_interaction(&[0, 3, 5, 1], &p).unwrap();
        let b = attr_interaction(&[5, 1, 0, 3], &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(params(5, 7, 4), params(5, 7, 4));
    }
}

//! Multi-view knowledge network: entities, typed undirected triples, flat-file
//! ingestion, and time-window partitioning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Four weeks.
pub const DEFAULT_WINDOW_LENGTH: i64 = 28 * 24 * 3600;
/// Six months (182.5 days).
pub const DEFAULT_OBSERVATION_SPAN: i64 = 15_768_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Patient,
    Doctor,
    Hospital,
    Disease,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::Patient,
        EntityKind::Doctor,
        EntityKind::Hospital,
        EntityKind::Disease,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Patient => "patient",
            EntityKind::Doctor => "doctor",
            EntityKind::Hospital => "hospital",
            EntityKind::Disease => "disease",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "patient" => Ok(EntityKind::Patient),
            "doctor" => Ok(EntityKind::Doctor),
            "hospital" => Ok(EntityKind::Hospital),
            "disease" => Ok(EntityKind::Disease),
            other => Err(format!("unknown entity kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
}

impl EntityRef {
    pub fn new(kind: EntityKind, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Schema("entity id must be non-empty".into()));
        }
        Ok(EntityRef { kind, id })
    }

    pub fn patient(id: &str) -> Self {
        EntityRef::new(EntityKind::Patient, id).expect("non-empty id")
    }
    pub fn doctor(id: &str) -> Self {
        EntityRef::new(EntityKind::Doctor, id).expect("non-empty id")
    }
    pub fn hospital(id: &str) -> Self {
        EntityRef::new(EntityKind::Hospital, id).expect("non-empty id")
    }
    pub fn disease(id: &str) -> Self {
        EntityRef::new(EntityKind::Disease, id).expect("non-empty id")
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    DocHosp,
    DocDis,
    PatDis,
    PatHosp,
    PatDoc,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::DocHosp,
        Relation::DocDis,
        Relation::PatDis,
        Relation::PatHosp,
        Relation::PatDoc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::DocHosp => "doc_hosp",
            Relation::DocDis => "doc_dis",
            Relation::PatDis => "pat_dis",
            Relation::PatHosp => "pat_hosp",
            Relation::PatDoc => "pat_doc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Endpoint kinds in canonical order.
    pub fn endpoints(self) -> (EntityKind, EntityKind) {
        use EntityKind::*;
        match self {
            Relation::DocHosp => (Doctor, Hospital),
            Relation::DocDis => (Doctor, Disease),
            Relation::PatDis => (Patient, Disease),
            Relation::PatHosp => (Patient, Hospital),
            Relation::PatDoc => (Patient, Doctor),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown relation `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Online,
    Offline,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Online => "online",
            View::Offline => "offline",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "online" => Ok(View::Online),
            "offline" => Ok(View::Offline),
            other => Err(format!("unknown view `{other}`")),
        }
    }
}

/// A timestamped, undirected, typed edge. Endpoints are stored in canonical
/// `(kind, id)` order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityRef,
    pub relation: Relation,
    pub tail: EntityRef,
    pub timestamp: i64,
    pub view: View,
}

impl Triple {
    /// Validates the endpoint kinds against the relation and canonicalizes
    /// endpoint order.
    pub fn new(
        view: View,
        timestamp: i64,
        a: EntityRef,
        relation: Relation,
        b: EntityRef,
    ) -> Result<Self> {
        if timestamp < 0 {
            return Err(Error::Schema(format!("negative timestamp {timestamp}")));
        }
        let (head, tail) = if a <= b { (a, b) } else { (b, a) };
        let (hk, tk) = relation.endpoints();
        if head.kind != hk || tail.kind != tk {
            return Err(Error::Schema(format!(
                "relation {relation} requires {hk}/{tk} endpoints, got {}/{}",
                head.kind, tail.kind
            )));
        }
        Ok(Triple {
            head,
            relation,
            tail,
            timestamp,
            view,
        })
    }

    pub fn other(&self, e: &EntityRef) -> Option<&EntityRef> {
        if &self.head == e {
            Some(&self.tail)
        } else if &self.tail == e {
            Some(&self.head)
        } else {
            None
        }
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.view,
            self.timestamp,
            self.head.kind,
            self.head.id,
            self.relation,
            self.tail.kind,
            self.tail.id
        )
    }
}

#[derive(Debug, Clone)]
pub struct Neighbor<'a> {
    pub relation: Relation,
    pub other: &'a EntityRef,
    pub triple: &'a Triple,
}

/// Deduplicated triple store with a symmetric adjacency index.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeNetwork {
    triples: Vec<Triple>,
    entities: BTreeSet<EntityRef>,
    adjacency: HashMap<EntityRef, Vec<usize>>,
    view: Option<View>,
}

impl PartialEq for KnowledgeNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples && self.entities == other.entities
    }
}

impl KnowledgeNetwork {
    /// Builds a network from triples; duplicates collapse. The view tag is
    /// set when every triple shares one view.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        let triples: Vec<Triple> = set.into_iter().collect();
        let mut entities = BTreeSet::new();
        let mut adjacency: HashMap<EntityRef, Vec<usize>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            entities.insert(t.head.clone());
            entities.insert(t.tail.clone());
            adjacency.entry(t.head.clone()).or_default().push(i);
            adjacency.entry(t.tail.clone()).or_default().push(i);
        }
        let view = match triples.first() {
            Some(first) if triples.iter().all(|t| t.view == first.view) => Some(first.view),
            _ => None,
        };
        KnowledgeNetwork {
            triples,
            entities,
            adjacency,
            view,
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &BTreeSet<EntityRef> {
        &self.entities
    }

    pub fn view(&self) -> Option<View> {
        self.view
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    /// True when some triple links `a` and `b` under `relation`, at any
    /// timestamp.
    pub fn has_edge(&self, a: &EntityRef, relation: Relation, b: &EntityRef) -> bool {
        self.adjacency.get(a).is_some_and(|idx| {
            idx.iter().any(|&i| {
                let t = &self.triples[i];
                t.relation == relation && t.other(a) == Some(b)
            })
        })
    }

    /// Every triple incident to `e`, from either endpoint, sorted by
    /// `(relation, other, timestamp)`. Unknown entities yield an empty list.
    pub fn neighbors(&self, e: &EntityRef) -> Vec<Neighbor<'_>> {
        let mut out: Vec<Neighbor<'_>> = self
            .adjacency
            .get(e)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        let t = &self.triples[i];
                        Neighbor {
                            relation: t.relation,
                            other: t.other(e).expect("adjacency is consistent"),
                            triple: t,
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.sort_by(|a, b| {
            (a.relation, a.other, a.triple.timestamp).cmp(&(b.relation, b.other, b.triple.timestamp))
        });
        out
    }

    pub fn filter_view(&self, view: View) -> KnowledgeNetwork {
        KnowledgeNetwork::from_triples(self.triples.iter().filter(|t| t.view == view).cloned())
    }

    pub fn filter_time(&self, start: i64, end: i64) -> KnowledgeNetwork {
        KnowledgeNetwork::from_triples(
            self.triples
                .iter()
                .filter(|t| t.timestamp >= start && t.timestamp < end)
                .cloned(),
        )
    }

    /// Half-open `[min, max + 1)` timestamp range, or `None` when empty.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let min = self.triples.iter().map(|t| t.timestamp).min()?;
        let max = self.triples.iter().map(|t| t.timestamp).max()?;
        Some((min, max + 1))
    }

    pub fn merge(&self, other: &KnowledgeNetwork) -> KnowledgeNetwork {
        KnowledgeNetwork::from_triples(self.triples.iter().chain(other.triples.iter()).cloned())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.triples {
            s.push_str(&t.to_line());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

fn fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| Error::parse(path, 0, "file is not valid UTF-8"))
}

/// Parses triples from TSV text; `origin` is used only for error messages.
pub fn parse_triples_str(text: &str, origin: &Path) -> Result<KnowledgeNetwork> {
    let mut triples = Vec::new();
    for (lineno, line) in content_lines(text) {
        let f = fields(line);
        if f.len() != 7 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected 7 fields, found {}", f.len()),
            ));
        }
        let bad = |m: String| Error::parse(origin, lineno, m);
        let view: View = f[0].parse().map_err(bad)?;
        let timestamp: i64 = f[1]
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad timestamp `{}`", f[1])))?;
        let hk: EntityKind = f[2].parse().map_err(bad)?;
        let rel: Relation = f[4].parse().map_err(bad)?;
        let tk: EntityKind = f[5].parse().map_err(bad)?;
        let head = EntityRef::new(hk, f[3]).map_err(|e| bad(e.to_string()))?;
        let tail = EntityRef::new(tk, f[6]).map_err(|e| bad(e.to_string()))?;
        let triple = Triple::new(view, timestamp, head, rel, tail).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}:{lineno}: {m}", origin.display())),
            other => other,
        })?;
        triples.push(triple);
    }
    Ok(KnowledgeNetwork::from_triples(triples))
}

pub fn parse_triples(path: &Path) -> Result<KnowledgeNetwork> {
    parse_triples_str(&read_text(path)?, path)
}

/// A time-partitioned view of one network.
#[derive(Debug, Clone)]
pub struct WindowedNetworks {
    pub global: KnowledgeNetwork,
    pub windows: Vec<KnowledgeNetwork>,
    pub window_length: i64,
    /// Half-open `[start, end)`.
    pub observation_span: (i64, i64),
}

impl WindowedNetworks {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }
}

/// Splits `net` into `ceil(span / window_length)` half-open windows over its
/// own timestamp range.
pub fn split_windows(net: &KnowledgeNetwork, window_length: i64) -> Result<WindowedNetworks> {
    let span = net
        .time_range()
        .ok_or_else(|| Error::Config("cannot window an empty network".into()))?;
    split_windows_in(net, window_length, span)
}

/// Splits over an explicit half-open observation span. Triples outside the
/// span are excluded from both `global` and the windows.
pub fn split_windows_in(
    net: &KnowledgeNetwork,
    window_length: i64,
    span: (i64, i64),
) -> Result<WindowedNetworks> {
    if window_length <= 0 {
        return Err(Error::Config(format!(
            "window length must be positive, got {window_length}"
        )));
    }
    let (start, end) = span;
    if end <= start {
        return Err(Error::Config(format!("empty observation span [{start}, {end})")));
    }
    let global = if net.time_range().is_some_and(|(a, b)| a >= start && b <= end) {
        net.clone()
    } else {
        net.filter_time(start, end)
    };
    let m = ((end - start) + window_length - 1) / window_length;
    let mut buckets: Vec<Vec<Triple>> = vec![Vec::new(); m as usize];
    for t in global.triples() {
        let k = ((t.timestamp - start) / window_length) as usize;
        buckets[k].push(t.clone());
    }
    let windows = buckets
        .into_iter()
        .map(KnowledgeNetwork::from_triples)
        .collect();
    Ok(WindowedNetworks {
        global,
        windows,
        window_length,
        observation_span: (start, end),
    })
}

/// Categorical attributes per entity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeTable {
    pub entries: BTreeMap<EntityRef, Vec<(String, String)>>,
}

impl AttributeTable {
    pub fn get(&self, e: &EntityRef) -> &[(String, String)] {
        self.entries.get(e).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, owner: EntityRef, attrs: Vec<(String, String)>) -> Result<()> {
        let mut names = BTreeSet::new();
        for (n, _) in &attrs {
            if !names.insert(n.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute `{n}` on {owner}")));
            }
        }
        let slot = self.entries.entry(owner.clone()).or_default();
        for (n, v) in attrs {
            if slot.iter().any(|(m, _)| *m == n) {
                return Err(Error::Schema(format!("duplicate attribute `{n}` on {owner}")));
            }
            slot.push((n, v));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (e, attrs) in &self.entries {
            let kv: Vec<String> = attrs.iter().map(|(n, v)| format!("{n}={v}")).collect();
            s.push_str(&format!("{}\t{}\t{}\n", e.kind, e.id, kv.join(",")));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_attributes_str(text: &str, origin: &Path) -> Result<AttributeTable> {
    let mut table = AttributeTable::default();
    for (lineno, line) in content_lines(text) {
        let f = fields(line);
        if f.len() != 3 && f.len() != 2 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected 3 fields, found {}", f.len()),
            ));
        }
        let kind: EntityKind = f[0].parse().map_err(|m| Error::parse(origin, lineno, m))?;
        let owner = EntityRef::new(kind, f[1]).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        let mut attrs = Vec::new();
        if let Some(spec) = f.get(2) {
            for kv in spec.split(',').filter(|s| !s.is_empty()) {
                let (n, v) = kv.split_once('=').ok_or_else(|| {
                    Error::parse(origin, lineno, format!("attribute `{kv}` is not name=value"))
                })?;
                if n.is_empty() {
                    return Err(Error::parse(origin, lineno, "empty attribute name"));
                }
                attrs.push((n.to_string(), v.to_string()));
            }
        }
        table.insert(owner, attrs).map_err(|e| match e {
            Error::Schema(m) => Error::parse(origin, lineno, m),
            other => other,
        })?;
    }
    Ok(table)
}

pub fn parse_attributes(path: &Path) -> Result<AttributeTable> {
    parse_attributes_str(&read_text(path)?, path)
}

/// Writes raw lines to `path`, creating parent directories.
pub(crate) fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        f.write_all(l.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<KnowledgeNetwork> {
        parse_triples_str(text, Path::new("<test>"))
    }

    #[test]
    fn empty_file() {
        let net = parse("").unwrap();
        assert_eq!(net.len(), 0);
        assert!(net.entities().is_empty());
    }

    #[test]
    fn single_line_space_separated() {
        let net = parse("online 100 patient p1 pat_doc doctor d1\n").unwrap();
        assert_eq!(net.len(), 1);
        assert_eq!(net.entities().len(), 2);
    }

    #[test]
    fn duplicate_lines_collapse() {
        let line = "online\t100\tpatient\tp1\tpat_doc\tdoctor\td1\n";
        let net = parse(&format!("{line}{line}# comment\n\n")).unwrap();
        assert_eq!(net.len(), 1);
    }

    #[test]
    fn reversed_endpoints_are_canonicalized() {
        let a = parse("online 5 patient p1 pat_doc doctor d1").unwrap();
        let b = parse("online 5 doctor d1 pat_doc patient p1").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.triples()[0].head, EntityRef::patient("p1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("online 1 patient p1 pat_doc doctor d1\nonline x patient p1 pat_doc doctor d1")
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("online 1 patient p1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn kind_mismatch_is_schema_error() {
        let err = parse("online 1 patient p1 doc_hosp doctor d1").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
        assert!(matches!(
            parse("online -3 patient p1 pat_doc doctor d1"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn neighbors_are_symmetric() {
        let net = parse(
            "online 1 patient p1 pat_doc doctor d1\n\
             online 2 patient p1 pat_dis disease x\n\
             online 3 patient p1 pat_hosp hospital h\n",
        )
        .unwrap();
        let d1 = net.neighbors(&EntityRef::doctor("d1"));
        assert_eq!(d1.len(), 1);
        assert_eq!(d1[0].relation, Relation::PatDoc);
        assert_eq!(d1[0].other, &EntityRef::patient("p1"));
        assert_eq!(net.neighbors(&EntityRef::patient("p1")).len(), 3);
        assert!(net.neighbors(&EntityRef::patient("nobody")).is_empty());
        let rels: Vec<_> = net
            .neighbors(&EntityRef::patient("p1"))
            .iter()
            .map(|n| n.relation)
            .collect();
        assert_eq!(rels, vec![Relation::PatDis, Relation::PatHosp, Relation::PatDoc]);
    }

    #[test]
    fn windows_single() {
        let net = parse("online 0 patient p1 pat_doc doctor d1\nonline 99 patient p2 pat_doc doctor d1").unwrap();
        let w = split_windows(&net, 200).unwrap();
        assert_eq!(w.num_windows(), 1);
        assert_eq!(w.windows[0], net);
    }

    #[test]
    fn windows_half_open_boundary() {
        let net = parse("online 0 patient p1 pat_doc doctor d1\nonline 50 patient p2 pat_doc doctor d1").unwrap();
        let w = split_windows(&net, 50).unwrap();
        assert_eq!(w.num_windows(), 2);
        assert_eq!(w.windows[0].triples()[0].timestamp, 0);
        assert_eq!(w.windows[1].triples()[0].timestamp, 50);
        assert_eq!(w.windows[0].len() + w.windows[1].len(), 2);
    }

    #[test]
    fn window_length_must_be_positive() {
        let net = parse("online 0 patient p1 pat_doc doctor d1").unwrap();
        assert!(matches!(split_windows(&net, 0), Err(Error::Config(_))));
        assert!(matches!(split_windows(&net, -5), Err(Error::Config(_))));
    }

    #[test]
    fn attributes_parse_and_reject_duplicates() {
        let t = parse_attributes_str(
            "# kind id attrs\ndoctor\td1\ttitle=chief,tier=3\npatient\tp1\tage=30s\n",
            Path::new("<attrs>"),
        )
        .unwrap();
        assert_eq!(t.get(&EntityRef::doctor("d1")).len(), 2);
        assert!(t.get(&EntityRef::hospital("none")).is_empty());
        let dup = parse_attributes_str("doctor\td1\ttitle=a,title=b\n", Path::new("<attrs>"));
        assert!(dup.is_err());
    }
}

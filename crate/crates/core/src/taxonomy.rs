//! Entity type graphs and type induction over instance-of / subclass-of
//! edges.
//!
//! Ancestors of an entity are reached by one `instance_of` or `subclass_of`
//! hop from the entity itself, followed by any number of `subclass_of`
//! hops. The entity type graph (ETG) of a seed set holds every such
//! ancestor, each annotated with how many seeds it covers. Induction walks
//! the ETG from fine to coarse types and picks the first type covering more
//! than a threshold fraction of the seeds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

/// Default coverage threshold for type induction.
pub const DEFAULT_TYPE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("self edge on {0}")]
    SelfEdge(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("entity set is empty")]
    EmptyEntitySet,
    #[error("type graph contains a cycle through {0}; condense it first")]
    Cycle(String),
    #[error("type order is empty")]
    EmptyOrder,
    #[error("threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("no type covers more than {threshold} of {seed_size} entities; best is {best_id} ({best_label}) at {best_fraction:.4}")]
    BelowThreshold {
        threshold: f64,
        seed_size: usize,
        best_id: String,
        best_label: String,
        best_fraction: f64,
    },
    #[error("unknown type {0}")]
    UnknownType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    InstanceOf,
    SubclassOf,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::InstanceOf => "instance_of",
            EdgeKind::SubclassOf => "subclass_of",
        }
    }
}

impl FromStr for EdgeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance_of" => Ok(EdgeKind::InstanceOf),
            "subclass_of" => Ok(EdgeKind::SubclassOf),
            other => Err(format!("unknown edge kind `{other}`")),
        }
    }
}

/// Immutable-after-load store of taxonomy edges and entity labels.
#[derive(Debug, Clone, Default)]
pub struct TaxonomyStore {
    parents: BTreeMap<String, BTreeSet<(String, EdgeKind)>>,
    degree: HashMap<String, usize>,
    labels: BTreeMap<String, String>,
    by_label: HashMap<String, Vec<String>>,
}

impl TaxonomyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(
        &mut self,
        child: impl Into<String>,
        parent: impl Into<String>,
        kind: EdgeKind,
    ) -> Result<(), TaxonomyError> {
        let (child, parent) = (child.into(), parent.into());
        if child == parent {
            return Err(TaxonomyError::SelfEdge(child));
        }
        if self
            .parents
            .entry(child.clone())
            .or_default()
            .insert((parent.clone(), kind))
        {
            *self.degree.entry(child).or_insert(0) += 1;
            *self.degree.entry(parent).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn set_label(&mut self, id: impl Into<String>, label: impl Into<String>) {
        let (id, label) = (id.into(), label.into());
        if let Some(old) = self.labels.insert(id.clone(), label.clone()) {
            if let Some(ids) = self.by_label.get_mut(&old) {
                ids.retain(|i| *i != id);
            }
        }
        self.by_label.entry(label).or_default().push(id);
    }

    /// The entity's label, or its id when no label is known.
    pub fn label<'a>(&'a self, id: &'a str) -> &'a str {
        self.labels.get(id).map(String::as_str).unwrap_or(id)
    }

    pub fn parents(&self, id: &str) -> impl Iterator<Item = (&str, EdgeKind)> {
        self.parents
            .get(id)
            .into_iter()
            .flatten()
            .map(|(p, k)| (p.as_str(), *k))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.degree.contains_key(id) || self.labels.contains_key(id)
    }

    pub fn edge_count(&self) -> usize {
        self.parents.values().map(BTreeSet::len).sum()
    }

    /// Resolves an exact label to an entity id. Ambiguous labels go to the
    /// id with the most taxonomy edges, then the smallest id.
    pub fn resolve_label(&self, label: &str) -> Option<&str> {
        let ids = self.by_label.get(label)?;
        let best = ids.iter().max_by(|a, b| {
            let da = self.degree.get(*a).copied().unwrap_or(0);
            let db = self.degree.get(*b).copied().unwrap_or(0);
            da.cmp(&db).then_with(|| b.cmp(a))
        })?;
        if ids.len() > 1 {
            log::debug!("label `{label}` is ambiguous across {} ids; using {best}", ids.len());
        }
        Some(best)
    }

    /// Strict ancestors of `id`, paired with their hop distance.
    pub fn ancestors(&self, id: &str, max_depth: Option<usize>) -> BTreeMap<String, usize> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut queue: VecDeque<(&str, usize)> = VecDeque::new();
        if max_depth == Some(0) {
            return seen;
        }
        for (p, _) in self.parents(id) {
            if p != id && !seen.contains_key(p) {
                seen.insert(p.to_string(), 1);
                queue.push_back((p, 1));
            }
        }
        while let Some((node, depth)) = queue.pop_front() {
            if max_depth.is_some_and(|m| depth >= m) {
                continue;
            }
            for (p, kind) in self.parents(node) {
                if kind == EdgeKind::SubclassOf && p != id && !seen.contains_key(p) {
                    seen.insert(p.to_string(), depth + 1);
                    queue.push_back((p, depth + 1));
                }
            }
        }
        seen
    }

    pub fn load_edges(&mut self, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
        let path = path.as_ref();
        self.parse_edges(open(path)?, &path.display().to_string())
    }

    /// Reads `child \t parent \t {instance_of|subclass_of}` lines.
    pub fn parse_edges(&mut self, reader: impl BufRead, origin: &str) -> Result<(), TaxonomyError> {
        for_each_line(reader, origin, |line, lineno| {
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = |reason: String| TaxonomyError::Malformed {
                path: origin.to_string(),
                line: lineno,
                reason,
            };
            if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
                return Err(malformed("expected `child \\t parent \\t kind`".into()));
            }
            let kind = fields[2].trim().parse::<EdgeKind>().map_err(malformed)?;
            self.add_edge(fields[0], fields[1], kind).map_err(|e| match e {
                TaxonomyError::SelfEdge(id) => malformed(format!("self edge on {id}")),
                other => other,
            })
        })
    }

    pub fn load_labels(&mut self, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
        let path = path.as_ref();
        self.parse_labels(open(path)?, &path.display().to_string())
    }

    /// Reads `entity_id \t label` lines.
    pub fn parse_labels(&mut self, reader: impl BufRead, origin: &str) -> Result<(), TaxonomyError> {
        for_each_line(reader, origin, |line, lineno| {
            match line.split_once('\t') {
                Some((id, label)) if !id.is_empty() && !label.is_empty() => {
                    self.set_label(id, label);
                    Ok(())
                }
                _ => Err(TaxonomyError::Malformed {
                    path: origin.to_string(),
                    line: lineno,
                    reason: "expected `entity_id \\t label`".into(),
                }),
            }
        })
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, TaxonomyError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn for_each_line(
    reader: impl BufRead,
    origin: &str,
    mut f: impl FnMut(&str, usize) -> Result<(), TaxonomyError>,
) -> Result<(), TaxonomyError> {
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TaxonomyError::Io {
            path: origin.to_string(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        f(line, idx + 1)?;
    }
    Ok(())
}

/// A type node of the ETG. After condensation a node may stand for several
/// mutually reachable types; `id` is then the smallest member id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeNode {
    pub id: String,
    pub label: String,
    pub members: Vec<String>,
    pub coverage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTypeGraph {
    nodes: Vec<TypeNode>,
    /// Sorted indices of the seeds covered by each node.
    covered: Vec<Vec<u32>>,
    /// child -> parent, sorted and unique.
    edges: Vec<(usize, usize)>,
    seeds: Vec<String>,
    uncovered: Vec<String>,
    collapsed: Vec<Vec<String>>,
}

impl EntityTypeGraph {
    pub fn nodes(&self) -> &[TypeNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn seed_size(&self) -> usize {
        self.seeds.len()
    }

    pub fn seeds(&self) -> &[String] {
        &self.seeds
    }

    /// Seeds with no outgoing taxonomy edge.
    pub fn uncovered(&self) -> &[String] {
        &self.uncovered
    }

    /// Member ids of every component merged by [`condense_cycles`].
    pub fn collapsed(&self) -> &[Vec<String>] {
        &self.collapsed
    }

    /// Node holding `type_id`, either as its id or as a condensed member.
    pub fn find(&self, type_id: &str) -> Option<&TypeNode> {
        self.nodes
            .iter()
            .find(|n| n.id == type_id || n.members.iter().any(|m| m == type_id))
    }

    pub fn coverage_of(&self, type_id: &str) -> Option<usize> {
        self.find(type_id).map(|n| n.coverage)
    }

    /// Seeds covered by the node holding `type_id`.
    pub fn covered_seeds(&self, type_id: &str) -> Option<Vec<&str>> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.id == type_id || n.members.iter().any(|m| m == type_id))?;
        Some(
            self.covered[idx]
                .iter()
                .map(|&s| self.seeds[s as usize].as_str())
                .collect(),
        )
    }
}

/// Builds the entity type graph of `entity_set`.
///
/// Coverage of a type is the number of distinct seeds having it as an
/// ancestor. A seed that is itself a type of the graph also covers its own
/// node.
pub fn build_etg<'a>(
    entity_set: impl IntoIterator<Item = &'a str>,
    store: &TaxonomyStore,
    max_depth: Option<usize>,
) -> Result<EntityTypeGraph, TaxonomyError> {
    let seeds: Vec<String> = entity_set
        .into_iter()
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if seeds.is_empty() {
        return Err(TaxonomyError::EmptyEntitySet);
    }

    let mut covered: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    let mut uncovered = Vec::new();
    for (si, seed) in seeds.iter().enumerate() {
        let ancestors = store.ancestors(seed, max_depth);
        if ancestors.is_empty() {
            uncovered.push(seed.clone());
            continue;
        }
        for anc in ancestors.into_keys() {
            covered.entry(anc).or_default().insert(si as u32);
        }
    }
    if !uncovered.is_empty() {
        log::warn!(
            "{} of {} entities have no taxonomy edge",
            uncovered.len(),
            seeds.len()
        );
    }
    // seeds that are themselves types cover their own node
    for (si, seed) in seeds.iter().enumerate() {
        if let Some(set) = covered.get_mut(seed) {
            set.insert(si as u32);
        }
    }

    let index: HashMap<&str, usize> = covered
        .keys()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let seed_set: BTreeSet<&str> = seeds.iter().map(String::as_str).collect();
    let mut edges = BTreeSet::new();
    for (ci, id) in covered.keys().enumerate() {
        let is_seed = seed_set.contains(id.as_str());
        for (parent, kind) in store.parents(id) {
            if kind == EdgeKind::InstanceOf && !is_seed {
                continue;
            }
            if let Some(&pi) = index.get(parent) {
                edges.insert((ci, pi));
            }
        }
    }

    let (nodes, covered): (Vec<_>, Vec<_>) = covered
        .into_iter()
        .map(|(id, set)| {
            let node = TypeNode {
                label: store.label(&id).to_string(),
                members: vec![id.clone()],
                coverage: set.len(),
                id,
            };
            (node, set.into_iter().collect::<Vec<u32>>())
        })
        .unzip();

    Ok(EntityTypeGraph {
        nodes,
        covered,
        edges: edges.into_iter().collect(),
        seeds,
        uncovered,
        collapsed: Vec::new(),
    })
}

/// Collapses every strongly connected component into one node whose
/// coverage is the union of its members' covered seeds.
pub fn condense_cycles(etg: &EntityTypeGraph) -> EntityTypeGraph {
    let mut graph: DiGraph<usize, ()> = DiGraph::new();
    let idx: Vec<_> = (0..etg.nodes.len()).map(|i| graph.add_node(i)).collect();
    for &(c, p) in &etg.edges {
        graph.add_edge(idx[c], idx[p], ());
    }
    let components = tarjan_scc(&graph);
    if components.iter().all(|c| c.len() == 1) {
        return etg.clone();
    }

    let mut merged: Vec<(Vec<usize>, Vec<String>)> = components
        .into_iter()
        .map(|comp| {
            let mut old: Vec<usize> = comp.into_iter().map(|n| graph[n]).collect();
            old.sort_unstable();
            let mut members: Vec<String> = old
                .iter()
                .flat_map(|&o| etg.nodes[o].members.iter().cloned())
                .collect();
            members.sort();
            (old, members)
        })
        .collect();
    merged.sort_by(|a, b| a.1[0].cmp(&b.1[0]));

    let mut remap = vec![0usize; etg.nodes.len()];
    let mut nodes = Vec::with_capacity(merged.len());
    let mut covered = Vec::with_capacity(merged.len());
    let mut collapsed = etg.collapsed.clone();
    for (new, (old, members)) in merged.into_iter().enumerate() {
        for &o in &old {
            remap[o] = new;
        }
        let seeds: BTreeSet<u32> = old.iter().flat_map(|&o| etg.covered[o].iter().copied()).collect();
        let head = old
            .iter()
            .map(|&o| &etg.nodes[o])
            .min_by(|a, b| a.id.cmp(&b.id))
            .expect("non-empty component");
        let label = if old.len() > 1 {
            collapsed.push(members.clone());
            format!("{} (+{} in cycle)", head.label, members.len() - 1)
        } else {
            head.label.clone()
        };
        nodes.push(TypeNode {
            id: head.id.clone(),
            label,
            members,
            coverage: seeds.len(),
        });
        covered.push(seeds.into_iter().collect());
    }
    let newly: Vec<&Vec<String>> = collapsed[etg.collapsed.len()..].iter().collect();
    log::warn!("collapsed {} taxonomy cycles: {:?}", newly.len(), newly);

    let edges: BTreeSet<(usize, usize)> = etg
        .edges
        .iter()
        .map(|&(c, p)| (remap[c], remap[p]))
        .filter(|(c, p)| c != p)
        .collect();

    EntityTypeGraph {
        nodes,
        covered,
        edges: edges.into_iter().collect(),
        seeds: etg.seeds.clone(),
        uncovered: etg.uncovered.clone(),
        collapsed,
    }
}

/// Topological order from fine to coarse: every child precedes its parents.
/// Among available nodes the one with the smallest coverage, then the
/// smallest id, goes first.
pub fn fine_to_coarse_order(dag: &EntityTypeGraph) -> Result<Vec<TypeNode>, TaxonomyError> {
    let n = dag.nodes.len();
    let mut pending_children = vec![0usize; n];
    let mut parents_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(c, p) in &dag.edges {
        pending_children[p] += 1;
        parents_of[c].push(p);
    }
    let key = |i: usize| Reverse((dag.nodes[i].coverage, dag.nodes[i].id.clone(), i));
    let mut ready: BinaryHeap<_> = (0..n).filter(|&i| pending_children[i] == 0).map(key).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, _, i))) = ready.pop() {
        order.push(dag.nodes[i].clone());
        for &p in &parents_of[i] {
            pending_children[p] -= 1;
            if pending_children[p] == 0 {
                ready.push(key(p));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .find(|&i| pending_children[i] > 0)
            .map(|i| dag.nodes[i].id.clone())
            .unwrap_or_default();
        return Err(TaxonomyError::Cycle(stuck));
    }
    Ok(order)
}

/// The induced type of one relation's object set.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeAssignment {
    pub relation_id: String,
    pub type_id: String,
    pub type_label: String,
    pub coverage_fraction: f64,
}

impl TypeAssignment {
    /// `relation_id \t type_id \t type_label \t coverage_fraction`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}",
            self.relation_id, self.type_id, self.type_label, self.coverage_fraction
        )
    }
}

/// First type in `order` whose coverage exceeds `threshold * seed_size`.
pub fn induce_type(
    relation_id: &str,
    order: &[TypeNode],
    seed_size: usize,
    threshold: f64,
) -> Result<TypeAssignment, TaxonomyError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(TaxonomyError::InvalidThreshold(threshold));
    }
    if order.is_empty() || seed_size == 0 {
        return Err(TaxonomyError::EmptyOrder);
    }
    let fraction = |n: &TypeNode| n.coverage as f64 / seed_size as f64;
    if let Some(node) = order.iter().find(|n| fraction(n) > threshold) {
        return Ok(TypeAssignment {
            relation_id: relation_id.to_string(),
            type_id: node.id.clone(),
            type_label: node.label.clone(),
            coverage_fraction: fraction(node),
        });
    }
    let best = order
        .iter()
        .max_by(|a, b| a.coverage.cmp(&b.coverage).then_with(|| b.id.cmp(&a.id)))
        .expect("non-empty order");
    Err(TaxonomyError::BelowThreshold {
        threshold,
        seed_size,
        best_id: best.id.clone(),
        best_label: best.label.clone(),
        best_fraction: fraction(best),
    })
}

/// Convenience: ETG, condensation, ordering and induction in one call.
pub fn induce_entity_set_type<'a>(
    relation_id: &str,
    entity_set: impl IntoIterator<Item = &'a str>,
    store: &TaxonomyStore,
    threshold: f64,
    max_depth: Option<usize>,
) -> Result<(TypeAssignment, EntityTypeGraph), TaxonomyError> {
    let etg = condense_cycles(&build_etg(entity_set, store, max_depth)?);
    let order = fine_to_coarse_order(&etg)?;
    let assignment = induce_type(relation_id, &order, etg.seed_size(), threshold)?;
    Ok((assignment, etg))
}

/// Candidate labels whose entity has the given type as an ancestor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeMembers {
    pub members: BTreeSet<String>,
    pub unresolved: usize,
}

/// Filters `candidate_labels` down to the members of `type_id`. Labels are
/// resolved to entities by exact match; a condensed type matches through
/// any of its member ids.
pub fn type_members<'a>(
    type_id: &str,
    candidate_labels: impl IntoIterator<Item = &'a str>,
    store: &TaxonomyStore,
    etg: &EntityTypeGraph,
    max_depth: Option<usize>,
) -> Result<TypeMembers, TaxonomyError> {
    let node = etg
        .find(type_id)
        .ok_or_else(|| TaxonomyError::UnknownType(type_id.to_string()))?;
    let targets: BTreeSet<&str> = node.members.iter().map(String::as_str).collect();
    let mut out = TypeMembers::default();
    for label in candidate_labels.into_iter().collect::<BTreeSet<_>>() {
        let Some(entity) = store.resolve_label(label) else {
            out.unresolved += 1;
            continue;
        };
        let ancestors = store.ancestors(entity, max_depth);
        if ancestors.keys().any(|a| targets.contains(a.as_str())) {
            out.members.insert(label.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EdgeKind::*;

    fn store(edges: &[(&str, &str, EdgeKind)]) -> TaxonomyStore {
        let mut s = TaxonomyStore::new();
        for (c, p, k) in edges {
            s.add_edge(*c, *p, *k).unwrap();
        }
        s
    }

    #[test]
    fn chain_coverage() {
        let s = store(&[("e", "t1", InstanceOf), ("t1", "t2", SubclassOf)]);
        let g = build_etg(["e"], &s, None).unwrap();
        assert_eq!(g.coverage_of("t1"), Some(1));
        assert_eq!(g.coverage_of("t2"), Some(1));
        assert_eq!(g.nodes().len(), 2);
    }

    #[test]
    fn diamond_counts_once() {
        let s = store(&[
            ("e", "a", InstanceOf),
            ("e", "b", InstanceOf),
            ("a", "c", SubclassOf),
            ("b", "c", SubclassOf),
        ]);
        let g = build_etg(["e"], &s, None).unwrap();
        assert_eq!(g.coverage_of("c"), Some(1));
    }

    #[test]
    fn depth_cap_and_uncovered() {
        let s = store(&[("e", "t1", InstanceOf), ("t1", "t2", SubclassOf)]);
        let g = build_etg(["e", "lonely"], &s, Some(1)).unwrap();
        assert_eq!(g.coverage_of("t2"), None);
        assert_eq!(g.uncovered(), ["lonely".to_string()]);
        assert_eq!(g.seed_size(), 2);
        assert!(matches!(
            build_etg(std::iter::empty(), &s, None),
            Err(TaxonomyError::EmptyEntitySet)
        ));
    }

    #[test]
    fn metaclass_edges_not_followed() {
        // instance_of above the first hop would pull in metaclasses
        let s = store(&[
            ("paris", "city", InstanceOf),
            ("city", "settlement type", InstanceOf),
        ]);
        let g = build_etg(["paris"], &s, None).unwrap();
        assert!(g.find("settlement type").is_none());
    }

    #[test]
    fn seed_that_is_a_type_covers_itself() {
        let s = store(&[("city", "settlement", SubclassOf), ("paris", "city", InstanceOf)]);
        let g = build_etg(["city", "paris"], &s, None).unwrap();
        assert_eq!(g.coverage_of("city"), Some(2));
        assert_eq!(g.coverage_of("settlement"), Some(2));
    }

    #[test]
    fn self_edges_rejected() {
        let mut s = TaxonomyStore::new();
        assert!(matches!(s.add_edge("a", "a", SubclassOf), Err(TaxonomyError::SelfEdge(_))));
        let err = s.parse_edges("x\tx\tsubclass_of\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, TaxonomyError::Malformed { line: 1, .. }));
        assert!(s.parse_edges("x\ty\tpart_of\n".as_bytes(), "t").is_err());
    }

    fn cyclic() -> EntityTypeGraph {
        // e1 -> a, e2 -> b, a <-> b, b -> c, c -> a  (a, b, c form one SCC)
        let s = store(&[
            ("e1", "a", InstanceOf),
            ("e2", "b", InstanceOf),
            ("a", "b", SubclassOf),
            ("b", "c", SubclassOf),
            ("c", "a", SubclassOf),
            ("c", "top", SubclassOf),
        ]);
        build_etg(["e1", "e2"], &s, None).unwrap()
    }

    #[test]
    fn condensation() {
        let g = cyclic();
        assert!(fine_to_coarse_order(&g).is_err());
        let c = condense_cycles(&g);
        assert_eq!(c.nodes().len(), 2);
        let node = c.find("b").unwrap();
        assert_eq!(node.id, "a");
        assert_eq!(node.members, vec!["a", "b", "c"]);
        assert_eq!(node.coverage, 2);
        assert_eq!(c.collapsed().len(), 1);
        let order = fine_to_coarse_order(&c).unwrap();
        assert_eq!(order.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["a", "top"]);

        let two = store(&[("e1", "a", InstanceOf), ("a", "b", SubclassOf), ("b", "a", SubclassOf)]);
        let c = condense_cycles(&build_etg(["e1"], &two, None).unwrap());
        assert_eq!(c.nodes().len(), 1);
        assert_eq!(c.nodes()[0].coverage, 1);

        let acyclic = build_etg(["e"], &store(&[("e", "t", InstanceOf)]), None).unwrap();
        assert_eq!(condense_cycles(&acyclic), acyclic);
    }

    #[test]
    fn ordering_ties_and_empty() {
        let s = store(&[
            ("e1", "big", InstanceOf),
            ("e2", "big", InstanceOf),
            ("e3", "big", InstanceOf),
            ("e1", "small", InstanceOf),
        ]);
        let g = build_etg(["e1", "e2", "e3"], &s, None).unwrap();
        let order = fine_to_coarse_order(&g).unwrap();
        assert_eq!(order[0].id, "small");
        let mut empty = g.clone();
        empty.nodes.clear();
        empty.edges.clear();
        empty.covered.clear();
        assert!(fine_to_coarse_order(&empty).unwrap().is_empty());
    }

    #[test]
    fn induction_rules() {
        let s = store(&[("e1", "t", InstanceOf), ("e2", "t", InstanceOf)]);
        let (a, _) = induce_entity_set_type("R", ["e1", "e2"], &s, 0.8, None).unwrap();
        assert_eq!(a.type_id, "t");
        assert_eq!(a.coverage_fraction, 1.0);
        // exactly 80% is not "more than" 80%
        let s = store(&[
            ("e1", "t", InstanceOf),
            ("e2", "t", InstanceOf),
            ("e3", "t", InstanceOf),
            ("e4", "t", InstanceOf),
            ("e5", "u", InstanceOf),
        ]);
        let err = induce_entity_set_type("R", ["e1", "e2", "e3", "e4", "e5"], &s, 0.8, None)
            .unwrap_err();
        match err {
            TaxonomyError::BelowThreshold { best_id, best_fraction, .. } => {
                assert_eq!(best_id, "t");
                assert!((best_fraction - 0.8).abs() < 1e-12);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            induce_type("R", &[], 3, 0.8),
            Err(TaxonomyError::EmptyOrder)
        ));
        let order = vec![TypeNode { id: "t".into(), label: "t".into(), members: vec!["t".into()], coverage: 1 }];
        assert!(matches!(induce_type("R", &order, 1, 0.0), Err(TaxonomyError::InvalidThreshold(_))));
        assert!(matches!(induce_type("R", &order, 1, 1.5), Err(TaxonomyError::InvalidThreshold(_))));
    }

    #[test]
    fn members_of_type() {
        let mut s = store(&[
            ("Q90", "Q515", InstanceOf),
            ("Q515", "Q486972", SubclassOf),
            ("Q937", "Q5", InstanceOf),
        ]);
        s.set_label("Q90", "Paris");
        s.set_label("Q937", "Einstein");
        s.set_label("Q515", "city");
        let g = build_etg(["Q90"], &s, None).unwrap();
        let m = type_members("Q515", ["Paris", "Einstein", "Atlantis"], &s, &g, None).unwrap();
        assert_eq!(m.members, BTreeSet::from(["Paris".to_string()]));
        assert_eq!(m.unresolved, 1);
        assert!(type_members("Q515", std::iter::empty(), &s, &g, None).unwrap().members.is_empty());
        assert!(matches!(
            type_members("Q999", ["Paris"], &s, &g, None),
            Err(TaxonomyError::UnknownType(_))
        ));
    }

    #[test]
    fn ambiguous_labels_prefer_most_connected() {
        let mut s = store(&[("Q2", "t", InstanceOf), ("Q2", "u", InstanceOf)]);
        s.set_label("Q1", "Georgia");
        s.set_label("Q2", "Georgia");
        assert_eq!(s.resolve_label("Georgia"), Some("Q2"));
        assert_eq!(s.resolve_label("Nowhere"), None);
        assert_eq!(s.label("zzz"), "zzz");
    }
}

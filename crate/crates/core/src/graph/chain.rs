//! Reasoning chains: simple edge paths that end on a visual node and touch
//! both modalities.
//!
//! [`sample_chain`] draws chains by rejection sampling; [`enumerate_chains`]
//! lists every valid chain by exhaustive depth-first search and serves as the
//! oracle the sampler is checked against.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ContentGraph, EntityNode, GraphError, NodeId, Origin, RelationEdge};

/// Proposal walks tried per `(graph, hops)` before giving up.
pub const MAX_SAMPLING_ATTEMPTS: usize = 200;
/// Largest graph [`enumerate_chains`] accepts by default.
pub const DEFAULT_ORACLE_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopBounds {
    pub min: usize,
    pub max: usize,
}

impl HopBounds {
    pub fn contains(self, hops: usize) -> bool {
        (self.min..=self.max).contains(&hops)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerKind {
    EntityName,
    Attribute { value: String },
}

/// Snapshot of a node on the chain, so a chain can be audited without the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainNode {
    pub id: NodeId,
    pub name: String,
    pub display_name: String,
    pub origin: Origin,
}

impl From<&EntityNode> for ChainNode {
    fn from(n: &EntityNode) -> Self {
        ChainNode {
            id: n.id.clone(),
            name: n.name.clone(),
            display_name: n.display_name.clone(),
            origin: n.origin,
        }
    }
}

impl ChainNode {
    pub fn is_visual(&self) -> bool {
        self.origin.is_visual()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSubgraph {
    /// Edges in reasoning order, head first.
    pub edges: Vec<RelationEdge>,
    /// Nodes in reasoning order: `path[i]` and `path[i + 1]` are the endpoints of `edges[i]`.
    pub path: Vec<ChainNode>,
    pub answer_node_id: NodeId,
    pub answer_kind: AnswerKind,
    pub hop_count: usize,
}

impl ChainSubgraph {
    pub fn head(&self) -> &ChainNode {
        &self.path[0]
    }

    pub fn terminal(&self) -> &ChainNode {
        self.path.last().expect("chains have at least two nodes")
    }

    /// Every node after the head; none of these may be named in a question.
    pub fn intermediates(&self) -> &[ChainNode] {
        &self.path[1..]
    }

    /// Checks every structural invariant against the graph the chain came from.
    pub fn validate(&self, graph: &ContentGraph) -> Result<(), String> {
        let hops = self.hop_count;
        if self.edges.len() != hops || self.path.len() != hops + 1 {
            return Err(format!(
                "hop_count {hops} disagrees with {} edges / {} nodes",
                self.edges.len(),
                self.path.len()
            ));
        }
        let bounds = graph.domain.hop_bounds();
        if !bounds.contains(hops) {
            return Err(format!("{hops} hops outside {}..={} for {}", bounds.min, bounds.max, graph.domain));
        }
        for (i, n) in self.path.iter().enumerate() {
            let Some(node) = graph.node(&n.id) else {
                return Err(format!("node `{}` not in graph", n.id));
            };
            if ChainNode::from(node) != *n {
                return Err(format!("node snapshot `{}` out of date", n.id));
            }
            if self.path[..i].iter().any(|m| m.id == n.id) {
                return Err(format!("node `{}` visited twice", n.id));
            }
        }
        for (i, edge) in self.edges.iter().enumerate() {
            if !graph.edges.contains(edge) {
                return Err(format!("edge {i} not in graph"));
            }
            let (a, b) = (&self.path[i].id, &self.path[i + 1].id);
            if edge.other_end(a) != Some(b) || a == b {
                return Err(format!("edge {i} does not join `{a}` and `{b}`"));
            }
        }
        let terminal = self.terminal();
        if !terminal.is_visual() {
            return Err("terminal node is not visual".into());
        }
        if terminal.id != self.answer_node_id {
            return Err("answer node is not the terminal node".into());
        }
        if !self.path.iter().any(|n| !n.is_visual()) {
            return Err("chain has no textual node".into());
        }
        match &self.answer_kind {
            AnswerKind::EntityName if hops == 1 => {
                Err("single-hop chains must answer with an attribute".into())
            }
            AnswerKind::Attribute { value } => {
                let attrs = &graph.node(&terminal.id).expect("checked above").attributes;
                if attrs.contains(value) {
                    Ok(())
                } else {
                    Err(format!("answer attribute `{value}` not held by terminal"))
                }
            }
            AnswerKind::EntityName => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// For chains longer than one hop: probability of answering with an
    /// attribute when the terminal has one (otherwise the entity name).
    pub attribute_answer_probability: f64,
    pub max_attempts: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { attribute_answer_probability: 0.5, max_attempts: MAX_SAMPLING_ATTEMPTS }
    }
}

fn check_hops(graph: &ContentGraph, hops: usize) -> Result<(), GraphError> {
    let bounds = graph.domain.hop_bounds();
    if bounds.contains(hops) {
        Ok(())
    } else {
        Err(GraphError::HopOutOfBounds { hops, min: bounds.min, max: bounds.max, domain: graph.domain })
    }
}

/// Two-endpoint, non-loop edges incident to each node, in edge order.
fn adjacency(graph: &ContentGraph) -> BTreeMap<&NodeId, Vec<(usize, &NodeId)>> {
    let mut adj: BTreeMap<&NodeId, Vec<(usize, &NodeId)>> =
        graph.nodes.iter().map(|n| (&n.id, Vec::new())).collect();
    for (i, edge) in graph.edges.iter().enumerate() {
        let Some(o) = &edge.object_id else { continue };
        if o == &edge.subject_id {
            continue;
        }
        if let Some(list) = adj.get_mut(&edge.subject_id) {
            list.push((i, o));
        }
        if let Some(list) = adj.get_mut(o) {
            list.push((i, &edge.subject_id));
        }
    }
    adj
}

fn eligible_terminal(node: &EntityNode, hops: usize) -> bool {
    node.is_visual() && (hops > 1 || !node.attributes.is_empty())
}

/// Draws one chain of exactly `hops` edges, or `Ok(None)` when every attempt is rejected.
///
/// Each attempt picks an eligible visual terminal uniformly, then walks `hops`
/// steps backwards. Every step draws one of `D` slots, where `D` is the
/// largest node degree; slots past the current node's degree, and steps onto
/// an already visited node, reject the attempt. Every simple path therefore
/// has the same proposal probability, so accepted chains are uniform over the
/// valid paths of the graph. Paths missing either modality are rejected too.
/// The answer is then chosen with [`select_answer`].
pub fn sample_chain<R: Rng + ?Sized>(
    graph: &ContentGraph,
    hops: usize,
    rng: &mut R,
    config: &ChainConfig,
) -> Result<Option<ChainSubgraph>, GraphError> {
    check_hops(graph, hops)?;
    let adj = adjacency(graph);
    let max_degree = adj.values().map(Vec::len).max().unwrap_or(0);
    let terminals: Vec<&EntityNode> = graph.nodes.iter().filter(|n| eligible_terminal(n, hops)).collect();
    if terminals.is_empty() || max_degree == 0 || !graph.nodes.iter().any(|n| !n.is_visual()) {
        return Ok(None);
    }
    let index = graph.node_index();

    'attempt: for _ in 0..config.max_attempts {
        let terminal = terminals[rng.random_range(0..terminals.len() as u32) as usize];
        let mut nodes = vec![&terminal.id];
        let mut edges = Vec::with_capacity(hops);
        for _ in 0..hops {
            let current = *nodes.last().expect("non-empty");
            let slot = rng.random_range(0..max_degree as u32) as usize;
            let Some(&(edge, next)) = adj[current].get(slot) else {
                continue 'attempt;
            };
            if nodes.contains(&next) {
                continue 'attempt;
            }
            nodes.push(next);
            edges.push(edge);
        }
        if nodes.iter().all(|id| index[id].is_visual()) {
            continue;
        }
        nodes.reverse();
        edges.reverse();
        let mut chain = ChainSubgraph {
            edges: edges.iter().map(|&i| graph.edges[i].clone()).collect(),
            path: nodes.iter().map(|id| ChainNode::from(index[id])).collect(),
            answer_node_id: terminal.id.clone(),
            answer_kind: AnswerKind::EntityName,
            hop_count: hops,
        };
        select_answer(&mut chain, graph, rng, config.attribute_answer_probability)?;
        return Ok(Some(chain));
    }
    Ok(None)
}

/// Picks the answer for a chain and records it in `chain.answer_kind`.
///
/// Single-hop chains always answer with a uniformly chosen attribute of the
/// terminal node. Longer chains answer with an attribute with probability
/// `attribute_probability` when the terminal has one, otherwise with the
/// terminal's entity name. Calling it again redraws.
pub fn select_answer<R: Rng + ?Sized>(
    chain: &mut ChainSubgraph,
    graph: &ContentGraph,
    rng: &mut R,
    attribute_probability: f64,
) -> Result<String, GraphError> {
    let terminal = graph
        .node(&chain.answer_node_id)
        .ok_or_else(|| GraphError::Invalid(format!("unknown terminal `{}`", chain.answer_node_id)))?;
    let attrs = &terminal.attributes;
    let use_attribute = if chain.hop_count == 1 {
        if attrs.is_empty() {
            return Err(GraphError::NoAttribute(terminal.id.0.clone()));
        }
        true
    } else {
        !attrs.is_empty() && rng.random_bool(attribute_probability.clamp(0.0, 1.0))
    };
    if use_attribute {
        let value = attrs[rng.random_range(0..attrs.len() as u32) as usize].clone();
        chain.answer_kind = AnswerKind::Attribute { value: value.clone() };
        Ok(value)
    } else {
        chain.answer_kind = AnswerKind::EntityName;
        Ok(terminal.name.clone())
    }
}

/// Lists every valid chain of exactly `hops` edges, one entry per answer option
/// (the entity name for `hops > 1`, and each distinct attribute of the terminal).
///
/// Exhaustive depth-first search from every start node; sorted by node path,
/// then edge relations, then answer. Refuses graphs with more than `limit` nodes.
pub fn enumerate_chains(graph: &ContentGraph, hops: usize, limit: usize) -> Result<Vec<ChainSubgraph>, GraphError> {
    if graph.nodes.len() > limit {
        return Err(GraphError::OracleLimit { nodes: graph.nodes.len(), limit });
    }
    if graph.nodes.is_empty() {
        return Ok(Vec::new());
    }
    check_hops(graph, hops)?;

    let mut paths: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let n = graph.nodes.len();
    let mut stack: Vec<(Vec<usize>, Vec<usize>)> = (0..n).map(|s| (vec![s], Vec::new())).collect();
    while let Some((nodes, edges)) = stack.pop() {
        if edges.len() == hops {
            paths.push((nodes, edges));
            continue;
        }
        let last = &graph.nodes[*nodes.last().expect("non-empty")].id;
        for (ei, edge) in graph.edges.iter().enumerate() {
            let Some(next) = edge.other_end(last) else { continue };
            if next == last {
                continue;
            }
            let ni = graph.nodes.iter().position(|m| &m.id == next).expect("referential integrity");
            if nodes.contains(&ni) {
                continue;
            }
            let mut nodes = nodes.clone();
            let mut edges = edges.clone();
            nodes.push(ni);
            edges.push(ei);
            stack.push((nodes, edges));
        }
    }

    let mut out: Vec<ChainSubgraph> = Vec::new();
    for (nodes, edges) in paths {
        let terminal = &graph.nodes[*nodes.last().expect("non-empty")];
        if !terminal.is_visual() || nodes.iter().all(|&i| graph.nodes[i].is_visual()) {
            continue;
        }
        let mut kinds: Vec<AnswerKind> = Vec::new();
        if hops > 1 {
            kinds.push(AnswerKind::EntityName);
        }
        for a in &terminal.attributes {
            let k = AnswerKind::Attribute { value: a.clone() };
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        for kind in kinds {
            let chain = ChainSubgraph {
                edges: edges.iter().map(|&i| graph.edges[i].clone()).collect(),
                path: nodes.iter().map(|&i| ChainNode::from(&graph.nodes[i])).collect(),
                answer_node_id: terminal.id.clone(),
                answer_kind: kind,
                hop_count: hops,
            };
            if !out.contains(&chain) {
                out.push(chain);
            }
        }
    }
    out.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    Ok(out)
}

fn sort_key(c: &ChainSubgraph) -> (Vec<&str>, Vec<&str>, &AnswerKind) {
    (
        c.path.iter().map(|n| n.id.as_str()).collect(),
        c.edges.iter().map(|edge| edge.relation.as_str()).collect(),
        &c.answer_kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Domain;
    use crate::rng::seeded;

    fn id(s: &str) -> NodeId {
        NodeId::new(s)
    }

    /// T2 -- T1 -- A{black}: the only valid 2-hop chain ends at A.
    fn line_fixture() -> ContentGraph {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        graph.nodes.push(EntityNode::visual("A", "telephone pole", 0).with_attributes(["black"]));
        graph.nodes.push(EntityNode::textual("T1", "utility company", "Veridian Grid Solutions"));
        graph.nodes.push(EntityNode::textual("T2", "event", "Product Launch Demo"));
        graph.edges.push(RelationEdge::new(&id("A"), &id("T1"), "maintained by"));
        graph.edges.push(RelationEdge::new(&id("T2"), &id("T1"), "hosts"));
        graph
    }

    #[test]
    fn h1_without_attributes_finds_nothing() {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        graph.nodes.push(EntityNode::visual("A", "dog", 0));
        graph.nodes.push(EntityNode::textual("T", "person", "Ada"));
        graph.edges.push(RelationEdge::new(&id("A"), &id("T"), "owned by"));
        let mut rng = seeded(1);
        assert_eq!(sample_chain(&graph, 1, &mut rng, &ChainConfig::default()).unwrap(), None);
        assert!(enumerate_chains(&graph, 1, 12).unwrap().is_empty());
    }

    #[test]
    fn line_fixture_has_one_two_hop_path() {
        let graph = line_fixture();
        let all = enumerate_chains(&graph, 2, 12).unwrap();
        // one path, answered by name or by "black"
        assert_eq!(all.len(), 2);
        for c in &all {
            let ids: Vec<&str> = c.path.iter().map(|n| n.id.as_str()).collect();
            assert_eq!(ids, ["T2", "T1", "A"]);
            assert_eq!(c.edges, vec![graph.edges[1].clone(), graph.edges[0].clone()]);
            c.validate(&graph).unwrap();
        }
        let mut rng = seeded(9);
        for _ in 0..20 {
            let c = sample_chain(&graph, 2, &mut rng, &ChainConfig::default()).unwrap().unwrap();
            assert!(all.contains(&c));
        }
    }

    #[test]
    fn visual_only_graph_never_yields_chains() {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        graph.nodes.push(EntityNode::visual("A", "dog", 0).with_attributes(["brown"]));
        graph.nodes.push(EntityNode::visual("B", "ball", 0).with_attributes(["red"]));
        graph.nodes.push(EntityNode::visual("C", "grass", 0).with_attributes(["green"]));
        graph.edges.push(RelationEdge::new(&id("A"), &id("B"), "chasing"));
        graph.edges.push(RelationEdge::new(&id("B"), &id("C"), "on"));
        let mut rng = seeded(2);
        for hops in 1..=5 {
            assert_eq!(sample_chain(&graph, hops, &mut rng, &ChainConfig::default()).unwrap(), None);
            assert!(enumerate_chains(&graph, hops, 12).unwrap().is_empty());
        }
    }

    #[test]
    fn hop_bounds_are_enforced() {
        let mut graph = line_fixture();
        let mut rng = seeded(0);
        assert!(matches!(
            sample_chain(&graph, 6, &mut rng, &ChainConfig::default()),
            Err(GraphError::HopOutOfBounds { hops: 6, .. })
        ));
        assert!(sample_chain(&graph, 0, &mut rng, &ChainConfig::default()).is_err());
        graph.domain = Domain::SP;
        assert!(sample_chain(&graph, 5, &mut rng, &ChainConfig::default()).is_err());
        assert!(sample_chain(&graph, 4, &mut rng, &ChainConfig::default()).is_ok());
    }

    #[test]
    fn oracle_limit() {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        for i in 0..13 {
            graph.nodes.push(EntityNode::visual(format!("n{i}"), format!("x{i}"), 0));
        }
        assert_eq!(
            enumerate_chains(&graph, 2, 12),
            Err(GraphError::OracleLimit { nodes: 13, limit: 12 })
        );
        let empty = ContentGraph::new(Domain::NI, 1);
        assert!(enumerate_chains(&empty, 2, 12).unwrap().is_empty());
    }

    /// Hand enumeration on the question-generation figure shape:
    ///
    /// ```text
    /// cord{blue} (img) --used during-- T_event --hosts-- T_company --maintains-- pole{black} (img)
    /// ```
    ///
    /// Simple paths of 2 edges ending at a visual node with a textual node on them:
    ///   T_company - T_event - cord        (cord: name, blue)
    ///   T_event - T_company - pole         (pole: name, black)
    /// 3 edges: pole-T_company-T_event-cord (name, blue); cord-T_event-T_company-pole (name, black)
    /// 4+ edges: none, the graph only has 4 nodes
    /// 1 edge:  T_event - cord (blue), T_company - pole (black)
    #[test]
    fn figure_shape_hand_enumeration() {
        let mut graph = ContentGraph::new(Domain::NI, 2);
        graph.nodes.push(EntityNode::visual("cord", "cord", 0).with_attributes(["blue"]));
        graph.nodes.push(EntityNode::textual("ev", "event", "Product Launch Demo"));
        graph.nodes.push(EntityNode::textual("co", "utility company", "Veridian Grid Solutions"));
        graph.nodes.push(EntityNode::visual("pole", "telephone pole", 1).with_attributes(["black"]));
        graph.edges.push(RelationEdge::new(&id("cord"), &id("ev"), "used during"));
        graph.edges.push(RelationEdge::new(&id("ev"), &id("co"), "hosts"));
        graph.edges.push(RelationEdge::new(&id("co"), &id("pole"), "maintains"));
        let counts: Vec<usize> = (1..=5).map(|hops| enumerate_chains(&graph, hops, 12).unwrap().len()).collect();
        assert_eq!(counts, [2, 4, 4, 0, 0]);
    }

    #[test]
    fn single_hop_answers_with_attribute() {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        graph.nodes.push(EntityNode::visual("A", "giraffe", 0).with_attributes(["walking"]));
        graph.nodes.push(EntityNode::textual("T", "research team", "Savanna Ecology Project"));
        graph.edges.push(RelationEdge::new(&id("T"), &id("A"), "studied"));
        let mut rng = seeded(4);
        let c = sample_chain(&graph, 1, &mut rng, &ChainConfig::default()).unwrap().unwrap();
        assert_eq!(c.answer_kind, AnswerKind::Attribute { value: "walking".into() });
        assert_eq!(c.head().id, id("T"));
        assert_eq!(c.intermediates().len(), 1);
        c.validate(&graph).unwrap();
    }

    #[test]
    fn select_answer_branches() {
        let graph = line_fixture();
        let mut chain = enumerate_chains(&graph, 2, 12).unwrap().remove(0);
        let mut rng = seeded(5);
        assert_eq!(select_answer(&mut chain, &graph, &mut rng, 1.0).unwrap(), "black");
        assert_eq!(chain.answer_kind, AnswerKind::Attribute { value: "black".into() });
        assert_eq!(select_answer(&mut chain, &graph, &mut rng, 0.0).unwrap(), "telephone pole");
        assert_eq!(chain.answer_kind, AnswerKind::EntityName);

        // hops = 1 on a terminal without attributes is a sampler bug, reported as an error
        let mut g2 = line_fixture();
        g2.nodes[0].attributes.clear();
        let mut one = chain.clone();
        one.hop_count = 1;
        assert_eq!(
            select_answer(&mut one, &g2, &mut rng, 0.5),
            Err(GraphError::NoAttribute("A".into()))
        );
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let graph = line_fixture();
        let a = sample_chain(&graph, 2, &mut seeded(77), &ChainConfig::default()).unwrap();
        let b = sample_chain(&graph, 2, &mut seeded(77), &ChainConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

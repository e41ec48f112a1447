use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ContentGraph, EntityNode, GraphError, NodeId, Origin, RelationEdge};

/// Which image narrates each cross-image text–text edge (edge index -> image).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeAssignment(pub BTreeMap<usize, usize>);

impl EdgeAssignment {
    /// Text–text edges whose endpoints hang off disjoint sets of images.
    pub fn cross_image_edges(graph: &ContentGraph) -> Vec<usize> {
        let index = graph.node_index();
        graph.edges
            .iter()
            .enumerate()
            .filter(|(_, edge)| {
                let Some(object) = &edge.object_id else { return false };
                let both_textual = [&edge.subject_id, object]
                    .iter()
                    .all(|id| index.get(id).is_some_and(|n| !n.is_visual()));
                if !both_textual {
                    return false;
                }
                let a = graph.attached_images(&edge.subject_id);
                let b = graph.attached_images(object);
                !a.is_empty() && !b.is_empty() && a.is_disjoint(&b)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Assigns every cross-image edge to one of its endpoints' images, uniformly.
    pub fn random<R: Rng + ?Sized>(graph: &ContentGraph, rng: &mut R) -> Self {
        let mut map = BTreeMap::new();
        for i in Self::cross_image_edges(graph) {
            let edge = &graph.edges[i];
            let mut images = graph.attached_images(&edge.subject_id);
            images.extend(graph.attached_images(edge.object_id.as_ref().expect("cross edges have objects")));
            let images: Vec<usize> = images.into_iter().collect();
            map.insert(i, images[rng.random_range(0..images.len() as u32) as usize]);
        }
        EdgeAssignment(map)
    }
}

/// The part of a content graph a context passage is written from.
///
/// Visual nodes carry no attributes here; whatever was stripped is kept in
/// `withheld_attributes` so leakage into generated text can be checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSubgraph {
    /// `None` when the view covers the whole image set.
    pub image_index: Option<usize>,
    pub nodes: Vec<EntityNode>,
    pub edges: Vec<RelationEdge>,
    pub withheld_attributes: BTreeMap<NodeId, Vec<String>>,
}

impl ContextSubgraph {
    pub fn node(&self, id: &NodeId) -> Option<&EntityNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    pub fn textual_ids(&self) -> BTreeSet<&NodeId> {
        self.nodes.iter().filter(|n| !n.is_visual()).map(|n| &n.id).collect()
    }

    fn push_node(&mut self, node: &EntityNode) {
        if self.node(&node.id).is_some() {
            return;
        }
        let mut node = node.clone();
        if node.is_visual() && !node.attributes.is_empty() {
            self.withheld_attributes.insert(node.id.clone(), std::mem::take(&mut node.attributes));
        }
        self.nodes.push(node);
    }
}

/// Builds the context view for one image.
///
/// Contains the image's visual nodes, every textual node adjacent to one of
/// them, the visual–text edges between those, and the text–text edges among
/// those textual nodes. A cross-image text–text edge assigned to this image
/// also brings in its foreign endpoint together with that endpoint's own
/// visual anchor edges. Visual–visual relations are never included.
pub fn extract_context_subgraph(
    graph: &ContentGraph,
    image_index: usize,
    assignment: &EdgeAssignment,
) -> Result<ContextSubgraph, GraphError> {
    if image_index >= graph.image_count {
        return Err(GraphError::ImageOutOfRange { index: image_index, count: graph.image_count });
    }
    let index = graph.node_index();
    let is_visual_of = |id: &NodeId, image: usize| {
        index.get(id).is_some_and(|n| n.origin == Origin::Visual { image_index: image })
    };
    let is_textual = |id: &NodeId| index.get(id).is_some_and(|n| !n.is_visual());

    let local_text: BTreeSet<&NodeId> = graph
        .edges
        .iter()
        .filter_map(|edge| {
            let o = edge.object_id.as_ref()?;
            if is_visual_of(&edge.subject_id, image_index) && is_textual(o) {
                Some(o)
            } else if is_visual_of(o, image_index) && is_textual(&edge.subject_id) {
                Some(&edge.subject_id)
            } else {
                None
            }
        })
        .collect();
    let cross: BTreeSet<usize> = EdgeAssignment::cross_image_edges(graph).into_iter().collect();

    let mut view = ContextSubgraph {
        image_index: Some(image_index),
        nodes: Vec::new(),
        edges: Vec::new(),
        withheld_attributes: BTreeMap::new(),
    };
    for n in graph.nodes.iter().filter(|n| n.origin == Origin::Visual { image_index }) {
        view.push_node(n);
    }
    for n in graph.nodes.iter().filter(|n| local_text.contains(&n.id)) {
        view.push_node(n);
    }

    let mut foreign: Vec<&NodeId> = Vec::new();
    for (i, edge) in graph.edges.iter().enumerate() {
        let Some(o) = &edge.object_id else { continue };
        let s = &edge.subject_id;
        let visual_text = (is_visual_of(s, image_index) && local_text.contains(o))
            || (is_visual_of(o, image_index) && local_text.contains(s));
        let text_text = local_text.contains(s) && local_text.contains(o);
        if visual_text || text_text {
            view.edges.push(edge.clone());
            continue;
        }
        if cross.contains(&i) && (local_text.contains(s) || local_text.contains(o)) {
            match assignment.0.get(&i) {
                None => return Err(GraphError::UnassignedEdge(i)),
                Some(&img) if img == image_index => {
                    view.edges.push(edge.clone());
                    foreign.push(if local_text.contains(s) { o } else { s });
                }
                Some(_) => {}
            }
        }
    }

    for f in foreign {
        view.push_node(index[f]);
        for edge in &graph.edges {
            let Some(other) = edge.other_end(f) else { continue };
            let Some(anchor) = index.get(other).filter(|n| n.is_visual()) else { continue };
            view.push_node(anchor);
            if !view.edges.contains(edge) {
                view.edges.push(edge.clone());
            }
        }
    }
    Ok(view)
}

/// One context view over the whole image set (video frames): every visual
/// node, every textual node attached to an image, and all visual–text and
/// text–text edges among them.
pub fn extract_full_context(graph: &ContentGraph) -> ContextSubgraph {
    let index = graph.node_index();
    let attached: BTreeSet<&NodeId> = graph
        .textual_nodes()
        .filter(|n| !graph.attached_images(&n.id).is_empty())
        .map(|n| &n.id)
        .collect();
    let mut view = ContextSubgraph {
        image_index: None,
        nodes: Vec::new(),
        edges: Vec::new(),
        withheld_attributes: BTreeMap::new(),
    };
    for n in graph.visual_nodes() {
        view.push_node(n);
    }
    for n in graph.textual_nodes().filter(|n| attached.contains(&n.id)) {
        view.push_node(n);
    }
    for edge in &graph.edges {
        let Some(o) = &edge.object_id else { continue };
        let visual = |id: &NodeId| index.get(id).is_some_and(|n| n.is_visual());
        let kept = |id: &NodeId| visual(id) || attached.contains(id);
        if kept(&edge.subject_id) && kept(o) && !(visual(&edge.subject_id) && visual(o)) {
            view.edges.push(edge.clone());
        }
    }
    view
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Domain;
    use crate::rng::seeded;

    fn id(s: &str) -> NodeId {
        NodeId::new(s)
    }

    /// img0: pole{black} -- T1 ; img1: cord{blue} -- T2 ; T1 -- T2 ; pole -- cord (inter-image visual)
    fn two_image_fixture() -> ContentGraph {
        let mut graph = ContentGraph::new(Domain::NI, 2);
        graph.nodes.push(EntityNode::visual("0:1", "telephone pole", 0).with_attributes(["black"]));
        graph.nodes.push(EntityNode::visual("1:1", "cord", 1).with_attributes(["blue"]));
        graph.nodes.push(EntityNode::textual("t0", "utility company", "Veridian Grid Solutions"));
        graph.nodes.push(EntityNode::textual("t1", "event", "Product Launch Demo"));
        graph.edges.push(RelationEdge::new(&id("0:1"), &id("t0"), "maintained by"));
        graph.edges.push(RelationEdge::new(&id("1:1"), &id("t1"), "used during"));
        graph.edges.push(RelationEdge::new(&id("t1"), &id("t0"), "hosts"));
        graph.edges.push(RelationEdge::new(&id("0:1"), &id("1:1"), "near"));
        graph
    }

    fn ids(v: &ContextSubgraph) -> Vec<&str> {
        v.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    #[test]
    fn single_text_node_view() {
        let mut graph = ContentGraph::new(Domain::NI, 1);
        graph.nodes.push(EntityNode::visual("0:1", "pole", 0).with_attributes(["black"]));
        graph.nodes.push(EntityNode::visual("0:2", "wire", 0));
        graph.nodes.push(EntityNode::textual("t0", "company", "Veridian"));
        graph.edges.push(RelationEdge::new(&id("0:1"), &id("t0"), "maintained by"));
        graph.edges.push(RelationEdge::new(&id("0:2"), &id("0:1"), "attached to").with_image_tag(0));
        let v = extract_context_subgraph(&graph, 0, &EdgeAssignment::default()).unwrap();
        assert_eq!(ids(&v), ["0:1", "0:2", "t0"]);
        assert_eq!(v.edges, vec![graph.edges[0].clone()]);
        assert!(v.nodes.iter().all(|n| n.attributes.is_empty()));
        assert_eq!(v.withheld_attributes[&id("0:1")], ["black"]);
    }

    #[test]
    fn cross_image_edge_expands_assigned_image() {
        let graph = two_image_fixture();
        assert_eq!(EdgeAssignment::cross_image_edges(&graph), [2]);
        let assignment = EdgeAssignment(BTreeMap::from([(2, 0)]));
        let v0 = extract_context_subgraph(&graph, 0, &assignment).unwrap();
        assert_eq!(ids(&v0), ["0:1", "t0", "t1", "1:1"]);
        assert_eq!(v0.edges.len(), 3);
        assert!(v0.edges.contains(&graph.edges[2]));
        assert!(!v0.edges.contains(&graph.edges[3]), "inter-image visual relation leaked");
        let v1 = extract_context_subgraph(&graph, 1, &assignment).unwrap();
        assert_eq!(ids(&v1), ["1:1", "t1"]);
        assert_eq!(v1.edges, vec![graph.edges[1].clone()]);
    }

    #[test]
    fn unassigned_cross_edge_is_an_error() {
        let graph = two_image_fixture();
        assert_eq!(
            extract_context_subgraph(&graph, 0, &EdgeAssignment::default()),
            Err(GraphError::UnassignedEdge(2))
        );
        assert!(matches!(
            extract_context_subgraph(&graph, 5, &EdgeAssignment::default()),
            Err(GraphError::ImageOutOfRange { .. })
        ));
    }

    #[test]
    fn three_image_partition() {
        // hand partition:
        //   img0 {a} -- T0, img1 {b} -- T1, img2 {c} -- T2 and c -- T0
        //   T0 is attached to images 0 and 2; T1 -- T2 crosses images 1/2; T0 -- T2 shares image 2
        let mut graph = ContentGraph::new(Domain::NI, 3);
        graph.nodes.push(EntityNode::visual("a", "apple", 0));
        graph.nodes.push(EntityNode::visual("b", "bus", 1));
        graph.nodes.push(EntityNode::visual("c", "cat", 2));
        graph.nodes.push(EntityNode::textual("T0", "farm", "Green Acres"));
        graph.nodes.push(EntityNode::textual("T1", "company", "Metro Lines"));
        graph.nodes.push(EntityNode::textual("T2", "person", "Ada Moss"));
        graph.edges.push(RelationEdge::new(&id("a"), &id("T0"), "grown at"));
        graph.edges.push(RelationEdge::new(&id("b"), &id("T1"), "operated by"));
        graph.edges.push(RelationEdge::new(&id("c"), &id("T2"), "owned by"));
        graph.edges.push(RelationEdge::new(&id("c"), &id("T0"), "born at"));
        graph.edges.push(RelationEdge::new(&id("T1"), &id("T2"), "employs"));
        graph.edges.push(RelationEdge::new(&id("T2"), &id("T0"), "visits"));
        assert_eq!(EdgeAssignment::cross_image_edges(&graph), [4]);
        let assignment = EdgeAssignment(BTreeMap::from([(4, 2)]));
        let views: Vec<_> = (0..3)
            .map(|i| extract_context_subgraph(&graph, i, &assignment).unwrap())
            .collect();
        assert_eq!(ids(&views[0]), ["a", "T0"]);
        assert_eq!(ids(&views[1]), ["b", "T1"]);
        assert_eq!(ids(&views[2]), ["c", "T0", "T2", "T1", "b"]);
        // every text-text edge is narrated by exactly one image
        for ti in [4, 5] {
            let n = views.iter().filter(|v| v.edges.contains(&graph.edges[ti])).count();
            assert_eq!(n, 1, "edge {ti}");
        }
    }

    #[test]
    fn random_assignment_covers_every_cross_edge() {
        let graph = two_image_fixture();
        let mut rng = seeded(3);
        let mut seen = BTreeSet::new();
        for _ in 0..50 {
            let a = EdgeAssignment::random(&graph, &mut rng);
            assert_eq!(a.0.len(), 1);
            seen.insert(a.0[&2]);
        }
        assert_eq!(seen, BTreeSet::from([0, 1]));
    }

    #[test]
    fn full_context_drops_visual_relations_and_attributes() {
        let graph = two_image_fixture();
        let v = extract_full_context(&graph);
        assert_eq!(v.image_index, None);
        assert_eq!(v.nodes.len(), 4);
        assert_eq!(v.edges.len(), 3);
        assert_eq!(v.withheld_attributes.len(), 2);
    }
}

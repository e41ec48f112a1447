use std::collections::{BTreeMap, BTreeSet};

use super::{ContentGraph, Domain, EntityNode, GraphError, NodeId, RelationEdge, SceneGraph};

/// Merges per-image scene graphs into one content graph.
///
/// Image indices follow input position. Node ids are `"<image>:<object id>"`.
/// A name that occurs more than once anywhere in the sample gets numeric
/// subscripts (`apple_1`, `apple_2`) in first-seen order, image by image;
/// names that occur once keep the bare name. Every relation becomes an edge
/// tagged with its image; no edge spans two images.
pub fn merge_scene_graphs(graphs: &[SceneGraph], domain: Domain) -> Result<ContentGraph, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    if graphs.len() > 6 {
        return Err(GraphError::TooManyImages(graphs.len()));
    }
    for (image, graph) in graphs.iter().enumerate() {
        graph.check_references(image)?;
    }

    let mut name_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for obj in graphs.iter().flat_map(|graph| &graph.objects) {
        *name_counts.entry(obj.name.as_str()).or_default() += 1;
    }
    // bare names that are used as-is, so a subscripted form never collides with one
    let mut taken: BTreeSet<String> = name_counts
        .iter()
        .filter(|(_, &c)| c == 1)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut next_subscript: BTreeMap<&str, usize> = BTreeMap::new();

    let mut merged = ContentGraph::new(domain, graphs.len());
    for (image, graph) in graphs.iter().enumerate() {
        for obj in &graph.objects {
            let display_name = if name_counts[obj.name.as_str()] > 1 {
                let k = next_subscript.entry(obj.name.as_str()).or_insert(0);
                loop {
                    *k += 1;
                    let candidate = format!("{}_{}", obj.name, k);
                    if taken.insert(candidate.clone()) {
                        break candidate;
                    }
                }
            } else {
                obj.name.clone()
            };
            let mut node = EntityNode::visual(node_id(image, &obj.id).0, obj.name.clone(), image)
                .with_attributes(obj.attributes.iter().cloned());
            node.display_name = display_name;
            merged.nodes.push(node);
        }
        for rel in &graph.relations {
            merged.edges.push(
                RelationEdge::new(
                    &node_id(image, &rel.subject),
                    &node_id(image, &rel.object),
                    rel.relation.clone(),
                )
                .with_image_tag(image),
            );
        }
    }
    Ok(merged)
}

fn node_id(image: usize, object: &str) -> NodeId {
    NodeId(format!("{image}:{object}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SceneObject, SceneRelation};

    fn scene(objects: &[(&str, &str, &[&str])], relations: &[(&str, &str, &str)]) -> SceneGraph {
        SceneGraph {
            objects: objects
                .iter()
                .map(|(id, name, attrs)| SceneObject {
                    id: id.to_string(),
                    name: name.to_string(),
                    attributes: attrs.iter().map(|a| a.to_string()).collect(),
                })
                .collect(),
            relations: relations
                .iter()
                .map(|(s, r, o)| SceneRelation {
                    subject: s.to_string(),
                    relation: r.to_string(),
                    object: o.to_string(),
                })
                .collect(),
        }
    }

    fn display_names(graph: &ContentGraph) -> Vec<(&str, usize)> {
        graph.nodes
            .iter()
            .map(|n| (n.display_name.as_str(), n.origin.image_index().unwrap()))
            .collect()
    }

    #[test]
    fn same_name_across_images_gets_subscripts() {
        let g1 = scene(&[("1", "apple", &["red"])], &[]);
        let g2 = scene(&[("1", "apple", &["green"])], &[]);
        let graph = merge_scene_graphs(&[g1, g2], Domain::NI).unwrap();
        assert_eq!(display_names(&graph), [("apple_1", 0), ("apple_2", 1)]);
        assert_eq!(graph.nodes[0].name, "apple");
    }

    #[test]
    fn single_graph_is_identity_with_image_zero() {
        let g1 = scene(
            &[("1", "dog", &["brown"]), ("2", "frisbee", &[])],
            &[("1", "catching", "2")],
        );
        let graph = merge_scene_graphs(std::slice::from_ref(&g1), Domain::NI).unwrap();
        assert_eq!(display_names(&graph), [("dog", 0), ("frisbee", 0)]);
        assert_eq!(graph.nodes[0].attributes, ["brown"]);
        assert_eq!(graph.edges.len(), 1);
        assert_eq!(graph.edges[0].relation, "catching");
        assert_eq!(graph.edges[0].image_tag, Some(0));
        graph.validate(false).unwrap();
    }

    #[test]
    fn hand_merged_fixture() {
        // hand merge: dog (img0) -> dog_1, cat -> cat, dog (img1) -> dog_2; 2 + 1 edges
        let g1 = scene(&[("a", "dog", &[]), ("b", "cat", &[])], &[("a", "chasing", "b"), ("b", "near", "a")]);
        let g2 = scene(&[("a", "dog", &[]), ("c", "ball", &[])], &[("a", "holding", "c")]);
        let graph = merge_scene_graphs(&[g1, g2], Domain::NI).unwrap();
        assert_eq!(
            display_names(&graph),
            [("dog_1", 0), ("cat", 0), ("dog_2", 1), ("ball", 1)]
        );
        assert_eq!(graph.edges.len(), 3);
        assert!(graph
            .edges
            .iter()
            .all(|edge| graph.attached_images(&edge.subject_id) == graph.attached_images(edge.object_id.as_ref().unwrap())));
    }

    #[test]
    fn subscripts_skip_existing_bare_names() {
        let g1 = scene(&[("1", "cup", &[]), ("2", "cup", &[]), ("3", "cup_1", &[])], &[]);
        let graph = merge_scene_graphs(&[g1], Domain::NI).unwrap();
        assert_eq!(display_names(&graph), [("cup_2", 0), ("cup_3", 0), ("cup_1", 0)]);
    }

    #[test]
    fn errors() {
        assert_eq!(merge_scene_graphs(&[], Domain::NI), Err(GraphError::EmptyInput));
        let broken = scene(&[("1", "dog", &[])], &[("1", "near", "9")]);
        assert_eq!(
            merge_scene_graphs(&[broken], Domain::NI),
            Err(GraphError::DanglingRelation { image: 0, object: "9".into() })
        );
        let many = vec![scene(&[("1", "x", &[])], &[]); 7];
        assert_eq!(merge_scene_graphs(&many, Domain::NI), Err(GraphError::TooManyImages(7)));
    }
}

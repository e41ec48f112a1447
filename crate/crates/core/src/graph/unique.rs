use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SceneGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationDirection {
    Outgoing,
    Incoming,
}

/// What tells a retained duplicate apart from its same-name siblings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Discriminator {
    Attribute { value: String },
    Relation { relation: String, neighbor: String, direction: RelationDirection },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredScene {
    pub scene: SceneGraph,
    /// Object id -> discriminator, for retained objects whose name is still shared.
    pub discriminators: BTreeMap<String, Discriminator>,
}

/// Keeps only entities that a question could single out.
///
/// An object whose name is unique in the image is kept. An object sharing its
/// name is kept iff it holds an attribute value or a `(relation, neighbor
/// name, direction)` pair that no same-name sibling holds. Relations only count
/// when the neighbor itself survives, so the rule is applied until nothing
/// changes; the result is therefore a fixpoint and the filter is idempotent.
/// Dropped objects take their incident relations with them.
pub fn filter_unique_entities(scene: &SceneGraph) -> FilteredScene {
    let mut retained: BTreeSet<&str> = scene.objects.iter().map(|o| o.id.as_str()).collect();
    loop {
        let next: BTreeSet<&str> = scene
            .objects
            .iter()
            .filter(|o| retained.contains(o.id.as_str()))
            .filter(|o| !matches!(standing(scene, &retained, &o.id), Standing::Ambiguous))
            .map(|o| o.id.as_str())
            .collect();
        if next == retained {
            break;
        }
        retained = next;
    }

    let mut discriminators = BTreeMap::new();
    for o in scene.objects.iter().filter(|o| retained.contains(o.id.as_str())) {
        if let Standing::Discriminated(d) = standing(scene, &retained, &o.id) {
            discriminators.insert(o.id.clone(), d);
        }
    }
    let filtered = SceneGraph {
        objects: scene
            .objects
            .iter()
            .filter(|o| retained.contains(o.id.as_str()))
            .cloned()
            .collect(),
        relations: scene
            .relations
            .iter()
            .filter(|rel| retained.contains(rel.subject.as_str()) && retained.contains(rel.object.as_str()))
            .cloned()
            .collect(),
    };
    FilteredScene { scene: filtered, discriminators }
}

enum Standing {
    Unique,
    Discriminated(Discriminator),
    Ambiguous,
}

fn standing(scene: &SceneGraph, retained: &BTreeSet<&str>, id: &str) -> Standing {
    let Some(obj) = scene.object(id) else {
        return Standing::Ambiguous;
    };
    let siblings: Vec<&str> = scene
        .objects
        .iter()
        .filter(|o| o.id != id && o.name == obj.name && retained.contains(o.id.as_str()))
        .map(|o| o.id.as_str())
        .collect();
    if siblings.is_empty() {
        return Standing::Unique;
    }
    let sibling_features: BTreeSet<Discriminator> = siblings
        .iter()
        .flat_map(|s| features(scene, retained, s))
        .collect();
    features(scene, retained, id)
        .into_iter()
        .find(|f| !sibling_features.contains(f))
        .map_or(Standing::Ambiguous, Standing::Discriminated)
}

/// Attributes first (in attribute order), then relations in relation order.
fn features(scene: &SceneGraph, retained: &BTreeSet<&str>, id: &str) -> Vec<Discriminator> {
    let Some(obj) = scene.object(id) else {
        return Vec::new();
    };
    let mut out: Vec<Discriminator> = obj
        .attributes
        .iter()
        .map(|a| Discriminator::Attribute { value: a.clone() })
        .collect();
    for rel in &scene.relations {
        let (neighbor, direction) = if rel.subject == id {
            (&rel.object, RelationDirection::Outgoing)
        } else if rel.object == id {
            (&rel.subject, RelationDirection::Incoming)
        } else {
            continue;
        };
        if !retained.contains(neighbor.as_str()) {
            continue;
        }
        if let Some(n) = scene.object(neighbor) {
            out.push(Discriminator::Relation {
                relation: rel.relation.clone(),
                neighbor: n.name.clone(),
                direction,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SceneObject, SceneRelation};

    fn obj(id: &str, name: &str, attrs: &[&str]) -> SceneObject {
        SceneObject {
            id: id.into(),
            name: name.into(),
            attributes: attrs.iter().map(|a| a.to_string()).collect(),
        }
    }

    fn rel(s: &str, relation: &str, o: &str) -> SceneRelation {
        SceneRelation { subject: s.into(), relation: relation.into(), object: o.into() }
    }

    fn kept(f: &FilteredScene) -> Vec<&str> {
        f.scene.objects.iter().map(|o| o.id.as_str()).collect()
    }

    #[test]
    fn sole_entity_without_attributes_is_kept() {
        let s = SceneGraph { objects: vec![obj("1", "dog", &[])], relations: vec![] };
        let f = filter_unique_entities(&s);
        assert_eq!(kept(&f), ["1"]);
        assert!(f.discriminators.is_empty());
    }

    #[test]
    fn indistinguishable_duplicates_are_dropped() {
        let s = SceneGraph {
            objects: vec![obj("1", "apple", &["red"]), obj("2", "apple", &["red"]), obj("3", "table", &[])],
            relations: vec![rel("1", "on", "3"), rel("2", "on", "3")],
        };
        let f = filter_unique_entities(&s);
        assert_eq!(kept(&f), ["3"]);
        assert!(f.scene.relations.is_empty());
    }

    #[test]
    fn attribute_discriminators_are_recorded() {
        let s = SceneGraph {
            objects: vec![obj("1", "apple", &["red"]), obj("2", "apple", &["green"])],
            relations: vec![],
        };
        let f = filter_unique_entities(&s);
        assert_eq!(kept(&f), ["1", "2"]);
        assert_eq!(f.discriminators["1"], Discriminator::Attribute { value: "red".into() });
        assert_eq!(f.discriminators["2"], Discriminator::Attribute { value: "green".into() });
    }

    #[test]
    fn relation_discriminates_and_survivor_becomes_unique() {
        // 1 and 2 are both red; 1 sits on the table, 2 does not. 3 is red and unrelated.
        let s = SceneGraph {
            objects: vec![
                obj("1", "apple", &["red"]),
                obj("2", "apple", &["red"]),
                obj("3", "apple", &["red"]),
                obj("4", "table", &[]),
            ],
            relations: vec![rel("1", "on", "4")],
        };
        let f = filter_unique_entities(&s);
        assert_eq!(kept(&f), ["1", "4"]);
        // after 2 and 3 drop out, apple 1 is name-unique: no discriminator needed
        assert!(f.discriminators.is_empty());
        assert_eq!(f.scene.relations.len(), 1);
    }

    #[test]
    fn relation_to_dropped_neighbor_does_not_count() {
        // cups 1 and 2 are twins and drop out; the saucers only differ by which cup they hold
        let s = SceneGraph {
            objects: vec![
                obj("1", "cup", &[]),
                obj("2", "cup", &[]),
                obj("3", "saucer", &[]),
                obj("4", "saucer", &[]),
            ],
            relations: vec![rel("1", "on", "3"), rel("2", "on", "4")],
        };
        let f = filter_unique_entities(&s);
        assert!(kept(&f).is_empty());
        assert_eq!(filter_unique_entities(&f.scene), f);
    }

    #[test]
    fn incoming_direction_is_distinct_from_outgoing() {
        let s = SceneGraph {
            objects: vec![obj("1", "man", &[]), obj("2", "man", &[])],
            relations: vec![rel("1", "watching", "2")],
        };
        let f = filter_unique_entities(&s);
        assert_eq!(kept(&f), ["1", "2"]);
        assert_eq!(
            f.discriminators["2"],
            Discriminator::Relation {
                relation: "watching".into(),
                neighbor: "man".into(),
                direction: RelationDirection::Incoming
            }
        );
    }
}

//! The post-generation filter cascade: questions that name intermediate
//! entities, questions a single modality answers on its own, and overlong
//! chains of thought are removed, in that order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context_gen::Labeler;
use crate::eval::exact_match;
use crate::graph::{ContentGraph, Origin};
use crate::llm::{bindings, Decoding, ExchangeSpec, Gateway, TemplateId};
use crate::qa::{intermediate_mention, FilterStage, QaRecord, Verdict, MAX_COT_SENTENCES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextOnly,
    VisualOnly,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::TextOnly, Modality::VisualOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::TextOnly => "text_only",
            Modality::VisualOnly => "visual_only",
        }
    }
}

/// What one modality alone says about a graph, serialized for a judge.
///
/// The text view holds textual entities and text–text relations. The visual
/// view holds visual entities with their attributes and relations between
/// two visual entities of the same image. Mixed text–visual relations and
/// relations across images belong to neither.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityView {
    pub modality: Modality,
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
}

impl ModalityView {
    pub fn build(graph: &ContentGraph, modality: Modality, labeler: &Labeler) -> Self {
        let wanted = |o: Origin| match modality {
            Modality::TextOnly => !o.is_visual(),
            Modality::VisualOnly => o.is_visual(),
        };
        let nodes = graph
            .nodes
            .iter()
            .filter(|n| wanted(n.origin))
            .map(|n| {
                let label = labeler.label(&n.id);
                if modality == Modality::VisualOnly && !n.attributes.is_empty() {
                    format!("- {label}: attributes {}", n.attributes.join(", "))
                } else {
                    format!("- {label}")
                }
            })
            .collect();
        let edges = graph
            .edges
            .iter()
            .filter(|edge| edge_modality(graph, edge) == Some(modality))
            .map(|edge| match &edge.object_id {
                Some(o) => format!("- {} | {} | {}", labeler.label(&edge.subject_id), edge.relation, labeler.label(o)),
                None => format!("- {} | {}", labeler.label(&edge.subject_id), edge.relation),
            })
            .collect();
        ModalityView { modality, nodes, edges }
    }

    /// The `facts` prompt binding: one line per entity, then one per relation.
    pub fn facts(&self) -> String {
        self.nodes.iter().chain(&self.edges).cloned().collect::<Vec<_>>().join("\n")
    }
}

/// The single view an edge belongs to, if any.
pub fn edge_modality(graph: &ContentGraph, edge: &crate::graph::RelationEdge) -> Option<Modality> {
    let subject = graph.node(&edge.subject_id)?.origin;
    let object = match &edge.object_id {
        Some(o) => graph.node(o)?.origin,
        None => subject,
    };
    match (subject, object) {
        (Origin::Textual, Origin::Textual) => Some(Modality::TextOnly),
        (Origin::Visual { image_index: a }, Origin::Visual { image_index: b }) if a == b => {
            Some(Modality::VisualOnly)
        }
        _ => None,
    }
}

/// Stage 1: fails when the question names an intermediate entity.
pub fn check_intermediate_mentions(record: &QaRecord) -> Verdict {
    if intermediate_mention(&record.question, &record.chain).is_some() {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

/// Stage 3: fails when the chain of thought has more than ten sentences.
pub fn prune_cot(record: &QaRecord) -> Verdict {
    if record.cot_sentences.len() > MAX_COT_SENTENCES {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeAnswer {
    pub model_id: String,
    pub modality: Modality,
    pub answer: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityOutcome {
    pub verdict: Verdict,
    pub answers: Vec<JudgeAnswer>,
}

/// The removal rule on judge correctness flags: fail iff, for some modality,
/// every judge answered correctly.
pub fn unanimity_verdict(correct: &BTreeMap<Modality, Vec<bool>>) -> Verdict {
    let removed = correct.values().any(|v| !v.is_empty() && v.iter().all(|c| *c));
    if removed {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

/// Stage 2: each judge answers the question from each modality view alone.
///
/// Fails when every judge is right on one modality. Any judging failure makes
/// the verdict undetermined. All judge calls run concurrently, at temperature 0.
pub fn single_modality_test(record: &QaRecord, graph: &ContentGraph, judges: &[String], gateway: &Gateway) -> ModalityOutcome {
    let labeler = Labeler::new(graph);
    let views: Vec<ModalityView> = Modality::ALL.iter().map(|m| ModalityView::build(graph, *m, &labeler)).collect();
    let jobs: Vec<(&ModalityView, &String)> = views.iter().flat_map(|v| judges.iter().map(move |j| (v, j))).collect();
    let answers: Vec<JudgeAnswer> = jobs
        .par_iter()
        .map(|(view, judge)| {
            let b = bindings([("facts", view.facts()), ("question", record.question.clone())]);
            let spec = ExchangeSpec::new(TemplateId::Judge, &b, judge, Decoding::JUDGING)
                .tag("modality", view.modality.as_str());
            match gateway.exchange_payload(&spec) {
                Ok((value, _)) => {
                    let answer = value.as_str().unwrap_or_default().trim().to_string();
                    JudgeAnswer {
                        model_id: judge.to_string(),
                        modality: view.modality,
                        correct: exact_match(&answer, &record.answer) == 1.0,
                        answer: Some(answer),
                        error: None,
                    }
                }
                Err(e) => JudgeAnswer {
                    model_id: judge.to_string(),
                    modality: view.modality,
                    answer: None,
                    correct: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    if judges.is_empty() || answers.iter().any(|a| a.error.is_some()) {
        return ModalityOutcome { verdict: Verdict::Undetermined, answers };
    }
    let mut correct: BTreeMap<Modality, Vec<bool>> = BTreeMap::new();
    for a in &answers {
        correct.entry(a.modality).or_default().push(a.correct);
    }
    ModalityOutcome { verdict: unanimity_verdict(&correct), answers }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub record_id: String,
    pub stage: FilterStage,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_answers: Vec<JudgeAnswer>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub evaluated: usize,
    pub passed: usize,
    pub failed: usize,
    pub undetermined: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLedger {
    pub entries: Vec<LedgerEntry>,
    pub counts: BTreeMap<FilterStage, StageCounts>,
}

impl Default for FilterLedger {
    fn default() -> Self {
        FilterLedger { entries: Vec::new(), counts: FilterStage::ALL.iter().map(|s| (*s, StageCounts::default())).collect() }
    }
}

impl FilterLedger {
    fn record(&mut self, entry: LedgerEntry) {
        let c = self.counts.entry(entry.stage).or_default();
        c.evaluated += 1;
        match entry.verdict {
            Verdict::Pass => c.passed += 1,
            Verdict::Fail => c.failed += 1,
            Verdict::Undetermined => c.undetermined += 1,
            Verdict::Na => {}
        }
        self.entries.push(entry);
    }

    /// Appends another ledger (entries and counts).
    pub fn merge(&mut self, other: FilterLedger) {
        for e in other.entries {
            self.record(e);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub judges: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            judges: vec![
                "Qwen3-30B-A3B-Instruct-2507".into(),
                "gemma-3-27b-it".into(),
                "Mistral-Small-3.2-24B-Instruct".into(),
            ],
        }
    }
}

/// Runs the three stages over the records of one graph, stopping at a
/// record's first failing stage. Survivors keep their order and carry a
/// `Pass` verdict for every stage.
pub fn run_filters(
    records: Vec<QaRecord>,
    graph: &ContentGraph,
    gateway: &Gateway,
    config: &FilterConfig,
) -> (Vec<QaRecord>, FilterLedger) {
    let judged: Vec<(QaRecord, Vec<LedgerEntry>, bool)> = records
        .into_par_iter()
        .map(|mut r| {
            let mut entries = Vec::new();
            let mut survived = true;
            for stage in FilterStage::ALL {
                if !survived {
                    r.filter_verdicts.insert(stage, Verdict::Na);
                    continue;
                }
                let (verdict, judge_answers) = match stage {
                    FilterStage::IntermediateMentions => (check_intermediate_mentions(&r), Vec::new()),
                    FilterStage::SingleModality => {
                        let out = single_modality_test(&r, graph, &config.judges, gateway);
                        (out.verdict, out.answers)
                    }
                    FilterStage::CotLength => (prune_cot(&r), Vec::new()),
                };
                r.filter_verdicts.insert(stage, verdict);
                entries.push(LedgerEntry { record_id: r.id.clone(), stage, verdict, judge_answers });
                survived = verdict == Verdict::Pass;
            }
            (r, entries, survived)
        })
        .collect();
    let mut ledger = FilterLedger::default();
    let mut survivors = Vec::new();
    for (r, entries, survived) in judged {
        for e in entries {
            ledger.record(e);
        }
        if survived {
            survivors.push(r);
        }
    }
    (survivors, ledger)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::{AnswerKind, ChainNode, ChainSubgraph, Domain, EntityNode, NodeId, RelationEdge};
    use crate::llm::{CompletionRequest, ProviderError, RetryPolicy};

    fn graph() -> ContentGraph {
        let mut graph = ContentGraph::new(Domain::NI, 2);
        graph.nodes.push(EntityNode::visual("v0", "telephone pole", 0).with_attributes(["black"]));
        graph.nodes.push(EntityNode::visual("v1", "wire", 0));
        graph.nodes.push(EntityNode::visual("v2", "dog", 1).with_attributes(["brown"]));
        graph.nodes.push(EntityNode::textual("t0", "utility company", "Veridian Grid Solutions"));
        graph.nodes.push(EntityNode::textual("t1", "event", "Product Launch Demo"));
        graph.edges.push(RelationEdge::new(&NodeId::new("v0"), &NodeId::new("t0"), "maintained by"));
        graph.edges.push(RelationEdge::new(&NodeId::new("t1"), &NodeId::new("t0"), "hosts"));
        graph.edges.push(RelationEdge::new(&NodeId::new("v1"), &NodeId::new("v0"), "attached to"));
        graph.edges.push(RelationEdge::new(&NodeId::new("v2"), &NodeId::new("v0"), "near"));
        graph
    }

    fn record(id: &str, question: &str, cot_len: usize) -> QaRecord {
        let graph = graph();
        let path: Vec<ChainNode> =
            ["t1", "t0", "v0"].iter().map(|i| ChainNode::from(graph.node(&NodeId::new(*i)).unwrap())).collect();
        QaRecord {
            id: id.into(),
            question: question.into(),
            answer: "black".into(),
            cot_sentences: (0..cot_len).map(|i| format!("Sentence {i}.")).collect(),
            chain: ChainSubgraph {
                edges: vec![graph.edges[1].clone(), graph.edges[0].clone()],
                path,
                answer_node_id: NodeId::new("v0"),
                answer_kind: AnswerKind::Attribute { value: "black".into() },
                hop_count: 2,
            },
            domain: Domain::NI,
            hop_count: 2,
            filter_verdicts: BTreeMap::new(),
            exchange_ids: Vec::new(),
        }
    }

    /// Judge `j` answers correctly on modality `m` iff bit `m*3 + j` is set.
    fn truth_judges(mask: u32) -> Gateway {
        let provider = move |req: &CompletionRequest| -> Result<String, ProviderError> {
            let m = match req.tags.get("modality").map(String::as_str) {
                Some("text_only") => 0,
                _ => 1,
            };
            let j = ["j0", "j1", "j2"].iter().position(|x| *x == req.model_id).unwrap() as u32;
            Ok(if mask & (1 << (m * 3 + j)) != 0 { "Black".into() } else { "grey".into() })
        };
        Gateway::new(Arc::new(provider), RetryPolicy::immediate(2), 8)
    }

    fn judges() -> Vec<String> {
        vec!["j0".into(), "j1".into(), "j2".into()]
    }

    #[test]
    fn views_partition_the_graph() {
        let graph = graph();
        let l = Labeler::new(&graph);
        let text = ModalityView::build(&graph, Modality::TextOnly, &l);
        let visual = ModalityView::build(&graph, Modality::VisualOnly, &l);
        assert_eq!(text.nodes, ["- utility company (Veridian Grid Solutions)", "- event (Product Launch Demo)"]);
        assert_eq!(
            text.edges,
            ["- event (Product Launch Demo) | hosts | utility company (Veridian Grid Solutions)"]
        );
        assert_eq!(visual.nodes.len(), 3);
        assert_eq!(visual.nodes[0], "- telephone pole (Image 1): attributes black");
        // the cross-image "near" edge and the mixed edge belong to neither view
        assert_eq!(visual.edges, ["- wire (Image 1) | attached to | telephone pole (Image 1)"]);
        assert_eq!(text.nodes.len() + visual.nodes.len(), graph.nodes.len());
        assert!(!text.facts().contains("black"));
    }

    #[test]
    fn intermediate_stage() {
        let ok = record("a", "What color is the object maintained by the company that the Product Launch Demo hosts?", 3);
        assert_eq!(check_intermediate_mentions(&ok), Verdict::Pass);
        let bad = record("b", "What color is the pole maintained by Veridian Grid Solutions?", 3);
        assert_eq!(check_intermediate_mentions(&bad), Verdict::Fail);
    }

    #[test]
    fn cot_boundary() {
        assert_eq!(prune_cot(&record("a", "q", 10)), Verdict::Pass);
        assert_eq!(prune_cot(&record("a", "q", 11)), Verdict::Fail);
    }

    #[test]
    fn unanimity_truth_table() {
        let graph = graph();
        let r = record("a", "q?", 3);
        for mask in 0u32..64 {
            let text_all = mask & 0b111 == 0b111;
            let visual_all = mask & 0b111_000 == 0b111_000;
            let expected = if text_all || visual_all { Verdict::Fail } else { Verdict::Pass };
            let out = single_modality_test(&r, &graph, &judges(), &truth_judges(mask));
            assert_eq!(out.verdict, expected, "mask {mask:06b}");
            assert_eq!(out.answers.len(), 6);
        }
    }

    #[test]
    fn provider_failure_is_undetermined() {
        let failing = |_: &CompletionRequest| -> Result<String, ProviderError> { Err(ProviderError::Transport("down".into())) };
        let gw = Gateway::new(Arc::new(failing), RetryPolicy::immediate(2), 8);
        let (kept, ledger) = run_filters(vec![record("a", "q?", 3)], &graph(), &gw, &FilterConfig { judges: judges() });
        assert!(kept.is_empty());
        assert_eq!(ledger.counts[&FilterStage::SingleModality].undetermined, 1);
    }

    #[test]
    fn cascade_short_circuits_and_counts() {
        let graph = graph();
        let records = vec![
            record("mention", "Which pole does Veridian Grid Solutions maintain?", 3),
            record("text-unanimous", "q1?", 3),
            record("long", "q2?", 11),
            record("keep", "q3?", 10),
        ];
        // text judges all right only for q1
        let provider = |req: &CompletionRequest| -> Result<String, ProviderError> {
            let q1 = req.prompt.contains("Question: q1?");
            let text = req.tags.get("modality").map(String::as_str) == Some("text_only");
            Ok(if q1 && text { "black".into() } else { "no idea".into() })
        };
        let gw = Gateway::new(Arc::new(provider), RetryPolicy::immediate(2), 8);
        let (kept, ledger) = run_filters(records, &graph, &gw, &FilterConfig { judges: judges() });
        assert_eq!(kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["keep"]);
        assert!(kept[0].filter_verdicts.values().all(|v| *v == Verdict::Pass));
        // 3 records reached the judges, 6 calls each; the mention failure made none
        assert_eq!(gw.provider_calls(), 18);
        let c = &ledger.counts;
        assert_eq!(c[&FilterStage::IntermediateMentions], StageCounts { evaluated: 4, passed: 3, failed: 1, undetermined: 0 });
        assert_eq!(c[&FilterStage::SingleModality], StageCounts { evaluated: 3, passed: 2, failed: 1, undetermined: 0 });
        assert_eq!(c[&FilterStage::CotLength], StageCounts { evaluated: 2, passed: 1, failed: 1, undetermined: 0 });
        assert!(ledger.entries.iter().filter(|e| e.record_id == "mention").count() == 1);

        // survivors pass again unchanged
        let (again, _) = run_filters(kept.clone(), &graph, &gw, &FilterConfig { judges: judges() });
        assert_eq!(again, kept);
    }

    #[test]
    fn empty_input() {
        let gw = truth_judges(0);
        let (kept, ledger) = run_filters(Vec::new(), &graph(), &gw, &FilterConfig::default());
        assert!(kept.is_empty());
        assert_eq!(ledger, FilterLedger::default());
        assert!(ledger.counts.values().all(|c| *c == StageCounts::default()));
        assert_eq!(gw.provider_calls(), 0);
    }
}

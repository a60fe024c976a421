//! QA synthesis: multi-constraint questions from greedy constraint chains
//! over the world graph, and multi-entity questions over grid mosaics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::eval::{DefaultJudge, Judge};
use crate::schema::Region;
use crate::seed;
use crate::text::format_number;
use crate::world::{Listing, UnknownEntity, WorldFixture};

/// Walk endpoints must have a first-order neighborhood in this range.
pub const PIVOT_NEIGHBORHOOD: (usize, usize) = (4, 12);
/// Chains stop once the candidate set is within this range.
pub const TARGET_ANSWER_SIZE: (usize, usize) = (1, 8);
pub const MIN_CONSTRAINTS: usize = 2;
/// Values referenced by more than this many edges are hubs.
pub const HUB_IN_DEGREE: usize = 300;

/// Layouts the corpus generator draws from, as (rows, cols).
pub const SUPPORTED_LAYOUTS: [(usize, usize); 10] = [
    (1, 2),
    (2, 1),
    (1, 3),
    (3, 1),
    (1, 4),
    (2, 2),
    (2, 3),
    (3, 2),
    (2, 4),
    (4, 2),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NeighborhoodTooSmall,
    NeighborhoodTooLarge,
    DeadEnd,
    NoAdmissiblePredicate,
    CannotReachTarget,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::NeighborhoodTooSmall => "neighborhood_too_small",
            RejectReason::NeighborhoodTooLarge => "neighborhood_too_large",
            RejectReason::DeadEnd => "dead_end",
            RejectReason::NoAdmissiblePredicate => "no_admissible_predicate",
            RejectReason::CannotReachTarget => "cannot_reach_target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("rejected: {}", .0.code())]
    Rejected(RejectReason),
    #[error(transparent)]
    UnknownEntity(#[from] UnknownEntity),
    #[error("layout error (cell_count_mismatch): {0}")]
    CellCountMismatch(String),
    #[error("class {0} has no entities")]
    EmptyClass(String),
    #[error("untemplatable_entity: {0}")]
    UntemplatableEntity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintChain {
    pub pivot_id: String,
    pub constraints: Vec<(String, String)>,
    pub answer_set: BTreeSet<String>,
    /// Candidate-set size before the first constraint and after each one.
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

impl Layout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Layout { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Region of cell `index` in row-major order.
    pub fn region(&self, index: usize) -> Region {
        let (r, c) = (index / self.cols, index % self.cols);
        Region {
            x1: c as f64 / self.cols as f64,
            y1: r as f64 / self.rows as f64,
            x2: (c + 1) as f64 / self.cols as f64,
            y2: (r + 1) as f64 / self.rows as f64,
        }
    }

    pub fn position_label(&self, index: usize) -> String {
        let (r, c) = (index / self.cols, index % self.cols);
        match (self.rows, self.cols) {
            (1, 2) => ["left", "right"][c].to_string(),
            (2, 1) => ["top", "bottom"][r].to_string(),
            (2, 2) => ["top-left", "top-right", "bottom-left", "bottom-right"][index].to_string(),
            (1, _) => format!("{} from the left", ordinal(c + 1)),
            (_, 1) => format!("{} from the top", ordinal(r + 1)),
            _ => format!("{} in the {} row", ordinal(c + 1), ordinal(r + 1)),
        }
    }
}

fn ordinal(n: usize) -> &'static str {
    ["zeroth", "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth"]
        .get(n)
        .copied()
        .unwrap_or("later")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicCell {
    pub index: usize,
    pub region: Region,
    pub entity_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicSpec {
    pub image_id: String,
    pub layout: Layout,
    pub cells: Vec<MosaicCell>,
    pub position_labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    MultiEntity,
    MultiConstraint,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    /// Values listed in cell order.
    List,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub kind: QaKind,
    pub question: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<MosaicSpec>,
    pub required_entities: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ConstraintChain>,
}

/// Walks 2 or 3 hops along outgoing edges and accepts the endpoint if its
/// neighborhood size is in range.
pub fn random_walk_pivot(
    world: &WorldFixture,
    seed_entity_id: &str,
    rng_seed: u64,
) -> Result<String, SynthError> {
    world.require(seed_entity_id)?;
    let mut rng = seed::rng(rng_seed);
    let hops = if rng.gen_bool(0.5) { 3 } else { 2 };
    let mut current = seed_entity_id.to_string();
    for _ in 0..hops {
        let mut next: Vec<&str> = Vec::new();
        for s in world.successors(&current)? {
            if s != current && !next.contains(&s) {
                next.push(s);
            }
        }
        if next.is_empty() {
            return Err(SynthError::Rejected(RejectReason::DeadEnd));
        }
        current = next[rng.gen_range(0..next.len())].to_string();
    }
    let size = world.neighbors(&current)?.len();
    if size < PIVOT_NEIGHBORHOOD.0 {
        Err(SynthError::Rejected(RejectReason::NeighborhoodTooSmall))
    } else if size > PIVOT_NEIGHBORHOOD.1 {
        Err(SynthError::Rejected(RejectReason::NeighborhoodTooLarge))
    } else {
        Ok(current)
    }
}

/// Admissibility test for one (predicate, value) pair.
pub fn pair_admissible(world: &WorldFixture, predicate_id: &str, value_id: &str) -> bool {
    let Some(pred) = world.predicate(predicate_id) else {
        return false;
    };
    let Some(value) = world.entity(value_id) else {
        return false;
    };
    pred.listed == Listing::Whitelist
        && !world.family_blacklisted(&pred.family)
        && !world.abstract_values.contains(value_id)
        && world.out_degree(value_id).unwrap_or(usize::MAX) <= HUB_IN_DEGREE
        && !world.bias_prone_types.contains(&value.class_name)
}

/// Distinct admissible pairs held by any candidate, sorted.
pub fn filter_predicates<'a, I>(world: &WorldFixture, candidate_ids: I) -> Vec<(String, String)>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut pairs = BTreeSet::new();
    for id in candidate_ids {
        if let Some(e) = world.entity(id) {
            for (p, v) in &e.attributes {
                if pair_admissible(world, p, v) {
                    pairs.insert((p.clone(), v.clone()));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Greedy chain: repeatedly apply the admissible pair that keeps the
/// candidate set non-empty and strictly shrinks it, preferring a new
/// attribute family, then the gentler reduction, then lexicographic ids.
/// Stops once the set is in the target range and at least two constraints
/// hold.
pub fn build_constraint_chain(
    world: &WorldFixture,
    pivot_id: &str,
) -> Result<ConstraintChain, SynthError> {
    let mut current = world.neighbors(pivot_id)?;
    let pairs = filter_predicates(world, &current);
    if pairs.is_empty() {
        return Err(SynthError::Rejected(RejectReason::NoAdmissiblePredicate));
    }
    let holders: BTreeMap<&(String, String), BTreeSet<String>> = pairs
        .iter()
        .map(|pair| {
            let set = current
                .iter()
                .filter(|id| world.entity(id).is_some_and(|e| e.has_attribute(&pair.0, &pair.1)))
                .cloned()
                .collect();
            (pair, set)
        })
        .collect();

    let mut constraints: Vec<(String, String)> = Vec::new();
    let mut families: BTreeSet<String> = BTreeSet::new();
    let mut sizes = vec![current.len()];
    let done = |c: &BTreeSet<String>, m: usize| {
        m >= MIN_CONSTRAINTS && (TARGET_ANSWER_SIZE.0..=TARGET_ANSWER_SIZE.1).contains(&c.len())
    };
    while !done(&current, constraints.len()) {
        let mut best: Option<((i32, usize), &(String, String), BTreeSet<String>)> = None;
        for pair in &pairs {
            if constraints.contains(pair) {
                continue;
            }
            let next: BTreeSet<String> = current.intersection(&holders[pair]).cloned().collect();
            if next.is_empty() || next.len() >= current.len() {
                continue;
            }
            let family = &world.predicate(&pair.0).expect("admissible").family;
            let diversity = i32::from(!families.contains(family));
            let reduction = current.len() - next.len();
            // Higher diversity first, then smaller reduction; pairs iterate
            // in lexicographic order so the first maximum wins ties.
            let key = (diversity, usize::MAX - reduction);
            if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                best = Some((key, pair, next));
            }
        }
        let Some((_, pair, next)) = best else {
            return Err(SynthError::Rejected(if constraints.is_empty() {
                RejectReason::NoAdmissiblePredicate
            } else {
                RejectReason::CannotReachTarget
            }));
        };
        families.insert(world.predicate(&pair.0).expect("admissible").family.clone());
        constraints.push(pair.clone());
        current = next;
        sizes.push(current.len());
    }
    Ok(ConstraintChain {
        pivot_id: pivot_id.to_string(),
        constraints,
        answer_set: current,
        sizes,
    })
}

/// Brute-force recomputation of a chain's answer set.
pub fn chain_answer_set(world: &WorldFixture, chain: &ConstraintChain) -> Result<BTreeSet<String>, UnknownEntity> {
    Ok(world
        .neighbors(&chain.pivot_id)?
        .into_iter()
        .filter(|id| {
            let e = world.entity(id).expect("neighbor exists");
            chain.constraints.iter().all(|(p, v)| e.has_attribute(p, v))
        })
        .collect())
}

/// Names of the chain's answers, sorted and comma-joined.
pub fn chain_gold(world: &WorldFixture, chain: &ConstraintChain) -> String {
    let mut names: Vec<&str> = chain
        .answer_set
        .iter()
        .filter_map(|id| world.entity(id).map(|e| e.display_name()))
        .collect();
    names.sort_unstable();
    names.join(", ")
}

pub fn chain_question(world: &WorldFixture, chain: &ConstraintChain, id: impl Into<String>) -> QAItem {
    let pivot = world.entity(&chain.pivot_id).map_or(chain.pivot_id.as_str(), |e| e.display_name());
    let clauses: Vec<String> = chain
        .constraints
        .iter()
        .map(|(p, v)| {
            let label = world.predicate(p).map_or(p.as_str(), |p| p.label());
            let value = world.entity(v).map_or(v.as_str(), |e| e.display_name());
            format!("{label} {value}")
        })
        .collect();
    QAItem {
        id: id.into(),
        kind: QaKind::MultiConstraint,
        question: format!(
            "Among the entities directly linked to {pivot}, which ones have {}? List all of them.",
            clauses.join(" and ")
        ),
        gold_answer: chain_gold(world, chain),
        scene: None,
        required_entities: chain.answer_set.clone(),
        template: Some(TemplateInfo {
            id: "chain.intersection.v1".into(),
            attribute: None,
            unit: None,
            aggregate: Some(Aggregate::List),
        }),
        chain: Some(chain.clone()),
    }
}

/// Places one entity of each class, fills the remaining cells with random
/// classes, and shuffles the placement.
pub fn compose_mosaic(
    world: &WorldFixture,
    class_ids: &[String],
    layout: Layout,
    rng_seed: u64,
) -> Result<MosaicSpec, SynthError> {
    let distinct: BTreeSet<&String> = class_ids.iter().collect();
    let cells = layout.cells();
    if !(2..=8).contains(&distinct.len()) || distinct.len() != class_ids.len() {
        return Err(SynthError::CellCountMismatch(format!(
            "need 2 to 8 distinct classes, got {:?}",
            class_ids
        )));
    }
    if !(2..=8).contains(&cells) || cells < class_ids.len() {
        return Err(SynthError::CellCountMismatch(format!(
            "{}x{} layout cannot hold {} classes",
            layout.rows,
            layout.cols,
            class_ids.len()
        )));
    }
    let mut pools = Vec::with_capacity(class_ids.len());
    for c in class_ids {
        let pool = world.entities_of_class(c);
        if pool.is_empty() {
            return Err(SynthError::EmptyClass(c.clone()));
        }
        pools.push(pool);
    }
    let mut rng = seed::rng(rng_seed);
    let mut slots: Vec<usize> = (0..class_ids.len()).collect();
    while slots.len() < cells {
        slots.push(rng.gen_range(0..class_ids.len()));
    }
    slots.shuffle(&mut rng);
    let cells = slots
        .iter()
        .enumerate()
        .map(|(index, &class)| MosaicCell {
            index,
            region: layout.region(index),
            entity_id: pools[class].choose(&mut rng).expect("non-empty").id.clone(),
        })
        .collect();
    Ok(MosaicSpec {
        image_id: "img_0".into(),
        layout,
        position_labels: (0..layout.cells()).map(|i| layout.position_label(i)).collect(),
        cells,
    })
}

/// Measures (name, unit) that every cell entity carries.
fn common_measures(world: &WorldFixture, mosaic: &MosaicSpec) -> Result<Vec<(String, String)>, SynthError> {
    let mut common: Option<BTreeSet<(String, String)>> = None;
    for cell in &mosaic.cells {
        let e = world.require(&cell.entity_id)?;
        let here: BTreeSet<(String, String)> =
            e.measures.iter().map(|m| (m.name.clone(), m.unit.clone())).collect();
        if here.is_empty() {
            return Err(SynthError::UntemplatableEntity(e.id.clone()));
        }
        common = Some(match common {
            None => here,
            Some(c) => c.intersection(&here).cloned().collect(),
        });
    }
    let common = common.unwrap_or_default();
    if common.is_empty() {
        let first = world.require(&mosaic.cells[0].entity_id)?;
        let lacking = mosaic
            .cells
            .iter()
            .find(|c| {
                let e = world.entity(&c.entity_id).expect("checked");
                first.measures.iter().any(|m| e.measure(&m.name).is_none())
            })
            .map_or(first.id.clone(), |c| c.entity_id.clone());
        return Err(SynthError::UntemplatableEntity(lacking));
    }
    Ok(common.into_iter().collect())
}

/// Recomputes a mosaic question's gold answer from fixture values.
pub fn mosaic_gold(
    world: &WorldFixture,
    mosaic: &MosaicSpec,
    attribute: &str,
    aggregate: Aggregate,
) -> Result<String, SynthError> {
    let mut values = Vec::with_capacity(mosaic.cells.len());
    for cell in &mosaic.cells {
        let e = world.require(&cell.entity_id)?;
        let m = e
            .measure(attribute)
            .ok_or_else(|| SynthError::UntemplatableEntity(e.id.clone()))?;
        values.push(m.value);
    }
    Ok(match aggregate {
        Aggregate::Sum => format_number(values.iter().sum()),
        Aggregate::List => values.iter().map(|v| format_number(*v)).collect::<Vec<_>>().join(", "),
    })
}

fn join_labels(labels: &[String]) -> String {
    match labels {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [rest @ .., last] => format!("{}, and {last}", rest.join(", ")),
    }
}

pub fn synth_multientity_question(
    world: &WorldFixture,
    mosaic: &MosaicSpec,
    rng_seed: u64,
    id: impl Into<String>,
) -> Result<QAItem, SynthError> {
    if mosaic.cells.len() < 2 {
        return Err(SynthError::CellCountMismatch("a multi-entity scene needs at least two cells".into()));
    }
    let measures = common_measures(world, mosaic)?;
    let mut rng = seed::rng(rng_seed);
    let (attribute, unit) = measures.choose(&mut rng).expect("non-empty").clone();
    let aggregate = if rng.gen_bool(0.75) { Aggregate::Sum } else { Aggregate::List };
    let labels = join_labels(&mosaic.position_labels);
    let unit_text = if unit.is_empty() { String::new() } else { format!(" (in {unit})") };
    let question = match aggregate {
        Aggregate::Sum => format!(
            "The image is a {}x{} grid. What is the sum of the {attribute} values{unit_text} of the subjects at the {labels} positions?",
            mosaic.layout.rows, mosaic.layout.cols
        ),
        Aggregate::List => format!(
            "The image is a {}x{} grid. List the {attribute}{unit_text} of the subjects at the {labels} positions, in that order, separated by commas.",
            mosaic.layout.rows, mosaic.layout.cols
        ),
    };
    let template_id = match aggregate {
        Aggregate::Sum => "mosaic.sum.v1",
        Aggregate::List => "mosaic.list.v1",
    };
    Ok(QAItem {
        id: id.into(),
        kind: QaKind::MultiEntity,
        question,
        gold_answer: mosaic_gold(world, mosaic, &attribute, aggregate)?,
        scene: Some(mosaic.clone()),
        required_entities: mosaic.cells.iter().map(|c| c.entity_id.clone()).collect(),
        template: Some(TemplateInfo {
            id: template_id.into(),
            attribute: Some(attribute),
            unit: Some(unit),
            aggregate: Some(aggregate),
        }),
        chain: None,
    })
}

/// Answers from parametric knowledge only.
pub trait ClosedBookOracle: Send + Sync {
    fn answer(&self, question: &str) -> Option<String>;
}

/// Exact-question lookup over the fixture's famous facts.
#[derive(Debug, Clone, Default)]
pub struct FamousFactsOracle {
    facts: BTreeMap<String, String>,
}

impl FamousFactsOracle {
    pub fn new(world: &WorldFixture) -> Self {
        FamousFactsOracle {
            facts: world
                .famous_facts
                .iter()
                .map(|(q, a)| (crate::text::normalize_answer(q), a.clone()))
                .collect(),
        }
    }
}

impl ClosedBookOracle for FamousFactsOracle {
    fn answer(&self, question: &str) -> Option<String> {
        self.facts.get(&crate::text::normalize_answer(question)).cloned()
    }
}

/// Keeps the items the oracle gets wrong or abstains on.
pub fn tool_necessity_filter(items: Vec<QAItem>, oracle: &dyn ClosedBookOracle) -> Vec<QAItem> {
    let judge = DefaultJudge;
    items
        .into_iter()
        .filter(|qa| match oracle.answer(&qa.question) {
            None => true,
            Some(a) => !judge.judge(&qa.question, Some(&a), &qa.gold_answer).correct,
        })
        .collect()
}

/// Synthesizes `n` multi-entity items from random mosaics. Draw failures
/// are skipped, so the result may be shorter when the world is sparse.
pub fn synth_mosaic_corpus(world: &WorldFixture, n: usize, rng_seed: u64) -> Vec<QAItem> {
    let mut domains: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in world.entities() {
        if !e.domain.is_empty() && !e.measures.is_empty() {
            domains.entry(&e.domain).or_default().insert(&e.class_name);
        }
    }
    let domains: Vec<(&str, Vec<&str>)> = domains
        .into_iter()
        .filter(|(_, c)| c.len() >= 2)
        .map(|(d, c)| (d, c.into_iter().collect()))
        .collect();
    let mut out = Vec::new();
    if domains.is_empty() {
        return out;
    }
    let mut attempt = 0u64;
    while out.len() < n && attempt < 20 * n as u64 {
        let item_seed = seed::derive(rng_seed, &[seed::label("mosaic"), attempt]);
        attempt += 1;
        let mut rng = seed::rng(item_seed);
        let (_, classes) = &domains[rng.gen_range(0..domains.len())];
        let k = rng.gen_range(2..=classes.len().min(8));
        let layouts: Vec<Layout> = SUPPORTED_LAYOUTS
            .iter()
            .map(|&(r, c)| Layout::new(r, c))
            .filter(|l| l.cells() >= k)
            .collect();
        let layout = layouts[rng.gen_range(0..layouts.len())];
        let chosen: Vec<String> = classes.choose_multiple(&mut rng, k).map(|c| c.to_string()).collect();
        let id = format!("mosaic-{:04}", out.len());
        let item = compose_mosaic(world, &chosen, layout, seed::derive(item_seed, &[1]))
            .and_then(|m| synth_multientity_question(world, &m, seed::derive(item_seed, &[2]), id));
        if let Ok(item) = item {
            out.push(item);
        }
    }
    out
}

/// Walks from every entity with outgoing edges and keeps the chains that
/// survive, one per distinct pivot.
pub fn synth_chain_corpus(world: &WorldFixture, rng_seed: u64) -> Vec<QAItem> {
    let mut pivots = BTreeSet::new();
    let mut out = Vec::new();
    for e in world.entities() {
        let walk_seed = seed::derive(rng_seed, &[seed::label(&e.id)]);
        let Ok(pivot) = random_walk_pivot(world, &e.id, walk_seed) else {
            continue;
        };
        if !pivots.insert(pivot.clone()) {
            continue;
        }
        if let Ok(chain) = build_constraint_chain(world, &pivot) {
            let id = format!("chain-{:04}", out.len());
            out.push(chain_question(world, &chain, id));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{demo_world, Entity, Measure, WorldBuilder};

    fn bird(id: &str, class: &str, wingspan: f64) -> Entity {
        let mut e = Entity::new(id, class);
        e.name = class.to_string();
        e.domain = "birds".into();
        e.measures.push(Measure { name: "wingspan".into(), value: wingspan, unit: "cm".into() });
        e.snippets.push(format!("The {class} has a wingspan of {wingspan} cm."));
        e
    }

    fn two_birds() -> WorldFixture {
        let mut b = WorldBuilder::new();
        b.entity(bird("b1", "Gull", 50.0)).entity(bird("b2", "Heron", 70.0));
        b.build().unwrap()
    }

    #[test]
    fn demo_walkthrough_shrinks_twelve_nine_three() {
        let w = demo_world();
        let chain = build_constraint_chain(&w, "Q_gala").unwrap();
        assert_eq!(chain.sizes, vec![12, 9, 3]);
        assert_eq!(chain.constraints[0], ("P106".to_string(), "Q_actor".to_string()));
        assert_eq!(chain.constraints[1].0, "P166");
        assert_eq!(chain_answer_set(&w, &chain).unwrap(), chain.answer_set);
    }

    #[test]
    fn walk_from_adjacent_seed_reaches_the_pivot() {
        let w = demo_world();
        assert_eq!(random_walk_pivot(&w, "Q_programme", 7).unwrap(), "Q_gala");
    }

    #[test]
    fn layout_geometry() {
        let l = Layout::new(1, 2);
        assert_eq!(l.region(0), Region { x1: 0.0, y1: 0.0, x2: 0.5, y2: 1.0 });
        assert_eq!(l.region(1), Region { x1: 0.5, y1: 0.0, x2: 1.0, y2: 1.0 });
        let l = Layout::new(2, 4);
        for i in 0..8 {
            let r = l.region(i);
            assert!((r.x2 - r.x1 - 0.25).abs() < 1e-12 && (r.y2 - r.y1 - 0.5).abs() < 1e-12);
        }
        assert_eq!(Layout::new(2, 3).position_label(4), "second in the second row");
    }

    #[test]
    fn two_bird_sum_question() {
        let w = two_birds();
        let m = compose_mosaic(&w, &["Gull".into(), "Heron".into()], Layout::new(1, 2), 1).unwrap();
        assert_eq!(mosaic_gold(&w, &m, "wingspan", Aggregate::Sum).unwrap(), "120");
        let qa = synth_multientity_question(&w, &m, 0, "q").unwrap();
        assert!(qa.question.contains("left") && qa.question.contains("right"));
        assert_eq!(qa.required_entities.len(), 2);
    }

    #[test]
    fn repeated_entity_counts_twice() {
        let w = two_birds();
        let m = MosaicSpec {
            image_id: "img_0".into(),
            layout: Layout::new(1, 3),
            cells: ["b1", "b1", "b2"]
                .iter()
                .enumerate()
                .map(|(i, id)| MosaicCell { index: i, region: Layout::new(1, 3).region(i), entity_id: id.to_string() })
                .collect(),
            position_labels: (0..3).map(|i| Layout::new(1, 3).position_label(i)).collect(),
        };
        assert_eq!(mosaic_gold(&w, &m, "wingspan", Aggregate::Sum).unwrap(), "170");
    }

    #[test]
    fn missing_attribute_is_untemplatable() {
        let mut b = WorldBuilder::new();
        let mut bare = Entity::new("b3", "Crow");
        bare.measures.push(Measure { name: "body mass".into(), value: 400.0, unit: "g".into() });
        b.entity(bird("b1", "Gull", 50.0)).entity(bare);
        let w = b.build().unwrap();
        let m = compose_mosaic(&w, &["Gull".into(), "Crow".into()], Layout::new(1, 2), 3).unwrap();
        assert!(matches!(
            synth_multientity_question(&w, &m, 0, "q"),
            Err(SynthError::UntemplatableEntity(_))
        ));
    }

    #[test]
    fn too_few_cells_is_layout_error() {
        let w = two_birds();
        let err = compose_mosaic(&w, &["Gull".into(), "Heron".into()], Layout::new(1, 1), 0).unwrap_err();
        assert!(matches!(err, SynthError::CellCountMismatch(_)));
    }

    #[test]
    fn filter_excludes_abstract_and_bias_prone_values() {
        let w = demo_world();
        let candidates = w.neighbors("Q_gala").unwrap();
        let pairs = filter_predicates(&w, &candidates);
        assert!(pairs.contains(&("P106".into(), "Q_actor".into())));
        assert!(pairs.iter().all(|(p, v)| p != "P31" && v != "Q5" && p != "P27"));
    }

    #[test]
    fn famous_fact_is_filtered_out() {
        let w = demo_world();
        let oracle = FamousFactsOracle::new(&w);
        let (q, a) = w.famous_facts[0].clone();
        let item = QAItem {
            id: "f".into(),
            kind: QaKind::Imported,
            question: q,
            gold_answer: a,
            scene: None,
            required_entities: BTreeSet::new(),
            template: None,
            chain: None,
        };
        assert!(tool_necessity_filter(vec![item], &oracle).is_empty());
        assert!(tool_necessity_filter(vec![], &oracle).is_empty());
    }
}

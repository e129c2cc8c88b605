//! Template text annotations with geometrically verified spatial relations.

use super::scene::{class_name, SceneSpec};
use crate::body::ActionId;
use crate::error::{Error, Result};
use crate::text::Vocabulary;
use rand::seq::SliceRandom;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    ClosestTo,
    FarthestFrom,
    Near,
    FarFrom,
}

pub const RELATIONS: [Relation; 4] = [
    Relation::ClosestTo,
    Relation::FarthestFrom,
    Relation::Near,
    Relation::FarFrom,
];

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::ClosestTo => "closest to",
            Relation::FarthestFrom => "farthest from",
            Relation::Near => "near",
            Relation::FarFrom => "far from",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Relation::ClosestTo => 0,
            Relation::FarthestFrom => 1,
            Relation::Near => 2,
            Relation::FarFrom => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Relation> {
        RELATIONS
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("relation code {code}")))
    }
}

const MARGIN: f64 = 0.15;
const NEAR_TAU: f64 = 1.0;
const NEAR_OTHERS: f64 = 1.3;
const FAR_TAU: f64 = 2.0;
const FAR_OTHERS: f64 = 1.6;

fn center_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance from a candidate instance to the nearest anchor-class instance.
fn anchor_distance(spec: &SceneSpec, candidate: u32, anchor_class: u8) -> Option<f64> {
    let cand = spec.object(candidate)?;
    spec.instances_of(anchor_class)
        .iter()
        .filter(|o| o.instance_id != candidate)
        .map(|o| center_distance(&cand.aabb.center(), &o.aabb.center()))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Evaluate a relation over all same-class candidates; `Some(id)` when the
/// relation selects exactly one instance (with margins against ties).
pub fn relation_selects(
    spec: &SceneSpec,
    goal_class: u8,
    relation: Relation,
    anchor_class: u8,
) -> Option<u32> {
    if anchor_class == goal_class {
        return None;
    }
    let candidates = spec.instances_of(goal_class);
    if candidates.len() < 2 {
        return None;
    }
    let dists: Vec<(u32, f64)> = candidates
        .iter()
        .map(|o| {
            anchor_distance(spec, o.instance_id, anchor_class).map(|d| (o.instance_id, d))
        })
        .collect::<Option<_>>()?;
    match relation {
        Relation::ClosestTo => {
            let (best, bd) = *dists
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            dists
                .iter()
                .all(|&(id, d)| id == best || d >= bd + MARGIN)
                .then_some(best)
        }
        Relation::FarthestFrom => {
            let (best, bd) = *dists
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            dists
                .iter()
                .all(|&(id, d)| id == best || d <= bd - MARGIN)
                .then_some(best)
        }
        Relation::Near => {
            let mut hits = dists.iter().filter(|&&(_, d)| d <= NEAR_TAU);
            let first = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            dists
                .iter()
                .all(|&(id, d)| id == first.0 || d >= NEAR_OTHERS)
                .then_some(first.0)
        }
        Relation::FarFrom => {
            let mut hits = dists.iter().filter(|&&(_, d)| d >= FAR_TAU);
            let first = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            dists
                .iter()
                .all(|&(id, d)| id == first.0 || d <= FAR_OTHERS)
                .then_some(first.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextAnnotation {
    pub action: ActionId,
    pub goal_class: u8,
    pub goal_instance: u32,
    pub relation: Option<(Relation, u8)>,
    /// True when the goal class repeats but no discriminating relation exists.
    pub ambiguous: bool,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Render the template text for a goal instance, choosing a true
/// discriminating relation when the goal's class is not unique.
pub fn generate_text(
    spec: &SceneSpec,
    goal_instance: u32,
    action: ActionId,
    vocab: &Vocabulary,
    max_tokens: usize,
    seed: u64,
) -> Result<TextAnnotation> {
    let goal = spec
        .object(goal_instance)
        .ok_or_else(|| Error::InvalidArgument(format!("goal instance {goal_instance} not in scene")))?;
    let goal_class = goal.class_id;
    let same_class = spec.instances_of(goal_class);

    let mut relation = None;
    let mut ambiguous = false;
    if same_class.len() > 1 {
        // seeded order over (relation, anchor class) candidates
        let mut rng = crate::rng::stream(seed, "text_relation", &[goal_instance as u64]);
        let mut anchor_classes: Vec<u8> = {
            let mut cs: Vec<u8> = spec.objects.iter().map(|o| o.class_id).collect();
            cs.sort_unstable();
            cs.dedup();
            cs.retain(|&c| c != goal_class);
            cs
        };
        anchor_classes.shuffle(&mut rng);
        let mut relations = RELATIONS.to_vec();
        relations.shuffle(&mut rng);
        'search: for &anchor in &anchor_classes {
            for &rel in &relations {
                if relation_selects(spec, goal_class, rel, anchor) == Some(goal_instance) {
                    relation = Some((rel, anchor));
                    break 'search;
                }
            }
        }
        ambiguous = relation.is_none();
    }

    let text = match relation {
        None => format!("{} {}", action.phrase(), class_name(goal_class)),
        Some((rel, anchor)) => format!(
            "{} {} that is {} the {}",
            action.phrase(),
            class_name(goal_class),
            rel.phrase(),
            class_name(anchor)
        ),
    };
    let (tokens, _) = vocab.tokenize(&text, max_tokens)?;
    Ok(TextAnnotation {
        action,
        goal_class,
        goal_instance,
        relation,
        ambiguous,
        text,
        tokens,
    })
}

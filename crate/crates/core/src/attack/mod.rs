//! Elastic-net gradient matching and the anchor-duplication baselines.

mod anchor;
mod eng;
mod plan;
mod prox;

pub use anchor::{craft_anchor, neighbor_counts, AnchorAttack, AnchorKind};
pub use eng::{
    craft_eng, craft_on_pretrained, eng_objective, initial_delta, ista_step, matching_gradient, EngConfig, EngTerms,
    OpCounts, Rescale, StepRule,
};
pub use plan::{selected_features, FeatureSelection, PlanNorms, PlanSidecar, PoisonPlan};
pub use prox::{cosine_match, project_box, soft_threshold, BoxConstraint};

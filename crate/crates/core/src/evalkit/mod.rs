//! Analysis suite: best-of-K ceilings, diversity, held-out evaluation and export.

pub mod bon;
pub mod diversity;
pub mod export;
pub mod heldout;

pub use bon::{best_of_k, best_of_k_curve, stratified_best_of_k, BonConfig, BonCurve, BonStrategy};
pub use diversity::{diversity_report, DiversityConfig, DiversityReport, SceneDiversity};
pub use export::{export_analysis, read_manifest, AnalysisBundle, Manifest};
pub use heldout::{held_out_eval, intent_match, HeldOutConfig, HeldOutReport, IntentMatch, SceneEval};

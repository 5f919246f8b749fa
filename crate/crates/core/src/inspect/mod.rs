//! Qualitative analysis of learnt features: prominence ranking,
//! top-activating samples, activation heatmaps and semantic specificity.

mod features;
mod heatmap;
mod specificity;


pub use features::{
    branch_activations, feature_statistics, prominence, rank_features, top_activating, top_from_activations,
    FeatureProfile, PROMINENCE_EPS,
};
pub use heatmap::{
    normalize_min_max, text_heatmap, upsample_bilinear, vision_heatmap, TextHeatmap, VisionHeatmap, OVERLAY_ALPHA,
};
pub use specificity::{
    pseudo_documents, raw_specificity, semantic_specificity, specificity_all, specificity_scores, DEFAULT_TOP_K,
};

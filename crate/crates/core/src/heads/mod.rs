//! Task heads reading the final tokens, slots and masks.

pub mod activation;
pub mod autoencode;
pub mod classify;
pub mod detection;
pub mod discovery;
pub mod hungarian;
pub mod segment;

pub use activation::{class_activation, weighted_activation, ClassActivation};
pub use autoencode::{autoencode_loss, mse, pixel_target, slot_reconstruction, AeTarget, Teacher};
pub use classify::{classify, smoothed_cross_entropy, SlotClassLogits, SlotLogitVars};
pub use detection::{
    detect, detection_loss, match_bipartite, predictions, token_coords, DetPrediction,
    DetectionLoss, DetectionVars, GroundTruth, LossWeights,
};
pub use discovery::{
    connected_components, discover_regions, herfindahl, select_single_object, Connectivity,
    DiscoveryParams, RegionProposal,
};
pub use segment::{bilinear_upsample, segment, segmentation_loss, Background, Segmentation};

//! Gradual receptive-field component reasoning for point-cloud semantic
//! segmentation: hierarchical subsampling, multi-hot receptive-field
//! component codes, omni-scale supervision losses, feature densification,
//! and a small deterministic encoder-decoder trained with hand-written
//! gradients.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod hierarchy;
pub mod kv;
pub mod losses;
pub mod mat;
pub mod network;
pub mod rfcc;
pub mod training;

pub use datasets::{
    default_palette, mini_room_spec, read_xyzl, synth_scene, write_ply_labeled, write_xyzl,
    DatasetSplit, Primitive, SceneSpec, ShapeKind,
};
pub use error::{Error, Result};
pub use evaluation::{
    magnitude_histogram, miou, rfcc_accuracy, small_magnitude_fraction, ConfusionMatrix,
    MagnitudeHistogram,
};
pub use geometry::{
    grid_subsample, nearest_neighbor, radius_neighbors, LabelSpec, NeighborLists, Point3,
    PointCloud, IGNORE_LABEL,
};
pub use hierarchy::{build_hierarchy, Hierarchy, HierarchyConfig, HierarchyLevel};
pub use losses::{
    centrifugal, fd_loss, reasoning_loss, rfcc_bce, semantic_ce, total_loss, FdLoss,
    LossReport, ReasoningLoss, SemanticCe, PROB_EPS,
};
pub use mat::{Linear, Matrix};
pub use network::{
    backward, forward, init_params, input_features, predict_labels, FdAttachment,
    ForwardOutput, HeadSide, LossGrads, NetworkConfig, NetworkParams,
};
pub use rfcc::{gen_targets, init_codes, majority_code, or_pool, BitMatrix, RfccStack};
pub use training::{
    make_targets, scene_loss_and_grads, sgd_step, train, EpochRecord, SgdState, TargetMode,
    TargetSet, TrainConfig, TrainOutcome, TrainRecord,
};

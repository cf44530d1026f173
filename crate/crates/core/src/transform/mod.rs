//! Rewriting trained layers in PCA bases and pruning their outputs.

mod apply;
mod ops;
mod plan;
mod stream;

pub use apply::{apply_plan, apply_plan_with_bases, fit_plan_bases, validate_plan, FitOptions, Transformed};
pub use ops::{
    input_transform_conv, input_transform_dense, output_scores, output_transform, prune_basis, resnet_select_outputs,
    select_by_scores, select_outputs, select_outputs_flattened, to_pca_conv, to_pca_dense, OutputSelection,
    OutputTransformed,
};
pub use plan::{InputConfig, LayerConfig, OutputConfig, TransformPlan};
pub use stream::{channel_stream, ChannelStream, StreamConsumer};

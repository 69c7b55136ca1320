//! Topology-preserving editing of binary segmentation masks and the tooling
//! around it: Canny condition maps, contour structural graphs, an
//! adversarial deformation trainer, a dataset pipeline with a pluggable
//! image backend, and reference segmentation metrics.

pub mod adversarial;
pub mod contour;
pub mod deform;
pub mod edges;
pub mod error;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod rigid;
pub mod samples;
pub mod topology;

pub use adversarial::{
    disc_forward, disc_loss, gen_adversarial_loss, total_loss, train, DiscriminatorState,
    GeneratorState, LossReport, TrainConfig, TrainOutcome,
};
pub use contour::{extract_keypoints, KeypointParams, Point};
pub use deform::{apply_deformation, content_loss, project_topology, DeformationField, Template};
pub use edges::{canny, CannyParams, EdgeMap};
pub use error::{Error, Result};
pub use graph::{
    build_graph, graph_features, structure_loss, GraphFeatures, GraphParams, StructuralGraph,
};
pub use mask::{invert, iou, load_mask, save_mask, threshold, BinaryMask, ProbMap};
pub use metrics::{evaluate, MetricConfig, MetricReport};
pub use noise::{forward_noise, make_schedule, NoiseSchedule};
pub use pipeline::{run, validate_manifest, Manifest, PipelineConfig};
pub use rigid::{invert_transform, rigid_edit, sample_rigid, RigidRanges, RigidTransform};
pub use topology::{topology, TopologySignature};

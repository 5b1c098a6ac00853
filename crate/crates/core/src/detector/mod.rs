//! Small two-branch BEV fusion detector: LiDAR occupancy and image
//! backbones, image features carried into BEV through the LiDAR points, a
//! fused BEV backbone and a dense two-anchor head.

mod boxes;
mod config;
mod loss;
mod net;
mod params;
mod train;

pub use boxes::{nms, DetectionBox};
pub use config::DetectorConfig;
pub use loss::{assign_anchors, focal_loss, smooth_l1_sum, task_loss, AnchorLabel};
pub use net::{anchors, decode, encode, forward, image_features, postprocess, project_fuse, voxelize_bev, Proposals};
pub use params::{BoundParams, DetectorParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{detect_boxes, loss_and_grads, propose, train_step, SampleInputs};

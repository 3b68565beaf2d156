//! Fitting a parametric human body model to dense image-to-surface
//! correspondences.

pub mod camera;
pub mod correspondence;
pub mod fitter;
pub mod fixture;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod rotation;
pub mod skinning;
pub mod smf;
pub mod synth;

pub use camera::{Camera, Intrinsics};
pub use correspondence::{CorrespondenceRecord, DenseCorrespondenceMap, Keypoints2D};
pub use fitter::{fit, make_stage_config, FitConfig, FitInputs, FitResult};
pub use losses::{LossReport, LossWeights};
pub use raster::{DepthBuffer, SilhouetteMask};
pub use model::{BodyParams, Joints3D, Mesh, SmplModel};
pub use skinning::ParamGrad;
pub use synth::{generate_scene, SceneSpec, SynthScene};

//! Analytic construction of convolutional ReLU networks that detect framed
//! tiles, features and images on a fixed canvas, together with the
//! reference detectors, dataset generation and file formats around them.

pub mod compiler;
pub mod dataset;
pub mod error;
pub mod io;
pub mod model;
pub mod plf;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use compiler::{
    compile_classifier, compile_feature_network, compile_min_network, compile_shallow_classifier,
    compile_tile_network, param_report, ArtifactKind, Bounds, CompiledArtifact, MinNetwork,
    ParamReport,
};
pub use error::{Error, Result};
pub use model::{
    class_membership, contains_feature, contains_image, contains_tile, Feature, FramedTile,
    ImageClassSpec, ImageSpec, Membership,
};
pub use plf::{phi_class_vector, phi_feature, phi_image, phi_image_sum, phi_tile, RegionIndex};
pub use tensor::{ImageMatrix, Matrix, Network};

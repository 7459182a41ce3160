//! Differentiable layers for nonlinear second-order pooling of convolutional
//! features: RBF kernel aggregation into an SPD matrix, a bilinear SPD
//! transform whose parameter lives on the orthogonal Stiefel manifold, and a
//! vectorization/normalization head, all with hand-written gradients.

pub mod error;
pub mod gradcheck;
pub mod head;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use kernel::SpdMatrix;
pub use network::{Aggregator, NetworkParams, PipelineConfig};
pub use rng::SeededRng;
pub use tensor::{FeatureTensor, Matrix};
pub use train::{MetricsRecord, Sample, TrainConfig};
pub use transform::StiefelPoint;

//! Multi-precision LiDAR place recognition at desk scale.
//!
//! Point clouds are projected into Bird's-Eye-View rasters, encoded into
//! compact L2-normalized global descriptors by small CNN backbones, and
//! retrieved by exact nearest-neighbor search. The same trained model runs
//! under FP32, bit-exact emulated FP16, and integer-only INT8 (static
//! post-training quantization with MSE-calibrated scales), so retrieval
//! quality and runtime cost can be compared across precision regimes.

pub mod backbone;
pub mod bev;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod quant;
pub mod retrieval;
pub mod tensor;
pub mod train;

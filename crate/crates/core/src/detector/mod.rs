//! Compact single-shot grid detector: one anchor per cell, YOLO-style
//! parameterization, composite training loss, and score-threshold + NMS
//! decoding.

mod io;
mod layers;
mod loss;
mod network;
mod raw;
mod train;

pub use io::{decode_weights, encode_weights, load_weights, save_weights, TensorEntry, WeightHeader};
pub use loss::{responsible_cell, training_loss, LAMBDA_COORD, LAMBDA_NOOBJ, NOOBJ_IGNORE_IOU};
pub use network::{
    backward, forward, forward_with_tape, ConvWeights, DetectorArch, DetectorParams, Gradients, Layer, Tape,
};
pub use raw::{decode_detections, nms, Detection, RawPrediction, CLS, DEFAULT_NMS_IOU, DEFAULT_THRESHOLD, TH, TO, TW, TX, TY};
pub use train::{train, train_logged, TrainHyper};

#[doc(hidden)]
pub mod internals {
    //! Layer primitives exposed for gradient-check harnesses.
    pub use super::layers::{col2im, conv_forward, im2col, maxpool_backward, maxpool_forward, relu, relu_backward};
}

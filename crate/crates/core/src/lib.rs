//! Speculative decoding for a small decoder-only transformer, with n-gram
//! prompt-lookup drafting and a W8A8-quantized verifier.
//!
//! - [`numerics`]: matrices, f32 and int8 GEMM, symmetric quantization, softmax.
//! - [`model`]: the transformer, its KV cache and the QZR1 weight file.
//! - [`quant`]: activation calibration, smoothing and the W8A8 forward path.
//! - [`drafter`]: prompt-lookup draft proposals.
//! - [`specdec`]: draft/verify/accept loop, rejection sampling and its exact oracle.
//! - [`perfmodel`]: bandwidth-bound latency and throughput model.

mod binio;
pub mod drafter;
pub mod model;
pub mod numerics;
pub mod perfmodel;
pub mod quant;
pub mod specdec;

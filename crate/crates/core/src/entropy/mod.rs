//! Bit-exact entropy coding: range coder, pmf quantization, parameter
//! coding and the bitstream container.

pub mod bitstream;
pub mod params;
pub mod pmf;
pub mod range;

pub use bitstream::{Bitstream, BitstreamHeader};
pub use params::{code_module, decode_module, quantize_module, QuantizedModule};
pub use pmf::{build_laplace_pmf, det_exp, quantize_pmf, PMF_TOTAL};
pub use range::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};

//! Binary file formats: tensor files and checkpoint containers.
//!
//! All multi-byte integers are little-endian and all payloads are `f32`.

mod container;
mod reader;
mod tensorfile;

pub use container::{Container, TensorRecord, CONTAINER_VERSION};
pub use tensorfile::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, TENSOR_MAGIC};

pub mod atm;
pub mod backbones;
pub mod background;
pub mod cli;
pub mod corpus;
pub mod diversity;
pub mod error;
pub mod image;
pub mod metrics;
pub mod pretrain;
pub mod train;
pub mod vfgm;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image, ParsingMap};

// Training allocates and frees many large activation buffers; the system
// allocator returns them to the OS and page-faults them back every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

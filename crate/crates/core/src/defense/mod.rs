//! Defenses: input compression, non-local feature denoising in the image
//! backbone, and free adversarial training with a persistent adversary.

mod dct;
mod nonlocal;
mod train;

pub use dct::{dct8, dct_compress, quant_table};
pub use nonlocal::{nonlocal_block, nonlocal_forward, NonLocalParams};
pub use train::{free_adv_train, DefenseConfig, DefenseKind, DefenseRun, Update};

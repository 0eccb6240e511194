//! Multi-level VAE: shared encoder trunk with a stochastic domain head
//! (`μ_D`, `σ_D`) and a deterministic class head (`z_C`), a decoder over
//! `[z_D, z_C]`, and a softmax RP classifier on `z_C`.

mod loss;
mod model;
mod noise;

pub use loss::{class_grad_logits, class_loss, kl_grad, kl_loss, rec_grad, rec_loss};
pub use model::{
    Architecture, Block, Encoded, Encoder, Gradients, MlvaeModel, OutputGrads, Trace, SIGMA_FLOOR,
};
pub use noise::{reparameterize_domain, DomainNoiseBuffer};

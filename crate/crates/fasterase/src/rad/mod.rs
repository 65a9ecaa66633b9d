//! Region-aware adversarial distillation.
//!
//! Two training phases share this module. The *teacher* phase trains the
//! denoiser (plus condition encoder) with plain noise-prediction regression
//! and an attention localization term. The *distillation* phase compresses
//! the many-step teacher into a few-step student: at a timestep drawn from
//! the student's sampling plan, the student predicts the clean background
//! latent in a single call, and a latent discriminator — the denoiser
//! encoder with trainable realness heads — scores predictions against real
//! backgrounds.
//!
//! Masking is deliberately asymmetric: the student is conditioned on the
//! tight object mask, while every discriminator update sees the expanded
//! object-plus-effects mask. The student is therefore never told where the
//! shadow or reflection lies, but it is penalized for leaving them behind —
//! which is exactly what forces effect removal to generalize from the
//! object mask alone.
//!
//! All randomness inside a training step derives from `(seed, label,
//! iteration)`, so a run interrupted at any checkpoint resumes
//! bit-identically.

mod disc;
mod distill;
mod losses;
mod optim;
mod teacher;

pub use disc::{discriminator_score, Discriminator};
pub use distill::{
    init_distill, load_distill, run_distill, save_distill, DistillConfig, DistillMetrics,
    DistillState, StepCapture,
};
pub use losses::{disc_loss, gen_loss, mask_loss, mask_loss_value, GenLossTerms, LossWeights};
pub use optim::AdamW;
pub use teacher::{
    init_teacher, load_teacher, save_teacher, train_teacher, TeacherConfig, TeacherMetrics,
    TeacherState,
};

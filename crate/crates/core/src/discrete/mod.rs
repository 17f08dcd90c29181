//! Discrete diffusion policy: bin tokenization, masked-token training and
//! confidence-based iterative unmasking, including native inpainting of a
//! committed prefix.

mod loss;
mod sampler;
mod tokenize;

pub use loss::{
    discrete_loss_from_logits, discrete_loss_masked, discrete_train_loss, draw_training_mask, force_prefix,
    prefix_finetune_batch, DiscreteLossParts, L1_WEIGHT, MAX_FINETUNE_PREFIX,
};
pub use sampler::{
    discrete_rtc_sample, inpaint_init, round_budget, run_unmasking, sample_chunk_discrete, select_unmask,
    shift_carry_pattern, unmask_count_schedule, unmask_step, DiscreteRtcOutput, LogitsModel, Schedule,
    UnmaskConfig, UnmaskJob, UnmaskOutcome, UnmaskTrace,
};
pub use tokenize::{
    apply_random_mask, dequantize, dequantize_rows, mask_count, mask_ratio, quantize, Quantizer,
};

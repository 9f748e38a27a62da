//! Tiny fixed-context autoregressive LM.
//!
//! The last `n` tokens (left-padded with BOS) are embedded, concatenated,
//! passed through one tanh layer and projected to vocabulary logits. All
//! gradients are hand-derived.

mod checkpoint;
pub(crate) mod model;
mod optim;
mod sample;
mod train;
mod vocab;

pub use checkpoint::{Checkpoint, LayoutEntry};
pub use model::{
    context_at, init_params, log_softmax, logits, nll_loss_and_grad, sequence_logprob, softmax, token_logprobs,
    with_eos, ModelConfig, ModelParams, Trunk,
};
pub use optim::{adam_step, OptimizerState};
pub use sample::{greedy_decode, nucleus_filter, sample_top_p};
pub use train::{mean_nll, train_nll, NllEpoch, NllTrainConfig};
pub use vocab::{TokenId, TokenSeq, Vocab, BOS, EOS, PAD, UNK};

//! A small pre-LN decoder-only transformer: forward and backward passes,
//! KV-cached decoding, training on the synthetic task, layer surgery and
//! the `TOYC` checkpoint format.

mod backward;
mod decode;
mod interface;
mod io;
mod model;
mod task;
mod tokenizer;
mod train;

pub use backward::{backward_capture, batch_loss, batch_loss_with_residual_offset, loss_and_gradients, BatchGradients, GradientCapture, TrainExample};
pub use decode::{greedy_decode, sample_decode};
pub use interface::ToyModel;
pub use io::{read_checkpoint, round_to_f32, write_checkpoint, TOY_MAGIC, TOY_VERSION};
pub use model::{forward_capture, forward_full, BlockWeights, CheckpointMeta, DecodeState, ForwardTrace, LayerNormWeights, ToyCheckpoint, ToyConfig};
pub use task::{SyntheticTask, SyntheticTaskSpec, TaskPhase};
pub use tokenizer::{Tokenizer, BOS_ID, EOS_ID, UNK_ID};
pub use train::{train_synthetic, Adam, Phase, StageSchedule, TrainRun};

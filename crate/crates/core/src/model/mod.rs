//! The multi-view bilateral grid transformer.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use forward::{
    attention, attention_on_tape, block_on_tape, decoder_forward, decoder_on_tape, embed,
    embed_on_tape, encoder_forward, encoder_on_tape, grids_on_tape, harmonize_sequence,
    head_on_tape, model_input, patches_on_tape, patchify, predict_grids, slice_on_tape,
    transformer_block, unpatchify, GridVars, Harmonized, ParamVars, TokenSequence,
};
pub use params::{ModelParams, ParamEntry, ParamLayout, INIT_STD};

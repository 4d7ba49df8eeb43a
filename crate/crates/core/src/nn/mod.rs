//! Patch embedding, the masking network, the asymmetric encoder/decoder pair
//! and the linear classification head.

mod dims;
mod init;
mod models;
mod patch;

pub use dims::ModelDims;
pub use init::{
    init_decoder, init_encoder, init_head, init_masker, xavier_bound, xavier_uniform, MLP_RATIO,
};
pub use models::{
    block_forward, decoder_forward, encoder_forward, head_forward, masking_net_forward, LN_EPS,
};
pub use patch::{patchify, unpatchify, PatchGrid};

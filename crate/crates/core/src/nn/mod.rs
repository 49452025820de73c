//! Neural layers, initialization and optimization.

mod init;
mod layers;
mod optim;

pub use init::{glorot_bound, glorot_uniform, init_params};
pub use layers::{
    dropout, dropout_mask, BatchNorm, CnnBlock, CnnBlockVars, GruCell, GruVars, Linear,
    LinearVars, Phase,
};
pub use optim::{clip_grad_l2, Adam, AdamState};

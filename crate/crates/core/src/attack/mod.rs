//! Masked perturbations of the sign texture optimized so the detector misses
//! or mislabels the sign across sampled viewing conditions.

mod io;
mod loss;
mod optimize;
mod patch;

pub use io::{
    decode_delta, decode_mask, encode_delta, encode_mask, load_patch, mask_sha256, save_patch, PatchManifest,
    DELTA_FILE, MANIFEST_FILE, MASK_FILE, TRACE_FILE,
};
pub use loss::{attack_loss, hard_max_score, DEFAULT_TEMPERATURE, GATE_IOU, MISLABEL_SUPPRESS_WEIGHT};
pub use optimize::{
    eot_objective, optimize_patch, optimize_patch_logged, sample_draws, AttackConfig, AttackOutcome, Draw, Objective,
};
pub use patch::{
    apply_patch, default_sticker_mask, poster_mask, AttackMode, Mask, PatchSpec, PerturbationNorm, STICKER_COLS,
    STICKER_ROWS,
};

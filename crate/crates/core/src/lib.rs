//! GFlowNet-guided denoising diffusion over structured residue states.
//!
//! A residue state couples an amino-acid type (20 classes), a 3D position and
//! a 3D orientation in SO(3). The library implements the three forward/reverse
//! diffusion channels, a small reference denoiser with an in-crate reverse-mode
//! tape, trajectory-balance and detailed-balance objectives over full denoising
//! trajectories, a synthetic contact-energy oracle, and the sampling/evaluation
//! pipeline. Everything is deterministic given a seed.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod denoiser;
pub mod kernels;
pub mod metrics;
pub mod objectives;
pub mod reward;
pub mod sampler;
pub mod schedules;
pub mod seeding;
pub mod so3;
pub mod stats;
pub mod tabular;
pub mod toydata;
pub mod train;

/// Number of amino-acid classes.
pub const NUM_AA: usize = 20;

/// Canonical one-letter amino-acid alphabet; index in this string is the class index.
pub const AA_ALPHABET: &str = "ACDEFGHIKLMNPQRSTWYV";

/// Class index of a one-letter amino-acid code.
pub fn aa_index(c: char) -> Option<usize> {
    AA_ALPHABET.find(c)
}

/// One-letter code of a class index.
pub fn aa_char(idx: usize) -> char {
    AA_ALPHABET.as_bytes()[idx] as char
}

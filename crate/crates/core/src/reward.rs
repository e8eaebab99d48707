//! Synthetic contact-energy oracle, the reward transform R = exp(-α·E) and
//! the precomputed reward cache.
//!
//! The energy is a pairwise backbone-level contact model between CDR and
//! context residues: a per-type-pair affinity times a linear well that
//! bottoms out at the midpoint between the clash and contact radii, plus a
//! quadratic clash penalty inside the clash radius. Orientations do not
//! enter. Interface energy (the ΔG analogue) only counts CDR–context pairs;
//! the total-energy variant adds intra-CDR clash terms.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::dataio::{
    read_container, write_container, ComplexRecord, ContainerHeader, DataError, RewardRecord,
    REWARDS_SCHEMA,
};
use crate::kernels::{CdrState, ComplexContext};
use crate::objectives::RewardValue;
use crate::seeding::derive_rng;
use crate::NUM_AA;

/// Pairwise contact energy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Well depth at the contact optimum (kcal/mol per unit affinity).
    pub eps_well: f64,
    /// Contact radius r_c (Å): pairs beyond it contribute nothing.
    pub r_contact: f64,
    /// Clash radius r_x (Å): pairs inside it pay the quadratic penalty.
    pub r_clash: f64,
    /// Clash penalty stiffness κ.
    pub kappa: f64,
    /// Symmetric 20×20 per-type-pair affinity matrix (flattened row-major).
    affinity: Vec<f64>,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel::with_seeded_affinity(1.0, 8.0, 3.0, 10.0, 0)
    }
}

impl EnergyModel {
    /// Build with a deterministic pseudo-random symmetric affinity matrix in
    /// [-1, 1]; `affinity_seed` makes the matrix reproducible and part of
    /// the model digest.
    pub fn with_seeded_affinity(
        eps_well: f64,
        r_contact: f64,
        r_clash: f64,
        kappa: f64,
        affinity_seed: u64,
    ) -> EnergyModel {
        assert!(r_clash < r_contact, "r_clash must be below r_contact");
        let mut rng = derive_rng(affinity_seed, "energy-affinity", 0);
        let mut affinity = vec![0.0f64; NUM_AA * NUM_AA];
        for i in 0..NUM_AA {
            for j in i..NUM_AA {
                let a = rng.gen_range(-1.0..1.0);
                affinity[i * NUM_AA + j] = a;
                affinity[j * NUM_AA + i] = a;
            }
        }
        EnergyModel {
            eps_well,
            r_contact,
            r_clash,
            kappa,
            affinity,
        }
    }

    pub fn affinity(&self, a: usize, b: usize) -> f64 {
        self.affinity[a * NUM_AA + b]
    }

    /// Contact optimum radius (well bottom): midpoint of clash and contact
    /// radii.
    pub fn r_opt(&self) -> f64 {
        (self.r_clash + self.r_contact) / 2.0
    }

    /// Well shape: 0 outside r_contact, ramping linearly to ε_w at r_opt and
    /// flat below it. Always nonnegative; the affinity carries the sign.
    pub fn well(&self, r: f64) -> f64 {
        let ramp = ((self.r_contact - r) / (self.r_contact - self.r_opt())).clamp(0.0, 1.0);
        self.eps_well * ramp
    }

    fn clash(&self, r: f64) -> f64 {
        let pen = (self.r_clash - r).max(0.0);
        self.kappa * pen * pen
    }

    /// One pair's energy contribution at distance r between types (a, b).
    pub fn pair_energy(&self, a: usize, b: usize, r: f64) -> f64 {
        self.affinity(a, b) * self.well(r) + self.clash(r)
    }

    /// Hex digest of all model parameters; stale caches are detected by
    /// comparing it.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.eps_well, self.r_contact, self.r_clash, self.kappa] {
            h.update(v.to_le_bytes());
        }
        for v in &self.affinity {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Interface (binding) energy: sum over CDR–context pairs within the
/// contact radius. This is the ΔG analogue — it vanishes when the CDR is
/// pulled to infinity.
pub fn energy(cdr: &CdrState, ctx: &ComplexContext, model: &EnergyModel) -> f64 {
    let mut acc = 0.0f64;
    for res in &cdr.residues {
        for c in &ctx.residues {
            let r = (res.pos - c.pos).norm();
            if r < model.r_contact {
                acc += model.pair_energy(res.dtype, c.dtype, r);
            } else {
                // Clash radius is below contact radius, so nothing to add.
            }
        }
    }
    acc
}

/// Intra-CDR clash energy (no attractive terms within the designed loop).
pub fn intra_clash(cdr: &CdrState, model: &EnergyModel) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..cdr.len() {
        for j in i + 1..cdr.len() {
            let r = (cdr.residues[i].pos - cdr.residues[j].pos).norm();
            let pen = (model.r_clash - r).max(0.0);
            acc += model.kappa * pen * pen;
        }
    }
    acc
}

/// Total CDR energy: interface terms plus intra-CDR clashes.
pub fn e_total(cdr: &CdrState, ctx: &ComplexContext, model: &EnergyModel) -> f64 {
    energy(cdr, ctx, model) + intra_clash(cdr, model)
}

/// Exact exponential reward R = exp(-α·E).
pub fn reward_transform(energy: f64, alpha: f64) -> RewardValue {
    assert!(alpha > 0.0, "reward temperature must be positive");
    RewardValue::from_energy(energy, alpha)
}

/// Summary returned by [`precompute_rewards`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputeSummary {
    pub written: usize,
    /// (id, region) pairs skipped because the complex lacks that region.
    pub skipped: usize,
}

/// Compute rewards for every (complex, region) combination and write the
/// sorted cache. Complexes missing a requested region are skipped and
/// counted. Deterministic: rerunning on unchanged inputs is byte-identical.
pub fn precompute_rewards(
    path: &Path,
    records: &[ComplexRecord],
    regions: &[&str],
    model: &EnergyModel,
    alpha: f64,
) -> Result<PrecomputeSummary, DataError> {
    let mut pairs: Vec<(&ComplexRecord, String)> = Vec::new();
    let mut skipped = 0usize;
    for rec in records {
        for region in regions {
            if rec.cdr_regions.contains_key(*region) {
                pairs.push((rec, region.to_string()));
            } else {
                skipped += 1;
            }
        }
    }
    let mut rows: Vec<RewardRecord> = pairs
        .par_iter()
        .map(|(rec, region)| {
            let (ctx, cdr) = rec.split_region(region).expect("region present");
            let e = energy(&cdr, &ctx, model);
            let rv = reward_transform(e, alpha);
            RewardRecord {
                id: rec.id.clone(),
                region: region.clone(),
                energy: e,
                reward: rv.reward,
            }
        })
        .collect();
    rows.sort_by(|a, b| (&a.id, &a.region).cmp(&(&b.id, &b.region)));
    let header = ContainerHeader::new(REWARDS_SCHEMA)
        .with("alpha", alpha)
        .with("model_digest", model.digest());
    write_container(path, &header, &rows)?;
    Ok(PrecomputeSummary {
        written: rows.len(),
        skipped,
    })
}

/// Load a reward cache, rejecting it when alpha or the model digest no
/// longer match.
pub fn load_rewards(
    path: &Path,
    model: &EnergyModel,
    alpha: f64,
) -> Result<Vec<RewardRecord>, DataError> {
    let (header, rows): (_, Vec<RewardRecord>) = read_container(path, REWARDS_SCHEMA)?;
    let stale = |what: &str, found: &str| DataError::Schema {
        path: path.to_path_buf(),
        found: format!("{what} {found}"),
        expected: format!("{what} matching the current run configuration"),
    };
    match header.meta.get("model_digest") {
        Some(d) if *d == model.digest() => {}
        other => return Err(stale("model_digest", other.map(|s| s.as_str()).unwrap_or("<missing>"))),
    }
    match header.meta.get("alpha").and_then(|a| a.parse::<f64>().ok()) {
        Some(a) if a == alpha => {}
        _ => return Err(stale("alpha", header.meta.get("alpha").map(|s| s.as_str()).unwrap_or("<missing>"))),
    }
    Ok(rows)
}

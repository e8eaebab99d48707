//! Procedural desk-scale dataset generator: a random antigen blob plus an
//! antibody chain whose three heavy-chain CDR loops are smooth noisy arcs
//! between framework anchors, with H3 bulging toward the antigen so that
//! contact energies are nonzero and varied. CDR types are biased toward the
//! nearest context residue's type, giving the denoiser a learnable sequence
//! signal. Reference energies come from the oracle.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use crate::dataio::{ComplexRecord, ResidueRecord};
use crate::kernels::{CdrState, ComplexContext, ResidueState};
use crate::reward::{energy, EnergyModel};
use crate::seeding::derive_rng;
use crate::so3::{exp_map, sample_uniform, sample_unit_vector, Rotation};
use crate::NUM_AA;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataConfig {
    pub n_complexes: usize,
    pub seed: u64,
    /// Residues in the antigen blob.
    pub antigen_size: usize,
    /// Cα-Cα spacing along chains (Å).
    pub spacing: f64,
    pub model: EnergyModel,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            n_complexes: 64,
            seed: 0,
            antigen_size: 12,
            spacing: 3.8,
            model: EnergyModel::default(),
        }
    }
}

/// Peaked type choice: 70% mass on the nearest context residue's type.
fn biased_type(rng: &mut ChaCha12Rng, pos: &Vector3<f64>, context: &[(usize, Vector3<f64>)]) -> usize {
    let nearest = context
        .iter()
        .min_by(|a, b| {
            (a.1 - pos)
                .norm_squared()
                .total_cmp(&(b.1 - pos).norm_squared())
        })
        .map(|(t, _)| *t)
        .unwrap_or(0);
    if rng.gen::<f64>() < 0.7 {
        nearest
    } else {
        rng.gen_range(0..NUM_AA)
    }
}

/// Orientation loosely tied to the chain direction with small seeded noise,
/// so the orientation channel carries learnable structure.
fn chain_frame(rng: &mut ChaCha12Rng, direction: &Vector3<f64>) -> Rotation {
    let x = direction.normalize();
    let up = if x.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::y()
    };
    let y = (up - x * up.dot(&x)).normalize();
    let z = x.cross(&y);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let base = Rotation::from_matrix_unchecked(m);
    let noise = exp_map(&(sample_unit_vector(rng) * (0.15 * rng.gen::<f64>())));
    base.compose(&noise)
}

/// An arc of `m` points from `a` to `b`, bulging by `bulge` toward `pull`,
/// with seeded jitter.
fn loop_arc(
    rng: &mut ChaCha12Rng,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    m: usize,
    pull: &Vector3<f64>,
    bulge: f64,
) -> Vec<Vector3<f64>> {
    let chord = b - a;
    let mid = (a + b) / 2.0;
    let toward = (pull - mid).normalize();
    // Component of the pull direction orthogonal to the chord.
    let orth = (toward - chord.normalize() * toward.dot(&chord.normalize())).normalize();
    (1..=m)
        .map(|i| {
            let u = i as f64 / (m + 1) as f64;
            let jitter = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * 0.35;
            a + chord * u + orth * (bulge * (std::f64::consts::PI * u).sin()) + jitter
        })
        .collect()
}

/// Generate the dataset; deterministic per seed.
pub fn generate(config: &ToyDataConfig) -> Vec<ComplexRecord> {
    (0..config.n_complexes)
        .map(|i| generate_one(config, i as u64))
        .collect()
}

fn generate_one(config: &ToyDataConfig, index: u64) -> ComplexRecord {
    let mut rng = derive_rng(config.seed, "toydata", index);
    let spacing = config.spacing;

    // Antigen blob around the origin.
    let mut antigen: Vec<(usize, Vector3<f64>)> = Vec::with_capacity(config.antigen_size);
    for _ in 0..config.antigen_size {
        let pos = sample_unit_vector(&mut rng) * (rng.gen::<f64>().cbrt() * 5.0);
        antigen.push((rng.gen_range(0..NUM_AA), pos));
    }

    // Heavy chain backbone: framework segments along x at height `plane`,
    // with the three CDR loop spans in between.
    let plane = 9.0 + rng.gen::<f64>() * 2.0;
    let lengths = [
        rng.gen_range(5..8),  // H1
        rng.gen_range(5..8),  // H2
        rng.gen_range(7..12), // H3
    ];
    let fw = 3usize; // framework residues between/around loops

    struct Placed {
        pos: Vector3<f64>,
        is_cdr: Option<usize>, // which loop
    }
    let mut placed: Vec<Placed> = Vec::new();
    let total_backbone = fw * 4 + lengths.iter().sum::<usize>();
    let x0 = -(total_backbone as f64) * spacing / 2.0;
    let mut cursor = 0usize;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (seg, &len) in lengths.iter().enumerate() {
        for _ in 0..fw {
            placed.push(Placed {
                pos: Vector3::new(x0 + cursor as f64 * spacing, 0.0, plane),
                is_cdr: None,
            });
            cursor += 1;
        }
        spans.push((cursor, len));
        for _ in 0..len {
            placed.push(Placed {
                pos: Vector3::zeros(), // filled below from the arc
                is_cdr: Some(seg),
            });
            cursor += 1;
        }
    }
    for _ in 0..fw {
        placed.push(Placed {
            pos: Vector3::new(x0 + cursor as f64 * spacing, 0.0, plane),
            is_cdr: None,
        });
        cursor += 1;
    }

    // Fill each loop with an arc between its anchors; H3 (seg 2) bulges
    // hardest toward the antigen.
    let antigen_center = Vector3::zeros();
    for (seg, &(l, m)) in spans.iter().enumerate() {
        let a = placed[l - 1].pos;
        let b = placed[l + m].pos;
        let bulge = match seg {
            2 => plane - 4.5 + rng.gen::<f64>() * 2.0,
            _ => 2.0 + rng.gen::<f64>() * 2.0,
        };
        let arc = loop_arc(&mut rng, &a, &b, m, &antigen_center, bulge);
        for (k, p) in arc.into_iter().enumerate() {
            placed[l + k].pos = p;
        }
    }

    // Assemble residues: chain H backbone then chain A antigen.
    let mut residues: Vec<ResidueRecord> = Vec::with_capacity(placed.len() + antigen.len());
    let n_backbone = placed.len();
    for i in 0..n_backbone {
        let dir = if i + 1 < n_backbone {
            placed[i + 1].pos - placed[i].pos
        } else {
            placed[i].pos - placed[i - 1].pos
        };
        let dtype = match placed[i].is_cdr {
            Some(_) => biased_type(&mut rng, &placed[i].pos, &antigen),
            None => rng.gen_range(0..NUM_AA),
        };
        let ori = chain_frame(&mut rng, &dir);
        residues.push(ResidueRecord {
            chain: "H".into(),
            aa: crate::aa_char(dtype),
            pos: [placed[i].pos.x, placed[i].pos.y, placed[i].pos.z],
            quat: ori.quaternion(),
        });
    }
    for (dtype, pos) in &antigen {
        let ori = sample_uniform(&mut rng);
        residues.push(ResidueRecord {
            chain: "A".into(),
            aa: crate::aa_char(*dtype),
            pos: [pos.x, pos.y, pos.z],
            quat: ori.quaternion(),
        });
    }

    let mut cdr_regions = BTreeMap::new();
    cdr_regions.insert("H1".to_string(), spans[0]);
    cdr_regions.insert("H2".to_string(), spans[1]);
    cdr_regions.insert("H3".to_string(), spans[2]);

    let mut record = ComplexRecord {
        id: format!("toy{index:04}"),
        residues,
        cdr_regions,
        ref_energies: BTreeMap::new(),
    };

    // Center the complex, matching the dataset convention.
    let n = record.residues.len() as f64;
    let mut centroid = [0.0f64; 3];
    for r in &record.residues {
        for k in 0..3 {
            centroid[k] += r.pos[k];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    for r in &mut record.residues {
        for k in 0..3 {
            r.pos[k] -= centroid[k];
        }
    }

    // Reference energies from the oracle.
    let regions: Vec<String> = record.cdr_regions.keys().cloned().collect();
    for region in regions {
        let (ctx, cdr) = record.split_region(&region).expect("span just built");
        record
            .ref_energies
            .insert(region, energy(&cdr, &ctx, &config.model));
    }
    record
}

/// Convenience for tests: context and reference CDR of a generated record.
pub fn split(record: &ComplexRecord, region: &str) -> (ComplexContext, CdrState) {
    record.split_region(region).expect("region present")
}

/// Reference residue states of a region.
pub fn reference_states(record: &ComplexRecord, region: &str) -> Vec<ResidueState> {
    split(record, region).1.residues
}

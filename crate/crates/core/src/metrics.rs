//! Evaluation metrics: amino-acid recovery, Cα RMSD (optionally after rigid
//! superposition), the binding-energy improvement fraction and Top-1
//! selection by total-plus-binding energy.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{ComplexRecord, SampleRecord};
use crate::reward::{e_total, energy, EnergyModel};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

/// Fraction of positions whose residue type matches the reference.
pub fn aar(generated: &str, reference: &str) -> Result<f64, MetricsError> {
    let (g, r): (Vec<char>, Vec<char>) = (generated.chars().collect(), reference.chars().collect());
    if g.len() != r.len() {
        return Err(MetricsError::LengthMismatch(g.len(), r.len()));
    }
    if g.is_empty() {
        return Err(MetricsError::Empty);
    }
    let matches = g.iter().zip(&r).filter(|(a, b)| a == b).count();
    Ok(matches as f64 / g.len() as f64)
}

/// Optimal rigid superposition (rotation + translation) of `p` onto `q` by
/// the Kabsch algorithm; returns the aligned copy of `p`.
fn kabsch_align(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vector3<f64>>() / n;
    let cq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - cp) * (b - cq).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("3x3 svd");
    let vt = svd.v_t.expect("3x3 svd");
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let rot = vt.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    p.iter().map(|a| rot * (a - cp) + cq).collect()
}

/// Root-mean-square deviation in the shared complex frame; with `align` the
/// generated structure is first rigidly superposed onto the reference.
pub fn rmsd(
    generated: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    align: bool,
) -> Result<f64, MetricsError> {
    if generated.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(generated.len(), reference.len()));
    }
    if generated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let gen_aligned;
    let gen = if align {
        gen_aligned = kabsch_align(generated, reference);
        &gen_aligned
    } else {
        generated
    };
    let msd = gen
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / generated.len() as f64;
    Ok(msd.sqrt())
}

/// Fraction of samples with strictly lower binding energy than the
/// reference; ties do not count.
pub fn imp(sample_energies: &[f64], reference_energy: f64) -> Result<f64, MetricsError> {
    if sample_energies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let better = sample_energies
        .iter()
        .filter(|e| **e < reference_energy)
        .count();
    Ok(better as f64 / sample_energies.len() as f64)
}

/// Index of the sample minimizing E_total + ΔG; ties break to the lower
/// index.
pub fn top1(scores: &[(f64, f64)]) -> Result<usize, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut best = 0usize;
    for (i, (et, dg)) in scores.iter().enumerate().skip(1) {
        let (bet, bdg) = scores[best];
        if et + dg < bet + bdg {
            best = i;
        }
    }
    Ok(best)
}

/// Per-(complex, region) evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub region: String,
    pub n_samples: usize,
    /// Mean sequence recovery over the batch.
    pub aar: f64,
    /// Mean no-alignment Cα RMSD over the batch (Å).
    pub rmsd: f64,
    /// Per-sample binding energies (ΔG).
    pub energies: Vec<f64>,
    pub reference_energy: f64,
    pub imp: f64,
    pub top1_index: usize,
    pub top1_e_total: f64,
    pub top1_dg: f64,
}

/// Full evaluation: every entry plus dataset-level means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub mean_aar: f64,
    pub mean_rmsd: f64,
    pub mean_imp: f64,
    pub mean_top1_e_total: f64,
    pub mean_top1_dg: f64,
}

/// Evaluate sample batches against their reference complexes. Energies are
/// recomputed from geometry with the given oracle so samples and references
/// are scored identically. Samples are grouped by (id, region); groups keep
/// their input order.
pub fn evaluate_samples(
    records: &[ComplexRecord],
    samples: &[SampleRecord],
    model: &EnergyModel,
) -> Result<EvalReport, MetricsError> {
    let mut groups: Vec<((String, String), Vec<&SampleRecord>)> = Vec::new();
    for s in samples {
        let key = (s.id.clone(), s.region.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    let mut entries = Vec::with_capacity(groups.len());
    for ((id, region), group) in groups {
        let Some(record) = records.iter().find(|r| r.id == id) else {
            continue;
        };
        let Some((ctx, reference)) = record.split_region(&region) else {
            continue;
        };
        let ref_seq: String = reference.sequence();
        let ref_pos: Vec<Vector3<f64>> = reference.residues.iter().map(|r| r.pos).collect();
        let ref_energy = energy(&reference, &ctx, model);

        let mut aar_acc = 0.0;
        let mut rmsd_acc = 0.0;
        let mut energies = Vec::with_capacity(group.len());
        let mut scores = Vec::with_capacity(group.len());
        for s in &group {
            let cdr = s.to_cdr_state();
            aar_acc += aar(&s.sequence, &ref_seq)?;
            let pos: Vec<Vector3<f64>> = cdr.residues.iter().map(|r| r.pos).collect();
            rmsd_acc += rmsd(&pos, &ref_pos, false)?;
            let dg = energy(&cdr, &ctx, model);
            let et = e_total(&cdr, &ctx, model);
            energies.push(dg);
            scores.push((et, dg));
        }
        let n = group.len();
        let top1_index = top1(&scores)?;
        entries.push(EvalEntry {
            id,
            region,
            n_samples: n,
            aar: aar_acc / n as f64,
            rmsd: rmsd_acc / n as f64,
            imp: imp(&energies, ref_energy)?,
            energies,
            reference_energy: ref_energy,
            top1_index,
            top1_e_total: scores[top1_index].0,
            top1_dg: scores[top1_index].1,
        });
    }
    if entries.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = entries.len() as f64;
    Ok(EvalReport {
        mean_aar: entries.iter().map(|e| e.aar).sum::<f64>() / n,
        mean_rmsd: entries.iter().map(|e| e.rmsd).sum::<f64>() / n,
        mean_imp: entries.iter().map(|e| e.imp).sum::<f64>() / n,
        mean_top1_e_total: entries.iter().map(|e| e.top1_e_total).sum::<f64>() / n,
        mean_top1_dg: entries.iter().map(|e| e.top1_dg).sum::<f64>() / n,
        entries,
    })
}

/// Human-readable summary table.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<6} {:>4} {:>8} {:>9} {:>7} {:>12} {:>12}\n",
        "complex", "region", "N", "AAR", "RMSD(Å)", "IMP", "top1 E_tot", "top1 ΔG"
    ));
    for e in &report.entries {
        out.push_str(&format!(
            "{:<12} {:<6} {:>4} {:>8.4} {:>9.4} {:>7.4} {:>12.4} {:>12.4}\n",
            e.id, e.region, e.n_samples, e.aar, e.rmsd, e.imp, e.top1_e_total, e.top1_dg
        ));
    }
    out.push_str(&format!(
        "mean: AAR {:.4}  RMSD {:.4}  IMP {:.4}  top1 E_total {:.4}  top1 ΔG {:.4}\n",
        report.mean_aar,
        report.mean_rmsd,
        report.mean_imp,
        report.mean_top1_e_total,
        report.mean_top1_dg
    ));
    out
}

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::{complete_spot, ModelParameters};
use crate::neighborhoods::{build_block, SpotGraph, NUM_TOKENS};
use crate::preprocess::{median_complete, CompletionProvenance, Source, DEFAULT_MAX_RADIUS_HOPS};
use crate::rng::{derive_rng, STREAM_EVAL_MASK};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Spackle,
    Median,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Spackle => "spackle",
            Method::Median => "median",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub max_radius_hops: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Val,
            max_radius_hops: DEFAULT_MAX_RADIUS_HOPS,
        }
    }
}

/// A dataset with a seeded subset of its observed entries hidden.
///
/// Entry `(spot, gene)` of the evaluation split is hidden when a uniform draw
/// from the stream `(seed, spot)` falls below `rho`, so for a fixed seed the
/// hidden set grows monotonically with `rho`. The hidden entries become
/// unobserved and the dataset is median-completed again from what remains.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub rho: f64,
    pub split: Split,
    /// Hidden `(spot, gene)` entries in row-major order.
    pub entries: Vec<(usize, usize)>,
    /// Original values of the hidden entries.
    pub truth: Vec<f64>,
    /// `spots x genes`, true at hidden entries.
    pub hidden: Array2<bool>,
    pub dataset: Dataset,
    pub provenance: CompletionProvenance,
    /// SHA-256 over the hidden entry list.
    pub checksum: String,
}

pub fn corrupt(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    rho: f64,
    seed: u64,
    options: &EvalOptions,
) -> Result<Corruption> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be in (0, 1], got {rho}"
        )));
    }
    provenance.check_against(dataset)?;
    let mut observed = dataset.observed.clone();
    let mut hidden = Array2::from_elem(observed.dim(), false);
    let mut entries = Vec::new();
    let mut truth = Vec::new();
    let mut hasher = Sha256::new();
    for spot in dataset.spots_in_split(options.split) {
        let mut rng = derive_rng(seed, &[STREAM_EVAL_MASK, spot as u64]);
        for j in 0..dataset.num_genes() {
            let u: f64 = rng.gen();
            if dataset.observed[[spot, j]] && u < rho {
                debug_assert_eq!(provenance.sources[[spot, j]], Source::Observed);
                observed[[spot, j]] = false;
                hidden[[spot, j]] = true;
                entries.push((spot, j));
                truth.push(dataset.expression[[spot, j]]);
                hasher.update((spot as u64).to_le_bytes());
                hasher.update((j as u64).to_le_bytes());
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no maskable entries in the {} split at rho {rho}",
            options.split
        )));
    }
    let mut stripped = dataset.clone();
    stripped.observed = observed;
    ndarray::Zip::from(&mut stripped.expression)
        .and(&stripped.observed)
        .for_each(|v, &o| {
            if !o {
                *v = 0.0;
            }
        });
    stripped.completed = false;
    let (completed, completed_provenance) = median_complete(&stripped, options.max_radius_hops)?;
    let checksum = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(Corruption {
        rho,
        split: options.split,
        entries,
        truth,
        hidden,
        dataset: completed,
        provenance: completed_provenance,
        checksum,
    })
}

/// A completion method scored by [`evaluate`].
pub trait Imputer: Sync {
    fn method(&self) -> Method;

    /// Predictions for `corruption.entries`, in order.
    fn impute(&self, corruption: &Corruption) -> Result<Vec<f64>>;
}

/// The adaptive median filter; its estimates are already in the corrupted dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct MedianImputer;

impl Imputer for MedianImputer {
    fn method(&self) -> Method {
        Method::Median
    }

    fn impute(&self, corruption: &Corruption) -> Result<Vec<f64>> {
        Ok(corruption
            .entries
            .iter()
            .map(|&(i, j)| corruption.dataset.expression[[i, j]])
            .collect())
    }
}

/// The trained network, with exactly the hidden entries masked.
///
/// Blocks come from the corrupted dataset, so the original dropouts carry
/// medians recomputed without the hidden values and stay visible, as they do
/// during training; every hidden entry in the block, centre or neighbour,
/// is zeroed.
pub struct ModelImputer<'a, T: Scalar> {
    pub params: &'a ModelParameters<T>,
}

impl<T: Scalar> Imputer for ModelImputer<'_, T> {
    fn method(&self) -> Method {
        Method::Spackle
    }

    fn impute(&self, corruption: &Corruption) -> Result<Vec<f64>> {
        let graph = SpotGraph::new(&corruption.dataset)?;
        let mut spots: Vec<usize> = corruption.entries.iter().map(|&(i, _)| i).collect();
        spots.dedup();
        let completed: BTreeMap<usize, ndarray::Array1<f64>> = spots
            .par_iter()
            .map(|&spot| {
                let block = build_block(&corruption.dataset, &corruption.provenance, &graph, spot)?;
                let mut mask = MaskSpec::all_kept(block.values.nrows(), NUM_TOKENS);
                mask.rho = corruption.rho;
                let members = std::iter::once(Some(spot)).chain(graph.neighbor_slots(spot));
                for (col, member) in members.enumerate() {
                    if let Some(i) = member {
                        for (keep, &h) in mask
                            .keep
                            .column_mut(col)
                            .iter_mut()
                            .zip(corruption.hidden.row(i))
                        {
                            *keep = !h;
                        }
                    }
                }
                Ok((spot, complete_spot(&block, &mask, self.params)?))
            })
            .collect::<Result<_>>()?;
        Ok(corruption
            .entries
            .iter()
            .map(|&(i, j)| completed[&i][j])
            .collect())
    }
}

/// Scores of one method on one corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub rho: f64,
    pub mse: f64,
    /// Mean of the per-gene correlations that are defined.
    pub pcc: f64,
    /// `None` for genes with fewer than two hidden entries or constant truth.
    pub per_gene_pcc: Vec<Option<f64>>,
    pub num_evaluated_entries: usize,
    pub mask_checksum: String,
}

/// Pearson correlation; `None` when `truth` is constant, `Some(0.0)` when
/// only `pred` is.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let n = pred.len();
    if n < 2 || truth.len() != n {
        return None;
    }
    let mp = pred.iter().sum::<f64>() / n as f64;
    let mt = truth.iter().sum::<f64>() / n as f64;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vt <= 0.0 {
        return None;
    }
    if vp <= 0.0 || pred.iter().all(|&p| p == pred[0]) {
        return Some(0.0);
    }
    Some(cov / (vp * vt).sqrt())
}

/// MSE and gene-wise PCC of an imputer on the hidden entries only.
pub fn evaluate(imputer: &dyn Imputer, corruption: &Corruption) -> Result<EvalReport> {
    let pred = imputer.impute(corruption)?;
    if pred.len() != corruption.entries.len() {
        return Err(Error::ShapeMismatch(format!(
            "imputer returned {} values for {} entries",
            pred.len(),
            corruption.entries.len()
        )));
    }
    if let Some(k) = pred.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} prediction for entry {:?}",
            imputer.method(),
            corruption.entries[k]
        )));
    }
    let n = pred.len();
    let mse = pred
        .iter()
        .zip(&corruption.truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64;

    let genes = corruption.dataset.num_genes();
    let mut by_gene: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); genes];
    for ((&(_, j), &p), &t) in corruption.entries.iter().zip(&pred).zip(&corruption.truth) {
        by_gene[j].0.push(p);
        by_gene[j].1.push(t);
    }
    let per_gene_pcc: Vec<Option<f64>> = by_gene.iter().map(|(p, t)| pearson(p, t)).collect();
    let defined: Vec<f64> = per_gene_pcc.iter().flatten().copied().collect();
    let pcc = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalReport {
        method: imputer.method(),
        rho: corruption.rho,
        mse,
        pcc,
        per_gene_pcc,
        num_evaluated_entries: n,
        mask_checksum: corruption.checksum.clone(),
    })
}

pub fn evaluate_checkpoint<T: Scalar>(
    params: &ModelParameters<T>,
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    rho: f64,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if params.config().genes != dataset.num_genes() {
        return Err(Error::Checkpoint(format!(
            "model expects {} genes, dataset has {}",
            params.config().genes,
            dataset.num_genes()
        )));
    }
    let corruption = corrupt(dataset, provenance, rho, seed, options)?;
    evaluate(&ModelImputer { params }, &corruption)
}

pub fn evaluate_median(
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    rho: f64,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let corruption = corrupt(dataset, provenance, rho, seed, options)?;
    evaluate(&MedianImputer, &corruption)
}

/// Both methods scored on the same hidden entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub rho: f64,
    pub spackle: EvalReport,
    pub median: EvalReport,
}

pub fn corruption_sweep<T: Scalar>(
    params: &ModelParameters<T>,
    dataset: &Dataset,
    provenance: &CompletionProvenance,
    rhos: &[f64],
    seed: u64,
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    if rhos.is_empty() {
        return Err(Error::InvalidArgument(
            "no corruption fractions given".into(),
        ));
    }
    if params.config().genes != dataset.num_genes() {
        return Err(Error::Checkpoint(format!(
            "model expects {} genes, dataset has {}",
            params.config().genes,
            dataset.num_genes()
        )));
    }
    rhos.iter()
        .map(|&rho| {
            let corruption = corrupt(dataset, provenance, rho, seed, options)?;
            Ok(SweepPoint {
                rho,
                spackle: evaluate(&ModelImputer { params }, &corruption)?,
                median: evaluate(&MedianImputer, &corruption)?,
            })
        })
        .collect()
}

/// `rho\tmethod\tmse\tpcc\tn_entries`, SpaCKLE row first within each fraction.
pub fn write_sweep_tsv(points: &[SweepPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "rho\tmethod\tmse\tpcc\tn_entries")?;
    for point in points {
        for r in [&point.spackle, &point.median] {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                point.rho, r.method, r.mse, r.pcc, r.num_evaluated_entries
            )?;
        }
    }
    Ok(())
}

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::neighborhoods::SpotGraph;

/// Moran's I of one gene and its position in the ranking (1 = most autocorrelated).
#[derive(Debug, Clone, PartialEq)]
pub struct MoranScore {
    pub gene: String,
    /// `None` when the statistic is undefined for this gene.
    pub i_statistic: Option<f64>,
    pub rank: usize,
}

/// Moran's I with binary symmetric weights over an undirected edge list.
///
/// Each edge `(a, b)` contributes `w_ab = w_ba = 1`, so `W = 2 * edges.len()`.
pub fn morans_i_graph(values: &[f64], edges: &[(usize, usize)]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Degenerate("fewer than two values".into()));
    }
    if edges.is_empty() {
        return Err(Error::Degenerate("no adjacent pairs (W = 0)".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let cross: f64 = edges
        .iter()
        .map(|&(a, b)| 2.0 * (values[a] - mean) * (values[b] - mean))
        .sum();
    let w = 2.0 * edges.len() as f64;
    Ok(n as f64 / w * cross / denom)
}

/// Moran's I of `gene` over observed spots, 1-hop hex adjacency within each
/// slide, averaged across slides weighted by their observed spot counts.
///
/// Slides where the statistic is undefined are skipped; if every slide is
/// skipped the first slide's reason is returned.
pub fn morans_i(dataset: &Dataset, graph: &SpotGraph, gene: usize) -> Result<f64> {
    if gene >= dataset.num_genes() {
        return Err(Error::InvalidArgument(format!(
            "gene index {gene} out of range"
        )));
    }
    let mut weighted = 0.0;
    let mut total = 0usize;
    let mut first_err = None;
    for (_, members) in dataset.spots_by_slide() {
        let observed: Vec<usize> = members
            .into_iter()
            .filter(|&i| dataset.observed[[i, gene]])
            .collect();
        let mut local = vec![usize::MAX; dataset.num_spots()];
        for (k, &i) in observed.iter().enumerate() {
            local[i] = k;
        }
        let values: Vec<f64> = observed
            .iter()
            .map(|&i| dataset.expression[[i, gene]])
            .collect();
        let mut edges = Vec::new();
        for (a, &i) in observed.iter().enumerate() {
            for j in graph.ring(i, 1) {
                let b = local[j];
                if b != usize::MAX && a < b {
                    edges.push((a, b));
                }
            }
        }
        match morans_i_graph(&values, &edges) {
            Ok(v) => {
                weighted += v * values.len() as f64;
                total += values.len();
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if total == 0 {
        return Err(first_err.unwrap_or_else(|| Error::Degenerate("no slides".into())));
    }
    Ok(weighted / total as f64)
}

/// Scores every gene; ranked by descending I, ties by name, undefined last.
pub fn rank_genes(dataset: &Dataset, graph: &SpotGraph) -> Vec<MoranScore> {
    let stats: Vec<Option<f64>> = (0..dataset.num_genes())
        .into_par_iter()
        .map(|j| morans_i(dataset, graph, j).ok())
        .collect();
    let mut order: Vec<usize> = (0..dataset.num_genes()).collect();
    order.sort_by(|&a, &b| {
        let by_stat = match (stats[a], stats[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_stat.then_with(|| dataset.genes[a].cmp(&dataset.genes[b]))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(r, j)| MoranScore {
            gene: dataset.genes[j].clone(),
            i_statistic: stats[j],
            rank: r + 1,
        })
        .collect()
}

/// Restricts a normalized dataset to its `k` genes with the highest Moran's I.
pub fn select_genes(dataset: &Dataset, k: usize) -> Result<(Dataset, Vec<MoranScore>)> {
    if !dataset.normalization_applied {
        return Err(Error::InvalidDataset(
            "gene selection requires a normalized dataset".into(),
        ));
    }
    if k == 0 || k > dataset.num_genes() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} genes",
            dataset.num_genes()
        )));
    }
    let graph = SpotGraph::new(dataset)?;
    let scores = rank_genes(dataset, &graph);
    let rankable = scores.iter().filter(|s| s.i_statistic.is_some()).count();
    if rankable < k {
        return Err(Error::NotEnoughGenes {
            needed: k,
            available: rankable,
        });
    }
    let columns: Vec<usize> = scores[..k]
        .iter()
        .map(|s| {
            dataset
                .genes
                .iter()
                .position(|g| *g == s.gene)
                .expect("known gene")
        })
        .collect();
    let mut out = dataset.select_gene_columns(&columns);
    out.genes_selected = true;
    Ok((out, scores))
}

/// Two-column TSV `gene\tI` in rank order; undefined statistics are written as `NA`.
pub fn write_moran_tsv(scores: &[MoranScore], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "gene\tI")?;
    for s in scores {
        match s.i_statistic {
            Some(v) => writeln!(out, "{}\t{}", s.gene, v)?,
            None => writeln!(out, "{}\tNA", s.gene)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthParams};
    use crate::preprocess::normalize;
    use ndarray::Array2;

    /// Dense double-sum evaluation of the textbook formula.
    fn oracle(values: &[f64], weights: &Array2<f64>) -> f64 {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let (mut num, mut w, mut den) = (0.0, 0.0, 0.0);
        for i in 0..n {
            den += (values[i] - mean).powi(2);
            for j in 0..n {
                num += weights[[i, j]] * (values[i] - mean) * (values[j] - mean);
                w += weights[[i, j]];
            }
        }
        n as f64 / w * num / den
    }

    #[test]
    fn path_graph_by_hand() {
        let values = [1.0, 1.0, -1.0, -1.0];
        let edges = [(0, 1), (1, 2), (2, 3)];
        let mut w = Array2::zeros((4, 4));
        for &(a, b) in &edges {
            w[[a, b]] = 1.0;
            w[[b, a]] = 1.0;
        }
        let got = morans_i_graph(&values, &edges).unwrap();
        // cross sum 2*(1 - 1 + 1) = 2, W = 6, N = 4, denominator 4
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
        assert!((got - oracle(&values, &w)).abs() < 1e-15);
    }

    #[test]
    fn constant_gene_is_degenerate() {
        assert!(matches!(
            morans_i_graph(&[2.0, 2.0, 2.0], &[(0, 1), (1, 2)]),
            Err(Error::Degenerate(_))
        ));
        assert!(morans_i_graph(&[1.0, 2.0], &[]).is_err());
    }

    fn toy() -> Dataset {
        let d = generate_synthetic(&SynthParams {
            num_slides: 1,
            rows: 5,
            cols: 6,
            genes: 4,
            dropout_rate: 0.0,
            smoothness_length: 3.0,
            seed: 17,
        })
        .unwrap();
        normalize(&d, false).unwrap()
    }

    #[test]
    fn select_two_of_four() {
        let d = toy();
        let graph = SpotGraph::new(&d).unwrap();
        let stats: Vec<f64> = (0..4).map(|j| morans_i(&d, &graph, j).unwrap()).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]));
        let (sel, scores) = select_genes(&d, 2).unwrap();
        assert_eq!(
            sel.genes,
            vec![d.genes[order[0]].clone(), d.genes[order[1]].clone()]
        );
        assert_eq!(sel.expression.column(0), d.expression.column(order[0]));
        assert!(sel.genes_selected);
        assert_eq!(
            scores.iter().map(|s| s.rank).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
    }

    #[test]
    fn select_all_reorders() {
        let d = toy();
        let (sel, _) = select_genes(&d, 4).unwrap();
        let mut a = sel.genes.clone();
        let mut b = d.genes.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_broken_by_name() {
        let mut d = toy();
        let col = d.expression.column(1).to_owned();
        d.expression.column_mut(3).assign(&col);
        d.genes[1] = "zeta".into();
        d.genes[3] = "alpha".into();
        let graph = SpotGraph::new(&d).unwrap();
        let scores = rank_genes(&d, &graph);
        let pos = |name: &str| scores.iter().position(|s| s.gene == name).unwrap();
        assert_eq!(pos("alpha") + 1, pos("zeta"));
    }

    #[test]
    fn unrankable_genes_go_last() {
        let mut d = toy();
        d.expression.column_mut(0).fill(3.0);
        let graph = SpotGraph::new(&d).unwrap();
        let scores = rank_genes(&d, &graph);
        assert_eq!(scores.last().unwrap().gene, d.genes[0]);
        assert!(scores.last().unwrap().i_statistic.is_none());
        assert!(matches!(
            select_genes(&d, 4),
            Err(Error::NotEnoughGenes {
                needed: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn requires_normalization() {
        let d = generate_synthetic(&SynthParams {
            num_slides: 1,
            rows: 5,
            cols: 5,
            genes: 2,
            ..SynthParams::default()
        })
        .unwrap();
        assert!(select_genes(&d, 1).is_err());
    }

    #[test]
    fn tsv_format() {
        let scores = vec![
            MoranScore {
                gene: "a".into(),
                i_statistic: Some(0.5),
                rank: 1,
            },
            MoranScore {
                gene: "b".into(),
                i_statistic: None,
                rank: 2,
            },
        ];
        let mut buf = Vec::new();
        write_moran_tsv(&scores, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gene\tI\na\t0.5\nb\tNA\n");
    }
}

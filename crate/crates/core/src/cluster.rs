//! Silhouette analysis of per-image BN statistics, and raw CSV export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bns::PerImageBns;
use crate::error::{Error, Result};

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_distance(v: &[f64], members: &[&[f64]]) -> f64 {
    members.iter().map(|m| euclidean(v, m)).sum::<f64>() / members.len() as f64
}

/// Silhouette coefficient of `v`, a member of `own_cluster`.
///
/// `a` is the mean distance from `v` to the other members of its cluster,
/// `b` the smallest mean distance to any other non-empty cluster, and the
/// result is `(b − a) / max(a, b)`. A singleton cluster, or `a = b = 0`,
/// scores 0.
pub fn silhouette_sample(v: &[f64], own_cluster: &[&[f64]], other_clusters: &[Vec<&[f64]>]) -> Result<f64> {
    let b = other_clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| mean_distance(v, c))
        .fold(None, |best: Option<f64>, d| Some(best.map_or(d, |b| b.min(d))))
        .ok_or_else(|| Error::Invalid("silhouette needs at least one other non-empty cluster".into()))?;
    if own_cluster.len() <= 1 {
        return Ok(0.0);
    }
    // v itself contributes a zero distance.
    let a = own_cluster.iter().map(|m| euclidean(v, m)).sum::<f64>() / (own_cluster.len() - 1) as f64;
    let denom = a.max(b);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((b - a) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnsStatistic {
    Mean,
    Variance,
}

impl BnsStatistic {
    pub fn name(self) -> &'static str {
        match self {
            BnsStatistic::Mean => "mean",
            BnsStatistic::Variance => "variance",
        }
    }
}

/// Per-image statistics with class labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledBnsDataset {
    pub samples: Vec<(PerImageBns<f32>, usize)>,
}

impl LabeledBnsDataset {
    pub fn num_layers(&self) -> usize {
        self.samples.first().map_or(0, |(s, _)| s.layers.len())
    }

    /// One row per sample: the chosen statistic at BN layer `layer` (1-based).
    pub fn layer_matrix(&self, layer: usize, stat: BnsStatistic) -> Result<Vec<Vec<f64>>> {
        if layer == 0 || layer > self.num_layers() {
            return Err(Error::Invalid(format!("layer {layer} outside 1..={}", self.num_layers())));
        }
        Ok(self
            .samples
            .iter()
            .map(|(s, _)| {
                let st = &s.layers[layer - 1];
                let t = match stat {
                    BnsStatistic::Mean => &st.mean,
                    BnsStatistic::Variance => &st.var,
                };
                t.data().iter().map(|&v| v as f64).collect()
            })
            .collect())
    }

    fn validate(&self) -> Result<()> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (s, l) in &self.samples {
            *counts.entry(*l).or_default() += 1;
            if s.layers.len() != self.num_layers() {
                return Err(Error::Invalid("samples disagree on the number of BN layers".into()));
            }
        }
        if counts.len() < 2 {
            return Err(Error::Invalid(format!("silhouette needs at least 2 classes, got {}", counts.len())));
        }
        if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(Error::Invalid(format!("class {c} has {n} sample(s); at least 2 are required")));
        }
        Ok(())
    }
}

/// Mean silhouette over all samples at each BN layer, clusters being classes.
pub fn mean_silhouette_per_layer(ds: &LabeledBnsDataset, stat: BnsStatistic) -> Result<Vec<f64>> {
    ds.validate()?;
    let labels: Vec<usize> = ds.samples.iter().map(|(_, l)| *l).collect();
    let classes: Vec<usize> = {
        let mut c = labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    (1..=ds.num_layers())
        .map(|layer| {
            let rows = ds.layer_matrix(layer, stat)?;
            let clusters: BTreeMap<usize, Vec<&[f64]>> = classes
                .iter()
                .map(|&c| (c, rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r.as_slice()).collect()))
                .collect();
            let mut total = 0.0;
            for (row, &l) in rows.iter().zip(&labels) {
                let others: Vec<Vec<&[f64]>> =
                    clusters.iter().filter(|(&c, _)| c != l).map(|(_, m)| m.clone()).collect();
                total += silhouette_sample(row, &clusters[&l], &others)?;
            }
            Ok(total / rows.len() as f64)
        })
        .collect()
}

/// Renders one BN layer (1-based) as CSV: `label,stat,c0,c1,...`, two rows per sample.
pub fn bns_csv(ds: &LabeledBnsDataset, layer: usize) -> Result<String> {
    let mut out = String::from("label,stat");
    if ds.samples.is_empty() {
        out.push('\n');
        return Ok(out);
    }
    if layer == 0 || layer > ds.num_layers() {
        return Err(Error::Invalid(format!("layer {layer} outside 1..={}", ds.num_layers())));
    }
    let channels = ds.samples[0].0.layers[layer - 1].mean.numel();
    for c in 0..channels {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (s, label) in &ds.samples {
        let st = &s.layers[layer - 1];
        for (name, t) in [("mean", &st.mean), ("variance", &st.var)] {
            let _ = write!(out, "{label},{name}");
            for v in t.data() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_bns_csv(ds: &LabeledBnsDataset, layer: usize, path: &Path) -> Result<()> {
    std::fs::write(path, bns_csv(ds, layer)?)?;
    Ok(())
}

//! Posterior-delta evaluation of mean-shift manipulation.
//!
//! For every ordered pair `(c1, c2)` of the manipulated factor and every
//! sample of class `c1`, `x'` is produced by shifting the code from `c1` to
//! `c2`. The report averages, uniformly over all (pair, sample) instances,
//! the classifier posterior of the target class `c2` before and after, and
//! for each other factor the posterior of the sample's own class before and
//! after.

use ndarray::{Array2, Axis};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::factorize::{encode_batch, manipulate_codes, ClassMeanTable};
use crate::flow::FlowModel;

use super::MlpClassifier;

/// Sums over the instances of one `(from, to)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBreakdown {
    pub from: usize,
    pub to: usize,
    pub count: usize,
    pub target_before_sum: f64,
    pub target_after_sum: f64,
    /// One entry per other factor, in dataset order.
    pub other_before_sum: Vec<f64>,
    pub other_after_sum: Vec<f64>,
}

impl PairBreakdown {
    pub fn target_before(&self) -> f64 {
        self.target_before_sum / self.count as f64
    }

    pub fn target_after(&self) -> f64 {
        self.target_after_sum / self.count as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtherFactorSummary {
    pub factor: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationReport {
    pub factor: String,
    pub instances: usize,
    /// Pairs skipped because a class had no mean or no samples.
    pub skipped_pairs: usize,
    pub target_before: f64,
    pub target_after: f64,
    pub delta_target: f64,
    pub others: Vec<OtherFactorSummary>,
    pub pairs: Vec<PairBreakdown>,
}

/// Runs the protocol on `dataset` for `factor`. `classifiers` holds one
/// classifier per dataset factor, in dataset order, trained on observations.
/// With `include_identity`, `c1 = c2` pairs are evaluated too.
pub fn manipulation_eval(
    model: &FlowModel,
    means: &ClassMeanTable,
    classifiers: &[MlpClassifier],
    dataset: &LabeledDataset,
    factor: &str,
    include_identity: bool,
) -> Result<ManipulationReport> {
    let fi = dataset.factor_index(factor)?;
    if classifiers.len() != dataset.factors().len() {
        return Err(Error::InvalidConfig(format!(
            "{} classifiers for {} factors",
            classifiers.len(),
            dataset.factors().len()
        )));
    }
    if means.factor != factor {
        return Err(Error::InvalidConfig(format!(
            "mean table is for `{}`, not `{factor}`",
            means.factor
        )));
    }
    let others: Vec<usize> = (0..dataset.factors().len()).filter(|&f| f != fi).collect();
    let x = dataset.features();
    let z = encode_batch(model, x)?;
    let before: Vec<Array2<f64>> = classifiers
        .iter()
        .map(|c| c.posteriors(x))
        .collect::<Result<_>>()?;

    let classes = dataset.factors()[fi].classes;
    let labels = dataset.labels(fi);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for from in 0..classes {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| labels[i] == from).collect();
        for to in 0..classes {
            if from == to && !include_identity {
                continue;
            }
            if members.is_empty() || means.mean(from).is_err() || means.mean(to).is_err() {
                skipped += 1;
                continue;
            }
            let x_new = manipulate_codes(model, means, z.select(Axis(0), &members), from, to)?;
            let after: Vec<Array2<f64>> = classifiers
                .iter()
                .map(|c| c.posteriors(x_new.view()))
                .collect::<Result<_>>()?;
            let mut pair = PairBreakdown {
                from,
                to,
                count: members.len(),
                target_before_sum: 0.0,
                target_after_sum: 0.0,
                other_before_sum: vec![0.0; others.len()],
                other_after_sum: vec![0.0; others.len()],
            };
            for (k, &i) in members.iter().enumerate() {
                pair.target_before_sum += before[fi][[i, to]];
                pair.target_after_sum += after[fi][[k, to]];
                for (o, &of) in others.iter().enumerate() {
                    let own = dataset.labels(of)[i];
                    pair.other_before_sum[o] += before[of][[i, own]];
                    pair.other_after_sum[o] += after[of][[k, own]];
                }
            }
            pairs.push(pair);
        }
    }
    Ok(summarise(factor, dataset, &others, pairs, skipped))
}

fn summarise(
    factor: &str,
    dataset: &LabeledDataset,
    others: &[usize],
    pairs: Vec<PairBreakdown>,
    skipped_pairs: usize,
) -> ManipulationReport {
    let instances: usize = pairs.iter().map(|p| p.count).sum();
    let n = instances.max(1) as f64;
    let target_before = pairs.iter().map(|p| p.target_before_sum).sum::<f64>() / n;
    let target_after = pairs.iter().map(|p| p.target_after_sum).sum::<f64>() / n;
    let others = others
        .iter()
        .enumerate()
        .map(|(o, &of)| {
            let before = pairs.iter().map(|p| p.other_before_sum[o]).sum::<f64>() / n;
            let after = pairs.iter().map(|p| p.other_after_sum[o]).sum::<f64>() / n;
            OtherFactorSummary {
                factor: dataset.factors()[of].name.clone(),
                before,
                after,
                delta: after - before,
            }
        })
        .collect();
    ManipulationReport {
        factor: factor.to_string(),
        instances,
        skipped_pairs,
        target_before,
        target_after,
        delta_target: target_after - target_before,
        others,
        pairs,
    }
}

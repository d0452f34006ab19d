//! Encoding to (partial) latent codes and mean-shift factor manipulation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::data::{format_f64, LabeledDataset};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::priors::{PriorSpec, Regime};

#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub z: Vec<f64>,
    /// One slice per prior factor, in partition order.
    pub partial: Vec<Vec<f64>>,
}

/// `z = f^-1(x)` plus its partial codes.
pub fn encode(model: &FlowModel, prior: &PriorSpec, x: &[f64]) -> Result<Encoding> {
    let (z, _) = model.inverse(x)?;
    let part = prior.partition();
    let partial = (0..part.len()).map(|f| z[part.range(f)].to_vec()).collect();
    Ok(Encoding { z, partial })
}

pub fn decode(model: &FlowModel, z: &[f64]) -> Result<Vec<f64>> {
    model.forward(z)
}

/// Codes for every row of `x`.
pub fn encode_batch(model: &FlowModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(model.inverse_batch(x)?.0)
}

/// Empirical class means of encoded codes for one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeanTable {
    pub factor: String,
    /// Latent dimensions the means live on: the factor's partial code for a
    /// factorial model, every dimension otherwise.
    pub span: Range<usize>,
    pub means: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl ClassMeanTable {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.means[c].is_none()).collect()
    }

    pub fn mean(&self, class: usize) -> Result<&[f64]> {
        self.means
            .get(class)
            .and_then(|m| m.as_deref())
            .ok_or_else(|| Error::MissingClass {
                factor: self.factor.clone(),
                class,
            })
    }

    /// Full-length latent shift `mu_to - mu_from`, zero outside `span`.
    pub fn shift(&self, dim: usize, from: usize, to: usize) -> Result<Vec<f64>> {
        let a = self.mean(from)?;
        let b = self.mean(to)?;
        let mut delta = vec![0.0; dim];
        for (k, d) in self.span.clone().enumerate() {
            delta[d] = b[k] - a[k];
        }
        Ok(delta)
    }

    /// Class means taken from a trained prior instead of the data. Only
    /// meaningful for discriminative and factorial priors.
    pub fn from_prior(prior: &PriorSpec, factor: &str) -> Result<Self> {
        if prior.regime() == Regime::Standard {
            return Err(Error::InvalidConfig("a standard prior has no class means".into()));
        }
        let f = prior
            .partition()
            .index_of(factor)
            .ok_or_else(|| Error::UnknownFactor(factor.to_string()))?;
        let m = &prior.means()[f];
        Ok(Self {
            factor: factor.to_string(),
            span: prior.partition().range(f),
            means: (0..m.classes).map(|c| Some(m.mean(c).to_vec())).collect(),
            counts: vec![0; m.classes],
        })
    }
}

/// Latent dimensions a manipulation of `factor` acts on for this prior.
pub fn factor_span(prior: &PriorSpec, factor: &str) -> Range<usize> {
    match (prior.regime(), prior.partition().index_of(factor)) {
        (Regime::Factorial, Some(f)) => prior.partition().range(f),
        _ => 0..prior.dim(),
    }
}

pub fn class_means_from_codes(
    codes: ArrayView2<f64>,
    dataset: &LabeledDataset,
    factor: &str,
    span: Range<usize>,
) -> Result<ClassMeanTable> {
    let fi = dataset.factor_index(factor)?;
    let classes = dataset.factors()[fi].classes;
    let width = span.len();
    let mut sums = vec![vec![0.0; width]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &label) in dataset.labels(fi).iter().enumerate() {
        counts[label] += 1;
        for (k, d) in span.clone().enumerate() {
            sums[label][k] += codes[[i, d]];
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    Ok(ClassMeanTable {
        factor: factor.to_string(),
        span,
        means,
        counts,
    })
}

/// Arithmetic mean of the encoded codes of each class of `factor`.
pub fn class_means(
    model: &FlowModel,
    prior: &PriorSpec,
    dataset: &LabeledDataset,
    factor: &str,
) -> Result<ClassMeanTable> {
    let codes = encode_batch(model, dataset.features())?;
    class_means_from_codes(codes.view(), dataset, factor, factor_span(prior, factor))
}

/// `x' = f(f^-1(x) + mu_to - mu_from)`.
pub fn manipulate(model: &FlowModel, means: &ClassMeanTable, x: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    Ok(manipulate_batch(model, means, x.view(), from, to)?.into_raw_vec_and_offset().0)
}

pub fn manipulate_batch(
    model: &FlowModel,
    means: &ClassMeanTable,
    x: ArrayView2<f64>,
    from: usize,
    to: usize,
) -> Result<Array2<f64>> {
    let z = encode_batch(model, x)?;
    manipulate_codes(model, means, z, from, to)
}

/// `z + mu_to - mu_from`, with the shift confined to the table's span. Every
/// coordinate outside the span is returned bit-for-bit unchanged.
pub fn shift_codes(means: &ClassMeanTable, mut z: Array2<f64>, from: usize, to: usize) -> Result<Array2<f64>> {
    if z.ncols() < means.span.end {
        return Err(Error::DimensionMismatch {
            expected: means.span.end,
            got: z.ncols(),
        });
    }
    let src = means.mean(from)?;
    let dst = means.mean(to)?;
    for mut row in z.axis_iter_mut(Axis(0)) {
        for (k, d) in means.span.clone().enumerate() {
            row[d] += dst[k] - src[k];
        }
    }
    Ok(z)
}

/// Shift already-encoded codes and decode them.
pub fn manipulate_codes(
    model: &FlowModel,
    means: &ClassMeanTable,
    z: Array2<f64>,
    from: usize,
    to: usize,
) -> Result<Array2<f64>> {
    let shifted = shift_codes(means, z, from, to)?;
    model.forward_batch(shifted.view())
}

/// Writes the codes of every sample:
///
/// ```text
/// # <provenance line>            (optional)
/// # partition=<name:start..end,...>
/// id,<label columns>,z_0,...,z_{D-1}
/// ```
///
/// Values use 17 significant digits.
pub fn export_codes(
    model: &FlowModel,
    prior: &PriorSpec,
    dataset: &LabeledDataset,
    path: &Path,
    provenance: Option<&str>,
) -> Result<()> {
    let codes = if dataset.is_empty() {
        Array2::zeros((0, model.dim()))
    } else {
        encode_batch(model, dataset.features())?
    };
    write_codes(path, prior, dataset, codes.view(), provenance)
}

pub fn write_codes(
    path: &Path,
    prior: &PriorSpec,
    dataset: &LabeledDataset,
    codes: ArrayView2<f64>,
    provenance: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some(p) = provenance {
        writeln!(out, "# {p}")?;
    }
    let part = prior.partition();
    let ranges: Vec<String> = (0..part.len())
        .map(|f| {
            let r = part.range(f);
            format!("{}:{}..{}", part.names()[f], r.start, r.end)
        })
        .collect();
    writeln!(out, "# partition={}", ranges.join(","))?;
    let mut header = vec!["id".to_string()];
    header.extend(dataset.factors().iter().map(|f| f.name.clone()));
    header.extend((0..codes.ncols()).map(|d| format!("z_{d}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in codes.axis_iter(Axis(0)).enumerate() {
        let mut fields = vec![dataset.ids()[i].to_string()];
        fields.extend(dataset.sample_labels(i).iter().map(|l| l.to_string()));
        fields.extend(row.iter().map(|v| format_f64(*v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    pub factor_names: Vec<String>,
    /// `(name, range)` per prior factor.
    pub partition: Vec<(String, Range<usize>)>,
    pub ids: Vec<u64>,
    pub labels: Vec<Vec<usize>>,
    pub codes: Array2<f64>,
}

impl CodeTable {
    pub fn partial(&self, factor: usize) -> ArrayView2<'_, f64> {
        let r = self.partition[factor].1.clone();
        self.codes.slice(ndarray::s![.., r])
    }
}

pub fn read_codes(path: &Path) -> Result<CodeTable> {
    let reader = BufReader::new(File::open(path)?);
    let bad = |row: usize, token: &str| Error::Parse {
        path: path.to_path_buf(),
        row,
        token: token.to_string(),
    };
    let mut partition = Vec::new();
    let mut header: Option<Vec<String>> = None;
    let mut ids = Vec::new();
    let mut labels: Vec<Vec<usize>> = Vec::new();
    let mut values = Vec::new();
    let mut n_factors = 0;
    let mut dim = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let row = k + 1;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(spec) = comment.trim().strip_prefix("partition=") {
                for item in spec.split(',').filter(|s| !s.is_empty()) {
                    let (name, range) = item.split_once(':').ok_or_else(|| bad(row, item))?;
                    let (a, b) = range.split_once("..").ok_or_else(|| bad(row, range))?;
                    let a = a.parse().map_err(|_| bad(row, a))?;
                    let b = b.parse().map_err(|_| bad(row, b))?;
                    partition.push((name.to_string(), a..b));
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match &header {
            None => {
                dim = fields.iter().filter(|f| f.starts_with("z_")).count();
                n_factors = fields.len() - 1 - dim;
                labels = vec![Vec::new(); n_factors];
                header = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(Error::RaggedRow {
                        path: path.to_path_buf(),
                        row,
                        expected: h.len(),
                        found: fields.len(),
                    });
                }
                ids.push(fields[0].parse().map_err(|_| bad(row, fields[0]))?);
                for f in 0..n_factors {
                    labels[f].push(fields[1 + f].parse().map_err(|_| bad(row, fields[1 + f]))?);
                }
                for t in &fields[1 + n_factors..] {
                    values.push(t.parse::<f64>().map_err(|_| bad(row, t))?);
                }
            }
        }
    }
    let header = header.ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: "missing header row".into(),
    })?;
    Ok(CodeTable {
        factor_names: header[1..1 + n_factors].to_vec(),
        partition,
        codes: Array2::from_shape_vec((ids.len(), dim), values).expect("row-major"),
        ids,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FactorInfo;
    use crate::flow::FlowConfig;
    use crate::priors::LatentPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn factorial_prior(dims: &[usize]) -> PriorSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let part = LatentPartition::new(["a", "b"], dims).unwrap();
        PriorSpec::factorial(part, &[2, 2], &mut rng).unwrap()
    }

    fn toy_dataset(codes: &[[f64; 2]], a: Vec<usize>) -> LabeledDataset {
        let n = codes.len();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| codes[i][j]);
        LabeledDataset::new(
            (0..n as u64).collect(),
            x,
            vec![FactorInfo::new("a", 2), FactorInfo::new("b", 2)],
            vec![a, vec![0; n]],
        )
        .unwrap()
    }

    #[test]
    fn identity_encode_slices_by_partition() {
        let model = FlowModel::identity(FlowConfig::new(4, 2, 3)).unwrap();
        let prior = factorial_prior(&[2, 2]);
        let x = [1.0, 2.0, 3.0, 4.0];
        let e = encode(&model, &prior, &x).unwrap();
        assert_eq!(e.z, x.to_vec());
        assert_eq!(e.partial, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(e.partial.concat(), e.z);
    }

    #[test]
    fn class_means_simple_cases() {
        let model = FlowModel::identity(FlowConfig::new(2, 1, 2)).unwrap();
        let prior = factorial_prior(&[1, 1]);
        // one sample per class
        let ds = toy_dataset(&[[1.0, 2.0], [3.0, -4.0]], vec![0, 1]);
        let t = class_means(&model, &prior, &ds, "a").unwrap();
        assert_eq!(t.span, 0..1);
        assert_eq!(t.mean(0).unwrap(), &[1.0]);
        assert_eq!(t.mean(1).unwrap(), &[3.0]);
        // z and -z in one class, other class empty
        let ds = toy_dataset(&[[1.5, 2.0], [-1.5, -2.0]], vec![0, 0]);
        let t = class_means(&model, &PriorSpec::standard(2), &ds, "a").unwrap();
        assert_eq!(t.span, 0..2);
        assert_eq!(t.mean(0).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.missing_classes(), vec![1]);
        assert!(matches!(t.mean(1), Err(Error::MissingClass { class: 1, .. })));
        assert_eq!(t.counts, vec![2, 0]);
    }

    #[test]
    fn identity_manipulation_shifts_factor_only() {
        let model = FlowModel::identity(FlowConfig::new(2, 2, 2)).unwrap();
        let prior = factorial_prior(&[1, 1]);
        let ds = toy_dataset(&[[0.0, 5.0], [2.5, -1.0]], vec![0, 1]);
        let t = class_means(&model, &prior, &ds, "a").unwrap();
        let x = [0.25, 0.75];
        let out = manipulate(&model, &t, &x, 0, 1).unwrap();
        assert_eq!(out, vec![0.25 + 2.5, 0.75]);
        assert_eq!(manipulate(&model, &t, &x, 1, 1).unwrap(), x.to_vec());
    }

    #[test]
    fn prior_means_table() {
        let prior = factorial_prior(&[1, 1]);
        let t = ClassMeanTable::from_prior(&prior, "b").unwrap();
        assert_eq!(t.span, 1..2);
        assert_eq!(t.mean(1).unwrap(), prior.means()[1].mean(1));
        assert!(ClassMeanTable::from_prior(&PriorSpec::standard(2), "latent").is_err());
    }

    #[test]
    fn export_round_trip_and_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = FlowModel::identity(FlowConfig::new(2, 2, 3)).unwrap();
        model.randomize(&mut rng, 0.5);
        let prior = factorial_prior(&[1, 1]);
        let ds = toy_dataset(&[[0.1, 0.2], [1.0 / 3.0, -7.0], [2.0, 2.0]], vec![0, 1, 1]);
        let p = dir.path().join("codes.csv");
        export_codes(&model, &prior, &ds, &p, Some("config_hash=abc")).unwrap();
        let table = read_codes(&p).unwrap();
        let codes = encode_batch(&model, ds.features()).unwrap();
        assert_eq!(table.ids.len(), ds.len());
        assert_eq!(table.factor_names, vec!["a", "b"]);
        assert_eq!(table.partition, vec![("a".to_string(), 0..1), ("b".to_string(), 1..2)]);
        for (a, b) in table.codes.iter().zip(codes.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(table.partial(1).column(0), codes.column(1));

        let empty = ds.select(&[]);
        let p = dir.path().join("empty.csv");
        export_codes(&model, &prior, &empty, &p, None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
        assert_eq!(read_codes(&p).unwrap().ids.len(), 0);
    }
}

//! Labelled feature matrices and their on-disk format.
//!
//! Text layout:
//!
//! ```text
//! factorial-dataset v1; D=<int>; factors=<name:count,...>
//! <id>,<label_1>,...,<label_F>,<x_0>,...,<x_{D-1}>
//! ```
//!
//! Features are written with 17 significant digits, so a save/load round trip
//! is bit-exact. Appending `; encoding=binary` to the header switches the body
//! to fixed-size little-endian records: `u64` id, `u64` per label, `f64` per
//! feature. An optional `; source=<token>` key records what produced the
//! file and is ignored on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAGIC: &str = "factorial-dataset v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorInfo {
    pub name: String,
    pub classes: usize,
}

impl FactorInfo {
    pub fn new(name: impl Into<String>, classes: usize) -> Self {
        Self {
            name: name.into(),
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<u64>,
    features: Array2<f64>,
    factors: Vec<FactorInfo>,
    /// `labels[f][i]`: class of sample `i` on factor `f`.
    labels: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Text,
    Binary,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<u64>,
        features: Array2<f64>,
        factors: Vec<FactorInfo>,
        labels: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if ids.len() != n {
            return Err(Error::InvalidConfig(format!("{} ids for {n} samples", ids.len())));
        }
        if labels.len() != factors.len() {
            return Err(Error::InvalidConfig(format!(
                "{} label columns for {} factors",
                labels.len(),
                factors.len()
            )));
        }
        for (f, (info, col)) in factors.iter().zip(&labels).enumerate() {
            if info.classes == 0 {
                return Err(Error::InvalidConfig(format!("factor `{}` has no classes", info.name)));
            }
            if factors[..f].iter().any(|o| o.name == info.name) {
                return Err(Error::InvalidConfig(format!("duplicate factor `{}`", info.name)));
            }
            if col.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "factor `{}` has {} labels for {n} samples",
                    info.name,
                    col.len()
                )));
            }
            if let Some(&label) = col.iter().find(|&&l| l >= info.classes) {
                return Err(Error::LabelOutOfRange {
                    factor: info.name.clone(),
                    label,
                    classes: info.classes,
                });
            }
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite feature value".into()));
        }
        Ok(Self {
            ids,
            features,
            factors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn factors(&self) -> &[FactorInfo] {
        &self.factors
    }

    pub fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFactor(name.to_string()))
    }

    pub fn labels(&self, factor: usize) -> &[usize] {
        &self.labels[factor]
    }

    /// All labels of sample `i`, one per factor.
    pub fn sample_labels(&self, i: usize) -> Vec<usize> {
        self.labels.iter().map(|col| col[i]).collect()
    }

    pub fn histogram(&self, factor: usize) -> Vec<usize> {
        let mut h = vec![0; self.factors[factor].classes];
        for &l in &self.labels[factor] {
            h[l] += 1;
        }
        h
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            features: self.features.select(Axis(0), indices),
            factors: self.factors.clone(),
            labels: self
                .labels
                .iter()
                .map(|col| indices.iter().map(|&i| col[i]).collect())
                .collect(),
        }
    }

    fn header(&self, encoding: Encoding, source: Option<&str>) -> String {
        let factors: Vec<String> = self
            .factors
            .iter()
            .map(|f| format!("{}:{}", f.name, f.classes))
            .collect();
        let mut h = format!("{MAGIC}; D={}; factors={}", self.dim(), factors.join(","));
        if encoding == Encoding::Binary {
            h.push_str("; encoding=binary");
        }
        if let Some(s) = source {
            h.push_str("; source=");
            h.push_str(s);
        }
        h
    }

    pub fn save(&self, path: &Path, encoding: Encoding) -> Result<()> {
        self.save_with_source(path, encoding, None)
    }

    /// `source` must not contain `;` or a newline.
    pub fn save_with_source(&self, path: &Path, encoding: Encoding, source: Option<&str>) -> Result<()> {
        if source.is_some_and(|s| s.contains([';', '\n', '\r'])) {
            return Err(Error::InvalidConfig("dataset source tag contains a separator".into()));
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", self.header(encoding, source))?;
        match encoding {
            Encoding::Text => {
                let mut line = String::new();
                for i in 0..self.len() {
                    line.clear();
                    line.push_str(&self.ids[i].to_string());
                    for col in &self.labels {
                        line.push(',');
                        line.push_str(&col[i].to_string());
                    }
                    for v in self.features.row(i) {
                        line.push(',');
                        line.push_str(&format_f64(*v));
                    }
                    writeln!(out, "{line}")?;
                }
            }
            Encoding::Binary => {
                for i in 0..self.len() {
                    out.write_all(&self.ids[i].to_le_bytes())?;
                    for col in &self.labels {
                        out.write_all(&(col[i] as u64).to_le_bytes())?;
                    }
                    for v in self.features.row(i) {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = parse_header(path, header.trim_end_matches(['\n', '\r']))?;
        let (ids, rows, labels) = match header.encoding {
            Encoding::Text => read_text(path, reader, &header)?,
            Encoding::Binary => read_binary(path, reader, &header)?,
        };
        if ids.is_empty() {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "dataset has no samples".into(),
            });
        }
        let features = Array2::from_shape_vec((ids.len(), header.dim), rows).expect("row-major");
        Self::new(ids, features, header.factors, labels)
    }
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    dataset.save(path, Encoding::Text)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path)
}

/// Decimal text with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Header {
    dim: usize,
    factors: Vec<FactorInfo>,
    encoding: Encoding,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut parts = line.split(';').map(str::trim);
    if parts.next() != Some(MAGIC) {
        return Err(bad("missing `factorial-dataset v1` tag"));
    }
    let mut dim = None;
    let mut factors = None;
    let mut encoding = Encoding::Text;
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match key.trim() {
            "D" => dim = Some(value.trim().parse::<usize>().map_err(|_| bad("D is not an integer"))?),
            "factors" => {
                let mut list = Vec::new();
                for item in value.split(',').filter(|s| !s.trim().is_empty()) {
                    let (name, count) = item.split_once(':').ok_or_else(|| bad("factor must be name:count"))?;
                    let count = count
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| bad("class count is not an integer"))?;
                    if count == 0 {
                        return Err(bad("factor with zero classes"));
                    }
                    list.push(FactorInfo::new(name.trim(), count));
                }
                factors = Some(list);
            }
            "encoding" => {
                encoding = match value.trim() {
                    "binary" => Encoding::Binary,
                    "text" => Encoding::Text,
                    _ => return Err(bad("unknown encoding")),
                }
            }
            "source" => {}
            other => return Err(bad(&format!("unknown key `{other}`"))),
        }
    }
    let dim = dim.ok_or_else(|| bad("missing D"))?;
    if dim == 0 {
        return Err(bad("D must be positive"));
    }
    Ok(Header {
        dim,
        factors: factors.ok_or_else(|| bad("missing factors"))?,
        encoding,
    })
}

type Body = (Vec<u64>, Vec<f64>, Vec<Vec<usize>>);

fn read_text(path: &Path, reader: impl BufRead, h: &Header) -> Result<Body> {
    let nf = h.factors.len();
    let expected = 1 + nf + h.dim;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = vec![Vec::new(); nf];
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let row = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row,
                expected,
                found: fields.len(),
            });
        }
        let parse_err = |token: &str| Error::Parse {
            path: path.to_path_buf(),
            row,
            token: token.to_string(),
        };
        ids.push(fields[0].parse::<u64>().map_err(|_| parse_err(fields[0]))?);
        for (f, info) in h.factors.iter().enumerate() {
            let token = fields[1 + f];
            let label = token.parse::<usize>().map_err(|_| parse_err(token))?;
            check_label(path, row, info, label)?;
            labels[f].push(label);
        }
        for token in &fields[1 + nf..] {
            let v = token.parse::<f64>().map_err(|_| parse_err(token))?;
            if !v.is_finite() {
                return Err(parse_err(token));
            }
            rows.push(v);
        }
    }
    Ok((ids, rows, labels))
}

fn read_binary(path: &Path, mut reader: impl Read, h: &Header) -> Result<Body> {
    let nf = h.factors.len();
    let record = 8 * (1 + nf + h.dim);
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() % record != 0 {
        return Err(Error::RaggedRow {
            path: path.to_path_buf(),
            row: body.len() / record + 2,
            expected: record,
            found: body.len() % record,
        });
    }
    let word = |b: &[u8]| -> [u8; 8] { b.try_into().expect("8 bytes") };
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = vec![Vec::new(); nf];
    for (k, rec) in body.chunks_exact(record).enumerate() {
        let row = k + 2;
        let mut words = rec.chunks_exact(8);
        ids.push(u64::from_le_bytes(word(words.next().expect("id"))));
        for (f, info) in h.factors.iter().enumerate() {
            let label = u64::from_le_bytes(word(words.next().expect("label"))) as usize;
            check_label(path, row, info, label)?;
            labels[f].push(label);
        }
        for w in words {
            let v = f64::from_le_bytes(word(w));
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    token: v.to_string(),
                });
            }
            rows.push(v);
        }
    }
    Ok((ids, rows, labels))
}

fn check_label(path: &Path, row: usize, info: &FactorInfo, label: usize) -> Result<()> {
    if label >= info.classes {
        return Err(Error::FileLabelOutOfRange {
            path: PathBuf::from(path),
            row,
            factor: info.name.clone(),
            label,
            classes: info.classes,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(
            vec![7, 8],
            Array2::from_shape_vec((2, 3), vec![0.1, -2.5e-300, 1.0 / 3.0, 4.0, 5.5, f64::MAX]).unwrap(),
            vec![FactorInfo::new("phone", 3), FactorInfo::new("speaker", 2)],
            vec![vec![0, 2], vec![1, 0]],
        )
        .unwrap()
    }

    #[test]
    fn text_and_binary_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        for enc in [Encoding::Text, Encoding::Binary] {
            let p = dir.path().join(format!("{enc:?}.txt"));
            ds.save(&p, enc).unwrap();
            let back = LabeledDataset::load(&p).unwrap();
            assert_eq!(back.ids(), ds.ids());
            for (a, b) in back.features().iter().zip(ds.features().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.txt");
        fs::write(&p, "factorial-dataset v1; D=2; factors=a:2\n0,1,0.5,-0.5\n").unwrap();
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(0), &[1]);
    }

    #[test]
    fn source_tag_is_written_and_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tagged.txt");
        let ds = tiny();
        ds.save_with_source(&p, Encoding::Text, Some("abc123")).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().ends_with("; source=abc123"));
        assert_eq!(load_dataset(&p).unwrap(), ds);
        assert!(ds.save_with_source(&p, Encoding::Text, Some("a;b")).is_err());
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");

        fs::write(&p, "factorial-dataset v2; D=2; factors=a:2\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::MalformedHeader { .. })));

        fs::write(&p, "factorial-dataset v1; D=2; factors=a:2\n0,1,0.5,-0.5\n1,5,0.5,0.1\n").unwrap();
        match load_dataset(&p) {
            Err(Error::FileLabelOutOfRange { row, label, .. }) => assert_eq!((row, label), (3, 5)),
            other => panic!("{other:?}"),
        }

        fs::write(&p, "factorial-dataset v1; D=2; factors=a:2\n0,1,0.5\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::RaggedRow { row: 2, .. })));

        fs::write(&p, "factorial-dataset v1; D=2; factors=a:2\n0,1,0.5,abc\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_bad_construction() {
        let f = Array2::zeros((1, 2));
        assert!(LabeledDataset::new(vec![0], f.clone(), vec![FactorInfo::new("a", 2)], vec![vec![2]]).is_err());
        let mut nan = f.clone();
        nan[[0, 0]] = f64::NAN;
        assert!(LabeledDataset::new(vec![0], nan, vec![FactorInfo::new("a", 2)], vec![vec![0]]).is_err());
    }
}

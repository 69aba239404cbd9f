//! Class-indexed CSV files (`"class","field",...`) and dataset preparation.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use latclass_core::corpus::{
    infer_num_labels, label_counts, label_prior, split_dev, subsample_per_class, CorpusError, DatasetSplit,
    EncodedDocument, RawDocument, Vocabulary,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Corpus(CorpusError),
}

impl From<CorpusError> for DataError {
    fn from(e: CorpusError) -> Self {
        DataError::Corpus(e)
    }
}

fn unescape(field: &str) -> String {
    field.replace("\\n", " ")
}

/// Parses records whose first field is a 1-based class index and whose
/// remaining fields are joined with single spaces.
pub fn parse_csv<R: Read>(reader: R, has_header: bool) -> Result<Vec<RawDocument>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| DataError::Parse { line, message };
        if rec.len() < 2 {
            return Err(parse_err(format!("expected a class and at least one text field, found {} field(s)", rec.len())));
        }
        let class: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("class index `{}` is not a non-negative integer", &rec[0])))?;
        if class < 1 {
            return Err(parse_err("class indices start at 1".into()));
        }
        let text = rec.iter().skip(1).map(unescape).collect::<Vec<_>>().join(" ");
        out.push(RawDocument { label: class - 1, text });
    }
    Ok(out)
}

pub fn load_csv(path: &Path, has_header: bool) -> Result<Vec<RawDocument>, DataError> {
    let f = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(f, has_header)
}

/// Writes documents as `"label+1","text"` records without a header.
pub fn write_csv<W: Write>(writer: W, docs: &[RawDocument]) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(writer);
    for d in docs {
        w.write_record([(d.label + 1).to_string(), d.text.clone()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_csv(path: &Path, docs: &[RawDocument]) -> Result<(), DataError> {
    let f = File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(f, docs)
}

/// Raw train pool and test set of one dataset.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: String,
    pub train: Vec<RawDocument>,
    pub test: Vec<RawDocument>,
}

impl RawDataset {
    /// Reads `train.csv` and `test.csv` from `dir`.
    pub fn load_dir(dir: &Path, has_header: bool) -> Result<Self, DataError> {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(RawDataset {
            name,
            train: load_csv(&dir.join("train.csv"), has_header)?,
            test: load_csv(&dir.join("test.csv"), has_header)?,
        })
    }
}

/// Everything a training leg needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub label_prior: Vec<f64>,
    /// `(requested, used)` when the dev set fell back to 10% of the pool.
    pub dev_fallback: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    /// `None` keeps the whole training pool.
    pub n_per_class: Option<usize>,
    pub dev_size: usize,
    pub min_count: usize,
    pub seed: u64,
    pub smooth_prior: bool,
}

/// Dev split, per-class subsample, vocabulary from the subsample only, and
/// encoding of every split.
pub fn prepare(data: &RawDataset, opts: PrepareOptions) -> Result<Prepared, DataError> {
    let num_labels = infer_num_labels(&data.train)?;
    let dev = split_dev(&data.train, opts.dev_size, opts.seed);
    if let Some((requested, used)) = dev.fallback {
        log::warn!("training pool too small for a dev set of {requested}; using {used} (10%)");
    }
    let train_raw = match opts.n_per_class {
        Some(n) => subsample_per_class(&dev.train_pool, num_labels, n, opts.seed)?,
        None => dev.train_pool.clone(),
    };
    let texts: Vec<&str> = train_raw.iter().map(|d| d.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, opts.min_count)?;
    let encode = |docs: &[RawDocument]| -> Vec<EncodedDocument> {
        docs.iter()
            .filter(|d| d.label < num_labels)
            .map(|d| EncodedDocument::encode(d, &vocab))
            .collect()
    };
    let train = encode(&train_raw);
    let counts = label_counts(&train, num_labels);
    let prior = label_prior(&train, num_labels, opts.smooth_prior);
    Ok(Prepared {
        split: DatasetSplit {
            dev: encode(&dev.dev),
            test: encode(&data.test),
            train,
            num_labels,
            label_counts: counts,
        },
        vocab,
        label_prior: prior,
        dev_fallback: dev.fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_fields_and_shifts_labels() {
        let docs = parse_csv("\"3\",\"title\",\"body\"\n".as_bytes(), false).unwrap();
        assert_eq!(docs, vec![RawDocument { label: 2, text: "title body".into() }]);
    }

    #[test]
    fn unescapes_quotes_and_newlines() {
        let docs = parse_csv("\"1\",\"a \"\"quoted\"\" word\"\n\"2\",\"x\\ny\"\n".as_bytes(), false).unwrap();
        assert_eq!(docs[0].text, "a \"quoted\" word");
        assert_eq!(docs[1].text, "x y");
    }

    #[test]
    fn bad_class_reports_line() {
        let err = parse_csv("\"1\",\"ok\"\n\"x\",\"bad\"\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let err = parse_csv("\"0\",\"zero\"\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn header_is_skipped_and_empty_input_is_empty() {
        let docs = parse_csv("class,text\n\"2\",\"b\"\n".as_bytes(), true).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(parse_csv("".as_bytes(), false).unwrap().is_empty());
    }

    #[test]
    fn write_then_read_round_trips() {
        let docs = vec![
            RawDocument { label: 0, text: "say \"hi\", ok".into() },
            RawDocument { label: 3, text: "plain".into() },
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &docs).unwrap();
        assert_eq!(parse_csv(buf.as_slice(), false).unwrap(), docs);
    }
}

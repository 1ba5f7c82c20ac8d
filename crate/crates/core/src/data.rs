//! Dataset ingestion, protected-group construction and synthetic data.
//!
//! Input follows the LETOR / SVMLight convention, one item per line:
//!
//! ```text
//! <label> qid:<id> <fid>:<value> <fid>:<value> ... [# comment]
//! ```
//!
//! Feature ids are 1-based and must increase along a line; absent features
//! are zero. Lines with the same `qid` form one query, in first-seen order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{position_bias, GroupAssignment, PositionBias};
use crate::spo::Problem;

pub const DATASET_FORMAT: &str = "owa-rank-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One query as read from disk: relevance labels and a dense feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RawQuery {
    pub qid: String,
    pub relevance: Vec<f64>,
    /// `n x d`, one row per item.
    pub features: Array2<f64>,
}

impl RawQuery {
    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }
}

struct SparseQuery {
    qid: String,
    relevance: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

/// Parses LETOR text. The feature dimension is the largest feature id seen.
pub fn parse_letor<R: Read>(reader: R) -> Result<Vec<RawQuery>> {
    parse_letor_impl(reader, None)
}

/// Parses LETOR text with a fixed feature dimension; larger ids are errors.
pub fn parse_letor_with_dim<R: Read>(reader: R, num_features: usize) -> Result<Vec<RawQuery>> {
    parse_letor_impl(reader, Some(num_features))
}

fn parse_letor_impl<R: Read>(reader: R, fixed_dim: Option<usize>) -> Result<Vec<RawQuery>> {
    let mut queries: Vec<SparseQuery> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut max_fid = 0usize;

    for (line_no, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line_no = line_no + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("bad label {label_tok:?}")))?;
        if !label.is_finite() || label < 0.0 {
            return Err(err(format!("relevance must be finite and >= 0, got {label}")));
        }
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .ok_or_else(|| err("expected qid:<id> after the label".into()))?;
        if qid.is_empty() {
            return Err(err("empty qid".into()));
        }

        let mut row = Vec::new();
        let mut last_fid = 0usize;
        for tok in tokens {
            let (fid, value) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("bad feature token {tok:?}")))?;
            let fid: usize = fid
                .parse()
                .map_err(|_| err(format!("bad feature id in {tok:?}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| err(format!("bad feature value in {tok:?}")))?;
            if fid == 0 {
                return Err(err("feature ids are 1-based".into()));
            }
            if fid <= last_fid {
                return Err(err(format!(
                    "feature id {fid} repeated or out of order after {last_fid}"
                )));
            }
            if let Some(d) = fixed_dim {
                if fid > d {
                    return Err(err(format!("feature id {fid} exceeds dimension {d}")));
                }
            }
            last_fid = fid;
            max_fid = max_fid.max(fid);
            row.push((fid - 1, value));
        }

        let slot = *index.entry(qid.to_string()).or_insert_with(|| {
            queries.push(SparseQuery {
                qid: qid.to_string(),
                relevance: Vec::new(),
                rows: Vec::new(),
            });
            queries.len() - 1
        });
        queries[slot].relevance.push(label);
        queries[slot].rows.push(row);
    }

    let dim = fixed_dim.unwrap_or(max_fid);
    Ok(queries
        .into_iter()
        .map(|q| {
            let mut features = Array2::zeros((q.rows.len(), dim));
            for (i, row) in q.rows.iter().enumerate() {
                for &(j, v) in row {
                    features[(i, j)] = v;
                }
            }
            RawQuery {
                qid: q.qid,
                relevance: q.relevance,
                features,
            }
        })
        .collect())
}

/// Writes queries in LETOR text form (dense, every feature listed).
pub fn write_letor<'a, W: Write>(
    mut writer: W,
    queries: impl IntoIterator<Item = (&'a str, &'a [f64], &'a Array2<f64>)>,
) -> Result<()> {
    for (qid, relevance, features) in queries {
        for (label, row) in relevance.iter().zip(features.rows()) {
            write!(writer, "{label} qid:{qid}")?;
            for (j, v) in row.iter().enumerate() {
                write!(writer, " {}:{v}", j + 1)?;
            }
            writeln!(writer)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Corpus-level quantile cut points of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupThresholds {
    /// Zero-based feature column.
    pub feature: usize,
    /// `m - 1` ascending cut points at the `k / m` quantiles.
    pub cuts: Vec<f64>,
}

impl GroupThresholds {
    pub fn fit(records: &[RawQuery], feature: usize, num_groups: usize) -> Result<Self> {
        if num_groups < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 groups, got {num_groups}"
            )));
        }
        let mut values = Vec::new();
        for r in records {
            if feature >= r.features.ncols() {
                return Err(Error::InvalidParameter(format!(
                    "group feature {} out of range for {} features",
                    feature + 1,
                    r.features.ncols()
                )));
            }
            values.extend(r.features.column(feature).iter().copied());
        }
        if values.is_empty() {
            return Err(Error::InvalidDataset("no items to compute quantiles".into()));
        }
        values.sort_by(f64::total_cmp);
        if values[0] == values[values.len() - 1] {
            return Err(Error::InvalidParameter(format!(
                "feature {} is constant over the corpus; choose another group feature",
                feature + 1
            )));
        }
        let cuts = (1..num_groups)
            .map(|k| quantile_sorted(&values, k as f64 / num_groups as f64))
            .collect();
        Ok(Self { feature, cuts })
    }

    pub fn num_groups(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Bucket of a value; values equal to a cut go to the lower bucket.
    pub fn bucket(&self, value: f64) -> usize {
        self.cuts.iter().filter(|&&c| value > c).count()
    }

    pub fn assign(&self, features: &Array2<f64>) -> Result<GroupAssignment> {
        if self.feature >= features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.feature + 1,
                found: features.ncols(),
            });
        }
        let labels = features
            .column(self.feature)
            .iter()
            .map(|&v| self.bucket(v))
            .collect();
        GroupAssignment::new(labels, self.num_groups())
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Groups every item by corpus-level quantile bucket of `feature`.
pub fn assign_groups(
    records: &[RawQuery],
    feature: usize,
    num_groups: usize,
) -> Result<Vec<GroupAssignment>> {
    let thresholds = GroupThresholds::fit(records, feature, num_groups)?;
    records
        .iter()
        .map(|r| thresholds.assign(&r.features))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub records: Vec<RawQuery>,
    pub truncated: usize,
    pub dropped: usize,
}

/// Fixes every list to `n` items: longer queries keep their `n` most relevant
/// items (earlier documents win ties, original order is preserved), shorter
/// queries are dropped.
pub fn normalize_lists(records: Vec<RawQuery>, n: usize) -> Result<Normalized> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("list size must be >= 2, got {n}")));
    }
    let mut out = Vec::with_capacity(records.len());
    let (mut truncated, mut dropped) = (0, 0);
    for r in records {
        match r.len().cmp(&n) {
            std::cmp::Ordering::Less => dropped += 1,
            std::cmp::Ordering::Equal => out.push(r),
            std::cmp::Ordering::Greater => {
                truncated += 1;
                let mut by_relevance: Vec<usize> = (0..r.len()).collect();
                by_relevance
                    .sort_by(|&a, &b| r.relevance[b].total_cmp(&r.relevance[a]).then(a.cmp(&b)));
                let mut keep = by_relevance[..n].to_vec();
                keep.sort_unstable();
                out.push(RawQuery {
                    qid: r.qid,
                    relevance: keep.iter().map(|&i| r.relevance[i]).collect(),
                    features: r.features.select(Axis(0), &keep),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no query has at least {n} items"
        )));
    }
    Ok(Normalized {
        records: out,
        truncated,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub qid: String,
    pub features: Array2<f64>,
    pub groups: GroupAssignment,
    pub relevance: Vec<f64>,
}

impl QuerySample {
    pub fn new(
        qid: String,
        features: Array2<f64>,
        groups: GroupAssignment,
        relevance: Vec<f64>,
    ) -> Result<Self> {
        let n = relevance.len();
        if n == 0 || features.nrows() != n || groups.num_items() != n {
            return Err(Error::InvalidDataset(format!(
                "query {qid}: inconsistent item counts"
            )));
        }
        if relevance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDataset(format!(
                "query {qid}: relevance must be finite and >= 0"
            )));
        }
        Ok(Self {
            qid,
            features,
            groups,
            relevance,
        })
    }

    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }

    pub fn problem<'a>(&'a self, bias: &'a PositionBias) -> Problem<'a> {
        Problem {
            qid: &self.qid,
            relevance: &self.relevance,
            groups: &self.groups,
            bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QuerySample>,
    pub num_features: usize,
    pub list_size: usize,
    pub num_groups: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(samples: Vec<QuerySample>, num_groups: usize, provenance: String) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidDataset("no queries".into()))?;
        let (n, d) = (first.len(), first.features.ncols());
        for s in &samples {
            if s.len() != n || s.features.ncols() != d {
                return Err(Error::InvalidDataset(format!(
                    "query {} has shape {}x{}, expected {n}x{d}",
                    s.qid,
                    s.len(),
                    s.features.ncols()
                )));
            }
            if s.groups.num_groups() != num_groups {
                return Err(Error::InvalidDataset(format!(
                    "query {} declares {} groups, expected {num_groups}",
                    s.qid,
                    s.groups.num_groups()
                )));
            }
        }
        Ok(Self {
            samples,
            num_features: d,
            list_size: n,
            num_groups,
            provenance,
        })
    }

    /// Builds a dataset from fixed-size records and corpus thresholds.
    pub fn from_records(
        records: Vec<RawQuery>,
        thresholds: &GroupThresholds,
        provenance: String,
    ) -> Result<Self> {
        let samples = records
            .into_iter()
            .map(|r| {
                let groups = thresholds.assign(&r.features)?;
                QuerySample::new(r.qid, r.features, groups, r.relevance)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, thresholds.num_groups(), provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bias(&self) -> PositionBias {
        position_bias(self.list_size).expect("list size is positive")
    }

    fn subset(&self, indices: &[usize], tag: &str) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidDataset(format!("{tag} split is empty")));
        }
        Ok(Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_features: self.num_features,
            list_size: self.list_size,
            num_groups: self.num_groups,
            provenance: format!("{} [{tag}]", self.provenance),
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            num_features: self.num_features,
            list_size: self.list_size,
            num_groups: self.num_groups,
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut writer, &header)?;
        writeln!(writer)?;
        for s in &self.samples {
            let rec = SampleRecord {
                qid: s.qid.clone(),
                relevance: s.relevance.clone(),
                groups: s.groups.labels().to_vec(),
                features: s.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writeln!(writer)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InvalidDataset("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::InvalidDataset(format!(
                "unexpected format tag {:?}",
                header.format
            )));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "dataset".into(),
                found: header.version,
                expected: DATASET_VERSION,
            });
        }
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            let n = rec.features.len();
            let flat: Vec<f64> = rec.features.into_iter().flatten().collect();
            let features = Array2::from_shape_vec((n, header.num_features), flat)
                .map_err(|e| Error::InvalidDataset(e.to_string()))?;
            let groups = GroupAssignment::new(rec.groups, header.num_groups)?;
            samples.push(QuerySample::new(rec.qid, features, groups, rec.relevance)?);
        }
        Self::new(samples, header.num_groups, header.provenance)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    num_features: usize,
    list_size: usize,
    num_groups: usize,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    qid: String,
    relevance: Vec<f64>,
    groups: Vec<usize>,
    features: Vec<Vec<f64>>,
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_queries: usize,
    pub list_size: usize,
    pub num_features: usize,
    pub num_groups: usize,
    pub noise: f64,
    pub seed: u64,
    /// Zero-based column whose quantiles define the groups.
    pub group_feature: usize,
    /// Scale of the linear predictor inside the softplus. Small values keep
    /// relevance gaps comparable to exposure gaps, so `lambda` has a visible
    /// effect on the learned policies.
    pub signal: f64,
    /// Weight of the group column in the hidden predictor, relative to the
    /// typical weight of the other columns. Positive values favour the
    /// upper-quantile groups, which makes relevance-only rankings unfair.
    pub group_effect: f64,
}

impl SynthSpec {
    pub fn new(num_queries: usize, list_size: usize, num_features: usize, num_groups: usize) -> Self {
        Self {
            num_queries,
            list_size,
            num_features,
            num_groups,
            noise: 0.0,
            seed: 0,
            group_feature: 0,
            signal: 0.15,
            group_effect: 2.0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_signal(mut self, signal: f64) -> Self {
        self.signal = signal;
        self
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Raw synthetic queries: i.i.d. standard normal features and
/// `relevance = softplus(signal * x.h + noise * eps)` for a hidden unit-norm `h`.
pub fn synthesize_records(spec: &SynthSpec) -> Result<Vec<RawQuery>> {
    if spec.num_queries == 0 || spec.list_size < 2 || spec.num_features == 0 {
        return Err(Error::InvalidParameter(
            "synthetic data needs queries > 0, list size >= 2 and features > 0".into(),
        ));
    }
    if spec.group_feature >= spec.num_features {
        return Err(Error::InvalidParameter(format!(
            "group feature {} out of range for {} features",
            spec.group_feature + 1,
            spec.num_features
        )));
    }
    if !(spec.noise >= 0.0 && spec.signal.is_finite() && spec.group_effect.is_finite()) {
        return Err(Error::InvalidParameter("noise must be >= 0, signal finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.num_features;
    let mut hidden: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    hidden[spec.group_feature] = spec.group_effect;
    let norm = hidden.iter().map(|h| h * h).sum::<f64>().sqrt();
    for h in hidden.iter_mut() {
        *h /= norm;
    }

    let width = (spec.num_queries - 1).to_string().len();
    Ok((0..spec.num_queries)
        .map(|q| {
            let features = Array2::from_shape_simple_fn((spec.list_size, d), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            let relevance = features
                .rows()
                .into_iter()
                .map(|row| {
                    let z: f64 = row.iter().zip(&hidden).map(|(x, h)| x * h).sum();
                    let eps: f64 = if spec.noise > 0.0 {
                        rng.sample(StandardNormal)
                    } else {
                        0.0
                    };
                    softplus(spec.signal * z + spec.noise * eps)
                })
                .collect();
            RawQuery {
                qid: format!("{q:0width$}"),
                relevance,
                features,
            }
        })
        .collect())
}

/// Synthetic dataset with groups from corpus quantiles of the group column.
pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    let records = synthesize_records(spec)?;
    let thresholds = GroupThresholds::fit(&records, spec.group_feature, spec.num_groups)?;
    Dataset::from_records(
        records,
        &thresholds,
        format!(
            "synthetic(queries={}, n={}, d={}, m={}, noise={}, seed={}, group_feature={})",
            spec.num_queries,
            spec.list_size,
            spec.num_features,
            spec.num_groups,
            spec.noise,
            spec.seed,
            spec.group_feature + 1
        ),
    )
}

/// Seeded shuffle of the queries, partitioned into train / validation / test.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidParameter(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let total = dataset.len();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * total as f64).round() as usize;
    let n_valid = ((fractions[1] * total as f64).round() as usize).min(total - n_train);
    let (train, rest) = order.split_at(n_train);
    let (valid, test) = rest.split_at(n_valid);
    Ok((
        dataset.subset(train, "train")?,
        dataset.subset(valid, "valid")?,
        dataset.subset(test, "test")?,
    ))
}

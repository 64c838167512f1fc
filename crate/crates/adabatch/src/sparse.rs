//! Sparse examples, datasets, text-format i/o, and per-feature activity statistics.
//!
//! Feature vectors are stored as parallel `(index, value)` arrays with strictly
//! increasing indices. On disk the format is the usual svm-light text layout
//! (`label idx:val idx:val ...`, indices 1-based); in memory indices are 0-based.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sparse vector: sorted coordinate list with nonzero, finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVec {
    /// Builds from `(index, value)` pairs. Indices must be strictly increasing;
    /// values must be finite. Zero values are dropped.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        for &(idx, val) in pairs {
            if let Some(&prev) = indices.last() {
                if idx <= prev {
                    return Err(Error::InvalidInput(format!(
                        "indices must be strictly increasing (index {idx} after {prev})"
                    )));
                }
            }
            if !val.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite value at index {idx}"
                )));
            }
            if val != 0.0 {
                indices.push(idx);
                values.push(val);
            }
        }
        Ok(SparseVec { indices, values })
    }

    pub fn empty() -> Self {
        SparseVec { indices: Vec::new(), values: Vec::new() }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Iterates `(index, value)` pairs in increasing index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().zip(&self.values).map(|(&i, &v)| (i as usize, v))
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Dot product against a dense vector.
    pub fn dot(&self, dense: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, v) in self.iter() {
            acc += v * dense[i];
        }
        acc
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: SparseVec,
    pub label: f64,
}

/// A collection of examples with a fixed ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    dim: usize,
}

impl Dataset {
    /// Wraps examples, growing `dim` to cover every active index.
    pub fn new(examples: Vec<Example>, dim: usize) -> Self {
        let needed = examples
            .iter()
            .flat_map(|e| e.features.indices().last().map(|&i| i as usize + 1))
            .max()
            .unwrap_or(0);
        Dataset { examples, dim: dim.max(needed) }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    /// Forces the ambient dimension to at least `dim` (e.g. to align a test
    /// split with the training split).
    pub fn pad_dim(&mut self, dim: usize) {
        self.dim = self.dim.max(dim);
    }

    /// Parses svm-light text. Indices on disk are 1-based and must be strictly
    /// increasing within a line; zero values are dropped. Blank lines are
    /// skipped. Errors carry the 1-based line number.
    pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Dataset> {
        let mut examples = Vec::new();
        let mut dim = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let label_tok = tokens.next().expect("non-empty line has a first token");
            let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad label `{label_tok}`"),
            })?;
            let mut pairs: Vec<(u32, f64)> = Vec::new();
            let mut prev: Option<u32> = None;
            for tok in tokens {
                let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("expected `index:value`, got `{tok}`"),
                })?;
                let idx: u32 = idx_s.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("bad index `{idx_s}`"),
                })?;
                if idx == 0 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "indices are 1-based; found 0".into(),
                    });
                }
                let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("bad value `{val_s}`"),
                })?;
                if !val.is_finite() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("non-finite value `{val_s}`"),
                    });
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("indices must be strictly increasing ({idx} after {p})"),
                        });
                    }
                }
                prev = Some(idx);
                let zero_based = idx - 1;
                dim = dim.max(zero_based as usize + 1);
                if val != 0.0 {
                    pairs.push((zero_based, val));
                }
            }
            let features = SparseVec::from_pairs(&pairs).expect("pairs validated above");
            examples.push(Example { features, label });
        }
        Ok(Dataset { examples, dim })
    }

    pub fn parse_libsvm_path<P: AsRef<Path>>(path: P) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::parse_libsvm(std::io::BufReader::new(file))
    }

    /// Serializes to svm-light text (indices back to 1-based). Values use
    /// Rust's shortest round-trip float formatting, so parse∘write is identity.
    pub fn write_libsvm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut line = String::new();
        for ex in &self.examples {
            line.clear();
            let _ = write!(line, "{}", ex.label);
            for (i, v) in ex.features.iter() {
                let _ = write!(line, " {}:{}", i + 1, v);
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn write_libsvm_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_libsvm(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    /// Rescales every row to unit Euclidean norm; rows with empty support are
    /// left unchanged.
    pub fn normalize_rows(&mut self) {
        for ex in &mut self.examples {
            let norm = ex.features.squared_norm().sqrt();
            if norm > 0.0 {
                ex.features.scale(1.0 / norm);
            }
        }
    }

    /// Deterministic shuffled split into `(rest, held_out)` where `held_out`
    /// receives `round(fraction * n)` examples. Both halves keep this
    /// dataset's ambient dimension.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidInput(format!(
                "split fraction {fraction} outside [0, 1]"
            )));
        }
        let n = self.examples.len();
        let n_held = (fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let held: Vec<Example> = order[..n_held].iter().map(|&i| self.examples[i].clone()).collect();
        let rest: Vec<Example> = order[n_held..].iter().map(|&i| self.examples[i].clone()).collect();
        Ok((
            Dataset { examples: rest, dim: self.dim },
            Dataset { examples: held, dim: self.dim },
        ))
    }
}

/// Empirical per-coordinate activity probabilities of a dataset.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    p: Vec<f64>,
    pmin: f64,
    pmax: f64,
    sum_p: f64,
    active_dims: usize,
}

impl FeatureStats {
    /// Builds stats from known probabilities instead of counting a dataset
    /// (exact step-size formulas, synthetic targets).
    pub fn from_probabilities(p: Vec<f64>) -> Result<Self> {
        let mut pmin = f64::INFINITY;
        let mut pmax = 0.0f64;
        let mut sum_p = 0.0;
        let mut active = 0usize;
        for &pk in &p {
            if !(0.0..=1.0).contains(&pk) {
                return Err(Error::InvalidInput(format!(
                    "probability {pk} outside [0, 1]"
                )));
            }
            if pk > 0.0 {
                pmin = pmin.min(pk);
                pmax = pmax.max(pk);
                active += 1;
            }
            sum_p += pk;
        }
        if active == 0 {
            return Err(Error::InvalidInput("all probabilities are zero".into()));
        }
        Ok(FeatureStats { p, pmin, pmax, sum_p, active_dims: active })
    }

    /// Activity probability of coordinate `k` (0 outside the ambient dim).
    pub fn p(&self, k: usize) -> f64 {
        self.p.get(k).copied().unwrap_or(0.0)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    /// Minimum probability over coordinates that are active at least once.
    pub fn pmin(&self) -> f64 {
        self.pmin
    }

    pub fn pmax(&self) -> f64 {
        self.pmax
    }

    /// Expected support size: sum of all activity probabilities.
    pub fn sum_p(&self) -> f64 {
        self.sum_p
    }

    /// Number of coordinates active at least once.
    pub fn active_dims(&self) -> usize {
        self.active_dims
    }
}

/// Exact empirical activity frequencies: `p(k) = (#examples with k active) / n`.
///
/// Coordinates that never appear get `p(k) = 0` and are excluded from `pmin`.
pub fn estimate_feature_probabilities(data: &Dataset) -> Result<FeatureStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len() as f64;
    let mut counts = vec![0u64; data.dim()];
    for ex in data.examples() {
        for (i, _) in ex.features.iter() {
            counts[i] += 1;
        }
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut pmin = f64::INFINITY;
    let mut pmax = 0.0f64;
    let mut sum_p = 0.0;
    let mut active = 0usize;
    for &pk in &p {
        if pk > 0.0 {
            pmin = pmin.min(pk);
            pmax = pmax.max(pk);
            active += 1;
        }
        sum_p += pk;
    }
    if active == 0 {
        return Err(Error::InvalidInput("dataset has no active features".into()));
    }
    Ok(FeatureStats { p, pmin, pmax, sum_p, active_dims: active })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        Dataset::parse_libsvm(std::io::Cursor::new(text))
    }

    #[test]
    fn parses_basic_line() {
        let data = parse("+1 3:1 7:0.5\n").unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.dim(), 7);
        let ex = data.example(0);
        assert_eq!(ex.label, 1.0);
        let pairs: Vec<_> = ex.features.iter().collect();
        assert_eq!(pairs, vec![(2, 1.0), (6, 0.5)]);
    }

    #[test]
    fn empty_stream_gives_empty_dataset() {
        let data = parse("").unwrap();
        assert_eq!(data.len(), 0);
        assert_eq!(data.dim(), 0);
    }

    #[test]
    fn zero_values_are_dropped_but_count_for_dim() {
        let data = parse("1 2:0\n").unwrap();
        assert_eq!(data.len(), 1);
        assert!(data.example(0).features.is_empty());
        assert_eq!(data.dim(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("+1 1:1\n-1 nonsense\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_increasing_indices_rejected() {
        let err = parse("+1 3:1 3:2\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("strictly increasing"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse("+1 3:1 2:2\n").is_err());
    }

    #[test]
    fn zero_index_rejected() {
        assert!(parse("+1 0:1\n").is_err());
    }

    #[test]
    fn estimate_counts_exactly() {
        let data = parse("1 1:1 2:1\n1 1:1\n-1 3:2\n-1 3:1\n").unwrap();
        let stats = estimate_feature_probabilities(&data).unwrap();
        assert_eq!(stats.p(0), 0.5);
        assert_eq!(stats.p(1), 0.25);
        assert_eq!(stats.p(2), 0.5);
        assert_eq!(stats.pmin(), 0.25);
        assert_eq!(stats.pmax(), 0.5);
        assert_eq!(stats.active_dims(), 3);
        assert_eq!(stats.sum_p(), 1.25);
    }

    #[test]
    fn never_active_coordinate_excluded_from_pmin() {
        // Coordinate 1 (0-based) exists in the ambient dim via a dropped zero.
        let data = parse("1 1:1 2:0\n1 1:1\n").unwrap();
        let stats = estimate_feature_probabilities(&data).unwrap();
        assert_eq!(data.dim(), 2);
        assert_eq!(stats.p(1), 0.0);
        assert_eq!(stats.pmin(), 1.0);
        assert_eq!(stats.active_dims(), 1);
    }

    #[test]
    fn identical_singleton_support_gives_unit_probability() {
        let data = parse("1 1:2\n-1 1:3\n1 1:-1\n").unwrap();
        let stats = estimate_feature_probabilities(&data).unwrap();
        assert_eq!(stats.p(0), 1.0);
        assert_eq!(stats.pmin(), 1.0);
        assert_eq!(stats.pmax(), 1.0);
    }

    #[test]
    fn estimate_rejects_empty_dataset() {
        let data = parse("").unwrap();
        assert!(matches!(
            estimate_feature_probabilities(&data),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn normalize_rows_three_four_five() {
        let mut data = parse("1 1:3 2:4\n").unwrap();
        data.normalize_rows();
        let pairs: Vec<_> = data.example(0).features.iter().collect();
        assert!((pairs[0].1 - 0.6).abs() < 1e-15);
        assert!((pairs[1].1 - 0.8).abs() < 1e-15);
        assert!((data.example(0).features.squared_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_leaves_unit_and_empty_rows() {
        let mut data = parse("1 1:1\n-1 2:0\n").unwrap();
        let before = data.clone();
        data.normalize_rows();
        assert_eq!(data.example(0).features.values(), before.example(0).features.values());
        assert!(data.example(1).features.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let text: String = (0..10).map(|i| format!("{} {}:1\n", i, i + 1)).collect();
        let data = parse(&text).unwrap();
        let (a1, b1) = data.split(0.2, 9).unwrap();
        let (a2, b2) = data.split(0.2, 9).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(b1.len(), 2);
        assert_eq!(a1.len(), 8);
        assert_eq!(a1.dim(), data.dim());
        let mut labels: Vec<i64> = a1
            .examples()
            .iter()
            .chain(b1.examples())
            .map(|e| e.label as i64)
            .collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sparse_vec_rejects_disorder_and_nonfinite() {
        assert!(SparseVec::from_pairs(&[(1, 1.0), (1, 2.0)]).is_err());
        assert!(SparseVec::from_pairs(&[(2, 1.0), (1, 2.0)]).is_err());
        assert!(SparseVec::from_pairs(&[(0, f64::NAN)]).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let example = (
            proptest::collection::btree_map(0u32..50, -10.0f64..10.0, 0..8),
            -5.0f64..5.0,
        )
            .prop_map(|(m, label)| {
                let pairs: Vec<(u32, f64)> = m.into_iter().collect();
                Example { features: SparseVec::from_pairs(&pairs).unwrap(), label }
            });
        proptest::collection::vec(example, 0..12).prop_map(|ex| Dataset::new(ex, 0))
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(data in arb_dataset()) {
            let mut buf = Vec::new();
            data.write_libsvm(&mut buf).unwrap();
            let back = Dataset::parse_libsvm(std::io::Cursor::new(&buf)).unwrap();
            prop_assert_eq!(back.len(), data.len());
            for (a, b) in back.examples().iter().zip(data.examples()) {
                prop_assert_eq!(a.label.to_bits(), b.label.to_bits());
                prop_assert_eq!(a.features.indices(), b.features.indices());
                let av = a.features.values();
                let bv = b.features.values();
                prop_assert_eq!(av.len(), bv.len());
                for (x, y) in av.iter().zip(bv) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(mut data in arb_dataset()) {
            data.normalize_rows();
            for ex in data.examples() {
                if !ex.features.is_empty() {
                    prop_assert!((ex.features.squared_norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

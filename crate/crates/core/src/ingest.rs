//! C-MAPSS text-file parsing, count validation, channel selection and
//! min-max normalization.
//!
//! Each data row has 26 whitespace-separated numbers: engine id, cycle, three
//! operational settings and 21 sensor readings.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_SETTINGS: usize = 3;
pub const NUM_SENSORS: usize = 21;
pub const NUM_COLUMNS: usize = 2 + NUM_SETTINGS + NUM_SENSORS;

/// Sensor names in file column order.
pub const SENSOR_NAMES: [&str; NUM_SENSORS] = [
    "T2", "T24", "T30", "T50", "P2", "P15", "P30", "Nf", "Nc", "epr", "Ps30", "phi", "NRf",
    "NRc", "BPR", "farB", "htBleed", "Nf_dmd", "PCNfR_dmd", "W31", "W32",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetId {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl SubsetId {
    pub const ALL: [SubsetId; 4] = [Self::FD001, Self::FD002, Self::FD003, Self::FD004];

    pub fn meta(self) -> SubsetMeta {
        let (train_trajectories, test_trajectories, train_rows, test_rows, conditions, faults) =
            match self {
                Self::FD001 => (100, 100, 20631, 13096, 1, 1),
                Self::FD002 => (260, 259, 53759, 33991, 6, 1),
                Self::FD003 => (100, 100, 24720, 16596, 1, 2),
                Self::FD004 => (249, 248, 61249, 41214, 6, 2),
            };
        SubsetMeta {
            id: self,
            train_trajectories,
            test_trajectories,
            train_rows,
            test_rows,
            operating_conditions: conditions,
            fault_modes: faults,
        }
    }

    /// Default sliding-window length for the subset.
    pub fn default_window(self) -> usize {
        match self {
            Self::FD003 | Self::FD004 => 40,
            Self::FD001 | Self::FD002 => 32,
        }
    }
}

impl fmt::Display for SubsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::FD001 => "FD001",
            Self::FD002 => "FD002",
            Self::FD003 => "FD003",
            Self::FD004 => "FD004",
        };
        f.write_str(s)
    }
}

impl FromStr for SubsetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" | "1" => Ok(Self::FD001),
            "FD002" | "2" => Ok(Self::FD002),
            "FD003" | "3" => Ok(Self::FD003),
            "FD004" | "4" => Ok(Self::FD004),
            _ => Err(Error::invalid(format!("unknown subset {s:?}"))),
        }
    }
}

/// Reference trajectory and row counts of a subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMeta {
    pub id: SubsetId,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub operating_conditions: usize,
    pub fault_modes: usize,
}

impl SubsetMeta {
    pub fn expected(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.train_trajectories, self.train_rows),
            Split::Test => (self.test_trajectories, self.test_rows),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

pub fn split_path(root: &Path, subset: SubsetId, split: Split) -> PathBuf {
    root.join(format!("{}_{subset}.txt", split.prefix()))
}

pub fn rul_path(root: &Path, subset: SubsetId) -> PathBuf {
    root.join(format!("RUL_{subset}.txt"))
}

/// One engine's run, cycle-ordered and gap-free from cycle 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineTrajectory {
    pub engine_id: u32,
    pub cycles: Vec<u32>,
    pub op_settings: Vec<[f64; NUM_SETTINGS]>,
    pub sensors: Vec<[f64; NUM_SENSORS]>,
}

impl EngineTrajectory {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// `T x C` row-major feature matrix for one engine.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * channels, data.len(), "feature matrix size");
        Self {
            rows,
            channels,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Row for a 0-based index.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.channels..(r + 1) * self.channels]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.data[r * self.channels + c])
    }
}

/// Reads one split of a subset and checks the per-row layout.
pub fn parse_subset(root: &Path, subset: SubsetId, split: Split) -> Result<Vec<EngineTrajectory>> {
    let path = split_path(root, subset, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_trajectories(&text, &path)
}

/// Parses the 26-column layout. `origin` is only used in error messages.
pub fn parse_trajectories(text: &str, origin: &Path) -> Result<Vec<EngineTrajectory>> {
    let mut out: Vec<EngineTrajectory> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != NUM_COLUMNS {
            return Err(err(format!(
                "expected {NUM_COLUMNS} columns, found {}",
                tokens.len()
            )));
        }
        let engine_id = parse_index(tokens[0]).map_err(|m| err(format!("engine id: {m}")))?;
        let cycle = parse_index(tokens[1]).map_err(|m| err(format!("cycle: {m}")))?;
        let mut values = [0.0; NUM_SETTINGS + NUM_SENSORS];
        for (v, tok) in values.iter_mut().zip(&tokens[2..]) {
            *v = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("non-numeric token {tok:?}")))?;
        }

        let starts_new = out.last().is_none_or(|t| t.engine_id != engine_id);
        if starts_new {
            if !seen.insert(engine_id) {
                return Err(err(format!("engine {engine_id} appears in more than one block")));
            }
            out.push(EngineTrajectory {
                engine_id,
                cycles: Vec::new(),
                op_settings: Vec::new(),
                sensors: Vec::new(),
            });
        }
        let traj = out.last_mut().unwrap();
        let expected = traj.cycles.len() as u32 + 1;
        if cycle != expected {
            return Err(err(format!(
                "engine {engine_id}: cycle {cycle} where {expected} was expected"
            )));
        }
        traj.cycles.push(cycle);
        traj.op_settings
            .push(values[..NUM_SETTINGS].try_into().unwrap());
        traj.sensors.push(values[NUM_SETTINGS..].try_into().unwrap());
    }
    Ok(out)
}

fn parse_index(tok: &str) -> std::result::Result<u32, String> {
    if let Ok(v) = tok.parse::<u32>() {
        return Ok(v);
    }
    // Some redistributions write integer columns as floats.
    match tok.parse::<f64>() {
        Ok(f) if f.fract() == 0.0 && f >= 0.0 && f <= u32::MAX as f64 => Ok(f as u32),
        _ => Err(format!("invalid integer {tok:?}")),
    }
}

/// Writes trajectories back in the 26-column layout. `parse_trajectories`
/// recovers them exactly.
pub fn serialize_trajectories(trajectories: &[EngineTrajectory]) -> String {
    let mut s = String::new();
    for t in trajectories {
        for i in 0..t.len() {
            s.push_str(&format!("{} {}", t.engine_id, t.cycles[i]));
            for v in t.op_settings[i].iter().chain(&t.sensors[i]) {
                s.push_str(&format!(" {v:?}"));
            }
            s.push('\n');
        }
    }
    s
}

pub fn total_rows(trajectories: &[EngineTrajectory]) -> usize {
    trajectories.iter().map(EngineTrajectory::len).sum()
}

/// Compares parsed trajectory and row counts with the subset reference.
pub fn check_counts(subset: SubsetId, split: Split, trajectories: &[EngineTrajectory]) -> Result<()> {
    let (traj, rows) = subset.meta().expected(split);
    let name = format!("{subset} {split}");
    if trajectories.len() != traj {
        return Err(Error::CountMismatch {
            subset: name,
            what: "trajectories",
            expected: traj,
            found: trajectories.len(),
        });
    }
    let found = total_rows(trajectories);
    if found != rows {
        return Err(Error::CountMismatch {
            subset: name,
            what: "rows",
            expected: rows,
            found,
        });
    }
    Ok(())
}

/// Reads the true final RUL of every test engine.
pub fn parse_rul_labels(root: &Path, subset: SubsetId, test_trajectories: usize) -> Result<Vec<u32>> {
    let path = rul_path(root, subset);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_rul_text(&text, &path, test_trajectories)
}

pub fn parse_rul_text(text: &str, origin: &Path, expected: usize) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let tok = raw.trim();
        if tok.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            message,
        };
        let v: i64 = match tok.parse::<i64>() {
            Ok(v) => v,
            Err(_) => match tok.parse::<f64>() {
                Ok(f) if f.fract() == 0.0 => f as i64,
                _ => return Err(err(format!("invalid RUL value {tok:?}"))),
            },
        };
        if v < 0 {
            return Err(err(format!("negative RUL {v}")));
        }
        labels.push(v as u32);
    }
    if labels.len() != expected {
        return Err(Error::CountMismatch {
            subset: origin.display().to_string(),
            what: "RUL labels",
            expected,
            found: labels.len(),
        });
    }
    Ok(labels)
}

/// Drops the operational settings, keeping all 21 sensors in file order.
pub fn select_channels(trajectory: &EngineTrajectory) -> FeatureMatrix {
    let data = trajectory.sensors.iter().flat_map(|r| r.iter().copied()).collect();
    FeatureMatrix::new(trajectory.len(), NUM_SENSORS, data)
}

/// Per-channel min-max statistics fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Channels whose training range is empty; they normalize to 0.
    pub constant: Vec<bool>,
}

impl NormalizationStats {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Content hash used to key caches and manifests.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.min.iter().chain(&self.max) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text)?;
        if s.max.len() != s.min.len() || s.constant.len() != s.min.len() {
            return Err(Error::Serde("normalization stats: ragged channel arrays".into()));
        }
        Ok(s)
    }
}

/// Fits `[-1, 1]` min-max scaling per channel.
pub fn fit_normalizer(train: &[FeatureMatrix]) -> Result<NormalizationStats> {
    let channels = train
        .first()
        .map(FeatureMatrix::channels)
        .ok_or_else(|| Error::invalid("cannot fit normalizer on an empty training set"))?;
    let mut min = vec![f64::INFINITY; channels];
    let mut max = vec![f64::NEG_INFINITY; channels];
    let mut rows = 0;
    for m in train {
        if m.channels() != channels {
            return Err(Error::shape("training matrices differ in channel count"));
        }
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        rows += m.rows();
    }
    if rows == 0 {
        return Err(Error::invalid("cannot fit normalizer on an empty training set"));
    }
    let constant = min
        .iter()
        .zip(&max)
        .map(|(lo, hi)| hi - lo <= 1e-12 * hi.abs().max(1.0))
        .collect();
    Ok(NormalizationStats { min, max, constant })
}

/// Maps each channel affinely so the training range lands on `[-1, 1]`.
/// Values outside the training range are not clipped.
pub fn apply_normalizer(stats: &NormalizationStats, m: &FeatureMatrix) -> FeatureMatrix {
    assert_eq!(stats.channels(), m.channels(), "normalizer channel count");
    let c = m.channels();
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            if stats.constant[ch] {
                0.0
            } else {
                2.0 * (v - stats.min[ch]) / (stats.max[ch] - stats.min[ch]) - 1.0
            }
        })
        .collect();
    FeatureMatrix::new(m.rows(), c, data)
}

/// Writes normalized matrices as CSV (`engine_id,cycle,<sensors>`) next to a
/// TOML stats sidecar. Returns the CSV path.
pub fn write_normalized_cache(
    dir: &Path,
    subset: SubsetId,
    split: Split,
    engines: &[(u32, FeatureMatrix)],
    stats: &NormalizationStats,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{subset}_{split}_normalized.csv"));
    let mut s = String::from("engine_id,cycle");
    for name in SENSOR_NAMES {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (id, m) in engines {
        for r in 0..m.rows() {
            s.push_str(&format!("{id},{}", r + 1));
            for v in m.row(r) {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
    }
    fs::write(&csv_path, s).map_err(|e| Error::io(&csv_path, e))?;
    let stats_path = dir.join(format!("{subset}_stats.toml"));
    fs::write(&stats_path, stats.to_toml()?).map_err(|e| Error::io(&stats_path, e))?;
    Ok(csv_path)
}

/// A parsed, normalized subset ready for windowing.
#[derive(Clone, Debug)]
pub struct PreparedSubset {
    pub subset: SubsetId,
    pub stats: NormalizationStats,
    /// `(engine_id, normalized features)` for every training engine.
    pub train: Vec<(u32, FeatureMatrix)>,
    /// `(engine_id, normalized features)` for every test engine.
    pub test: Vec<(u32, FeatureMatrix)>,
    /// True RUL at the last observed cycle of each test engine.
    pub test_rul: Vec<u32>,
}

impl PreparedSubset {
    /// Parses all three files, optionally validates Table-1 counts, fits the
    /// normalizer on the training split and applies it to both splits.
    pub fn load(root: &Path, subset: SubsetId, check: bool) -> Result<Self> {
        let train = parse_subset(root, subset, Split::Train)?;
        let test = parse_subset(root, subset, Split::Test)?;
        if check {
            check_counts(subset, Split::Train, &train)?;
            check_counts(subset, Split::Test, &test)?;
        }
        let test_rul = parse_rul_labels(root, subset, test.len())?;
        Self::from_trajectories(subset, &train, &test, test_rul)
    }

    pub fn from_trajectories(
        subset: SubsetId,
        train: &[EngineTrajectory],
        test: &[EngineTrajectory],
        test_rul: Vec<u32>,
    ) -> Result<Self> {
        if test.len() != test_rul.len() {
            return Err(Error::CountMismatch {
                subset: subset.to_string(),
                what: "RUL labels",
                expected: test.len(),
                found: test_rul.len(),
            });
        }
        let raw_train: Vec<FeatureMatrix> = train.iter().map(select_channels).collect();
        let stats = fit_normalizer(&raw_train)?;
        let norm = |ts: &[EngineTrajectory]| {
            ts.iter()
                .map(|t| (t.engine_id, apply_normalizer(&stats, &select_channels(t))))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            subset,
            train: norm(train),
            test: norm(test),
            stats: stats.clone(),
            test_rul,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u32, cycle: u32, base: f64) -> String {
        let mut s = format!("{id} {cycle} 0.0023 -0.0003 100.0");
        for k in 0..NUM_SENSORS {
            s.push_str(&format!(" {:.4}", base + k as f64));
        }
        s
    }

    #[test]
    fn parses_grouped_engines_with_trailing_blank_lines() {
        let text = [row(1, 1, 1.0), row(1, 2, 2.0), row(2, 1, 3.0)].join("  \n") + "\n\n";
        let t = parse_trajectories(&text, Path::new("x.txt")).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].cycles, vec![1, 2]);
        assert_eq!(t[1].sensors[0][20], 23.0);
        assert_eq!(t[0].op_settings[0], [0.0023, -0.0003, 100.0]);
    }

    #[test]
    fn rejects_short_row_with_line_number() {
        let bad = row(1, 2, 0.0);
        let bad = bad.rsplit_once(' ').unwrap().0.to_string();
        let text = format!("{}\n{}\n", row(1, 1, 0.0), bad);
        let err = parse_trajectories(&text, Path::new("train_FD001.txt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train_FD001.txt:2"), "{msg}");
        assert!(msg.contains("found 25"), "{msg}");
    }

    #[test]
    fn rejects_non_numeric_and_gaps() {
        let text = row(1, 1, 0.0).replace("100.0", "abc");
        assert!(matches!(
            parse_trajectories(&text, Path::new("f")),
            Err(Error::Parse { line: 1, .. })
        ));
        let text = format!("{}\n{}\n", row(1, 1, 0.0), row(1, 3, 0.0));
        assert!(matches!(
            parse_trajectories(&text, Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = format!("{}\n{}\n{}\n", row(1, 1, 0.0), row(2, 1, 0.0), row(1, 2, 0.0));
        assert!(parse_trajectories(&text, Path::new("f")).is_err());
    }

    #[test]
    fn rul_labels_count_and_sign() {
        let p = Path::new("RUL_FD001.txt");
        assert_eq!(parse_rul_text("112\n98\n\n", p, 2).unwrap(), vec![112, 98]);
        assert!(matches!(
            parse_rul_text("1\n2\n", p, 3),
            Err(Error::CountMismatch { expected: 3, found: 2, .. })
        ));
        assert!(parse_rul_text("1\n-2\n", p, 2).is_err());
    }

    #[test]
    fn channel_selection_drops_settings() {
        let t = parse_trajectories(&row(7, 1, 10.0), Path::new("f")).unwrap();
        let m = select_channels(&t[0]);
        assert_eq!((m.rows(), m.channels()), (1, NUM_SENSORS));
        assert_eq!(m.row(0)[0], 10.0);
        assert_eq!(m.row(0)[20], 30.0);
        assert!(!m.data().contains(&100.0));
    }

    #[test]
    fn normalizer_maps_range_and_constants() {
        let a = FeatureMatrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let stats = fit_normalizer(&[a.clone()]).unwrap();
        assert_eq!(stats.constant, vec![false, true]);
        let n = apply_normalizer(&stats, &a);
        assert_eq!(n.column(0).collect::<Vec<_>>(), vec![-1.0, 0.0, 1.0]);
        assert!(n.column(1).all(|v| v == 0.0));
        let test = FeatureMatrix::new(1, 2, vec![4.0, 5.0]);
        assert!(apply_normalizer(&stats, &test).row(0)[0] > 1.0);
        assert!(fit_normalizer(&[]).is_err());
    }

    #[test]
    fn stats_sidecar_round_trip() {
        let a = FeatureMatrix::new(2, 2, vec![1.0, 5.0, 2.5, 5.0]);
        let stats = fit_normalizer(&[a]).unwrap();
        let back = NormalizationStats::from_toml(&stats.to_toml().unwrap()).unwrap();
        assert_eq!(back, stats);
        assert_eq!(back.hash(), stats.hash());
    }

    #[test]
    fn subset_names_and_meta() {
        assert_eq!("fd003".parse::<SubsetId>().unwrap(), SubsetId::FD003);
        assert_eq!(SubsetId::FD001.meta().train_rows, 20631);
        assert_eq!(SubsetId::FD003.meta().test_rows, 16596);
        assert_eq!(SubsetId::FD003.default_window(), 40);
    }
}

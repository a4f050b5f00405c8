//! Dataset ingestion, splitting, windowing, instance normalization and patch
//! tokenization.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for standard deviations in both normalization levels.
pub const STD_EPS: f64 = 1e-5;

/// Relative sizes of the train/val/test splits, e.g. `6:2:2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// 6:2:2, the ETT protocol.
    pub const ETT: SplitRatios = SplitRatios { train: 6.0, val: 2.0, test: 2.0 };
    /// 7:1:2, used for every other benchmark.
    pub const OTHER: SplitRatios = SplitRatios { train: 7.0, val: 1.0, test: 2.0 };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        if [train, val, test].iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be positive, got {train}:{val}:{test}"
            )));
        }
        Ok(SplitRatios { train, val, test })
    }

    /// Default split for a dataset name: ETT* gets 6:2:2, everything else 7:1:2.
    pub fn for_dataset(name: &str) -> Self {
        if name.to_ascii_lowercase().starts_with("ett") {
            SplitRatios::ETT
        } else {
            SplitRatios::OTHER
        }
    }

    /// Row counts of the three splits for `rows` total rows.
    pub fn sizes(&self, rows: usize) -> [usize; 3] {
        let sum = self.train + self.val + self.test;
        let part = |x: f64| (rows as f64 * x / sum + 1e-9).floor() as usize;
        let train = part(self.train).min(rows);
        let val = part(self.val).min(rows - train);
        [train, val, rows - train - val]
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad split `{s}`, expected e.g. 6:2:2")))?;
        match parts[..] {
            [a, b, c] => SplitRatios::new(a, b, c),
            _ => Err(Error::Config(format!("bad split `{s}`, expected three parts"))),
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl Serialize for SplitRatios {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SplitRatios {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A multichannel series, standardized with statistics of its train split.
#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub timestamps: Option<Vec<String>>,
    /// One vector per channel, already standardized.
    channels: Vec<Vec<f64>>,
    pub ratios: SplitRatios,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    bounds: [Range<usize>; 3],
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TimeSeriesDataset {
    /// Builds a dataset from raw channels (each of equal length) and
    /// standardizes every channel with its train-split mean and std.
    pub fn from_channels(name: impl Into<String>, raw: Vec<Vec<f64>>, ratios: SplitRatios) -> Result<Self> {
        let rows = raw.first().map_or(0, Vec::len);
        if raw.is_empty() || rows == 0 {
            return Err(Error::Dataset("no data".into()));
        }
        if raw.iter().any(|c| c.len() != rows) {
            return Err(Error::Dataset("channels have different lengths".into()));
        }
        let [tr, va, _] = ratios.sizes(rows);
        if tr == 0 {
            return Err(Error::DatasetTooSmall {
                split: "train".into(),
                rows: 0,
                needed: 1,
            });
        }
        let bounds = [0..tr, tr..tr + va, tr + va..rows];
        let mut mean = Vec::with_capacity(raw.len());
        let mut std = Vec::with_capacity(raw.len());
        let mut channels = Vec::with_capacity(raw.len());
        for c in raw {
            let (m, s) = mean_std(&c[..tr]);
            let s = if s < STD_EPS { 1.0 } else { s };
            channels.push(c.iter().map(|x| (x - m) / s).collect());
            mean.push(m);
            std.push(s);
        }
        Ok(TimeSeriesDataset {
            name: name.into(),
            timestamps: None,
            channels,
            ratios,
            mean,
            std,
            bounds,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.channels[0].len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.bounds[0].clone(),
            Split::Val => self.bounds[1].clone(),
            Split::Test => self.bounds[2].clone(),
        }
    }

    /// Standardized values of one channel within one split.
    pub fn channel(&self, split: Split, c: usize) -> &[f64] {
        &self.channels[c][self.split_range(split)]
    }

    /// Errors unless every split has at least `needed` rows.
    pub fn ensure_rows(&self, needed: usize) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let rows = self.split_range(split).len();
            if rows < needed {
                return Err(Error::DatasetTooSmall {
                    split: split.as_str().into(),
                    rows,
                    needed,
                });
            }
        }
        Ok(())
    }
}

/// Reads a CSV with a header row. The first column is treated as a timestamp
/// when its first data cell is not numeric. Rows with an empty cell are
/// dropped; any other non-numeric cell is a parse error.
pub fn ingest_csv(path: &Path, ratios: SplitRatios) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    ingest_reader(file, name, ratios)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, name: String, ratios: SplitRatios) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, column: 1, message: e.to_string() })?
        .clone();
    let mut skip_first: Option<bool> = None;
    let mut channels: Vec<Vec<f64>> = Vec::new();
    let mut timestamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // 1-based line numbers, header is line 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: 1, message: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(headers.len()) + 1,
                message: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        let skip = *skip_first.get_or_insert_with(|| rec.get(0).is_some_and(|c| c.trim().parse::<f64>().is_err()));
        let start = usize::from(skip);
        if channels.is_empty() {
            if rec.len() <= start {
                return Err(Error::Dataset("no numeric columns".into()));
            }
            channels = vec![Vec::new(); rec.len() - start];
        }
        if rec.iter().skip(start).any(|c| c.trim().is_empty()) {
            continue;
        }
        let mut parsed = Vec::with_capacity(channels.len());
        for (j, cell) in rec.iter().enumerate().skip(start) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: j + 1, message: format!("non-finite cell `{cell}`") });
            }
            parsed.push(v);
        }
        for (c, v) in channels.iter_mut().zip(parsed) {
            c.push(v);
        }
        if skip {
            timestamps.push(rec.get(0).unwrap_or_default().to_string());
        }
    }
    let mut ds = TimeSeriesDataset::from_channels(name, channels, ratios)?;
    if skip_first == Some(true) {
        ds.timestamps = Some(timestamps);
    }
    Ok(ds)
}

/// Pure sinusoid fixture, `sin(2πt / period)`.
pub fn sinusoid_dataset(points: usize, period: f64, ratios: SplitRatios) -> Result<TimeSeriesDataset> {
    let values = (0..points)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
        .collect();
    TimeSeriesDataset::from_channels("sinusoid", vec![values], ratios)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub history: usize,
    pub horizon: usize,
    pub patch: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.history == 0 {
            return Err(Error::Config("history and patch must be positive".into()));
        }
        if self.history % self.patch != 0 {
            return Err(Error::Config(format!(
                "history length {} is not divisible by patch size {}",
                self.history, self.patch
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub history: Vec<f64>,
    pub future: Vec<f64>,
    pub channel: usize,
    pub split: Split,
    pub origin: usize,
    pub revin_mean: f64,
    pub revin_std: f64,
}

/// Sliding windows over one split, channel by channel.
pub fn make_windows(ds: &TimeSeriesDataset, split: Split, cfg: &WindowConfig) -> Result<Vec<WindowSample>> {
    cfg.validate()?;
    let span = cfg.history + cfg.horizon;
    let rows = ds.split_range(split).len();
    if rows < span {
        return Err(Error::DatasetTooSmall {
            split: split.as_str().into(),
            rows,
            needed: span,
        });
    }
    let per_channel = (rows - span) / cfg.stride + 1;
    let mut out = Vec::with_capacity(per_channel * ds.n_channels());
    for c in 0..ds.n_channels() {
        let series = ds.channel(split, c);
        for k in 0..per_channel {
            let o = k * cfg.stride;
            out.push(WindowSample {
                history: series[o..o + cfg.history].to_vec(),
                future: series[o + cfg.history..o + span].to_vec(),
                channel: c,
                split,
                origin: o,
                revin_mean: 0.0,
                revin_std: 1.0,
            });
        }
    }
    Ok(out)
}

/// Per-window mean/std normalization of the history; the future (if any) is
/// scaled with the same statistics. Std is the population std, floored at
/// [`STD_EPS`].
pub fn instance_normalize(w: &WindowSample) -> WindowSample {
    let (mean, std) = mean_std(&w.history);
    let std = std.max(STD_EPS);
    WindowSample {
        history: w.history.iter().map(|x| (x - mean) / std).collect(),
        future: w.future.iter().map(|x| (x - mean) / std).collect(),
        revin_mean: mean,
        revin_std: std,
        ..w.clone()
    }
}

pub fn denormalize(values: &[f64], mean: f64, std: f64) -> Vec<f64> {
    values.iter().map(|x| x * std + mean).collect()
}

/// Splits a series into non-overlapping patches of length `p`.
pub fn patchify(series: &[f64], p: usize) -> Result<Vec<Vec<f64>>> {
    if p == 0 || series.len() % p != 0 {
        return Err(Error::Config(format!(
            "length {} is not divisible by patch size {p}",
            series.len()
        )));
    }
    Ok(series.chunks(p).map(<[f64]>::to_vec).collect())
}

pub fn unpatchify(patches: &[Vec<f64>]) -> Vec<f64> {
    patches.concat()
}

/// Fixed sinusoidal embedding of one position.
pub fn sinusoidal_pe(pos: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("positional embedding dimension {d} must be even")));
    }
    let mut pe = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    Ok(pe)
}

/// Row-major `[positions.len(), d]` table of embeddings.
pub fn pe_table(positions: impl IntoIterator<Item = usize>, d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in positions {
        out.extend(sinusoidal_pe(p, d)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenBatch {
    /// `[batch, n_tokens, model_dim]`, row-major.
    pub tokens: Vec<f64>,
    pub batch: usize,
    pub n_tokens: usize,
    pub positions: Vec<usize>,
    pub patch: usize,
    pub model_dim: usize,
}

/// Projects each patch with `projection` (`[p, d]`) and `bias` (`[d]`), then
/// adds the embedding of positions `pos_base..pos_base + N`.
pub fn patchify_embed(
    windows: &[WindowSample],
    p: usize,
    projection: &Tensor,
    bias: &Tensor,
    pos_base: usize,
) -> Result<PatchTokenBatch> {
    let [pp, d] = projection.shape() else {
        return Err(Error::Dimension(format!("projection must be 2-D, got {:?}", projection.shape())));
    };
    let (pp, d) = (*pp, *d);
    if pp != p || bias.shape() != [d] {
        return Err(Error::Dimension(format!(
            "projection {:?} / bias {:?} do not map patch {p} to a common dimension",
            projection.shape(),
            bias.shape()
        )));
    }
    let len = windows.first().map_or(0, |w| w.history.len());
    if windows.iter().any(|w| w.history.len() != len) {
        return Err(Error::Dimension("windows of unequal length".into()));
    }
    let n = len / p.max(1);
    let positions: Vec<usize> = (pos_base..pos_base + n).collect();
    let pe = pe_table(positions.iter().copied(), d)?;
    let w = projection.data();
    let mut tokens = Vec::with_capacity(windows.len() * n * d);
    for win in windows {
        for (t, patch) in patchify(&win.history, p)?.iter().enumerate() {
            for j in 0..d {
                let mut s = bias.data()[j];
                for (k, x) in patch.iter().enumerate() {
                    s += x * w[k * d + j];
                }
                tokens.push(s + pe[t * d + j]);
            }
        }
    }
    Ok(PatchTokenBatch {
        tokens,
        batch: windows.len(),
        n_tokens: n,
        positions,
        patch: p,
        model_dim: d,
    })
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds_from(values: Vec<f64>, ratios: SplitRatios) -> TimeSeriesDataset {
        TimeSeriesDataset::from_channels("t", vec![values], ratios).unwrap()
    }

    #[test]
    fn split_sizes() {
        assert_eq!(SplitRatios::ETT.sizes(100), [60, 20, 20]);
        assert_eq!(SplitRatios::OTHER.sizes(100), [70, 10, 20]);
        assert_eq!("6:2:2".parse::<SplitRatios>().unwrap(), SplitRatios::ETT);
        assert_eq!(SplitRatios::for_dataset("ETTh1"), SplitRatios::ETT);
        assert_eq!(SplitRatios::for_dataset("weather"), SplitRatios::OTHER);
        assert!("6:2".parse::<SplitRatios>().is_err());
    }

    #[test]
    fn csv_ingest_with_timestamp() {
        let mut text = String::from("date,a,b\n");
        for t in 0..100 {
            text += &format!("2020-01-01 {t:02}:00,{},{}\n", t, 5.0);
        }
        let ds = ingest_reader(text.as_bytes(), "x".into(), SplitRatios::ETT).unwrap();
        assert_eq!(ds.n_channels(), 2);
        assert_eq!(ds.split_range(Split::Train).len(), 60);
        assert_eq!(ds.split_range(Split::Val).len(), 20);
        assert_eq!(ds.split_range(Split::Test).len(), 20);
        assert_eq!(ds.timestamps.as_ref().unwrap().len(), 100);
        // constant channel collapses to zeros
        assert!(ds.channel(Split::Test, 1).iter().all(|&x| x == 0.0));
        // train-split stats only
        assert!((ds.mean[0] - 29.5).abs() < 1e-12);
        let train = ds.channel(Split::Train, 0);
        assert!(train.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn csv_non_numeric_cell_reports_position() {
        let text = "a,b\n1,2\n3,x\n";
        match ingest_reader(text.as_bytes(), "x".into(), SplitRatios::ETT) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_rows_with_gaps_are_dropped() {
        let text = "a,b\n1,1\n2,\n3,3\n,4\n5,5\n";
        let ds = ingest_reader(text.as_bytes(), "x".into(), SplitRatios::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(ds.n_rows(), 3);
    }

    #[test]
    fn window_counts() {
        let ds = ds_from((0..30).map(f64::from).collect(), SplitRatios::new(10.0, 10.0, 10.0).unwrap());
        let cfg = WindowConfig { history: 4, horizon: 2, patch: 2, stride: 1 };
        let w = make_windows(&ds, Split::Train, &cfg).unwrap();
        assert_eq!(w.len(), 5);
        let cover = make_windows(&ds, Split::Train, &WindowConfig { stride: 6, ..cfg }).unwrap();
        assert_eq!(cover.len(), 1);
        let bad = WindowConfig { history: 5, ..cfg };
        assert!(matches!(make_windows(&ds, Split::Train, &bad), Err(Error::Config(_))));
        let big = WindowConfig { history: 8, horizon: 4, patch: 2, stride: 1 };
        assert!(matches!(make_windows(&ds, Split::Val, &big), Err(Error::DatasetTooSmall { .. })));
    }

    #[test]
    fn channels_are_independent_samples() {
        let raw: Vec<Vec<f64>> = (0..7).map(|c| (0..30).map(|t| (t * (c + 1)) as f64).collect()).collect();
        let ds = TimeSeriesDataset::from_channels("m", raw, SplitRatios::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        let cfg = WindowConfig { history: 4, horizon: 2, patch: 2, stride: 1 };
        let w = make_windows(&ds, Split::Train, &cfg).unwrap();
        assert_eq!(w.len(), 35);
        let offsets = |c: usize| w.iter().filter(|s| s.channel == c).map(|s| s.origin).collect::<Vec<_>>();
        for c in 1..7 {
            assert_eq!(offsets(c), offsets(0));
        }
    }

    #[test]
    fn windows_stay_inside_their_split() {
        let ds = ds_from((0..50).map(f64::from).collect(), SplitRatios::new(2.0, 1.0, 2.0).unwrap());
        let cfg = WindowConfig { history: 4, horizon: 2, patch: 2, stride: 1 };
        for split in [Split::Train, Split::Val, Split::Test] {
            let series = ds.channel(split, 0);
            for w in make_windows(&ds, split, &cfg).unwrap() {
                assert!(w.origin + 6 <= series.len());
                assert_eq!(w.history[..], series[w.origin..w.origin + 4]);
                assert_eq!(w.future[..], series[w.origin + 4..w.origin + 6]);
            }
        }
    }

    #[test]
    fn instance_norm_examples() {
        let w = WindowSample {
            history: vec![1.0, 2.0, 3.0],
            future: vec![4.0],
            channel: 0,
            split: Split::Train,
            origin: 0,
            revin_mean: 0.0,
            revin_std: 1.0,
        };
        let n = instance_normalize(&w);
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((n.history[0] + expect).abs() < 1e-12);
        assert!(n.history[1].abs() < 1e-12);
        assert!((n.history[2] - expect).abs() < 1e-12);
        assert!((n.future[0] - 2.0 * expect).abs() < 1e-12);

        let c = WindowSample { history: vec![3.5; 8], ..w };
        let nc = instance_normalize(&c);
        assert!(nc.history.iter().all(|&x| x == 0.0));
        assert_eq!(denormalize(&nc.history, nc.revin_mean, nc.revin_std), vec![3.5; 8]);
    }

    #[test]
    fn patch_shapes() {
        let s: Vec<f64> = (0..512).map(f64::from).collect();
        assert_eq!(patchify(&s, 8).unwrap().len(), 64);
        assert_eq!(336 / 8, 42);
        let one: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(patchify(&one, 8).unwrap(), vec![one.clone()]);
        assert!(matches!(patchify(&one, 3), Err(Error::Config(_))));
    }

    #[test]
    fn pe_examples() {
        assert_eq!(sinusoidal_pe(0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(sinusoidal_pe(1, 5), Err(Error::Config(_))));
        let pe = sinusoidal_pe(3, 4).unwrap();
        let oracle = [3f64.sin(), 3f64.cos(), (3.0 / 100.0f64).sin(), (3.0 / 100.0f64).cos()];
        for (a, b) in pe.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_embed_positions_and_single_patch() {
        let w = WindowSample {
            history: (0..16).map(f64::from).collect(),
            future: vec![],
            channel: 0,
            split: Split::Train,
            origin: 0,
            revin_mean: 0.0,
            revin_std: 1.0,
        };
        let proj = Tensor::zeros(vec![8, 4]);
        let bias = Tensor::zeros(vec![4]);
        let b = patchify_embed(&[w], 8, &proj, &bias, 5).unwrap();
        assert_eq!(b.positions, vec![5, 6]);
        assert_eq!(b.tokens[..4], sinusoidal_pe(5, 4).unwrap()[..]);
    }

    proptest! {
        #[test]
        fn revin_round_trip(xs in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let w = WindowSample { history: xs.clone(), future: vec![], channel: 0, split: Split::Test, origin: 0, revin_mean: 0.0, revin_std: 1.0 };
            let n = instance_normalize(&w);
            prop_assert!(n.revin_std >= STD_EPS);
            let back = denormalize(&n.history, n.revin_mean, n.revin_std);
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn revin_standardizes(xs in proptest::collection::vec(-10f64..10.0, 2..64)) {
            let (_, s) = mean_std(&xs);
            prop_assume!(s > 1e-3);
            let w = WindowSample { history: xs, future: vec![], channel: 0, split: Split::Test, origin: 0, revin_mean: 0.0, revin_std: 1.0 };
            let n = instance_normalize(&w);
            let (m, s) = mean_std(&n.history);
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((s * s - 1.0).abs() < 1e-8);
        }

        #[test]
        fn patch_concat_is_identity(xs in proptest::collection::vec(-5f64..5.0, 1..10), p in 1usize..6) {
            let series: Vec<f64> = xs.iter().cycle().take(xs.len() * p).copied().collect();
            prop_assert_eq!(unpatchify(&patchify(&series, p).unwrap()), series);
        }

        #[test]
        fn pe_in_unit_range(pos in 0usize..5000, half in 1usize..32) {
            prop_assert!(sinusoidal_pe(pos, half * 2).unwrap().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}

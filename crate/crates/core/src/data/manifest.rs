//! JSON-lines dataset manifests and per-split label statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                CoreError::Config(format!("unknown split `{s}` (expected train, dev or test)"))
            })
    }
}

/// One manifest record. Feature paths are relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_features_path: Option<PathBuf>,
    pub split: Split,
    /// Precomputed text features for the `file` encoder provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features_path: Option<PathBuf>,
    /// Precomputed caption features for the `file` encoder provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_features_path: Option<PathBuf>,
}

/// Record as written, before validation.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    text: String,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
    #[serde(default)]
    region_features_path: Option<PathBuf>,
    split: String,
    #[serde(default)]
    text_features_path: Option<PathBuf>,
    #[serde(default)]
    caption_features_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub sarcastic: usize,
    pub non_sarcastic: usize,
    pub unlabeled: usize,
}

impl SplitCounts {
    pub const fn labeled(sarcastic: usize, non_sarcastic: usize) -> Self {
        Self {
            sarcastic,
            non_sarcastic,
            unlabeled: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.sarcastic + self.non_sarcastic + self.unlabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ManifestStats {
    pub train: SplitCounts,
    pub dev: SplitCounts,
    pub test: SplitCounts,
}

/// Published split sizes of the Twitter multimodal sarcasm benchmark.
pub const TWITTER_STATS: ManifestStats = ManifestStats {
    train: SplitCounts::labeled(8642, 11174),
    dev: SplitCounts::labeled(959, 1451),
    test: SplitCounts::labeled(959, 1450),
};

/// Published split sizes of the MultiBully code-mixed benchmark.
pub const MULTIBULLY_STATS: ManifestStats = ManifestStats {
    train: SplitCounts::labeled(1545, 2552),
    dev: SplitCounts::labeled(201, 384),
    test: SplitCounts::labeled(429, 743),
};

impl ManifestStats {
    pub fn get(&self, split: Split) -> &SplitCounts {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut SplitCounts {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn totals(&self) -> [usize; 3] {
        [self.train.total(), self.dev.total(), self.test.total()]
    }

    /// Name of the reference dataset whose split totals match, if any.
    pub fn matching_reference(&self) -> Option<&'static str> {
        [("twitter", TWITTER_STATS), ("multibully", MULTIBULLY_STATS)]
            .into_iter()
            .find(|(_, r)| r.totals() == self.totals())
            .map(|(name, _)| name)
    }
}

/// `12345` → `12,345`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ManifestStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split  sarcastic  non_sarcastic  unlabeled  total")?;
        for split in Split::ALL {
            let c = self.get(split);
            writeln!(
                f,
                "{:<6} {:>9}  {:>13}  {:>9}  {:>5}",
                split.name(),
                thousands(c.sarcastic),
                thousands(c.non_sarcastic),
                thousands(c.unlabeled),
                thousands(c.total())
            )?;
        }
        let [tr, dv, te] = self.totals();
        write!(
            f,
            "split totals (train / dev / test): {} / {} / {}",
            thousands(tr),
            thousands(dv),
            thousands(te)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    /// Directory that relative feature paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn stats(&self) -> ManifestStats {
        let mut stats = ManifestStats::default();
        for s in &self.samples {
            let c = stats.get_mut(s.split);
            match s.label {
                Some(1) => c.sarcastic += 1,
                Some(_) => c.non_sarcastic += 1,
                None => c.unlabeled += 1,
            }
        }
        stats
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Writes one JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("samples serialize"));
            out.push('\n');
        }
        out
    }
}

fn validate(raw: RawSample, line: usize) -> Result<Sample> {
    let err = |msg: String| CoreError::Data(format!("line {line}: {msg}"));
    let split: Split = raw.split.parse().map_err(|_| {
        err(format!(
            "unknown split `{}` (expected train, dev or test)",
            raw.split
        ))
    })?;
    let label = match raw.label {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(y @ (0 | 1)) => Some(y as u8),
            _ => return Err(err(format!("label {v} is not 0 or 1"))),
        },
    };
    if label.is_none() && split != Split::Test {
        return Err(err(format!(
            "sample `{}` in split {split} has no label",
            raw.id
        )));
    }
    if raw.id.is_empty() {
        return Err(err("empty sample id".into()));
    }
    Ok(Sample {
        id: raw.id,
        text: raw.text,
        caption: raw.caption,
        label,
        region_features_path: raw.region_features_path,
        split,
        text_features_path: raw.text_features_path,
        caption_features_path: raw.caption_features_path,
    })
}

/// Parses manifest text; blank lines are skipped.
pub fn parse_manifest_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line)
            .map_err(|e| CoreError::Data(format!("line {line_no}: malformed record: {e}")))?;
        let sample = validate(raw, line_no)?;
        if !seen.insert(sample.id.clone()) {
            return Err(CoreError::Data(format!(
                "line {line_no}: duplicate sample id `{}`",
                sample.id
            )));
        }
        samples.push(sample);
    }
    Ok(Manifest {
        samples,
        base_dir: base_dir.into(),
    })
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, base).map_err(|e| match e {
        CoreError::Data(msg) => CoreError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        parse_manifest_str(text, "")
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = parse("").unwrap();
        assert!(m.samples.is_empty());
        assert_eq!(m.stats().totals(), [0, 0, 0]);
    }

    #[test]
    fn reports_line_numbers() {
        let ok = r#"{"id":"a","text":"x","label":1,"split":"train"}"#;
        let cases = [
            format!("{ok}\n{ok}"),
            format!("{ok}\n\n{{\"id\":\"b\",\"text\":\"x\",\"label\":0,\"split\":\"val\"}}"),
            format!("{ok}\nnot json"),
            format!("{ok}\n{{\"id\":\"b\",\"text\":\"x\",\"label\":2,\"split\":\"dev\"}}"),
            format!("{ok}\n{{\"id\":\"b\",\"text\":\"x\",\"split\":\"dev\"}}"),
        ];
        let lines = [2, 3, 2, 2, 2];
        for (text, line) in cases.iter().zip(lines) {
            let e = parse(text).unwrap_err().to_string();
            assert!(e.contains(&format!("line {line}:")), "{e}");
        }
    }

    #[test]
    fn test_split_may_be_unlabeled() {
        let m = parse(r#"{"id":"a","text":"x","split":"test"}"#).unwrap();
        assert_eq!(m.stats().test.unlabeled, 1);
        assert_eq!(m.samples[0].caption, "");
    }

    #[test]
    fn reference_totals() {
        assert_eq!(TWITTER_STATS.totals(), [19_816, 2_410, 2_409]);
        assert_eq!(MULTIBULLY_STATS.totals(), [4_097, 585, 1_172]);
        assert_eq!(TWITTER_STATS.matching_reference(), Some("twitter"));
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(19_816), "19,816");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn jsonl_round_trip() {
        let text = r#"{"id":"a","text":"x","caption":"c","label":1,"region_features_path":"f/a.ft","split":"dev"}"#;
        let m = parse(text).unwrap();
        assert_eq!(parse(&m.to_jsonl()).unwrap(), m);
    }
}

//! On-disk format for per-position validation losses.
//!
//! A run is described by two files:
//!
//! * a manifest, a JSON object with `run_id`, `n_tot`, `n_warmup`, `seq_len`
//!   and `checkpoint_interval`;
//! * a log with one JSON record per line,
//!   `{"tokens_trained": <int>, "loss_by_position": [<float>; seq_len]}`. An
//!   optional `"positions"` list must equal `[1, 2, ..., seq_len]`.
//!
//! Losses are natural-log cross entropies already averaged over the
//! validation sequences, indexed by 1-based position.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule metadata shared by every checkpoint of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Total pre-training tokens of the schedule.
    pub n_tot: u64,
    /// Tokens spent in learning-rate warmup.
    pub n_warmup: u64,
    /// Token positions per validation sequence.
    pub seq_len: usize,
    /// Tokens between consecutive checkpoints.
    pub checkpoint_interval: u64,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_tot == 0 {
            return Err(Error::Manifest("n_tot must be positive".into()));
        }
        if self.n_warmup >= self.n_tot {
            return Err(Error::Manifest(format!(
                "n_warmup ({}) must be smaller than n_tot ({})",
                self.n_warmup, self.n_tot
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Manifest(format!(
                "seq_len must be at least 2, got {}",
                self.seq_len
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Manifest("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    /// Checkpoint cadence `k * checkpoint_interval` for `k = 1..` up to `n_tot`.
    pub fn checkpoint_grid(&self) -> Vec<u64> {
        (1..=self.n_tot / self.checkpoint_interval)
            .map(|k| k * self.checkpoint_interval)
            .collect()
    }
}

/// Mean per-position validation losses at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossProfile {
    pub tokens_trained: u64,
    pub loss_by_position: Vec<f64>,
}

impl TokenLossProfile {
    pub fn new(tokens_trained: u64, loss_by_position: Vec<f64>) -> Self {
        Self {
            tokens_trained,
            loss_by_position,
        }
    }

    pub fn mean_loss(&self) -> f64 {
        mean_loss(self)
    }

    fn check(&self, seq_len: usize, line: usize) -> Result<()> {
        if self.tokens_trained == 0 {
            return Err(Error::MalformedRecord {
                line,
                message: "tokens_trained must be positive".into(),
            });
        }
        if self.loss_by_position.len() != seq_len {
            return Err(Error::LengthMismatch {
                line,
                expected: seq_len,
                found: self.loss_by_position.len(),
            });
        }
        if let Some(pos) = self
            .loss_by_position
            .iter()
            .position(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(Error::NonFiniteLoss {
                line,
                position: pos + 1,
            });
        }
        Ok(())
    }
}

/// All checkpoints of a run, sorted strictly ascending by tokens trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub manifest: RunManifest,
    pub profiles: Vec<TokenLossProfile>,
}

impl Trajectory {
    /// Validates and sorts `profiles`. Line numbers in errors are the
    /// 1-based index into `profiles`.
    pub fn new(manifest: RunManifest, mut profiles: Vec<TokenLossProfile>) -> Result<Self> {
        manifest.validate()?;
        for (idx, p) in profiles.iter().enumerate() {
            p.check(manifest.seq_len, idx + 1)?;
        }
        let mut order: Vec<usize> = (0..profiles.len()).collect();
        order.sort_by_key(|&i| profiles[i].tokens_trained);
        for w in order.windows(2) {
            if profiles[w[0]].tokens_trained == profiles[w[1]].tokens_trained {
                return Err(Error::DuplicateTokens {
                    line: w[0].max(w[1]) + 1,
                    tokens: profiles[w[1]].tokens_trained,
                });
            }
        }
        profiles.sort_by_key(|p| p.tokens_trained);
        Ok(Self { manifest, profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn tokens(&self) -> Vec<u64> {
        self.profiles.iter().map(|p| p.tokens_trained).collect()
    }

    pub fn mean_losses(&self) -> Vec<f64> {
        self.profiles.iter().map(mean_loss).collect()
    }

    pub fn profile_at(&self, tokens: u64) -> Option<&TokenLossProfile> {
        self.profiles
            .binary_search_by_key(&tokens, |p| p.tokens_trained)
            .ok()
            .map(|i| &self.profiles[i])
    }

    /// The checkpoints with `tokens_trained <= max_tokens`.
    pub fn prefix(&self, max_tokens: u64) -> Trajectory {
        Trajectory {
            manifest: self.manifest.clone(),
            profiles: self
                .profiles
                .iter()
                .filter(|p| p.tokens_trained <= max_tokens)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct RecordIn {
    tokens_trained: u64,
    loss_by_position: Vec<f64>,
    #[serde(default)]
    positions: Option<Vec<u64>>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    tokens_trained: u64,
    loss_by_position: &'a [f64],
}

#[derive(Deserialize)]
struct ManifestIn {
    run_id: String,
    n_tot: u64,
    n_warmup: u64,
    seq_len: usize,
    checkpoint_interval: u64,
    #[serde(default)]
    #[allow(dead_code)]
    schema_version: Option<u32>,
}

pub fn read_manifest(reader: impl Read) -> Result<RunManifest> {
    let m: ManifestIn =
        serde_json::from_reader(reader).map_err(|e| Error::Manifest(e.to_string()))?;
    let manifest = RunManifest {
        run_id: m.run_id,
        n_tot: m.n_tot,
        n_warmup: m.n_warmup,
        seq_len: m.seq_len,
        checkpoint_interval: m.checkpoint_interval,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Reads a line-delimited loss log against an already-validated manifest.
pub fn read_log(manifest: RunManifest, reader: impl BufRead) -> Result<Trajectory> {
    let seq_len = manifest.seq_len;
    let mut profiles: Vec<TokenLossProfile> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if !rec.extra.is_empty() {
            let keys: Vec<&str> = rec.extra.keys().map(String::as_str).collect();
            log::warn!("line {line_no}: ignoring unknown keys {keys:?}");
        }
        if let Some(positions) = &rec.positions {
            let expected = (1..=seq_len as u64).collect::<Vec<_>>();
            if *positions != expected {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    message: format!("positions must be exactly 1..={seq_len}"),
                });
            }
        }
        let profile = TokenLossProfile::new(rec.tokens_trained, rec.loss_by_position);
        profile.check(seq_len, line_no)?;
        profiles.push(profile);
        lines.push(line_no);
    }

    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by_key(|&i| (profiles[i].tokens_trained, lines[i]));
    for w in order.windows(2) {
        if profiles[w[0]].tokens_trained == profiles[w[1]].tokens_trained {
            return Err(Error::DuplicateTokens {
                line: lines[w[1]],
                tokens: profiles[w[1]].tokens_trained,
            });
        }
    }
    profiles.sort_by_key(|p| p.tokens_trained);
    Ok(Trajectory { manifest, profiles })
}

pub fn parse_trajectory(manifest_path: &Path, log_path: &Path) -> Result<Trajectory> {
    let mf = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = read_manifest(BufReader::new(mf))?;
    let lf = File::open(log_path).map_err(|e| Error::io(log_path, e))?;
    read_log(manifest, BufReader::new(lf))
}

pub fn write_manifest(manifest: &RunManifest, mut writer: impl Write) -> std::io::Result<()> {
    let mut value = serde_json::to_value(manifest)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("schema_version".into(), serde_json::Value::from(1u32));
    }
    serde_json::to_writer_pretty(&mut writer, &value)?;
    writeln!(writer)
}

pub fn write_log(traj: &Trajectory, mut writer: impl Write) -> std::io::Result<()> {
    for p in &traj.profiles {
        let rec = RecordOut {
            tokens_trained: p.tokens_trained,
            loss_by_position: &p.loss_by_position,
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Arithmetic mean of the per-position losses.
pub fn mean_loss(profile: &TokenLossProfile) -> f64 {
    let v = &profile.loss_by_position;
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest4() -> RunManifest {
        RunManifest {
            run_id: "t".into(),
            n_tot: 1000,
            n_warmup: 10,
            seq_len: 4,
            checkpoint_interval: 100,
        }
    }

    fn parse(log: &str) -> Result<Trajectory> {
        read_log(manifest4(), log.as_bytes())
    }

    #[test]
    fn parses_single_record() {
        let t = parse(r#"{"tokens_trained": 100, "loss_by_position": [4, 3, 2.5, 2.4]}"#).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.profiles[0].tokens_trained, 100);
        assert_eq!(t.profiles[0].loss_by_position, vec![4.0, 3.0, 2.5, 2.4]);
    }

    #[test]
    fn rejects_short_record() {
        let err = parse(r#"{"tokens_trained": 100, "loss_by_position": [4, 3, 2.5]}"#).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                line: 1,
                expected: 4,
                found: 3
            }
        ));
    }

    #[test]
    fn rejects_duplicate_tokens() {
        let log = "{\"tokens_trained\": 100, \"loss_by_position\": [1,1,1,1]}\n\
                   {\"tokens_trained\": 100, \"loss_by_position\": [2,2,2,2]}\n";
        let err = parse(log).unwrap_err();
        assert!(matches!(
            err,
            Error::DuplicateTokens {
                line: 2,
                tokens: 100
            }
        ));
    }

    #[test]
    fn reports_line_of_malformed_record() {
        let log = "{\"tokens_trained\": 100, \"loss_by_position\": [1,1,1,1]}\n\n{oops\n";
        match parse(log).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_negative_loss() {
        let err = parse(r#"{"tokens_trained": 5, "loss_by_position": [1, -1, 1, 1]}"#).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { line: 1, position: 2 }));
    }

    #[test]
    fn positions_key_must_match_seq_len() {
        let ok = r#"{"tokens_trained": 5, "positions": [1,2,3,4], "loss_by_position": [1,1,1,1]}"#;
        assert!(parse(ok).is_ok());
        let bad = r#"{"tokens_trained": 5, "positions": [0,1,2,3], "loss_by_position": [1,1,1,1]}"#;
        assert!(matches!(parse(bad), Err(Error::MalformedRecord { .. })));
    }

    #[test]
    fn sorts_records_by_tokens() {
        let log = "{\"tokens_trained\": 300, \"loss_by_position\": [1,1,1,1]}\n\
                   {\"tokens_trained\": 100, \"loss_by_position\": [2,2,2,2]}\n";
        let t = parse(log).unwrap();
        assert_eq!(t.tokens(), vec![100, 300]);
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest4();
        m.n_warmup = 1000;
        assert!(m.validate().is_err());
        let mut m = manifest4();
        m.seq_len = 1;
        assert!(m.validate().is_err());
        let mut m = manifest4();
        m.n_tot = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn mean_loss_examples() {
        let p = |v: Vec<f64>| TokenLossProfile::new(1, v);
        assert_eq!(mean_loss(&p(vec![1.0, 2.0, 3.0, 4.0])), 2.5);
        assert_eq!(mean_loss(&p(vec![0.75; 9])), 0.75);
        assert_eq!(mean_loss(&p(vec![0.5, 1.5])), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(std::f64::consts::LN_2) - 2.0).abs() < 1e-15);
        assert!((perplexity(1.0) - 2.718_281_8).abs() < 1e-7);
    }
}

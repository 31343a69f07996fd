//! Episode and snapshot persistence: JSON Lines with an optional provenance
//! header line.
//!
//! Wire format per episode:
//! `{"id", "times", "values", "censor_time", "label", "truth"?}` where
//! `values` is `Q` rows of `M` numbers-or-nulls and `label`/`truth.states`
//! are 1-based. A file may start with `{"_provenance": {...}}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ScoredEpisode;
use crate::generate::{Episode, LatentTrajectory};

/// Run provenance attached to every CLI output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config_hash: String,
    /// Seconds since the Unix epoch; 0 under deterministic mode.
    pub timestamp_unix: u64,
}

impl Provenance {
    pub fn new(seed: Option<u64>, config_hash: String, deterministic: bool) -> Self {
        let timestamp_unix = if deterministic {
            0
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        };
        Provenance {
            tool: "hasmm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash,
            timestamp_unix,
        }
    }

    /// `key=value` pairs for CSV comment headers.
    pub fn comment_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("tool".into(), self.tool.clone()),
            ("version".into(), self.version.clone()),
            ("config_hash".into(), self.config_hash.clone()),
            ("timestamp_unix".into(), self.timestamp_unix.to_string()),
        ];
        if let Some(seed) = self.seed {
            pairs.insert(2, ("seed".into(), seed.to_string()));
        }
        pairs
    }
}

#[derive(Serialize, Deserialize)]
struct ProvenanceLine {
    _provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    /// 1-based state indices.
    states: Vec<usize>,
    sojourns: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: String,
    times: Vec<f64>,
    values: Vec<Vec<Option<f64>>>,
    censor_time: f64,
    /// 1-based absorbing label (1 or N).
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<TruthRecord>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(ep: &Episode) -> Self {
        EpisodeRecord {
            id: ep.id.clone(),
            times: ep.times.clone(),
            values: ep.values.clone(),
            censor_time: ep.censor_time,
            label: ep.label + 1,
            truth: ep.truth.as_ref().map(|t| TruthRecord {
                states: t.states.iter().map(|&x| x + 1).collect(),
                sojourns: t.sojourns.clone(),
            }),
        }
    }
}

impl EpisodeRecord {
    fn into_episode(self) -> Result<Episode> {
        if self.label == 0 {
            return Err(Error::MalformedFile(format!(
                "episode {}: labels are 1-based, got 0",
                self.id
            )));
        }
        let truth = match self.truth {
            None => None,
            Some(t) => {
                if t.states.iter().any(|&x| x == 0) {
                    return Err(Error::MalformedFile(format!(
                        "episode {}: truth states are 1-based, got 0",
                        self.id
                    )));
                }
                Some(LatentTrajectory {
                    states: t.states.iter().map(|&x| x - 1).collect(),
                    sojourns: t.sojourns,
                })
            }
        };
        Ok(Episode {
            id: self.id,
            times: self.times,
            values: self.values,
            censor_time: self.censor_time,
            label: self.label - 1,
            truth,
        })
    }
}

/// Writes episodes as JSON Lines, preceded by a provenance line when given.
pub fn write_episodes<W: Write>(
    mut w: W,
    episodes: &[Episode],
    provenance: Option<&Provenance>,
) -> Result<()> {
    if let Some(p) = provenance {
        serde_json::to_writer(&mut w, &ProvenanceLine { _provenance: p.clone() })?;
        writeln!(w)?;
    }
    for ep in episodes {
        serde_json::to_writer(&mut w, &EpisodeRecord::from(ep))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads episodes from JSON Lines, returning the provenance header if present.
pub fn read_episodes<R: BufRead>(r: R) -> Result<(Vec<Episode>, Option<Provenance>)> {
    let mut episodes = Vec::new();
    let mut provenance = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 && line.contains("_provenance") {
            if let Ok(p) = serde_json::from_str::<ProvenanceLine>(&line) {
                provenance = Some(p._provenance);
                continue;
            }
        }
        let record: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedFile(format!("episodes line {}: {e}", lineno + 1)))?;
        episodes.push(record.into_episode()?);
    }
    Ok((episodes, provenance))
}

/// Reads episodes from a file path.
pub fn read_episodes_file(path: &std::path::Path) -> Result<(Vec<Episode>, Option<Provenance>)> {
    let file = std::fs::File::open(path)?;
    read_episodes(std::io::BufReader::new(file))
}

/// Writes episodes to a file path.
pub fn write_episodes_file(
    path: &std::path::Path,
    episodes: &[Episode],
    provenance: Option<&Provenance>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_episodes(std::io::BufWriter::new(file), episodes, provenance)
}

/// One scored filtering step on the wire (`map_state` is 1-based).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub id: String,
    pub t: f64,
    pub posterior: Vec<f64>,
    /// 1-based MAP state.
    pub map_state: usize,
    pub risk: f64,
}

/// Writes snapshot records as JSON Lines with an optional provenance line.
pub fn write_snapshots<W: Write>(
    mut w: W,
    snapshots: &[SnapshotRecord],
    provenance: Option<&Provenance>,
) -> Result<()> {
    if let Some(p) = provenance {
        serde_json::to_writer(&mut w, &ProvenanceLine { _provenance: p.clone() })?;
        writeln!(w)?;
    }
    for s in snapshots {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

/// One risk trace with its outcome on the wire (`label` is 1-based).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoredRecord {
    id: String,
    /// 1-based absorbing label.
    label: usize,
    censor_time: f64,
    /// `[time, risk]` pairs sorted by time.
    trace: Vec<(f64, f64)>,
}

/// Writes scored episodes as JSON Lines with an optional provenance line.
pub fn write_scored<W: Write>(
    mut w: W,
    scored: &[ScoredEpisode],
    provenance: Option<&Provenance>,
) -> Result<()> {
    if let Some(p) = provenance {
        serde_json::to_writer(&mut w, &ProvenanceLine { _provenance: p.clone() })?;
        writeln!(w)?;
    }
    for s in scored {
        let record = ScoredRecord {
            id: s.id.clone(),
            label: s.label + 1,
            censor_time: s.censor_time,
            trace: s.trace.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads scored episodes from JSON Lines, skipping a provenance header.
pub fn read_scored<R: BufRead>(r: R) -> Result<(Vec<ScoredEpisode>, Option<Provenance>)> {
    let mut out = Vec::new();
    let mut provenance = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 && line.contains("_provenance") {
            if let Ok(p) = serde_json::from_str::<ProvenanceLine>(&line) {
                provenance = Some(p._provenance);
                continue;
            }
        }
        let record: ScoredRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedFile(format!("scores line {}: {e}", lineno + 1)))?;
        if record.label == 0 {
            return Err(Error::MalformedFile(format!(
                "scored episode {}: labels are 1-based, got 0",
                record.id
            )));
        }
        out.push(ScoredEpisode {
            id: record.id,
            label: record.label - 1,
            censor_time: record.censor_time,
            trace: record.trace,
        });
    }
    Ok((out, provenance))
}

/// Reads snapshot records from JSON Lines, skipping a provenance header.
pub fn read_snapshots<R: BufRead>(r: R) -> Result<(Vec<SnapshotRecord>, Option<Provenance>)> {
    let mut out = Vec::new();
    let mut provenance = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 && line.contains("_provenance") {
            if let Ok(p) = serde_json::from_str::<ProvenanceLine>(&line) {
                provenance = Some(p._provenance);
                continue;
            }
        }
        let record: SnapshotRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedFile(format!("snapshots line {}: {e}", lineno + 1)))?;
        out.push(record);
    }
    Ok((out, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_dataset, substream_rng};
    use crate::params::{GammaSojourn, GpHyper, ParameterSet};

    fn params() -> ParameterSet {
        ParameterSet {
            n_states: 3,
            sojourn: vec![
                GammaSojourn { shape: 2.0, rate: 0.4 },
                GammaSojourn { shape: 2.0, rate: 0.25 },
                GammaSojourn { shape: 1.5, rate: 0.5 },
            ],
            initial: vec![0.0, 1.0, 0.0],
            eta: vec![vec![0.0; 3]; 3],
            beta: vec![vec![0.0; 3]; 3],
            emission: (0..3)
                .map(|i| GpHyper {
                    mean: vec![i as f64, -(i as f64)],
                    sigma: 1.0,
                    length_scale: 2.0,
                    task_cov: vec![vec![1.0, 0.1], vec![0.1, 1.0]],
                    jitter: None,
                })
                .collect(),
            zeta: 0.5,
        }
    }

    #[test]
    fn episodes_round_trip_with_provenance() {
        let p = params();
        let episodes = generate_dataset(&p, 5, 42).unwrap();
        let prov = Provenance::new(Some(42), "abc123".into(), true);
        let mut buf = Vec::new();
        write_episodes(&mut buf, &episodes, Some(&prov)).unwrap();
        let (back, read_prov) = read_episodes(&buf[..]).unwrap();
        assert_eq!(episodes, back);
        assert_eq!(read_prov, Some(prov));
    }

    #[test]
    fn labels_are_one_based_on_the_wire() {
        let p = params();
        let mut rng = substream_rng(3, 0);
        let ep = crate::generate::generate_episode(&p, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_episodes(&mut buf, std::slice::from_ref(&ep), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["label"].as_u64().unwrap() as usize, ep.label + 1);
        let states = v["truth"]["states"].as_array().unwrap();
        assert!(states.iter().all(|s| s.as_u64().unwrap() >= 1));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let bad = "{\"id\": \"x\", \"unexpected\": 1}\n";
        assert!(matches!(read_episodes(bad.as_bytes()), Err(Error::MalformedFile(_))));
        let zero_label =
            "{\"id\":\"x\",\"times\":[],\"values\":[[]],\"censor_time\":1.0,\"label\":0}\n";
        assert!(matches!(read_episodes(zero_label.as_bytes()), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn scored_episodes_round_trip() {
        let scored = vec![ScoredEpisode {
            id: "ep7".into(),
            label: 2,
            censor_time: 40.0,
            trace: vec![(1.0, 0.1), (5.5, 0.8)],
        }];
        let mut buf = Vec::new();
        write_scored(&mut buf, &scored, None).unwrap();
        let (back, _) = read_scored(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].label, 2);
        assert_eq!(back[0].trace, scored[0].trace);
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["label"], 3, "wire labels are 1-based");
    }

    #[test]
    fn snapshots_round_trip() {
        let snaps = vec![
            SnapshotRecord { id: "a".into(), t: 1.0, posterior: vec![0.2, 0.5, 0.3], map_state: 2, risk: 0.4 },
            SnapshotRecord { id: "a".into(), t: 2.0, posterior: vec![0.1, 0.4, 0.5], map_state: 3, risk: 0.6 },
        ];
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &snaps, None).unwrap();
        let (back, _) = read_snapshots(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].map_state, 3);
    }
}

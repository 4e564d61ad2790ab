//! Pools, model parameters, training statistics and world manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config::Config;
use crate::offline::CandidatePool;
use crate::online::{LossBreakdown, MingleRecord, ParameterVector};

pub const POOL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolFile {
    pub format_version: u32,
    pub pool: CandidatePool,
}

pub fn save_pool(path: &Path, pool: &CandidatePool) -> Result<()> {
    let file = PoolFile {
        format_version: POOL_FORMAT_VERSION,
        pool: pool.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("pool serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_pool(path: &Path) -> Result<CandidatePool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PoolFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format_version != POOL_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format_version {}", file.format_version)));
    }
    file.pool
        .check_invariants(None)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(file.pool)
}

const MODEL_MAGIC: &[u8; 4] = b"IMDL";
const MODEL_VERSION: u16 = 1;

/// Model parameters with the two shape numbers a learner needs to check
/// compatibility: classifier outputs and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub outputs: u32,
    pub dim: u32,
    pub params: ParameterVector,
}

impl ModelFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.outputs.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.params.version.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < 32 {
            return Err("truncated header".into());
        }
        if &b[..4] != MODEL_MAGIC {
            return Err("bad magic (expected IMDL)".into());
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != MODEL_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let (outputs, dim, pversion, n) = (u32_at(8), u32_at(12), u64_at(16), u64_at(24) as usize);
        let body = &b[32..];
        if n.checked_mul(8) != Some(body.len()) {
            return Err(format!("expected {n} parameters, found {} bytes of data", body.len()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite parameter".into());
        }
        Ok(ModelFile {
            outputs,
            dim,
            params: ParameterVector {
                values,
                version: pversion,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }
}

pub const STATS_HEADER: [&str; 7] = ["iteration", "n_online_kept", "n_offline_kept", "l_cls", "l_reg", "l_iou", "total"];

pub fn write_stats(path: &Path, mingle: &[MingleRecord], losses: &[LossBreakdown]) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(STATS_HEADER).map_err(io)?;
    for (m, l) in mingle.iter().zip(losses) {
        w.write_record([
            m.iteration.to_string(),
            m.n_online_kept.to_string(),
            m.n_offline_kept.to_string(),
            l.l_cls.to_string(),
            l.l_reg.to_string(),
            l.l_iou.to_string(),
            l.total.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stats(path: &Path) -> Result<Vec<(MingleRecord, LossBreakdown)>> {
    let fmt = |m: String| Error::format(path, m);
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let header = r.headers().map_err(|e| fmt(e.to_string()))?;
    if header.iter().ne(STATS_HEADER) {
        return Err(fmt(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let bad = |k: usize| fmt(format!("row {}: bad {}", i + 1, STATS_HEADER[k]));
        let int = |k: usize| rec[k].parse::<usize>().map_err(|_| bad(k));
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(k));
        out.push((
            MingleRecord {
                iteration: int(0)?,
                n_online_kept: int(1)?,
                n_offline_kept: int(2)?,
            },
            LossBreakdown {
                l_cls: num(3)?,
                l_reg: num(4)?,
                l_iou: num(5)?,
                total: num(6)?,
            },
        ));
    }
    Ok(out)
}

/// Enough to regenerate a toy world bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldManifest {
    pub format_version: u32,
    pub seed: u64,
    /// The full config as `key = value` text.
    pub config: String,
}

impl WorldManifest {
    pub fn new(seed: u64, config: &Config) -> Self {
        WorldManifest {
            format_version: 1,
            seed,
            config: config.render(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: WorldManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format_version != 1 {
            return Err(Error::format(path, format!("unsupported format_version {}", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = ModelFile {
            outputs: 3,
            dim: 2,
            params: ParameterVector {
                values: vec![0.1, -2.5e-300, 7.0, f64::MIN_POSITIVE],
                version: 42,
            },
        };
        let back = ModelFile::decode(&m.encode()).unwrap();
        assert_eq!(back, m);
        let bytes = m.encode();
        assert!(ModelFile::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(ModelFile::decode(&bytes[..20]).unwrap_err().contains("truncated"));
    }

    #[test]
    fn stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        let m = vec![
            MingleRecord {
                iteration: 0,
                n_online_kept: 0,
                n_offline_kept: 3,
            },
            MingleRecord {
                iteration: 1,
                n_online_kept: 2,
                n_offline_kept: 1,
            },
        ];
        let l = vec![LossBreakdown::new(0.5, 0.25, 0.125, 0.5), LossBreakdown::new(0.1, 0.2, 0.3, 0.5)];
        write_stats(&p, &m, &l).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iteration,n_online_kept,n_offline_kept,l_cls,l_reg,l_iou,total\n"));
        let back = read_stats(&p).unwrap();
        assert_eq!(back.iter().map(|r| r.0).collect::<Vec<_>>(), m);
        assert_eq!(back.iter().map(|r| r.1).collect::<Vec<_>>(), l);
    }

    #[test]
    fn manifest_regenerates_config() {
        let mut c = Config::default();
        c.world.base_scenes = 17;
        let m = WorldManifest::new(5, &c);
        assert_eq!(m.config().unwrap(), c);
    }
}

//! On-disk transition datasets: a little-endian binary file plus a JSON
//! schema written next to it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    state_feature_names, ActionVector, MdpError, RewardVector, StateVector, Transition, N_OBJECTIVES,
    STATE_DIM,
};
use crate::cohort::Lab;
use crate::Scalar;

pub const DATASET_MAGIC: &[u8; 4] = b"LPTR";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset<F> {
    pub transitions: Vec<Transition<F>>,
    /// Hash of the configuration that produced the dataset.
    pub config_hash: String,
}

/// Sidecar description of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub version: u16,
    pub scalar_bytes: u8,
    pub state_features: Vec<String>,
    pub labs: Vec<String>,
    pub reward_components: Vec<String>,
    pub n_transitions: usize,
    pub n_admissions: usize,
    pub config_hash: String,
}

impl<F: Scalar> TransitionDataset<F> {
    pub fn new(transitions: Vec<Transition<F>>, config_hash: impl Into<String>) -> Self {
        TransitionDataset {
            transitions,
            config_hash: config_hash.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Distinct admission ids in first-seen order.
    pub fn admissions(&self) -> Vec<String> {
        let mut seen = BTreeMap::new();
        for t in &self.transitions {
            let n = seen.len();
            seen.entry(t.admission_id.as_str()).or_insert(n);
        }
        let mut ids: Vec<(&str, usize)> = seen.into_iter().collect();
        ids.sort_by_key(|(_, i)| *i);
        ids.into_iter().map(|(s, _)| s.to_string()).collect()
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            version: DATASET_VERSION,
            scalar_bytes: F::WIDTH,
            state_features: state_feature_names(),
            labs: Lab::ALL.iter().map(|l| l.name().to_string()).collect(),
            reward_components: RewardVector::<F>::NAMES.iter().map(|s| s.to_string()).collect(),
            n_transitions: self.len(),
            n_admissions: self.admissions().len(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids = self.admissions();
        let index: BTreeMap<&str, u32> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(F::WIDTH);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
        for id in &ids {
            put_str(&mut out, id);
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in &self.transitions {
            out.extend_from_slice(&index[t.admission_id.as_str()].to_le_bytes());
            out.extend_from_slice(&t.time.to_le_bytes());
            out.push(t.action.index() as u8);
            out.push(u8::from(t.terminal));
            for v in t.state.0.iter().chain(&t.next_state.0).chain(&t.reward.0) {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MdpError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(MdpError::Format("not a transition dataset".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != DATASET_VERSION {
            return Err(MdpError::Format(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        let width = r.take(1)?[0];
        if width != F::WIDTH {
            return Err(MdpError::Format(format!(
                "dataset stores {width}-byte scalars, expected {}",
                F::WIDTH
            )));
        }
        let config_hash = r.string()?;
        let n_ids = u64::from_le_bytes(r.array()?) as usize;
        let ids = (0..n_ids).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let n = u64::from_le_bytes(r.array()?) as usize;
        let w = F::WIDTH as usize;
        let mut transitions = Vec::with_capacity(n.min(bytes.len()));
        for _ in 0..n {
            let id = u32::from_le_bytes(r.array()?) as usize;
            let admission_id = ids
                .get(id)
                .ok_or_else(|| MdpError::Format(format!("admission index {id} out of range")))?
                .clone();
            let time = u32::from_le_bytes(r.array()?);
            let action = r.take(1)?[0] as usize;
            if action >= super::N_ACTIONS {
                return Err(MdpError::Format(format!("action {action} out of range")));
            }
            let terminal = r.take(1)?[0] != 0;
            let mut scalars = [F::zero(); 2 * STATE_DIM + N_OBJECTIVES];
            for v in scalars.iter_mut() {
                *v = F::read_le(r.take(w)?);
            }
            let mut state = [F::zero(); STATE_DIM];
            let mut next_state = [F::zero(); STATE_DIM];
            let mut reward = [F::zero(); N_OBJECTIVES];
            state.copy_from_slice(&scalars[..STATE_DIM]);
            next_state.copy_from_slice(&scalars[STATE_DIM..2 * STATE_DIM]);
            reward.copy_from_slice(&scalars[2 * STATE_DIM..]);
            transitions.push(Transition {
                state: StateVector(state),
                action: ActionVector::from_index(action),
                next_state: StateVector(next_state),
                reward: RewardVector(reward),
                admission_id,
                time,
                terminal,
            });
        }
        if r.pos != bytes.len() {
            return Err(MdpError::Format("trailing bytes after last transition".into()));
        }
        Ok(TransitionDataset { transitions, config_hash })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MdpError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MdpError::Format("unexpected end of dataset".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], MdpError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn string(&mut self) -> Result<String, MdpError> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| MdpError::Format(e.to_string()))
    }
}

/// Path of the JSON schema written next to `path`.
pub fn schema_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".schema.json");
    PathBuf::from(s)
}

/// Writes the binary dataset to `path` and its schema to `<path>.schema.json`.
pub fn write_dataset<F: Scalar>(path: &Path, dataset: &TransitionDataset<F>) -> Result<(), MdpError> {
    std::fs::write(path, dataset.to_bytes())?;
    let schema = serde_json::to_string_pretty(&dataset.schema())?;
    std::fs::write(schema_path(path), schema)?;
    Ok(())
}

pub fn read_dataset<F: Scalar>(path: &Path) -> Result<TransitionDataset<F>, MdpError> {
    TransitionDataset::from_bytes(&std::fs::read(path)?)
}

/// One row per transition: ids, action bits, state, next state and reward.
pub fn write_dataset_csv<F: Scalar, W: Write>(out: W, dataset: &TransitionDataset<F>) -> Result<(), MdpError> {
    let mut w = csv::Writer::from_writer(out);
    let features = state_feature_names();
    let mut header = vec!["admission_id".to_string(), "time".into(), "terminal".into()];
    header.extend(Lab::ALL.iter().map(|l| format!("order_{}", l.name())));
    header.extend(features.iter().cloned());
    header.extend(features.iter().map(|f| format!("next_{f}")));
    header.extend(RewardVector::<F>::NAMES.iter().map(|r| format!("reward_{r}")));
    w.write_record(&header).map_err(csv_err)?;
    for t in &dataset.transitions {
        let mut row = vec![t.admission_id.clone(), t.time.to_string(), u8::from(t.terminal).to_string()];
        row.extend(Lab::ALL.iter().map(|&l| u8::from(t.action.orders(l)).to_string()));
        row.extend(
            t.state
                .0
                .iter()
                .chain(&t.next_state.0)
                .chain(&t.reward.0)
                .map(|v| v.to_string()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> MdpError {
    MdpError::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample<F: Scalar>() -> TransitionDataset<F> {
        let transitions = (0..7)
            .map(|i| {
                let mut s = [F::zero(); STATE_DIM];
                for (k, v) in s.iter_mut().enumerate() {
                    *v = F::of(0.1 * (i * STATE_DIM + k) as f64 + 1.0 / 3.0);
                }
                Transition {
                    state: StateVector(s),
                    action: ActionVector::from_index(i % 16),
                    next_state: StateVector(s.map(|v| v + F::one())),
                    reward: RewardVector([F::one(), F::of(2.0), F::of(0.25), F::of(-0.7)]),
                    admission_id: format!("A{}", i / 3),
                    time: (i % 3) as u32,
                    terminal: i % 3 == 2,
                }
            })
            .collect();
        TransitionDataset::new(transitions, "abc123")
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let d = sample::<f64>();
        assert_eq!(TransitionDataset::<f64>::from_bytes(&d.to_bytes()).unwrap(), d);
        let d = sample::<f32>();
        assert_eq!(TransitionDataset::<f32>::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn rejects_wrong_width_and_truncation() {
        let bytes = sample::<f32>().to_bytes();
        assert!(matches!(TransitionDataset::<f64>::from_bytes(&bytes), Err(MdpError::Format(_))));
        assert!(TransitionDataset::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TransitionDataset::<f32>::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn files_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let d = sample::<f64>();
        write_dataset(&path, &d).unwrap();
        assert_eq!(read_dataset::<f64>(&path).unwrap(), d);
        let schema: DatasetSchema = serde_json::from_str(&std::fs::read_to_string(schema_path(&path)).unwrap()).unwrap();
        assert_eq!(schema.n_transitions, 7);
        assert_eq!(schema.n_admissions, 3);
        assert_eq!(schema.state_features.len(), STATE_DIM);
        let mut csv = Vec::new();
        write_dataset_csv(&mut csv, &d).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3 + 4 + 2 * STATE_DIM + 4);
    }
}

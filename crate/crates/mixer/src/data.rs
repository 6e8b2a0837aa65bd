//! Environment containers and their on-disk format.
//!
//! Generation records which family produced each environment, but that is
//! evaluation metadata: the trainer only ever receives [`EnvView`]s, which
//! carry trajectories and nothing else. Family labels and true parameters
//! are reachable only through the explicit `family_*` accessors.

use crate::error::{Error, Result};
use crate::ode::{TimeGrid, Trajectory};
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MXDS";
const SCHEMA_VERSION: u32 = 1;

/// Model-facing slice of one environment: training trajectories and
/// held-out evaluation trajectories on the same dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvView {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Evaluation-only metadata of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMeta {
    /// Dense family ordinal within the benchmark (0-based).
    pub family_ord: usize,
    /// Source ODE identifier.
    pub ode_id: u32,
    pub family_name: String,
    /// True parameters used to generate the environment.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Environment {
    train: Vec<Trajectory>,
    test: Vec<Trajectory>,
    meta: EnvMeta,
}

/// A full generated benchmark: training environments plus adaptation
/// environments, with family metadata segregated from the model-facing
/// trajectory data.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSet {
    pub benchmark: String,
    pub seed: u64,
    train_envs: Vec<Environment>,
    adapt_envs: Vec<Environment>,
}

impl EnvironmentSet {
    pub fn new(benchmark: String, seed: u64) -> Self {
        EnvironmentSet {
            benchmark,
            seed,
            train_envs: Vec::new(),
            adapt_envs: Vec::new(),
        }
    }

    pub fn push_train_env(&mut self, train: Vec<Trajectory>, test: Vec<Trajectory>, meta: EnvMeta) {
        self.train_envs.push(Environment { train, test, meta });
    }

    pub fn push_adapt_env(&mut self, train: Vec<Trajectory>, test: Vec<Trajectory>, meta: EnvMeta) {
        self.adapt_envs.push(Environment { train, test, meta });
    }

    /// Deterministic Fisher–Yates shuffle of the training environments.
    pub fn shuffle_train_envs(&mut self, rng: &mut rand_chacha::ChaCha8Rng) {
        use rand::Rng;
        let n = self.train_envs.len();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            self.train_envs.swap(i, j);
        }
    }

    pub fn n_train_envs(&self) -> usize {
        self.train_envs.len()
    }

    pub fn n_adapt_envs(&self) -> usize {
        self.adapt_envs.len()
    }

    /// Trajectories only — what the trainer is allowed to see.
    pub fn model_view(&self) -> Vec<EnvView> {
        self.train_envs
            .iter()
            .map(|e| EnvView {
                train: e.train.clone(),
                test: e.test.clone(),
            })
            .collect()
    }

    /// Adaptation environments, same masking rules.
    pub fn adapt_view(&self) -> Vec<EnvView> {
        self.adapt_envs
            .iter()
            .map(|e| EnvView {
                train: e.train.clone(),
                test: e.test.clone(),
            })
            .collect()
    }

    /// Family ordinal per training environment (evaluation only).
    pub fn family_labels(&self) -> Vec<usize> {
        self.train_envs.iter().map(|e| e.meta.family_ord).collect()
    }

    pub fn adapt_family_labels(&self) -> Vec<usize> {
        self.adapt_envs.iter().map(|e| e.meta.family_ord).collect()
    }

    pub fn n_families(&self) -> usize {
        self.train_envs
            .iter()
            .map(|e| e.meta.family_ord + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn train_env_meta(&self, idx: usize) -> &EnvMeta {
        &self.train_envs[idx].meta
    }

    pub fn adapt_env_meta(&self, idx: usize) -> &EnvMeta {
        &self.adapt_envs[idx].meta
    }

    /// Human-readable per-split counts.
    pub fn manifest(&self) -> String {
        let mut names: Vec<(usize, String)> = Vec::new();
        for e in &self.train_envs {
            if !names.iter().any(|(ord, _)| *ord == e.meta.family_ord) {
                names.push((e.meta.family_ord, e.meta.family_name.clone()));
            }
        }
        names.sort_by_key(|(ord, _)| *ord);

        let train_traj = self.train_envs.first().map(|e| e.train.len()).unwrap_or(0);
        let test_traj = self.train_envs.first().map(|e| e.test.len()).unwrap_or(0);
        let adapt_train = self.adapt_envs.first().map(|e| e.train.len()).unwrap_or(0);
        let adapt_test = self.adapt_envs.first().map(|e| e.test.len()).unwrap_or(0);

        let mut out = String::new();
        out.push_str(&format!("benchmark: {}\n", self.benchmark));
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("families: {}\n", names.len()));
        for (_, name) in &names {
            out.push_str(&format!("  - {name}\n"));
        }
        out.push_str(&format!(
            "train split: {} environments x {} trajectories\n",
            self.train_envs.len(),
            train_traj
        ));
        out.push_str(&format!(
            "test split: {} environments x {} trajectories\n",
            self.train_envs.len(),
            test_traj
        ));
        out.push_str(&format!(
            "adapt-train split: {} environments x {} trajectories\n",
            self.adapt_envs.len(),
            adapt_train
        ));
        out.push_str(&format!(
            "adapt-test split: {} environments x {} trajectories\n",
            self.adapt_envs.len(),
            adapt_test
        ));
        out
    }

    /// Serialize to the versioned binary container. Writing the same set
    /// twice produces byte-identical files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_u32(&mut buf, SCHEMA_VERSION);
        write_string(&mut buf, &self.benchmark);
        write_u64(&mut buf, self.seed);
        write_u32(&mut buf, self.train_envs.len() as u32);
        write_u32(&mut buf, self.adapt_envs.len() as u32);
        for env in self.train_envs.iter().chain(&self.adapt_envs) {
            write_env(&mut buf, env);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::DataFormat(format!(
                "bad magic {:?} in {}",
                &magic[..4.min(magic.len())],
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::DataVersion {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let benchmark = r.string()?;
        let seed = r.u64()?;
        let n_train = r.u32()? as usize;
        let n_adapt = r.u32()? as usize;
        let mut train_envs = Vec::with_capacity(n_train);
        let mut adapt_envs = Vec::with_capacity(n_adapt);
        for i in 0..n_train + n_adapt {
            let env = read_env(&mut r)?;
            if i < n_train {
                train_envs.push(env);
            } else {
                adapt_envs.push(env);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::DataFormat(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(EnvironmentSet {
            benchmark,
            seed,
            train_envs,
            adapt_envs,
        })
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn write_trajectory(buf: &mut Vec<u8>, t: &Trajectory) {
    write_f64(buf, t.grid.t0);
    write_f64(buf, t.grid.t_end);
    write_u32(buf, t.grid.n_steps as u32);
    write_u32(buf, t.dim() as u32);
    for &v in t.states.data() {
        write_f64(buf, v);
    }
}

fn write_env(buf: &mut Vec<u8>, env: &Environment) {
    write_u32(buf, env.meta.family_ord as u32);
    write_u32(buf, env.meta.ode_id);
    write_string(buf, &env.meta.family_name);
    write_u32(buf, env.meta.params.len() as u32);
    for &p in &env.meta.params {
        write_f64(buf, p);
    }
    write_u32(buf, env.train.len() as u32);
    write_u32(buf, env.test.len() as u32);
    for t in env.train.iter().chain(&env.test) {
        write_trajectory(buf, t);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DataTruncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut s = String::new();
        self.take(len)?
            .read_to_string(&mut s)
            .map_err(|e| Error::DataFormat(format!("invalid utf-8 string: {e}")))?;
        Ok(s)
    }
}

fn read_trajectory(r: &mut Reader) -> Result<Trajectory> {
    let t0 = r.f64()?;
    let t_end = r.f64()?;
    let n_steps = r.u32()? as usize;
    let d = r.u32()? as usize;
    let grid = TimeGrid::new(t0, t_end, n_steps)
        .map_err(|e| Error::DataFormat(format!("bad grid: {e}")))?;
    let len = (n_steps + 1) * d;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()?);
    }
    Ok(Trajectory {
        grid,
        states: Tensor::matrix(n_steps + 1, d, data),
    })
}

fn read_env(r: &mut Reader) -> Result<Environment> {
    let family_ord = r.u32()? as usize;
    let ode_id = r.u32()?;
    let family_name = r.string()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.f64()?);
    }
    let n_train = r.u32()? as usize;
    let n_test = r.u32()? as usize;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_train + n_test {
        let t = read_trajectory(r)?;
        if i < n_train {
            train.push(t);
        } else {
            test.push(t);
        }
    }
    Ok(Environment {
        train,
        test,
        meta: EnvMeta {
            family_ord,
            ode_id,
            family_name,
            params,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_set() -> EnvironmentSet {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let traj = |scale: f64| Trajectory {
            grid,
            states: Tensor::matrix(3, 2, vec![scale, 0.1, 0.2, 0.3, 0.4, 0.5]),
        };
        let mut set = EnvironmentSet::new("tiny".into(), 42);
        set.push_train_env(
            vec![traj(1.0)],
            vec![traj(2.0), traj(3.0)],
            EnvMeta {
                family_ord: 0,
                ode_id: 24,
                family_name: "harmonic".into(),
                params: vec![2.1],
            },
        );
        set.push_adapt_env(
            vec![traj(4.0)],
            vec![traj(5.0)],
            EnvMeta {
                family_ord: 0,
                ode_id: 24,
                family_name: "harmonic".into(),
                params: vec![2.5],
            },
        );
        set
    }

    #[test]
    fn round_trip_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mxds");
        let set = tiny_set();
        set.save(&path).unwrap();
        let loaded = EnvironmentSet::load(&path).unwrap();
        assert_eq!(set, loaded);

        // Saving again produces identical bytes.
        let path2 = dir.path().join("set2.mxds");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn tampered_length_field_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mxds");
        tiny_set().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Inflate the benchmark-name length field just past the magic+version.
        bytes[8] = 0xFF;
        bytes[9] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match EnvironmentSet::load(&path) {
            Err(Error::DataTruncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mxds");
        tiny_set().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // schema version little-endian low byte
        std::fs::write(&path, &bytes).unwrap();
        match EnvironmentSet::load(&path) {
            Err(Error::DataVersion { found: 9, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mxds");
        std::fs::write(&path, b"NOPElonger-than-header").unwrap();
        assert!(matches!(
            EnvironmentSet::load(&path),
            Err(Error::DataFormat(_))
        ));
    }

    #[test]
    fn model_view_exposes_no_family_markers() {
        let set = tiny_set();
        let view = set.model_view();
        assert_eq!(view.len(), 1);
        assert_eq!(view[0].train.len(), 1);
        assert_eq!(view[0].test.len(), 2);
        // The view's entire (debug-rendered) content carries no metadata.
        let rendered = format!("{view:?}");
        assert!(!rendered.contains("harmonic"));
        assert!(!rendered.contains("family"));
        assert!(!rendered.contains("2.1"));
        // Metadata stays reachable through the explicit accessors.
        assert_eq!(set.family_labels(), vec![0]);
        assert_eq!(set.train_env_meta(0).family_name, "harmonic");
    }
}

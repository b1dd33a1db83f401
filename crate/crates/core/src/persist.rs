//! Text persistence: named-tensor files (weights, checkpoints) and
//! newline-delimited trajectory records.
//!
//! Every float is written as `{:.16e}`, i.e. 17 significant digits, which
//! round-trips 64-bit values exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::filter::{Architecture, CkfNet};
use crate::linalg::Vector;
use crate::ssm::Trajectory;

pub const WEIGHTS_HEADER: &str = "# ckfnet weights v1";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("tensor {name}: expected shape {expected:?}, found {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("tensor {0} is missing")]
    MissingTensor(String),
    #[error("tensor {0} is not part of the architecture")]
    UnknownTensor(String),
    #[error("manifest key {0} is missing or invalid")]
    Manifest(String),
    #[error("trajectory record {line}: {message}")]
    Record { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PersistError>;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A named row-major block of values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Header line, ordered `meta` pairs and tensors of a tensor file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub header: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<TensorBlock>,
}

impl TensorFile {
    pub fn new(header: &str) -> Self {
        Self {
            header: header.to_string(),
            ..Self::default()
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// All values stored under `key`, in file order.
    pub fn meta_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PersistError::Manifest(key.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorBlock> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.header).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for t in &self.tensors {
            writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols).unwrap();
            for row in t.values.chunks(t.cols.max(1)) {
                let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line, message: &str| PersistError::Format {
            line,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let mut file = TensorFile::new(header);
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(ln, "meta without key"))?;
                    file.push_meta(key, parts.next().unwrap_or(""));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 4 {
                        return Err(err(ln, "expected `tensor <name> <rows> <cols>`"));
                    }
                    let rows: usize = fields[2].parse().map_err(|_| err(ln, "bad row count"))?;
                    let cols: usize = fields[3].parse().map_err(|_| err(ln, "bad column count"))?;
                    let mut values = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (vl, row) = lines.next().ok_or_else(|| err(ln, "truncated tensor"))?;
                        let before = values.len();
                        for tok in row.split_whitespace() {
                            values.push(tok.parse::<f64>().map_err(|_| err(vl, "bad number"))?);
                        }
                        if values.len() - before != cols {
                            return Err(err(vl, "row length does not match column count"));
                        }
                    }
                    file.tensors.push(TensorBlock {
                        name: fields[1].to_string(),
                        rows,
                        cols,
                        values,
                    });
                }
                _ => return Err(err(ln, "expected `meta` or `tensor`")),
            }
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| PersistError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the architecture into `meta` and every parameter tensor under
/// `prefix` (e.g. `""` or `"adam_m/"`).
pub fn push_architecture(file: &mut TensorFile, arch: Architecture) {
    file.push_meta("n", arch.n);
    file.push_meta("m", arch.m);
    file.push_meta("hidden_dim", arch.hidden_dim);
}

pub fn read_architecture(file: &TensorFile) -> Result<Architecture> {
    Ok(Architecture {
        n: file.parse_meta("n")?,
        m: file.parse_meta("m")?,
        hidden_dim: file.parse_meta("hidden_dim")?,
    })
}

/// Appends `buffer` (laid out like `net`) as named tensors.
pub fn push_tensors(file: &mut TensorFile, net: &CkfNet, prefix: &str, buffer: &[f64]) {
    for spec in net.layout().specs() {
        file.tensors.push(TensorBlock {
            name: format!("{prefix}{}", spec.name),
            rows: spec.rows,
            cols: spec.cols,
            values: buffer[spec.range()].to_vec(),
        });
    }
}

/// Reads tensors stored under `prefix` into a buffer laid out like `net`,
/// validating every shape. With `exclusive`, tensors with other names are
/// rejected.
pub fn pull_tensors(file: &TensorFile, net: &CkfNet, prefix: &str, exclusive: bool) -> Result<Vec<f64>> {
    let layout = net.layout();
    let mut buffer = vec![0.0; layout.len()];
    for spec in layout.specs() {
        let name = format!("{prefix}{}", spec.name);
        let block = file
            .tensor(&name)
            .ok_or_else(|| PersistError::MissingTensor(name.clone()))?;
        if (block.rows, block.cols) != (spec.rows, spec.cols) {
            return Err(PersistError::ShapeMismatch {
                name,
                expected: (spec.rows, spec.cols),
                got: (block.rows, block.cols),
            });
        }
        buffer[spec.range()].copy_from_slice(&block.values);
    }
    if exclusive {
        if let Some(extra) = file
            .tensors
            .iter()
            .find(|t| t.name.strip_prefix(prefix).and_then(|n| layout.find(n)).is_none())
        {
            return Err(PersistError::UnknownTensor(extra.name.clone()));
        }
    }
    Ok(buffer)
}

/// A weights file: architecture manifest, caller metadata and parameters.
pub fn weights_file(net: &CkfNet, extra_meta: &[(&str, String)]) -> TensorFile {
    let mut file = TensorFile::new(WEIGHTS_HEADER);
    push_architecture(&mut file, net.arch());
    for (k, v) in extra_meta {
        file.push_meta(k, v);
    }
    push_tensors(&mut file, net, "", net.values());
    file
}

pub fn save_weights(path: &Path, net: &CkfNet, extra_meta: &[(&str, String)]) -> Result<()> {
    weights_file(net, extra_meta).write(path)
}

/// Loads a weights file, checking every tensor against the manifest.
pub fn load_weights(path: &Path) -> Result<(CkfNet, TensorFile)> {
    let file = TensorFile::read(path)?;
    let net = net_from_weights(&file)?;
    Ok((net, file))
}

pub fn net_from_weights(file: &TensorFile) -> Result<CkfNet> {
    if file.header != WEIGHTS_HEADER {
        return Err(PersistError::Format {
            line: 1,
            message: format!("expected header `{WEIGHTS_HEADER}`"),
        });
    }
    let arch = read_architecture(file)?;
    let mut net = CkfNet::zeros(arch);
    net.tape.values = pull_tensors(file, &net, "", true)?;
    Ok(net)
}

/// Eigenvalue multipliers applied to the generating noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRecord {
    pub w_factors: Vec<f64>,
    pub v_factors: Vec<f64>,
}

impl AugmentationRecord {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            w_factors: vec![1.0; n],
            v_factors: vec![1.0; m],
        }
    }
}

fn json_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", items.join(","))
}

fn json_matrix(rows: &[Vector]) -> String {
    let items: Vec<String> = rows.iter().map(|r| json_array(r)).collect();
    format!("[{}]", items.join(","))
}

/// One self-describing JSON record per trajectory.
pub fn trajectory_record(traj: &Trajectory, aug: &AugmentationRecord) -> String {
    format!(
        "{{\"traj_id\":{},\"seed\":{},\"model_id\":{},\"T\":{},\"states\":{},\"measurements\":{},\"w_factors\":{},\"v_factors\":{}}}",
        traj.traj_id,
        traj.seed,
        serde_json::Value::String(traj.model_id.clone()),
        traj.len(),
        json_matrix(&traj.states),
        json_matrix(&traj.measurements),
        json_array(&aug.w_factors),
        json_array(&aug.v_factors),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    traj_id: u64,
    seed: u64,
    model_id: String,
    #[serde(rename = "T")]
    steps: usize,
    states: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
    w_factors: Vec<f64>,
    v_factors: Vec<f64>,
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory], augs: &[AugmentationRecord]) -> Result<()> {
    assert_eq!(trajs.len(), augs.len(), "one augmentation record per trajectory");
    let mut text = String::new();
    for (t, a) in trajs.iter().zip(augs) {
        text.push_str(&trajectory_record(t, a));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn parse_trajectories(text: &str) -> Result<(Vec<Trajectory>, Vec<AugmentationRecord>)> {
    let mut trajs = Vec::new();
    let mut augs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| PersistError::Record { line: i + 1, message };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if raw.states.len() != raw.steps || raw.measurements.len() != raw.steps {
            return Err(bad(format!("expected {} states and measurements", raw.steps)));
        }
        trajs.push(Trajectory {
            traj_id: raw.traj_id,
            seed: raw.seed,
            model_id: raw.model_id,
            states: raw.states.into_iter().map(Vector::from_vec).collect(),
            measurements: raw.measurements.into_iter().map(Vector::from_vec).collect(),
        });
        augs.push(AugmentationRecord {
            w_factors: raw.w_factors,
            v_factors: raw.v_factors,
        });
    }
    Ok((trajs, augs))
}

pub fn read_trajectories(path: &Path) -> Result<(Vec<Trajectory>, Vec<AugmentationRecord>)> {
    parse_trajectories(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::RngStream;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        for v in [0.1, -3.5e-300, 1.0 / 3.0, f64::MAX, 5e-324] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let arch = Architecture { n: 2, m: 3, hidden_dim: 4 };
        let net = CkfNet::initialized(arch, &mut RngStream::new(9));
        let text = weights_file(&net, &[("model_id", "toy".into())]).to_text();
        let file = TensorFile::parse(&text).unwrap();
        let back = net_from_weights(&file).unwrap();
        assert_eq!(back.tape.values, net.tape.values);
        assert_eq!(file.meta("model_id"), Some("toy"));
        assert_eq!(back.arch(), arch);
    }

    #[test]
    fn weights_shape_mismatch_rejected() {
        let net = CkfNet::zeros(Architecture { n: 2, m: 2, hidden_dim: 3 });
        let text = weights_file(&net, &[]).to_text().replace("meta hidden_dim 3", "meta hidden_dim 4");
        let err = net_from_weights(&TensorFile::parse(&text).unwrap()).unwrap_err();
        assert!(matches!(err, PersistError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn truncated_tensor_rejected() {
        let net = CkfNet::zeros(Architecture { n: 1, m: 1, hidden_dim: 2 });
        let text = weights_file(&net, &[]).to_text();
        let cut: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(TensorFile::parse(&cut).is_err() || net_from_weights(&TensorFile::parse(&cut).unwrap()).is_err());
    }

    #[test]
    fn trajectory_records_round_trip() {
        let traj = Trajectory {
            traj_id: 3,
            seed: 77,
            model_id: "linear_full".into(),
            states: vec![Vector::from_vec(vec![0.1, 1.0 / 3.0]), Vector::from_vec(vec![-2.5e-17, 4.0])],
            measurements: vec![Vector::from_vec(vec![1e300]), Vector::from_vec(vec![-0.0])],
        };
        let aug = AugmentationRecord {
            w_factors: vec![0.81, 1.19],
            v_factors: vec![1.0],
        };
        let text = format!("{}\n", trajectory_record(&traj, &aug));
        let (t, a) = parse_trajectories(&text).unwrap();
        assert_eq!(t, vec![traj]);
        assert_eq!(a, vec![aug]);
    }
}

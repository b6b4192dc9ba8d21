//! Dataset directories: `meta.json` plus raw little-endian row-major
//! `X.f64` (n×p) and `Z.f64` (n×q). Random constants are not stored; they
//! are rebuilt from the setting seed on load.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Dataset, Rbf, SettingId, SettingParams, SettingSpec, Splits};
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "cdgm-dataset-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub setting: SettingId,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Seed of the per-sample streams.
    pub seed: u64,
    /// Seed of the setting's random constants.
    pub setting_seed: u64,
    pub splits: Splits,
    pub params: SettingParams,
    /// Informational copy of the RBF constants (G2/N2).
    pub rbf: Option<Rbf>,
}

fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes for {rows}x{cols}, found {}",
                rows * cols * 8,
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        setting: data.spec.id,
        n: data.n(),
        p: data.p(),
        q: data.q(),
        seed: data.seed,
        setting_seed: data.spec.seed,
        splits: data.splits,
        params: data.spec.params.clone(),
        rbf: data.spec.rbf.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    write_matrix(&dir.join("X.f64"), data.x.view())?;
    write_matrix(&dir.join("Z.f64"), data.z.view())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let bad = |reason: String| Error::Format {
        path: meta_path.clone(),
        reason,
    };
    if meta.format != DATASET_FORMAT {
        return Err(bad(format!("unsupported format {:?}", meta.format)));
    }
    if meta.splits.total() != meta.n {
        return Err(bad("split sizes do not sum to n".into()));
    }
    let spec = SettingSpec::with_params(meta.setting, meta.params.clone(), meta.setting_seed)?;
    if spec.p() != meta.p || spec.q() != meta.q {
        return Err(bad("dimensions disagree with the setting parameters".into()));
    }
    if meta.rbf.is_some() && meta.rbf != spec.rbf {
        return Err(bad("stored RBF constants differ from the regenerated ones".into()));
    }
    let x = read_matrix(&dir.join("X.f64"), meta.n, meta.p)?;
    let z = read_matrix(&dir.join("Z.f64"), meta.n, meta.q)?;
    Ok(Dataset {
        spec,
        seed: meta.seed,
        splits: meta.splits,
        x,
        z,
    })
}

fn write_csv(path: &Path, prefix: &str, m: ArrayView2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `X.csv` and `Z.csv` next to the binary files.
pub fn export_csv(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("X.csv"), "x", data.x.view())?;
    write_csv(&dir.join("Z.csv"), "z", data.z.view())?;
    Ok(())
}

//! Maps modality ids to datasets derived from an MNIST-layout directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmas_core::data::{gen_synthetic_modality, load_mnist_dir, mnist_transform, IdxPart};
use cmas_core::{Dataset, SyntheticSpec};

pub const KNOWN: [&str; 6] = ["mnist", "mnist-rot90", "mnist-invert", "mnist-rotinv", "mnist-perm", "fmnist"];

fn files(dir: &Path, part: IdxPart) -> [PathBuf; 2] {
    let p = match part {
        IdxPart::Train => "train",
        IdxPart::Test => "t10k",
    };
    [
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    ]
}

/// The dataset for `id` plus the files it was read from. `limit` keeps the
/// first items only.
pub fn load(id: &str, data_dir: &Path, part: IdxPart, limit: Option<usize>) -> Result<(Dataset, Vec<PathBuf>)> {
    let dir = match id {
        "fmnist" => data_dir.join("fashion"),
        _ if id == "mnist" || mnist_transform(id).is_some() => data_dir.to_path_buf(),
        _ => bail!("unknown modality `{id}` (known: {})", KNOWN.join(", ")),
    };
    let base_id = if id == "fmnist" { "fmnist" } else { "mnist" };
    let base = load_mnist_dir(&dir, part, base_id)
        .with_context(|| format!("loading `{id}` from {}", dir.display()))?;
    let base = match limit {
        Some(n) => base.head(n),
        None => base,
    };
    let ds = match mnist_transform(id) {
        Some(t) => gen_synthetic_modality(&base, SyntheticSpec::new(t), 0)?,
        None => base,
    };
    debug_assert_eq!(ds.modality_id, id);
    Ok((ds, files(&dir, part).to_vec()))
}

//! Checkpoints: a directory holding a text manifest (`name shape offset`
//! per line, offset counted in values) and one blob of little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::ParamStore;

pub const MANIFEST_FILE: &str = "params.txt";
pub const BLOB_FILE: &str = "params.f64";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(8 * store.num_scalars());
    let mut manifest = String::new();
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        manifest.push_str(&format!("{name} {} {offset}\n", shape_str(t.shape())));
        t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        offset += t.len();
    }
    let (m, b) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    fs::write(&b, blob).map_err(|e| Error::io(&b, e))
}

/// Overwrites every parameter of `store` from the checkpoint. Names and
/// shapes must match exactly, in both directions. Values round-trip exactly.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let (m, b) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
    let manifest = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let blob = fs::read(&b).map_err(|e| Error::io(&b, e))?;
    let mut seen = vec![false; store.len()];
    let mut updates = Vec::with_capacity(store.len());
    for (lineno, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = parts[..] else {
            return Err(Error::Checkpoint(format!("{}:{}: expected `name shape offset`", m.display(), lineno + 1)));
        };
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint parameter `{name}` does not exist in the model")))?;
        let want = shape_str(store.get(id).shape());
        if shape != want {
            return Err(Error::Checkpoint(format!("`{name}`: checkpoint shape {shape}, model shape {want}")));
        }
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{}:{}: bad offset `{offset}`", m.display(), lineno + 1)))?;
        let len = store.get(id).len();
        let bytes = offset
            .checked_add(len)
            .and_then(|end| blob.get(8 * offset..8 * end))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: values {offset}..{} past end of {}", offset + len, b.display())))?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("`{name}` listed twice")));
        }
        updates.push((id, data));
    }
    let total: usize = store.ids().map(|id| store.get(id).len()).sum();
    if blob.len() != 8 * total {
        return Err(Error::Checkpoint(format!("{} holds {} bytes, expected {}", b.display(), blob.len(), 8 * total)));
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Checkpoint(format!("model parameter `{}` missing from checkpoint", store.name(missing))));
    }
    for (id, data) in updates {
        store.get_mut(id).data_mut().copy_from_slice(&data);
    }
    Ok(())
}

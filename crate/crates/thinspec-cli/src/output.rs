use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error, what: &str| CliError::Io(format!("cli::write_atomic: {what} {}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(|e| io(e, "creating directory for"))?;
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io(e, "creating temporary file for"))?;
    f.write_all(bytes).map_err(|e| io(e, "writing"))?;
    f.sync_all().map_err(|e| io(e, "syncing"))?;
    drop(f);
    fs::rename(&tmp, dir.join(name)).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e, "renaming into")
    })
}

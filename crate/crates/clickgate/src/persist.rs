//! Whitelist and cookie-jar files.
//!
//! The whitelist file is a JSON array of `{"thirdParty": .., "site": ..}`
//! objects. The jar file holds the active cookies and the quarantine
//! buckets. Both are written atomically (temporary file, then rename). A
//! missing file loads as empty.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clickgate_core::cookie::JarSnapshot;
use clickgate_core::{CookieJar, RegistrableDomain, SitePair};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("cannot access {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {}: {source}", path.display())]
    Format { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WhitelistEntry {
    pub third_party: String,
    pub site: String,
}

impl From<&SitePair> for WhitelistEntry {
    fn from(p: &SitePair) -> Self {
        Self { third_party: p.third_party.to_string(), site: p.site.to_string() }
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, PersistError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(PersistError::Io { path: path.to_path_buf(), source }),
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PersistError> {
    let io_err = |source| PersistError::Io { path: path.to_path_buf(), source };
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(contents).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Entries are returned as stored; callers canonicalize domains.
pub fn load_whitelist(path: &Path) -> Result<Vec<WhitelistEntry>, PersistError> {
    let Some(text) = read_optional(path)? else {
        return Ok(Vec::new());
    };
    serde_json::from_str(&text).map_err(|source| PersistError::Format { path: path.to_path_buf(), source })
}

pub fn save_whitelist<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a SitePair>) -> Result<(), PersistError> {
    let entries: Vec<WhitelistEntry> = pairs.into_iter().map(WhitelistEntry::from).collect();
    let mut text = serde_json::to_string_pretty(&entries).expect("whitelist serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_jar(path: &Path) -> Result<CookieJar, PersistError> {
    let Some(text) = read_optional(path)? else {
        return Ok(CookieJar::new());
    };
    let snapshot: JarSnapshot =
        serde_json::from_str(&text).map_err(|source| PersistError::Format { path: path.to_path_buf(), source })?;
    Ok(CookieJar::from_snapshot(snapshot))
}

pub fn save_jar(path: &Path, jar: &CookieJar) -> Result<(), PersistError> {
    let mut text = serde_json::to_string_pretty(&jar.snapshot()).expect("jar serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

impl WhitelistEntry {
    pub fn to_pair(&self, canonicalize: impl Fn(&str) -> RegistrableDomain) -> SitePair {
        SitePair::new(canonicalize(&self.third_party), canonicalize(&self.site))
    }
}

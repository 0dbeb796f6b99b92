use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::jobs::JobRecord;

const SCENARIOS: &str = "scenarios";
const JOBS: &str = "jobs";
const RESULT_SUFFIX: &str = ".result.json";

/// Client-chosen names: lowercase letters, digits, `-` and `_`, starting
/// with a letter or digit, at most 64 characters.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit())
        && name.len() <= 64
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

/// One JSON document per scenario, job record and job result.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    /// Creates the directory layout and checks that it is writable.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in [SCENARIOS, JOBS] {
            fs::create_dir_all(root.join(sub))?;
        }
        let probe = tempfile::NamedTempFile::new_in(root.join(JOBS))?;
        drop(probe);
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    fn write_atomic(&self, dir: &str, file: &str, bytes: &[u8]) -> io::Result<()> {
        let dir = self.root.join(dir);
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(dir.join(file)).map_err(|e| e.error)?;
        Ok(())
    }

    fn read(&self, dir: &str, file: &str) -> io::Result<Option<String>> {
        match fs::read_to_string(self.root.join(dir).join(file)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Stores a canonical scenario document; returns true if the name was new.
    pub fn put_scenario(&self, name: &str, canonical: &str) -> io::Result<bool> {
        let lock = self.lock_for(&format!("scenario/{name}"));
        let _guard = lock.lock().expect("scenario lock poisoned");
        let file = format!("{name}.json");
        let existed = self.root.join(SCENARIOS).join(&file).exists();
        self.write_atomic(SCENARIOS, &file, canonical.as_bytes())?;
        Ok(!existed)
    }

    pub fn get_scenario(&self, name: &str) -> io::Result<Option<String>> {
        let lock = self.lock_for(&format!("scenario/{name}"));
        let _guard = lock.lock().expect("scenario lock poisoned");
        self.read(SCENARIOS, &format!("{name}.json"))
    }

    /// Stored scenario names in sorted order.
    pub fn list_scenarios(&self) -> io::Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(self.root.join(SCENARIOS))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()?
                    .strip_suffix(".json")
                    .map(str::to_string)
            })
            .filter(|n| is_valid_name(n))
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn put_job(&self, record: &JobRecord) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(record).map_err(io::Error::other)?;
        self.write_atomic(JOBS, &format!("{}.json", record.id), &bytes)
    }

    pub fn put_result(&self, id: &str, document: &str) -> io::Result<()> {
        self.write_atomic(JOBS, &format!("{id}{RESULT_SUFFIX}"), document.as_bytes())
    }

    pub fn get_result(&self, id: &str) -> io::Result<Option<String>> {
        self.read(JOBS, &format!("{id}{RESULT_SUFFIX}"))
    }

    /// Every readable job record; unreadable files are logged and skipped.
    pub fn load_jobs(&self) -> io::Result<Vec<JobRecord>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join(JOBS))? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if !name.ends_with(".json") || name.ends_with(RESULT_SUFFIX) {
                continue;
            }
            match fs::read_to_string(&path).map(|s| serde_json::from_str::<JobRecord>(&s)) {
                Ok(Ok(r)) => out.push(r),
                Ok(Err(e)) => log::warn!("skipping unreadable job record {}: {e}", path.display()),
                Err(e) => log::warn!("skipping job record {}: {e}", path.display()),
            }
        }
        out.sort_by_key(|r| r.seq);
        Ok(out)
    }
}

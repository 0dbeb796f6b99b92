use std::path::PathBuf;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_MAX_REPS: usize = 20_000;
pub const DEFAULT_DATA_DIR: &str = "./data";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    /// Largest `reps` a simulation request may ask for.
    pub max_reps: usize,
    /// Worker threads for simulation jobs; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from(DEFAULT_DATA_DIR),
            port: DEFAULT_PORT,
            max_reps: DEFAULT_MAX_REPS,
            threads: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `SMARTB_DATA_DIR`, `SMARTB_PORT` and `SMARTB_MAX_REPS`.
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut c = Self::default();
        if let Some(d) = get("SMARTB_DATA_DIR") {
            c.data_dir = PathBuf::from(d);
        }
        if let Some(p) = get("SMARTB_PORT") {
            c.port = p
                .parse()
                .map_err(|_| format!("SMARTB_PORT={p:?} is not a port number"))?;
        }
        if let Some(m) = get("SMARTB_MAX_REPS") {
            c.max_reps = m
                .parse()
                .ok()
                .filter(|&m: &usize| m > 0)
                .ok_or_else(|| format!("SMARTB_MAX_REPS={m:?} is not a positive integer"))?;
        }
        Ok(c)
    }
}

use std::fmt;
use std::path::{Path, PathBuf};

use fuselab::adapters::{AdapterConfig, Variant};
use fuselab::config::{ModelSpec, RunConfig};
use fuselab::model::ModelConfig;
use fuselab::tensor::MatmulPolicy;
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use crate::{AdapterArgs, ModelArgs};

/// Largest model the CLI will materialise in memory.
pub const MAX_PAYLOAD_BYTES: u64 = 2 << 30;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verify(String),
    Runtime(fuselab::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<fuselab::Error> for CliError {
    fn from(e: fuselab::Error) -> Self {
        match e {
            fuselab::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parse a snake_case enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| CliError::Usage(format!("--{what}: {e}")))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Model spec from `--preset`, else the config file, else `fallback`.
pub fn model_spec(args: &ModelArgs, cfg: &RunConfig, fallback: Option<&str>) -> CliResult<(ModelSpec, ModelConfig)> {
    let spec = match (&args.preset, &cfg.model, fallback) {
        (Some(p), _, _) => ModelSpec::preset(p),
        (None, Some(m), _) => m.clone(),
        (None, None, Some(p)) => ModelSpec::preset(p),
        (None, None, None) => return usage("a model is required: pass --preset or a --config with \"model\""),
    };
    let resolved = spec.resolve()?;
    Ok((spec, resolved))
}

pub fn preset_name(spec: &ModelSpec) -> Option<&str> {
    match spec {
        ModelSpec::Preset(p) => Some(&p.preset),
        ModelSpec::Explicit(_) => None,
    }
}

/// Adapter config from flags layered over the config file.
pub fn adapter_config(args: &AdapterArgs, cfg: &RunConfig, default_rank: Option<usize>) -> CliResult<AdapterConfig> {
    let variant = match (&args.variant, &cfg.adapter) {
        (Some(v), _) => Variant::parse(v)?,
        (None, Some(a)) => a.variant,
        (None, None) => return usage("--variant is required"),
    };
    if args.rank == Some(0) {
        return usage("--rank must be at least 1");
    }
    let mut a = match &cfg.adapter {
        Some(a) => AdapterConfig { variant, ..a.clone() },
        None => AdapterConfig::new(variant, 0),
    };
    match (args.rank, cfg.adapter.as_ref(), default_rank) {
        (Some(r), _, _) => a.rank = r,
        (None, Some(_), _) => {}
        (None, None, Some(r)) => a.rank = r,
        (None, None, None) if variant == Variant::None => {}
        (None, None, None) => return usage(format!("--rank is required for {variant}")),
    }
    if let Some(p) = &args.placement {
        a.placement = parse_enum("placement", p)?;
    }
    if let Some(s) = &args.init {
        a.init = parse_enum("init", s)?;
    }
    if let Some(s) = &args.merge {
        a.zflora_merge = parse_enum("merge", s)?;
    }
    if let Some(s) = &args.expand {
        a.zflora_expand = parse_enum("expand", s)?;
    }
    if args.drop_dead_adapter {
        a.drop_dead_adapter = true;
    }
    if let Some(s) = args.seed.or(cfg.seed) {
        a.seed = s;
    }
    Ok(a)
}

/// Refuse models that would not fit in memory at `bytes` per parameter.
pub fn ensure_fits(model: &ModelConfig, bytes: u64) -> CliResult<()> {
    let need = model.base_param_count() * bytes;
    if need > MAX_PAYLOAD_BYTES {
        return Err(CliError::Runtime(fuselab::Error::Environment(format!(
            "model needs {:.1} GiB, above the {} GiB in-memory limit; use a smaller preset",
            need as f64 / (1u64 << 30) as f64,
            MAX_PAYLOAD_BYTES >> 30
        ))));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `12345678` → `12,345,678`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn policy() -> MatmulPolicy {
    MatmulPolicy::from_env(1)
}

/// Sidecar path for the resolved config of a file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

/// Echo the resolved config and write it to `path`.
pub fn record_config(cfg: &RunConfig, path: &Path) -> CliResult<()> {
    eprintln!("resolved config ({}):\n{}", path.display(), cfg.to_json());
    cfg.save(path)?;
    Ok(())
}

pub fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(fuselab::Error::from)?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_groups() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
        assert_eq!(group_digits(83_886_080), "83,886,080");
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("/t/base.ftc")), PathBuf::from("/t/base.config.json"));
        assert_eq!(sidecar(Path::new("x")), PathBuf::from("x.config.json"));
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}

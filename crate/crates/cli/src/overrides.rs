//! Layered configuration: defaults < file < `--set` and dedicated flags.

use prn::{PrnConfig, PrnError, Result};
use toml::{Table, Value};

use crate::args::ConfigArgs;

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PrnError::config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PrnError::config(format!("`{part}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Resolves the configuration; `extra` are `(key, value)` pairs from
/// dedicated flags, applied after `--set`.
pub fn resolve(args: &ConfigArgs, extra: &[(&str, Option<Value>)]) -> Result<PrnConfig> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PrnError::io(path, e))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| PrnError::config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for item in &args.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| PrnError::config(format!("`--set {item}` is not of the form KEY=VALUE")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = args.seed {
        set_path(&mut table, "seed", Value::Integer(seed as i64))?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            set_path(&mut table, key, v.clone())?;
        }
    }
    let text = toml::to_string(&table).map_err(|e| PrnError::config(e.to_string()))?;
    PrnConfig::from_toml_str(&text)
}

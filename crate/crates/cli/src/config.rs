//! JSON config files. Every key names a flag of the invoked subcommand;
//! values given on the command line win.
//!
//! ```json
//! { "seed": 7, "backend": { "kind": "http" }, "train": { "epochs": 3 } }
//! ```
//!
//! Nested objects are flattened with `-` (`backend.kind` is `--backend-kind`),
//! underscores become dashes, and an object named after a subcommand applies
//! only to that subcommand.

use std::path::PathBuf;

use clap::{ArgAction, Command};
use serde_json::{Map, Value};

pub const CONFIG_ENV: &str = "ECGALIGN_CONFIG";

/// Global flags that take a value.
const VALUED_GLOBALS: [&str; 2] = ["--config", "--seed"];

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    std::env::var_os(CONFIG_ENV).map(PathBuf::from)
}

fn subcommand_position(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if VALUED_GLOBALS.contains(&a.as_str()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn flag_name(key: &str) -> String {
    key.replace(['_', '.'], "-")
}

fn flatten(
    prefix: &str,
    obj: &Map<String, Value>,
    subcommands: &[String],
    active: &str,
    out: &mut Vec<(String, Value)>,
) {
    for (k, v) in obj {
        let name = if prefix.is_empty() {
            flag_name(k)
        } else {
            format!("{prefix}-{}", flag_name(k))
        };
        match v {
            Value::Object(inner) if prefix.is_empty() && subcommands.contains(&name) => {
                if name == active {
                    flatten("", inner, &[], active, out);
                }
            }
            Value::Object(inner) => flatten(&name, inner, &[], active, out),
            _ => out.push((name, v.clone())),
        }
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Splices flags from the config file into `argv` right after the
/// subcommand name. Errors are usage errors.
pub fn expand(argv: Vec<String>, cmd: &Command) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(pos) = subcommand_position(&argv) else {
        return Ok(argv);
    };
    let active = argv[pos].clone();
    let Some(sub) = cmd.find_subcommand(&active) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
    let Value::Object(root) = root else {
        return Err(format!("config {} must hold a JSON object", path.display()));
    };
    let subcommands: Vec<String> = cmd
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let mut entries = Vec::new();
    flatten("", &root, &subcommands, &active, &mut entries);

    let mut injected = Vec::new();
    for (name, value) in entries {
        if name == "config" {
            return Err("config files cannot name another config".into());
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(name.as_str()))
            .ok_or_else(|| format!("unknown config key {name:?} for `{active}`"))?;
        let flag = format!("--{name}");
        let given = argv
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        let bad = || format!("config key {name:?} has an unsupported value {value}");
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                Value::Bool(true) => injected.push(flag),
                Value::Bool(false) => {}
                _ => return Err(bad()),
            },
            ArgAction::Count => {
                let n = value.as_u64().ok_or_else(bad)?;
                injected.extend(std::iter::repeat_n(flag, n as usize));
            }
            _ => match &value {
                Value::Null => {}
                Value::Array(items) => {
                    let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                    injected.push(flag);
                    injected.push(parts.ok_or_else(bad)?.join(","));
                }
                v => {
                    injected.push(flag);
                    injected.push(scalar(v).ok_or_else(bad)?);
                }
            },
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn subcommand_after_valued_globals() {
        assert_eq!(
            subcommand_position(&argv(&["x", "--seed", "3", "-v", "train"])),
            Some(4)
        );
        assert_eq!(subcommand_position(&argv(&["x", "--help"])), None);
    }

    #[test]
    fn flattening_and_sections() {
        let root: Value = serde_json::json!({
            "backend": {"kind": "http", "timeout_ms": 5},
            "train": {"epochs": 3},
            "report": {"tau_form": 0.4},
            "seed": 1
        });
        let subs = vec!["train".to_string(), "report".to_string()];
        let mut out = Vec::new();
        flatten("", root.as_object().unwrap(), &subs, "report", &mut out);
        let names: Vec<&str> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["backend-kind", "backend-timeout-ms", "tau-form", "seed"]
        );
    }
}

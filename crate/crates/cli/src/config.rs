//! `--config FILE`: TOML defaults spliced in as flags.
//!
//! Every top-level key names a long flag (`blur_kernel` or `blur-kernel`).
//! Keys that the chosen subcommand does not take are skipped; keys no
//! subcommand takes are an error. Flags already present on the command line
//! are left out, so the command line overrides the file.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

fn render(key: &str, value: &toml::Value) -> Result<Option<String>> {
    Ok(Some(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(true) => return Ok(None),
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>> = items
                .iter()
                .map(|v| match render(key, v)? {
                    Some(s) => Ok(s),
                    None => bail!("config key {key}: nested booleans are not flags"),
                })
                .collect();
            parts?.join(",")
        }
        other => bail!("config key {key}: unsupported value {other}"),
    }))
}

fn takes_flag(cmd: &Command, long: &str) -> bool {
    cmd.get_arguments().any(|a| a.get_long() == Some(long))
}

fn given(user: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    user.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&format!("{flag}="))
    })
}

/// Flags derived from `path` for subcommand `sub`, minus those in `user`.
pub fn config_flags(path: &Path, root: &Command, sub: &str, user: &[OsString]) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", path.display()))?;
    let sub_cmd = root
        .find_subcommand(sub)
        .with_context(|| format!("unknown subcommand {sub}"))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        let long = key.replace('_', "-");
        if long == "config" {
            bail!("config key {key}: config files cannot nest");
        }
        if !takes_flag(sub_cmd, &long) {
            if !root.get_subcommands().any(|c| takes_flag(c, &long)) {
                bail!("config key {key} matches no flag");
            }
            continue;
        }
        if given(user, &long) || matches!(value, toml::Value::Boolean(false)) {
            continue;
        }
        out.push(OsString::from(format!("--{long}")));
        if let Some(v) = render(key, value)? {
            out.push(OsString::from(v));
        }
    }
    Ok(out)
}

/// Index of the subcommand token in `argv`, skipping global options.
pub fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flags_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "gamma = 0.6\nblur_kernel = 9\nprovider = \"mock:x.json\"\nseeds = [1, 2]\n").unwrap();
        let root = crate::args::Cli::command();
        let flags = config_flags(&p, &root, "auxview", &[]).unwrap();
        assert_eq!(flags, ["--blur-kernel", "9", "--gamma", "0.6"].map(OsString::from));
        let user = ["--gamma=0.3".into()];
        let flags = config_flags(&p, &root, "auxview", &user).unwrap();
        assert_eq!(flags, ["--blur-kernel", "9"].map(OsString::from));
        let flags = config_flags(&p, &root, "eval", &[]).unwrap();
        assert!(flags.contains(&OsString::from("1,2")));

        std::fs::write(&p, "colour = \"red\"\n").unwrap();
        assert!(config_flags(&p, &root, "eval", &[]).is_err());
    }

    #[test]
    fn finds_subcommand() {
        let argv: Vec<OsString> = ["oavcd", "--config", "c.toml", "-v", "eval", "--gamma", "0.5"]
            .map(OsString::from)
            .to_vec();
        assert_eq!(subcommand_index(&argv), Some(4));
    }
}

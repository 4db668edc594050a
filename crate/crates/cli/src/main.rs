//! `counterpoint` command-line tool.

mod args;
mod commands;
mod maskspec;
mod score;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;
use commands::Failure;

/// Splices the flags of a `--config FILE` JSON object in front of the explicit flags so that the
/// command line takes precedence.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    for (k, a) in argv.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = argv.get(k + 1).map(|p| p.to_string_lossy().into_owned());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_owned());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    if argv.len() < 2 {
        return Ok(argv);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("malformed config {path}: {e}"))?;
    let object = value.as_object().ok_or_else(|| format!("config {path} must be a JSON object"))?;
    let mut injected = Vec::new();
    for (key, v) in object {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            return Err("config files cannot nest --config".into());
        }
        let scalar = |v: &serde_json::Value| -> Result<String, String> {
            match v {
                serde_json::Value::String(s) => Ok(s.clone()),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                other => Err(format!("config key '{key}' has unsupported value {other}")),
            }
        };
        match v {
            serde_json::Value::Bool(true) => injected.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                for item in items {
                    injected.push(flag.clone());
                    injected.push(scalar(item)?);
                }
            }
            other => {
                injected.push(flag);
                injected.push(scalar(other)?);
            }
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn run(argv: Vec<OsString>) -> ExitCode {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    run(std::env::args_os().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_flags_come_before_explicit_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"steps": 7, "log_wallclock": true, "fix_voice": ["bass", "alto"], "patience": null}"#,
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let out = expand_config(os(&["counterpoint", "train", "--config", p, "--steps", "9"])).unwrap();
        let expected = os(&[
            "counterpoint",
            "train",
            "--fix-voice",
            "bass",
            "--fix-voice",
            "alto",
            "--log-wallclock",
            "--steps",
            "7",
            "--config",
            p,
            "--steps",
            "9",
        ]);
        assert_eq!(out, expected);
    }

    #[test]
    fn explicit_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": 7, "seed": 4}"#).unwrap();
        let argv = expand_config(os(&[
            "counterpoint",
            "train",
            "--data",
            "d.json",
            "--config",
            path.to_str().unwrap(),
            "--steps",
            "9",
        ]))
        .unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        match cli.command {
            args::Command::Train(t) => {
                assert_eq!(t.steps, 9);
                assert_eq!(t.common.seed, 4);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn bad_config_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": {"a": 1}}"#).unwrap();
        assert!(expand_config(os(&["counterpoint", "train", "--config", path.to_str().unwrap()])).is_err());
        std::fs::write(&path, "[1]").unwrap();
        assert!(expand_config(os(&["counterpoint", "train", "--config", path.to_str().unwrap()])).is_err());
    }
}

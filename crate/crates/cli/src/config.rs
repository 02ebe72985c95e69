//! `key=value` configuration files. Each key names a long flag; the pairs
//! are appended to the command line so that they take precedence over it.

use std::path::Path;

use fusionhead::{Error, Result};

/// Turns the file into `--key=value` arguments. `key=true` becomes a bare
/// `--key` and `key=false` is dropped, so boolean flags can be set too.
pub fn config_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

pub fn parse_config(text: &str) -> std::result::Result<Vec<String>, (usize, String)> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| (i + 1, format!("expected key=value, found {line:?}")))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key.starts_with('-') {
            return Err((i + 1, format!("bad key {key:?}")));
        }
        if key == "config" {
            return Err((i + 1, "a config file cannot name another config file".into()));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => args.push(format!("--{key}={value}")),
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_become_flags() {
        let args = parse_config("# run\nlr = 0.001\nbatch_size=16 # small\n\nimages=true\nfoo=false\n").unwrap();
        assert_eq!(args, vec!["--lr=0.001", "--batch-size=16", "--images"]);
    }

    #[test]
    fn malformed_lines_name_their_line() {
        assert_eq!(parse_config("seed=1\nnonsense\n").unwrap_err().0, 2);
        assert!(parse_config("config=x").is_err());
    }
}

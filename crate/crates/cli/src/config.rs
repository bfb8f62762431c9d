//! `key = value` configuration files and their merge with command-line
//! flags. Precedence: flag, then file, then built-in default.

use dnp_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                detail: format!("line {} is not `key = value`", i + 1),
            })?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                FileConfig::parse(&text, p)
            }
        }
    }

    /// Rejects keys that no flag of the current command accepts.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown configuration key {k:?}"))),
            None => Ok(()),
        }
    }

    /// `flag` if given, else the file's value for `key`, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("configuration value {key} = {v:?} is invalid"))
            }),
        }
    }

    pub fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.pick_opt::<bool>(None, key).map(|v| v.unwrap_or(false))
    }
}

/// Comma-separated pair `a,b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair<T>(pub T, pub T);

impl<T: FromStr> FromStr for Pair<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected two comma-separated values, got {s:?}"))?;
        let p = |x: &str| {
            x.trim()
                .parse::<T>()
                .map_err(|_| format!("bad value {x:?}"))
        };
        Ok(Pair(p(a)?, p(b)?))
    }
}

/// Comma-separated list.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<T>()
                    .map_err(|_| format!("bad value {x:?}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_parsing() {
        let f =
            FileConfig::parse("iters = 50 # short run\nlr_head=0.01\n\n", Path::new("c")).unwrap();
        assert_eq!(f.pick::<usize>(None, "iters", 7).unwrap(), 50);
        assert_eq!(f.pick(Some(3usize), "iters", 7).unwrap(), 3);
        assert_eq!(f.pick::<usize>(None, "batch", 7).unwrap(), 7);
        assert_eq!(f.pick::<f64>(None, "lr-head", 1.0).unwrap(), 0.01);
        assert!(f.pick::<bool>(None, "iters", false).is_err());
        assert!(f.check_keys(&["iters", "lr-head"]).is_ok());
        assert!(f.check_keys(&["iters"]).is_err());
        assert!(FileConfig::parse("novalue\n", Path::new("c")).is_err());
    }

    #[test]
    fn pairs_and_lists() {
        assert_eq!("50,50".parse::<Pair<usize>>().unwrap(), Pair(50, 50));
        assert!("50".parse::<Pair<usize>>().is_err());
        assert_eq!("1, 2,3".parse::<List<u64>>().unwrap(), List(vec![1, 2, 3]));
    }
}

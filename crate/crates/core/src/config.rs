//! Flat `key=value` settings for the configuration structs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A struct whose fields can be listed and set by name from text.
pub trait Settings: Default {
    /// Every field as `(name, value)` in declaration order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Parses `value` into the named field. Unknown names are errors.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Defaults overridden by every entry of `map`.
    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in map {
            s.set(k, v)?;
        }
        Ok(s)
    }
}

/// Implements [`Settings`] for a struct of `FromStr + Display` fields.
#[macro_export]
macro_rules! impl_settings {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::Settings for $ty {
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }

            fn set(&mut self, key: &str, value: &str) -> $crate::Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse().map_err(|_| {
                            $crate::Error::Config(format!("invalid value {value:?} for {key}"))
                        })?;
                    })*
                    _ => return Err($crate::Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; repeated keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq)]
    struct Demo {
        steps: usize,
        lr: f64,
        flag: bool,
    }

    impl_settings!(Demo { steps, lr, flag });

    #[test]
    fn set_and_round_trip() {
        let mut d = Demo::default();
        d.set("steps", "12").unwrap();
        d.set("lr", "0.1").unwrap();
        d.set("flag", "true").unwrap();
        assert_eq!(Demo::from_map(&d.to_map()).unwrap(), d);
        assert!(matches!(d.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(d.set("steps", "x"), Err(Error::Config(_))));
    }

    #[test]
    fn kv_parsing() {
        let m = parse_kv("# c\n a = 1\n\nb.c=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b.c"], "x=y");
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("novalue").is_err());
        assert_eq!(parse_kv(&format_kv(&m)).unwrap(), m);
    }
}

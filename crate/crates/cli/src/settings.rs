use landtune::kv::KvDoc;

use crate::{CliError, Result};

/// Option lookup: command-line value, then `<verb>.<key>` in the config
/// file, then the default.
pub struct Settings<'a> {
    doc: &'a KvDoc,
    verb: &'a str,
}

impl<'a> Settings<'a> {
    pub fn new(doc: &'a KvDoc, verb: &'a str) -> Self {
        Settings { doc, verb }
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.verb)
    }

    pub fn text(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.doc.get(&self.key(key)).map(str::to_string))
    }

    pub fn get<T: ParseOpt>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.doc.get(&self.key(key)) {
            None => Ok(default),
            Some(raw) => T::parse_opt(raw)
                .ok_or_else(|| CliError::Usage(format!("config `{}`: bad value `{raw}`", self.key(key)))),
        }
    }
}

pub trait ParseOpt: Sized {
    fn parse_opt(raw: &str) -> Option<Self>;
}

macro_rules! parse_opt {
    ($($t:ty),*) => {$(
        impl ParseOpt for $t {
            fn parse_opt(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
        }
        impl ParseOpt for Option<$t> {
            fn parse_opt(raw: &str) -> Option<Self> {
                raw.parse().ok().map(Some)
            }
        }
    )*};
}

parse_opt!(usize, u64, f32, f64, bool);

/// Parse a comma-separated list; empty items are skipped.
pub fn list<T>(text: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(CliError::Usage))
        .collect()
}

//! Line-oriented `key = value` run configuration with one section per command.
//!
//! ```text
//! # comments start with '#'
//! [train]
//! preset = snn-mlp
//! epochs = 10
//!
//! [attack]
//! method = blv2
//! ```

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    sections: Vec<(String, Vec<(String, String, usize)>)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, Vec<(String, String, usize)>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let n = i + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if sections.iter().any(|(s, _)| s == name) {
                    return Err(Error::Config(format!("line {n}: duplicate section [{name}]")));
                }
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`")))?;
            let entries = &mut sections
                .last_mut()
                .ok_or_else(|| Error::Config(format!("line {n}: `{}` appears before any [section]", k.trim())))?
                .1;
            entries.push((k.trim().to_string(), v.trim().to_string(), n));
        }
        Ok(Self { sections })
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(s, _)| s.as_str())
    }
}

/// Ordered settings for one command: defaults, then file values, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: String,
    entries: Vec<(String, String)>,
}

impl Settings {
    pub fn new(command: &str, defaults: &[(&str, &str)]) -> Self {
        Self {
            command: command.to_string(),
            entries: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Applies the file's section for this command.
    ///
    /// Sections of other known commands are ignored; unknown keys in this
    /// command's section and unknown section names are errors.
    pub fn apply_file(&mut self, file: &ConfigFile, known_sections: &[&str]) -> Result<()> {
        for (name, entries) in &file.sections {
            if !known_sections.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown config section [{name}]")));
            }
            if *name != self.command {
                continue;
            }
            for (k, v, line) in entries {
                self.set(k, v)
                    .map_err(|_| Error::Config(format!("line {line}: unknown key `{k}` in [{name}]")))?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}` for {}", self.command)))?;
        slot.1 = value.to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("`{key}` is not a declared setting"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
    }

    /// Empty strings read as `None`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    /// The effective configuration, loadable again as a config file.
    pub fn render(&self) -> String {
        let mut out = format!("[{}]\n", self.command);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KNOWN: &[&str] = &["train", "attack"];

    fn settings() -> Settings {
        Settings::new("train", &[("epochs", "10"), ("lr", "0.001"), ("out", "")])
    }

    #[test]
    fn file_then_flags() {
        let file = ConfigFile::parse("# c\n[attack]\nmethod = blv1\n\n[train]\nepochs = 3\nlr=0.01\n").unwrap();
        let mut s = settings();
        s.apply_file(&file, KNOWN).unwrap();
        assert_eq!(s.parse::<usize>("epochs").unwrap(), 3);
        s.set("epochs", "5").unwrap();
        assert_eq!(s.parse::<usize>("epochs").unwrap(), 5);
        assert_eq!(s.parse::<f64>("lr").unwrap(), 0.01);
        assert_eq!(s.optional::<String>("out").unwrap(), None);
    }

    #[test]
    fn render_round_trips() {
        let mut s = settings();
        s.set("lr", "0.5").unwrap();
        let mut again = settings();
        again.apply_file(&ConfigFile::parse(&s.render()).unwrap(), KNOWN).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn errors_are_config_errors() {
        let mut s = settings();
        for text in [
            "[train]\nbogus = 1\n",
            "[nope]\n",
            "epochs = 1\n",
            "[train]\nno equals sign\n",
            "[train]\n[train]\n",
        ] {
            let r = ConfigFile::parse(text).and_then(|f| s.apply_file(&f, KNOWN));
            assert!(matches!(r, Err(Error::Config(_))), "{text:?}");
        }
        assert!(matches!(s.set("bogus", "1"), Err(Error::Config(_))));
        s.set("epochs", "ten").unwrap();
        assert!(matches!(s.parse::<usize>("epochs"), Err(Error::Config(_))));
    }
}

//! Flat `key=value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use naturamap::optim::TrainConfig;
use naturamap::{ArchConfig, Error, Result, SynthParams, Variant};

/// Keys that are not owned by one of the library config structs.
pub const RUN_KEYS: [&str; 9] = [
    "data", "out", "ae", "model", "variant", "split", "n_train", "n_val", "n_test",
];

/// Ordered `key=value` entries; later entries win.
#[derive(Clone, Debug, Default)]
pub struct Entries(Vec<(String, String)>);

impl Entries {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{origin}:{}: expected key=value, got `{line}`", i + 1))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Entries(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn push_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    /// `--set key=value` arguments.
    pub fn push_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got `{s}`")))?;
            self.push(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn extend(&mut self, other: Entries) {
        self.0.extend(other.0);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.iter().any(|(k, _)| k == key)
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub synth: SynthParams,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub run: BTreeMap<String, String>,
}

impl RunConfig {
    /// Applies entries on top of the given defaults. A key may belong to
    /// several structs (`patch_size`); keys nobody owns are rejected.
    pub fn resolve(
        entries: &Entries,
        synth: SynthParams,
        arch: ArchConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        let mut cfg = RunConfig {
            synth,
            arch,
            train,
            run: BTreeMap::new(),
        };
        for (k, v) in &entries.0 {
            let mut known = RUN_KEYS.contains(&k.as_str());
            if known {
                cfg.run.insert(k.clone(), v.clone());
            }
            known |= cfg.synth.set(k, v)?;
            known |= cfg.arch.set(k, v)?;
            known |= cfg.train.set(k, v)?;
            if !known {
                return Err(Error::config(format!("unknown config key `{k}`")));
            }
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.run.get(key).map(String::as_str)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::config(format!("missing `{key}` (flag --{key} or config key)")))
    }

    pub fn count(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn variant(&self) -> Result<Option<Variant>> {
        self.get("variant").map(str::parse).transpose()
    }

    /// Renders the selected groups plus every run key that was set.
    pub fn render(&self, synth: bool, arch: bool, train: bool) -> String {
        let mut s = String::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut put = |k: String, v: String| {
            if seen.insert(k.clone()) {
                let _ = writeln!(s, "{k}={v}");
            }
        };
        for (k, v) in &self.run {
            put(k.clone(), v.clone());
        }
        if synth {
            self.synth.to_kv().into_iter().for_each(|(k, v)| put(k, v));
        }
        if arch {
            self.arch.to_kv().into_iter().for_each(|(k, v)| put(k, v));
        }
        if train {
            self.train.to_kv().into_iter().for_each(|(k, v)| put(k, v));
        }
        s
    }

    pub fn echo(&self, dir: &Path, synth: bool, arch: bool, train: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, self.render(synth, arch, train)).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<RunConfig> {
        RunConfig::resolve(
            &Entries::parse(text, "t").unwrap(),
            SynthParams::default(),
            ArchConfig::desk(),
            TrainConfig::default(),
        )
    }

    #[test]
    fn later_entries_win() {
        let c = resolve("lr_max=0.1\nlr_max=0.2\nvariant=baseline\n").unwrap();
        assert_eq!(c.train.lr_max, 0.2);
        assert_eq!(c.variant().unwrap(), Some(Variant::Baseline));
    }

    #[test]
    fn shared_keys_reach_every_owner() {
        let c = resolve("patch_size=32\ncontext_size=128").unwrap();
        assert_eq!(c.synth.patch_size, 32);
        assert_eq!(c.arch.patch_size, 32);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(resolve("bogus=1"), Err(Error::Config(_))));
        assert!(Entries::parse("no equals sign", "t").is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = resolve("lr_max=0.5\ndata=/tmp/x\nladder=4,8,16,32").unwrap();
        let again = resolve(&c.render(true, true, true)).unwrap();
        assert_eq!(again.train, c.train);
        assert_eq!(again.arch, c.arch);
        assert_eq!(again.synth, c.synth);
        assert_eq!(again.run, c.run);
    }
}

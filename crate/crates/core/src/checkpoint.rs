//! Checkpoint directories: one NTSR file per named tensor plus a plain-text
//! manifest.
//!
//! ```text
//! format_version=1
//! variant=proposed
//! patch_size=64
//! ...
//! frozen=ae_enc
//! components=unet_enc,unet_dec,geo_enc,ae_enc,ae_dec
//! param,unet_enc.b0.first.conv.weight,unet_enc.b0.first.conv.weight.ntsr
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Component, ModelBundle, Variant};
use crate::tensor::{read_tensor, write_tensor, TensorArray};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn join(items: impl IntoIterator<Item = String>) -> String {
    items.into_iter().collect::<Vec<_>>().join(",")
}

fn file_name(param: &str) -> String {
    let safe: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect();
    format!("{safe}.ntsr")
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = format!(
        "format_version={CHECKPOINT_FORMAT_VERSION}\nvariant={}\n",
        bundle.variant
    );
    for (k, v) in bundle.arch.to_kv() {
        let _ = writeln!(text, "{k}={v}");
    }
    let _ = writeln!(text, "frozen={}", join(bundle.frozen.iter().map(|c| c.to_string())));
    let _ = writeln!(text, "components={}", join(Component::ALL.iter().map(|c| c.to_string())));
    let mut result = Ok(());
    for c in Component::ALL {
        bundle.visit_component(c, &mut |p| {
            if result.is_err() {
                return;
            }
            let file = file_name(&p.name);
            let _ = writeln!(text, "param,{},{}", p.name, file);
            result = TensorArray::new(&p.shape, p.value.clone())
                .and_then(|t| write_tensor(dir.join(&file), &t));
        });
    }
    result?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct CheckpointManifest {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub frozen: BTreeSet<Component>,
    /// Parameter name to file, relative to the checkpoint directory.
    pub params: BTreeMap<String, String>,
}

impl CheckpointManifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut version = None;
        let mut variant = None;
        let mut arch = ArchConfig::desk();
        let mut frozen = BTreeSet::new();
        let mut params = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("param,") {
                let (name, file) = rest
                    .split_once(',')
                    .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
                params.insert(name.to_string(), file.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match k {
                "format_version" => {
                    version = Some(v.parse::<u32>().map_err(|_| bad(format!("bad version `{v}`")))?)
                }
                "variant" => variant = Some(v.parse::<Variant>()?),
                "frozen" => {
                    for name in v.split(',').filter(|s| !s.is_empty()) {
                        frozen.insert(name.parse::<Component>()?);
                    }
                }
                "components" => {}
                _ => {
                    if !arch.set(k, v)? {
                        return Err(bad(format!("unknown key `{k}`")));
                    }
                }
            }
        }
        match version {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported format version {v}"))),
            None => return Err(bad("missing format_version".into())),
        }
        arch.validate()?;
        Ok(CheckpointManifest {
            variant: variant.ok_or_else(|| bad("missing variant".into()))?,
            arch,
            frozen,
            params,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&path, &text)
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    let dir = dir.as_ref();
    let manifest = CheckpointManifest::load(dir)?;
    let mut bundle = ModelBundle::<f32>::init(&manifest.arch, manifest.variant, 0)?;
    let mut seen = BTreeSet::new();
    let mut result = Ok(());
    for c in Component::ALL {
        bundle.visit_component_mut(c, &mut |p| {
            if result.is_err() {
                return;
            }
            let Some(file) = manifest.params.get(&p.name) else {
                result = Err(Error::Format {
                    path: dir.join(CHECKPOINT_FILE),
                    reason: format!("no entry for parameter `{}`", p.name),
                });
                return;
            };
            let path: PathBuf = dir.join(file);
            result = read_tensor(&path).and_then(|t| {
                if t.shape() != p.shape.as_slice() {
                    return Err(Error::Format {
                        path: path.clone(),
                        reason: format!("shape {:?}, expected {:?} for `{}`", t.shape(), p.shape, p.name),
                    });
                }
                p.value = t.into_data();
                Ok(())
            });
            seen.insert(p.name.clone());
        });
    }
    result?;
    if let Some(extra) = manifest.params.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::Format {
            path: dir.join(CHECKPOINT_FILE),
            reason: format!("unknown parameter `{extra}` for this architecture"),
        });
    }
    bundle.frozen = manifest.frozen;
    Ok(bundle)
}

//! Encoder backends and the name-keyed registry used by the config file.

#[cfg(feature = "clip")]
pub mod clip;
pub mod stub;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::concept::EncoderBackend;
use crate::error::{Error, Result};

pub use stub::{LinearEncoder, TanhEncoder, TokenTextEncoder};

/// Environment variable naming the directory that holds backend checkpoints.
pub const BACKEND_CACHE_ENV: &str = "UAPKIT_BACKEND_CACHE";

/// Construction options shared by registry entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendOptions {
    pub seed: u64,
    pub channels: usize,
    pub image_resolution: usize,
    pub embed_dim: usize,
    /// Overrides the cache directory taken from the environment.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 3,
            image_resolution: 32,
            embed_dim: 64,
            cache_dir: None,
        }
    }
}

impl BackendOptions {
    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(BACKEND_CACHE_ENV).map(PathBuf::from))
    }
}

/// Names accepted by [`build_backend`] in this build.
pub fn registered_backends() -> Vec<&'static str> {
    let mut names = vec!["linear-stub", "tanh-stub"];
    if cfg!(feature = "clip") {
        names.push("clip-vit-b-32");
    }
    names
}

pub fn build_backend(name: &str, opts: &BackendOptions) -> Result<Box<dyn EncoderBackend>> {
    match name {
        "linear-stub" => Ok(Box::new(LinearEncoder::new(
            opts.channels,
            opts.image_resolution,
            opts.embed_dim,
            opts.seed,
        )?)),
        "tanh-stub" => Ok(Box::new(TanhEncoder::new(
            opts.channels,
            opts.image_resolution,
            opts.embed_dim,
            opts.seed,
        )?)),
        #[cfg(feature = "clip")]
        "clip-vit-b-32" => {
            let cache = opts.cache_dir().ok_or_else(|| {
                Error::backend(name, format!("set {BACKEND_CACHE_ENV} to the checkpoint cache directory"))
            })?;
            Ok(Box::new(clip::ClipBackend::load(&clip::ClipBackend::default_dir(&cache))?))
        }
        other => Err(Error::Config(format!(
            "unknown backend {other:?}; available: {}",
            registered_backends().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_stubs_and_rejects_unknown() {
        let opts = BackendOptions {
            image_resolution: 8,
            embed_dim: 5,
            ..Default::default()
        };
        for name in ["linear-stub", "tanh-stub"] {
            let b = build_backend(name, &opts).unwrap();
            assert_eq!(b.name(), name);
            assert_eq!(b.embed_dim(), 5);
            assert_eq!(b.image_resolution(), 8);
        }
        assert!(matches!(build_backend("nope", &opts), Err(Error::Config(_))));
    }
}

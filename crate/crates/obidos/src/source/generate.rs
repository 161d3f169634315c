//! Deterministic synthetic dataset generator.
//!
//! Writes the on-disk source layout for the default medical profile:
//!
//! ```text
//! <root>/source.toml
//! <root>/<collection>/meta.json
//! <root>/<collection>/<patient>/meta.json
//! <root>/<collection>/<patient>/<study>/meta.json
//! <root>/<collection>/<patient>/<study>/<series>/meta.json
//! <root>/<collection>/<patient>/<study>/<series>/<image>.blob
//! <root>/<collection>/<patient>/<study>/<series>/<image>.meta
//! ```
//!
//! The same seed and parameters always produce a byte-identical tree.
//! Attribute rules: every entry carries `id` and `num` (a stable hash of the
//! path, mod 1000); series additionally carry `modality`, `CT` for
//! even-numbered series and `MR` for odd ones.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{to_canonical_json, EntryPath, GranularitySchema};

/// Id prefixes for the medical profile levels, leaf last.
const ID_PREFIXES: [&str; 5] = ["C", "P", "S", "SE", "I"];

/// Knobs affecting metadata volume. `pad_bytes` adds a filler attribute to
/// every sidecar, which lets metadata grow to any multiple of the payload
/// size.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetadataProfile {
    #[serde(default)]
    pub pad_bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub source_id: String,
    pub seed: u64,
    /// Children per node for each level, leaf last:
    /// collections, patients, studies, series, images.
    pub counts: Vec<usize>,
    pub image_size_bytes: usize,
    #[serde(default)]
    pub profile: MetadataProfile,
}

#[derive(Serialize, Deserialize)]
struct SourceToml {
    source_id: String,
    levels: Vec<String>,
    leaf_level: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    attributes: serde_json::Map<String, serde_json::Value>,
    last_modified: i64,
}

fn stable_hash(seed: u64, source_id: &str, path: &EntryPath) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{source_id}:{path}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn blob_seed(seed: u64, source_id: &str, path: &EntryPath) -> [u8; 32] {
    Sha256::digest(format!("blob:{seed}:{source_id}:{path}").as_bytes()).into()
}

fn sidecar_bytes(params: &GeneratorParams, path: &EntryPath, ordinal: usize) -> Vec<u8> {
    let h = stable_hash(params.seed, &params.source_id, path);
    let mut attributes = serde_json::Map::new();
    attributes.insert("id".into(), serde_json::json!(path.last_id().expect("non-root")));
    attributes.insert("num".into(), serde_json::json!((h % 1000) as i64));
    if path.last_level() == Some("series") {
        let modality = if ordinal.is_multiple_of(2) { "CT" } else { "MR" };
        attributes.insert("modality".into(), serde_json::json!(modality));
    }
    if params.profile.pad_bytes > 0 {
        attributes.insert("pad".into(), serde_json::json!("x".repeat(params.profile.pad_bytes)));
    }
    let last_modified = 1_600_000_000_000 + (h % 86_400_000) as i64;
    to_canonical_json(&Sidecar { attributes, last_modified })
}

/// Generates a synthetic source on disk. Refuses to write into a non-empty
/// directory.
pub fn generate_synthetic_source(root: &Path, params: &GeneratorParams) -> Result<()> {
    let schema = GranularitySchema::medical();
    if params.counts.len() != schema.max_depth() {
        return Err(Error::Config(format!(
            "expected {} per-level counts, got {}",
            schema.max_depth(),
            params.counts.len()
        )));
    }
    if params.counts.contains(&0) {
        return Err(Error::Config("per-level counts must be >= 1".into()));
    }
    if params.image_size_bytes == 0 {
        return Err(Error::Config("image_size_bytes must be >= 1".into()));
    }
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(Error::GeneratorRefused(format!("{} is not empty", root.display())));
    }
    fs::create_dir_all(root)?;

    let descriptor = SourceToml {
        source_id: params.source_id.clone(),
        levels: schema.levels().to_vec(),
        leaf_level: schema.leaf_level().to_string(),
    };
    fs::write(
        root.join("source.toml"),
        toml::to_string(&descriptor).expect("descriptor serializes"),
    )?;

    generate_level(root, params, &schema, &EntryPath::root(), 0)
}

fn generate_level(
    dir: &Path,
    params: &GeneratorParams,
    schema: &GranularitySchema,
    parent: &EntryPath,
    depth: usize,
) -> Result<()> {
    let count = params.counts[depth];
    let child_depth = depth + 1;
    let level = schema.level_at(child_depth).expect("depth bounded by counts");
    let is_leaf = child_depth == schema.max_depth();
    for ordinal in 1..=count {
        let id = format!("{}{}", ID_PREFIXES[depth], ordinal);
        let path = parent.child(level, &id)?;
        if is_leaf {
            let mut rng = ChaCha20Rng::from_seed(blob_seed(params.seed, &params.source_id, &path));
            let mut blob = vec![0u8; params.image_size_bytes];
            rng.fill_bytes(&mut blob);
            fs::write(dir.join(format!("{id}.blob")), &blob)?;
            fs::write(dir.join(format!("{id}.meta")), sidecar_bytes(params, &path, ordinal))?;
        } else {
            let child_dir = dir.join(&id);
            fs::create_dir_all(&child_dir)?;
            fs::write(child_dir.join("meta.json"), sidecar_bytes(params, &path, ordinal))?;
            generate_level(&child_dir, params, schema, &path, child_depth)?;
        }
    }
    Ok(())
}

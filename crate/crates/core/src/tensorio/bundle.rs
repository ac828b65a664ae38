use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_tensor, write_tensor, DType, Tensor, TensorError};
use crate::geometry::Grid;

/// Tensor-valued manifest keys, in the order they are checked.
pub const TENSOR_ROLES: [&str; 7] = [
    "image",
    "clip_layer_features",
    "clip_layer_attn",
    "clip_value_last",
    "dino_layer_features",
    "dino_attn_last",
    "text_embeddings",
];

const SCALAR_ROLES: [&str; 5] = [
    "grid_clip",
    "grid_dino",
    "has_class_token_clip",
    "has_class_token_dino",
    "class_names",
];

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest is missing role \"{0}\"")]
    MissingRole(String),
    #[error("tensor for role \"{role}\": {source}")]
    Tensor {
        role: String,
        #[source]
        source: TensorError,
    },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("text_embeddings has {embeddings} rows but class_names lists {names} classes")]
    InconsistentClassCount { embeddings: usize, names: usize },
}

/// On-disk manifest: tensor paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image: String,
    pub clip_layer_features: String,
    pub clip_layer_attn: String,
    pub clip_value_last: String,
    pub dino_layer_features: String,
    pub dino_attn_last: String,
    pub text_embeddings: String,
    pub grid_clip: Grid,
    pub grid_dino: Grid,
    pub has_class_token_clip: bool,
    pub has_class_token_dino: bool,
    pub class_names: Vec<String>,
}

impl Manifest {
    /// Default file names used by [`write_bundle`].
    pub fn with_default_paths(
        grid_clip: Grid,
        grid_dino: Grid,
        has_class_token_clip: bool,
        has_class_token_dino: bool,
        class_names: Vec<String>,
    ) -> Self {
        Self {
            image: "image.stf".into(),
            clip_layer_features: "clip_layer_features.stf".into(),
            clip_layer_attn: "clip_layer_attn.stf".into(),
            clip_value_last: "clip_value_last.stf".into(),
            dino_layer_features: "dino_layer_features.stf".into(),
            dino_attn_last: "dino_attn_last.stf".into(),
            text_embeddings: "text_embeddings.stf".into(),
            grid_clip,
            grid_dino,
            has_class_token_clip,
            has_class_token_dino,
            class_names,
        }
    }
}

/// Every exported artifact for one image, validated for cross-tensor consistency.
///
/// Class-token rows and columns are kept exactly as stored. Layouts:
///
/// | field                 | dtype | shape                           |
/// |-----------------------|-------|---------------------------------|
/// | `image`               | u8    | `H x W x 3`                     |
/// | `clip_layer_features` | f32   | `L x P_c' x D` with `L` in `{N-1, N}` |
/// | `clip_layer_attn`     | f32   | `(N-1) x heads x P_c' x P_c'`   |
/// | `clip_value_last`     | f32   | `P_c' x D`                      |
/// | `dino_layer_features` | f32   | `N_d x P_d' x D`, `N_d >= 2`    |
/// | `dino_attn_last`      | f32   | `P_d' x P_d'`                   |
/// | `text_embeddings`     | f32   | `K x D`                         |
///
/// `P'` is the grid size plus one when the branch carries a class token,
/// which always sits at token index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image: Tensor,
    pub clip_layer_features: Tensor,
    pub clip_layer_attn: Tensor,
    pub clip_value_last: Tensor,
    pub dino_layer_features: Tensor,
    pub dino_attn_last: Tensor,
    pub text_embeddings: Tensor,
    pub grid_clip: Grid,
    pub grid_dino: Grid,
    pub has_class_token_clip: bool,
    pub has_class_token_dino: bool,
    pub class_names: Vec<String>,
}

fn mismatch(msg: impl Into<String>) -> BundleError {
    BundleError::GeometryMismatch(msg.into())
}

fn expect(role: &str, t: &Tensor, dtype: DType, rank: usize) -> Result<(), BundleError> {
    let wrap = |source| BundleError::Tensor {
        role: role.to_string(),
        source,
    };
    if t.dtype() != dtype {
        return Err(wrap(TensorError::DtypeMismatch {
            expected: dtype,
            found: t.dtype(),
        }));
    }
    t.expect_rank(rank).map_err(wrap)
}

impl FeatureBundle {
    pub fn image_size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Tokens per CLIP layer including any class token.
    pub fn clip_tokens(&self) -> usize {
        self.grid_clip.len() + usize::from(self.has_class_token_clip)
    }

    pub fn dino_tokens(&self) -> usize {
        self.grid_dino.len() + usize::from(self.has_class_token_dino)
    }

    /// Checks every cross-tensor invariant. Never reshapes.
    pub fn validate(&self) -> Result<(), BundleError> {
        expect("image", &self.image, DType::U8, 3)?;
        if self.image.shape()[2] != 3 {
            return Err(mismatch(format!("image must be HxWx3, found {:?}", self.image.shape())));
        }
        if self.grid_clip.is_empty() || self.grid_dino.is_empty() {
            return Err(mismatch("grids must have at least one patch"));
        }

        expect("clip_layer_attn", &self.clip_layer_attn, DType::F32, 4)?;
        expect("clip_value_last", &self.clip_value_last, DType::F32, 2)?;
        expect("clip_layer_features", &self.clip_layer_features, DType::F32, 3)?;
        expect("dino_layer_features", &self.dino_layer_features, DType::F32, 3)?;
        expect("dino_attn_last", &self.dino_attn_last, DType::F32, 2)?;
        expect("text_embeddings", &self.text_embeddings, DType::F32, 2)?;

        let p_clip = self.clip_tokens();
        let attn = self.clip_layer_attn.shape();
        if attn[2] != attn[3] {
            return Err(mismatch(format!("clip_layer_attn is not square: {attn:?}")));
        }
        if attn[2] != p_clip {
            return Err(mismatch(format!(
                "clip_layer_attn has {} tokens, grid_clip {} implies {p_clip}",
                attn[2], self.grid_clip
            )));
        }
        let layers = attn[0];

        let feats = self.clip_layer_features.shape();
        if feats[1] != p_clip {
            return Err(mismatch(format!(
                "clip_layer_features has {} tokens, grid_clip {} with class token {} implies {p_clip}",
                feats[1], self.grid_clip, self.has_class_token_clip
            )));
        }
        if feats[0] != layers && feats[0] != layers + 1 {
            return Err(mismatch(format!(
                "clip_layer_features has {} layers, attention has {layers}; expected {layers} or {}",
                feats[0],
                layers + 1
            )));
        }
        let dim = feats[2];

        let value = self.clip_value_last.shape();
        if value[0] != p_clip || value[1] != dim {
            return Err(mismatch(format!(
                "clip_value_last is {value:?}, expected [{p_clip}, {dim}]"
            )));
        }

        let p_dino = self.dino_tokens();
        let dfeats = self.dino_layer_features.shape();
        if dfeats[1] != p_dino {
            return Err(mismatch(format!(
                "dino_layer_features has {} tokens, grid_dino {} with class token {} implies {p_dino}",
                dfeats[1], self.grid_dino, self.has_class_token_dino
            )));
        }
        if dfeats[0] < 2 {
            return Err(mismatch("dino_layer_features needs at least two layers"));
        }
        if dfeats[2] != dim {
            return Err(mismatch(format!(
                "dino feature dim {} differs from text/clip dim {dim}",
                dfeats[2]
            )));
        }
        let dattn = self.dino_attn_last.shape();
        if dattn[0] != dattn[1] || dattn[0] != p_dino {
            return Err(mismatch(format!(
                "dino_attn_last is {dattn:?}, expected [{p_dino}, {p_dino}]"
            )));
        }

        let text = self.text_embeddings.shape();
        if text[0] != self.class_names.len() {
            return Err(BundleError::InconsistentClassCount {
                embeddings: text[0],
                names: self.class_names.len(),
            });
        }
        if text[1] != dim {
            return Err(mismatch(format!(
                "text embedding dim {} differs from clip dim {dim}",
                text[1]
            )));
        }
        Ok(())
    }
}

pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<FeatureBundle, BundleError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|source| BundleError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let obj = raw
        .as_object()
        .ok_or_else(|| mismatch("manifest root must be a JSON object"))?;
    if let Some(role) = TENSOR_ROLES
        .iter()
        .chain(SCALAR_ROLES.iter())
        .find(|r| !obj.contains_key(**r))
    {
        return Err(BundleError::MissingRole(role.to_string()));
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let load = |role: &str, rel: &str| -> Result<Tensor, BundleError> {
        read_tensor(base.join(rel)).map_err(|source| BundleError::Tensor {
            role: role.to_string(),
            source,
        })
    };
    let bundle = FeatureBundle {
        image: load("image", &manifest.image)?,
        clip_layer_features: load("clip_layer_features", &manifest.clip_layer_features)?,
        clip_layer_attn: load("clip_layer_attn", &manifest.clip_layer_attn)?,
        clip_value_last: load("clip_value_last", &manifest.clip_value_last)?,
        dino_layer_features: load("dino_layer_features", &manifest.dino_layer_features)?,
        dino_attn_last: load("dino_attn_last", &manifest.dino_attn_last)?,
        text_embeddings: load("text_embeddings", &manifest.text_embeddings)?,
        grid_clip: manifest.grid_clip,
        grid_dino: manifest.grid_dino,
        has_class_token_clip: manifest.has_class_token_clip,
        has_class_token_dino: manifest.has_class_token_dino,
        class_names: manifest.class_names,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes every tensor plus `manifest.json` into `dir`; returns the manifest path.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &FeatureBundle) -> Result<PathBuf, BundleError> {
    let dir = dir.as_ref();
    bundle.validate()?;
    let io = |source| BundleError::Io {
        path: dir.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let manifest = Manifest::with_default_paths(
        bundle.grid_clip,
        bundle.grid_dino,
        bundle.has_class_token_clip,
        bundle.has_class_token_dino,
        bundle.class_names.clone(),
    );
    let entries = [
        ("image", &manifest.image, &bundle.image),
        (
            "clip_layer_features",
            &manifest.clip_layer_features,
            &bundle.clip_layer_features,
        ),
        ("clip_layer_attn", &manifest.clip_layer_attn, &bundle.clip_layer_attn),
        ("clip_value_last", &manifest.clip_value_last, &bundle.clip_value_last),
        (
            "dino_layer_features",
            &manifest.dino_layer_features,
            &bundle.dino_layer_features,
        ),
        ("dino_attn_last", &manifest.dino_attn_last, &bundle.dino_attn_last),
        ("text_embeddings", &manifest.text_embeddings, &bundle.text_embeddings),
    ];
    for (role, rel, tensor) in entries {
        write_tensor(dir.join(rel), tensor).map_err(|source| BundleError::Tensor {
            role: role.to_string(),
            source,
        })?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(io)?;
    Ok(path)
}

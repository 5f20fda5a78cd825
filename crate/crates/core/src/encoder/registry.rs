use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::toy::{toy_encoder_for, ToyCnn, ToyVit};
use super::{Condition, Encoder, EncoderSpec, EncoderWeights, Family, TapLayout, WeightsSource};
use crate::error::{Error, IoContext, Result};
use crate::util;

pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

/// One registry entry as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderEntry {
    pub family: Family,
    pub feature_dim: usize,
    /// `random`, `toy:<seed>`, a path to an exported weights file, or a third-party id.
    pub weights: String,
    #[serde(default)]
    pub tap: Option<TapLayout>,
    #[serde(default = "default_true")]
    pub reinitializable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    schema_version: u32,
    #[serde(default)]
    encoders: BTreeMap<String, EncoderEntry>,
}

/// Name → encoder description.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderRegistry {
    entries: BTreeMap<String, EncoderEntry>,
}

impl EncoderRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text)?;
        if file.schema_version != REGISTRY_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported registry schema {}",
                file.schema_version
            )));
        }
        Ok(EncoderRegistry {
            entries: file.encoders,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&RegistryFile {
            schema_version: REGISTRY_SCHEMA_VERSION,
            encoders: self.entries.clone(),
        })
        .expect("registry serializes")
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: EncoderEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The encoders compared in the study, all backed by third-party weights ids.
    pub fn study_encoders() -> Self {
        let mut r = EncoderRegistry::default();
        let mut add = |name: &str, family, f, id: &str| {
            r.insert(
                name,
                EncoderEntry {
                    family,
                    feature_dim: f,
                    weights: id.to_string(),
                    tap: None,
                    reinitializable: true,
                },
            )
        };
        add("Prov-GigaPath", Family::VitClass, 1536, "hf_hub:prov-gigapath/prov-gigapath");
        add("UNI", Family::VitClass, 1024, "hf_hub:MahmoodLab/uni");
        add("CTransPath", Family::VitClass, 768, "ctranspath.pth");
        add("ViT-L", Family::VitClass, 1024, "timm:vit_large_patch16_224.augreg_in21k_ft_in1k");
        add("ResNet-RS 50", Family::CnnClass, 2048, "timm:resnetrs50.tf_in1k");
        r
    }

    pub fn spec(&self, name: &str) -> Result<EncoderSpec> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown encoder `{name}`")))?;
        let weights = if e.weights == "random" {
            WeightsSource::Random
        } else {
            WeightsSource::Pretrained(e.weights.clone())
        };
        let tap = e.tap.unwrap_or(match e.family {
            Family::CnnClass => TapLayout::SpatialMap {
                height: 14,
                width: 14,
            },
            Family::VitClass => TapLayout::TokenGrid {
                tokens: 197,
                class_token: true,
            },
        });
        let spec = EncoderSpec {
            name: name.to_string(),
            family: e.family,
            feature_dim: e.feature_dim,
            weights,
            tap,
            reinitializable: e.reinitializable,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The ten (encoder, condition) pairs of the study grid.
pub fn study_conditions() -> Vec<(&'static str, Condition)> {
    vec![
        ("Prov-GigaPath", Condition::Lp),
        ("UNI", Condition::Ft),
        ("UNI", Condition::Lp),
        ("CTransPath", Condition::Ft),
        ("CTransPath", Condition::Lp),
        ("ViT-L", Condition::Ft),
        ("ViT-L", Condition::Lp),
        ("ViT-L", Condition::Ri),
        ("ResNet-RS 50", Condition::Ft),
        ("ResNet-RS 50", Condition::Lp),
    ]
}

/// Loads exported weights from disk.
pub fn load_weights(path: &Path) -> Result<EncoderWeights> {
    let text = std::fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_weights(weights: &EncoderWeights, path: &Path) -> Result<()> {
    util::write_atomic(path, serde_json::to_string(weights)?.as_bytes())
}

/// Builds the adapter for a spec. Weights that are neither `random`, `toy:<seed>`
/// nor a readable weights file cannot be loaded here; the adapter then degrades to a
/// toy encoder of the same family and size, with a warning.
pub fn instantiate(spec: &EncoderSpec) -> Result<Box<dyn Encoder>> {
    match &spec.weights {
        WeightsSource::Random => toy_encoder_for(spec, util::fnv1a(spec.name.as_bytes())),
        WeightsSource::Pretrained(id) => {
            if let Some(seed) = id.strip_prefix("toy:") {
                let seed = seed
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad toy seed in `{id}`")))?;
                return toy_encoder_for(spec, seed);
            }
            let path = Path::new(id);
            if path.is_file() {
                return from_weights(spec, load_weights(path)?);
            }
            log::warn!(
                "weights `{id}` for encoder `{}` are not available locally; substituting a toy {:?} encoder",
                spec.name,
                spec.family
            );
            toy_encoder_for(spec, util::fnv1a(id.as_bytes()))
        }
    }
}

/// Rebuilds an adapter from exported weights.
pub fn from_weights(spec: &EncoderSpec, weights: EncoderWeights) -> Result<Box<dyn Encoder>> {
    let mut s = spec.clone();
    if weights.feature_dim != s.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: s.feature_dim,
            actual: weights.feature_dim,
        });
    }
    let template = toy_encoder_for(&s, 0)?;
    s.tap = template.spec().tap;
    Ok(match weights.arch.as_str() {
        "toy-cnn" => Box::new(ToyCnn::from_weights(s, weights)?),
        "toy-vit" => Box::new(ToyVit::from_weights(s, weights)?),
        other => return Err(Error::Format(format!("unknown encoder arch `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_resolve() {
        let text = r#"
schema_version = 1
[encoders.toy]
family = "CNN_CLASS"
feature_dim = 8
weights = "toy:3"
[encoders.uni]
family = "VIT_CLASS"
feature_dim = 16
weights = "hf_hub:MahmoodLab/uni"
"#;
        let r = EncoderRegistry::parse(text).unwrap();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["toy", "uni"]);
        let spec = r.spec("toy").unwrap();
        let enc = instantiate(&spec).unwrap();
        assert_eq!(enc.feature_dim(), 8);
        let uni = instantiate(&r.spec("uni").unwrap()).unwrap();
        assert_eq!(uni.feature_dim(), 16);
        assert!(matches!(uni.spec().tap, TapLayout::TokenGrid { tokens: 197, .. }));
        assert!(r.spec("nope").is_err());
        assert_eq!(EncoderRegistry::parse(&r.to_toml()).unwrap(), r);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "schema_version = 1\n[encoders.x]\nfamily = \"CNN_CLASS\"\nfeature_dim = 4\nweights = \"random\"\ncolour = 1\n";
        assert!(EncoderRegistry::parse(text).is_err());
        assert!(EncoderRegistry::parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn weights_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderRegistry::study_encoders().spec("ResNet-RS 50").unwrap();
        let mut small = spec.clone();
        small.feature_dim = 4;
        let enc = instantiate(&small).unwrap();
        let p = dir.path().join("w.json");
        save_weights(&enc.export_weights(), &p).unwrap();
        small.weights = WeightsSource::Pretrained(p.display().to_string());
        let back = instantiate(&small).unwrap();
        assert_eq!(back.params(), enc.params());
    }

    #[test]
    fn study_grid_has_ten_conditions() {
        let r = EncoderRegistry::study_encoders();
        let conds = study_conditions();
        assert_eq!(conds.len(), 10);
        for (name, _) in conds {
            assert!(r.spec(name).is_ok());
        }
    }
}

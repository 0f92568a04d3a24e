//! Frozen teacher: class text embeddings, optional per-sample image embeddings,
//! and the tempered soft targets derived from their scaled cosine similarities.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tensor};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::io::{self, Cursor};
use crate::rng;

pub const ARTIFACT_MAGIC: &[u8; 8] = b"SCMD-TA1";
pub const DEFAULT_TEMPLATE: &str = "this is a photo of a {}";
/// Allowed deviation of a stored embedding's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;
const MAX_ANCHOR_TRIES: usize = 1000;
const MAX_ANCHOR_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherArtifact {
    pub class_names: Vec<String>,
    pub prompt_template: String,
    /// One unit-norm row per class.
    pub text_embeddings: Vec<Vec<f64>>,
    pub logit_scale: f64,
    /// Unit-norm embeddings keyed by sample id; `None` for text-only artifacts.
    pub image_embeddings: Option<BTreeMap<u64, Vec<f64>>>,
    /// Free-form identifier of the model that produced the embeddings.
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    format_version: u32,
    num_classes: usize,
    embed_dim: usize,
    num_samples: usize,
    logit_scale: f64,
    prompt_template: String,
    class_names: Vec<String>,
    has_image_embeddings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
}

/// Substitutes each class name into a template holding exactly one `{}`.
pub fn render_prompts(class_names: &[String], template: &str) -> Result<Vec<String>> {
    let holes = template.matches("{}").count();
    if holes != 1 {
        return Err(Error::Template(format!(
            "template {template:?} must contain exactly one {{}} placeholder, found {holes}"
        )));
    }
    Ok(class_names
        .iter()
        .map(|c| template.replacen("{}", c, 1))
        .collect())
}

impl TeacherArtifact {
    pub fn num_classes(&self) -> usize {
        self.text_embeddings.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_embeddings.first().map_or(0, Vec::len)
    }

    pub fn prompts(&self) -> Result<Vec<String>> {
        render_prompts(&self.class_names, &self.prompt_template)
    }

    /// `C x d_t` matrix of the text embeddings.
    pub fn text_matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.text_embeddings)
    }

    pub fn image_embedding(&self, id: u64) -> Result<&[f64]> {
        self.image_embeddings
            .as_ref()
            .and_then(|m| m.get(&id))
            .map(Vec::as_slice)
            .ok_or(Error::MissingEmbedding(id))
    }

    /// Teacher logits `logit_scale * <image_i, text_c>` for each id.
    pub fn logits(&self, ids: &[u64]) -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|&id| {
                let img = self.image_embedding(id)?;
                Ok(self
                    .text_embeddings
                    .iter()
                    .map(|t| self.logit_scale * dot(img, t))
                    .collect())
            })
            .collect()
    }

    /// `N x C` soft targets, `softmax(logits / t)` per row.
    pub fn soft_targets(&self, ids: &[u64], t: f64) -> Result<Tensor> {
        let c = self.num_classes();
        let mut values = Vec::with_capacity(ids.len() * c);
        for row in self.logits(ids)? {
            values.extend(autodiff::softmax_t(&row, t)?);
        }
        Tensor::matrix(ids.len(), c, values)
    }

    /// Fraction of samples whose highest-similarity class matches the label.
    pub fn zero_shot_accuracy(&self, ds: &DomainDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Parameter("accuracy of an empty dataset".into()));
        }
        let ids = ds.ids();
        let logits = self.logits(&ids)?;
        let correct = logits
            .iter()
            .zip(&ds.samples)
            .filter(|(row, s)| argmax(row) == s.y)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if self.class_names.len() != self.text_embeddings.len() {
            return Err(Error::Validation(format!(
                "{} class names for {} text embeddings",
                self.class_names.len(),
                self.text_embeddings.len()
            )));
        }
        if self.text_embeddings.is_empty() {
            return Err(Error::Validation("no classes".into()));
        }
        render_prompts(&self.class_names, &self.prompt_template)?;
        let d = self.embed_dim();
        for (i, row) in self.text_embeddings.iter().enumerate() {
            check_unit(row, d, &format!("text embedding row {i}"))?;
        }
        if let Some(images) = &self.image_embeddings {
            for (id, row) in images {
                check_unit(row, d, &format!("image embedding for sample {id}"))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = ArtifactHeader {
            format_version: 1,
            num_classes: self.num_classes(),
            embed_dim: self.embed_dim(),
            num_samples: self.image_embeddings.as_ref().map_or(0, BTreeMap::len),
            logit_scale: self.logit_scale,
            prompt_template: self.prompt_template.clone(),
            class_names: self.class_names.clone(),
            has_image_embeddings: self.image_embeddings.is_some(),
            model_id: self.model_id.clone(),
        };
        let mut payload = Vec::new();
        for row in &self.text_embeddings {
            row.iter()
                .for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes()));
        }
        if let Some(images) = &self.image_embeddings {
            images
                .keys()
                .for_each(|id| payload.extend_from_slice(&id.to_le_bytes()));
            for row in images.values() {
                row.iter()
                    .for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes()));
            }
        }
        Ok(io::frame(
            ARTIFACT_MAGIC,
            &serde_json::to_vec(&header)?,
            &payload,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::unframe(ARTIFACT_MAGIC, bytes)?;
        let h: ArtifactHeader =
            serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
        if h.format_version != 1 {
            return Err(Error::Header(format!(
                "unsupported format_version {}",
                h.format_version
            )));
        }
        if h.embed_dim == 0 {
            return Err(Error::Header("embed_dim must be positive".into()));
        }
        let mut cur = Cursor::new(payload);
        let read_rows = |n: usize, cur: &mut Cursor| -> Result<Vec<Vec<f64>>> {
            (0..n)
                .map(|_| {
                    (0..h.embed_dim)
                        .map(|_| cur.f32().map(f64::from))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect()
        };
        let text_embeddings = read_rows(h.num_classes, &mut cur)?;
        let image_embeddings = if h.has_image_embeddings {
            let ids = (0..h.num_samples)
                .map(|_| cur.u64())
                .collect::<Result<Vec<u64>>>()?;
            let rows = read_rows(h.num_samples, &mut cur)?;
            let map: BTreeMap<u64, Vec<f64>> = ids.iter().copied().zip(rows).collect();
            if map.len() != ids.len() || ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(
                    "image embedding ids must be unique and ascending".into(),
                ));
            }
            Some(map)
        } else {
            None
        };
        cur.finish()?;
        let artifact = TeacherArtifact {
            class_names: h.class_names,
            prompt_template: h.prompt_template,
            text_embeddings,
            logit_scale: h.logit_scale,
            image_embeddings,
            model_id: h.model_id,
        };
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }

    pub fn summary(&self) -> ArtifactSummary {
        let norms = |rows: &mut dyn Iterator<Item = &Vec<f64>>| {
            rows.map(|r| autodiff::l2_norm(r))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| {
                    (lo.min(n), hi.max(n))
                })
        };
        let (text_lo, text_hi) = norms(&mut self.text_embeddings.iter());
        let image_range = self
            .image_embeddings
            .as_ref()
            .filter(|m| !m.is_empty())
            .map(|m| norms(&mut m.values()));
        ArtifactSummary {
            num_classes: self.num_classes(),
            embed_dim: self.embed_dim(),
            num_image_embeddings: self.image_embeddings.as_ref().map(BTreeMap::len),
            logit_scale: self.logit_scale,
            prompt_template: self.prompt_template.clone(),
            prompts: self.prompts().unwrap_or_default(),
            model_id: self.model_id.clone(),
            text_norm_range: [text_lo, text_hi],
            image_norm_range: image_range.map(|(a, b)| [a, b]),
            crc_ok: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactSummary {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub num_image_embeddings: Option<usize>,
    pub logit_scale: f64,
    pub prompt_template: String,
    pub prompts: Vec<String>,
    pub model_id: Option<String>,
    pub text_norm_range: [f64; 2],
    pub image_norm_range: Option<[f64; 2]>,
    pub crc_ok: bool,
}

fn check_unit(row: &[f64], d: usize, what: &str) -> Result<()> {
    if row.len() != d {
        return Err(Error::Validation(format!(
            "{what} has {} dims, expected {d}",
            row.len()
        )));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} is not finite")));
    }
    let norm = autodiff::l2_norm(row);
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!(
            "{what} has norm {norm}, expected 1"
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleTeacherConfig {
    pub embed_dim: usize,
    pub anchor_seed: u64,
    pub image_noise: f64,
    pub logit_scale: f64,
    pub prompt_template: String,
    /// Defaults to `class_0`, `class_1`, ...
    pub class_names: Option<Vec<String>>,
}

impl Default for OracleTeacherConfig {
    fn default() -> Self {
        OracleTeacherConfig {
            embed_dim: 16,
            anchor_seed: 0,
            image_noise: 0.25,
            logit_scale: 10.0,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            class_names: None,
        }
    }
}

fn f32_round(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| f64::from(x as f32)).collect()
}

/// Synthetic stand-in for a pretrained vision-language teacher.
///
/// Class `c` gets a random unit anchor (pairwise cosine below 0.5); sample `i`
/// gets `normalize(anchor[y_i] + noise)`. All embeddings are rounded to `f32`
/// so that the artifact file round-trips exactly.
pub fn make_oracle_teacher(
    cfg: &OracleTeacherConfig,
    ds: &DomainDataset,
) -> Result<TeacherArtifact> {
    let c = ds.num_classes;
    if cfg.embed_dim < c {
        return Err(Error::Config(format!(
            "embed_dim {} must be at least the class count {c}",
            cfg.embed_dim
        )));
    }
    if !(cfg.image_noise >= 0.0) || !(cfg.logit_scale > 0.0) {
        return Err(Error::Config(
            "image_noise >= 0 and logit_scale > 0 required".into(),
        ));
    }
    let class_names = match &cfg.class_names {
        Some(names) if names.len() == c => names.clone(),
        Some(names) => {
            return Err(Error::Config(format!(
                "{} class names for {c} classes",
                names.len()
            )))
        }
        None => (0..c).map(|i| format!("class_{i}")).collect(),
    };
    render_prompts(&class_names, &cfg.prompt_template)?;

    let mut r = rng::seeded(cfg.anchor_seed);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(c);
    for class in 0..c {
        let mut tries = 0;
        let anchor = loop {
            let raw: Vec<f64> = (0..cfg.embed_dim)
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            if let Ok(unit) = autodiff::l2_normalize(&raw) {
                let unit = f32_round(unit);
                if anchors.iter().all(|a| dot(a, &unit) < MAX_ANCHOR_COSINE) {
                    break unit;
                }
            }
            tries += 1;
            if tries >= MAX_ANCHOR_TRIES {
                return Err(Error::Config(format!(
                    "could not place anchor {class} with cosine < {MAX_ANCHOR_COSINE} after {MAX_ANCHOR_TRIES} tries"
                )));
            }
        };
        anchors.push(anchor);
    }

    let mut images = BTreeMap::new();
    for s in &ds.samples {
        let mut sr = rng::seeded(rng::derive(cfg.anchor_seed, s.id.wrapping_add(1)));
        let noisy: Vec<f64> = anchors[s.y]
            .iter()
            .map(|&a| {
                let e: f64 = StandardNormal.sample(&mut sr);
                a + cfg.image_noise * e
            })
            .collect();
        images.insert(s.id, f32_round(autodiff::l2_normalize(&noisy)?));
    }

    let artifact = TeacherArtifact {
        class_names,
        prompt_template: cfg.prompt_template.clone(),
        text_embeddings: anchors,
        logit_scale: cfg.logit_scale,
        image_embeddings: Some(images),
        model_id: Some("oracle".into()),
    };
    artifact.validate()?;
    Ok(artifact)
}

//! Global and per-keypoint text priors.
//!
//! Prompts are fixed templates. Embeddings either come from a file produced
//! by an external text encoder or from a deterministic hash-seeded stand-in.
//! All vectors are unit-normalized.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_file, write_file, Error, Result};
use crate::numerics::{io, Tensor};
use crate::rng::Rng;

pub const PROMPT_TEMPLATE_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const MIN_EMBED_DIM: usize = 8;
pub const PSEUDO_ENCODER_NAME: &str = "pseudo-sha256-normal-v1";

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub species: String,
    pub global_prompt: String,
    /// `(keypoint name, prompt)` in dataset keypoint order.
    pub keypoint_prompts: Vec<(String, String)>,
}

impl PromptBundle {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.global_prompt.as_str())
            .chain(self.keypoint_prompts.iter().map(|(_, p)| p.as_str()))
    }

    /// Audit-friendly plain text rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# prompt template v{PROMPT_TEMPLATE_VERSION}\n[global]\n{}\n",
            self.global_prompt
        );
        for (name, p) in &self.keypoint_prompts {
            s.push_str(&format!("[{name}]\n{p}\n"));
        }
        s
    }
}

pub fn build_prompts(species: &str, keypoints: &[String]) -> Result<PromptBundle> {
    if species.trim().is_empty() {
        return Err(Error::Validation("species must be non-empty".into()));
    }
    if keypoints.is_empty() {
        return Err(Error::Validation("keypoint list must be non-empty".into()));
    }
    let mut seen = HashSet::new();
    for k in keypoints {
        if !seen.insert(k.as_str()) {
            return Err(Error::Validation(format!("duplicate keypoint name '{k}'")));
        }
    }
    let global_prompt = format!(
        "Describe the body structure, locomotion style, and biomechanical characteristics of a {species} relevant to pose estimation. Keypoints: {}.",
        keypoints.join(", ")
    );
    let keypoint_prompts = keypoints
        .iter()
        .map(|k| {
            (
                k.clone(),
                format!("For a {species}, describe the anatomical role of the keypoint '{k}'."),
            )
        })
        .collect();
    Ok(PromptBundle {
        species: species.to_string(),
        global_prompt,
        keypoint_prompts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    File,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrior {
    pub species: String,
    pub keypoint_names: Vec<String>,
    pub encoder_name: String,
    /// `[d]`.
    pub global: Tensor,
    /// `[N, d]`.
    pub local: Tensor,
    pub source: PriorSource,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    species: String,
    keypoint_names: Vec<String>,
    d: usize,
    encoder_name: String,
}

impl SemanticPrior {
    pub fn dim(&self) -> usize {
        self.global.numel()
    }

    pub fn num_keypoints(&self) -> usize {
        self.local.shape()[0]
    }

    /// Fails with both counts when the prior does not cover `n` keypoints.
    pub fn check_keypoints(&self, n: usize) -> Result<()> {
        if self.num_keypoints() != n {
            return Err(Error::Validation(format!(
                "embedding file has {} keypoint rows but the dataset has {n} keypoints",
                self.num_keypoints()
            )));
        }
        Ok(())
    }

    /// Header line followed by the `F_g` and `F_l` DPAT records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = EmbeddingHeader {
            species: self.species.clone(),
            keypoint_names: self.keypoint_names.clone(),
            d: self.dim(),
            encoder_name: self.encoder_name.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        io::write_record(&mut out, &self.global);
        io::write_record(&mut out, &self.local);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(bytes.len(), "missing JSON header line"))?;
        let header: EmbeddingHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(0, format!("bad embedding header: {e}")))?;
        let mut reader = io::RecordReader::new(bytes, nl + 1);
        let g_at = reader.position();
        let mut global = reader.read()?;
        let l_at = reader.position();
        let mut local = reader.read()?;
        if !reader.at_end() {
            return Err(Error::format(
                reader.position(),
                "trailing bytes after F_l record",
            ));
        }
        if global.rank() != 1 {
            return Err(Error::format(
                g_at,
                format!("F_g must be rank 1, got {:?}", global.shape()),
            ));
        }
        let d = global.numel();
        if local.rank() != 2 || local.shape()[1] != d {
            return Err(Error::format(
                l_at,
                format!("F_l shape {:?} does not match F_g width {d}", local.shape()),
            ));
        }
        if header.d != d {
            return Err(Error::format(
                0,
                format!("header d = {} but records have width {d}", header.d),
            ));
        }
        if header.keypoint_names.len() != local.shape()[0] {
            return Err(Error::format(
                l_at,
                format!(
                    "header lists {} keypoints but F_l has {} rows",
                    header.keypoint_names.len(),
                    local.shape()[0]
                ),
            ));
        }
        normalize_rows(global.data_mut(), d, "F_g")?;
        normalize_rows(local.data_mut(), d, "F_l")?;
        Ok(SemanticPrior {
            species: header.species,
            keypoint_names: header.keypoint_names,
            encoder_name: header.encoder_name,
            global,
            local,
            source: PriorSource::File,
        })
    }
}

/// Rescale each row to unit norm. Rows already at unit norm (within 1e-12)
/// are left bit-identical so that load→save is the identity.
fn normalize_rows(data: &mut [f64], d: usize, what: &str) -> Result<()> {
    for (i, row) in data.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < NORM_EPS {
            return Err(Error::Numeric(format!(
                "{what} row {i} has norm {norm}; cannot normalize"
            )));
        }
        if (norm - 1.0).abs() > NORM_EPS {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(())
}

/// Stable 64-bit hash of a text (first 8 bytes of its SHA-256, little-endian).
pub fn text_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn pseudo_vector(text: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::derive(text_hash(text), seed);
    let mut v = rng.normal_vec(d);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic offline stand-in for a frozen text encoder.
pub fn pseudo_embed(bundle: &PromptBundle, d: usize, seed: u64) -> Result<SemanticPrior> {
    if d < MIN_EMBED_DIM {
        return Err(Error::Config(format!(
            "embedding width {d} below minimum {MIN_EMBED_DIM}"
        )));
    }
    let global = Tensor::from_vec(pseudo_vector(&bundle.global_prompt, d, seed));
    let n = bundle.keypoint_prompts.len();
    let local: Vec<f64> = bundle
        .keypoint_prompts
        .iter()
        .flat_map(|(_, p)| pseudo_vector(p, d, seed))
        .collect();
    Ok(SemanticPrior {
        species: bundle.species.clone(),
        keypoint_names: bundle
            .keypoint_prompts
            .iter()
            .map(|(k, _)| k.clone())
            .collect(),
        encoder_name: PSEUDO_ENCODER_NAME.to_string(),
        global,
        local: Tensor::new(&[n, d], local)?,
        source: PriorSource::Pseudo,
    })
}

/// Prior with `F_g` and every `F_l` row replaced by one shared random unit vector.
pub fn collapsed(template: &SemanticPrior, seed: u64) -> SemanticPrior {
    let d = template.dim();
    let n = template.num_keypoints();
    let v = pseudo_vector("collapsed-prior", d, seed);
    SemanticPrior {
        species: template.species.clone(),
        keypoint_names: template.keypoint_names.clone(),
        encoder_name: format!("collapsed({})", template.encoder_name),
        global: Tensor::from_vec(v.clone()),
        local: Tensor::from_parts(vec![n, d], v.repeat(n)),
        source: template.source,
    }
}

pub fn save_embeddings(prior: &SemanticPrior, path: &Path) -> Result<()> {
    write_file(path, &prior.to_bytes())
}

pub fn load_embeddings(path: &Path) -> Result<SemanticPrior> {
    SemanticPrior::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("kp{i}")).collect()
    }

    #[test]
    fn template_substitution() {
        let b = build_prompts("tiger", &["nose".to_string()]).unwrap();
        assert_eq!(b.keypoint_prompts.len(), 1);
        let p = &b.keypoint_prompts[0].1;
        assert!(p.contains("tiger") && p.contains("nose"));
        assert_eq!(
            p,
            "For a tiger, describe the anatomical role of the keypoint 'nose'."
        );
        assert!(b.global_prompt.ends_with("Keypoints: nose."));
    }

    #[test]
    fn prompt_validation() {
        assert!(build_prompts("", &names(2)).is_err());
        assert!(build_prompts("cat", &[]).is_err());
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            build_prompts("cat", &dup),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn order_preserved_for_17() {
        let b = build_prompts("dog", &names(17)).unwrap();
        assert_eq!(b.keypoint_prompts.len(), 17);
        for (i, (k, _)) in b.keypoint_prompts.iter().enumerate() {
            assert_eq!(k, &format!("kp{i}"));
        }
    }

    #[test]
    fn pseudo_embed_is_deterministic_and_unit() {
        let b = build_prompts("dog", &names(5)).unwrap();
        let a = pseudo_embed(&b, 32, 1).unwrap();
        let c = pseudo_embed(&b, 32, 1).unwrap();
        assert_eq!(a.global.data(), c.global.data());
        assert_eq!(a.local.data(), c.local.data());
        for row in a
            .local
            .data()
            .chunks(32)
            .chain(std::iter::once(a.global.data()))
        {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(pseudo_embed(&b, 4, 1).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let b = build_prompts("dog", &names(3)).unwrap();
        let p = pseudo_embed(&b, 16, 7).unwrap();
        let bytes = p.to_bytes();
        let back = SemanticPrior::from_bytes(&bytes).unwrap();
        assert_eq!(back.source, PriorSource::File);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_names_offset() {
        let b = build_prompts("dog", &names(3)).unwrap();
        let bytes = pseudo_embed(&b, 16, 7).unwrap().to_bytes();
        let err = SemanticPrior::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(
            matches!(err, Error::Format { offset, .. } if offset > 0),
            "{err}"
        );
    }

    #[test]
    fn zero_row_is_rejected() {
        let b = build_prompts("dog", &names(2)).unwrap();
        let mut p = pseudo_embed(&b, 8, 7).unwrap();
        p.local.data_mut()[8..16].fill(0.0);
        assert!(matches!(
            SemanticPrior::from_bytes(&p.to_bytes()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn width_mismatch_is_format_error() {
        let b = build_prompts("dog", &names(2)).unwrap();
        let mut p = pseudo_embed(&b, 8, 7).unwrap();
        p.local = Tensor::full(&[2, 9], 0.3);
        assert!(matches!(
            SemanticPrior::from_bytes(&p.to_bytes()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn non_unit_rows_are_renormalized() {
        let b = build_prompts("dog", &names(2)).unwrap();
        let mut p = pseudo_embed(&b, 8, 7).unwrap();
        p.local.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let back = SemanticPrior::from_bytes(&p.to_bytes()).unwrap();
        for row in back.local.data().chunks(8) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn keypoint_count_mismatch_reports_both() {
        let b = build_prompts("dog", &names(3)).unwrap();
        let p = pseudo_embed(&b, 8, 7).unwrap();
        let msg = p.check_keypoints(17).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains("17"), "{msg}");
    }

    #[test]
    fn collapsed_rows_are_identical() {
        let b = build_prompts("dog", &names(4)).unwrap();
        let c = collapsed(&pseudo_embed(&b, 8, 7).unwrap(), 1);
        let rows: Vec<&[f64]> = c.local.data().chunks(8).collect();
        assert!(rows.iter().all(|r| *r == c.global.data()));
    }
}

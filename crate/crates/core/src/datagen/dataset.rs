//! Offline dataset persistence.
//!
//! Layout under the output directory:
//!
//! ```text
//! images/{id}_q.png   query image
//! images/{id}_c.png   context image
//! manifest.jsonl      one record per line
//! params.json         generator parameters + format version
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GenError, GenParams, Generator};
use crate::tokenizer::{self, TokenMap, TokenSeq, Vocab};

pub const FORMAT_VERSION: u32 = 1;

/// One line of `manifest.jsonl`. Field order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub query_text: String,
    pub context_text: String,
    pub context_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub alpha: f64,
    pub beta: f64,
    pub font_id: usize,
    pub q_image: String,
    pub c_image: String,
}

impl ManifestRecord {
    pub fn vocab(label_count: usize) -> Vocab {
        Vocab::new(label_count)
    }

    pub fn context_tokens(&self, vocab: &Vocab) -> Result<TokenSeq, tokenizer::TokenizerError> {
        vocab.tokens(&self.context_tokens)
    }

    pub fn target_tokens(&self, vocab: &Vocab) -> Result<TokenSeq, tokenizer::TokenizerError> {
        vocab.tokens(&self.target_tokens)
    }

    /// Rebuilds the context's token map from the stored context text.
    pub fn token_map(&self, label_count: usize) -> Result<TokenMap, tokenizer::TokenizerError> {
        tokenizer::encode_context(&self.context_text, label_count).map(|(_, m)| m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsFile {
    format_version: u32,
    count: usize,
    params: GenParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub generator_params: GenParams,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn image_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_images(&self, record: &ManifestRecord) -> Result<(GrayImage, GrayImage), GenError> {
        Ok((read_png(&self.image_path(&record.c_image))?, read_png(&self.image_path(&record.q_image))?))
    }

    /// Checks every referenced image exists and decodes to a nonempty raster.
    pub fn validate_images(&self) -> Result<(), GenError> {
        for r in &self.records {
            for rel in [&r.q_image, &r.c_image] {
                let img = read_png(&self.image_path(rel))?;
                if img.height() == 0 || img.width() == 0 {
                    return Err(GenError::Manifest { path: self.image_path(rel), message: "empty image".into() });
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenError + '_ {
    move |source| GenError::Io { path: path.to_path_buf(), source }
}

pub fn read_png(path: &Path) -> Result<GrayImage, GenError> {
    let img = image::open(path).map_err(|source| GenError::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

fn write_png(path: &Path, img: &GrayImage) -> Result<(), GenError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| GenError::Image { path: path.to_path_buf(), source })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), GenError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Generates `count` samples into `out_dir`. The manifest is written last.
pub fn generate_dataset(params: &GenParams, count: usize, out_dir: &Path) -> Result<DatasetManifest, GenError> {
    let generator = Generator::new(params.clone())?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let vocab = Vocab::new(params.label_count);

    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = generator.sample(i as u64)?;
            let id = format!("{i:06}");
            let q_image = format!("images/{id}_q.png");
            let c_image = format!("images/{id}_c.png");
            write_png(&out_dir.join(&q_image), &s.query_image)?;
            write_png(&out_dir.join(&c_image), &s.context_image)?;
            Ok(ManifestRecord {
                id,
                query_text: s.query_text,
                context_text: s.context_text,
                context_tokens: vocab.ids(&s.context_tokens),
                target_tokens: vocab.ids(&s.target_tokens),
                alpha: s.alpha_actual,
                beta: s.beta_actual,
                font_id: s.font_id,
                q_image,
                c_image,
            })
        })
        .collect::<Result<Vec<_>, GenError>>()?;

    let params_file = ParamsFile { format_version: FORMAT_VERSION, count, params: generator.params().clone() };
    let mut pj = serde_json::to_vec_pretty(&params_file).expect("params serialize");
    pj.push(b'\n');
    write_atomic(&out_dir.join("params.json"), &pj)?;

    let mut manifest = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut manifest, r).expect("record serialize");
        manifest.push(b'\n');
    }
    write_atomic(&out_dir.join("manifest.jsonl"), &manifest)?;

    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        generator_params: generator.params().clone(),
        format_version: FORMAT_VERSION,
    })
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest, GenError> {
    let pj_path = dir.join("params.json");
    let pj = fs::read(&pj_path).map_err(io_err(&pj_path))?;
    let params_file: ParamsFile = serde_json::from_slice(&pj)
        .map_err(|e| GenError::Manifest { path: pj_path.clone(), message: e.to_string() })?;
    if params_file.format_version != FORMAT_VERSION {
        return Err(GenError::Manifest {
            path: pj_path,
            message: format!("unsupported format version {}", params_file.format_version),
        });
    }
    let m_path = dir.join("manifest.jsonl");
    let f = File::open(&m_path).map_err(io_err(&m_path))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&m_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| GenError::Manifest { path: m_path.clone(), message: format!("line {}: {e}", n + 1) })?;
        records.push(r);
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        records,
        generator_params: params_file.params,
        format_version: params_file.format_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{latin_lowercase, list_font_files};

    fn params(seed: u64) -> GenParams {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fonts/train");
        GenParams::new(latin_lowercase(), list_font_files(&dir).unwrap()[..2].to_vec(), seed)
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&params(1), 0, dir.path()).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(fs::read(dir.path().join("manifest.jsonl")).unwrap(), b"");
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn round_trip_and_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&params(2), 5, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.generator_params, params(2));
        back.validate_images().unwrap();

        let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut expected = vec![
            "id", "query_text", "context_text", "context_tokens", "target_tokens", "alpha", "beta", "font_id", "q_image",
            "c_image",
        ];
        expected.sort_unstable();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort_unstable();
        assert_eq!(keys_sorted, expected);
        assert!(text.starts_with("{\"id\":\"000000\",\"query_text\":"));
        assert!(!dir.path().join("manifest.tmp").exists());
    }

    #[test]
    fn missing_image_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&params(3), 2, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/000001_c.png")).unwrap();
        assert!(load_dataset(dir.path()).unwrap().validate_images().is_err());
    }
}

//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/<study id>/<slice index>.f32     raw little-endian float32, shape from the manifest
//! ```
//!
//! The manifest lists every study with its class, slice files and image
//! shape. It is written last, through a rename, so a readable manifest always
//! refers to complete slice files.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "dmrn-dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub id: String,
    /// `[C, S, S]`.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    pub class: usize,
    pub slices: Vec<Slice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
    pub studies: Vec<Study>,
    /// Free-form provenance stored alongside the manifest (e.g. generator settings).
    pub provenance: Option<serde_json::Value>,
}

/// A slice image with its class, as consumed by training and the SVM head.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub image: &'a Tensor<f32>,
    pub class: usize,
    pub study: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    version: u32,
    classes: Vec<String>,
    image_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    studies: Vec<StudyRecord>,
}

#[derive(Serialize, Deserialize)]
struct StudyRecord {
    id: String,
    class: usize,
    shape: [usize; 3],
    slices: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_slices(&self) -> usize {
        self.studies.iter().map(|s| s.slices.len()).sum()
    }

    pub fn study_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.studies {
            counts[s.class] += 1;
        }
        counts
    }

    pub fn slice_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.studies {
            counts[s.class] += s.slices.len();
        }
        counts
    }

    /// All slices of the given studies, in study then slice order.
    pub fn samples(&self, studies: &[usize]) -> Vec<Sample<'_>> {
        studies
            .iter()
            .flat_map(|&si| {
                let study = &self.studies[si];
                study.slices.iter().map(move |sl| Sample {
                    image: &sl.image,
                    class: study.class,
                    study: si,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Data("a dataset needs at least two classes".into()));
        }
        for s in &self.studies {
            if s.class >= self.classes.len() {
                return Err(Error::Data(format!("study {} has unknown class {}", s.id, s.class)));
            }
            if s.slices.is_empty() {
                return Err(Error::Data(format!("study {} has no slices", s.id)));
            }
            if let Some(bad) = s.slices.iter().find(|sl| sl.image.shape() != self.image_shape) {
                return Err(Error::Data(format!(
                    "slice {} has shape {:?}, dataset declares {:?}",
                    bad.id,
                    bad.image.shape(),
                    self.image_shape
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut studies = Vec::with_capacity(self.studies.len());
        for study in &self.studies {
            let dir = root.join(&study.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut files = Vec::with_capacity(study.slices.len());
            for (k, slice) in study.slices.iter().enumerate() {
                let rel = format!("{}/{k:03}.f32", study.id);
                let mut bytes = Vec::with_capacity(slice.image.numel() * 4);
                for &v in slice.image.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                let path = root.join(&rel);
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                files.push(rel);
            }
            studies.push(StudyRecord {
                id: study.id.clone(),
                class: study.class,
                shape: self.image_shape,
                slices: files,
            });
        }
        let manifest = ManifestFile {
            format: FORMAT.into(),
            version: 1,
            classes: self.classes.clone(),
            image_shape: self.image_shape,
            provenance: self.provenance.clone(),
            studies,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let path = root.join(MANIFEST_FILE);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!("{}: not a dataset manifest", path.display())));
        }
        let numel: usize = manifest.image_shape.iter().product();
        let mut studies = Vec::with_capacity(manifest.studies.len());
        for rec in manifest.studies {
            if rec.shape != manifest.image_shape {
                return Err(Error::Data(format!(
                    "study {} declares shape {:?}, dataset {:?}",
                    rec.id, rec.shape, manifest.image_shape
                )));
            }
            let mut slices = Vec::with_capacity(rec.slices.len());
            for rel in &rec.slices {
                let file = root.join(rel);
                let mut bytes = Vec::with_capacity(numel * 4);
                fs::File::open(&file)
                    .and_then(|mut f| f.read_to_end(&mut bytes))
                    .map_err(|e| Error::io(&file, e))?;
                if bytes.len() != numel * 4 {
                    return Err(Error::Data(format!(
                        "{}: {} bytes, expected {}",
                        file.display(),
                        bytes.len(),
                        numel * 4
                    )));
                }
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                slices.push(Slice {
                    id: rel.trim_end_matches(".f32").to_string(),
                    image: Tensor::new(&rec.shape, values)?,
                });
            }
            studies.push(Study {
                id: rec.id,
                class: rec.class,
                slices,
            });
        }
        let ds = Dataset {
            classes: manifest.classes,
            image_shape: manifest.image_shape,
            studies,
            provenance: manifest.provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Reads a binary (`P5`) or ASCII (`P2`) greyscale PGM as a `[1, H, W]`
/// tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err("invalid dimensions or maxval".into());
    }
    let count = width * height;
    let max = maxval as f32;
    let values: Vec<f32> = match magic.as_str() {
        "P5" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if body.len() < need {
                return Err(format!("raster has {} bytes, expected {need}", body.len()));
            }
            if wide {
                body[..need]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / max)
                    .collect()
            } else {
                body[..need].iter().map(|&b| b as f32 / max).collect()
            }
        }
        "P2" => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(num(token()?)? as f32 / max);
            }
            v
        }
        other => return Err(format!("unsupported PGM magic `{other}`")),
    };
    Tensor::new(&[1, height, width], values).map_err(|e| e.to_string())
}

/// Nearest-neighbour resampling of a `[C, H, W]` image to `[C, size, size]`.
pub fn resize_nearest(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape("resize_nearest", format!("expected [C, H, W], got {s:?}"))),
    };
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let sy = (y * h) / size;
            for x in 0..size {
                let sx = (x * w) / size;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

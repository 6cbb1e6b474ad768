//! On-disk corpus layout:
//!
//! ```text
//! images/rgb/<id>.png        8-bit RGB
//! images/nir/<id>.png        8-bit gray
//! labels/<class>/<id>.png    nonzero = annotated
//! masks/<id>.png             nonzero = valid (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use super::classes::{class_by_dir, ClassFrequencyTable};
use super::RawExample;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

fn ingest_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Ingestion(format!("{}: {e}", path.display()))
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| ingest_err(path, e))?.to_luma8())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ingest_err(dir, e))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Annotation directories that hold a usable class, sorted by name.
fn label_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let labels = root.join("labels");
    let mut out = Vec::new();
    if !labels.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(&labels).map_err(|e| ingest_err(&labels, e))? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if class_by_dir(&name).map_err(|e| ingest_err(&path, e))?.is_some() {
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_example(root: &Path, id: &str, classes: &[(String, PathBuf)]) -> Result<RawExample> {
    let rgb_path = root.join("images/rgb").join(format!("{id}.png"));
    let rgb: RgbImage = image::open(&rgb_path).map_err(|e| ingest_err(&rgb_path, e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (h, w) = (h as usize, w as usize);
    let gray = |path: PathBuf| -> Result<Vec<u8>> {
        let g = read_gray(&path)?;
        if g.dimensions() != (w as u32, h as u32) {
            return Err(ingest_err(
                &path,
                format!("size {:?} differs from the RGB image {:?}", g.dimensions(), (w, h)),
            ));
        }
        Ok(g.into_raw())
    };
    let nir = gray(root.join("images/nir").join(format!("{id}.png")))?;
    let mut class_masks = BTreeMap::new();
    for (name, dir) in classes {
        let p = dir.join(format!("{id}.png"));
        if p.exists() {
            class_masks.insert(name.clone(), gray(p)?.into_iter().map(|v| v != 0).collect());
        }
    }
    let mask_path = root.join("masks").join(format!("{id}.png"));
    let valid = if mask_path.exists() {
        Some(gray(mask_path)?.into_iter().map(|v| v != 0).collect())
    } else {
        None
    };
    let ex = RawExample {
        id: id.to_string(),
        height: h,
        width: w,
        rgb: rgb.into_raw(),
        nir,
        class_masks,
        valid,
    };
    ex.validate()?;
    Ok(ex)
}

/// Reads every example, sorted by id. Unknown class directories fail.
pub fn read_corpus(root: &Path) -> Result<Vec<RawExample>> {
    let rgb_dir = root.join("images/rgb");
    if !rgb_dir.is_dir() {
        return Err(ingest_err(&rgb_dir, "not a directory"));
    }
    let ids = png_stems(&rgb_dir)?;
    if ids.is_empty() {
        return Err(ingest_err(&rgb_dir, "no PNG images"));
    }
    let classes = label_dirs(root)?;
    ids.par_iter().map(|id| read_example(root, id, &classes)).collect()
}

fn save_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Format(format!("{}: buffer does not match {w}x{h}", path.display())))?;
    img.save(path)?;
    Ok(())
}

/// 8-bit PNG holding one class index per pixel.
pub fn write_label_png(path: &Path, label: &[u8], h: usize, w: usize) -> Result<()> {
    save_gray(path, w, h, label.to_vec())
}

pub fn read_label_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let g = read_gray(path)?;
    let (w, h) = g.dimensions();
    Ok((g.into_raw(), h as usize, w as usize))
}

fn bool_png(m: &[bool]) -> Vec<u8> {
    m.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

pub fn write_corpus(root: &Path, examples: &[RawExample]) -> Result<()> {
    for d in ["images/rgb", "images/nir", "masks"] {
        fs::create_dir_all(root.join(d))?;
    }
    examples.par_iter().try_for_each(|ex| -> Result<()> {
        ex.validate()?;
        let (h, w) = (ex.height, ex.width);
        let file = format!("{}.png", ex.id);
        RgbImage::from_raw(w as u32, h as u32, ex.rgb.clone())
            .expect("validated size")
            .save(root.join("images/rgb").join(&file))?;
        save_gray(&root.join("images/nir").join(&file), w, h, ex.nir.clone())?;
        for (name, m) in &ex.class_masks {
            let dir = root.join("labels").join(name);
            fs::create_dir_all(&dir)?;
            save_gray(&dir.join(&file), w, h, bool_png(m))?;
        }
        if let Some(v) = &ex.valid {
            save_gray(&root.join("masks").join(&file), w, h, bool_png(v))?;
        }
        Ok(())
    })
}

/// Preprocessed record: a DAST table with `image` (1x4xHxW normalised),
/// `label` and `valid` (1x1xHxW).
pub fn write_record(path: &Path, ex: &RawExample, freq: &ClassFrequencyTable) -> Result<()> {
    let s = ex.to_sample(freq)?;
    let plane = Shape4::new(1, 1, ex.height, ex.width);
    let label = Tensor4::from_vec(plane, s.label.iter().map(|&l| l as f32).collect())?;
    let valid = Tensor4::from_vec(plane, s.valid.iter().map(|&v| v as u8 as f32).collect())?;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    crate::dast::write_table(&mut w, [("image", &s.image), ("label", &label), ("valid", &valid)].into_iter())?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_dataset;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<_> = synth_dataset(3, 5, 32).into_iter().map(|e| e.raw).collect();
        write_corpus(dir.path(), &raw).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), raw);
    }

    #[test]
    fn unknown_class_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<_> = synth_dataset(1, 5, 16).into_iter().map(|e| e.raw).collect();
        write_corpus(dir.path(), &raw).unwrap();
        fs::create_dir_all(dir.path().join("labels/cloud_shadow")).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Ingestion(m)) if m.contains("cloud_shadow")));
        fs::remove_dir(dir.path().join("labels/cloud_shadow")).unwrap();
        fs::create_dir_all(dir.path().join("labels/storm_damage")).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap().len(), 1);
        assert!(read_corpus(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        write_label_png(&p, &[0, 3, 8, 1, 2, 5], 2, 3).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), (vec![0, 3, 8, 1, 2, 5], 2, 3));
    }
}

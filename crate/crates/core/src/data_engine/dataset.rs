//! On-disk layout:
//!
//! ```text
//! root/images/{image_id}.png      8-bit RGB
//! root/masks/{image_id}/{k}.png   8-bit, 0 or 255
//! root/index.jsonl                one IndexRecord per triplet
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Triplet;
use crate::error::{Error, Result};
use crate::image::{Image, Plane};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub image_id: String,
    pub mask_file: String,
    pub caption: String,
    pub subject: String,
    pub task_tags: Vec<String>,
}

pub fn write_dataset(triplets: &[Triplet], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut next_mask: HashMap<&str, usize> = HashMap::new();
    let mut index = BufWriter::new(fs::File::create(root.join("index.jsonl"))?);
    for t in triplets {
        let k = next_mask.entry(&t.image_id).or_insert(0);
        if *k == 0 {
            t.image.save_png(root.join("images").join(format!("{}.png", t.image_id)))?;
            fs::create_dir_all(root.join("masks").join(&t.image_id))?;
        }
        let mask_file = format!("masks/{}/{}.png", t.image_id, k);
        t.mask.threshold(0.5).save_png(root.join(&mask_file))?;
        *k += 1;
        let record = IndexRecord {
            image_id: t.image_id.clone(),
            mask_file,
            caption: t.caption.clone(),
            subject: t.subject.clone(),
            task_tags: t.task_tags.clone(),
        };
        serde_json::to_writer(&mut index, &record)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let root = root.as_ref();
    let index = fs::File::open(root.join("index.jsonl")).map_err(|e| Error::CorruptDataset {
        image_id: String::new(),
        detail: format!("cannot open index.jsonl: {e}"),
    })?;
    let mut images: HashMap<String, Arc<Image>> = HashMap::new();
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(index).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptDataset {
            image_id: String::new(),
            detail: format!("index line {}: {e}", line_no + 1),
        })?;
        let corrupt = |detail: String| Error::CorruptDataset {
            image_id: rec.image_id.clone(),
            detail,
        };
        let expected_prefix = format!("masks/{}/", rec.image_id);
        if !rec.mask_file.starts_with(&expected_prefix) {
            return Err(corrupt(format!("mask file {} does not belong to this image", rec.mask_file)));
        }
        let image = match images.get(&rec.image_id) {
            Some(img) => img.clone(),
            None => {
                let path = root.join("images").join(format!("{}.png", rec.image_id));
                let img = Arc::new(Image::load(&path).map_err(|e| corrupt(format!("image {}: {e}", path.display())))?);
                images.insert(rec.image_id.clone(), img.clone());
                img
            }
        };
        let mask_path = root.join(&rec.mask_file);
        let mask = Plane::load_png(&mask_path).map_err(|e| corrupt(format!("mask {}: {e}", mask_path.display())))?;
        if mask.shape() != image.shape() {
            return Err(corrupt(format!(
                "mask shape {:?} != image shape {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        out.push(Triplet {
            image_id: rec.image_id,
            image,
            mask,
            caption: rec.caption,
            subject: rec.subject,
            task_tags: rec.task_tags,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_engine::build_synthetic_corpus;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let triplets = build_synthetic_corpus(6, 32, 1).unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, triplets);
    }

    #[test]
    fn missing_mask_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let triplets = build_synthetic_corpus(3, 32, 2).unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        let victim = &triplets[1].image_id;
        fs::remove_file(dir.path().join(format!("masks/{victim}/0.png"))).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::CorruptDataset { image_id, .. }) => assert_eq!(&image_id, victim),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn index_has_one_row_per_triplet() {
        let dir = tempfile::tempdir().unwrap();
        let triplets = build_synthetic_corpus(60, 16, 3).unwrap();
        let triplets: Vec<_> = triplets.into_iter().cycle().take(100).collect::<Vec<_>>();
        // re-label so every row refers to its own image id
        let triplets: Vec<_> = triplets
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.image_id = format!("img{i:03}");
                t
            })
            .collect();
        write_dataset(&triplets, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 100);
        assert_eq!(read_dataset(dir.path()).unwrap().len(), 100);
    }
}

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::Deserialize;

use super::{renumber_labels, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::raster::{LabelMap, Mask, RgbRaster};

const IMAGE_EXTS: [&str; 2] = ["bmp", "png"];
const ANNO_SUFFIX: &str = "_anno";
const TRAIN_PREFIXES: [&str; 1] = ["train_"];
const TEST_PREFIXES: [&str; 2] = ["testA_", "testB_"];
const MANIFEST_NAME: &str = "split.json";

/// How samples are assigned to the train and test splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SplitSpec {
    /// `<root>/split.json` if present, otherwise the file-name prefix rule.
    #[default]
    Auto,
    /// `train_*` → train, `testA_*` / `testB_*` → test.
    ByPrefix,
    /// JSON manifest `{"train": [ids], "test": [ids]}`.
    Manifest(PathBuf),
    Explicit { train: Vec<String>, test: Vec<String> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    train: Vec<String>,
    test: Vec<String>,
}

struct Entry {
    id: String,
    image: PathBuf,
    anno: PathBuf,
}

/// Load every image/annotation pair under `root` and assign splits.
pub fn load_dataset(root: &Path, split: &SplitSpec) -> Result<DatasetSplit> {
    let entries = discover(root)?;
    if entries.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }

    let explicit = match split {
        SplitSpec::Auto if root.join(MANIFEST_NAME).is_file() => Some(read_manifest(&root.join(MANIFEST_NAME))?),
        SplitSpec::Auto | SplitSpec::ByPrefix => None,
        SplitSpec::Manifest(p) => Some(read_manifest(p)?),
        SplitSpec::Explicit { train, test } => Some((train.clone(), test.clone())),
    };

    let mut out = DatasetSplit::default();
    match explicit {
        None => {
            for e in &entries {
                if TRAIN_PREFIXES.iter().any(|p| e.id.starts_with(p)) {
                    out.train.push(read_sample(e)?);
                } else if TEST_PREFIXES.iter().any(|p| e.id.starts_with(p)) {
                    out.test.push(read_sample(e)?);
                } else {
                    log::warn!("{}: id matches no split prefix, skipped", e.image.display());
                }
            }
        }
        Some((train, test)) => {
            let overlap: Vec<_> = train.iter().filter(|id| test.contains(id)).collect();
            if !overlap.is_empty() {
                return Err(Error::Manifest(format!("ids in both splits: {overlap:?}")));
            }
            let by_id: HashMap<&str, &Entry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
            for (ids, dst) in [(&train, &mut out.train), (&test, &mut out.test)] {
                for id in ids {
                    let e = by_id
                        .get(id.as_str())
                        .ok_or_else(|| Error::Manifest(format!("id {id} not found in {}", root.display())))?;
                    dst.push(read_sample(e)?);
                }
            }
        }
    }

    if out.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    log::info!(
        "loaded {} train + {} test samples from {}",
        out.train.len(),
        out.test.len(),
        root.display()
    );
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let m: ManifestFile = serde_json::from_str(&text)?;
    Ok((m.train, m.test))
}

fn discover(root: &Path) -> Result<Vec<Entry>> {
    let mut images = Vec::new();
    let mut names = BTreeSet::new();
    for item in fs::read_dir(root)? {
        let path = item?.path();
        if !path.is_file() {
            continue;
        }
        let Some(ext) = image_ext(&path) else { continue };
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        names.insert(format!("{stem}.{ext}"));
        if !stem.ends_with(ANNO_SUFFIX) {
            images.push((stem, path));
        }
    }

    let mut entries = Vec::with_capacity(images.len());
    for (id, image) in images {
        let anno = IMAGE_EXTS
            .iter()
            .map(|ext| format!("{id}{ANNO_SUFFIX}.{ext}"))
            .find(|n| names.contains(n))
            .map(|n| root.join(n));
        let Some(anno) = anno else {
            let ext = image_ext(&image).unwrap();
            return Err(Error::MissingAnnotation {
                expected: root.join(format!("{id}{ANNO_SUFFIX}.{ext}")),
                image,
            });
        };
        entries.push(Entry { id, image, anno });
    }
    entries.sort_by(|a, b| natural_key(&a.id).cmp(&natural_key(&b.id)));
    Ok(entries)
}

fn image_ext(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_string_lossy().to_ascii_lowercase();
    IMAGE_EXTS.contains(&ext.as_str()).then_some(ext)
}

/// `train_10` sorts after `train_9`.
fn natural_key(id: &str) -> (String, u64, String) {
    let digits_at = id.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let num = id[digits_at..].parse().unwrap_or(0);
    (id[..digits_at].to_string(), num, id.to_string())
}

fn read_sample(e: &Entry) -> Result<ImageSample> {
    let image = read_rgb(&e.image)?;
    let mut instance_mask = read_label_map(&e.anno)?;
    if !image.same_dims(&instance_mask) {
        return Err(Error::SizeMismatch {
            id: e.id.clone(),
            image_h: image.height(),
            image_w: image.width(),
            mask_h: instance_mask.height(),
            mask_w: instance_mask.width(),
        });
    }
    renumber_labels(&mut instance_mask);
    Ok(ImageSample {
        id: e.id.clone(),
        image,
        instance_mask,
    })
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbRaster> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbRaster::from_vec(h as usize, w as usize, 3, img.into_raw())
}

/// Grayscale annotation; the pixel value is the label. 16-bit files keep full range.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(u32::from).collect(),
    };
    LabelMap::from_vec(h, w, 1, data)
}

fn save_image(path: &Path, img: DynamicImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit single-channel PNG.
pub fn write_gray_png(path: &Path, image: &Mask) -> Result<()> {
    let buf =
        ImageBuffer::<Luma<u8>, _>::from_raw(image.width() as u32, image.height() as u32, image.as_slice().to_vec())
            .unwrap();
    save_image(path, DynamicImage::ImageLuma8(buf))
}

/// Write labels as 8-bit grayscale when they fit, 16-bit otherwise.
fn write_annotation(path: &Path, labels: &LabelMap) -> Result<()> {
    let max = labels.as_slice().iter().copied().max().unwrap_or(0);
    if max <= u8::MAX as u32 {
        write_gray_png(path, &labels.map(|v| v as u8))
    } else {
        write_label_png(path, labels)
    }
}

/// 16-bit grayscale PNG, pixel value = label. Labels above 65535 saturate.
pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let data = labels.as_slice().iter().map(|&v| v.min(u16::MAX as u32) as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(labels.width() as u32, labels.height() as u32, data).unwrap();
    save_image(path, DynamicImage::ImageLuma16(buf))
}

pub fn write_rgb_png(path: &Path, image: &RgbRaster) -> Result<()> {
    let buf =
        ImageBuffer::<Rgb<u8>, _>::from_raw(image.width() as u32, image.height() as u32, image.as_slice().to_vec())
            .unwrap();
    save_image(path, DynamicImage::ImageRgb8(buf))
}

pub fn save_sample(dir: &Path, sample: &ImageSample) -> Result<()> {
    write_rgb_png(&dir.join(format!("{}.png", sample.id)), &sample.image)?;
    write_annotation(&dir.join(format!("{}{ANNO_SUFFIX}.png", sample.id)), &sample.instance_mask)
}

/// Write a split in the loader's layout (PNG). Ids must carry split prefixes
/// for the prefix rule to reproduce the split on reload.
pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in split.train.iter().chain(&split.test) {
        save_sample(dir, s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    fn tiny(id: &str, h: usize, w: usize, label: u32) -> ImageSample {
        ImageSample {
            id: id.into(),
            image: RgbRaster::from_fn(h, w, 3, |y, x, c| (y * 7 + x * 3 + c) as u8),
            instance_mask: LabelMap::from_fn(h, w, 1, |y, _, _| if y < h / 2 { label } else { 0 }),
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), &SplitSpec::Auto).unwrap_err();
        assert!(err.to_string().contains("no samples found"), "{err}");
    }

    #[test]
    fn missing_annotation_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny("train_1", 8, 8, 1);
        write_rgb_png(&dir.path().join("train_1.png"), &s.image).unwrap();
        let err = load_dataset(dir.path(), &SplitSpec::Auto).unwrap_err();
        assert!(matches!(err, Error::MissingAnnotation { .. }));
        assert!(err.to_string().contains("train_1_anno.png"), "{err}");
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny("train_1", 8, 8, 1);
        write_rgb_png(&dir.path().join("train_1.png"), &s.image).unwrap();
        write_annotation(&dir.path().join("train_1_anno.png"), &LabelMap::filled(8, 9, 1, 0)).unwrap();
        let err = load_dataset(dir.path(), &SplitSpec::Auto).unwrap_err();
        assert!(matches!(err, Error::SizeMismatch { .. }), "{err}");
    }

    #[test]
    fn explicit_split_over_three_samples() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            save_sample(dir.path(), &tiny(id, 6, 5, 1)).unwrap();
        }
        let spec = SplitSpec::Explicit {
            train: vec!["a".into(), "b".into()],
            test: vec!["c".into()],
        };
        let split = load_dataset(dir.path(), &spec).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].id, "c");
    }

    #[test]
    fn manifest_file_overrides_prefix_rule() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["train_1", "train_2", "testA_1"] {
            save_sample(dir.path(), &tiny(id, 4, 4, 1)).unwrap();
        }
        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"train": ["testA_1"], "test": ["train_1", "train_2"]}"#,
        )
        .unwrap();
        let split = load_dataset(dir.path(), &SplitSpec::Auto).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.test.len(), 2);
        let by_prefix = load_dataset(dir.path(), &SplitSpec::ByPrefix).unwrap();
        assert_eq!(by_prefix.train.len(), 2);
    }

    #[test]
    fn labels_are_renumbered_contiguously() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny("train_1", 8, 8, 0);
        s.instance_mask = LabelMap::from_fn(8, 8, 1, |y, x, _| match (y < 4, x < 4) {
            (true, true) => 40,
            (false, false) => 7,
            _ => 0,
        });
        save_sample(dir.path(), &s).unwrap();
        let split = load_dataset(dir.path(), &SplitSpec::Auto).unwrap();
        let m = &split.train[0].instance_mask;
        assert_eq!(m.at(0, 0), 2);
        assert_eq!(m.at(7, 7), 1);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic(5, 64, 80, 9);
        save_dataset(dir.path(), &split).unwrap();
        let back = load_dataset(dir.path(), &SplitSpec::Auto).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn sixteen_bit_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::from_fn(5, 7, 1, |y, x, _| (y * 7 + x) as u32 * 300);
        let p = dir.path().join("l.png");
        write_label_png(&p, &labels).unwrap();
        assert_eq!(read_label_map(&p).unwrap(), labels);
    }

    #[test]
    fn natural_ordering_of_ids() {
        let mut ids = vec!["train_10", "train_2", "train_1"];
        ids.sort_by_key(|s| natural_key(s));
        assert_eq!(ids, ["train_1", "train_2", "train_10"]);
    }
}

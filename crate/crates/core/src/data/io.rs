//! Dataset persistence: a flat binary container and PNG class folders.
//!
//! Binary layout, little-endian:
//! `ZAPDATA1 | n_classes u32 | n_per_class u32 | height u32 | width u32 |
//! channels u32 | pixels u8[...]`, pixels in the in-memory order
//! (class, example, row, column, channel). Class names are not stored.

use std::fs;
use std::path::Path;

use super::FewShotDataset;
use crate::error::{Error, Result};

pub const DATA_MAGIC: &[u8; 8] = b"ZAPDATA1";

pub fn save_binary(dataset: &FewShotDataset, path: &Path) -> Result<()> {
    let (h, w, c) = dataset.image_shape();
    let mut buf = Vec::with_capacity(28 + dataset.pixels().len());
    buf.extend_from_slice(DATA_MAGIC);
    for v in [dataset.n_classes(), dataset.n_per_class(), h, w, c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend(dataset.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_binary(path: &Path) -> Result<FewShotDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 || &bytes[..8] != DATA_MAGIC {
        return Err(Error::format(path, "not a ZAPDATA1 file (bad magic)"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, per, h, w, c) = (field(0), field(1), field(2), field(3), field(4));
    let want = n
        .checked_mul(per)
        .and_then(|v| v.checked_mul(h * w * c))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if bytes.len() - 28 != want {
        return Err(Error::format(
            path,
            format!("expected {want} pixel bytes, found {}", bytes.len() - 28),
        ));
    }
    let pixels = bytes[28..].iter().map(|&b| b as f32 / 255.0).collect();
    let names = (0..n).map(|i| format!("class{i:04}")).collect();
    FewShotDataset::new(names, per, (h, w, c), pixels)
}

/// Nearest-neighbour resize of a single-channel 8-bit image.
fn resize_nearest(src: &[u8], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = y * sh / th;
        for x in 0..tw {
            out.push(src[sy * sw + x * sw / tw]);
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// One sub-directory per class, each holding equally many PNG files.
/// Images are converted to 8-bit grayscale and resized to `target`.
pub fn load_png_dir(root: &Path, (th, tw): (usize, usize)) -> Result<FewShotDataset> {
    let class_dirs: Vec<_> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class folders under {}", root.display())));
    }
    let mut names = Vec::new();
    let mut pixels = Vec::new();
    let mut per_class = None;
    for dir in &class_dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<_> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        match per_class {
            None => per_class = Some(files.len()),
            Some(n) if n != files.len() => {
                return Err(Error::Data(format!(
                    "class {name:?} has {} images, expected {n}",
                    files.len()
                )))
            }
            _ => {}
        }
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::format(&f, e.to_string()))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let resized = resize_nearest(img.as_raw(), h, w, th, tw);
            pixels.extend(resized.iter().map(|&b| b as f32 / 255.0));
        }
        names.push(name);
    }
    let per = per_class.unwrap_or(0);
    if per == 0 {
        return Err(Error::Data("class folders contain no PNG files".into()));
    }
    FewShotDataset::new(names, per, (th, tw, 1), pixels)
}

/// A directory is read as PNG class folders, a file as ZAPDATA1.
/// Binary datasets must already have the target size.
pub fn load_dataset(path: &Path, target: (usize, usize)) -> Result<FewShotDataset> {
    if path.is_dir() {
        return load_png_dir(path, target);
    }
    let d = load_binary(path)?;
    let (h, w, _) = d.image_shape();
    if (h, w) != target {
        return Err(Error::Data(format!(
            "{} holds {h}x{w} images, expected {}x{}",
            path.display(),
            target.0,
            target.1
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};

    #[test]
    fn binary_roundtrip_is_exact() {
        let d = make_synthetic(&SyntheticSpec {
            n_classes: 3,
            n_per_class: 2,
            size: 10,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_binary(&d, &p).unwrap();
        let back = load_binary(&p).unwrap();
        assert_eq!(back.pixels(), d.pixels());
        assert_eq!(back.image_shape(), (10, 10, 1));
        assert_eq!(fs::read(&p).unwrap().len(), 28 + 3 * 2 * 100);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"NOTDATA!aaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        let e = load_binary(&p).unwrap_err();
        assert!(e.to_string().contains("magic"), "{e}");
        assert_eq!(e.exit_code(), 3);

        let mut b = DATA_MAGIC.to_vec();
        for v in [1u32, 1, 2, 2, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&[0, 0, 0]);
        fs::write(&p, &b).unwrap();
        assert!(load_binary(&p).is_err());
        b.push(255);
        fs::write(&p, &b).unwrap();
        assert_eq!(load_binary(&p).unwrap().pixels(), &[0.0, 0.0, 0.0, 1.0]);
    }

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn png_folders_resize_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, class) in ["b_class", "a_class"].iter().enumerate() {
            let cd = dir.path().join(class);
            fs::create_dir(&cd).unwrap();
            for e in 0..2 {
                write_png(&cd.join(format!("{e}.png")), 4, 4, |x, _| {
                    (x * 60 + ci as u32 + e) as u8
                });
            }
        }
        let d = load_png_dir(dir.path(), (2, 2)).unwrap();
        assert_eq!(d.class_names(), &["a_class".to_string(), "b_class".to_string()]);
        // source columns 0 and 2 survive
        let want: Vec<f32> = [1u8, 121, 1, 121].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(d.image(0, 0), &want[..]);

        write_png(&dir.path().join("a_class").join("2.png"), 4, 4, |_, _| 0);
        let e = load_png_dir(dir.path(), (2, 2)).unwrap_err();
        assert!(e.to_string().contains("b_class") || e.to_string().contains("a_class"));
    }
}

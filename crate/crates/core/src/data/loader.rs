use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{pgm, GrayImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub filename: String,
    pub hash: u64,
    pub image: GrayImage,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<LoadedImage>,
    pub test: Vec<LoadedImage>,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_images(&self) -> Vec<GrayImage> {
        self.train.iter().map(|l| l.image.clone()).collect()
    }

    pub fn test_images(&self) -> Vec<GrayImage> {
        self.test.iter().map(|l| l.image.clone()).collect()
    }
}

/// FNV-1a over the file name bytes.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic 90/10 assignment from the file name alone.
pub fn split_of(filename: &str) -> (Split, u64) {
    let h = fnv1a(filename);
    let split = if h % 10 == 0 { Split::Test } else { Split::Train };
    (split, h)
}

/// Load every `.pgm` file in `dir`, resized to `side × side`.
///
/// With `invert` set, dark-on-light sources are flipped so strokes are bright.
/// Files that fail to decode are skipped with a warning; an empty result is
/// an error.
pub fn load_image_dir(dir: &Path, side: usize, invert: bool) -> Result<DatasetSplit> {
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    let mut out = DatasetSplit::default();
    for path in paths {
        let filename = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let decoded = pgm::read(&path).and_then(|p| {
            if p.width != p.height {
                // Pad to square on the background before resizing.
                let s = p.width.max(p.height);
                let mut px = vec![if invert { 1.0 } else { 0.0 }; s * s];
                let norm = p.normalized();
                for r in 0..p.height {
                    for c in 0..p.width {
                        px[r * s + c] = norm[r * p.width + c];
                    }
                }
                Ok((s, px))
            } else {
                Ok((p.width, p.normalized()))
            }
        });
        match decoded {
            Ok((s, mut px)) => {
                if invert {
                    px.iter_mut().for_each(|v| *v = 1.0 - *v);
                }
                let image = GrayImage::new(s, px)?.resize(side);
                let (split, hash) = split_of(&filename);
                let item = LoadedImage {
                    filename,
                    hash,
                    image,
                };
                match split {
                    Split::Train => out.train.push(item),
                    Split::Test => out.test.push(item),
                }
            }
            Err(e) => out.warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    if out.is_empty() {
        return Err(Error::format(dir, "no readable PGM images"));
    }
    Ok(out)
}

/// Manifest CSV with columns `filename,split,hash`.
pub fn write_manifest(path: &Path, rows: &[(String, Split, u64)]) -> Result<()> {
    let mut s = String::from("filename,split,hash\n");
    for (name, split, hash) in rows {
        writeln!(s, "{name},{},{hash:016x}", split.as_str()).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_white_file_is_constant_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P5\n128 128\n255\n".to_vec();
        bytes.extend(std::iter::repeat(255u8).take(128 * 128));
        fs::write(dir.path().join("a.pgm"), bytes).unwrap();
        let ds = load_image_dir(dir.path(), 128, false).unwrap();
        let all: Vec<_> = ds.train.iter().chain(&ds.test).collect();
        assert_eq!(all.len(), 1);
        assert!(all[0].image.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_files_warn_and_empty_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.pgm"), b"garbage").unwrap();
        assert!(load_image_dir(dir.path(), 64, false).is_err());
        let img = GrayImage::constant(8, 0.5);
        pgm::write(&dir.path().join("ok.pgm"), &img).unwrap();
        let ds = load_image_dir(dir.path(), 64, false).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn split_is_a_partition_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..40 {
            pgm::write(&dir.path().join(format!("img{i:03}.pgm")), &GrayImage::blank(8)).unwrap();
        }
        let a = load_image_dir(dir.path(), 8, false).unwrap();
        let b = load_image_dir(dir.path(), 8, false).unwrap();
        let names = |d: &DatasetSplit, test: bool| -> Vec<String> {
            let v = if test { &d.test } else { &d.train };
            v.iter().map(|l| l.filename.clone()).collect()
        };
        assert_eq!(names(&a, true), names(&b, true));
        assert_eq!(names(&a, false), names(&b, false));
        assert_eq!(a.len(), 40);
        let test = names(&a, true);
        assert!(names(&a, false).iter().all(|n| !test.contains(n)));
    }
}

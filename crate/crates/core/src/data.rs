//! Deterministic synthetic text-image generator and dataset I/O.
//!
//! Words are rendered from a built-in 5×7 bitmap font onto a grayscale
//! canvas with per-sample brightness, shear, and noise, all derived from
//! `(seed, index)` so regeneration is byte-identical. Datasets live on disk
//! as `<root>/images/<id>.pgm`, `<root>/labels.tsv` (labeled sets only),
//! and `<root>/manifest.json`.

use crate::error::Error;
use crate::pgm;
use crate::rng::{self, tag};
use crate::text::Charset;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance between glyph origins, in cells.
const GLYPH_ADVANCE: usize = GLYPH_W + 1;

/// 5×7 glyphs for a-z then 0-9; each byte is one row, bit 4 leftmost.
#[rustfmt::skip]
const GLYPHS: [[u8; GLYPH_H]; 36] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // a
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110], // b
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110], // c
    [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110], // d
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // e
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000], // f
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111], // g
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // h
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // i
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100], // j
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001], // k
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // l
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001], // m
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001], // n
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // o
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000], // p
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101], // q
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001], // r
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110], // s
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // t
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // u
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100], // v
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010], // w
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001], // x
    [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100], // y
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // z
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Fixed bitmap font over the charset.
pub struct GlyphFont;

impl GlyphFont {
    pub fn glyph(ch: char) -> Result<&'static [u8; GLYPH_H]> {
        Ok(&GLYPHS[Charset::index_of(ch)?])
    }

    /// Number of set cells in a glyph; the ink-area oracle for rendering.
    pub fn ink_cells(ch: char) -> Result<usize> {
        Ok(Self::glyph(ch)?
            .iter()
            .map(|row| row.count_ones() as usize)
            .sum())
    }
}

/// One image with optional label, pixels in [0,1], row-major channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub label: Option<String>,
    pub sample_id: String,
}

impl ImageSample {
    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Render one word. All style decisions (brightness levels, shear, noise)
/// come from `style_seed`, so equal arguments give bit-identical pixels.
///
/// Glyphs are scaled by an integer factor and rows are shifted whole for
/// shear, so the number of ink pixels is exactly `ink cells × scale²`; a
/// threshold at 0.5 separates ink from background despite the noise.
pub fn render_word(word: &str, style_seed: u64, h: usize, w: usize, c: usize) -> Result<ImageSample> {
    let chars: Vec<char> = word.to_ascii_lowercase().chars().collect();
    if chars.is_empty() {
        return Err(Error::Label {
            label: word.into(),
            reason: "empty word".into(),
        });
    }
    for &ch in &chars {
        if !Charset::contains(ch) {
            return Err(Error::Charset { ch });
        }
    }
    let margin_x = 4;
    let margin_y = 2;
    let cells_w = chars.len() * GLYPH_ADVANCE - 1;
    let scale = ((h - 2 * margin_y) / GLYPH_H).min((w - 2 * margin_x) / cells_w);
    if scale == 0 {
        return Err(Error::Label {
            label: word.into(),
            reason: format!("{} chars do not fit a {h}x{w} canvas", chars.len()),
        });
    }

    let mut r = rng::stream(style_seed, &[tag::STYLE]);
    let background = r.gen_range(0.08..0.28);
    let ink = r.gen_range(0.72..0.95);
    let shear = r.gen_range(-0.15..0.15);
    let noise_amp: f64 = 0.04;

    let x0 = (w - scale * cells_w) / 2;
    let y0 = (h - scale * GLYPH_H) / 2;

    let mut mask = vec![false; h * w];
    for (ci, &ch) in chars.iter().enumerate() {
        let glyph = GlyphFont::glyph(ch)?;
        let gx = x0 + ci * GLYPH_ADVANCE * scale;
        for (gy, row) in glyph.iter().enumerate() {
            for bit in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - bit)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    let y = y0 + gy * scale + dy;
                    let dx_shift = (shear * (y as f64 - h as f64 / 2.0)).round() as isize;
                    for dx in 0..scale {
                        let x = (gx + bit * scale + dx) as isize + dx_shift;
                        mask[y * w + x as usize] = true;
                    }
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(h * w * c);
    for &is_ink in mask.iter() {
        let base = if is_ink { ink } else { background };
        let v = (base + r.gen_range(-noise_amp..noise_amp)).clamp(0.0, 1.0);
        for _ in 0..c {
            pixels.push(v);
        }
    }

    Ok(ImageSample {
        pixels,
        h,
        w,
        c,
        label: Some(chars.iter().collect()),
        sample_id: String::new(),
    })
}

/// Where the generator takes words from.
#[derive(Debug, Clone)]
pub enum WordSource {
    /// Uniform random length in `min_len..=max_len`, characters uniform
    /// over the charset.
    Random { min_len: usize, max_len: usize },
    /// Cycle through a fixed list.
    List(Vec<String>),
}

impl Default for WordSource {
    fn default() -> Self {
        WordSource::Random {
            min_len: 3,
            max_len: 10,
        }
    }
}

impl WordSource {
    /// The word for global sample index `index` under `seed`.
    pub fn word(&self, seed: u64, index: u64) -> String {
        match self {
            WordSource::Random { min_len, max_len } => {
                let mut r = rng::stream(seed, &[tag::WORD, index]);
                let len = r.gen_range(*min_len..=*max_len);
                (0..len)
                    .map(|_| Charset::char_at(r.gen_range(0..36)).unwrap())
                    .collect()
            }
            WordSource::List(words) => words[(index % words.len() as u64) as usize].clone(),
        }
    }

    pub fn from_list_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = body
            .lines()
            .map(|l| l.trim().to_ascii_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Data(format!("word list {} is empty", path.display())));
        }
        Ok(WordSource::List(words))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CanvasSize {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    n: usize,
    seed: u64,
    labeled: bool,
    canvas: CanvasSize,
    word_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub label: Option<String>,
}

/// An on-disk dataset: root directory plus the entry list.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub labeled: bool,
    pub canvas: CanvasSize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Label of entry `idx`; refuses on unlabeled manifests.
    pub fn label(&self, idx: usize) -> Result<&str> {
        if !self.labeled {
            return Err(Error::Data(format!(
                "manifest at {} is unlabeled and cannot serve labels",
                self.root.display()
            )));
        }
        self.entries[idx]
            .label
            .as_deref()
            .ok_or_else(|| Error::Data(format!("entry {idx} has no label")))
    }

    /// Load entry `idx`'s image from disk.
    pub fn load_image(&self, idx: usize) -> Result<ImageSample> {
        let entry = &self.entries[idx];
        let path = self.root.join("images").join(&entry.file);
        let (pixels, h, w, c) = pgm::read(&path)?;
        if (h, w, c) != (self.canvas.h, self.canvas.w, self.canvas.c) {
            return Err(Error::Data(format!(
                "{}: image is {h}x{w}x{c}, manifest says {}x{}x{}",
                path.display(),
                self.canvas.h,
                self.canvas.w,
                self.canvas.c
            )));
        }
        Ok(ImageSample {
            pixels,
            h,
            w,
            c,
            label: if self.labeled {
                entry.label.clone()
            } else {
                None
            },
            sample_id: entry.file.trim_end_matches(".pgm").trim_end_matches(".ppm").to_string(),
        })
    }

    /// The same images without labels (for use as the unlabeled set). A
    /// no-op when the manifest is already unlabeled; callers that care can
    /// check [`DatasetManifest::labeled`] first and warn.
    pub fn strip_labels(&self) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    file: e.file.clone(),
                    label: None,
                })
                .collect(),
            labeled: false,
            canvas: self.canvas.clone(),
            seed: self.seed,
        }
    }
}

/// Generate `n` samples under `out_dir`. Word `i` is drawn from
/// `(seed, word_offset + i)`, so datasets built over disjoint index ranges
/// share no draws; `labels.tsv` is written only for labeled sets.
pub fn make_dataset(
    n: usize,
    seed: u64,
    source: &WordSource,
    out_dir: &Path,
    labeled: bool,
    canvas: CanvasSize,
    word_offset: u64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let mut entries = Vec::with_capacity(n);
    let mut tsv: Vec<u8> = Vec::new();
    for i in 0..n {
        let global = word_offset + i as u64;
        let word = source.word(seed, global);
        let style_seed = seed ^ global.wrapping_mul(0x9e3779b97f4a7c15);
        let mut sample = render_word(&word, style_seed, canvas.h, canvas.w, canvas.c)?;
        let id = format!("{i:06}");
        let ext = if canvas.c == 3 { "ppm" } else { "pgm" };
        let file = format!("{id}.{ext}");
        sample.sample_id = id;
        pgm::write(&images.join(&file), &sample.pixels, canvas.h, canvas.w, canvas.c)?;
        if labeled {
            writeln!(tsv, "{file}\t{word}").expect("write to vec");
        }
        entries.push(ManifestEntry {
            file,
            label: labeled.then_some(word),
        });
    }
    if labeled {
        let path = out_dir.join("labels.tsv");
        std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = ManifestFile {
        format_version: 1,
        n,
        seed,
        labeled,
        canvas: canvas.clone(),
        word_offset,
    };
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(&manifest).expect("serialize manifest");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;

    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        labeled,
        canvas,
        seed,
    })
}

/// Load a dataset directory written by [`make_dataset`].
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ManifestFile = serde_json::from_str(&body)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.format_version != 1 {
        return Err(Error::Data(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let ext = if manifest.canvas.c == 3 { "ppm" } else { "pgm" };
    let entries = if manifest.labeled {
        let tsv_path = root.join("labels.tsv");
        let tsv = std::fs::read_to_string(&tsv_path).map_err(|e| Error::io(&tsv_path, e))?;
        let mut entries = Vec::new();
        for (ln, line) in tsv.lines().enumerate() {
            let (file, word) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}: line {} has no tab", tsv_path.display(), ln + 1))
            })?;
            entries.push(ManifestEntry {
                file: file.to_string(),
                label: Some(word.to_string()),
            });
        }
        if entries.len() != manifest.n {
            return Err(Error::Data(format!(
                "labels.tsv has {} rows, manifest says {}",
                entries.len(),
                manifest.n
            )));
        }
        entries
    } else {
        (0..manifest.n)
            .map(|i| ManifestEntry {
                file: format!("{i:06}.{ext}"),
                label: None,
            })
            .collect()
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        labeled: manifest.labeled,
        canvas: manifest.canvas,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas() -> CanvasSize {
        CanvasSize { h: 32, w: 128, c: 1 }
    }

    fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn render_is_deterministic() {
        let a = render_word("hello", 42, 32, 128, 1).unwrap();
        let b = render_word("hello", 42, 32, 128, 1).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = render_word("hello", 43, 32, 128, 1).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn ink_pixel_count_matches_glyph_area() {
        // Oracle: set cells in the glyph × scale². Row shifts from shear
        // move ink without creating or destroying it.
        for (word, seed) in [("a", 7u64), ("w", 11), ("3", 5), ("it", 9)] {
            let img = render_word(word, seed, 32, 128, 1).unwrap();
            let cells: usize = word
                .chars()
                .map(|ch| GlyphFont::ink_cells(ch).unwrap())
                .sum();
            let cells_w = word.len() * GLYPH_ADVANCE - 1;
            let scale = ((32 - 4) / GLYPH_H).min((128 - 8) / cells_w);
            let ink = img.pixels.iter().filter(|&&v| v > 0.5).count();
            assert_eq!(ink, cells * scale * scale, "word {word:?}");
        }
    }

    #[test]
    fn empty_word_rejected() {
        assert!(render_word("", 1, 32, 128, 1).is_err());
    }

    #[test]
    fn unsupported_character_rejected() {
        match render_word("a_b", 1, 32, 128, 1) {
            Err(Error::Charset { ch }) => assert_eq!(ch, '_'),
            other => panic!("expected charset error, got {other:?}"),
        }
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        for seed in 0..20 {
            let img = render_word("mixed42", seed, 32, 128, 1).unwrap();
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn labeled_dataset_has_labels_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(8, 3, &WordSource::default(), dir.path(), true, canvas(), 0).unwrap();
        assert_eq!(m.len(), 8);
        assert!(dir.path().join("labels.tsv").exists());
        let tsv = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 8);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.len(), 8);
        let img = loaded.load_image(0).unwrap();
        assert_eq!(img.label.as_deref(), Some(loaded.label(0).unwrap()));
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let src = WordSource::default();
        make_dataset(6, 9, &src, a.path(), true, canvas(), 0).unwrap();
        make_dataset(6, 9, &src, b.path(), true, canvas(), 0).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn unlabeled_dataset_refuses_labels() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(4, 3, &WordSource::default(), dir.path(), false, canvas(), 0).unwrap();
        assert!(!dir.path().join("labels.tsv").exists());
        let m = load_manifest(dir.path()).unwrap();
        assert!(!m.labeled);
        assert!(m.label(0).is_err());
        // Images themselves still load.
        assert!(m.load_image(0).is_ok());
    }

    #[test]
    fn strip_labels_drops_labels_but_keeps_images() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(5, 3, &WordSource::default(), dir.path(), true, canvas(), 0).unwrap();
        let stripped = m.strip_labels();
        assert!(!stripped.labeled);
        assert_eq!(stripped.len(), 5);
        assert!(stripped.label(0).is_err());
        assert_eq!(
            stripped.load_image(2).unwrap().pixels,
            m.load_image(2).unwrap().pixels
        );
        // Stripping an already-unlabeled manifest is a no-op.
        let again = stripped.strip_labels();
        assert_eq!(again.entries, stripped.entries);
    }

    #[test]
    fn disjoint_index_ranges_give_disjoint_word_lists() {
        let src = WordSource::default();
        let train: std::collections::HashSet<String> =
            (0..256).map(|i| src.word(11, i)).collect();
        let eval: std::collections::HashSet<String> =
            (256..384).map(|i| src.word(11, i)).collect();
        assert!(train.is_disjoint(&eval));
    }

    #[test]
    fn word_list_source_cycles() {
        let src = WordSource::List(vec!["cat".into(), "dog".into()]);
        assert_eq!(src.word(0, 0), "cat");
        assert_eq!(src.word(0, 1), "dog");
        assert_eq!(src.word(0, 2), "cat");
    }
}

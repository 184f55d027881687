//! Class taxonomy, YOLO label files, dataset splitting, netpbm image IO, the
//! synthetic pavement dataset and feature-map dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{DetectionBox, GroundTruthBox, Rect};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{msg}, line {line}")]
    Parse { line: usize, msg: String },
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("need at least {need} ids, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DamageClass {
    pub id: usize,
    pub code: &'static str,
    pub name: &'static str,
}

pub const TAXONOMY: [DamageClass; 7] = [
    DamageClass {
        id: 0,
        code: "D00",
        name: "Longitudinal crack",
    },
    DamageClass {
        id: 1,
        code: "D10",
        name: "Lateral crack",
    },
    DamageClass {
        id: 2,
        code: "D20",
        name: "Alligator crack",
    },
    DamageClass {
        id: 3,
        code: "D30",
        name: "Patching",
    },
    DamageClass {
        id: 4,
        code: "D40",
        name: "Pothole",
    },
    DamageClass {
        id: 5,
        code: "D43",
        name: "Crosswalk blur",
    },
    DamageClass {
        id: 6,
        code: "D44",
        name: "White line blur",
    },
];

pub const NUM_CLASSES: usize = TAXONOMY.len();

pub fn class_codes() -> Vec<&'static str> {
    TAXONOMY.iter().map(|c| c.code).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub boxes: Vec<GroundTruthBox>,
}

/// Image id → image path and ground truth.
pub type AnnotationSet = BTreeMap<String, ImageRecord>;

fn parse_fields(line: &str, lineno: usize, want: usize) -> Result<Vec<f64>> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != want {
        return Err(DataError::Parse {
            line: lineno,
            msg: format!("expected {want} fields, found {}", toks.len()),
        });
    }
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line: lineno,
                    msg: format!("non-numeric token {t:?}"),
                })
        })
        .collect()
}

fn parse_box(f: &[f64], lineno: usize) -> Result<(usize, Rect)> {
    let class = f[0];
    if class.fract() != 0.0 || class < 0.0 || class >= NUM_CLASSES as f64 {
        return Err(DataError::Parse {
            line: lineno,
            msg: "class out of range".into(),
        });
    }
    if f[3] <= 0.0 || f[4] <= 0.0 {
        return Err(DataError::Parse {
            line: lineno,
            msg: "non-positive box size".into(),
        });
    }
    let rect = Rect::from_center(f[1], f[2], f[3], f[4]).clamp_unit();
    if !rect.is_valid() {
        return Err(DataError::Parse {
            line: lineno,
            msg: "box lies outside the image".into(),
        });
    }
    Ok((class as usize, rect))
}

/// Parses `class cx cy w h` lines into corner-form boxes clamped to the
/// unit square. Image ids are left at 0.
pub fn parse_yolo_label_file(text: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(line, i + 1, 5)?;
        let (class_id, rect) = parse_box(&f, i + 1)?;
        out.push(GroundTruthBox {
            image_id: 0,
            class_id,
            rect,
        });
    }
    Ok(out)
}

/// Like [`parse_yolo_label_file`] with a trailing confidence column.
pub fn parse_prediction_file(text: &str) -> Result<Vec<DetectionBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(line, i + 1, 6)?;
        let (class_id, rect) = parse_box(&f, i + 1)?;
        if !(0.0..=1.0).contains(&f[5]) {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "confidence outside [0, 1]".into(),
            });
        }
        out.push(DetectionBox {
            image_id: 0,
            class_id,
            confidence: f[5],
            rect,
        });
    }
    Ok(out)
}

fn center_form(r: &Rect) -> [f64; 4] {
    [
        (r.x_min + r.x_max) / 2.0,
        (r.y_min + r.y_max) / 2.0,
        r.width(),
        r.height(),
    ]
}

pub fn serialize_yolo_label(boxes: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [cx, cy, w, h] = center_form(&b.rect);
        let _ = writeln!(s, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", b.class_id);
    }
    s
}

pub fn serialize_predictions(boxes: &[DetectionBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [cx, cy, w, h] = center_form(&b.rect);
        let _ = writeln!(
            s,
            "{} {cx:.6} {cy:.6} {w:.6} {h:.6} {:.6}",
            b.class_id, b.confidence
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

const LCG_MUL: u64 = 6364136223846793005;
const LCG_INC: u64 = 1442695040888963407;

/// Fisher–Yates shuffle driven by a 64-bit LCG seeded with `seed`, then
/// floor(80%) train, floor(10%) val, the rest test.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitManifest> {
    if ids.len() < 10 {
        return Err(DataError::TooFew {
            need: 10,
            got: ids.len(),
        });
    }
    let mut v = ids.to_vec();
    let mut state = seed;
    for i in (1..v.len()).rev() {
        state = state.wrapping_mul(LCG_MUL).wrapping_add(LCG_INC);
        let j = ((state >> 33) % (i as u64 + 1)) as usize;
        v.swap(i, j);
    }
    let n = v.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = v.split_off(n_train + n_val);
    let val = v.split_off(n_train);
    Ok(SplitManifest {
        train: v,
        val,
        test,
    })
}

// ---------------------------------------------------------------------------
// netpbm

struct Netpbm {
    channels: usize,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn read_netpbm(bytes: &[u8], expect: &[u8; 2]) -> Result<Netpbm> {
    if bytes.len() < 2 || &bytes[..2] != expect {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(DataError::Format(format!(
            "magic {got:?}, expected {}",
            String::from_utf8_lossy(expect)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format("malformed header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::Format("malformed header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::Format(format!(
            "maxval {maxval}, only 255 supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Format("zero-sized image".into()));
    }
    let channels = if expect == b"P6" { 3 } else { 1 };
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(DataError::Format(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    Ok(Netpbm {
        channels,
        width,
        height,
        pixels: payload[..need].to_vec(),
    })
}

/// Binary P6 image as a `[3, H, W]` tensor scaled to [0, 1].
pub fn load_image_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let img = read_netpbm(bytes, b"P6")?;
    let (h, w, c) = (img.height, img.width, img.channels);
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, px) = (i / (h * w), i % (h * w));
        img.pixels[px * c + ch] as f64 / 255.0
    }))
}

/// Binary P5 image as a `[H, W]` tensor scaled to [0, 1].
pub fn load_image_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let img = read_netpbm(bytes, b"P5")?;
    Ok(Tensor::from_fn(&[img.height, img.width], |i| {
        img.pixels[i] as f64 / 255.0
    }))
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Min-max normalizes a `[H, W]` map to 0..=255 (half-up rounding; constant
/// maps become all zeros) and writes it as P5.
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = map.shape() else {
        return Err(DataError::Invalid(format!(
            "PGM needs a [H, W] map, got {:?}",
            map.shape()
        )));
    };
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi > lo {
            to_byte((v - lo) / (hi - lo))
        } else {
            0
        }
    }));
    Ok(out)
}

/// Writes a `[3, H, W]` tensor with values in [0, 1] as P6 (values are
/// clamped, not normalized).
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(DataError::Invalid(format!(
            "PPM needs a [3, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(image.data()[c * h * w + px]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic dataset

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// `[3, S, S]` images in id order.
    pub images: Vec<Tensor>,
    pub annotations: AnnotationSet,
}

impl SynthDataset {
    pub fn ids(&self) -> Vec<String> {
        self.annotations.keys().cloned().collect()
    }

    /// Ground truth per image, in id order, with `image_id` = position.
    pub fn targets(&self) -> Vec<Vec<GroundTruthBox>> {
        self.annotations.values().map(|r| r.boxes.clone()).collect()
    }
}

pub fn synth_id(i: usize) -> String {
    format!("synth_{i:05}")
}

/// Pixel-space box, half-open.
#[derive(Debug, Clone, Copy)]
struct PixBox {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl PixBox {
    fn overlaps(&self, o: &PixBox, gap: usize) -> bool {
        self.x < o.x + o.w + gap
            && o.x < self.x + self.w + gap
            && self.y < o.y + o.h + gap
            && o.y < self.y + self.h + gap
    }
}

fn shape_extent(class: usize, s: usize, rng: &mut impl Rng) -> (usize, usize) {
    let m = s / 8;
    let r = |rng: &mut dyn rand::RngCore, lo: usize, hi: usize| rng.gen_range(lo..=hi.max(lo));
    match class {
        0 => (r(rng, m, s / 6), r(rng, s / 4, s / 2)),
        1 => (r(rng, s / 4, s / 2), r(rng, m, s / 6)),
        2 => {
            let side = r(rng, s / 5, s / 3);
            (side, side)
        }
        3 => (r(rng, s / 6, s / 3), r(rng, s / 6, s / 3)),
        4 => {
            let d = 2 * r(rng, m.div_ceil(2), s / 8) + 1;
            (d, d)
        }
        5 => (r(rng, s / 3, s / 2), r(rng, m, s / 5)),
        _ => (r(rng, s / 6, s / 4), m),
    }
}

/// Draws `class` into the gray-level canvas within box `b`. Every drawn
/// shape touches all four edges of its box.
fn draw(canvas: &mut [f64], s: usize, class: usize, b: PixBox) {
    let mut put = |x: usize, y: usize, v: f64| canvas[(b.y + y) * s + b.x + x] = v;
    let (w, h) = (b.w, b.h);
    let dark = 0.12;
    match class {
        0 => {
            // slanted 2-px line from the top-left to the bottom-right corner
            for y in 0..h {
                let cx = (y * (w - 2)) / (h - 1).max(1);
                put(cx, y, dark);
                put(cx + 1, y, dark);
            }
        }
        1 => {
            for x in 0..w {
                let cy = (x * (h - 2)) / (w - 1).max(1);
                put(x, cy, dark);
                put(x, cy + 1, dark);
            }
        }
        2 => {
            for y in 0..h {
                for x in 0..w {
                    let edge = x == 0 || y == 0 || x == w - 1 || y == h - 1;
                    if edge || (x + y) % 4 == 0 || (x + h - y) % 4 == 0 {
                        put(x, y, dark);
                    }
                }
            }
        }
        3 => {
            for y in 0..h {
                for x in 0..w {
                    put(x, y, 0.3);
                }
            }
        }
        4 => {
            let r = (w / 2) as f64;
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - r, y as f64 - r);
                    if dx * dx + dy * dy <= r * r + 0.5 {
                        put(x, y, 0.08);
                    }
                }
            }
        }
        5 => {
            for y in 0..h {
                let v = if (y / 2) % 2 == 0 { 0.92 } else { 0.2 };
                for x in 0..w {
                    put(x, y, v);
                }
            }
        }
        _ => {
            for y in 0..h {
                for x in 0..w {
                    put(x, y, 0.97);
                }
            }
        }
    }
}

/// Generates `n_images` gray `[3, size, size]` images with 1–3
/// non-overlapping damage-like shapes each. Every side of every object is at
/// least `size / 8` pixels, so on a `size / 8` grid no two object centers
/// share a cell.
pub fn synth_generate(n_images: usize, size: usize, seed: u64) -> Result<SynthDataset> {
    if size < 32 {
        return Err(DataError::Invalid(format!("image size {size} below 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_images);
    let mut annotations = AnnotationSet::new();
    for i in 0..n_images {
        let mut canvas: Vec<f64> = (0..size * size)
            .map(|_| 0.5 + rng.gen_range(-0.05..0.05))
            .collect();
        let mut placed: Vec<PixBox> = Vec::new();
        let mut boxes = Vec::new();
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let class = rng.gen_range(0..NUM_CLASSES);
            let (w, h) = shape_extent(class, size, &mut rng);
            let mut fitted = None;
            for _ in 0..100 {
                let b = PixBox {
                    x: rng.gen_range(0..=size - w),
                    y: rng.gen_range(0..=size - h),
                    w,
                    h,
                };
                if placed.iter().all(|p| !p.overlaps(&b, 1)) {
                    fitted = Some(b);
                    break;
                }
            }
            let Some(b) = fitted else { continue };
            draw(&mut canvas, size, class, b);
            placed.push(b);
            let f = size as f64;
            boxes.push(GroundTruthBox {
                image_id: i,
                class_id: class,
                rect: Rect::new(
                    b.x as f64 / f,
                    b.y as f64 / f,
                    (b.x + b.w) as f64 / f,
                    (b.y + b.h) as f64 / f,
                ),
            });
        }
        let plane = size * size;
        let image = Tensor::from_fn(&[3, size, size], |k| {
            let v = canvas[k % plane];
            // slight per-channel tint keeps the image gray-dominant
            (v + 0.02 * ((k / plane) as f64 - 1.0)).clamp(0.0, 1.0)
        });
        images.push(image);
        let id = synth_id(i);
        annotations.insert(
            id.clone(),
            ImageRecord {
                path: PathBuf::from(format!("{id}.ppm")),
                boxes,
            },
        );
    }
    Ok(SynthDataset {
        images,
        annotations,
    })
}

/// Writes the channel mean of batch element 0 as `<prefix>_mean.pgm` and
/// the first min(C, 16) channels as `<prefix>_cNN.pgm`.
pub fn featuremap_dump(fm: &Tensor, prefix: &Path) -> Result<Vec<PathBuf>> {
    let &[_, c, h, w] = fm.shape() else {
        return Err(DataError::Invalid(format!(
            "feature map must be [B, C, H, W], got {:?}",
            fm.shape()
        )));
    };
    let plane = h * w;
    let channel = |k: usize| &fm.data()[k * plane..(k + 1) * plane];
    let named = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!("_{suffix}.pgm"));
        PathBuf::from(s)
    };
    let mean = Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|k| channel(k)[i]).sum::<f64>() / c as f64
    });
    let mut written = Vec::new();
    let path = named("mean");
    write_pgm(&mean, &path)?;
    written.push(path);
    for k in 0..c.min(16) {
        let map = Tensor::new(&[h, w], channel(k).to_vec()).expect("plane size");
        let path = named(&format!("c{k:02}"));
        write_pgm(&map, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_codes_unique() {
        let mut codes = class_codes();
        assert_eq!(codes.len(), 7);
        codes.dedup();
        assert_eq!(codes.len(), 7);
        assert_eq!(TAXONOMY[5].name, "Crosswalk blur");
    }

    #[test]
    fn label_parse_examples() {
        let b = parse_yolo_label_file("0 0.5 0.5 0.2 0.1").unwrap();
        assert_eq!(b.len(), 1);
        let r = b[0].rect;
        assert_eq!(b[0].class_id, 0);
        for (got, want) in [
            (r.x_min, 0.4),
            (r.y_min, 0.45),
            (r.x_max, 0.6),
            (r.y_max, 0.55),
        ] {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(parse_yolo_label_file("").unwrap().is_empty());
        let e = parse_yolo_label_file("7 0.5 0.5 0.1 0.1").unwrap_err();
        assert_eq!(e.to_string(), "class out of range, line 1");
        let e = parse_yolo_label_file("0 0.5 0.5 0.1 0.1\n\n1 0.5 x 0.1 0.1").unwrap_err();
        assert!(e.to_string().ends_with("line 3"), "{e}");
        assert!(parse_yolo_label_file("0 0.5 0.5 0 0.1").is_err());
    }

    #[test]
    fn canonical_serialization() {
        let b = parse_yolo_label_file("0 0.5 0.5 0.2 0.1").unwrap();
        assert_eq!(
            serialize_yolo_label(&b),
            "0 0.500000 0.500000 0.200000 0.100000\n"
        );
        assert_eq!(serialize_yolo_label(&[]), "");
        let p = parse_prediction_file("3 0.5 0.5 0.2 0.2 0.75\n").unwrap();
        assert_eq!(p[0].confidence, 0.75);
        assert_eq!(
            serialize_predictions(&p),
            "3 0.500000 0.500000 0.200000 0.200000 0.750000\n"
        );
        assert!(parse_prediction_file("3 0.5 0.5 0.2 0.2\n").is_err());
    }

    #[test]
    fn split_sizes() {
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let m = split_dataset(&ids(100), 0).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (80, 10, 10));
        let m = split_dataset(&ids(10), 3).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
        assert_eq!(
            split_dataset(&ids(37), 9).unwrap(),
            split_dataset(&ids(37), 9).unwrap()
        );
        assert!(split_dataset(&ids(9), 0).is_err());
    }

    #[test]
    fn lcg_shuffle_trace() {
        // n = 10, seed 0: first step i = 9, state = LCG_INC
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let m = split_dataset(&ids, 0).unwrap();
        let mut state: u64 = 0;
        let mut v: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            v.swap(i, ((state >> 33) % (i as u64 + 1)) as usize);
        }
        assert_eq!(m.train[0], v[0].to_string());
        assert_eq!(m.test[0], v[9].to_string());
    }

    #[test]
    fn netpbm_examples() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        assert_eq!(decode_ppm(&bytes).unwrap(), Tensor::ones(&[3, 2, 2]));
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        let e = decode_ppm(b"P3\n2 2\n255\n1 2 3").unwrap_err();
        assert!(e.to_string().contains("unsupported"), "{e}");
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert_eq!(
            decode_pgm(b"P5 # c\n1 1\n255\n\x80").unwrap().data()[0],
            128.0 / 255.0
        );
        let map = Tensor::full(&[2, 3], 4.2);
        assert!(encode_pgm(&map).unwrap().ends_with(&[0; 6]));
    }

    #[test]
    fn half_up_rounding() {
        let map = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = encode_pgm(&map).unwrap();
        // 0.5 · 255 = 127.5 rounds up
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}

//! Image ingestion, the procedural synthetic corpus, and paired
//! input/target dataset construction.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, mix_seed, Rng};
use crate::tensor::{Shape, Tensor};

/// Minimum side length for ground-truth corpus images.
pub const MIN_CORPUS_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    File(PathBuf),
    Synthetic { seed: u64, index: usize },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::File(p) => write!(f, "file:{}", p.display()),
            Provenance::Synthetic { seed, index } => write!(f, "synth:seed={seed},index={index}"),
        }
    }
}

/// One image: (1, 3, H, W) pixels in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Tensor<f32>,
    pub provenance: Provenance,
}

/// Result of scanning a directory: decoded records plus a list of files
/// that were skipped (with the reason), for the manifest.
#[derive(Debug)]
pub struct LoadReport {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Decode an RGB PNG (8- or 16-bit; gray and alpha variants are
/// converted) into a (1, 3, H, W) tensor scaled to [0, 1].
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let err = |message: String| Error::Png {
        path: path.display().to_string(),
        message,
    };
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| err("output buffer size overflow".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| err(e.to_string()))?;
    let bytes = &buf[..info.buffer_size()];
    let (w, h) = (info.width as usize, info.height as usize);

    use png::{BitDepth, ColorType};
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(err(format!("unsupported color type {other:?}"))),
    };
    // sample value in [0,1] at pixel p, channel c (gray replicates)
    let sample: Box<dyn Fn(usize, usize) -> f32> = match info.bit_depth {
        BitDepth::Eight => Box::new(move |p, c| {
            let c = if channels < 3 { 0 } else { c };
            bytes[p * channels + c] as f32 / 255.0
        }),
        BitDepth::Sixteen => Box::new(move |p, c| {
            let c = if channels < 3 { 0 } else { c };
            let i = (p * channels + c) * 2;
            let v = u16::from_be_bytes([bytes[i], bytes[i + 1]]);
            v as f32 / 65535.0
        }),
        other => return Err(err(format!("unsupported bit depth {other:?}"))),
    };

    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![0f32; shape.numel()];
    for c in 0..3 {
        for p in 0..h * w {
            data[c * h * w + p] = sample(p, c);
        }
    }
    Tensor::new(shape, data)
}

/// Write a (1, 3, H, W) tensor as an 8-bit RGB PNG. The file is written
/// to a temp path and renamed into place.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(
            "write_png",
            format!("expected shape (1,3,H,W), got {s}"),
        ));
    }
    let mut rgb = vec![0u8; s.h * s.w * 3];
    let plane = s.h * s.w;
    for p in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + p].clamp(0.0, 1.0);
            rgb[p * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    let tmp = temp_sibling(path);
    {
        let file = fs::File::create(&tmp)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writer.write_image_data(&rgb).map_err(|e| Error::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".tmp");
    path.with_file_name(name)
}

/// Load every PNG in a directory (optionally filtered to names that
/// contain `pattern`), in lexicographic name order. Unreadable, corrupt
/// or undersized files are skipped with a warning entry; an empty result
/// is an error.
pub fn load_dir(dir: &Path, pattern: Option<&str>) -> Result<LoadReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .filter(|p| match pattern {
            Some(pat) => p
                .file_name()
                .map(|n| n.to_string_lossy().contains(pat))
                .unwrap_or(false),
            None => true,
        })
        .collect();
    paths.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match read_png(&path) {
            Ok(pixels) => {
                let s = pixels.shape();
                if s.h < MIN_CORPUS_SIDE || s.w < MIN_CORPUS_SIDE {
                    let reason =
                        format!("image {}x{} smaller than {MIN_CORPUS_SIDE} px", s.h, s.w);
                    eprintln!("warning: skipping {}: {reason}", path.display());
                    skipped.push((path, reason));
                    continue;
                }
                let id = path
                    .file_stem()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                records.push(ImageRecord {
                    id,
                    pixels,
                    provenance: Provenance::File(path),
                });
            }
            Err(e) => {
                let reason = e.to_string();
                eprintln!("warning: skipping {}: {reason}", path.display());
                skipped.push((path, reason));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable PNG images in {}",
            dir.display()
        )));
    }
    Ok(LoadReport { records, skipped })
}

/// Write the id -> provenance manifest (plus skipped-file entries).
pub fn write_manifest(
    path: &Path,
    records: &[ImageRecord],
    skipped: &[(PathBuf, String)],
) -> Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        for rec in records {
            writeln!(out, "{}\t{}", rec.id, rec.provenance)?;
        }
        for (p, reason) in skipped {
            writeln!(out, "!skipped\t{}\t{}", p.display(), reason)?;
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Procedural ground-truth corpus: band-limited sinusoids, smooth random
/// blobs and oriented soft edges, mixed per channel. Deterministic per
/// (seed, index) so any prefix of a corpus is stable.
pub fn synth_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if n == 0 {
        return Err(Error::invalid("synth_corpus", "n must be >= 1"));
    }
    if size < 64 || !size.is_multiple_of(4) {
        return Err(Error::invalid(
            "synth_corpus",
            format!("size {size} must be >= 64 and divisible by 4"),
        ));
    }
    Ok((0..n)
        .map(|index| ImageRecord {
            id: format!("synth-{index:04}"),
            pixels: synth_image(size, mix_seed(seed, index as u64)),
            provenance: Provenance::Synthetic { seed, index },
        })
        .collect())
}

fn synth_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::seed_from(seed);
    let s = size as f64;
    let mut planes = vec![0f64; 3 * size * size];

    // sinusoid plane waves, two per channel: one low band, one high band
    // (the high band is what blur and downsampling visibly destroy, and
    // what plain interpolation cannot bring back)
    for c in 0..3 {
        for band in 0..2 {
            let (lo, hi) = if band == 0 { (0.5, 5.0) } else { (4.0, 11.0) };
            let fx = rng.uniform(lo, hi) / s;
            let fy = rng.uniform(lo, hi) / s;
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let amp = rng.uniform(0.08, 0.22);
            let plane = &mut planes[c * size * size..][..size * size];
            for y in 0..size {
                for x in 0..size {
                    plane[y * size + x] += amp
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                }
            }
        }
    }

    // smooth blobs, shared across channels with random weights
    let n_blobs = 3 + rng.below(3);
    for _ in 0..n_blobs {
        let cx = rng.uniform(0.1 * s, 0.9 * s);
        let cy = rng.uniform(0.1 * s, 0.9 * s);
        let sigma = rng.uniform(s / 16.0, s / 6.0);
        let amp = rng.uniform(0.15, 0.35) * if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        let wch = [rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = amp * (-d2 * inv).exp();
                for c in 0..3 {
                    planes[c * size * size + y * size + x] += wch[c] * g;
                }
            }
        }
    }

    // oriented sharp edges (sub-pixel transition widths)
    for _ in 0..4 {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let (nx, ny) = (theta.cos(), theta.sin());
        let offset = rng.uniform(0.2, 0.8) * (nx.abs() + ny.abs()) * s;
        let width = rng.uniform(0.6, 1.6);
        let amp = rng.uniform(0.12, 0.3) * if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        let wch = [rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)];
        for y in 0..size {
            for x in 0..size {
                let proj = nx * x as f64 + ny * y as f64 - offset;
                let e = amp * (proj / width).tanh();
                for c in 0..3 {
                    planes[c * size * size + y * size + x] += wch[c] * e;
                }
            }
        }
    }

    // rescale each channel around its mean to a healthy contrast
    let mut data = vec![0f32; 3 * size * size];
    for c in 0..3 {
        let plane = &planes[c * size * size..][..size * size];
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane.len() as f64;
        let std = var.sqrt().max(1e-6);
        let target = rng.uniform(0.10, 0.16);
        let gain = target / std;
        for (i, &v) in plane.iter().enumerate() {
            data[c * size * size + i] = ((0.5 + (v - mean) * gain).clamp(0.0, 1.0)) as f32;
        }
    }
    Tensor::new(Shape::new(1, 3, size, size), data).expect("synth shape")
}

/// One input/target pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub input: ImageRecord,
    pub target: ImageRecord,
}

/// Pairs with consistent domains; target dims = input dims * scale.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub scale: usize,
    pub input_domain: String,
    pub target_domain: String,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Dataset("paired dataset is empty".into()));
        }
        for pair in &self.pairs {
            let (i, t) = (pair.input.pixels.shape(), pair.target.pixels.shape());
            if t.h != i.h * self.scale || t.w != i.w * self.scale {
                return Err(Error::Dataset(format!(
                    "pair {}: target {}x{} is not input {}x{} times scale {}",
                    pair.input.id, t.h, t.w, i.h, i.w, self.scale
                )));
            }
        }
        Ok(())
    }
}

/// Per-image salt for degradation noise: a pure function of the image id
/// and the side of the pair it lands on.
pub(crate) fn pair_salt(id: &str, role: u64) -> u64 {
    mix_seed(fnv1a(id.as_bytes()), role)
}

/// Degrade one record with a per-image noise salt derived from its id,
/// the same path dataset pairing uses.
pub fn degrade_record(spec: &DegradationSpec, rec: &ImageRecord) -> Result<ImageRecord> {
    let pixels = spec.apply_salted(&rec.pixels, pair_salt(&rec.id, 0))?;
    Ok(ImageRecord {
        id: rec.id.clone(),
        pixels,
        provenance: rec.provenance.clone(),
    })
}

/// inputs = spec(gt), targets = gt. The spec's net spatial scale must be
/// 1/scale.
pub fn make_pairs(
    gt: &[ImageRecord],
    spec: &DegradationSpec,
    scale: usize,
) -> Result<PairedDataset> {
    if spec.net_scale() != (1, scale as u32) {
        return Err(Error::Dataset(format!(
            "degradation net scale {:?} does not match 1/{scale}",
            spec.net_scale()
        )));
    }
    let pairs = gt
        .iter()
        .map(|rec| {
            Ok(Pair {
                input: degrade_record(spec, rec)?,
                target: rec.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = PairedDataset {
        pairs,
        scale,
        input_domain: spec.label(),
        target_domain: "GT".into(),
    };
    ds.validate()?;
    Ok(ds)
}

/// inputs = from_spec(gt), targets = to_spec(gt): a domain-mapping pair
/// set. The two sides draw independent noise realizations.
pub fn make_mapped_pairs(
    gt: &[ImageRecord],
    from_spec: &DegradationSpec,
    to_spec: &DegradationSpec,
) -> Result<PairedDataset> {
    let (fnum, fden) = from_spec.net_scale();
    let (tnum, tden) = to_spec.net_scale();
    // scale = (to) / (from) must be a supported integer factor
    let num = tnum * fden;
    let den = tden * fnum;
    if num % den != 0 {
        return Err(Error::Dataset(format!(
            "mapping scale {num}/{den} is not an integer"
        )));
    }
    let scale = (num / den) as usize;
    if ![1, 2, 4].contains(&scale) {
        return Err(Error::Dataset(format!(
            "mapping scale {scale} not in {{1, 2, 4}}"
        )));
    }
    let pairs = gt
        .iter()
        .map(|rec| {
            let input = from_spec.apply_salted(&rec.pixels, pair_salt(&rec.id, 0))?;
            let target = to_spec.apply_salted(&rec.pixels, pair_salt(&rec.id, 1))?;
            Ok(Pair {
                input: ImageRecord {
                    id: rec.id.clone(),
                    pixels: input,
                    provenance: rec.provenance.clone(),
                },
                target: ImageRecord {
                    id: rec.id.clone(),
                    pixels: target,
                    provenance: rec.provenance.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = PairedDataset {
        pairs,
        scale,
        input_domain: from_spec.label(),
        target_domain: to_spec.label(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Split by index before any degradation: the train/test sets are
/// disjoint by construction.
pub fn split_records(records: Vec<ImageRecord>, n_train: usize) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let mut train = records;
    let test = train.split_off(n_train.min(train.len()));
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::Step;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("remapsr-test-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn synth_corpus_is_deterministic_and_textured() {
        let a = synth_corpus(4, 64, 7).unwrap();
        let b = synth_corpus(4, 64, 7).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.id, rb.id);
            assert!(ra.pixels.bit_eq(&rb.pixels));
        }
        // per-channel std over several seeds
        for seed in [1u64, 2, 3, 9] {
            for rec in synth_corpus(2, 64, seed).unwrap() {
                let plane = 64 * 64;
                for c in 0..3 {
                    let ch = &rec.pixels.data()[c * plane..][..plane];
                    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    let var = ch
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>()
                        / plane as f64;
                    assert!(
                        var.sqrt() >= 0.05,
                        "seed {seed} {} ch {c}: std {}",
                        rec.id,
                        var.sqrt()
                    );
                }
            }
        }
    }

    #[test]
    fn synth_corpus_shape_and_validation() {
        let recs = synth_corpus(1, 64, 0).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].pixels.shape(), Shape::new(1, 3, 64, 64));
        assert!(recs[0].pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_corpus(0, 64, 0).is_err());
        assert!(synth_corpus(1, 48, 0).is_err());
        assert!(synth_corpus(1, 66, 0).is_err());
    }

    #[test]
    fn png_roundtrip_within_quantization_bound() {
        let dir = tmpdir("roundtrip");
        let img = synth_corpus(1, 64, 3).unwrap().remove(0).pixels;
        let path = dir.join("img.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let max_err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-7, "max err {max_err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn eight_bit_255_decodes_to_exactly_one() {
        let dir = tmpdir("white");
        let white = Tensor::filled(Shape::new(1, 3, 32, 32), 1.0);
        let path = dir.join("white.png");
        write_png(&path, &white).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn load_dir_orders_by_name_and_skips_corrupt() {
        let dir = tmpdir("loaddir");
        let img = synth_corpus(1, 64, 5).unwrap().remove(0).pixels;
        for name in ["c.png", "a.png", "b.png"] {
            write_png(&dir.join(name), &img).unwrap();
        }
        fs::write(dir.join("broken.png"), b"not a png at all").unwrap();
        let report = load_dir(&dir, None).unwrap();
        let ids: Vec<&str> = report.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(report.skipped.len(), 1);

        let manifest = dir.join("manifest.tsv");
        write_manifest(&manifest, &report.records, &report.skipped).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("a\tfile:"));
        assert!(text.contains("!skipped"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn load_dir_empty_is_error() {
        let dir = tmpdir("empty");
        assert!(load_dir(&dir, None).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identity_pairs_match_inputs() {
        let gt = synth_corpus(3, 64, 11).unwrap();
        let ds = make_pairs(&gt, &DegradationSpec::identity(), 1).unwrap();
        for pair in &ds.pairs {
            assert!(pair.input.pixels.bit_eq(&pair.target.pixels));
        }
        assert_eq!(ds.input_domain, "identity");
        assert_eq!(ds.target_domain, "GT");
    }

    #[test]
    fn down4_pairs_have_scale_four() {
        let gt = synth_corpus(2, 64, 12).unwrap();
        let ds = make_pairs(&gt, &DegradationSpec::bicubic_down(4), 4).unwrap();
        for pair in &ds.pairs {
            assert_eq!(pair.input.pixels.shape(), Shape::new(1, 3, 16, 16));
            assert_eq!(pair.target.pixels.shape(), Shape::new(1, 3, 64, 64));
        }
        // wrong scale is rejected
        assert!(make_pairs(&gt, &DegradationSpec::bicubic_down(4), 2).is_err());
    }

    #[test]
    fn mapping_pairs_degrade_both_sides() {
        let gt = synth_corpus(2, 64, 13).unwrap();
        // unknown down-4 to bicubic down-2: the Mapping x2 training set
        let unknown = DegradationSpec::new(vec![
            Step::Blur { size: 7, sigma: 1.2 },
            Step::BicubicDown(4),
            Step::Noise {
                target_psnr_db: 45.0,
                seed: 5,
            },
        ])
        .unwrap();
        let to = DegradationSpec::bicubic_down(2);
        let ds = make_mapped_pairs(&gt, &unknown, &to).unwrap();
        assert_eq!(ds.scale, 2);
        for pair in &ds.pairs {
            assert_eq!(pair.input.pixels.shape(), Shape::new(1, 3, 16, 16));
            assert_eq!(pair.target.pixels.shape(), Shape::new(1, 3, 32, 32));
            assert!(!pair.target.pixels.bit_eq(&pair.input.pixels));
        }
        assert_eq!(ds.target_domain, "down2");
    }

    #[test]
    fn pair_construction_is_deterministic() {
        let gt = synth_corpus(2, 64, 14).unwrap();
        let spec = DegradationSpec::blur_noise(9, 40.0, 3);
        let a = make_pairs(&gt, &spec, 1).unwrap();
        let b = make_pairs(&gt, &spec, 1).unwrap();
        for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
            assert!(pa.input.pixels.bit_eq(&pb.input.pixels));
        }
        // different images get different noise
        assert!(!a.pairs[0].input.pixels.bit_eq(&a.pairs[1].input.pixels));
    }

    #[test]
    fn split_is_disjoint_by_index() {
        let gt = synth_corpus(10, 64, 15).unwrap();
        let (train, test) = split_records(gt, 7);
        assert_eq!(train.len(), 7);
        assert_eq!(test.len(), 3);
        for tr in &train {
            assert!(test.iter().all(|te| te.id != tr.id));
        }
    }
}

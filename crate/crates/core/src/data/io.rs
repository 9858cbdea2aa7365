//! PPM/PGM files, the dataset manifest and prediction records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, GenSpec, Instance, Scene, Split};
use crate::config::{apply_kv, render_kv, KvSection};
use crate::error::{Result, WwtError};
use crate::geometry::{BBox, BinaryMask};
use crate::image::Image;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";

fn parse_err(what: &str, offset: usize, msg: impl Into<String>) -> WwtError {
    WwtError::Parse {
        what: what.to_string(),
        offset,
        msg: msg.into(),
    }
}

fn encode_pnm(magic: &str, w: usize, h: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

/// Header fields of a binary PNM file and the offset of its pixel data.
fn decode_pnm<'a>(
    bytes: &'a [u8],
    magic: &str,
    channels: usize,
    what: &str,
) -> Result<(usize, usize, &'a [u8])> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(what, pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != magic {
        return Err(parse_err(what, 0, format!("expected magic {magic}")));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| parse_err(what, fields[i].0, format!("bad number '{}'", fields[i].1)))
    };
    let (w, h, maxv) = (num(1)?, num(2)?, num(3)?);
    if maxv != 255 {
        return Err(parse_err(
            what,
            fields[3].0,
            "only 8-bit samples are supported",
        ));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(parse_err(
            what,
            bytes.len(),
            format!("truncated pixel data: need {need} bytes after offset {pos}"),
        ));
    }
    Ok((w, h, &bytes[pos..pos + need]))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(
        path,
        encode_pnm("P6", img.width, img.height, &img.to_rgb8()),
    )
    .map_err(|e| WwtError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| WwtError::io(path, e))?;
    let (w, h, body) = decode_pnm(&bytes, "P6", 3, &path.display().to_string())?;
    Image::from_rgb8(w, h, body)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pnm("P5", w, h, gray)).map_err(|e| WwtError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| WwtError::io(path, e))?;
    let (w, h, body) = decode_pnm(&bytes, "P5", 1, &path.display().to_string())?;
    Ok((w, h, body.to_vec()))
}

fn mask_bytes(m: &BinaryMask) -> Vec<u8> {
    m.data.iter().map(|b| if *b { 255 } else { 0 }).collect()
}

fn split_scenes(ds: &Dataset) -> [(Split, &Vec<Scene>); 2] {
    [(Split::Train, &ds.train), (Split::Val, &ds.val)]
}

/// Digest of the manifest body followed by the digest of every referenced
/// file in listing order.
fn manifest_digest(body: &[u8], files: Sha256) -> String {
    let mut h = Sha256::new();
    h.update(body);
    h.update(files.finalize());
    format!("{:x}", h.finalize())
}

/// Write images, masks and a checksummed manifest under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = format!("wwt-dataset {MANIFEST_VERSION}\n");
    for line in render_kv(&[&ds.spec as &dyn KvSection]).lines() {
        let _ = writeln!(manifest, "spec {line}");
    }
    let mut hasher = Sha256::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        hasher.update(&bytes);
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| WwtError::io(&p, e))
    };
    for (split, scenes) in split_scenes(ds) {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| WwtError::io(&sub, e))?;
        for (i, s) in scenes.iter().enumerate() {
            let img = format!("{}/{i:06}.ppm", split.name());
            let _ = writeln!(
                manifest,
                "scene {} {i} label {} attempt {} image {img}",
                split.name(),
                s.label,
                s.attempt
            );
            emit(
                &img,
                encode_pnm("P6", s.image.width, s.image.height, &s.image.to_rgb8()),
            )?;
            for (k, inst) in s.instances.iter().enumerate() {
                let m = format!("{}/{i:06}_{k}.pgm", split.name());
                let b = inst.bbox;
                let _ = writeln!(
                    manifest,
                    "instance {} {} {} {} {} mask {m}",
                    inst.class, b.x0, b.y0, b.x1, b.y1
                );
                emit(
                    &m,
                    encode_pnm(
                        "P5",
                        inst.mask.width,
                        inst.mask.height,
                        &mask_bytes(&inst.mask),
                    ),
                )?;
            }
        }
    }
    let sum = manifest_digest(manifest.as_bytes(), hasher);
    let _ = writeln!(manifest, "checksum sha256 {sum}");
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| WwtError::io(&p, e))
}

/// Read a dataset written by [`save_dataset`], verifying the checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| WwtError::io(&mpath, e))?;
    let what = mpath.display().to_string();
    let mut offset = 0;
    let mut spec_pairs = Vec::new();
    let mut scenes: Vec<(Split, Scene)> = Vec::new();
    let mut hasher = Sha256::new();
    let mut checksum = None;
    let mut body_end = 0;
    for (lineno, line) in text.lines().enumerate() {
        let here = offset;
        offset += line.len() + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| parse_err(&what, here, format!("line {}: {msg}", lineno + 1));
        if lineno == 0 {
            if f != ["wwt-dataset", &MANIFEST_VERSION.to_string()] {
                return Err(bad("unsupported manifest header"));
            }
            body_end = offset;
            continue;
        }
        match f.first().copied() {
            Some("spec") => {
                let (k, v) = line[5..]
                    .split_once('=')
                    .ok_or_else(|| bad("expected spec key = value"))?;
                spec_pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            Some("scene") => {
                if f.len() != 9 || f[3] != "label" || f[5] != "attempt" || f[7] != "image" {
                    return Err(bad("malformed scene record"));
                }
                let split = match f[1] {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    _ => return Err(bad("unknown split")),
                };
                let path = dir.join(f[8]);
                let bytes = fs::read(&path).map_err(|e| WwtError::io(&path, e))?;
                hasher.update(&bytes);
                let (w, h, body) = decode_pnm(&bytes, "P6", 3, &path.display().to_string())?;
                scenes.push((
                    split,
                    Scene {
                        image: Image::from_rgb8(w, h, body)?,
                        label: f[4].parse().map_err(|_| bad("bad label"))?,
                        instances: Vec::new(),
                        background: 0,
                        attempt: f[6].parse().map_err(|_| bad("bad attempt"))?,
                    },
                ));
            }
            Some("instance") => {
                if f.len() != 8 || f[6] != "mask" {
                    return Err(bad("malformed instance record"));
                }
                let nums: Vec<f64> = f[2..6]
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad box"))?;
                let path = dir.join(f[7]);
                let bytes = fs::read(&path).map_err(|e| WwtError::io(&path, e))?;
                hasher.update(&bytes);
                let (w, h, body) = decode_pnm(&bytes, "P5", 1, &path.display().to_string())?;
                let mask = BinaryMask::new(w, h, body.iter().map(|b| *b >= 128).collect())?;
                let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3])?;
                if mask.bbox() != Some(bbox) {
                    return Err(bad("box is not the tight bound of its mask"));
                }
                let scene = &mut scenes
                    .last_mut()
                    .ok_or_else(|| bad("instance before any scene"))?
                    .1;
                scene.instances.push(Instance {
                    class: f[1].parse().map_err(|_| bad("bad class"))?,
                    mask,
                    bbox,
                });
            }
            Some("checksum") => {
                if f.len() != 3 || f[1] != "sha256" {
                    return Err(bad("malformed checksum"));
                }
                checksum = Some((f[2].to_string(), here));
                break;
            }
            _ => return Err(bad("unknown record")),
        }
        body_end = offset;
    }
    let (want, at) = checksum.ok_or_else(|| parse_err(&what, text.len(), "missing checksum"))?;
    let got = manifest_digest(&text.as_bytes()[..body_end], hasher);
    if got != want {
        return Err(parse_err(
            &what,
            at,
            format!("checksum mismatch: manifest says {want}, contents give {got}"),
        ));
    }
    let mut spec = GenSpec::default();
    apply_kv(&spec_pairs, &mut [&mut spec])?;
    let mut ds = Dataset {
        spec: spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (split, mut s) in scenes {
        s.background = spec.num_classes;
        match split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
        }
    }
    Ok(ds)
}

/// One predicted region: `image x0 y0 x1 y1 score class [mask]`, where
/// class is -1 for class-agnostic predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image: String,
    pub bbox: BBox,
    pub score: f64,
    pub class: i64,
    pub mask: Option<String>,
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        let b = r.bbox;
        let _ = write!(
            s,
            "{} {} {} {} {} {} {}",
            r.image, b.x0, b.y0, b.x1, b.y1, r.score, r.class
        );
        if let Some(m) = &r.mask {
            let _ = write!(s, " {m}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| WwtError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| WwtError::io(path, e))?;
    let what = path.display().to_string();
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let here = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 && f.len() != 8 {
            return Err(parse_err(&what, here, "expected 7 or 8 fields"));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| parse_err(&what, here, format!("bad number '{}'", f[i])))
        };
        out.push(PredictionRecord {
            image: f[0].to_string(),
            bbox: BBox::new(num(1)?, num(2)?, num(3)?, num(4)?)?,
            score: num(5)?,
            class: f[6]
                .parse()
                .map_err(|_| parse_err(&what, here, "bad class"))?,
            mask: f.get(7).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn tiny() -> Dataset {
        generate(&GenSpec {
            seed: 3,
            train_size: 6,
            val_size: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn checksum_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let want = text
            .lines()
            .last()
            .unwrap()
            .split_whitespace()
            .last()
            .unwrap()
            .to_string();
        // independent recomputation over manifest body and file bytes
        let body_end = text.rfind("checksum").unwrap();
        let mut h = Sha256::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first() {
                Some(&"scene") => h.update(fs::read(dir.path().join(f[8])).unwrap()),
                Some(&"instance") => h.update(fs::read(dir.path().join(f[7])).unwrap()),
                _ => {}
            }
        }
        let mut outer = Sha256::new();
        outer.update(&text.as_bytes()[..body_end]);
        outer.update(h.finalize());
        assert_eq!(format!("{:x}", outer.finalize()), want);
        let p = dir.path().join("train/000001.ppm");
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(WwtError::Parse { .. })
        ));
    }

    #[test]
    fn truncated_ppm_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = Image::filled(4, 4, [0.5, 0.2, 0.1]);
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap().to_rgb8(), img.to_rgb8());
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match read_ppm(&p) {
            Err(WwtError::Parse { offset, .. }) => assert_eq!(offset, bytes.len() - 5),
            other => panic!("{other:?}"),
        }
        fs::write(&p, b"P5\n4 4\n255\n").unwrap();
        assert!(matches!(
            read_ppm(&p),
            Err(WwtError::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        let recs = vec![
            PredictionRecord {
                image: "val/000000".into(),
                bbox: BBox::new(8.0, 16.0, 24.0, 40.0).unwrap(),
                score: 0.25,
                class: -1,
                mask: Some("m0.pgm".into()),
            },
            PredictionRecord {
                image: "val/000001".into(),
                bbox: BBox::new(0.0, 0.0, 64.0, 64.0).unwrap(),
                score: 1.0,
                class: 3,
                mask: None,
            },
        ];
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
    }
}

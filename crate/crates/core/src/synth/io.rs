//! On-disk formats: Middlebury `.flo` flow, binary PPM/PGM images, and the
//! tab-separated dataset manifest.

use super::{render_pair, sample_scene, DatasetConfig, LabelMap};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor4D;
use crate::util::rng_from_seed;
use rand::Rng as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Writes a flow field as `.flo`: magic "PIEH", little-endian i32 width and
/// height, then `h * w` interleaved `(dx, dy)` f32 pairs.
pub fn save_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(FLO_MAGIC)?;
    f.write_all(&(flow.w() as i32).to_le_bytes())?;
    f.write_all(&(flow.h() as i32).to_le_bytes())?;
    for v in flow.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    let need = |offset: u64, n: usize| -> Result<()> {
        if bytes.len() < offset as usize + n {
            Err(Error::format(
                path,
                bytes.len() as u64,
                format!("truncated: expected {} more bytes", offset as usize + n - bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4)?;
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::format(path, 0, "bad magic (expected \"PIEH\")"));
    }
    need(4, 8)?;
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 {
        return Err(Error::format(path, 4, format!("nonpositive width {w}")));
    }
    if h <= 0 {
        return Err(Error::format(path, 8, format!("nonpositive height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let payload = h * w * 2 * 4;
    need(12, payload)?;
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h * w * 2 {
        let o = 12 + i * 4;
        data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
    }
    FlowField::from_vec(h, w, data)
}

/// Writes a `(1, 3, h, w)` image in [0, 1] as binary 8-bit PPM (P6).
pub fn save_ppm(image: &Tensor4D, path: &Path) -> Result<()> {
    let (n, c, h, w) = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!(
            "save_ppm expects (1, 3, h, w), got ({n}, {c}, {h}, {w})"
        )));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for ci in 0..3 {
                row.push(quantize(image.at(0, ci, y, x)));
            }
        }
        f.write_all(&row)?;
    }
    f.flush()?;
    Ok(())
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_ppm(path: &Path) -> Result<Tensor4D> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, data_off) = parse_netpbm_header(&bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(Error::format(path, 2, format!("unsupported maxval {maxval}")));
    }
    let need = h * w * 3;
    if bytes.len() < data_off + need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: need {need} bytes"),
        ));
    }
    let mut img = Tensor4D::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                let b = bytes[data_off + (y * w + x) * 3 + ci];
                img.set(0, ci, y, x, b as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Writes a label map as binary 8-bit PGM (P5); pixel value = class id.
pub fn save_pgm(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", labels.w, labels.h)?;
    f.write_all(&labels.data)?;
    f.flush()?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, data_off) = parse_netpbm_header(&bytes, b"P5", path)?;
    if maxval != 255 {
        return Err(Error::format(path, 2, format!("unsupported maxval {maxval}")));
    }
    if bytes.len() < data_off + h * w {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: need {} bytes", h * w),
        ));
    }
    Ok(LabelMap {
        h,
        w,
        data: bytes[data_off..data_off + h * w].to_vec(),
    })
}

/// Parses `magic\n<w> <h>\n<maxval>\n`, tolerating extra whitespace and `#`
/// comment lines. Returns `(w, h, maxval, payload offset)`.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic (expected {})", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, pos as u64, "malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, start as u64, "malformed header field"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, pos as u64, "missing header terminator"));
    }
    pos += 1;
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::format(path, 2, "nonpositive dimensions"));
    }
    Ok((fields[0], fields[1], fields[2], pos))
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Paths of one dataset sample, relative to the dataset root.
#[derive(Clone, Debug)]
pub struct SampleEntry {
    pub frame_t: PathBuf,
    pub frame_t_plus: PathBuf,
    pub flow_fwd: PathBuf,
    pub flow_bwd: PathBuf,
    pub labels: PathBuf,
}

/// A dataset directory: manifest plus per-sample files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<SampleEntry>,
}

/// One sample loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub frame_t: Tensor4D,
    pub frame_t_plus: Tensor4D,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub labels_t: LabelMap,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest).map_err(|e| {
            Error::Data(format!("cannot read manifest {}: {e}", manifest.display()))
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Data(format!(
                    "manifest line {} has {} columns, expected 5",
                    lineno + 1,
                    cols.len()
                )));
            }
            entries.push(SampleEntry {
                frame_t: cols[0].into(),
                frame_t_plus: cols[1].into(),
                flow_fwd: cols[2].into(),
                flow_bwd: cols[3].into(),
                labels: cols[4].into(),
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} lists no samples",
                manifest.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<LoadedSample> {
        let e = &self.entries[index];
        Ok(LoadedSample {
            frame_t: load_ppm(&self.root.join(&e.frame_t))?,
            frame_t_plus: load_ppm(&self.root.join(&e.frame_t_plus))?,
            flow_fwd: load_flo(&self.root.join(&e.flow_fwd))?,
            flow_bwd: load_flo(&self.root.join(&e.flow_bwd))?,
            labels_t: load_pgm(&self.root.join(&e.labels))?,
        })
    }
}

/// Renders `cfg.scenes` scenes and writes the dataset under `out`:
/// one directory per sample, one manifest line per sample.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, out: &Path) -> Result<Dataset> {
    fs::create_dir_all(out)?;
    let mut rng = rng_from_seed(seed);
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let scene = sample_scene(&mut rng, cfg);
        let dt = if cfg.dt_range.0 == cfg.dt_range.1 {
            cfg.dt_range.0
        } else {
            rng.gen_range(cfg.dt_range.0..=cfg.dt_range.1)
        };
        let pair = render_pair(&scene, dt)?;
        let dir = format!("sample_{i:05}");
        fs::create_dir_all(out.join(&dir))?;
        let entry = SampleEntry {
            frame_t: PathBuf::from(&dir).join("frame_t.ppm"),
            frame_t_plus: PathBuf::from(&dir).join("frame_tp.ppm"),
            flow_fwd: PathBuf::from(&dir).join("flow_fwd.flo"),
            flow_bwd: PathBuf::from(&dir).join("flow_bwd.flo"),
            labels: PathBuf::from(&dir).join("labels.pgm"),
        };
        save_ppm(&pair.frame_t, &out.join(&entry.frame_t))?;
        save_ppm(&pair.frame_t_plus, &out.join(&entry.frame_t_plus))?;
        save_flo(&pair.flow_fwd, &out.join(&entry.flow_fwd))?;
        save_flo(&pair.flow_bwd, &out.join(&entry.flow_bwd))?;
        save_pgm(&pair.labels_t, &out.join(&entry.labels))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            entry.frame_t.display(),
            entry.frame_t_plus.display(),
            entry.flow_fwd.display(),
            entry.flow_bwd.display(),
            entry.labels.display()
        ));
        entries.push(entry);
    }
    fs::write(out.join(MANIFEST_NAME), manifest)?;
    Ok(Dataset {
        root: out.to_path_buf(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(3);
        let mut flow = FlowField::zeros(17, 23);
        for y in 0..17 {
            for x in 0..23 {
                flow.set(y, x, rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0));
            }
        }
        let path = dir.path().join("f.flo");
        save_flo(&flow, &path).unwrap();
        let back = load_flo(&path).unwrap();
        assert_eq!(back, flow);
    }

    #[test]
    fn flo_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        let err = load_flo(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let path2 = dir.path().join("trunc.flo");
        std::fs::write(&path2, b"PIEH\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00").unwrap();
        assert!(load_flo(&path2).is_err());
        let path3 = dir.path().join("dims.flo");
        std::fs::write(&path3, b"PIEH\xff\xff\xff\xff\x01\x00\x00\x00").unwrap();
        let err = load_flo(&path3).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn flo_file_size_formula() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowField::zeros(2, 2);
        let path = dir.path().join("z.flo");
        save_flo(&flow, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 4 + 4 + 32);
    }

    #[test]
    fn ppm_round_trip_black_white_and_bound() {
        let dir = tempfile::tempdir().unwrap();
        let black = Tensor4D::zeros(1, 3, 4, 5);
        let p = dir.path().join("b.ppm");
        save_ppm(&black, &p).unwrap();
        assert_eq!(load_ppm(&p).unwrap(), black);

        let white = Tensor4D::full(1, 3, 2, 2, 1.0);
        save_ppm(&white, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.ends_with(&[255; 12]));
        assert_eq!(load_ppm(&p).unwrap(), white);

        let mut rng = rng_from_seed(9);
        let img = Tensor4D::rand_uniform(&mut rng, 1, 3, 8, 8, 0.0, 1.0);
        save_ppm(&img, &p).unwrap();
        let back = load_ppm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{a} vs {b}");
        }
        // A second round trip after quantization is exact.
        save_ppm(&back, &p).unwrap();
        assert_eq!(load_ppm(&p).unwrap(), back);
    }

    #[test]
    fn ppm_malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P6\nxx 3\n255\n").unwrap();
        assert!(load_ppm(&p).is_err());
        std::fs::write(&p, b"P5\n2 2\n255\n....").unwrap();
        assert!(load_ppm(&p).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap {
            h: 3,
            w: 4,
            data: vec![0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4],
        };
        let p = dir.path().join("l.pgm");
        save_pgm(&labels, &p).unwrap();
        assert_eq!(load_pgm(&p).unwrap(), labels);
    }

    #[test]
    fn dataset_generate_open_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            scenes: 3,
            canvas_h: 32,
            canvas_w: 48,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg, 7, dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let reopened = Dataset::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 3);
        let s = reopened.load(1).unwrap();
        assert_eq!(s.frame_t.shape(), (1, 3, 32, 48));
        assert_eq!(s.flow_fwd.h(), 32);
        assert_eq!(s.labels_t.h, 32);
        // Flow round trip through disk is bit-exact, so warping still holds.
        assert!(s.flow_fwd.is_finite());
    }

    #[test]
    fn dataset_generation_is_byte_identical_across_runs() {
        let cfg = DatasetConfig {
            scenes: 2,
            canvas_h: 24,
            canvas_w: 32,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 42, d1.path()).unwrap();
        generate_dataset(&cfg, 42, d2.path()).unwrap();
        let walk = |root: &Path| {
            let mut files: Vec<PathBuf> = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.push(p);
                    }
                }
            }
            files.sort();
            files
        };
        let f1 = walk(d1.path());
        let f2 = walk(d2.path());
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(
                a.strip_prefix(d1.path()).unwrap(),
                b.strip_prefix(d2.path()).unwrap()
            );
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{a:?}");
        }
    }
}

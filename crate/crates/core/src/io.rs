//! On-disk formats: PNG rasters, raw flow fields, parameter checkpoints,
//! and the line-oriented dataset manifest.
//!
//! Images are 8-bit RGB PNG; pixel values are the u8 grid divided by 255,
//! so a quantized image survives a save and load bit-exactly. Label maps
//! are 8-bit grayscale PNG storing raw label ids. Flow files and
//! checkpoints are little-endian binary with fixed magics; flows carry
//! f32 offsets, checkpoints carry f64 parameters, so quantized flows and
//! any parameter state round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::types::{Category, FlowField, Image, LabelMap, WarpSample, WearingStyle};
use crate::{Error, Result};

pub const FLOW_MAGIC: &[u8; 8] = b"LFGPFLW1";
pub const CKPT_MAGIC: &[u8; 8] = b"LFGPCKP1";

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path_str(path)))
        }
        Err(e) => Err(Error::io(path_str(path), e)),
    }
}

fn create_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path_str(parent), e))?;
        }
    }
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?,
    ))
}

pub fn save_image_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dims();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (img.data[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path_str(parent), e))?;
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path_str(path), format!("png encode: {e}")))
}

pub fn load_image_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path_str(path)));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path_str(path), format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_fn(h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    }))
}

pub fn save_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([labels.data[[y, x]]]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path_str(parent), e))?;
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path_str(path), format!("png encode: {e}")))
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    if !path.exists() {
        return Err(Error::MissingFile(path_str(path)));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path_str(path), format!("png decode: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = LabelMap::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0]);
    let mut violations = Vec::new();
    out.violations("labels", &mut violations);
    if !violations.is_empty() {
        return Err(Error::format(path_str(path), violations.join("; ")));
    }
    Ok(out)
}

/// Flow file: magic, u32 height, u32 width, then row-major (dx, dy) f32
/// pairs, all little-endian.
pub fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dims();
    let mut out = create_writer(path)?;
    let werr = |e| Error::io(path_str(path), e);
    out.write_all(FLOW_MAGIC).map_err(werr)?;
    out.write_all(&(h as u32).to_le_bytes()).map_err(werr)?;
    out.write_all(&(w as u32).to_le_bytes()).map_err(werr)?;
    for y in 0..h {
        for x in 0..w {
            out.write_all(&(flow.data[[0, y, x]] as f32).to_le_bytes()).map_err(werr)?;
            out.write_all(&(flow.data[[1, y, x]] as f32).to_le_bytes()).map_err(werr)?;
        }
    }
    out.flush().map_err(werr)
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    let mut rd = open_reader(path)?;
    let rerr = |e| Error::io(path_str(path), e);
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic).map_err(rerr)?;
    if &magic != FLOW_MAGIC {
        return Err(Error::format(path_str(path), "bad flow magic"));
    }
    let mut b4 = [0u8; 4];
    rd.read_exact(&mut b4).map_err(rerr)?;
    let h = u32::from_le_bytes(b4) as usize;
    rd.read_exact(&mut b4).map_err(rerr)?;
    let w = u32::from_le_bytes(b4) as usize;
    if h == 0 || w == 0 || h > 1 << 20 || w > 1 << 20 {
        return Err(Error::format(path_str(path), format!("implausible dims {h}x{w}")));
    }
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..2 {
                rd.read_exact(&mut b4).map_err(rerr)?;
                flow.data[[c, y, x]] = f32::from_le_bytes(b4) as f64;
            }
        }
    }
    let mut rest = [0u8; 1];
    match rd.read(&mut rest) {
        Ok(0) => Ok(flow),
        Ok(_) => Err(Error::format(path_str(path), "trailing bytes after flow data")),
        Err(e) => Err(rerr(e)),
    }
}

/// Checkpoint: magic, u32 entry count, a name and shape table, then every
/// tensor's f64 payload in table order, all little-endian.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut out = create_writer(path)?;
    let werr = |e| Error::io(path_str(path), e);
    out.write_all(CKPT_MAGIC).map_err(werr)?;
    out.write_all(&(store.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, value) in store.iter() {
        let nb = name.as_bytes();
        out.write_all(&(nb.len() as u16).to_le_bytes()).map_err(werr)?;
        out.write_all(nb).map_err(werr)?;
        out.write_all(&[value.ndim() as u8]).map_err(werr)?;
        for &d in value.shape() {
            out.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
        }
    }
    for (_, value) in store.iter() {
        for v in value.iter() {
            out.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    out.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut rd = open_reader(path)?;
    let rerr = |e| Error::io(path_str(path), e);
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic).map_err(rerr)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path_str(path), "bad checkpoint magic"));
    }
    let mut b4 = [0u8; 4];
    rd.read_exact(&mut b4).map_err(rerr)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        rd.read_exact(&mut b2).map_err(rerr)?;
        let nlen = u16::from_le_bytes(b2) as usize;
        let mut nb = vec![0u8; nlen];
        rd.read_exact(&mut nb).map_err(rerr)?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::format(path_str(path), "non-utf8 parameter name"))?;
        let mut b1 = [0u8; 1];
        rd.read_exact(&mut b1).map_err(rerr)?;
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            rd.read_exact(&mut b4).map_err(rerr)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::format(path_str(path), "implausible tensor size"));
        }
        table.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    let mut b8 = [0u8; 8];
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            rd.read_exact(&mut b8).map_err(rerr)?;
            data.push(f64::from_le_bytes(b8));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::format(path_str(path), e.to_string()))?;
        out.push((name, arr));
    }
    match rd.read(&mut b4[..1]) {
        Ok(0) => Ok(out),
        Ok(_) => Err(Error::format(path_str(path), "trailing bytes after checkpoint data")),
        Err(e) => Err(rerr(e)),
    }
}

/// Load a checkpoint into an already-built store, by name.
pub fn apply_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = load_checkpoint(path)?;
    if entries.len() != store.len() {
        return Err(Error::format(
            path_str(path),
            format!("checkpoint has {} tensors, model has {}", entries.len(), store.len()),
        ));
    }
    for (name, value) in entries {
        store.set(&name, value)?;
    }
    Ok(())
}

/// Digest of the full parameter state, for freeze checks.
pub fn param_hash(store: &ParamStore) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in store.iter() {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub category: Category,
    pub style: WearingStyle,
    pub dir: String,
}

/// A synthesized dataset on disk: a manifest plus one directory per
/// sample. Samples are loaded lazily, one at a time.
pub struct Dataset {
    pub root: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "tryon-manifest v1";

pub fn write_manifest(root: &Path, seed: u64, entries: &[ManifestEntry]) -> Result<()> {
    let path = root.join(MANIFEST_NAME);
    let mut out = create_writer(&path)?;
    let werr = |e| Error::io(path_str(&path), e);
    writeln!(out, "{MANIFEST_HEADER}").map_err(werr)?;
    writeln!(out, "seed {seed}").map_err(werr)?;
    writeln!(out, "count {}", entries.len()).map_err(werr)?;
    for e in entries {
        writeln!(out, "sample {} {} {} {}", e.id, e.category.as_str(), e.style.as_str(), e.dir)
            .map_err(werr)?;
    }
    out.flush().map_err(werr)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let rd = open_reader(&path)?;
        let ps = path_str(&path);
        let mut lines = rd.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::format(&ps, "truncated manifest"))?
                .map_err(|e| Error::io(&ps, e))
        };
        if next()? != MANIFEST_HEADER {
            return Err(Error::format(&ps, "bad manifest header"));
        }
        let seed_line = next()?;
        let seed = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::format(&ps, format!("bad seed line: {seed_line}")))?;
        let count_line = next()?;
        let count = count_line
            .strip_prefix("count ")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(&ps, format!("bad count line: {count_line}")))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let mut it = line.split(' ');
            let parse = (|| -> Option<ManifestEntry> {
                if it.next()? != "sample" {
                    return None;
                }
                let id = it.next()?.parse().ok()?;
                let category = Category::parse(it.next()?).ok()?;
                let style = WearingStyle::parse(it.next()?).ok()?;
                let dir = it.next()?.to_string();
                if it.next().is_some() {
                    return None;
                }
                Some(ManifestEntry { id, category, style, dir })
            })();
            entries.push(parse.ok_or_else(|| Error::format(&ps, format!("bad sample line: {line}")))?);
        }
        Ok(Dataset { root: root.to_path_buf(), seed, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_sample(&self, idx: usize) -> Result<WarpSample> {
        let entry = &self.entries[idx];
        let dir = self.root.join(&entry.dir);
        load_sample_dir(&dir, entry.category, entry.style)
    }
}

pub fn save_sample_dir(dir: &Path, sample: &WarpSample) -> Result<()> {
    save_image_png(&dir.join("person.png"), &sample.person)?;
    save_image_png(&dir.join("garment.png"), &sample.garment)?;
    save_image_png(&dir.join("pose.png"), &sample.pose_map)?;
    save_image_png(&dir.join("densepose.png"), &sample.densepose_map)?;
    save_label_png(&dir.join("human_parsing.png"), &sample.human_parsing)?;
    save_label_png(&dir.join("garment_parsing.png"), &sample.garment_parsing)?;
    save_label_png(&dir.join("preserved_mask.png"), &sample.preserved_mask)?;
    save_label_png(&dir.join("gt_warped_parsing.png"), &sample.gt_warped_parsing)?;
    if let Some(flows) = &sample.gt_flows {
        for (flow, name) in flows.iter().zip(["left", "middle", "right"]) {
            save_flow(&dir.join(format!("flow_{name}.flow")), flow)?;
        }
    }
    Ok(())
}

pub fn load_sample_dir(dir: &Path, category: Category, style: WearingStyle) -> Result<WarpSample> {
    let flow_path = dir.join("flow_left.flow");
    let gt_flows = if flow_path.exists() {
        let mut flows = Vec::with_capacity(3);
        for name in ["left", "middle", "right"] {
            flows.push(load_flow(&dir.join(format!("flow_{name}.flow")))?);
        }
        Some(<[FlowField; 3]>::try_from(flows).ok().expect("three flows"))
    } else {
        None
    };
    Ok(WarpSample {
        person: load_image_png(&dir.join("person.png"))?,
        garment: load_image_png(&dir.join("garment.png"))?,
        pose_map: load_image_png(&dir.join("pose.png"))?,
        densepose_map: load_image_png(&dir.join("densepose.png"))?,
        human_parsing: load_label_png(&dir.join("human_parsing.png"))?,
        garment_parsing: load_label_png(&dir.join("garment_parsing.png"))?,
        preserved_mask: load_label_png(&dir.join("preserved_mask.png"))?,
        gt_warped_parsing: load_label_png(&dir.join("gt_warped_parsing.png"))?,
        category,
        wearing_style_gt: style,
        gt_flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn quantized_image_round_trips_exactly() {
        let dir = tmp();
        let img = Image::from_fn(9, 13, |c, y, x| {
            ((c * 89 + y * 13 + x * 7) % 256) as f64 / 255.0
        });
        let path = dir.path().join("img.png");
        save_image_png(&path, &img).unwrap();
        let back = load_image_png(&path).unwrap();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn unquantized_image_snaps_to_grid() {
        let dir = tmp();
        let img = Image::from_fn(8, 8, |c, y, x| ((c + y + x) as f64 * 0.0317) % 1.0);
        let path = dir.path().join("img.png");
        save_image_png(&path, &img).unwrap();
        let back = load_image_png(&path).unwrap();
        let mut snapped = img.clone();
        snapped.quantize();
        assert_eq!(back.data, snapped.data);
    }

    #[test]
    fn labels_round_trip_and_reject_bad_ids() {
        let dir = tmp();
        let labels = LabelMap::from_fn(11, 7, |y, x| ((y * 7 + x) % 10) as u8);
        let path = dir.path().join("labels.png");
        save_label_png(&path, &labels).unwrap();
        assert_eq!(load_label_png(&path).unwrap().data, labels.data);

        let mut bad = labels.clone();
        bad.data[[0, 0]] = 200;
        let bad_path = dir.path().join("bad.png");
        save_label_png(&bad_path, &bad).unwrap();
        assert!(matches!(load_label_png(&bad_path), Err(Error::Format { .. })));
    }

    #[test]
    fn quantized_flows_round_trip_bit_exact() {
        let dir = tmp();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..5 {
            let h = rng.random_range(1..40);
            let w = rng.random_range(1..40);
            let mut flow = FlowField::from_fn(h, w, |_, _| {
                (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0))
            });
            flow.quantize();
            let path = dir.path().join(format!("f{i}.flow"));
            save_flow(&path, &flow).unwrap();
            let back = load_flow(&path).unwrap();
            assert!(flow.data.iter().zip(back.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn flow_loader_rejects_corruption() {
        let dir = tmp();
        let path = dir.path().join("f.flow");
        save_flow(&path, &FlowField::zeros(4, 4)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_flow(&path), Err(Error::Format { .. })));

        let good = {
            save_flow(&path, &FlowField::zeros(4, 4)).unwrap();
            fs::read(&path).unwrap()
        };
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_flow(&path).is_err());
        let mut long = good.clone();
        long.push(0);
        fs::write(&path, &long).unwrap();
        assert!(matches!(load_flow(&path), Err(Error::Format { .. })));

        assert!(matches!(
            load_flow(&dir.path().join("absent.flow")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn checkpoints_round_trip_bit_exact() {
        let dir = tmp();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store.add("a.w", ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |_| rng.random_range(-2.0..2.0)));
        store.add("a.b", ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.random_range(-1.0..1.0)));
        store.add("z.scale", ArrayD::from_elem(IxDyn(&[1]), f64::MIN_POSITIVE));
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &store).unwrap();
        let entries = load_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 3);
        for ((name, value), slot) in entries.iter().zip(0..) {
            assert_eq!(name, store.name(slot));
            assert_eq!(value.shape(), store.value(slot).shape());
            assert!(value
                .iter()
                .zip(store.value(slot).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let mut store2 = ParamStore::new();
        store2.add("a.w", ArrayD::zeros(IxDyn(&[3, 2, 2, 2])));
        store2.add("a.b", ArrayD::zeros(IxDyn(&[3])));
        store2.add("z.scale", ArrayD::zeros(IxDyn(&[1])));
        apply_checkpoint(&mut store2, &path).unwrap();
        assert_eq!(param_hash(&store2), param_hash(&store));

        let mut small = ParamStore::new();
        small.add("a.w", ArrayD::zeros(IxDyn(&[3, 2, 2, 2])));
        assert!(apply_checkpoint(&mut small, &path).is_err());
    }

    #[test]
    fn param_hash_tracks_values() {
        let mut store = ParamStore::new();
        store.add("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let h0 = param_hash(&store);
        store.value_mut(0)[[0, 0]] = 1e-17;
        assert_ne!(param_hash(&store), h0);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tmp();
        let entries = vec![
            ManifestEntry {
                id: 0,
                category: Category::Upper,
                style: WearingStyle::TuckIn,
                dir: "samples/00000".into(),
            },
            ManifestEntry {
                id: 1,
                category: Category::Lower,
                style: WearingStyle::TuckOut,
                dir: "samples/00001".into(),
            },
        ];
        write_manifest(dir.path(), 42, &entries).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.seed, 42);
        assert_eq!(ds.entries, entries);

        write_manifest(dir.path(), 7, &[]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.seed, 7);

        assert!(matches!(
            Dataset::open(&dir.path().join("nope")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn sample_dir_round_trips() {
        let dir = tmp();
        let mut parsing = LabelMap::zeros(16, 16);
        for y in 4..12 {
            for x in 4..12 {
                parsing.data[[y, x]] = 3;
            }
        }
        let mut flow = FlowField::from_fn(16, 16, |y, x| (x as f64 * 0.25, y as f64 * -0.5));
        flow.quantize();
        let sample = WarpSample {
            person: Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 256) as f64 / 255.0),
            garment: Image::from_fn(16, 16, |c, y, x| ((c * y + x) % 256) as f64 / 255.0),
            pose_map: Image::zeros(16, 16),
            densepose_map: Image::zeros(16, 16),
            human_parsing: parsing.clone(),
            garment_parsing: parsing.clone(),
            preserved_mask: LabelMap::from_fn(16, 16, |y, _| u8::from(y > 12)),
            gt_warped_parsing: parsing.clone(),
            category: Category::Upper,
            wearing_style_gt: WearingStyle::TuckIn,
            gt_flows: Some([flow.clone(), flow.clone(), flow.clone()]),
        };
        let sdir = dir.path().join("s0");
        save_sample_dir(&sdir, &sample).unwrap();
        let back = load_sample_dir(&sdir, Category::Upper, WearingStyle::TuckIn).unwrap();
        assert_eq!(back.person.data, sample.person.data);
        assert_eq!(back.garment_parsing.data, sample.garment_parsing.data);
        assert_eq!(back.preserved_mask.data, sample.preserved_mask.data);
        assert_eq!(back.gt_flows.as_ref().unwrap()[1].data, flow.data);

        fs::remove_file(sdir.join("person.png")).unwrap();
        assert!(matches!(
            load_sample_dir(&sdir, Category::Upper, WearingStyle::TuckIn),
            Err(Error::MissingFile(_))
        ));
    }
}

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// CIFAR-10 (`1 + 3072` byte records) or CIFAR-100 (`2 + 3072`, fine label
/// kept) binary batch.
pub fn load_cifar_binary(path: &Path, n_classes: usize) -> Result<Dataset> {
    let label_bytes = match n_classes {
        10 => 1,
        100 => 2,
        other => return Err(Error::arg(format!("CIFAR has 10 or 100 classes, not {other}"))),
    };
    let bytes = read(path)?;
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        return Err(format_err(
            path,
            format!("truncated: {} bytes is not a whole number of {record}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= n_classes {
            return Err(format_err(path, format!("record {i} has label {label} >= {n_classes}")));
        }
        labels.push(label);
        images.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    let name = if n_classes == 10 { "cifar10" } else { "cifar100" };
    Dataset::new(name, (3, 32, 32), n_classes, images, labels)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// IDX image file (magic `0x00000803`, dims `n×rows×cols`) with its label
/// file (magic `0x00000801`). Labels define the class count (max label + 1,
/// at least 10).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    if img.len() < 16 || be_u32(&img, 0) != 0x0000_0803 {
        return Err(format_err(images_path, "bad IDX image magic (expected 0x00000803)"));
    }
    if lab.len() < 8 || be_u32(&lab, 0) != 0x0000_0801 {
        return Err(format_err(labels_path, "bad IDX label magic (expected 0x00000801)"));
    }
    let (n, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let n_labels = be_u32(&lab, 4) as usize;
    if n != n_labels {
        return Err(format_err(labels_path, format!("{n_labels} labels for {n} images")));
    }
    if img.len() != 16 + n * rows * cols {
        return Err(format_err(
            images_path,
            format!("expected {} payload bytes, found {}", n * rows * cols, img.len() - 16),
        ));
    }
    if lab.len() != 8 + n {
        return Err(format_err(labels_path, format!("expected {n} label bytes, found {}", lab.len() - 8)));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let images = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new("idx", (1, rows, cols), n_classes, images, labels)
}

const PRIMG_MAGIC: &[u8] = b"PRIMG1\n";

/// Writes a PRIMG1 archive: magic, a `u32` little-endian header length, the
/// header text `n c h w n_classes\n`, `n` little-endian `u16` labels, then
/// `n·c·h·w` pixel bytes (`round(255·x)`).
pub fn write_raw_archive(ds: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = ds.shape();
    let header = format!("{} {c} {h} {w} {}\n", ds.len(), ds.meta.n_classes);
    let mut out = Vec::with_capacity(PRIMG_MAGIC.len() + 4 + header.len() + ds.len() * (2 + c * h * w));
    out.extend_from_slice(PRIMG_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &l in ds.labels() {
        let l = u16::try_from(l).map_err(|_| Error::arg(format!("label {l} does not fit in u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend(ds.all_pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_raw_archive(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    if !bytes.starts_with(PRIMG_MAGIC) {
        return Err(format_err(path, "missing PRIMG1 magic"));
    }
    let mut at = PRIMG_MAGIC.len();
    if bytes.len() < at + 4 {
        return Err(format_err(path, "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    at += 4;
    let header = bytes
        .get(at..at + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| format_err(path, "truncated or non-text header"))?;
    at += hlen;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| format_err(path, format!("bad header `{}`", header.trim())))?;
    let [n, c, h, w, n_classes] = fields[..] else {
        return Err(format_err(path, format!("header needs 5 fields, got `{}`", header.trim())));
    };
    let expected = at + 2 * n + n * c * h * w;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("header promises {n} images ({expected} bytes) but file has {} bytes", bytes.len()),
        ));
    }
    let labels: Vec<usize> = bytes[at..at + 2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    at += 2 * n;
    if c * h * w == 0 {
        return Err(format_err(path, "zero-sized image shape"));
    }
    let images = bytes[at..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new("primg", (c, h, w), n_classes, images, labels).map_err(|e| format_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn cifar_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = cifar_record(3, |i| (i % 256) as u8);
        bytes.extend(cifar_record(0, |_| 0));
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&path, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), (3, 32, 32));
        assert_eq!(ds.labels(), &[3, 0]);
        // Plane layout: 1024 R then 1024 G then 1024 B, row-major.
        let img = ds.image(0);
        assert_eq!(img.get(&[0, 0, 1]), 1.0 / 255.0);
        assert_eq!(img.get(&[1, 0, 0]), (1024 % 256) as f32 / 255.0);
        assert_eq!(img.get(&[2, 31, 31]), (3071 % 256) as f32 / 255.0);
        assert!(ds.pixels(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_truncated_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        fs::write(&path, vec![0u8; 3073 + 5]).unwrap();
        assert!(matches!(load_cifar_binary(&path, 10), Err(Error::DataFormat { .. })));
        fs::write(&path, cifar_record(12, |_| 0)).unwrap();
        assert!(matches!(load_cifar_binary(&path, 10), Err(Error::DataFormat { .. })));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c100.bin");
        let mut rec = vec![7u8, 42u8];
        rec.extend(vec![255u8; CIFAR_PIXELS]);
        fs::write(&path, rec).unwrap();
        let ds = load_cifar_binary(&path, 100).unwrap();
        assert_eq!(ds.labels(), &[42]);
        assert!(ds.pixels(0).iter().all(|&v| v == 1.0));
    }

    pub(crate) fn idx_pair(n_img: u32, n_lab: u32, magic: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend(magic.to_be_bytes());
        img.extend(n_img.to_be_bytes());
        img.extend(28u32.to_be_bytes());
        img.extend(28u32.to_be_bytes());
        img.extend((0..n_img as usize * 784).map(|i| (i % 251) as u8));
        let mut lab = Vec::new();
        lab.extend(0x0000_0801u32.to_be_bytes());
        lab.extend(n_lab.to_be_bytes());
        lab.extend((0..n_lab).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_single_image() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(1, 1, 0x0000_0803);
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.shape(), (1, 28, 28));
        assert_eq!(ds.image(0).get(&[0, 1, 0]), 28.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let (img, lab) = idx_pair(1, 1, 0x0000_0804);
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::DataFormat { .. })));
        let (img, lab) = idx_pair(10, 9, 0x0000_0803);
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("9 labels for 10 images"), "{err}");
    }

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed, 0);
        let images = (0..n * 3 * 5 * 4).map(|_| rng.below(256) as f32 / 255.0).collect();
        let labels = (0..n).map(|_| rng.below(7)).collect();
        Dataset::new("r", (3, 5, 4), 7, images, labels).unwrap()
    }

    #[test]
    fn primg_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.primg");
        let ds = random_dataset(9, 1);
        write_raw_archive(&ds, &path).unwrap();
        let back = load_raw_archive(&path).unwrap();
        assert_eq!(back.all_pixels(), ds.all_pixels());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.shape(), ds.shape());
        // Re-writing yields the identical bytes.
        let again = dir.path().join("b.primg");
        write_raw_archive(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn primg_inconsistent_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.primg");
        write_raw_archive(&random_dataset(3, 2), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Header "3 3 5 4 7\n" -> "4 3 5 4 7\n".
        let at = PRIMG_MAGIC.len() + 4;
        assert_eq!(bytes[at], b'3');
        bytes[at] = b'4';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_raw_archive(&path), Err(Error::DataFormat { .. })));
        fs::write(&path, b"PRIMG2\n").unwrap();
        assert!(matches!(load_raw_archive(&path), Err(Error::DataFormat { .. })));
    }

    #[test]
    fn primg_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.primg");
        let ds = Dataset::new("e", (1, 2, 2), 3, vec![], vec![]).unwrap();
        write_raw_archive(&ds, &path).unwrap();
        let back = load_raw_archive(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.shape(), (1, 2, 2));
    }
}

//! Dataset container, IDX file loading, bootstrap resampling, synthetic
//! blob generation, and deterministic epoch batching.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images with pixels already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    /// `[N, rows * cols]`, row-major per image.
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    img_rows: usize,
    img_cols: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        img_rows: usize,
        img_cols: usize,
    ) -> Result<Dataset> {
        if images.shape().len() != 2 {
            return Err(Error::shape("dataset", format!("images {:?}", images.shape())));
        }
        let (n, d) = (images.rows(), images.cols());
        if n == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("classes {classes} < 2")));
        }
        if img_rows * img_cols != d {
            return Err(Error::shape(
                "dataset",
                format!("{img_rows}x{img_cols} grid vs dim {d}"),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    value: l,
                    classes,
                });
            }
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
            img_rows,
            img_cols,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn img_shape(&self) -> (usize, usize) {
        (self.img_rows, self.img_cols)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![1, self.dim()], self.images.row(i).to_vec())
    }

    /// Gather rows by index into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![indices.len(), d], data), labels)
    }

    /// First `n` examples as a new dataset.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "take {n} of {}",
                self.len()
            )));
        }
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&indices);
        Dataset::new(
            format!("{}[..{n}]", self.name),
            images,
            labels,
            self.classes,
            self.img_rows,
            self.img_cols,
        )
    }

    /// Split into the first `at` examples and the rest. Useful for carving a
    /// held-out set from generated data, whose class geometry is tied to the
    /// generator seed and therefore cannot come from a second draw.
    pub fn split_at(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split at {at} of {}",
                self.len()
            )));
        }
        let head = self.take(at)?;
        let rest: Vec<usize> = (at..self.len()).collect();
        let (images, labels) = self.batch(&rest);
        let tail = Dataset::new(
            format!("{}[{at}..]", self.name),
            images,
            labels,
            self.classes,
            self.img_rows,
            self.img_cols,
        )?;
        Ok((head, tail))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    let is_gz = path.extension().is_some_and(|e| e == "gz");
    if is_gz {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(&path.display().to_string(), format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let is_gz = path.extension().is_some_and(|e| e == "gz");
    if is_gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn be_u32(buf: &[u8], pos: usize, path: &str) -> Result<u32> {
    if pos + 4 > buf.len() {
        return Err(Error::Truncated {
            path: path.to_string(),
            expected: pos + 4,
            found: buf.len(),
        });
    }
    Ok(u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()))
}

/// Load an IDX image/label pair (optionally gzipped) as a 10-class dataset.
///
/// Pixels are scaled by 1/255. Errors distinguish bad magic, truncation,
/// image/label count mismatch, and out-of-range labels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();
    let ibuf = read_maybe_gz(images_path)?;
    let lbuf = read_maybe_gz(labels_path)?;

    let imagic = be_u32(&ibuf, 0, &ipath)?;
    if imagic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: ipath,
            expected: IDX_IMAGES_MAGIC,
            found: imagic,
        });
    }
    let n = be_u32(&ibuf, 4, &ipath)? as usize;
    let rows = be_u32(&ibuf, 8, &ipath)? as usize;
    let cols = be_u32(&ibuf, 12, &ipath)? as usize;
    let expected = 16 + n * rows * cols;
    if ibuf.len() != expected {
        return Err(Error::Truncated {
            path: ipath,
            expected,
            found: ibuf.len(),
        });
    }

    let lmagic = be_u32(&lbuf, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lpath,
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let ln = be_u32(&lbuf, 4, &lpath)? as usize;
    if lbuf.len() != 8 + ln {
        return Err(Error::Truncated {
            path: lpath,
            expected: 8 + ln,
            found: lbuf.len(),
        });
    }
    if n != ln {
        return Err(Error::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let pixels: Vec<f64> = ibuf[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in lbuf[8..].iter().enumerate() {
        if b > 9 {
            return Err(Error::LabelOutOfRange {
                index: i,
                value: b as usize,
                classes: 10,
            });
        }
        labels.push(b as usize);
    }

    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(
        name,
        Tensor::from_parts(vec![n, rows * cols], pixels),
        labels,
        10,
        rows,
        cols,
    )
}

/// Write a dataset back out as an IDX pair. Pixels are quantized to bytes,
/// so `load(write(load(f)))` equals `load(f)` for files that came from IDX.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = ds.img_shape();
    let mut ibuf = Vec::with_capacity(16 + ds.len() * ds.dim());
    ibuf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    ibuf.extend_from_slice(&(rows as u32).to_be_bytes());
    ibuf.extend_from_slice(&(cols as u32).to_be_bytes());
    for &p in ds.images.data() {
        ibuf.push((p * 255.0).round() as u8);
    }
    write_maybe_gz(images_path, &ibuf)?;

    let mut lbuf = Vec::with_capacity(8 + ds.len());
    lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in ds.labels() {
        lbuf.push(l as u8);
    }
    write_maybe_gz(labels_path, &lbuf)?;
    Ok(())
}

/// Sample N indices with replacement and build the resampled dataset.
/// Roughly 63.2 percent of the source rows appear at least once.
pub fn bootstrap_resample(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = rng::seeded(seed);
    let n = ds.len();
    let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let (images, labels) = ds.batch(&indices);
    Dataset::new(
        format!("{}#boot{seed}", ds.name),
        images,
        labels,
        ds.classes,
        ds.img_rows,
        ds.img_cols,
    )
}

/// Spread of class means away from the 0.5 center, per coordinate magnitude
/// `BLOB_SPREAD / sqrt(d)`. Chosen so means stay inside [0, 1] with room for
/// noise at any dimension.
pub const BLOB_SPREAD: f64 = 0.35;
pub const BLOB_NOISE_SIGMA: f64 = 0.08;

/// Gaussian blobs around well-separated class means, clipped to `[0, 1]`.
///
/// Class k's mean is `0.5 + BLOB_SPREAD * u_k` where `u_k` has entries
/// `±1/sqrt(d)` drawn from the seed; distinct sign patterns keep the classes
/// linearly separable at the default noise level. Labels are balanced round
/// robin. Deterministic per `(n, d, c, seed)`.
pub fn synthetic_blobs(n: usize, d: usize, c: usize, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::InvalidArgument(format!("blobs need c >= 2, got {c}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("blobs need n, d >= 1, got n={n} d={d}")));
    }
    if d < 16 && c > (1usize << d) {
        return Err(Error::InvalidArgument(format!(
            "cannot place {c} distinct sign-pattern means in {d} dimensions"
        )));
    }

    // Sign patterns per class; re-draw collisions so means are distinct.
    let mut mean_rng = rng::seeded_stream(seed, 0);
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(c);
    let scale = BLOB_SPREAD / (d as f64).sqrt();
    while patterns.len() < c {
        let cand: Vec<f64> = (0..d)
            .map(|_| if mean_rng.random::<f64>() < 0.5 { -scale } else { scale })
            .collect();
        if d >= 16 || !patterns.contains(&cand) {
            patterns.push(cand);
        }
    }

    let mut noise_rng = rng::seeded_stream(seed, 1);
    let mut polar = rng::PolarNormal::new();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        labels.push(k);
        for j in 0..d {
            let v = 0.5 + patterns[k][j] + BLOB_NOISE_SIGMA * polar.next(&mut noise_rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }

    let side = (d as f64).sqrt() as usize;
    let (rows, cols) = if side * side == d { (side, side) } else { (1, d) };
    Dataset::new(
        format!("blobs-n{n}-d{d}-c{c}-s{seed}"),
        Tensor::from_parts(vec![n, d], data),
        labels,
        c,
        rows,
        cols,
    )
}

/// Blobs embedded in a noise background: class structure lives in the first
/// `signal_dims` coordinates (as in [`synthetic_blobs`]), and the remaining
/// `total_dims - signal_dims` coordinates are class-independent
/// `N(0.5, BLOB_NOISE_SIGMA^2)` draws. Models that pick up weight on the
/// background coordinates gain nothing on clean data but hand an l-inf
/// adversary extra leverage, which makes the robustness gap between
/// regularized and unregularized fits visible at small scale.
pub fn blobs_in_noise(
    n: usize,
    signal_dims: usize,
    total_dims: usize,
    c: usize,
    seed: u64,
) -> Result<Dataset> {
    if signal_dims == 0 || total_dims < signal_dims {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= signal_dims <= total_dims, got {signal_dims} of {total_dims}"
        )));
    }
    let core = synthetic_blobs(n, signal_dims, c, seed)?;
    if total_dims == signal_dims {
        return Ok(core);
    }
    let pad = total_dims - signal_dims;
    let mut pad_rng = rng::seeded_stream(seed, 2);
    let mut polar = rng::PolarNormal::new();
    let mut data = Vec::with_capacity(n * total_dims);
    for i in 0..n {
        data.extend_from_slice(core.images().row(i));
        for _ in 0..pad {
            let v = 0.5 + BLOB_NOISE_SIGMA * polar.next(&mut pad_rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(
        format!("blobs-n{n}-d{signal_dims}+{pad}-c{c}-s{seed}"),
        Tensor::from_parts(vec![n, total_dims], data),
        core.labels().to_vec(),
        c,
        1,
        total_dims,
    )
}

/// Deterministic shuffled mini-batch plan. The shuffle depends only on
/// `(seed, epoch)`, and every index appears in exactly one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> BatchPlan {
        BatchPlan { batch_size, seed }
    }

    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        assert!(self.batch_size >= 1, "batch_size must be positive");
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::seeded_stream(self.seed, 1_000_000 + epoch as u64);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![4, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        Dataset::new("tiny", images, vec![0, 1, 0, 1], 2, 1, 2).unwrap()
    }

    #[test]
    fn constructor_validates() {
        let images = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert!(Dataset::new("x", images.clone(), vec![0], 2, 1, 2).is_err());
        assert!(Dataset::new("x", images.clone(), vec![0, 5], 2, 1, 2).is_err());
        assert!(Dataset::new("x", images.clone(), vec![0, 1], 2, 1, 3).is_err());
        assert!(Dataset::new("x", images, vec![0, 1], 2, 1, 2).is_ok());
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        let ds = tiny();
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.labels(), ds.labels());
        // Quantization to bytes is the only loss; a second trip is exact.
        let ip2 = dir.path().join("imgs2.idx");
        let lp2 = dir.path().join("lbls2.idx");
        write_idx(&back, &ip2, &lp2).unwrap();
        let again = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(again.images().data(), back.images().data());
    }

    #[test]
    fn idx_roundtrip_gzipped() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx.gz");
        let lp = dir.path().join("lbls.idx.gz");
        write_idx(&tiny(), &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 4);
    }

    #[test]
    fn idx_error_paths_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        write_idx(&tiny(), &ip, &lp).unwrap();

        // Wrong magic.
        let mut b = fs::read(&ip).unwrap();
        b[3] = 0x99;
        let bad = dir.path().join("badmagic.idx");
        fs::write(&bad, &b).unwrap();
        assert!(matches!(
            load_idx(&bad, &lp),
            Err(Error::BadMagic { .. })
        ));

        // Truncated payload.
        let b = fs::read(&ip).unwrap();
        let cut = dir.path().join("cut.idx");
        fs::write(&cut, &b[..b.len() - 3]).unwrap();
        assert!(matches!(load_idx(&cut, &lp), Err(Error::Truncated { .. })));

        // Count mismatch.
        let mut lb = fs::read(&lp).unwrap();
        lb[7] = 3;
        lb.truncate(8 + 3);
        let fewer = dir.path().join("fewer.idx");
        fs::write(&fewer, &lb).unwrap();
        assert!(matches!(
            load_idx(&ip, &fewer),
            Err(Error::CountMismatch { .. })
        ));

        // Label out of range.
        let mut lb = fs::read(&lp).unwrap();
        lb[8] = 11;
        let hot = dir.path().join("hot.idx");
        fs::write(&hot, &lb).unwrap();
        assert!(matches!(
            load_idx(&ip, &hot),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        let mut ibuf = Vec::new();
        ibuf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ibuf.extend_from_slice(&1u32.to_be_bytes());
        ibuf.extend_from_slice(&1u32.to_be_bytes());
        ibuf.extend_from_slice(&2u32.to_be_bytes());
        ibuf.extend_from_slice(&[0u8, 255u8]);
        fs::write(&ip, &ibuf).unwrap();
        let mut lbuf = Vec::new();
        lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbuf.extend_from_slice(&1u32.to_be_bytes());
        lbuf.push(7);
        fs::write(&lp, &lbuf).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images().data(), &[0.0, 1.0]);
        assert_eq!(ds.labels(), &[7]);
    }

    #[test]
    fn bootstrap_shapes_and_determinism() {
        let ds = synthetic_blobs(100, 4, 2, 3).unwrap();
        let a = bootstrap_resample(&ds, 11).unwrap();
        let b = bootstrap_resample(&ds, 11).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.len(), ds.len());
        let c = bootstrap_resample(&ds, 12).unwrap();
        assert_ne!(a.images().data(), c.images().data());
    }

    #[test]
    fn bootstrap_unique_fraction_near_632() {
        let ds = synthetic_blobs(10_000, 2, 2, 0).unwrap();
        let rs = bootstrap_resample(&ds, 42).unwrap();
        // Recover which source rows were drawn by matching exact pixel rows.
        let mut source: std::collections::HashMap<Vec<u64>, usize> = Default::default();
        for i in 0..ds.len() {
            let key: Vec<u64> = ds.images().row(i).iter().map(|v| v.to_bits()).collect();
            source.insert(key, i);
        }
        let mut seen = BTreeSet::new();
        for i in 0..rs.len() {
            let key: Vec<u64> = rs.images().row(i).iter().map(|v| v.to_bits()).collect();
            seen.insert(source[&key]);
        }
        let frac = seen.len() as f64 / ds.len() as f64;
        assert!((frac - 0.632).abs() < 0.01, "unique fraction {frac}");
    }

    #[test]
    fn bootstrap_single_row() {
        let images = Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap();
        let ds = Dataset::new("one", images, vec![1], 2, 1, 2).unwrap();
        let rs = bootstrap_resample(&ds, 0).unwrap();
        assert_eq!(rs.images().data(), ds.images().data());
    }

    #[test]
    fn blobs_deterministic_clipped_balanced() {
        let a = synthetic_blobs(300, 8, 3, 5).unwrap();
        let b = synthetic_blobs(300, 8, 3, 5).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.labels(), b.labels());
        assert!(a.images().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let counts = a.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(counts, 100);
        assert!(synthetic_blobs(10, 4, 1, 0).is_err());
    }

    #[test]
    fn blobs_linearly_separable_by_centroid_rule() {
        // Nearest-centroid (a linear rule) should get essentially everything.
        let ds = synthetic_blobs(600, 16, 3, 9).unwrap();
        let d = ds.dim();
        let mut centroids = vec![vec![0.0; d]; 3];
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            let k = ds.labels()[i];
            counts[k] += 1;
            for (j, &v) in ds.images().row(i).iter().enumerate() {
                centroids[k][j] += v;
            }
        }
        for (k, c) in centroids.iter_mut().enumerate() {
            for v in c.iter_mut() {
                *v /= counts[k] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let row = ds.images().row(i);
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99, "{correct}/600");
    }

    #[test]
    fn noise_background_shares_the_signal_block() {
        let padded = blobs_in_noise(40, 4, 12, 2, 3).unwrap();
        let core = synthetic_blobs(40, 4, 2, 3).unwrap();
        assert_eq!(padded.dim(), 12);
        assert_eq!(padded.labels(), core.labels());
        for i in 0..40 {
            assert_eq!(&padded.images().row(i)[..4], core.images().row(i));
        }
        // Background coordinates carry no class signal: per-class means of a
        // noise coordinate agree to within sampling error, unlike a signal
        // coordinate whose class means are BLOB_SPREAD apart.
        let mean_by = |col: usize, class: usize| -> f64 {
            let vals: Vec<f64> = (0..40)
                .filter(|&i| padded.labels()[i] == class)
                .map(|i| padded.images().row(i)[col])
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!((mean_by(7, 0) - mean_by(7, 1)).abs() < 0.1);
        let best_signal_gap = (0..4)
            .map(|col| (mean_by(col, 0) - mean_by(col, 1)).abs())
            .fold(0.0, f64::max);
        assert!(best_signal_gap > 0.2, "gap {best_signal_gap}");
        assert!(blobs_in_noise(40, 8, 4, 2, 3).is_err());
        assert!(blobs_in_noise(40, 0, 4, 2, 3).is_err());
    }

    #[test]
    fn split_partitions_rows_in_order() {
        let ds = synthetic_blobs(30, 4, 3, 11).unwrap();
        let (head, tail) = ds.split_at(18).unwrap();
        assert_eq!(head.len(), 18);
        assert_eq!(tail.len(), 12);
        assert_eq!(head.classes(), 3);
        assert_eq!(tail.classes(), 3);
        let d = ds.dim();
        assert_eq!(head.images().data(), &ds.images().data()[..18 * d]);
        assert_eq!(tail.images().data(), &ds.images().data()[18 * d..]);
        assert_eq!(head.labels(), &ds.labels()[..18]);
        assert_eq!(tail.labels(), &ds.labels()[18..]);
        assert!(ds.split_at(0).is_err());
        assert!(ds.split_at(30).is_err());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let plan = BatchPlan::new(7, 123);
        for epoch in 0..3 {
            let batches = plan.batches(23, epoch);
            assert_eq!(batches.len(), 4);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
        // Same (seed, epoch) gives the same order; different epoch differs.
        assert_eq!(plan.batches(23, 1), plan.batches(23, 1));
        assert_ne!(plan.batches(23, 1), plan.batches(23, 2));
    }
}

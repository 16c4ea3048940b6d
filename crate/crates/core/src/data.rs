//! Dataset ingestion and batching: dense real matrices (CSV / raw64), image
//! patches from PGM images, UCI bag-of-words corpora, and the document
//! completion split.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major matrix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDataset {
    pub n_obs: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl DenseDataset {
    pub fn new(n_obs: usize, dim: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len(), n_obs * dim);
        DenseDataset { n_obs, dim, rows }
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n * self.dim..(n + 1) * self.dim]
    }

    /// Mean of `x xᵀ` over a subsample (used for the default Wishart prior
    /// scale). Returns a row-major `dim × dim` buffer.
    pub fn second_moment(&self, max_rows: usize) -> Vec<f64> {
        let take = self.n_obs.min(max_rows.max(1));
        let stride = (self.n_obs / take).max(1);
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        let mut used = 0usize;
        let mut n = 0;
        while n < self.n_obs && used < take {
            let x = self.row(n);
            for i in 0..d {
                let xi = x[i];
                for j in 0..d {
                    m[i * d + j] += xi * x[j];
                }
            }
            used += 1;
            n += stride;
        }
        let inv = 1.0 / used as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }
}

/// Discrete single-token observations for the categorical mixture family.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
}

/// Sparse histogram of one document: distinct word types and their counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub word_ids: Vec<usize>,
    pub counts: Vec<f64>,
    pub n_tokens: f64,
}

impl Document {
    pub fn new(word_ids: Vec<usize>, counts: Vec<f64>) -> Self {
        debug_assert_eq!(word_ids.len(), counts.len());
        let n_tokens = counts.iter().sum();
        Document {
            word_ids,
            counts,
            n_tokens,
        }
    }

    pub fn n_types(&self) -> usize {
        self.word_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub vocab_size: usize,
    /// Documents dropped at load time because they had no words.
    pub n_skipped_empty: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseFormat {
    Csv,
    Raw64,
}

const RAW64_MAGIC: &[u8; 4] = b"SMX0";

/// Loads a dense dataset.
///
/// CSV: one observation per line, comma-separated decimal numbers.
/// raw64: 16-byte header (magic "SMX0", little-endian u32 `n_obs`, u32 `dim`,
/// 4 reserved zero bytes) followed by `n_obs · dim` little-endian f64 values
/// in row-major order.
pub fn load_dense(path: &Path, format: DenseFormat) -> Result<DenseDataset> {
    match format {
        DenseFormat::Csv => load_dense_csv(path),
        DenseFormat::Raw64 => load_dense_raw64(path),
    }
}

fn load_dense_csv(path: &Path) -> Result<DenseDataset> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut dim = None;
    let mut n_obs = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut this_dim = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                location: format!("line {}", lineno + 1),
                msg: format!("cannot parse '{}' as a number", field.trim()),
            })?;
            rows.push(v);
            this_dim += 1;
        }
        match dim {
            None => dim = Some(this_dim),
            Some(d) if d != this_dim => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    location: format!("line {}", lineno + 1),
                    msg: format!("dimension mismatch: expected {d} fields, found {this_dim}"),
                });
            }
            _ => {}
        }
        n_obs += 1;
    }
    let dim = dim.unwrap_or(0);
    if n_obs == 0 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            location: "end of file".into(),
            msg: "no observations".into(),
        });
    }
    Ok(DenseDataset::new(n_obs, dim, rows))
}

fn load_dense_raw64(path: &Path) -> Result<DenseDataset> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let perr = |location: String, msg: String| Error::Parse {
        path: path.display().to_string(),
        location,
        msg,
    };
    if bytes.len() < 16 {
        return Err(perr(
            "byte 0".into(),
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != RAW64_MAGIC {
        return Err(perr("byte 0".into(), "bad magic, expected SMX0".into()));
    }
    let n_obs = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 16 + n_obs * dim * 8;
    if bytes.len() != expected {
        return Err(perr(
            format!("byte {}", bytes.len()),
            format!("expected {expected} bytes total, found {}", bytes.len()),
        ));
    }
    let mut rows = Vec::with_capacity(n_obs * dim);
    for chunk in bytes[16..].chunks_exact(8) {
        rows.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(DenseDataset::new(n_obs, dim, rows))
}

/// Writes the raw64 container; the byte-for-byte inverse of the raw64 loader.
pub fn write_dense_raw64(path: &Path, data: &DenseDataset) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + data.rows.len() * 8);
    bytes.extend_from_slice(RAW64_MAGIC);
    bytes.extend_from_slice(&(data.n_obs as u32).to_le_bytes());
    bytes.extend_from_slice(&(data.dim as u32).to_le_bytes());
    bytes.extend_from_slice(&[0u8; 4]);
    for v in &data.rows {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Extracts square patches from an 8-bit binary PGM (P5) image on a regular
/// grid, flattens them row-major, and (optionally) removes each patch's mean.
pub fn extract_patches(
    path: &Path,
    patch: usize,
    stride: usize,
    zero_mean: bool,
) -> Result<DenseDataset> {
    let bytes = fs::read(path)?;
    let (width, height, pixels) = parse_pgm(path, &bytes)?;
    extract_patches_from_gray(&pixels, width, height, patch, stride, zero_mean)
}

/// Patch extraction from an in-memory grayscale buffer (row-major, `width`
/// columns). Patches are taken at top-left offsets `(stride·i, stride·j)`
/// that fit entirely inside the image.
pub fn extract_patches_from_gray(
    pixels: &[f64],
    width: usize,
    height: usize,
    patch: usize,
    stride: usize,
    zero_mean: bool,
) -> Result<DenseDataset> {
    if width < patch || height < patch {
        return Err(Error::arg(format!(
            "image {width}x{height} smaller than patch size {patch}"
        )));
    }
    if stride == 0 {
        return Err(Error::arg("stride must be >= 1"));
    }
    let per_row = (width - patch) / stride + 1;
    let per_col = (height - patch) / stride + 1;
    let d = patch * patch;
    let mut rows = Vec::with_capacity(per_row * per_col * d);
    for gy in 0..per_col {
        for gx in 0..per_row {
            let y0 = gy * stride;
            let x0 = gx * stride;
            let start = rows.len();
            for dy in 0..patch {
                let off = (y0 + dy) * width + x0;
                rows.extend_from_slice(&pixels[off..off + patch]);
            }
            if zero_mean {
                let mean = rows[start..].iter().sum::<f64>() / d as f64;
                for v in &mut rows[start..] {
                    *v -= mean;
                }
            }
        }
    }
    Ok(DenseDataset::new(per_row * per_col, d, rows))
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let perr = |msg: String| Error::Parse {
        path: path.display().to_string(),
        location: "header".into(),
        msg,
    };
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // Skips whitespace and '#' comments, returns (start, end) of a token.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Some((start, pos))
    };
    let tok = |r: Option<(usize, usize)>| -> Result<&str> {
        let (s, e) = r.ok_or_else(|| perr("truncated header".into()))?;
        std::str::from_utf8(&bytes[s..e]).map_err(|_| perr("non-ASCII header".into()))
    };
    let magic = tok(next_token(bytes))?;
    if magic != "P5" {
        return Err(perr(format!("unsupported PGM variant '{magic}', need P5")));
    }
    let width: usize = tok(next_token(bytes))?
        .parse()
        .map_err(|_| perr("bad width".into()))?;
    let height: usize = tok(next_token(bytes))?
        .parse()
        .map_err(|_| perr("bad height".into()))?;
    let maxval: usize = tok(next_token(bytes))?
        .parse()
        .map_err(|_| perr("bad maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(perr(format!("maxval {maxval} not in 1..=255 (8-bit only)")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    let data_start = pos + 1;
    let need = width * height;
    if bytes.len() < data_start + need {
        return Err(Error::Parse {
            path: path.display().to_string(),
            location: format!("byte {}", bytes.len()),
            msg: format!(
                "expected {} pixel bytes, found {}",
                need,
                bytes.len().saturating_sub(data_start)
            ),
        });
    }
    let pixels = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f64)
        .collect();
    Ok((width, height, pixels))
}

/// Loads a UCI bag-of-words file: three header lines `D`, `V`, `NNZ`, then
/// `NNZ` lines of `docID wordID count` with 1-based ids. Documents that end
/// up empty are skipped and counted in `n_skipped_empty`.
pub fn load_uci_bow(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_uci_bow(&path.display().to_string(), &text)
}

fn parse_uci_bow(path: &str, text: &str) -> Result<Corpus> {
    let perr = |lineno: usize, msg: String| Error::Parse {
        path: path.to_string(),
        location: format!("line {lineno}"),
        msg,
    };
    let mut lines = text.lines().enumerate();
    let mut header = |name: &str| -> Result<usize> {
        loop {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| perr(0, format!("missing {name} header line")))?;
            if line.trim().is_empty() {
                continue;
            }
            return line
                .trim()
                .parse()
                .map_err(|_| perr(lineno + 1, format!("bad {name} header '{}'", line.trim())));
        }
    };
    let n_docs = header("D")?;
    let vocab_size = header("V")?;
    let nnz = header("NNZ")?;

    let mut acc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_docs];
    let mut seen = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut field = |name: &str| -> Result<i64> {
            it.next()
                .ok_or_else(|| perr(lineno + 1, format!("missing {name}")))?
                .parse()
                .map_err(|_| perr(lineno + 1, format!("bad {name}")))
        };
        let doc = field("docID")?;
        let word = field("wordID")?;
        let count = field("count")?;
        if doc < 1 || doc as usize > n_docs {
            return Err(perr(
                lineno + 1,
                format!("docID {doc} out of range 1..={n_docs}"),
            ));
        }
        if word < 1 || word as usize > vocab_size {
            return Err(perr(
                lineno + 1,
                format!("wordID {word} out of range 1..={vocab_size}"),
            ));
        }
        if count <= 0 {
            return Err(perr(lineno + 1, format!("count {count} must be positive")));
        }
        acc[doc as usize - 1].push((word as usize - 1, count as f64));
        seen += 1;
    }
    if seen != nnz {
        return Err(perr(
            0,
            format!("header declared {nnz} entries, found {seen}"),
        ));
    }
    let mut docs = Vec::with_capacity(n_docs);
    let mut n_skipped_empty = 0;
    for mut entries in acc {
        if entries.is_empty() {
            n_skipped_empty += 1;
            continue;
        }
        entries.sort_unstable_by_key(|&(w, _)| w);
        // Merge duplicate (doc, word) lines.
        let mut word_ids = Vec::with_capacity(entries.len());
        let mut counts: Vec<f64> = Vec::with_capacity(entries.len());
        for (w, c) in entries {
            if word_ids.last() == Some(&w) {
                *counts.last_mut().unwrap() += c;
            } else {
                word_ids.push(w);
                counts.push(c);
            }
        }
        docs.push(Document::new(word_ids, counts));
    }
    Ok(Corpus {
        docs,
        vocab_size,
        n_skipped_empty,
    })
}

/// Writes a corpus in UCI bag-of-words form; inverse of [`load_uci_bow`] up
/// to document order (empty documents cannot be represented).
pub fn write_uci_bow(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    let nnz: usize = corpus.docs.iter().map(|d| d.n_types()).sum();
    out.push_str(&format!(
        "{}\n{}\n{}\n",
        corpus.docs.len(),
        corpus.vocab_size,
        nnz
    ));
    for (d, doc) in corpus.docs.iter().enumerate() {
        for (w, c) in doc.word_ids.iter().zip(doc.counts.iter()) {
            out.push_str(&format!("{} {} {}\n", d + 1, w + 1, *c as i64));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Splits a document's unique word types at random: `⌈frac_a · U⌉` types to
/// piece A, the rest to piece B; counts travel with their type. Returns
/// `None` for documents with fewer than two types (the skip signal).
pub fn completion_split(
    doc: &Document,
    frac_a: f64,
    rng: &mut impl Rng,
) -> Option<(Document, Document)> {
    let u = doc.n_types();
    if u < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..u).collect();
    order.shuffle(rng);
    let n_a = ((frac_a * u as f64).ceil() as usize).clamp(1, u - 1);
    let pick = |slots: &[usize]| {
        let mut ids: Vec<usize> = slots.iter().map(|&i| doc.word_ids[i]).collect();
        let mut counts: Vec<f64> = slots.iter().map(|&i| doc.counts[i]).collect();
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        perm.sort_unstable_by_key(|&i| ids[i]);
        ids = perm.iter().map(|&i| ids[i]).collect();
        counts = perm.iter().map(|&i| counts[i]).collect();
        Document::new(ids, counts)
    };
    let a = pick(&order[..n_a]);
    let b = pick(&order[n_a..]);
    Some((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Contiguous index ranges fixed before training; sizes differ by ≤ 1.
    FixedPartition,
    /// Uniform batch-sized draws with replacement each time a batch is asked
    /// for.
    SampleWithReplacement,
}

/// Produces observation-index batches for the minibatch trainers.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    b: usize,
    mode: BatchMode,
    rng: ChaCha8Rng,
    bounds: Vec<usize>,
}

impl Batcher {
    pub fn new(n: usize, b: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        if b == 0 {
            return Err(Error::arg("batch count must be >= 1"));
        }
        if b > n {
            return Err(Error::arg(format!(
                "batch count {b} exceeds {n} observations"
            )));
        }
        let base = n / b;
        let extra = n % b;
        let mut bounds = Vec::with_capacity(b + 1);
        bounds.push(0);
        for i in 0..b {
            let size = base + usize::from(i < extra);
            bounds.push(bounds[i] + size);
        }
        Ok(Batcher {
            n,
            b,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bounds,
        })
    }

    pub fn n_batches(&self) -> usize {
        self.b
    }

    pub fn batch_size(&self, b: usize) -> usize {
        self.bounds[b + 1] - self.bounds[b]
    }

    /// Indices for batch `b`. In sampling mode `b` only sets the batch size;
    /// membership is freshly drawn.
    pub fn batch(&mut self, b: usize) -> Vec<usize> {
        assert!(b < self.b, "batch id {b} out of range");
        match self.mode {
            BatchMode::FixedPartition => (self.bounds[b]..self.bounds[b + 1]).collect(),
            BatchMode::SampleWithReplacement => {
                let size = self.batch_size(b);
                (0..size).map(|_| self.rng.gen_range(0..self.n)).collect()
            }
        }
    }
}

//! Little-endian binary formats for models, calibration batches and factors.
//!
//! All integers are unsigned little-endian, all reals IEEE-754 `f64`
//! little-endian, all matrices row-major. See `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};

use elitekv_core::lowrank::{Factorization, KeyLayout};
use elitekv_core::{
    AttentionWeights, CalibrationBatch, ChunkSet, FactorMode, LayerWeights, LowRankFactors, Matrix,
    ModelConfig,
};

use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"EKV1";
pub const CALIB_MAGIC: [u8; 4] = *b"EKC1";
pub const FACTOR_MAGIC: [u8; 4] = *b"EKF1";
pub const VERSION: u16 = 1;

/// Size of the model header: magic, version, four `u32`, base.
pub const MODEL_HEADER_LEN: usize = 4 + 2 + 4 * 4 + 8;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension exceeds u32");
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn err(&self, msg: impl Into<String>) -> HarnessError {
        HarnessError::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                self.err(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, want: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(&want)
            )));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| self.err(format!("{what}: {rows}x{cols} overflows")))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| self.err(format!("{what}: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

// ---- model --------------------------------------------------------------

pub fn encode_model(cfg: &ModelConfig, w: &AttentionWeights) -> Result<Vec<u8>> {
    w.validate(cfg)?;
    let mut out = Writer::default();
    out.bytes(&MODEL_MAGIC);
    out.u16(VERSION);
    out.u32(cfg.n_layers);
    out.u32(cfg.n_heads);
    out.u32(cfg.head_dim);
    out.u32(cfg.embed_dim);
    out.f64(cfg.rope.base());
    for l in &w.layers {
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            out.matrix(m);
        }
    }
    Ok(out.0)
}

/// The returned config has residual normalization off; it is a run option,
/// not part of the file.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<(ModelConfig, AttentionWeights)> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    let (l, nh, dh, d) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let base = r.f64()?;
    let cfg = ModelConfig::with_base(l, nh, dh, d, base)
        .map_err(|e| HarnessError::format(path, e.to_string()))?;
    let kv = cfg.kv_dim();
    let mut layers = Vec::with_capacity(l);
    for i in 0..l {
        layers.push(LayerWeights {
            wq: r.matrix(d, kv, &format!("layer {i} wq"))?,
            wk: r.matrix(d, kv, &format!("layer {i} wk"))?,
            wv: r.matrix(d, kv, &format!("layer {i} wv"))?,
            wo: r.matrix(kv, d, &format!("layer {i} wo"))?,
        });
    }
    r.finish()?;
    let w = AttentionWeights::new(&cfg, layers)?;
    Ok((cfg, w))
}

pub fn write_model(path: &Path, cfg: &ModelConfig, w: &AttentionWeights) -> Result<()> {
    write_bytes(path, &encode_model(cfg, w)?)
}

pub fn read_model(path: &Path) -> Result<(ModelConfig, AttentionWeights)> {
    decode_model(&read_bytes(path)?, path)
}

// ---- calibration --------------------------------------------------------

/// Token sequences over an embedding table; token vectors are table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibData {
    pub table: Matrix,
    pub ids: Vec<Vec<u32>>,
}

impl CalibData {
    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn embed(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        ids.iter()
            .map(|&i| self.table.row(i as usize).to_vec())
            .collect()
    }

    pub fn batch(&self) -> Result<CalibrationBatch> {
        let seqs = self.ids.iter().map(|s| self.embed(s)).collect();
        Ok(CalibrationBatch::new(seqs, self.embed_dim())?)
    }
}

pub fn encode_calib(c: &CalibData) -> Result<Vec<u8>> {
    let len = c.ids.first().map_or(0, Vec::len);
    if c.ids.iter().any(|s| s.len() != len) {
        return Err(HarnessError::Invalid(
            "calibration sequences must share one length".into(),
        ));
    }
    let mut out = Writer::default();
    out.bytes(&CALIB_MAGIC);
    out.u16(VERSION);
    out.u32(c.embed_dim());
    out.u32(c.vocab());
    out.u32(c.ids.len());
    out.u32(len);
    out.matrix(&c.table);
    for &id in c.ids.iter().flatten() {
        out.u32(id as usize);
    }
    Ok(out.0)
}

pub fn decode_calib(bytes: &[u8], path: &Path) -> Result<CalibData> {
    let mut r = Reader::new(bytes, path);
    r.magic(CALIB_MAGIC)?;
    let (d, vocab, n_seqs, len) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if d == 0 || vocab == 0 {
        return Err(r.err("embedding dim and vocabulary must be positive"));
    }
    let table = r.matrix(vocab, d, "embedding table")?;
    let mut ids = Vec::with_capacity(n_seqs);
    for _ in 0..n_seqs {
        let seq = (0..len)
            .map(|_| {
                let id = r.u32()?;
                if id >= vocab {
                    return Err(r.err(format!("token id {id} outside vocabulary of {vocab}")));
                }
                Ok(id as u32)
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(seq);
    }
    r.finish()?;
    Ok(CalibData { table, ids })
}

pub fn write_calib(path: &Path, c: &CalibData) -> Result<()> {
    write_bytes(path, &encode_calib(c)?)
}

pub fn read_calib(path: &Path) -> Result<CalibData> {
    decode_calib(&read_bytes(path)?, path)
}

// ---- factors ------------------------------------------------------------

const MODE_JLRD: u8 = 0;
/// Factor files end with the SHA-256 of everything before it.
pub const DIGEST_LEN: usize = 32;
const MODE_SLRD: u8 = 1;

/// Shape fields of a factor file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorHeader {
    pub mode: FactorMode,
    pub n_layers: usize,
    pub r: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
}

impl FactorHeader {
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        self.n_layers == cfg.n_layers
            && self.n_heads == cfg.n_heads
            && self.head_dim == cfg.head_dim
            && self.embed_dim == cfg.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorFile {
    pub header: FactorHeader,
    pub layers: Vec<LowRankFactors>,
}

pub fn encode_factors(cfg: &ModelConfig, layers: &[LowRankFactors]) -> Result<Vec<u8>> {
    let first = layers
        .first()
        .ok_or_else(|| HarnessError::Invalid("no factor layers to write".into()))?;
    if layers.len() != cfg.n_layers {
        return Err(HarnessError::Invalid(format!(
            "{} factor layers for a {}-layer model",
            layers.len(),
            cfg.n_layers
        )));
    }
    let (mode, r) = (first.mode(), first.layout.r);
    if layers.iter().any(|f| f.mode() != mode || f.layout.r != r) {
        return Err(HarnessError::Invalid(
            "factor layers disagree on mode or r".into(),
        ));
    }
    let mut out = Writer::default();
    out.bytes(&FACTOR_MAGIC);
    out.u16(VERSION);
    out.u8(match mode {
        FactorMode::Jlrd => MODE_JLRD,
        FactorMode::Slrd => MODE_SLRD,
    });
    out.u32(cfg.n_layers);
    out.u32(r);
    out.u32(cfg.n_heads);
    out.u32(cfg.head_dim);
    out.u32(cfg.embed_dim);
    for f in layers {
        f.validate(cfg)?;
        out.u32(f.key_rank());
        out.u32(f.value_rank());
        for set in &f.layout.elite {
            for &i in set.indices() {
                out.u32(i);
            }
        }
        match &f.factorization {
            Factorization::Joint { a_kv, b_k, b_v } => {
                out.matrix(a_kv);
                out.matrix(b_k);
                out.matrix(b_v);
            }
            Factorization::Separate { a_k, b_k, a_v, b_v } => {
                out.matrix(a_k);
                out.matrix(b_k);
                out.matrix(a_v);
                out.matrix(b_v);
            }
        }
    }
    let digest = Sha256::digest(&out.0);
    out.bytes(&digest);
    Ok(out.0)
}

pub fn decode_factors(bytes: &[u8], path: &Path) -> Result<FactorFile> {
    if bytes.len() < DIGEST_LEN {
        return Err(HarnessError::format(
            path,
            "truncated: shorter than the digest trailer",
        ));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(HarnessError::format(
            path,
            "SHA-256 trailer does not match contents",
        ));
    }
    let mut rd = Reader::new(body, path);
    rd.magic(FACTOR_MAGIC)?;
    let mode = match rd.u8()? {
        MODE_JLRD => FactorMode::Jlrd,
        MODE_SLRD => FactorMode::Slrd,
        other => return Err(rd.err(format!("unknown factor mode byte {other}"))),
    };
    let (n_layers, r, nh, dh, d) = (rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?);
    if dh == 0 || dh % 2 != 0 || nh == 0 || r > dh / 2 || d != dh * nh {
        return Err(rd.err(format!(
            "inconsistent header: r={r} n_h={nh} d_h={dh} d={d}"
        )));
    }
    let n_chunks = dh / 2;
    let kv = dh * nh;
    let rest = kv - 2 * r * nh;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (rk, rv) = (rd.u32()?, rd.u32()?);
        if mode == FactorMode::Jlrd && rk != rv {
            return Err(rd.err(format!("layer {l}: joint ranks differ ({rk} vs {rv})")));
        }
        if rk > d || rv > d {
            return Err(rd.err(format!("layer {l}: ranks ({rk}, {rv}) exceed d={d}")));
        }
        let mut sets = Vec::with_capacity(nh);
        for h in 0..nh {
            let idx = (0..r).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(rd.err(format!("layer {l} head {h}: elite indices not ascending")));
            }
            let set = ChunkSet::new(idx, n_chunks)
                .map_err(|e| rd.err(format!("layer {l} head {h}: {e}")))?;
            sets.push(set);
        }
        let layout = KeyLayout::new(&sets, dh).map_err(|e| rd.err(format!("layer {l}: {e}")))?;
        let factorization = match mode {
            FactorMode::Jlrd => Factorization::Joint {
                a_kv: rd.matrix(d, rk, &format!("layer {l} A^kv"))?,
                b_k: rd.matrix(rk, rest, &format!("layer {l} B^k"))?,
                b_v: rd.matrix(rk, kv, &format!("layer {l} B^v"))?,
            },
            FactorMode::Slrd => Factorization::Separate {
                a_k: rd.matrix(d, rk, &format!("layer {l} A^k"))?,
                b_k: rd.matrix(rk, rest, &format!("layer {l} B^k"))?,
                a_v: rd.matrix(d, rv, &format!("layer {l} A^v"))?,
                b_v: rd.matrix(rv, kv, &format!("layer {l} B^v"))?,
            },
        };
        layers.push(LowRankFactors {
            factorization,
            layout,
        });
    }
    rd.finish()?;
    Ok(FactorFile {
        header: FactorHeader {
            mode,
            n_layers,
            r,
            n_heads: nh,
            head_dim: dh,
            embed_dim: d,
        },
        layers,
    })
}

pub fn write_factors(path: &Path, cfg: &ModelConfig, layers: &[LowRankFactors]) -> Result<()> {
    write_bytes(path, &encode_factors(cfg, layers)?)
}

pub fn read_factors(path: &Path) -> Result<FactorFile> {
    decode_factors(&read_bytes(path)?, path)
}

/// Placeholder path used when decoding in-memory buffers.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}

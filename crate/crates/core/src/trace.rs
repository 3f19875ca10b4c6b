//! Attention-trace artifacts.
//!
//! KSA selection weights go to a JSON-lines file, one record per branch.
//! TSA traces go to a binary stream of records, each laid out as
//!
//! ```text
//! u64 LE        header length
//! JSON header   {sample, stage, block, head, shape: [n, n]}
//! f64 LE × n²   dense score matrix, row-major
//! ⌈n²/8⌉ bytes  retained-entry bitmap, row-major, least significant bit first
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksa::BranchWeights;
use crate::model::SampleTrace;
use crate::tensor::Tensor;

pub const KSA_TRACE_FILE: &str = "ksa_trace.jsonl";
pub const TSA_TRACE_FILE: &str = "tsa_trace.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsaRecord {
    pub sample: usize,
    pub stage: usize,
    #[serde(flatten)]
    pub weights: BranchWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsaRecordHeader {
    pub sample: usize,
    pub stage: usize,
    pub block: usize,
    pub head: usize,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsaRecord {
    pub header: TsaRecordHeader,
    pub dense: Tensor,
    pub mask: Vec<bool>,
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Streams traces of successive samples into a directory.
pub struct TraceWriter {
    ksa: BufWriter<File>,
    tsa: BufWriter<File>,
    ksa_path: PathBuf,
    tsa_path: PathBuf,
    first_head_only: bool,
}

impl TraceWriter {
    pub fn create(dir: &Path, first_head_only: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(BufWriter<File>, PathBuf)> {
            let path = dir.join(name);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Ok((BufWriter::new(f), path))
        };
        let (ksa, ksa_path) = open(KSA_TRACE_FILE)?;
        let (tsa, tsa_path) = open(TSA_TRACE_FILE)?;
        Ok(Self { ksa, tsa, ksa_path, tsa_path, first_head_only })
    }

    pub fn record(&mut self, sample: usize, trace: &SampleTrace) -> Result<()> {
        for (stage, ksa) in &trace.ksa {
            for weights in &ksa.branches {
                let rec = KsaRecord { sample, stage: *stage, weights: weights.clone() };
                writeln!(self.ksa, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&self.ksa_path, e))?;
            }
        }
        for block in &trace.tsa {
            for head in &block.heads {
                if self.first_head_only && head.head != 0 {
                    continue;
                }
                let header = TsaRecordHeader {
                    sample,
                    stage: block.stage,
                    block: block.block,
                    head: head.head,
                    shape: [head.dense.shape()[0], head.dense.shape()[1]],
                };
                let mut buf = Vec::new();
                let json = serde_json::to_vec(&header)?;
                buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
                buf.extend_from_slice(&json);
                for v in head.dense.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&pack_bits(head.mask.bits()));
                self.tsa.write_all(&buf).map_err(|e| Error::io(&self.tsa_path, e))?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.ksa.flush().map_err(|e| Error::io(&self.ksa_path, e))?;
        self.tsa.flush().map_err(|e| Error::io(&self.tsa_path, e))
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "tsa trace", detail: detail.into() }
}

pub fn parse_tsa_records(bytes: &[u8]) -> Result<Vec<TsaRecord>> {
    let mut out = Vec::new();
    let mut pos = 0;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| malformed("truncated record"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    while pos < bytes.len() {
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let header: TsaRecordHeader = serde_json::from_slice(take(&mut pos, len)?)?;
        let [rows, cols] = header.shape;
        let dense = take(&mut pos, 8 * rows * cols)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mask = unpack_bits(take(&mut pos, (rows * cols).div_ceil(8))?, rows * cols);
        out.push(TsaRecord { dense: Tensor::new([rows, cols], dense)?, header, mask });
    }
    Ok(out)
}

pub fn read_tsa_records(path: &Path) -> Result<Vec<TsaRecord>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    parse_tsa_records(&bytes)
}

pub fn read_ksa_records(path: &Path) -> Result<Vec<KsaRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

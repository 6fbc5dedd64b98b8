//! Binary dataset file, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TILD"
//!      4     4  format version (u32, currently 1)
//!      8     4  generator version (u32)
//!     12     4  canvas rows m (u32)
//!     16     4  canvas cols n (u32)
//!     20     8  sample count (u64)
//!     28     8  seed (u64)
//!     36    32  SHA-256 digest of the spec
//!     68     -  samples: m*n f32 pixels (row-major) then a u8 label (0-based)
//! ```

use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{ImageMatrix, Matrix};

pub const MAGIC: &[u8; 4] = b"TILD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 68;
const WHAT: &str = "dataset file";

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let (m, n) = d.canvas;
    let mut out = Vec::with_capacity(HEADER_LEN + d.len() * (4 * m * n + 1));
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend(d.generator_version.to_le_bytes());
    out.extend((m as u32).to_le_bytes());
    out.extend((n as u32).to_le_bytes());
    out.extend((d.len() as u64).to_le_bytes());
    out.extend(d.seed.to_le_bytes());
    out.extend(d.spec_digest);
    for (x, label) in &d.samples {
        if x.shape() != d.canvas {
            return Err(Error::dim(format!(
                "sample {:?} on canvas {:?}",
                x.shape(),
                d.canvas
            )));
        }
        let label = u8::try_from(*label)
            .map_err(|_| Error::InvalidValue(format!("label {label} does not fit one byte")))?;
        for &v in x.as_slice() {
            out.extend((v as f32).to_le_bytes());
        }
        out.push(label);
    }
    Ok(out)
}

fn field<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    bytes[at..at + N].try_into().unwrap()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(WHAT, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = u32::from_le_bytes(field(bytes, 4));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let generator_version = u32::from_le_bytes(field(bytes, 8));
    let m = u32::from_le_bytes(field(bytes, 12)) as usize;
    let n = u32::from_le_bytes(field(bytes, 16)) as usize;
    let count = u64::from_le_bytes(field(bytes, 20));
    let seed = u64::from_le_bytes(field(bytes, 28));
    let spec_digest: [u8; 32] = field(bytes, 36);
    if m == 0 || n == 0 {
        return Err(Error::format(WHAT, "empty canvas"));
    }
    let record = 4 * m * n + 1;
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) != count.saturating_mul(record as u64) {
        return Err(Error::format(
            WHAT,
            format!(
                "{} payload bytes for {count} samples of {record} bytes",
                body.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for (s, rec) in body.chunks_exact(record).enumerate() {
        let data = rec[..record - 1]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let x = ImageMatrix::new(Matrix::new(m, n, data)?)
            .map_err(|e| Error::format(WHAT, format!("sample {s}: {e}")))?;
        samples.push((x, usize::from(rec[record - 1])));
    }
    Ok(Dataset {
        canvas: (m, n),
        samples,
        spec_digest,
        seed,
        generator_version,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    write_bytes(path.as_ref(), &encode_dataset(d)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_bytes(path.as_ref())?)
}

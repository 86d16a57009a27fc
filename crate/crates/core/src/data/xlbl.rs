//! XLBL label files.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "XLBL"
//! 4       1      version (1)
//! 5       1      mode: 0 = single label, 1 = multi-hot
//! 6       4      count, u32 little-endian
//! 10      4      num_classes, u32 little-endian
//! 14      ...    mode 0: count u32 class indices
//!                mode 1: count * num_classes bytes, each 0 or 1, row-major
//! ```

use std::fs;
use std::path::Path;

use super::Labels;
use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 4] = b"XLBL";
pub const VERSION: u8 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Size(format!("{what} {n} exceeds u32")))
}

pub fn encode(labels: &Labels) -> Result<Vec<u8>> {
    let (mode, classes) = match labels {
        Labels::Single { classes, .. } => (0u8, *classes),
        Labels::Multi { classes, .. } => (1u8, *classes),
    };
    let mut out = Vec::with_capacity(14 + labels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(mode);
    out.extend_from_slice(&u32_of(labels.len(), "label count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(classes, "class count")?.to_le_bytes());
    match labels {
        Labels::Single { labels, .. } => {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Labels::Multi { rows, .. } => out.extend_from_slice(rows),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Labels> {
    ensure!(bytes.len() >= 14, Format, "truncated XLBL header");
    ensure!(&bytes[..4] == MAGIC, Format, "bad magic {:?}", &bytes[..4]);
    ensure!(
        bytes[4] == VERSION,
        Format,
        "unsupported XLBL version {}",
        bytes[4]
    );
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (count, classes) = (word(6), word(10));
    let body = &bytes[14..];
    let labels = match bytes[5] {
        0 => {
            ensure!(
                body.len() == count * 4,
                Format,
                "XLBL body holds {} bytes, expected {}",
                body.len(),
                count * 4
            );
            Labels::Single {
                classes,
                labels: body
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            }
        }
        1 => {
            let want = count
                .checked_mul(classes)
                .ok_or_else(|| Error::Size("XLBL body size overflows".into()))?;
            ensure!(
                body.len() == want,
                Format,
                "XLBL body holds {} bytes, expected {want}",
                body.len()
            );
            Labels::Multi {
                classes,
                rows: body.to_vec(),
            }
        }
        m => return Err(Error::Format(format!("unknown XLBL mode {m}"))),
    };
    labels.validate()?;
    Ok(labels)
}

pub fn write_file(path: impl AsRef<Path>, labels: &Labels) -> Result<()> {
    fs::write(path, encode(labels)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Labels> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_modes() {
        for l in [
            Labels::Single {
                classes: 4,
                labels: vec![0, 3, 2],
            },
            Labels::Multi {
                classes: 3,
                rows: vec![1, 0, 1, 0, 0, 0],
            },
        ] {
            let bytes = encode(&l).unwrap();
            assert_eq!(decode(&bytes).unwrap(), l);
            assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode(&Labels::Single {
            classes: 2,
            labels: vec![1],
        })
        .unwrap();
        bytes[0] = b'Y';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let bytes = encode(&Labels::Single {
            classes: 2,
            labels: vec![1],
        })
        .unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[14] = 7;
        assert!(matches!(decode(&bad), Err(Error::Data(_))));
    }
}

//! Hex digests of files. MD5 (32 hex chars) is accepted for published
//! dataset archives that only advertise MD5; everything this crate writes
//! itself is pinned with SHA-256 (64 hex chars).

use std::io::Read;
use std::path::Path;

use md5::Md5;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn digest_reader<D: Digest>(mut reader: impl Read, path: &Path) -> Result<String> {
    let mut hasher = D::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    digest_reader::<Sha256>(std::io::BufReader::new(open(path)?), path)
}

pub fn md5_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    digest_reader::<Md5>(std::io::BufReader::new(open(path)?), path)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Check `path` against `expected`, choosing the algorithm from the digest length.
pub fn verify_file(path: impl AsRef<Path>, expected: &str) -> Result<()> {
    let path = path.as_ref();
    let expected = expected.trim().to_ascii_lowercase();
    let actual = match expected.len() {
        32 => md5_file(path)?,
        64 => sha256_file(path)?,
        n => {
            return Err(Error::InvalidArgument(format!(
                "checksum must be 32 (MD5) or 64 (SHA-256) hex chars, got {n}"
            )))
        }
    };
    if actual != expected {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

//! Incremental hashing for the supported digest algorithms.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use md5::Digest as _;

use crate::model::{Digest, DigestAlgorithm};

/// Streaming hasher over one algorithm.
pub enum Hasher {
    Md5(md5::Md5),
    Sha1(sha1::Sha1),
    Sha256(sha2::Sha256),
}

impl Hasher {
    pub fn new(algorithm: DigestAlgorithm) -> Self {
        match algorithm {
            DigestAlgorithm::Md5 => Hasher::Md5(md5::Md5::new()),
            DigestAlgorithm::Sha1 => Hasher::Sha1(sha1::Sha1::new()),
            DigestAlgorithm::Sha256 => Hasher::Sha256(sha2::Sha256::new()),
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        match self {
            Hasher::Md5(h) => h.update(bytes),
            Hasher::Sha1(h) => h.update(bytes),
            Hasher::Sha256(h) => h.update(bytes),
        }
    }

    pub fn finish(self) -> Digest {
        let (algorithm, raw) = match self {
            Hasher::Md5(h) => (DigestAlgorithm::Md5, h.finalize().to_vec()),
            Hasher::Sha1(h) => (DigestAlgorithm::Sha1, h.finalize().to_vec()),
            Hasher::Sha256(h) => (DigestAlgorithm::Sha256, h.finalize().to_vec()),
        };
        Digest { algorithm, hex: hex::encode(raw) }
    }
}

pub fn digest_bytes(algorithm: DigestAlgorithm, bytes: &[u8]) -> Digest {
    let mut h = Hasher::new(algorithm);
    h.update(bytes);
    h.finish()
}

/// Hashes a reader with several algorithms in one pass. Returns the byte
/// count and one digest per algorithm, in input order.
pub fn digest_reader<R: Read>(mut reader: R, algorithms: &[DigestAlgorithm]) -> io::Result<(u64, Vec<Digest>)> {
    let mut hashers: Vec<Hasher> = algorithms.iter().map(|a| Hasher::new(*a)).collect();
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        total += n as u64;
        for h in &mut hashers {
            h.update(&buf[..n]);
        }
    }
    Ok((total, hashers.into_iter().map(Hasher::finish).collect()))
}

pub fn digest_file(path: &Path, algorithms: &[DigestAlgorithm]) -> io::Result<(u64, Vec<Digest>)> {
    digest_reader(File::open(path)?, algorithms)
}

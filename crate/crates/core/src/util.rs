//! Small shared helpers: CRC32, atomic file writes, config hashing, RNG
//! derivation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{BcafError, Result};

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), as used by zip/png.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Write `data` to `path` atomically (temp file in the same directory, then
/// rename over the destination).
pub fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| BcafError::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| BcafError::io(tmp.display().to_string(), e))?;
        f.write_all(data).map_err(|e| BcafError::io(tmp.display().to_string(), e))?;
        f.sync_all().map_err(|e| BcafError::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| BcafError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a whole file, mapping errors to `BcafError::Io` with the path.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BcafError::io(path.display().to_string(), e))
}

/// Hex-encoded SHA-256 of `bytes`, truncated to 16 chars. Used for config
/// hashes in run manifests and result tables.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(16);
    for b in digest.iter().take(8) {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Derive an independent RNG stream from a base seed and a list of stream
/// indices (e.g. (seed, epoch, sample)). SHA-256 mixing keeps streams
/// uncorrelated regardless of index structure.
pub fn derive_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for s in stream {
        hasher.update(s.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

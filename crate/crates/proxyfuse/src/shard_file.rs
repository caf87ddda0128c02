//! Shard-set file format: plain-text header, binary payload, sha256 trailer.
//!
//! The header echoes the generating spec for human inspection; the payload
//! carries the authoritative bit-exact data. Round-trips are byte-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::synthetic::{ConflictPair, DatasetShard, IdentityBank, SampleRecord, ShardSet, SplitSpec};

pub const SHARD_MAGIC: &str = "PROXYFUSE-SHARDS";
pub const SHARD_VERSION: u32 = 1;

const MAX_COUNT: u64 = 1 << 33;

fn encode_payload(set: &ShardSet) -> Vec<u8> {
    let mut w = ByteWriter::new();
    // spec
    w.put_u64(set.spec.n_identities as u64);
    w.put_u64(set.spec.k as u64);
    w.put_f64(set.spec.r);
    w.put_u8(u8::from(set.spec.duplicate_images));
    w.put_u64(set.spec.images_per_identity as u64);
    w.put_f64(set.spec.noise_sigma);
    w.put_f64(set.spec.domain_shift_mag);
    w.put_u64(set.spec.seed);
    // bank
    w.put_u64(set.bank.dim as u64);
    w.put_u64(set.bank.seed);
    w.put_u64(set.bank.len() as u64);
    for d in set.bank.directions() {
        w.put_f64s(d);
    }
    // shards
    w.put_u64(set.shards.len() as u64);
    for s in &set.shards {
        w.put_u32(s.dataset_id);
        w.put_f64s(&s.domain_shift);
        w.put_u64(s.classes.len() as u64);
        for &(_, gt) in &s.classes {
            w.put_u32(gt);
        }
        w.put_u64(s.samples.len() as u64);
        for r in &s.samples {
            w.put_u64(r.sample_id);
            w.put_u32(r.gt_identity);
            w.put_u32(r.local_class_id);
            w.put_u64(r.image_uid);
            w.put_f64s(&r.feature);
        }
    }
    // conflicts
    w.put_u64(set.conflicts.len() as u64);
    for c in &set.conflicts {
        w.put_u32(c.gt_identity);
        w.put_u32(c.shard_a);
        w.put_u32(c.local_class_a);
        w.put_u32(c.shard_b);
        w.put_u32(c.local_class_b);
    }
    w.into_inner()
}

fn decode_payload(buf: &[u8]) -> Result<ShardSet> {
    let mut r = ByteReader::new(buf);
    let spec = SplitSpec {
        n_identities: r.get_count(MAX_COUNT, "identity")?,
        k: r.get_count(MAX_COUNT, "subset")?,
        r: r.get_f64()?,
        duplicate_images: r.get_u8()? != 0,
        images_per_identity: r.get_count(MAX_COUNT, "images-per-identity")?,
        noise_sigma: r.get_f64()?,
        domain_shift_mag: r.get_f64()?,
        seed: r.get_u64()?,
    };
    let dim = r.get_count(MAX_COUNT, "dim")?;
    let bank_seed = r.get_u64()?;
    let n = r.get_count(MAX_COUNT, "bank")?;
    let mut directions = Vec::with_capacity(n);
    for _ in 0..n {
        directions.push(r.get_f64s(dim)?);
    }
    let bank = IdentityBank::from_parts(dim, bank_seed, directions);

    let n_shards = r.get_count(MAX_COUNT, "shard")?;
    let mut shards = Vec::with_capacity(n_shards);
    for _ in 0..n_shards {
        let dataset_id = r.get_u32()?;
        let domain_shift = r.get_f64s(dim)?;
        let n_classes = r.get_count(MAX_COUNT, "class")?;
        let mut classes = Vec::with_capacity(n_classes);
        for local in 0..n_classes {
            classes.push((local as u32, r.get_u32()?));
        }
        let n_samples = r.get_count(MAX_COUNT, "sample")?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            samples.push(SampleRecord {
                sample_id: r.get_u64()?,
                gt_identity: r.get_u32()?,
                local_class_id: r.get_u32()?,
                image_uid: r.get_u64()?,
                feature: r.get_f64s(dim)?,
            });
        }
        shards.push(DatasetShard {
            dataset_id,
            classes,
            samples,
            domain_shift,
        });
    }

    let n_conflicts = r.get_count(MAX_COUNT, "conflict")?;
    let mut conflicts = Vec::with_capacity(n_conflicts);
    for _ in 0..n_conflicts {
        conflicts.push(ConflictPair {
            gt_identity: r.get_u32()?,
            shard_a: r.get_u32()?,
            local_class_a: r.get_u32()?,
            shard_b: r.get_u32()?,
            local_class_b: r.get_u32()?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after shard payload",
            r.remaining()
        )));
    }
    Ok(ShardSet {
        bank,
        spec,
        shards,
        conflicts,
    })
}

/// Serializes a shard set to bytes: header, payload, sha256(payload).
pub fn shard_set_to_bytes(set: &ShardSet) -> Vec<u8> {
    let payload = encode_payload(set);
    let digest = Sha256::digest(&payload);
    let header = format!(
        "{SHARD_MAGIC} v{SHARD_VERSION}\n\
         dim={}\nn_identities={}\nn_shards={}\nk={}\nr={}\nduplicate_images={}\n\
         images_per_identity={}\nnoise_sigma={}\ndomain_shift_mag={}\nseed={}\n\
         n_conflicts={}\npayload_bytes={}\nend-header\n",
        set.bank.dim,
        set.spec.n_identities,
        set.shards.len(),
        set.spec.k,
        set.spec.r,
        set.spec.duplicate_images,
        set.spec.images_per_identity,
        set.spec.noise_sigma,
        set.spec.domain_shift_mag,
        set.spec.seed,
        set.conflicts.len(),
        payload.len(),
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out.extend_from_slice(&digest);
    out
}

/// Parses bytes produced by [`shard_set_to_bytes`].
pub fn shard_set_from_bytes(bytes: &[u8]) -> Result<ShardSet> {
    let (payload, _) = split_checked(bytes, SHARD_MAGIC, SHARD_VERSION)?;
    decode_payload(payload)
}

/// Validates magic, version, declared payload length, and checksum, and
/// returns (payload, header text). Shared by every checksummed format.
pub(crate) fn split_checked<'a>(
    bytes: &'a [u8],
    magic: &str,
    version: u32,
) -> Result<(&'a [u8], &'a str)> {
    let end_marker = b"end-header\n";
    let header_end = find_subslice(bytes, end_marker)
        .ok_or_else(|| Error::Format("missing end-header marker".into()))?
        + end_marker.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("header is not utf-8".into()))?;
    let first = header.lines().next().unwrap_or("");
    let (got_magic, got_version) = first
        .rsplit_once(" v")
        .ok_or_else(|| Error::Format(format!("bad magic line {first:?}")))?;
    if got_magic != magic {
        return Err(Error::Format(format!(
            "bad magic {got_magic:?}, expected {magic:?}"
        )));
    }
    let found: u32 = got_version
        .parse()
        .map_err(|_| Error::Format(format!("unparseable version in {first:?}")))?;
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let payload_bytes: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("payload_bytes="))
        .ok_or_else(|| Error::Format("header missing payload_bytes".into()))?
        .parse()
        .map_err(|_| Error::Format("unparseable payload_bytes".into()))?;
    let need = header_end + payload_bytes + 32;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "file truncated: {} bytes, header promises {need}",
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - need
        )));
    }
    let payload = &bytes[header_end..header_end + payload_bytes];
    let stored = &bytes[header_end + payload_bytes..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::Checksum);
    }
    Ok((payload, header))
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn write_shards<P: AsRef<Path>>(set: &ShardSet, path: P) -> Result<()> {
    fs::write(path, shard_set_to_bytes(set))?;
    Ok(())
}

pub fn read_shards<P: AsRef<Path>>(path: P) -> Result<ShardSet> {
    let bytes = fs::read(path)?;
    shard_set_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_identity_bank, split_with_overlap};

    fn sample_set() -> ShardSet {
        let bank = gen_identity_bank(20, 8, 4).unwrap();
        let spec = SplitSpec {
            n_identities: 20,
            k: 4,
            r: 0.2,
            duplicate_images: false,
            images_per_identity: 2,
            noise_sigma: 0.15,
            domain_shift_mag: 0.05,
            seed: 21,
        };
        split_with_overlap(&bank, &spec).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let set = sample_set();
        let bytes = shard_set_to_bytes(&set);
        let back = shard_set_from_bytes(&bytes).unwrap();
        assert_eq!(set, back);
        // re-serialization reproduces the same bytes
        assert_eq!(bytes, shard_set_to_bytes(&back));
    }

    #[test]
    fn truncation_is_detected() {
        let set = sample_set();
        let bytes = shard_set_to_bytes(&set);
        for cut in [bytes.len() - 1, bytes.len() - 40, bytes.len() / 2] {
            let err = shard_set_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Format(_) | Error::Checksum),
                "cut={cut} gave {err}"
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let set = sample_set();
        let mut bytes = shard_set_to_bytes(&set);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = shard_set_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checksum | Error::Format(_)));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let set = sample_set();
        let bytes = shard_set_to_bytes(&set);
        let text = String::from_utf8_lossy(&bytes[..64]).into_owned();
        assert!(text.starts_with("PROXYFUSE-SHARDS v1\n"));
        let mut bumped = bytes.clone();
        // "PROXYFUSE-SHARDS v1" -> v2
        let pos = "PROXYFUSE-SHARDS v".len();
        bumped[pos] = b'2';
        let err = shard_set_from_bytes(&bumped).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, expected: 1 }));
    }

    #[test]
    fn file_round_trip() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.pfd");
        write_shards(&set, &path).unwrap();
        let back = read_shards(&path).unwrap();
        assert_eq!(set, back);
    }
}

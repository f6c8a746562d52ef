//! Dataset file format: JSON header + checksummed binary payload.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "OFPXDATA"
//! version    u32
//! header_len u64
//! header     UTF-8 JSON (DatasetHeader)
//! payload    per episode, in header order:
//!              frames   (len+1) * size * size * 3  u8
//!              actions  len * action_dim           f64 LE
//!              rewards  len                        f64 LE
//! ```
//!
//! The header stores a SHA-256 of the payload section, so the file carries
//! its own integrity check without any chicken-and-egg problem (the hash
//! covers only bytes after the header). Loading re-verifies the checksum,
//! every header-vs-content consistency invariant, and that the file ends
//! exactly where the header says it should.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, Dataset, DatasetHeader, EpisodeRecord};

/// File magic identifying dataset files.
pub const DATA_MAGIC: &[u8; 8] = b"OFPXDATA";
/// Current dataset format version.
pub const DATA_FORMAT_VERSION: u32 = 1;

/// Serializes a dataset to `path`. The write is deterministic: the same
/// in-memory dataset always produces identical bytes.
pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if dataset.episodes.is_empty() {
        return Err(DataError::Empty);
    }
    verify_consistency(&dataset.header, &dataset.episodes)?;

    let mut hasher = Sha256::new();
    for ep in &dataset.episodes {
        hasher.update(&ep.frames);
        hasher.update(le_bytes(&ep.actions));
        hasher.update(le_bytes(&ep.rewards));
    }
    let mut header = dataset.header.clone();
    header.format_version = DATA_FORMAT_VERSION;
    header.payload_sha256 = hex(&hasher.finalize());
    let header_json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for ep in &dataset.episodes {
        w.write_all(&ep.frames)?;
        w.write_all(&le_bytes(&ep.actions))?;
        w.write_all(&le_bytes(&ep.rewards))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset back, verifying magic, version, payload checksum, exact
/// file length, and header-vs-content consistency.
pub fn load(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0_u8; 8];
    read_or_truncated(&mut r, &mut magic, "magic")?;
    if &magic != DATA_MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut word = [0_u8; 4];
    read_or_truncated(&mut r, &mut word, "format version")?;
    let version = u32::from_le_bytes(word);
    if version != DATA_FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: DATA_FORMAT_VERSION,
        });
    }
    let mut long = [0_u8; 8];
    read_or_truncated(&mut r, &mut long, "header length")?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut header_json = vec![0_u8; header_len];
    read_or_truncated(&mut r, &mut header_json, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&header_json)?;
    if header.format_version != version {
        return Err(DataError::HeaderMismatch(format!(
            "file version {version} but header says {}",
            header.format_version
        )));
    }

    let mut hasher = Sha256::new();
    let mut episodes = Vec::with_capacity(header.episodes.len());
    for (i, meta) in header.episodes.iter().enumerate() {
        let cfg = header.envs.get(meta.env_idx).ok_or_else(|| {
            DataError::HeaderMismatch(format!(
                "episode {i} points at environment {} but only {} are declared",
                meta.env_idx,
                header.envs.len()
            ))
        })?;
        let frame_len = cfg.render_size * cfg.render_size * 3;
        let mut frames = vec![0_u8; (meta.len + 1) * frame_len];
        read_or_truncated(&mut r, &mut frames, &format!("episode {i} frames"))?;
        hasher.update(&frames);
        let actions = read_f64s(
            &mut r,
            meta.len * cfg.task.action_dim(),
            &mut hasher,
            i,
            "actions",
        )?;
        let rewards = read_f64s(&mut r, meta.len, &mut hasher, i, "rewards")?;
        episodes.push(EpisodeRecord {
            env_idx: meta.env_idx,
            seed: meta.seed,
            frames,
            actions,
            rewards,
        });
    }
    let mut trailing = [0_u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DataError::HeaderMismatch(
            "file has trailing bytes after the last episode".into(),
        ));
    }
    let actual = hex(&hasher.finalize());
    if actual != header.payload_sha256 {
        return Err(DataError::ChecksumMismatch {
            header: header.payload_sha256.clone(),
            actual,
        });
    }
    verify_consistency(&header, &episodes)?;
    Ok(Dataset { header, episodes })
}

/// Header-vs-content invariants shared by `save` and `load`.
fn verify_consistency(header: &DatasetHeader, episodes: &[EpisodeRecord]) -> Result<(), DataError> {
    if header.episodes.len() != episodes.len() {
        return Err(DataError::HeaderMismatch(format!(
            "header lists {} episodes but content has {}",
            header.episodes.len(),
            episodes.len()
        )));
    }
    let total: usize = episodes.iter().map(EpisodeRecord::len).sum();
    if header.transition_count != total {
        return Err(DataError::HeaderMismatch(format!(
            "header claims {} transitions but episode lengths sum to {total}",
            header.transition_count
        )));
    }
    for (i, (meta, ep)) in header.episodes.iter().zip(episodes).enumerate() {
        if meta.len != ep.len() || meta.seed != ep.seed || meta.env_idx != ep.env_idx {
            return Err(DataError::HeaderMismatch(format!(
                "episode {i} metadata does not match its record"
            )));
        }
        if meta.ep_return != ep.ep_return() {
            return Err(DataError::HeaderMismatch(format!(
                "episode {i} return: header says {} but rewards sum to {}",
                meta.ep_return,
                ep.ep_return()
            )));
        }
    }
    let returns: Vec<f64> = episodes.iter().map(EpisodeRecord::ep_return).collect();
    let recomputed = super::ReturnStats::compute(&returns)?;
    if recomputed != header.stats {
        return Err(DataError::HeaderMismatch(format!(
            "stored statistics {:?} differ from statistics recomputed from episodes {recomputed:?}",
            header.stats
        )));
    }
    Ok(())
}

fn le_bytes(xs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn read_f64s<R: Read>(
    r: &mut R,
    count: usize,
    hasher: &mut Sha256,
    episode: usize,
    what: &str,
) -> Result<Vec<f64>, DataError> {
    let mut bytes = vec![0_u8; count * 8];
    read_or_truncated(r, &mut bytes, &format!("episode {episode} {what}"))?;
    hasher.update(&bytes);
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated(format!("file ends inside {what}"))
        } else {
            DataError::Io(e)
        }
    })
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, BehavioralPolicy, Distribution};
    use crate::env::{EnvConfig, Task};

    fn small_dataset() -> Dataset {
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.episode_len = 50;
        cfg.render_size = 16;
        collect(
            &cfg,
            &BehavioralPolicy::Random,
            150,
            17,
            Distribution::Random,
        )
        .unwrap()
    }

    fn payload_offset(bytes: &[u8]) -> usize {
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        20 + header_len
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        let p1 = dir.path().join("a.ofpx");
        let p2 = dir.path().join("b.ofpx");
        save(&ds, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.episodes, ds.episodes);
        assert_eq!(loaded.header.stats, ds.header.stats);
        save(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(
            b1, b2,
            "save -> load -> save must reproduce identical bytes"
        );
    }

    #[test]
    fn same_seed_same_bytes_different_seed_different_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EnvConfig::new(Task::Pointmass);
        cfg.episode_len = 50;
        cfg.render_size = 16;
        let mut paths = Vec::new();
        for (name, seed) in [("a", 5_u64), ("b", 5), ("c", 6)] {
            let ds = collect(
                &cfg,
                &BehavioralPolicy::Random,
                100,
                seed,
                Distribution::Random,
            )
            .unwrap();
            let p = dir.path().join(name);
            save(&ds, &p).unwrap();
            paths.push(std::fs::read(&p).unwrap());
        }
        assert_eq!(paths[0], paths[1]);
        assert_ne!(paths[0], paths[2]);
    }

    #[test]
    fn flipped_frame_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ofpx");
        save(&small_dataset(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let off = payload_offset(&bytes) + 10; // well inside episode 0's frames
        bytes[off] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(DataError::ChecksumMismatch { .. })));
    }

    #[test]
    fn edited_header_count_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ofpx");
        save(&small_dataset(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes[..payload_offset(&bytes)]).into_owned();
        assert!(text.contains("\"transition_count\":150"));
        let patched = replace_once(
            &bytes,
            b"\"transition_count\":150",
            b"\"transition_count\":151",
        );
        std::fs::write(&p, &patched).unwrap();
        match load(&p) {
            Err(DataError::HeaderMismatch(msg)) => {
                assert!(msg.contains("151") && msg.contains("150"), "got: {msg}");
            }
            other => panic!("expected HeaderMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_reported_as_such() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ofpx");
        save(&small_dataset(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&p), Err(DataError::Truncated(_))));
    }

    #[test]
    fn wrong_version_and_magic_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ofpx");
        save(&small_dataset(), &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[8] = 99; // version word
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load(&p),
            Err(DataError::Version { found: 99, .. })
        ));

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(DataError::BadMagic)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.ofpx");
        save(&small_dataset(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(DataError::HeaderMismatch(_))));
    }

    #[test]
    fn empty_dataset_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::empty(Distribution::Random, EnvConfig::new(Task::Pointmass));
        assert!(matches!(
            save(&ds, &dir.path().join("x")),
            Err(DataError::Empty)
        ));
    }

    /// Replaces the first occurrence of `from` with `to` (header patching).
    fn replace_once(bytes: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let pos = bytes
            .windows(from.len())
            .position(|w| w == from)
            .expect("pattern present in file");
        let mut out = bytes[..pos].to_vec();
        out.extend_from_slice(to);
        out.extend_from_slice(&bytes[pos + from.len()..]);
        out
    }
}

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Datastore, DatastoreManifest, FORMAT_VERSION};

pub const CHUNKS_FILE: &str = "chunks.bin";
pub const EMBEDS_FILE: &str = "embeds.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const CHUNKS_MAGIC: &[u8; 4] = b"RTCK";
const EMBEDS_MAGIC: &[u8; 4] = b"RTEM";

/// Bytes before the first record in `chunks.bin`.
pub const CHUNKS_HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(super) fn encode_chunks(ds: &Datastore) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHUNKS_HEADER_LEN + ds.records.len() * 4);
    out.extend_from_slice(CHUNKS_MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(ds.config.chunk_size as u32).unwrap();
    out.write_u64::<LittleEndian>(ds.len() as u64).unwrap();
    for &t in &ds.records {
        out.write_u32::<LittleEndian>(t).unwrap();
    }
    out
}

pub(super) fn encode_embeds(ds: &Datastore) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.embeddings.len() * 4);
    out.extend_from_slice(EMBEDS_MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(ds.config.embed_dim as u32).unwrap();
    out.write_u64::<LittleEndian>(ds.len() as u64).unwrap();
    for &v in &ds.embeddings {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(super) fn save(ds: &Datastore, dir: &Path) -> Result<DatastoreManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let chunks = encode_chunks(ds);
    let embeds = encode_embeds(ds);
    let manifest = ds.manifest_with(&chunks, &embeds);
    write(&dir.join(CHUNKS_FILE), &chunks)?;
    write(&dir.join(EMBEDS_FILE), &embeds)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    write(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn read_header(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], what: &str) -> Result<(u32, u64)> {
    let bad = |m: &str| Error::Format(format!("{what}: {m}"));
    let mut got = [0u8; 4];
    cur.read_exact(&mut got).map_err(|_| bad("truncated header"))?;
    if &got != magic {
        return Err(bad("bad magic"));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let width = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let n = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    Ok((width, n))
}

pub(super) fn open(dir: &Path) -> Result<Datastore> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let manifest: DatastoreManifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
    let chunks = read(CHUNKS_FILE)?;
    let embeds = read(EMBEDS_FILE)?;
    for (name, bytes) in [(CHUNKS_FILE, &chunks), (EMBEDS_FILE, &embeds)] {
        if manifest.checksums.get(name) != Some(&sha256_hex(bytes)) {
            return Err(Error::Integrity(format!("checksum mismatch for {name}")));
        }
    }

    let mut cur = Cursor::new(chunks.as_slice());
    let (m, n) = read_header(&mut cur, CHUNKS_MAGIC, CHUNKS_FILE)?;
    if m as usize != manifest.config.chunk_size || n != manifest.num_chunks {
        return Err(Error::Format("chunks.bin header disagrees with manifest".into()));
    }
    let count = n as usize * 2 * m as usize;
    let mut records = vec![0u32; count];
    cur.read_u32_into::<LittleEndian>(&mut records)
        .map_err(|_| Error::Format("chunks.bin truncated".into()))?;

    let mut cur = Cursor::new(embeds.as_slice());
    let (d, n2) = read_header(&mut cur, EMBEDS_MAGIC, EMBEDS_FILE)?;
    if d as usize != manifest.config.embed_dim || n2 != n {
        return Err(Error::Format("embeds.bin header disagrees with manifest".into()));
    }
    let mut embeddings = vec![0f32; n as usize * d as usize];
    cur.read_f32_into::<LittleEndian>(&mut embeddings)
        .map_err(|_| Error::Format("embeds.bin truncated".into()))?;

    Ok(Datastore {
        config: manifest.config,
        records,
        embeddings,
        docs: manifest.docs,
    })
}

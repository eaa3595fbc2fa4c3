//! `index.bin`: little-endian, length-prefixed serialization of a trained index.

use std::collections::{HashMap, HashSet};
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::atomic::AtomicUsize;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::{AnnIndex, CoarseQuantizer, Hnsw, IndexConfig, InvertedLists, OpqRotation, PqCodebook, StoredVectors};

const MAGIC: &[u8; 4] = b"RTIX";
const VERSION: u32 = 1;

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.write_u64::<LE>(v.len() as u64).unwrap();
    for &x in v {
        out.write_f32::<LE>(x).unwrap();
    }
}

pub(super) fn encode(idx: &AnnIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    let c = &idx.config;
    {
        let v = c.ncentroids as u64;
        out.write_u64::<LE>(v).unwrap();
    }
    out.write_u32::<LE>(c.m_sub as u32).unwrap();
    out.write_u32::<LE>(c.bits_per_code).unwrap();
    for v in [
        c.nprobe_default,
        c.hnsw_degree,
        c.hnsw_ef_construction,
        c.hnsw_ef_search,
        c.rerank_r,
    ] {
        out.write_u64::<LE>(v as u64).unwrap();
    }
    out.write_u8(u8::from(c.store_vectors)).unwrap();
    for v in [c.kmeans_iters, c.opq_iters, c.pq_iters, c.max_train] {
        out.write_u64::<LE>(v as u64).unwrap();
    }
    out.write_u64::<LE>(c.seed).unwrap();
    out.write_u32::<LE>(idx.dim as u32).unwrap();

    put_f32s(&mut out, &idx.coarse.centroids);
    let g = &idx.coarse.hnsw;
    out.write_u32::<LE>(g.entry).unwrap();
    out.write_u32::<LE>(g.max_level as u32).unwrap();
    out.write_u32::<LE>(g.degree as u32).unwrap();
    out.write_u64::<LE>(g.links.len() as u64).unwrap();
    for node in &g.links {
        out.write_u32::<LE>(node.len() as u32).unwrap();
        for level in node {
            out.write_u32::<LE>(level.len() as u32).unwrap();
            for &nb in level {
                out.write_u32::<LE>(nb).unwrap();
            }
        }
    }

    out.write_u64::<LE>(idx.rotation.matrix.len() as u64).unwrap();
    for &x in &idx.rotation.matrix {
        out.write_f64::<LE>(x).unwrap();
    }

    out.write_u32::<LE>(idx.pq.m_sub as u32).unwrap();
    out.write_u32::<LE>(idx.pq.bits).unwrap();
    out.write_u32::<LE>(idx.pq.dsub as u32).unwrap();
    put_f32s(&mut out, &idx.pq.centroids);

    out.write_u64::<LE>(idx.lists.nlist() as u64).unwrap();
    out.write_u32::<LE>(idx.lists.code_len as u32).unwrap();
    for (ids, codes) in idx.lists.ids.iter().zip(&idx.lists.codes) {
        out.write_u64::<LE>(ids.len() as u64).unwrap();
        for &id in ids {
            out.write_u64::<LE>(id).unwrap();
        }
        out.extend_from_slice(codes);
    }

    match &idx.stored {
        None => out.write_u8(0).unwrap(),
        Some(st) => {
            out.write_u8(1).unwrap();
            out.write_u64::<LE>(st.ids.len() as u64).unwrap();
            for &id in &st.ids {
                out.write_u64::<LE>(id).unwrap();
            }
            put_f32s(&mut out, &st.data);
        }
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn err() -> Error {
        Error::Format("index.bin truncated".into())
    }
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(|_| Self::err())
    }
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(|_| Self::err())
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(|_| Self::err())
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n.saturating_mul(elem) > remaining {
            return Err(Self::err());
        }
        Ok(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        let mut v = vec![0f32; n];
        self.0.read_f32_into::<LE>(&mut v).map_err(|_| Self::err())?;
        Ok(v)
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<AnnIndex> {
    let mut r = Reader(Cursor::new(bytes));
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic).map_err(|_| Reader::err())?;
    if &magic != MAGIC {
        return Err(Error::Format("index.bin: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("index.bin: unsupported version {version}")));
    }
    let ncentroids = r.usize()?;
    let m_sub = r.u32()? as usize;
    let bits_per_code = r.u32()?;
    let config = IndexConfig {
        ncentroids,
        m_sub,
        bits_per_code,
        nprobe_default: r.usize()?,
        hnsw_degree: r.usize()?,
        hnsw_ef_construction: r.usize()?,
        hnsw_ef_search: r.usize()?,
        rerank_r: r.usize()?,
        store_vectors: r.u8()? != 0,
        kmeans_iters: r.usize()?,
        opq_iters: r.usize()?,
        pq_iters: r.usize()?,
        max_train: r.usize()?,
        seed: r.u64()?,
    };
    let dim = r.u32()? as usize;
    config.validate(dim)?;

    let centroids = r.f32s()?;
    let entry = r.u32()?;
    let max_level = r.u32()? as usize;
    let degree = r.u32()? as usize;
    let nodes = r.len(4)?;
    let mut links = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let levels = r.u32()? as usize;
        let mut node = Vec::with_capacity(levels);
        for _ in 0..levels {
            let cnt = r.u32()? as usize;
            node.push((0..cnt).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?);
        }
        links.push(node);
    }
    if centroids.len() != ncentroids * dim || links.len() != ncentroids {
        return Err(Error::Format("index.bin: coarse quantizer size mismatch".into()));
    }

    let rn = r.len(8)?;
    let matrix = (0..rn)
        .map(|_| r.0.read_f64::<LE>().map_err(|_| Reader::err()))
        .collect::<Result<Vec<f64>>>()?;
    let rotation = OpqRotation::from_matrix(dim, matrix)?;

    let pq = PqCodebook {
        m_sub: r.u32()? as usize,
        bits: r.u32()?,
        dsub: r.u32()? as usize,
        centroids: r.f32s()?,
    };
    if pq.centroids.len() != pq.m_sub * pq.ksub() * pq.dsub || pq.dim() != dim {
        return Err(Error::Format("index.bin: PQ codebook size mismatch".into()));
    }

    let nlist = r.usize()?;
    let code_len = r.u32()? as usize;
    let mut lists = InvertedLists::new(nlist, code_len);
    let mut id_set = HashSet::new();
    for l in 0..nlist {
        let n = r.len(8 + code_len)?;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
        let mut codes = vec![0u8; n * code_len];
        r.0.read_exact(&mut codes).map_err(|_| Reader::err())?;
        id_set.extend(ids.iter().copied());
        lists.ids[l] = ids;
        lists.codes[l] = codes;
    }

    let stored = match r.u8()? {
        0 => None,
        _ => {
            let n = r.len(8)?;
            let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
            let data = r.f32s()?;
            if data.len() != n * dim {
                return Err(Error::Format("index.bin: stored vector size mismatch".into()));
            }
            let row_of: HashMap<u64, u32> = ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
            Some(StoredVectors { ids, data, row_of })
        }
    };

    Ok(AnnIndex {
        config,
        dim,
        rotation,
        coarse: CoarseQuantizer {
            dim,
            centroids,
            hnsw: Hnsw {
                links,
                entry,
                max_level,
                degree,
            },
        },
        pq,
        lists,
        stored,
        ids: id_set,
        probes: AtomicUsize::new(0),
    })
}

pub(super) fn save(idx: &AnnIndex, path: &Path) -> Result<String> {
    let bytes = encode(idx);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(crate::datastore::sha256_hex(&bytes))
}

pub(super) fn load(path: &Path) -> Result<AnnIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

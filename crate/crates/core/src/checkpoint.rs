//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "TLATTN01", version u32,
//!   config block (u32 byte length, then UTF-8 key=value lines),
//!   tensor table (u32 count, then per tensor: u32 name length, name bytes,
//!   u8 dtype (0 = f32, 1 = f64), u8 rank, u32 dims, raw element bytes),
//!   RNG state (32-byte ChaCha8 seed, u128 stream position),
//!   CRC32 over everything before it.
//!
//! Optimizer momentum is stored as ordinary tensors named
//! "momentum.<param>". Loading verifies the checksum before trusting any
//! length field it already consumed.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 8] = b"TLATTN01";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<E: Element> {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<E>)>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

pub fn rng_state(rng: &ChaCha8Rng) -> ([u8; 32], u128) {
    (rng.get_seed(), rng.get_word_pos())
}

pub fn rng_from_state(seed: [u8; 32], word_pos: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng
}

fn corrupt(detail: impl Into<String>) -> DataError {
    DataError::Checkpoint {
        detail: detail.into(),
    }
}

impl<E: Element> Checkpoint<E> {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut cfg = String::new();
        for (k, v) in &self.config {
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(E::DTYPE.to_u8());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let bytes = self.encode();
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| DataError::io(&tmp, e))?;
        f.sync_all().map_err(|e| DataError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<E>, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(corrupt(format!("file is only {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(corrupt(format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }

        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }

        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text =
            std::str::from_utf8(cfg_bytes).map_err(|_| corrupt("config block is not UTF-8"))?;
        let mut config = Vec::new();
        for line in cfg_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("config line without '=': {line}")))?;
            config.push((k.to_string(), v.to_string()));
        }

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let dtype = Dtype::from_u8(r.u8()?)
                .ok_or_else(|| corrupt(format!("unknown dtype for tensor {name}")))?;
            if dtype != E::DTYPE {
                return Err(corrupt(format!(
                    "tensor {name} is {dtype:?}, expected {:?}",
                    E::DTYPE
                )));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * E::DTYPE.size_bytes())?;
            let data: Vec<E> = raw
                .chunks_exact(E::DTYPE.size_bytes())
                .map(E::from_le_slice)
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }

        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != body.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after RNG state",
                body.len() - r.pos
            )));
        }

        Ok(Checkpoint {
            config,
            tensors,
            rng_seed,
            rng_word_pos,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt(format!(
                "truncated at byte {}, needed {n} more",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_identical;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t1 = Tensor::from_vec(
            &[2, 3],
            (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let t2 = Tensor::from_vec(&[4], vec![0.0f32, -1.5, 3.25, f32::MIN_POSITIVE]).unwrap();
        let _ = rng.random_range(0..100u32);
        let (seed, pos) = rng_state(&rng);
        Checkpoint {
            config: vec![
                ("model.hidden".into(), "12".into()),
                ("stage".into(), "2".into()),
            ],
            tensors: vec![("a.w".into(), t1), ("momentum.a.w".into(), t2)],
            rng_seed: seed,
            rng_word_pos: pos,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back: Checkpoint<f32> = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.config, back.config);
        assert_eq!(ck.tensors.len(), back.tensors.len());
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(bit_identical(t1, t2));
        }
        assert_eq!(ck.rng_seed, back.rng_seed);
        assert_eq!(ck.rng_word_pos, back.rng_word_pos);
        // Saving the loaded copy reproduces identical bytes.
        let path2 = dir.path().join("test2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn rng_resumes_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _burn: u64 = rng.random();
        let (seed, pos) = rng_state(&rng);
        let mut resumed = rng_from_state(seed, pos);
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
        }
    }

    #[test]
    fn corruption_is_detected_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match Checkpoint::<f32>::load(&path) {
            Err(DataError::Checkpoint { detail }) => {
                assert!(detail.contains("checksum"), "detail: {detail}")
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        sample().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&path),
            Err(DataError::Checkpoint { .. })
        ));

        // Valid CRC over garbage content: flip magic and re-append CRC.
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[0] = b'X';
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        fs::write(&path, &body).unwrap();
        match Checkpoint::<f32>::load(&path) {
            Err(DataError::Checkpoint { detail }) => {
                assert!(detail.contains("magic"), "detail: {detail}")
            }
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        sample().save(&path).unwrap();
        match Checkpoint::<f64>::load(&path) {
            Err(DataError::Checkpoint { detail }) => {
                assert!(detail.contains("expected"), "detail: {detail}")
            }
            other => panic!("expected dtype error, got {other:?}"),
        }
    }
}

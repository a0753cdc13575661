//! Parameter checkpoints: a text manifest followed by a little-endian blob.
//!
//! ```text
//! ssmkt-ckpt-v1
//! dtype f64
//! tensors 2
//! embed.concept 10,128 0 1280
//! head.b 1 1280 1
//! end
//! <raw bytes>
//! ```
//! Each tensor line is `name dims offset len`, offsets and lengths counted
//! in elements.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Float;
use crate::tensor::Tensor;

pub const MAGIC: &str = "ssmkt-ckpt-v1";

pub fn encode<F: Float>(store: &ParamStore<F>) -> Vec<u8> {
    let mut head = format!("{MAGIC}\ndtype {}\ntensors {}\n", F::DTYPE, store.len());
    let mut blob = Vec::with_capacity(store.num_scalars() * F::BYTES);
    let mut offset = 0;
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!(
            "{} {} {offset} {}\n",
            p.name,
            dims.join(","),
            p.value.len()
        ));
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        offset += p.value.len();
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    out
}

/// Decodes into a store of any float type, converting through `f64` when
/// the stored type differs.
pub fn decode<F: Float>(bytes: &[u8]) -> Result<ParamStore<F>> {
    let bad = |m: String| Error::Checkpoint(m);
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("manifest has no end marker".into()))?;
    let manifest =
        std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let blob = &bytes[end + 5..];
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("not a checkpoint (expected {MAGIC} header)")));
    }
    let dtype = lines
        .next()
        .and_then(|l| l.strip_prefix("dtype "))
        .ok_or_else(|| bad("missing dtype".into()))?;
    let width = match dtype {
        "f64" => 8,
        "f32" => 4,
        other => return Err(bad(format!("unsupported dtype {other}"))),
    };
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("tensors "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing tensor count".into()))?;
    let total = blob.len() / width;
    if !blob.len().is_multiple_of(width) {
        return Err(bad(
            "blob length is not a multiple of the element size".into()
        ));
    }
    let read = |i: usize| -> F {
        let b = &blob[i * width..(i + 1) * width];
        match width {
            8 => F::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())),
            _ => F::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64),
        }
    };
    let mut store = ParamStore::new();
    for line in lines.by_ref().take(count) {
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, dims, offset, len] = parts[..] else {
            return Err(bad(format!("malformed tensor line {line:?}")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("bad offset in {line:?}")))?;
        let len: usize = len
            .parse()
            .map_err(|_| bad(format!("bad length in {line:?}")))?;
        if offset.checked_add(len).is_none_or(|e| e > total) {
            return Err(bad(format!("tensor {name} runs past the end of the blob")));
        }
        let data = (offset..offset + len).map(read).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if store.find(name).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        store.add(name, t);
    }
    if store.len() != count || lines.next().is_some() {
        return Err(bad(format!(
            "manifest lists {} tensors, header says {count}",
            store.len()
        )));
    }
    Ok(store)
}

pub fn save<F: Float>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<F: Float>(path: &Path) -> Result<ParamStore<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads values into an existing store whose names and shapes must match.
pub fn restore<F: Float>(path: &Path, into: &mut ParamStore<F>) -> Result<()> {
    into.load_from(&load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(4);
        s.add_linear("a.w", 3, 5, &mut rng);
        s.add("b", Tensor::scalar(-0.0));
        s.add(
            "c",
            Tensor::from_f64(vec![2], &[f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        s
    }

    #[test]
    fn bitwise_round_trip() {
        let s = store();
        let back: ParamStore<f64> = decode(&encode(&s)).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn f32_checkpoints_load_as_f64() {
        let s = store().cast::<f32>();
        let back: ParamStore<f64> = decode(&encode(&s)).unwrap();
        assert_eq!(
            back.get(back.find("a.w").unwrap()).data()[0],
            s.get(s.find("a.w").unwrap()).data()[0] as f64
        );
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&store());
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'x';
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f64>(b"garbage").is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &store()).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.add("a.w", Tensor::zeros(vec![5, 3]));
        other.add("b", Tensor::zeros(vec![]));
        other.add("c", Tensor::zeros(vec![2]));
        assert!(restore(&p, &mut other).is_err());
    }
}

//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8B  "OFPXNET1"
//! version  u32
//! section:
//!   spec hash   32B  sha256 of NetworkSpec::describe()
//!   param count u32
//!   per param:  name len u32, name bytes,
//!               rank u32, dims u32 each,
//!               data f64 LE (bit-exact)
//! ```
//!
//! The section functions are public so larger containers (an agent holding
//! several networks) can embed one section per network behind their own
//! magic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::network::{Network, ParamTensor};
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OFPXNET1";

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), NnError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Err(NnError::Truncated(what.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Write one network's parameters (hash + shapes + raw f64 data).
pub fn write_section(
    w: &mut impl Write,
    spec_hash: &[u8; 32],
    params: &[ParamTensor],
) -> Result<(), NnError> {
    w.write_all(spec_hash)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.values.shape().len() as u32).to_le_bytes())?;
        for &d in p.values.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in p.values.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read one section into `params`, validating the architecture hash and
/// every name/shape before any data is accepted.
pub fn read_section(
    r: &mut impl Read,
    spec_hash: &[u8; 32],
    params: &mut [ParamTensor],
) -> Result<(), NnError> {
    let mut hash = [0u8; 32];
    read_exact_or(r, &mut hash, "spec hash")?;
    if &hash != spec_hash {
        return Err(NnError::SpecHashMismatch);
    }
    let count = read_u32(r, "param count")? as usize;
    if count != params.len() {
        return Err(NnError::Truncated(format!(
            "file holds {count} parameters, network has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = read_u32(r, "param name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(r, &mut name, "param name")?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Truncated("param name is not utf-8".into()))?;
        let rank = read_u32(r, "param rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "param dim")? as usize);
        }
        if name != p.name || shape != p.values.shape() {
            return Err(NnError::ParamShapeMismatch {
                name: p.name.clone(),
                expected: p.values.shape().to_vec(),
                found: shape,
            });
        }
        let mut bytes = vec![0u8; p.values.len() * 8];
        read_exact_or(r, &mut bytes, "param data")?;
        for (dst, chunk) in p.values.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        p.grad = None;
    }
    Ok(())
}

/// Save a standalone single-network checkpoint.
pub fn save_params(path: &Path, net: &Network) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_section(&mut w, &net.spec().hash(), &net.params)?;
    w.flush()?;
    Ok(())
}

/// Load a standalone checkpoint into an initialized network of the same
/// architecture.
pub fn load_params(path: &Path, net: &mut Network) -> Result<(), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = net.spec().hash();
    read_section(&mut r, &hash, &mut net.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{Activation, LayerSpec, NetworkSpec};
    use crate::nn::tensor::Tensor;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![3],
            vec![LayerSpec::Dense {
                inputs: 3,
                outputs: 2,
                activation: Activation::Tanh,
            }],
        )
    }

    /// Round-trip must preserve bit patterns exactly, including negative
    /// zero, subnormals, and huge magnitudes.
    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut a = Network::init(tiny_spec(), 1).unwrap();
        a.params[0].values = Tensor::from_vec(
            &[3, 2],
            vec![-0.0, 5e-324, 1e308, -1e-308, 0.1 + 0.2, f64::MIN_POSITIVE],
        );
        a.params[1].values = Tensor::from_vec(&[2], vec![1.0 / 3.0, -2.0 / 7.0]);
        save_params(&path, &a).unwrap();

        let mut b = Network::init(tiny_spec(), 999).unwrap();
        load_params(&path, &mut b).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            let bits_a: Vec<u64> = pa.values.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = pb.values.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {}", pa.name);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut net = Network::init(tiny_spec(), 7).unwrap();
        save_params(&p1, &net).unwrap();
        load_params(&p1, &mut net).unwrap();
        save_params(&p2, &net).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTANET1morebytesafterthat").unwrap();
        let mut net = Network::init(tiny_spec(), 1).unwrap();
        assert!(matches!(
            load_params(&path, &mut net),
            Err(NnError::BadMagic)
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let mut net = Network::init(tiny_spec(), 1).unwrap();
        match load_params(&path, &mut net) {
            Err(NnError::Version { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected Version error, got {other:?}"),
        }
    }

    #[test]
    fn different_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let a = Network::init(tiny_spec(), 1).unwrap();
        save_params(&path, &a).unwrap();
        let other_spec = NetworkSpec::new(
            vec![3],
            vec![LayerSpec::Dense {
                inputs: 3,
                outputs: 2,
                activation: Activation::Relu, // differs only in activation
            }],
        );
        let mut b = Network::init(other_spec, 1).unwrap();
        assert!(matches!(
            load_params(&path, &mut b),
            Err(NnError::SpecHashMismatch)
        ));
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let a = Network::init(tiny_spec(), 1).unwrap();
        save_params(&path, &a).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let mut b = Network::init(tiny_spec(), 2).unwrap();
        assert!(matches!(
            load_params(&path, &mut b),
            Err(NnError::Truncated(_))
        ));
    }

    #[test]
    fn mismatched_shape_in_section_is_reported() {
        let spec = tiny_spec();
        let hash = spec.hash();
        let written = vec![ParamTensor {
            name: "0.weight".into(),
            values: Tensor::zeros(&[3, 2]),
            grad: None,
        }];
        let mut buf = Vec::new();
        write_section(&mut buf, &hash, &written).unwrap();
        let mut target = vec![ParamTensor {
            name: "0.weight".into(),
            values: Tensor::zeros(&[6]),
            grad: None,
        }];
        match read_section(&mut buf.as_slice(), &hash, &mut target) {
            Err(NnError::ParamShapeMismatch {
                name,
                expected,
                found,
            }) => {
                assert_eq!(name, "0.weight");
                assert_eq!(expected, vec![6]);
                assert_eq!(found, vec![3, 2]);
            }
            other => panic!("expected ParamShapeMismatch, got {other:?}"),
        }
    }
}

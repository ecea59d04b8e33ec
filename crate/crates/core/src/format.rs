//! Binary tensor files and checkpoints.
//!
//! A tensor record is `"IRVF"`, then `C`, `H`, `W` as little-endian `u32`,
//! then `C*H*W` little-endian `f32` values in channel-major order.
//!
//! A checkpoint is `"IRVC"`, a `u32` format version, the `u64` step counter,
//! the config text (`u32` byte length + UTF-8), the parameter count (`u32`),
//! each parameter as a name (`u32` length + UTF-8) followed by a tensor
//! record, then a `u8` flag and, when set, the first- and second-moment
//! tensor records for every parameter in the same order.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"IRVF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IRVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest name or config blob accepted when reading, to reject garbage
/// lengths before allocating.
const MAX_TEXT: usize = 1 << 20;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    w.write_all(TENSOR_MAGIC)?;
    for d in [s.c, s.h, s.w] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut bytes = Vec::new();
    r.take(n as u64 * 4).read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!("tensor data holds {} bytes, expected {}", bytes.len(), n * 4)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(Shape::new(c, h, w), data)
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor record".into()));
    }
    Ok(t)
}

/// Optimizer first and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Config file text the model was trained with.
    pub config: String,
    pub params: ParamStore<f32>,
    pub moments: Option<Moments>,
}

fn write_text(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_text(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > MAX_TEXT {
        return Err(Error::Format(format!("text field of {n} bytes is too long")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("text field is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_text(w, &self.config)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_text(w, name)?;
            write_tensor(w, t)?;
        }
        match &self.moments {
            None => w.write_all(&[0])?,
            Some(m) => {
                if m.m.len() != self.params.len() || m.v.len() != self.params.len() {
                    return Err(Error::dim("moments", self.params.len(), m.m.len().min(m.v.len())));
                }
                w.write_all(&[1])?;
                for t in m.m.iter().chain(&m.v) {
                    write_tensor(w, t)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(r)?;
        let config = read_text(r)?;
        let n = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = read_text(r)?;
            let t = read_tensor(r)?;
            params
                .insert(&name, t)
                .map_err(|_| Error::Format(format!("duplicate parameter {name}")))?;
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(truncated)?;
        let moments = match flag[0] {
            0 => None,
            1 => {
                let mut all = Vec::with_capacity(2 * n);
                for _ in 0..2 * n {
                    all.push(read_tensor(r)?);
                }
                let v = all.split_off(n);
                Some(Moments { m: all, v })
            }
            f => return Err(Error::Format(format!("bad moments flag {f}"))),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            step,
            config,
            params,
            moments,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_exact() {
        let t = Tensor::new(Shape::new(1, 1, 2), vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"IRVF".to_vec();
        for d in [1u32, 1, 2] {
            expect.extend_from_slice(&d.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn malformed_tensors_are_format_errors() {
        assert!(matches!(read_tensor::<f32>(&mut &b"XXXX"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros(Shape::new(2, 2, 2))).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor::<f32>(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_tensor::<f32>(&mut &b"IR"[..]), Err(Error::Format(_))));
    }

    fn sample_checkpoint(with_moments: bool) -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::from_fn(Shape::new(2, 1, 3), |c, _, x| (c * 3 + x) as f32 * 0.1)).unwrap();
        params.insert("b", Tensor::full(Shape::new(1, 1, 1), -1.0)).unwrap();
        let moments = with_moments.then(|| Moments {
            m: params.values().iter().map(|t| t.map(|v| v * 0.5)).collect(),
            v: params.values().iter().map(|t| t.map(|v| v * v)).collect(),
        });
        Checkpoint {
            step: 42,
            config: "channels = 16\n".into(),
            params,
            moments,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        for with_moments in [false, true] {
            let ck = sample_checkpoint(with_moments);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = sample_checkpoint(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::read(&mut long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.irvf");
        let t = Tensor::from_fn(Shape::new(3, 4, 5), |c, y, x| (c + y * x) as f32 / 7.0);
        save_tensor(&p, &t).unwrap();
        assert_eq!(load_tensor::<f32>(&p).unwrap(), t);
        let first = fs::read(&p).unwrap();
        save_tensor(&p, &load_tensor::<f32>(&p).unwrap()).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert!(load_tensor::<f32>(&dir.path().join("missing")).unwrap_err().is_io());
    }

    proptest! {
        #[test]
        fn any_f32_tensor_round_trips(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let t = Tensor::from_fn(Shape::new(c, h, w), |_, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff)
            });
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

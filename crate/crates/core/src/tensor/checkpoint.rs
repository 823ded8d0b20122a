//! Binary container for named tensors.
//!
//! Layout: magic `PODQ`, format version (u16 LE), header length (u32 LE),
//! UTF-8 header, then every tensor's values as little-endian f32 in header
//! order. Header lines are `key value` pairs; tensor lines read
//! `tensor <name> <d0>,<d1>,...`.

use std::io::{Read, Write};

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"PODQ";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u16),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Format("unexpected end of file".into())
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key)
            .ok_or_else(|| CheckpointError::Format(format!("missing header key `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || k == "tensor" || v.contains('\n') {
                return Err(CheckpointError::Format(format!("bad header entry `{k}`")));
            }
            header.push_str(&format!("{k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(CheckpointError::Format(format!("bad tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(",")));
        }
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(header.as_bytes())?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            buf.clear();
            buf.reserve(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut two = [0u8; 2];
        input.read_exact(&mut two)?;
        let version = u16::from_le_bytes(two);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut four = [0u8; 4];
        input.read_exact(&mut four)?;
        let header_len = u32::from_le_bytes(four) as usize;
        if header_len > 64 << 20 {
            return Err(CheckpointError::Format(format!(
                "header length {header_len} is implausible"
            )));
        }
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header)?;
        let header = String::from_utf8(header)
            .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;

        let mut container = Container::default();
        let mut shapes = Vec::new();
        for line in header.lines() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            if key == "tensor" {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| CheckpointError::Format(format!("bad tensor line `{line}`")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CheckpointError::Format(format!("bad shape in `{line}`")))?;
                if shape.is_empty() || shape.contains(&0) {
                    return Err(CheckpointError::Format(format!("empty shape in `{line}`")));
                }
                shapes.push((name.to_string(), shape));
            } else {
                container.meta.push((key.to_string(), rest.to_string()));
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            container.tensors.push((name, t));
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(CheckpointError::Format(
                "trailing bytes after tensors".into(),
            ));
        }
        Ok(container)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        Container {
            meta: vec![
                ("arch".into(), "drqn".into()),
                ("episode".into(), "50".into()),
            ],
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
                ),
                ("b".into(), Tensor::vector(vec![7.25])),
            ],
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PODQ");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.starts_with("arch drqn\n"));
        assert!(header.contains("tensor a 2,2\n"));
        assert_eq!(bytes.len(), 10 + hlen + 5 * 4);
        let first = f32::from_le_bytes(bytes[10 + hlen..14 + hlen].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 5, 9, 12, bytes.len() - 1] {
            let err = Container::read_from(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::BadMagic | CheckpointError::Format(_)),
                "cut {cut}: {err:?}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Container::read_from(bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Container::read_from(bad.as_slice()),
            Err(CheckpointError::Version(9))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Container::read_from(long.as_slice()),
            Err(CheckpointError::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let c = Container {
                meta: vec![("k".into(), "v w".into())],
                tensors: vec![("x".into(), Tensor::vector(data.clone()))],
            };
            let bytes = c.to_bytes().unwrap();
            let back = Container::read_from(bytes.as_slice()).unwrap();
            let got: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, values);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}

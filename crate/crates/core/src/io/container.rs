use std::path::Path;

use super::reader::{push_f32s, ByteReader};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u16 = 1;

/// One named tensor in a container payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub value: Tensor,
}

/// Checkpoint container: magic, version, a UTF-8 manifest, then `f32` payloads.
///
/// The manifest holds free-form header lines describing the model plus one
/// `tensor <name> <d0>x<d1>...` line per payload tensor, in payload order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(vec![]);
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            header: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn manifest(&self) -> Result<String> {
        let mut m = String::new();
        for line in &self.header {
            if line.starts_with("tensor ") || line.contains('\n') {
                return Err(Error::contract(format!("invalid manifest header line {line:?}")));
            }
            m.push_str(line);
            m.push('\n');
        }
        for t in &self.tensors {
            if t.name.contains(char::is_whitespace) || t.name.is_empty() {
                return Err(Error::contract(format!("invalid tensor name {:?}", t.name)));
            }
            m.push_str(&format!("tensor {} {}\n", t.name, shape_str(t.value.shape())));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest()?;
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        let len = u32::try_from(manifest.len()).map_err(|_| Error::contract("manifest too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            push_f32s(&mut out, t.value.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let got = r.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let at = r.offset();
        let version = r.u16("version")?;
        if version != CONTAINER_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let len = r.u32("manifest length")? as usize;
        let at = r.offset();
        let text = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|e| Error::format(at + e.valid_up_to(), "manifest is not UTF-8"))?;
        let mut header = Vec::new();
        let mut specs = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let (Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::format(at, format!("malformed tensor line {line:?}")));
                };
                let shape =
                    parse_shape(shape).ok_or_else(|| Error::format(at, format!("malformed shape in {line:?}")))?;
                specs.push((name.to_string(), shape));
            } else {
                header.push(line.to_string());
            }
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data = r.f32s(n, &format!("payload of {name}"))?;
            tensors.push(TensorRecord {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        r.finish()?;
        Ok(Self { magic, header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    /// Value of the first header line of the form `key value`.
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
    }
}

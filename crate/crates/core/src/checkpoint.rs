//! Checkpoint files: a text manifest followed by the raw parameter values.
//!
//! ```text
//! flowdistill-checkpoint 1
//! role = tutor
//! config afwm.levels = 3
//! ...
//! param afwm.clothes.enc1.down.weight 32x3x3x3 0
//! ...
//! end
//! <little-endian f32 values of every parameter, in registry order>
//! ```
//!
//! Offsets are in bytes from the start of the body.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "flowdistill-checkpoint";
pub const VERSION: u32 = 1;

/// One named parameter array.
pub type ParamValues = (String, Vec<usize>, Vec<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Which network the parameters belong to, e.g. `tutor` or `student`.
    pub role: String,
    /// Architecture settings needed to rebuild the network.
    pub config: BTreeMap<String, String>,
    pub params: Vec<ParamValues>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(char::is_whitespace) && !s.contains('=')
}

impl Checkpoint {
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !valid_token(&self.role) {
            return Err(bad(format!("invalid role `{}`", self.role)));
        }
        let mut header = format!("{MAGIC} {VERSION}\nrole = {}\n", self.role);
        for (k, v) in &self.config {
            if !valid_token(k) || v.contains('\n') {
                return Err(bad(format!("invalid config entry `{k}`")));
            }
            header.push_str(&format!("config {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for (name, shape, values) in &self.params {
            if !valid_token(name) {
                return Err(bad(format!("invalid parameter name `{name}`")));
            }
            if shape.is_empty() || shape.iter().product::<usize>() != values.len() {
                return Err(bad(format!(
                    "parameter {name}: shape {shape:?} does not hold {} values",
                    values.len()
                )));
            }
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("param {name} {} {offset}\n", dims.join("x")));
            offset += 4 * values.len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, _, values) in &self.params {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end_marker = b"\nend\n";
        let split = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing `end` line"))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("header is not valid UTF-8"))?;
        let body = &bytes[split + end_marker.len()..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or("");
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let mut role = None;
        let mut config = BTreeMap::new();
        let mut layout: Vec<(String, Vec<usize>, usize)> = Vec::new();
        for line in lines {
            if let Some(r) = line.strip_prefix("role = ") {
                role = Some(r.to_string());
            } else if let Some(entry) = line.strip_prefix("config ") {
                let (k, v) = entry
                    .split_once(" = ")
                    .ok_or_else(|| bad(format!("malformed config line `{line}`")))?;
                config.insert(k.to_string(), v.to_string());
            } else if let Some(entry) = line.strip_prefix("param ") {
                let fields: Vec<&str> = entry.split(' ').collect();
                let [name, dims, offset] = fields[..] else {
                    return Err(bad(format!("malformed param line `{line}`")));
                };
                let shape = dims
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| bad(format!("bad shape in `{line}`")))?;
                let offset = offset
                    .parse()
                    .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                layout.push((name.to_string(), shape, offset));
            } else {
                return Err(bad(format!("unexpected header line `{line}`")));
            }
        }
        let role = role.ok_or_else(|| bad("missing role"))?;

        let total: usize = layout.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if body.len() != 4 * total {
            return Err(bad(format!(
                "body holds {} bytes but the registry describes {} values ({} bytes)",
                body.len(),
                total,
                4 * total
            )));
        }
        let mut expected = 0usize;
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, offset) in layout {
            if offset != expected {
                return Err(bad(format!("parameter {name} at offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let values = body[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            expected += 4 * n;
            params.push((name, shape, values));
        }
        Ok(Checkpoint {
            role,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Fails unless the checkpoint was written for `role`.
    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(bad(format!("expected a {role} checkpoint, found {}", self.role)))
        }
    }
}

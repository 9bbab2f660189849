//! Versioned binary container with a JSON sidecar, used for spectral states
//! and escape functions.
//!
//! Layout: magic `SGRW`, `u32` format version, `u32` kind length, kind
//! bytes, `u64` payload length, payload, 32-byte SHA-256 of the payload.
//! All integers and floats are little-endian. The sidecar `<file>.json`
//! repeats kind, version, size and hash next to free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::escape::EscapeFunction;
use crate::quantize::SpectralState;
use crate::solver::hex;

const MAGIC: &[u8; 4] = b"SGRW";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_STATE: &str = "spectral_state";
pub const KIND_ESCAPE: &str = "escape_function";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: String,
    pub payload_bytes: u64,
    pub sha256: String,
    pub library_version: String,
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the container and its sidecar; returns the payload hash.
pub fn write_container(path: &Path, kind: &str, payload: &[u8], meta: serde_json::Value) -> Result<String> {
    let digest = Sha256::digest(payload);
    let mut buf = Vec::with_capacity(payload.len() + kind.len() + 52);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    buf.extend_from_slice(kind.as_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf)?;
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload_bytes: payload.len() as u64,
        sha256: hex(&digest),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        meta,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(side.sha256)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Numerical("container is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads and validates a container of the expected kind.
pub fn read_container(path: &Path, kind: &str) -> Result<Vec<u8>> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return invalid(format!("{} is not a container file", path.display()));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return invalid(format!("unsupported container version {v}"));
    }
    let klen = r.u32()? as usize;
    let k = r.take(klen)?;
    if k != kind.as_bytes() {
        return invalid(format!("container holds {:?}, expected {kind:?}", String::from_utf8_lossy(k)));
    }
    let n = r.u64()? as usize;
    let payload = r.take(n)?.to_vec();
    let digest = r.take(32)?;
    if Sha256::digest(&payload).as_slice() != digest {
        return Err(Error::Numerical("container checksum mismatch".into()));
    }
    Ok(payload)
}

fn state_payload(u: &SpectralState) -> Vec<u8> {
    let mut p = Vec::with_capacity(24 + 16 * u.len());
    p.extend_from_slice(&(u.dim() as u64).to_le_bytes());
    p.extend_from_slice(&(u.band()[0] as u64).to_le_bytes());
    p.extend_from_slice(&(u.band()[1] as u64).to_le_bytes());
    for c in u.coeffs() {
        p.extend_from_slice(&c.re.to_le_bytes());
        p.extend_from_slice(&c.im.to_le_bytes());
    }
    p
}

pub fn save_state(path: &Path, u: &SpectralState, meta: serde_json::Value) -> Result<String> {
    let meta = serde_json::json!({ "dim": u.dim(), "band": u.band(), "l2": u.l2_norm(), "extra": meta });
    write_container(path, KIND_STATE, &state_payload(u), meta)
}

pub fn load_state(path: &Path) -> Result<SpectralState> {
    let p = read_container(path, KIND_STATE)?;
    let mut r = Reader { buf: &p, pos: 0 };
    let dim = r.u64()? as usize;
    let band = [r.u64()? as usize, r.u64()? as usize];
    let mut u = SpectralState::zeros(dim, band)?;
    for c in u.coeffs_mut() {
        *c = Complex64::new(r.f64()?, r.f64()?);
    }
    if r.pos != p.len() {
        return invalid("trailing bytes in state container");
    }
    Ok(u)
}

/// Payload: `u64` JSON length, JSON of the escape function without the
/// profile table, then the table as `f64`.
pub fn save_escape(path: &Path, a: &EscapeFunction, meta: serde_json::Value) -> Result<String> {
    let json = serde_json::to_vec(a)?;
    let vals = &a.profile().values;
    let mut p = Vec::with_capacity(8 + json.len() + 8 * vals.len());
    p.extend_from_slice(&(json.len() as u64).to_le_bytes());
    p.extend_from_slice(&json);
    for v in vals {
        p.extend_from_slice(&v.to_le_bytes());
    }
    let meta = serde_json::json!({
        "sigma": a.sigma,
        "c0": a.weight.c0,
        "profile_shape": a.profile().shape,
        "negative_cone_fraction": a.negative_cone.fraction,
        "extra": meta,
    });
    write_container(path, KIND_ESCAPE, &p, meta)
}

pub fn load_escape(path: &Path) -> Result<EscapeFunction> {
    let p = read_container(path, KIND_ESCAPE)?;
    let mut r = Reader { buf: &p, pos: 0 };
    let n = r.u64()? as usize;
    let a: EscapeFunction = serde_json::from_slice(r.take(n)?)?;
    let rest = p.len() - r.pos;
    if rest % 8 != 0 {
        return invalid("profile table is not a whole number of floats");
    }
    let mut vals = Vec::with_capacity(rest / 8);
    for _ in 0..rest / 8 {
        vals.push(r.f64()?);
    }
    a.with_profile_values(vals)
}

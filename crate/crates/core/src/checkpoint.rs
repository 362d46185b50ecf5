//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      6 bytes  "SDACE\0"
//! version    u16      1
//! header     u32 length + UTF-8 text
//! count      u64      number of f32 values
//! payload    count * f32
//! crc        u32      CRC-32 of the payload bytes
//! ```
//!
//! The header is the architecture descriptor, optionally followed by
//! `;` and training metadata, e.g.
//! `luminance depth=7 width=32 kernel=3;epoch=100 seed=7 loss=0.25`.
//! Optimizer state is stored in the same container under an `adam ...`
//! header so interrupted training can resume exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{DenoisingNet, LuminanceNet, NetDescriptor, NetKind, Network};
use crate::tensor::AdamState;

pub const MAGIC: &[u8; 6] = b"SDACE\0";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMeta {
    /// Number of completed epochs.
    pub epoch: u64,
    pub seed: u64,
    /// Mean total loss of the last completed epoch.
    pub loss: f64,
}

impl TrainingMeta {
    fn render(&self) -> String {
        format!("epoch={} seed={} loss={}", self.epoch, self.seed, self.loss)
    }

    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::BadDescriptor(format!("malformed training metadata {s:?}"));
        let (mut epoch, mut seed, mut loss) = (None, None, None);
        for part in s.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "epoch" => epoch = Some(v.parse().map_err(|_| bad())?),
                "seed" => seed = Some(v.parse().map_err(|_| bad())?),
                "loss" => loss = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Ok(TrainingMeta {
            epoch: epoch.ok_or_else(bad)?,
            seed: seed.ok_or_else(bad)?,
            loss: loss.ok_or_else(bad)?,
        })
    }
}

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub payload: Vec<f32>,
}

pub fn encode(header: &str, payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let start = out.len();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(what));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Container> {
    let b = &mut bytes;
    if take(b, MAGIC.len(), "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes(take(b, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(take(b, 4, "header length")?.try_into().unwrap()) as usize;
    let header = std::str::from_utf8(take(b, len, "header")?)
        .map_err(|_| Error::BadDescriptor("header is not UTF-8".into()))?
        .to_string();
    let count = u64::from_le_bytes(take(b, 8, "weight count")?.try_into().unwrap());
    let n_bytes = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(4))
        .ok_or(Error::Truncated("payload"))?;
    let raw = take(b, n_bytes, "payload")?;
    let crc = u32::from_le_bytes(take(b, 4, "checksum")?.try_into().unwrap());
    if crc32fast::hash(raw) != crc {
        return Err(Error::ChecksumMismatch);
    }
    if !b.is_empty() {
        return Err(Error::BadDescriptor(format!("{} trailing bytes after checksum", b.len())));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container { header, payload })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// A network checkpoint: architecture, flat weights and optional metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: NetDescriptor,
    pub weights: Vec<f32>,
    pub meta: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn of<N: Network>(net: &N, meta: Option<TrainingMeta>) -> Self {
        Checkpoint {
            descriptor: net.descriptor(),
            weights: net.flat_weights(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.descriptor.to_string();
        if let Some(m) = &self.meta {
            header.push(';');
            header.push_str(&m.render());
        }
        encode(&header, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = decode(bytes)?;
        let (arch, meta) = match c.header.split_once(';') {
            Some((a, m)) => (a, Some(TrainingMeta::parse(m)?)),
            None => (c.header.as_str(), None),
        };
        Ok(Checkpoint {
            descriptor: arch.parse()?,
            weights: c.payload,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect(&self, kind: NetKind) -> Result<()> {
        if self.descriptor.kind != kind {
            return Err(Error::DescriptorMismatch {
                expected: format!("{} network", kind.name()),
                found: self.descriptor.to_string(),
            });
        }
        Ok(())
    }

    pub fn into_luminance(self) -> Result<LuminanceNet> {
        self.expect(NetKind::Luminance)?;
        LuminanceNet::from_weights(&self.descriptor, &self.weights)
    }

    pub fn into_denoising(self) -> Result<DenoisingNet> {
        self.expect(NetKind::Denoising)?;
        DenoisingNet::from_weights(&self.descriptor, &self.weights)
    }
}

pub fn save_checkpoint<N: Network>(net: &N, meta: Option<TrainingMeta>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::of(net, meta).save(path)
}

pub fn load_luminance(path: impl AsRef<Path>) -> Result<(LuminanceNet, Option<TrainingMeta>)> {
    let c = Checkpoint::load(path)?;
    let meta = c.meta;
    Ok((c.into_luminance()?, meta))
}

pub fn load_denoising(path: impl AsRef<Path>) -> Result<(DenoisingNet, Option<TrainingMeta>)> {
    let c = Checkpoint::load(path)?;
    let meta = c.meta;
    Ok((c.into_denoising()?, meta))
}

/// Saves Adam moments and step counters for every parameter, in order.
pub fn save_optimizer(states: &[AdamState], path: impl AsRef<Path>) -> Result<()> {
    let counts: Vec<String> = states.iter().map(|s| format!("{}:{}", s.m.len(), s.t)).collect();
    let header = format!("adam {}", counts.join(","));
    let mut payload = Vec::new();
    for s in states {
        payload.extend_from_slice(&s.m);
        payload.extend_from_slice(&s.v);
    }
    write_atomic(path.as_ref(), &encode(&header, &payload))
}

/// Restores optimizer state saved by [`save_optimizer`]; `lr` and
/// `weight_decay` come from the caller's configuration.
pub fn load_optimizer(path: impl AsRef<Path>, lr: f64, weight_decay: f64) -> Result<Vec<AdamState>> {
    let c = read_container(path.as_ref())?;
    let bad = || Error::BadDescriptor(format!("malformed optimizer header {:?}", c.header));
    let list = c.header.strip_prefix("adam ").ok_or_else(bad)?;
    let mut states = Vec::new();
    let mut offset = 0;
    for item in list.split(',').filter(|s| !s.is_empty()) {
        let (n, t) = item.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let t: u64 = t.parse().map_err(|_| bad())?;
        if offset + 2 * n > c.payload.len() {
            return Err(Error::Truncated("optimizer payload"));
        }
        let mut s = AdamState::new(n, lr, weight_decay);
        s.m.copy_from_slice(&c.payload[offset..offset + n]);
        s.v.copy_from_slice(&c.payload[offset + n..offset + 2 * n]);
        s.t = t;
        offset += 2 * n;
        states.push(s);
    }
    if offset != c.payload.len() {
        return Err(Error::DescriptorMismatch {
            expected: format!("{offset} optimizer values"),
            found: format!("{}", c.payload.len()),
        });
    }
    Ok(states)
}

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DVAE" | u32 version | u32 block count
//! per block: u32 name length | name (UTF-8) | u8 dtype | u32 ndim
//!            | u64 dims[ndim] | u64 payload bytes | payload
//! ```
//!
//! dtype 1 is f64, 2 is u64, 3 is UTF-8 text. Blocks are written in a fixed
//! order so save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::diffusion::{Conditioning, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::expde::GmmModel;
use crate::nn::{Activation, Layer, MlpParams, Tensor};
use crate::vae::VaeModel;

pub const MAGIC: &[u8; 4] = b"DVAE";
pub const FORMAT_VERSION: u32 = 1;

const DT_F64: u8 = 1;
const DT_U64: u8 = 2;
const DT_TEXT: u8 = 3;

/// Everything a run produces: models, the schedule they were trained on, the
/// configuration text, and step counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub vae: Option<VaeModel>,
    pub gmm: Option<GmmModel>,
    pub denoiser: Option<DenoiserModel>,
    pub schedule: Option<NoiseSchedule>,
    pub vae_epochs: u64,
    pub ddpm_steps: u64,
}

impl Checkpoint {
    pub fn vae(&self) -> Result<&VaeModel> {
        self.vae.as_ref().ok_or_else(|| Error::config("checkpoint has no VAE; run train-vae"))
    }

    pub fn refiner(&self) -> Result<(&DenoiserModel, &NoiseSchedule)> {
        match (&self.denoiser, &self.schedule) {
            (Some(d), Some(s)) => Ok((d, s)),
            _ => Err(Error::config("checkpoint has no refiner; run train-ddpm")),
        }
    }

    /// The refiner, checked against the formulation the caller expects.
    pub fn refiner_for(&self, conditioning: Conditioning) -> Result<(&DenoiserModel, &NoiseSchedule)> {
        let (d, s) = self.refiner()?;
        if d.conditioning != conditioning {
            return Err(Error::config(format!(
                "checkpoint refiner is {:?}, requested {:?}",
                d.conditioning, conditioning
            )));
        }
        Ok((d, s))
    }
}

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

struct Block {
    name: String,
    dims: Vec<u64>,
    payload: Payload,
}

impl Block {
    fn f64(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Self {
        Block { name: name.into(), dims: dims.iter().map(|&d| d as u64).collect(), payload: Payload::F64(data.to_vec()) }
    }

    fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Block { name: name.into(), dims: vec![data.len() as u64], payload: Payload::U64(data) }
    }

    fn text(name: impl Into<String>, s: &str) -> Self {
        Block { name: name.into(), dims: vec![s.len() as u64], payload: Payload::Text(s.to_string()) }
    }

    fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::f64(name, t.shape(), t.data())
    }
}

fn mlp_blocks(prefix: &str, p: &MlpParams, out: &mut Vec<Block>) {
    out.push(Block::u64(format!("{prefix}.meta"), vec![p.activation.code(), p.layers.len() as u64]));
    for (i, l) in p.layers.iter().enumerate() {
        out.push(Block::tensor(format!("{prefix}.{i}.weight"), &l.weight));
        out.push(Block::tensor(format!("{prefix}.{i}.bias"), &l.bias));
    }
}

fn to_blocks(c: &Checkpoint) -> Vec<Block> {
    let mut b = vec![Block::text("config", &c.config_text), Block::u64("counters", vec![c.vae_epochs, c.ddpm_steps])];
    if let Some(v) = &c.vae {
        b.push(Block::u64("vae.meta", vec![v.data_dim as u64, v.latent_dim as u64]));
        b.push(Block::f64("vae.kl_weight", &[1], &[v.kl_weight]));
        mlp_blocks("vae.encoder", &v.encoder, &mut b);
        mlp_blocks("vae.decoder", &v.decoder, &mut b);
    }
    if let Some(g) = &c.gmm {
        let (k, d) = (g.n_components(), g.dim());
        b.push(Block::f64("gmm.weights", &[k], g.weights()));
        let means: Vec<f64> = (0..k).flat_map(|i| g.mean(i).to_vec()).collect();
        b.push(Block::f64("gmm.means", &[k, d], &means));
        let covs: Vec<f64> = (0..k).flat_map(|i| g.covariance(i)).collect();
        b.push(Block::f64("gmm.covariances", &[k, d, d], &covs));
        b.push(Block::f64("gmm.reg", &[1], &[g.reg()]));
    }
    if let Some(d) = &c.denoiser {
        b.push(Block::u64("denoiser.meta", vec![d.data_dim as u64, d.time_embed_dim as u64, d.conditioning.code()]));
        mlp_blocks("denoiser.net", &d.net, &mut b);
    }
    if let Some(s) = &c.schedule {
        b.push(Block::f64("schedule.betas", &[s.steps()], s.betas()));
    }
    b
}

/// Canonical byte encoding of a checkpoint.
pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let blocks = to_blocks(c);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        let (dtype, bytes): (u8, Vec<u8>) = match &b.payload {
            Payload::F64(v) => (DT_F64, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Payload::U64(v) => (DT_U64, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Payload::Text(s) => (DT_TEXT, s.as_bytes().to_vec()),
        };
        out.push(dtype);
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for d in &b.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse(buf: &[u8]) -> Result<Vec<(usize, Block)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic".into() });
    }
    let at = r.pos;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: at, msg: format!("unsupported version {version}") });
    }
    let count = r.u32()?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("block name is not UTF-8"))?.to_string();
        let dtype = r.u8()?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u64()?);
        }
        let nbytes = r.u64()? as usize;
        let data_at = r.pos;
        let raw = r.take(nbytes)?;
        let count: u64 = dims.iter().product();
        let payload = match dtype {
            DT_F64 | DT_U64 => {
                if nbytes as u64 != count * 8 {
                    return Err(Error::Format { offset: data_at, msg: format!("block {name}: {nbytes} bytes for {count} values") });
                }
                let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
                if dtype == DT_F64 {
                    Payload::F64(words.map(f64::from_le_bytes).collect())
                } else {
                    Payload::U64(words.map(u64::from_le_bytes).collect())
                }
            }
            DT_TEXT => Payload::Text(
                String::from_utf8(raw.to_vec()).map_err(|_| Error::Format { offset: data_at, msg: format!("block {name} is not UTF-8") })?,
            ),
            other => return Err(Error::Format { offset: start, msg: format!("block {name}: unknown dtype {other}") }),
        };
        blocks.push((start, Block { name, dims, payload }));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last block"));
    }
    Ok(blocks)
}

struct Blocks {
    items: Vec<(usize, Block)>,
}

impl Blocks {
    fn get(&self, name: &str) -> Option<&(usize, Block)> {
        self.items.iter().find(|(_, b)| b.name == name)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.items.iter().any(|(_, b)| b.name.starts_with(prefix))
    }

    fn missing(name: &str) -> Error {
        Error::Format { offset: 0, msg: format!("missing block {name}") }
    }

    fn f64(&self, name: &str) -> Result<(Vec<usize>, &[f64])> {
        match self.get(name) {
            Some((_, Block { dims, payload: Payload::F64(v), .. })) => Ok((dims.iter().map(|&d| d as usize).collect(), v)),
            Some((at, _)) => Err(Error::Format { offset: *at, msg: format!("block {name} is not f64") }),
            None => Err(Self::missing(name)),
        }
    }

    fn u64(&self, name: &str, len: usize) -> Result<&[u64]> {
        match self.get(name) {
            Some((at, Block { payload: Payload::U64(v), .. })) => {
                if v.len() != len {
                    return Err(Error::Format { offset: *at, msg: format!("block {name} has {} entries, expected {len}", v.len()) });
                }
                Ok(v)
            }
            Some((at, _)) => Err(Error::Format { offset: *at, msg: format!("block {name} is not u64") }),
            None => Err(Self::missing(name)),
        }
    }

    fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some((_, Block { payload: Payload::Text(s), .. })) => Ok(s),
            Some((at, _)) => Err(Error::Format { offset: *at, msg: format!("block {name} is not text") }),
            None => Err(Self::missing(name)),
        }
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (dims, data) = self.f64(name)?;
        Tensor::new(dims, data.to_vec())
    }

    fn mlp(&self, prefix: &str) -> Result<MlpParams> {
        let meta = self.u64(&format!("{prefix}.meta"), 2)?;
        let act = Activation::from_code(meta[0]).ok_or_else(|| Error::Format { offset: 0, msg: format!("{prefix}: unknown activation") })?;
        let layers = (0..meta[1] as usize)
            .map(|i| Layer::new(self.tensor(&format!("{prefix}.{i}.weight"))?, self.tensor(&format!("{prefix}.{i}.bias"))?))
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, act)
    }
}

/// Parses a checkpoint from bytes; any structural problem is a format error.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let b = Blocks { items: parse(buf)? };
    let integrity = |e: Error| match e {
        Error::Format { .. } => e,
        other => Error::Format { offset: 0, msg: other.to_string() },
    };
    let counters = b.u64("counters", 2)?;
    let mut ck = Checkpoint {
        config_text: b.text("config")?.to_string(),
        vae_epochs: counters[0],
        ddpm_steps: counters[1],
        ..Checkpoint::default()
    };
    if b.has_prefix("vae.") {
        let meta = b.u64("vae.meta", 2)?;
        let (_, klw) = b.f64("vae.kl_weight")?;
        let kl = *klw.first().ok_or_else(|| Blocks::missing("vae.kl_weight"))?;
        ck.vae = Some(
            VaeModel::new(b.mlp("vae.encoder")?, b.mlp("vae.decoder")?, meta[1] as usize, meta[0] as usize, kl).map_err(integrity)?,
        );
    }
    if b.has_prefix("gmm.") {
        let (wd, w) = b.f64("gmm.weights")?;
        let (md, m) = b.f64("gmm.means")?;
        let (cd, c) = b.f64("gmm.covariances")?;
        let (_, reg) = b.f64("gmm.reg")?;
        let k = wd.first().copied().unwrap_or(0);
        if md.len() != 2 || cd.len() != 3 || md[0] != k || cd[0] != k || cd[1] != md[1] || cd[2] != md[1] || reg.is_empty() {
            return Err(Error::Format { offset: 0, msg: "gmm blocks disagree on shape".into() });
        }
        let d = md[1];
        let means = m.chunks(d.max(1)).map(|r| r.to_vec()).collect();
        let covs = c.chunks((d * d).max(1)).map(|r| r.to_vec()).collect();
        ck.gmm = Some(GmmModel::new(w.to_vec(), means, covs, reg[0]).map_err(integrity)?);
    }
    if b.has_prefix("denoiser.") {
        let meta = b.u64("denoiser.meta", 3)?;
        let cond = Conditioning::from_code(meta[2]).ok_or_else(|| Error::Format { offset: 0, msg: "unknown conditioning tag".into() })?;
        ck.denoiser = Some(DenoiserModel::new(b.mlp("denoiser.net")?, meta[1] as usize, cond, meta[0] as usize).map_err(integrity)?);
    }
    if b.has_prefix("schedule.") {
        let (_, betas) = b.f64("schedule.betas")?;
        ck.schedule = Some(NoiseSchedule::from_betas(betas.to_vec()).map_err(integrity)?);
    }
    Ok(ck)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;

    fn sample() -> Checkpoint {
        let mut rng = RngStream::new(9);
        let vae = VaeModel::init(2, 2, &[4], 0.5, &mut rng).unwrap();
        let den = DenoiserModel::init(2, &[5], 4, Conditioning::Form2Concat, &mut rng).unwrap();
        let gmm = GmmModel::new(vec![0.25, 0.75], vec![vec![0.0, 1.0], vec![2.0, -1.0]], vec![vec![1.0, 0.2, 0.2, 1.0], vec![0.5, 0.0, 0.0, 0.5]], 1e-6).unwrap();
        Checkpoint {
            config_text: "seed = 3\n".into(),
            vae: Some(vae),
            gmm: Some(gmm),
            denoiser: Some(den),
            schedule: Some(crate::diffusion::linear_schedule(10, 1e-3, 0.2).unwrap()),
            vae_epochs: 7,
            ddpm_steps: 11,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Format { offset: 4, .. })));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn formulation_guard() {
        let c = sample();
        assert!(c.refiner_for(Conditioning::Form2Concat).is_ok());
        assert!(matches!(c.refiner_for(Conditioning::Form1Concat), Err(Error::Config(_))));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::default();
        assert_eq!(decode(&encode(&c)).unwrap(), c);
    }
}

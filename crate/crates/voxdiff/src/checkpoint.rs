//! Checkpoint container.
//!
//! Layout: magic "CKPT", format version, a key=value config block (variant,
//! schedule, latent normalization, step), the vocabulary, then named
//! parameter records as (path string, shape, raw little-endian f64 data).
//! Optimizer moments ride along as records under reserved prefixes so a
//! resumed run continues bit-exactly. Writes are atomic (temp file + rename);
//! a truncated or mismatched file never loads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::conditioning::{Task, Vocabulary};
use crate::diffusion::{
    make_linear_schedule, NoiseSchedule, SamplerMethod, ScheduleKind, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_T,
};
use crate::error::{Error, Result};
use crate::optim::{AdamState, ParamStore};
use crate::tensor::Tensor;
use crate::unet::{AutoencoderConfig, UNetConfig};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const FORMAT_VERSION: u16 = 1;

const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

/// Which operating space and prediction target the checkpoint was trained
/// for. A checkpoint of one variant never loads for another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Wdm,
    LatentLinear,
    LatentRflow,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "wdm" => Ok(Variant::Wdm),
            "latent-linear" => Ok(Variant::LatentLinear),
            "latent-rflow" => Ok(Variant::LatentRflow),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?}; expected wdm, latent-linear or latent-rflow"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Wdm => "wdm",
            Variant::LatentLinear => "latent-linear",
            Variant::LatentRflow => "latent-rflow",
        }
    }

    /// Wavelet subband stack or learned latent grid.
    pub fn operating_space(&self) -> &'static str {
        match self {
            Variant::Wdm => "wavelet",
            Variant::LatentLinear | Variant::LatentRflow => "latent",
        }
    }

    pub fn schedule_kind(&self) -> ScheduleKind {
        match self {
            Variant::Wdm | Variant::LatentLinear => ScheduleKind::Linear,
            Variant::LatentRflow => ScheduleKind::RFlow,
        }
    }

    /// Paper protocol: DDIM-25 for the wavelet path, DDPM-1000 for the
    /// latent linear path, 25 Euler steps for rectified flow.
    pub fn default_sampler(&self) -> (SamplerMethod, usize) {
        match self {
            Variant::Wdm => (SamplerMethod::Ddim, 25),
            Variant::LatentLinear => (SamplerMethod::Ddpm, DEFAULT_T),
            Variant::LatentRflow => (SamplerMethod::RflowEuler, 25),
        }
    }
}

/// Everything needed to sample from a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub variant: Variant,
    pub task: Task,
    pub step: u64,
    pub unet_config: UNetConfig,
    pub ae_config: Option<AutoencoderConfig>,
    pub vocab: Vocabulary,
    /// Denoiser parameters (including the token embedding table), plus the
    /// frozen autoencoder parameters for latent variants.
    pub params: ParamStore,
    pub adam: AdamState,
    pub latent_mean: f64,
    pub latent_std: f64,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.variant.schedule_kind() {
            ScheduleKind::Linear => {
                make_linear_schedule(self.schedule_t, self.beta_start, self.beta_end)
            }
            ScheduleKind::RFlow => Ok(NoiseSchedule::RFlow),
        }
    }

    pub fn denoiser(&self) -> Result<crate::unet::DenoiserModel> {
        crate::unet::DenoiserModel::new(self.unet_config.clone(), self.vocab.clone())
    }

    pub fn autoencoder(&self) -> Option<crate::unet::Autoencoder> {
        self.ae_config
            .clone()
            .map(crate::unet::Autoencoder::new)
    }

    /// Shape of the tensor the denoiser operates on.
    pub fn model_space_shape(&self) -> [usize; 5] {
        let e = self.unet_config.input_extent;
        [1, self.unet_config.in_channels, e, e, e]
    }

    /// Map a [C,D,H,W] voxel volume into the model's operating space.
    pub fn encode_volume(&self, volume: &Tensor) -> Result<Tensor> {
        let v5 = volume.unsqueeze0();
        match self.variant {
            Variant::Wdm => Ok(crate::wavelet::dwt3(&v5)?.into_tensor()),
            Variant::LatentLinear | Variant::LatentRflow => {
                let ae = self
                    .autoencoder()
                    .ok_or_else(|| Error::data("latent checkpoint missing autoencoder config"))?;
                let z = ae.encode(&self.params, &v5)?;
                Ok(z.map(|v| (v - self.latent_mean) / self.latent_std))
            }
        }
    }

    /// Map a model-space tensor back to a [C,D,H,W] voxel volume clamped to
    /// [0, 1].
    pub fn decode_to_volume(&self, model_space: &Tensor) -> Result<Tensor> {
        let v5 = match self.variant {
            Variant::Wdm => {
                let stack = crate::wavelet::SubbandStack::from_tensor(model_space.clone())?;
                crate::wavelet::idwt3(&stack)?
            }
            Variant::LatentLinear | Variant::LatentRflow => {
                let ae = self
                    .autoencoder()
                    .ok_or_else(|| Error::data("latent checkpoint missing autoencoder config"))?;
                let z = model_space.map(|v| v * self.latent_std + self.latent_mean);
                ae.decode(&self.params, &z)?
            }
        };
        Ok(v5.squeeze0()?.map(|v| v.clamp(0.0, 1.0)))
    }
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        let b = s.as_bytes();
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn f64s(&mut self, data: &[f64]) {
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::data("checkpoint string not UTF-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn config_block(ckpt: &Checkpoint) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    let mut put = |k: &str, v: String| kv.insert(k.to_string(), v);
    put("variant", ckpt.variant.name().to_string());
    put("operating_space", ckpt.variant.operating_space().to_string());
    put("task", ckpt.task.name().to_string());
    put("step", ckpt.step.to_string());
    put("adam_t", ckpt.adam.t.to_string());
    put("latent_mean", format!("{:?}", ckpt.latent_mean));
    put("latent_std", format!("{:?}", ckpt.latent_std));
    put("schedule_t", ckpt.schedule_t.to_string());
    put("beta_start", format!("{:?}", ckpt.beta_start));
    put("beta_end", format!("{:?}", ckpt.beta_end));
    let u = &ckpt.unet_config;
    put("unet.in_channels", u.in_channels.to_string());
    put("unet.input_extent", u.input_extent.to_string());
    put("unet.base_channels", u.base_channels.to_string());
    put(
        "unet.channel_mults",
        u.channel_mults
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put(
        "unet.bottleneck_extra_blocks",
        u.bottleneck_extra_blocks.to_string(),
    );
    put("unet.dropout_rate", format!("{:?}", u.dropout_rate));
    put(
        "unet.dropout_min_resolution",
        u.dropout_min_resolution.to_string(),
    );
    put(
        "unet.cross_attention_resolutions",
        u.cross_attention_resolutions
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put("unet.embed_dim", u.embed_dim.to_string());
    if let Some(ae) = &ckpt.ae_config {
        put("ae.in_channels", ae.in_channels.to_string());
        put("ae.hidden", ae.hidden.to_string());
        put("ae.latent_channels", ae.latent_channels.to_string());
    }
    kv
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::data(format!("bad list entry {p:?}")))
        })
        .collect()
}

/// Serialize to bytes. Deterministic: identical checkpoints produce
/// identical bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);

    let kv = config_block(ckpt);
    w.u32(kv.len() as u32);
    for (k, v) in &kv {
        w.string(k);
        w.string(v);
    }

    w.u32(ckpt.vocab.len() as u32);
    for word in ckpt.vocab.words() {
        w.string(word);
    }

    let records: Vec<(String, &Tensor)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    let moment_records: Vec<(String, Vec<usize>, &Vec<f64>)> = ckpt
        .adam
        .m
        .iter()
        .map(|(n, d)| (format!("{ADAM_M_PREFIX}{n}"), vec![d.len()], d))
        .chain(
            ckpt.adam
                .v
                .iter()
                .map(|(n, d)| (format!("{ADAM_V_PREFIX}{n}"), vec![d.len()], d)),
        )
        .collect();
    w.u32((records.len() + moment_records.len()) as u32);
    for (name, t) in &records {
        w.string(name);
        w.u32(t.shape().len() as u32);
        for &e in t.shape() {
            w.u64(e as u64);
        }
        w.f64s(t.data());
    }
    for (name, shape, data) in &moment_records {
        w.string(name);
        w.u32(shape.len() as u32);
        for &e in shape {
            w.u64(e as u64);
        }
        w.f64s(data);
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::data(format!(
            "bad checkpoint magic {magic:?}; expected {MAGIC:?}"
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let n_kv = r.u32()? as usize;
    let mut kv = BTreeMap::new();
    for _ in 0..n_kv {
        let k = r.string()?;
        let v = r.string()?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::data(format!("checkpoint config missing key {k:?}")))
    };
    let variant = Variant::parse(get("variant")?)?;
    let task = Task::parse(get("task")?)?;
    let step: u64 = get("step")?.parse().map_err(|_| Error::data("bad step"))?;
    let adam_t: u64 = get("adam_t")?.parse().map_err(|_| Error::data("bad adam_t"))?;
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::data(format!("bad float for {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::data(format!("bad int for {k}")))
    };
    let unet_config = UNetConfig {
        in_channels: parse_usize("unet.in_channels")?,
        input_extent: parse_usize("unet.input_extent")?,
        base_channels: parse_usize("unet.base_channels")?,
        channel_mults: parse_usize_list(get("unet.channel_mults")?)?,
        bottleneck_extra_blocks: parse_usize("unet.bottleneck_extra_blocks")?,
        dropout_rate: parse_f64("unet.dropout_rate")?,
        dropout_min_resolution: parse_usize("unet.dropout_min_resolution")?,
        cross_attention_resolutions: parse_usize_list(get("unet.cross_attention_resolutions")?)?,
        embed_dim: parse_usize("unet.embed_dim")?,
    };
    let ae_config = if kv.contains_key("ae.hidden") {
        Some(AutoencoderConfig {
            in_channels: parse_usize("ae.in_channels")?,
            hidden: parse_usize("ae.hidden")?,
            latent_channels: parse_usize("ae.latent_channels")?,
        })
    } else {
        None
    };

    let n_words = r.u32()? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(r.string()?);
    }
    let vocab = Vocabulary::from_words(words)?;

    let n_records = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut adam = AdamState {
        t: adam_t,
        ..AdamState::default()
    };
    for _ in 0..n_records {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        if let Some(stripped) = name.strip_prefix(ADAM_M_PREFIX) {
            adam.m.insert(stripped.to_string(), data);
        } else if let Some(stripped) = name.strip_prefix(ADAM_V_PREFIX) {
            adam.v.insert(stripped.to_string(), data);
        } else {
            params.insert(name, Tensor::new(&shape, data)?);
        }
    }
    if !r.done() {
        return Err(Error::data("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint {
        variant,
        task,
        step,
        unet_config,
        ae_config,
        vocab,
        params,
        adam,
        latent_mean: parse_f64("latent_mean")?,
        latent_std: parse_f64("latent_std")?,
        schedule_t: parse_usize("schedule_t")?,
        beta_start: parse_f64("beta_start")?,
        beta_end: parse_f64("beta_end")?,
    })
}

/// Atomic save: write to a temp sibling, then rename over the target.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

const PARAMS_MAGIC: &[u8; 4] = b"PRMS";

/// Standalone parameter-store blob (used for the alignment classifier).
pub fn params_to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(PARAMS_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.string(name);
        w.u32(t.shape().len() as u32);
        for &e in t.shape() {
            w.u64(e as u64);
        }
        w.f64s(t.data());
    }
    w.buf
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != PARAMS_MAGIC {
        return Err(Error::data(format!(
            "bad parameter blob magic {magic:?}; expected {PARAMS_MAGIC:?}"
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "parameter blob version {version} unsupported"
        )));
    }
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        params.insert(name, Tensor::new(&shape, data)?);
    }
    if !r.done() {
        return Err(Error::data("parameter blob has trailing bytes"));
    }
    Ok(params)
}

pub fn save_params(params: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, params_to_bytes(params))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open parameter blob {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    params_from_bytes(&bytes)
}

/// Defaults used when constructing a fresh checkpoint.
pub fn new_checkpoint(
    variant: Variant,
    task: Task,
    unet_config: UNetConfig,
    ae_config: Option<AutoencoderConfig>,
    vocab: Vocabulary,
    params: ParamStore,
) -> Checkpoint {
    Checkpoint {
        variant,
        task,
        step: 0,
        unet_config,
        ae_config,
        vocab,
        params,
        adam: AdamState::default(),
        latent_mean: 0.0,
        latent_std: 1.0,
        schedule_t: DEFAULT_T,
        beta_start: DEFAULT_BETA_START,
        beta_end: DEFAULT_BETA_END,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn sample_checkpoint() -> Checkpoint {
        let vocab = Vocabulary::standard();
        let mut params = ParamStore::new();
        let mut rng = CounterRng::new(1);
        params.insert("a.w", Tensor::randn(&[2, 3], &mut rng));
        params.insert("b.w", Tensor::randn(&[4], &mut rng));
        let mut ckpt = new_checkpoint(
            Variant::LatentRflow,
            Task::LesionLoad,
            UNetConfig::latent_space(4),
            Some(AutoencoderConfig::default()),
            vocab,
            params,
        );
        ckpt.step = 17;
        ckpt.adam.t = 17;
        ckpt.adam.m.insert("a.w".into(), vec![0.1; 6]);
        ckpt.adam.v.insert("a.w".into(), vec![0.2; 6]);
        ckpt.latent_mean = -0.031;
        ckpt.latent_std = 1.73;
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let bytes = to_bytes(&ckpt);
        let loaded = from_bytes(&bytes).unwrap();
        let bytes2 = to_bytes(&loaded);
        assert_eq!(bytes, bytes2, "save -> load -> save must be identical");
        assert_eq!(loaded.variant, Variant::LatentRflow);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.unet_config, ckpt.unet_config);
        assert!(loaded
            .params
            .get("a.w")
            .unwrap()
            .bit_eq(ckpt.params.get("a.w").unwrap()));
        assert_eq!(loaded.adam.m["a.w"], ckpt.adam.m["a.w"]);
        assert_eq!(loaded.latent_std, 1.73);
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = to_bytes(&sample_checkpoint());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                from_bytes(&bytes[..cut]).is_err(),
                "truncation at {cut} must fail"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut bytes = to_bytes(&sample_checkpoint());
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
        let mut bytes = to_bytes(&sample_checkpoint());
        bytes[4] = 0xFF;
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn save_and_load_via_disk() {
        let dir = std::env::temp_dir().join("voxdiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(to_bytes(&ckpt), to_bytes(&loaded));
        std::fs::remove_file(&path).unwrap();
    }
}

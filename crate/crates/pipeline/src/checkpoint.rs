//! Single-file checkpoints: `TDCK` magic, a format version and named
//! sections. Tensors are stored as little-endian `f32`.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use tinydrive_core::buffer::PriorityBuffer;
use tinydrive_core::nn::ParamStore;
use tinydrive_core::optim::AdamW;
use tinydrive_core::Tensor;

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};
use crate::model::Models;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const VERSION: u32 = 1;

pub const SECTIONS: [&str; 6] = ["vision_encoder", "seq_model", "optimizer", "buffer", "vocab", "config"];

pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub models: Models,
    pub optimizer: Option<AdamW<f32>>,
    pub buffer: Option<PriorityBuffer>,
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(|_| bad("truncated string length"))? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| bad("truncated string"))?;
    String::from_utf8(b).map_err(|_| bad("string is not UTF-8"))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    write_str(out, name);
    out.write_u32::<LE>(t.rank() as u32).expect("vec write");
    for &d in t.shape() {
        out.write_u64::<LE>(d as u64).expect("vec write");
    }
    for &v in t.data() {
        out.write_f32::<LE>(v).expect("vec write");
    }
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<(String, Tensor<f32>)> {
    let name = read_str(r)?;
    let rank = r.read_u32::<LE>().map_err(|_| bad("truncated rank"))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LE>().map_err(|_| bad("truncated shape"))? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f32; n];
    r.read_f32_into::<LE>(&mut data)
        .map_err(|_| bad(format!("truncated data for {name}")))?;
    Ok((name, Tensor::new(&shape, data)?))
}

fn tensor_section(store: &ParamStore<f32>, prefix: &str) -> Vec<u8> {
    let items: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).collect();
    let mut out = Vec::new();
    out.write_u32::<LE>(items.len() as u32).expect("vec write");
    for (_, p) in items {
        write_tensor(&mut out, &p.name, &p.value);
    }
    out
}

fn load_tensor_section(bytes: &[u8], store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
    let mut r = Cursor::new(bytes);
    let n = r.read_u32::<LE>().map_err(|_| bad("truncated tensor count"))? as usize;
    let expected = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).count();
    if n != expected {
        return Err(bad(format!("{prefix}: {n} tensors stored, model has {expected}")));
    }
    for _ in 0..n {
        let (name, t) = read_tensor(&mut r)?;
        let id = store.find(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        if store.value(id).shape() != t.shape() {
            return Err(bad(format!("{name}: shape {:?} does not match {:?}", t.shape(), store.value(id).shape())));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

fn optimizer_section(opt: &AdamW<f32>, store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LE>(opt.step).expect("vec write");
    for v in [opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
        out.write_f64::<LE>(v).expect("vec write");
    }
    let mut entries = Vec::new();
    for (id, p) in store.iter() {
        if let (Some(Some(m)), Some(Some(v))) = (opt.m.get(id.0), opt.v.get(id.0)) {
            entries.push((format!("m/{}", p.name), m));
            entries.push((format!("v/{}", p.name), v));
        }
    }
    out.write_u32::<LE>(entries.len() as u32).expect("vec write");
    for (name, t) in entries {
        write_tensor(&mut out, &name, t);
    }
    out
}

fn load_optimizer(bytes: &[u8], store: &ParamStore<f32>) -> Result<AdamW<f32>> {
    let mut r = Cursor::new(bytes);
    let e = |_| bad("truncated optimizer header");
    let step = r.read_u64::<LE>().map_err(e)?;
    let mut hp = [0.0; 4];
    for h in &mut hp {
        *h = r.read_f64::<LE>().map_err(e)?;
    }
    let mut opt = AdamW::new(hp[3]);
    opt.step = step;
    opt.beta1 = hp[0];
    opt.beta2 = hp[1];
    opt.eps = hp[2];
    opt.m = vec![None; store.len()];
    opt.v = vec![None; store.len()];
    let n = r.read_u32::<LE>().map_err(e)? as usize;
    for _ in 0..n {
        let (name, t) = read_tensor(&mut r)?;
        let (slot, pname) = name.split_once('/').ok_or_else(|| bad(format!("bad optimizer entry {name}")))?;
        let id = store.find(pname).ok_or_else(|| bad(format!("optimizer state for unknown {pname}")))?;
        match slot {
            "m" => opt.m[id.0] = Some(t),
            "v" => opt.v[id.0] = Some(t),
            _ => return Err(bad(format!("bad optimizer entry {name}"))),
        }
    }
    Ok(opt)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("vision_encoder", tensor_section(&self.models.store, "vision.")),
            ("seq_model", tensor_section(&self.models.store, "lang.")),
        ];
        if let Some(opt) = &self.optimizer {
            sections.push(("optimizer", optimizer_section(opt, &self.models.store)));
        }
        if let Some(buf) = &self.buffer {
            let json = serde_json::to_vec(buf).map_err(|e| bad(format!("buffer: {e}")))?;
            sections.push(("buffer", json));
        }
        sections.push(("vocab", self.vocab.tokens().join("\n").into_bytes()));
        sections.push(("config", self.config.render().into_bytes()));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).expect("vec write");
        out.write_u32::<LE>(sections.len() as u32).expect("vec write");
        for (name, body) in sections {
            write_str(&mut out, name);
            out.write_u64::<LE>(body.len() as u64).expect("vec write");
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(4);
        let version = r.read_u32::<LE>().map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.read_u32::<LE>().map_err(|_| bad("truncated header"))?;
        let mut sections = std::collections::HashMap::new();
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let len = r.read_u64::<LE>().map_err(|_| bad("truncated section length"))? as usize;
            let start = r.position() as usize;
            let body = bytes.get(start..start + len).ok_or_else(|| bad(format!("section {name} is truncated")))?;
            r.set_position((start + len) as u64);
            if !SECTIONS.contains(&name.as_str()) {
                return Err(bad(format!("unknown section {name}")));
            }
            sections.insert(name, body);
        }
        let need = |name: &str| sections.get(name).copied().ok_or_else(|| bad(format!("missing section {name}")));
        let text = |name: &str| -> Result<String> {
            String::from_utf8(need(name)?.to_vec()).map_err(|_| bad(format!("{name} is not UTF-8")))
        };
        let config = TrainConfig::parse(&text("config")?)?;
        let vocab = Vocab::from_tokens(text("vocab")?.split('\n').map(str::to_string))?;
        let mut models = Models::build(&config, vocab.len())?;
        load_tensor_section(need("vision_encoder")?, &mut models.store, "vision.")?;
        load_tensor_section(need("seq_model")?, &mut models.store, "lang.")?;
        let optimizer = match sections.get("optimizer") {
            Some(b) => Some(load_optimizer(b, &models.store)?),
            None => None,
        };
        let buffer = match sections.get("buffer") {
            Some(b) => Some(serde_json::from_slice(b).map_err(|e| bad(format!("buffer: {e}")))?),
            None => None,
        };
        Ok(Self {
            config,
            vocab,
            models,
            optimizer,
            buffer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tinydrive_core::buffer::SequenceRecord;
    use tinydrive_core::nn::Group;

    fn tiny() -> TrainConfig {
        TrainConfig {
            image_resolution: 32,
            d_model: 16,
            heads: 2,
            ff_dim: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny();
        let vocab = Vocab::build(["a b c"]).unwrap();
        let mut models = Models::build(&cfg, vocab.len()).unwrap();
        for (i, v) in models.store.value_mut(tinydrive_core::nn::ParamId(0)).data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 1.0;
        }
        let mut opt = AdamW::new(1e-2);
        opt.step = 7;
        opt.m = vec![None; models.store.len()];
        opt.v = vec![None; models.store.len()];
        opt.m[3] = Some(Tensor::full(models.store.value(tinydrive_core::nn::ParamId(3)).shape(), 0.5));
        opt.v[3] = Some(Tensor::full(models.store.value(tinydrive_core::nn::ParamId(3)).shape(), 2.0));
        let mut buffer = PriorityBuffer::new(cfg.buffer_config()).unwrap();
        buffer.insert_or_update(SequenceRecord::new(4, 0.3)).unwrap();
        let ck = Checkpoint {
            config: cfg.clone(),
            vocab: vocab.clone(),
            models,
            optimizer: Some(opt),
            buffer: Some(buffer),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TDCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.models.store.checksum(&Group::ALL), ck.models.store.checksum(&Group::ALL));
        let opt = back.optimizer.as_ref().unwrap();
        assert_eq!(opt.step, 7);
        assert_eq!(opt.m[3].as_ref().unwrap().data()[0], 0.5);
        assert!(opt.m[2].is_none());
        assert_eq!(back.buffer.as_ref().unwrap().get(4).unwrap().priority, 0.3);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE00000000").is_err());
        let cfg = tiny();
        let vocab = Vocab::build(["a"]).unwrap();
        let models = Models::build(&cfg, vocab.len()).unwrap();
        let ck = Checkpoint {
            config: cfg,
            vocab,
            models,
            optimizer: None,
            buffer: None,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}

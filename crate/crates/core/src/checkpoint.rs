//! Binary checkpoints: string metadata plus named `f64` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HZBR"  u8 version (=1)
//! u32 meta_count  { u32 key_len, key, u32 value_len, value }*
//! u32 tensor_count { u32 name_len, name, u32 ndim, u64 dim*, f64 value* }*
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use hazebridge_tensor::optim::Adam;
use hazebridge_tensor::Tensor;

use crate::error::{Error, Result};
use crate::prompt::PromptState;
use crate::trainer::{DynModule, ImageTrainConfig, ImageTrainState, Optimizers, PointTrainState};

pub const MAGIC: &[u8; 4] = b"HZBR";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string(r: &mut impl Read) -> std::io::Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors
            .push((name.into(), t.shape().to_vec(), t.to_vec()));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| {
            Error::Contract(format!(
                "checkpoint metadata `{key}` = {v:?} does not parse"
            ))
        })
    }

    pub fn tensor_map(&self) -> Result<HashMap<String, Tensor>> {
        self.tensors
            .iter()
            .map(|(n, s, d)| Ok((n.clone(), Tensor::new(d.clone(), s)?)))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &self.metadata {
            put_bytes(w, k.as_bytes())?;
            put_bytes(w, v.as_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            put_bytes(w, name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Checkpoint, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut head = [0; 5];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != MAGIC {
            return Err("not a hazebridge checkpoint".into());
        }
        if head[4] != VERSION {
            return Err(format!("unsupported checkpoint version {}", head[4]));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..get_u32(r).map_err(io)? {
            let k = get_string(r).map_err(io)?;
            let v = get_string(r).map_err(io)?;
            ck.metadata.insert(k, v);
        }
        for _ in 0..get_u32(r).map_err(io)? {
            let name = get_string(r).map_err(io)?;
            let ndim = get_u32(r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0; n * 8];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.push((name, shape, data));
        }
        let mut rest = [0; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(&mut std::io::BufReader::new(f)).map_err(|d| Error::format(path, d))
    }
}

fn push_optimizers(ck: &mut Checkpoint, opt: &Optimizers) {
    for (name, adam) in opt.named() {
        ck.metadata
            .insert(format!("optim.{name}.step"), adam.step.to_string());
        ck.metadata
            .insert(format!("optim.{name}.slots"), adam.m.len().to_string());
        for (k, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            ck.tensors
                .push((format!("optim.{name}.m.{k}"), vec![m.len()], m.clone()));
            ck.tensors
                .push((format!("optim.{name}.v.{k}"), vec![v.len()], v.clone()));
        }
    }
}

fn load_optimizers(
    ck: &Checkpoint,
    map: &HashMap<String, Tensor>,
    opt: &mut Optimizers,
) -> Result<()> {
    let take = |key: String| -> Result<Vec<f64>> {
        map.get(&key)
            .map(Tensor::to_vec)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor `{key}`")))
    };
    for (name, adam) in opt.named_mut() {
        let adam: &mut Adam = adam;
        adam.step = ck.meta_parse(&format!("optim.{name}.step"))?;
        let slots: usize = ck.meta_parse(&format!("optim.{name}.slots"))?;
        adam.m = (0..slots)
            .map(|k| take(format!("optim.{name}.m.{k}")))
            .collect::<Result<_>>()?;
        adam.v = (0..slots)
            .map(|k| take(format!("optim.{name}.v.{k}")))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

fn load_modules(
    map: &HashMap<String, Tensor>,
    modules: Vec<(&str, &mut dyn DynModule)>,
) -> Result<()> {
    for (prefix, module) in modules {
        let sub: HashMap<String, Tensor> = map
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('.'))
                    .map(|r| (r.to_string(), v.clone()))
            })
            .collect();
        module.load_dyn(&sub)?;
    }
    Ok(())
}

impl ImageTrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let p = &self.models.prompt;
        for (k, v) in [
            ("mode", "image".to_string()),
            ("seed", self.seed.to_string()),
            ("step", self.step.to_string()),
            ("encoder_tag", p.encoder_tag.clone()),
            ("prompt.steps", p.steps.to_string()),
            ("prompt.final_loss", format!("{:e}", p.final_loss)),
            ("image_height", self.cfg.image_size[0].to_string()),
            ("image_width", self.cfg.image_size[1].to_string()),
        ] {
            ck.metadata.insert(k.into(), v);
        }
        for (name, t) in self.named_tensors() {
            ck.push(name, &t);
        }
        push_optimizers(&mut ck, &self.opt);
        ck
    }

    /// Rebuilds a state saved with [`ImageTrainState::to_checkpoint`] under the same configuration.
    /// The training image size is taken from the checkpoint.
    pub fn from_checkpoint(mut cfg: ImageTrainConfig, ck: &Checkpoint) -> Result<ImageTrainState> {
        if ck.meta("mode")? != "image" {
            return Err(Error::Contract(format!(
                "checkpoint holds a `{}` model",
                ck.meta("mode")?
            )));
        }
        cfg.image_size = [
            ck.meta_parse("image_height")?,
            ck.meta_parse("image_width")?,
        ];
        let map = ck.tensor_map()?;
        let vector = map
            .get("prompt.vector")
            .ok_or_else(|| Error::Contract("checkpoint lacks the prompt".into()))?
            .with_requires_grad(true);
        let prompt = PromptState {
            vector,
            steps: ck.meta_parse("prompt.steps")?,
            final_loss: ck.meta_parse("prompt.final_loss")?,
            encoder_tag: ck.meta("encoder_tag")?.to_string(),
        };
        let mut state = ImageTrainState::new(cfg, ck.meta_parse("seed")?, prompt);
        state.step = ck.meta_parse("step")?;
        let m = &mut state.models;
        load_modules(
            &map,
            vec![
                ("generator", &mut m.generator),
                ("patch", &mut m.patch),
                ("global", &mut m.global),
                ("critic", &mut m.critic),
                ("refiner", &mut m.refiner),
            ],
        )?;
        load_optimizers(ck, &map, &mut state.opt)?;
        Ok(state)
    }
}

impl PointTrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("mode".into(), "points".into());
        ck.metadata.insert("seed".into(), self.seed.to_string());
        ck.metadata.insert("step".into(), self.step.to_string());
        for (name, t) in self.named_tensors() {
            ck.push(name, &t);
        }
        push_optimizers(&mut ck, &self.opt);
        ck
    }

    /// Loads weights, optimiser moments and counters into `self`, which must
    /// have been built with the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.meta("mode")? != "points" {
            return Err(Error::Contract(format!(
                "checkpoint holds a `{}` model",
                ck.meta("mode")?
            )));
        }
        let map = ck.tensor_map()?;
        self.seed = ck.meta_parse("seed")?;
        self.step = ck.meta_parse("step")?;
        let m = &mut self.models;
        load_modules(
            &map,
            vec![
                ("generator", &mut m.generator),
                ("discriminator", &mut m.discriminator),
                ("critic", &mut m.critic),
            ],
        )?;
        load_optimizers(ck, &map, &mut self.opt)
    }
}

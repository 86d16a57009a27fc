//! Checkpoint files: a text index, the architecture text, then one XTSR
//! block per tensor in index order.
//!
//! ```text
//! xsep-checkpoint 1
//! counters step=S epoch=E batch_in_epoch=B samples_seen=N seed=X
//! optim kind=sgd lr0=.. momentum=.. unit=epochs factor=.. every=.. weight_decay=.. rho=.. epsilon=.. polyak=1 polyak_decay=..
//! arch <bytes>
//! param <name> trainable=<0|1> decay=<0|1> <bytes>
//! state <name>@<buffer> <bytes>
//! end
//! <arch text><xtsr blocks>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::arch::ArchSpec;
use crate::error::{ensure, Error, Result};
use crate::model::{Model, ParamStore};
use crate::optim::{OptimConfig, OptimState, Optimizer, OptimizerKind, Schedule};
use crate::xtsr;

pub const MAGIC_LINE: &str = "xsep-checkpoint 1";

/// Position of a run within its data stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub samples_seen: u64,
    pub seed: u64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub store: ParamStore<f32>,
    pub optim: Optimizer<f32>,
    pub counters: Counters,
}

fn flag(b: bool) -> u8 {
    b as u8
}

fn optim_line(c: &OptimConfig) -> String {
    let kind = match c.kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Rmsprop => "rmsprop",
    };
    let (unit, factor, every) = match c.schedule {
        Schedule::Epochs { factor, every } => ("epochs", factor, every),
        Schedule::Samples { factor, every } => ("samples", factor, every),
    };
    format!(
        "optim kind={kind} lr0={} momentum={} unit={unit} factor={factor} every={every} weight_decay={} rho={} epsilon={} polyak={} polyak_decay={}",
        c.lr0,
        c.momentum,
        c.weight_decay,
        c.rho,
        c.epsilon,
        flag(c.polyak),
        c.polyak_decay
    )
}

/// `key=value` fields after the leading keyword; every key in `keys` must
/// appear exactly once and nothing else may.
fn fields<'a>(line: &'a str, keyword: &str, keys: &[&str]) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut parts = line.split(' ');
    ensure!(
        parts.next() == Some(keyword),
        Format,
        "expected `{keyword}` line, found `{line}`"
    );
    let mut map = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed field `{p}`")))?;
        ensure!(
            keys.contains(&k),
            Format,
            "unknown field `{k}` in `{keyword}` line"
        );
        ensure!(map.insert(k, v).is_none(), Format, "duplicate field `{k}`");
    }
    ensure!(
        map.len() == keys.len(),
        Format,
        "`{keyword}` line is missing fields"
    );
    Ok(map)
}

fn num<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    map[key]
        .parse()
        .map_err(|_| Error::Format(format!("bad value `{}` for `{key}`", map[key])))
}

fn bit(map: &BTreeMap<&str, &str>, key: &str) -> Result<bool> {
    match map[key] {
        "0" => Ok(false),
        "1" => Ok(true),
        v => Err(Error::Format(format!("`{key}` must be 0 or 1, got `{v}`"))),
    }
}

fn parse_optim(line: &str) -> Result<OptimConfig> {
    let m = fields(
        line,
        "optim",
        &[
            "kind",
            "lr0",
            "momentum",
            "unit",
            "factor",
            "every",
            "weight_decay",
            "rho",
            "epsilon",
            "polyak",
            "polyak_decay",
        ],
    )?;
    let kind = match m["kind"] {
        "sgd" => OptimizerKind::Sgd,
        "rmsprop" => OptimizerKind::Rmsprop,
        k => return Err(Error::Format(format!("unknown optimizer `{k}`"))),
    };
    let (factor, every) = (num(&m, "factor")?, num(&m, "every")?);
    let schedule = match m["unit"] {
        "epochs" => Schedule::Epochs { factor, every },
        "samples" => Schedule::Samples { factor, every },
        u => return Err(Error::Format(format!("unknown schedule unit `{u}`"))),
    };
    let c = OptimConfig {
        kind,
        momentum: num(&m, "momentum")?,
        lr0: num(&m, "lr0")?,
        schedule,
        weight_decay: num(&m, "weight_decay")?,
        rho: num(&m, "rho")?,
        epsilon: num(&m, "epsilon")?,
        polyak: bit(&m, "polyak")?,
        polyak_decay: num(&m, "polyak_decay")?,
    };
    c.validate()
        .map_err(|e| Error::Format(format!("checkpoint optimizer: {e}")))?;
    Ok(c)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.counters;
        let arch = self.spec.to_text();
        let mut index = format!(
            "{MAGIC_LINE}\ncounters step={} epoch={} batch_in_epoch={} samples_seen={} seed={}\n{}\narch {}\n",
            c.step,
            c.epoch,
            c.batch_in_epoch,
            c.samples_seen,
            c.seed,
            optim_line(&self.optim.config),
            arch.len()
        );
        let mut blocks = Vec::new();
        for p in self.store.iter() {
            let start = blocks.len();
            xtsr::encode_into(&p.value, &mut blocks)?;
            index += &format!(
                "param {} trainable={} decay={} {}\n",
                p.name,
                flag(p.trainable),
                flag(p.decay),
                blocks.len() - start
            );
        }
        for (name, t) in self.optim.state.named(&self.store) {
            let start = blocks.len();
            xtsr::encode_into(t, &mut blocks)?;
            index += &format!("state {name} {}\n", blocks.len() - start);
        }
        index += "end\n";
        let mut out = index.into_bytes();
        out.extend_from_slice(arch.as_bytes());
        out.extend_from_slice(&blocks);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| Error::Format("checkpoint index has no `end` line".into()))?;
        let index = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::Format("checkpoint index is not UTF-8".into()))?;
        let mut body = &bytes[end + 5..];
        let mut lines = index.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("checkpoint index ends before {what}")))
        };
        ensure!(
            next("magic")? == MAGIC_LINE,
            Format,
            "not an xsep checkpoint"
        );
        let m = fields(
            next("counters")?,
            "counters",
            &["step", "epoch", "batch_in_epoch", "samples_seen", "seed"],
        )?;
        let counters = Counters {
            step: num(&m, "step")?,
            epoch: num(&m, "epoch")?,
            batch_in_epoch: num(&m, "batch_in_epoch")?,
            samples_seen: num(&m, "samples_seen")?,
            seed: num(&m, "seed")?,
        };
        let config = parse_optim(next("optim")?)?;
        let arch_len: usize = next("arch")?
            .strip_prefix("arch ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("malformed `arch` line".into()))?;
        ensure!(
            body.len() >= arch_len,
            Format,
            "truncated architecture text"
        );
        let arch = std::str::from_utf8(&body[..arch_len])
            .map_err(|_| Error::Format("architecture text is not UTF-8".into()))?;
        let spec = ArchSpec::from_text(arch)?;
        body = &body[arch_len..];

        let mut take = |len: &str| -> Result<xtsr::TensorData> {
            let len: usize = len
                .parse()
                .map_err(|_| Error::Format(format!("bad block length `{len}`")))?;
            ensure!(body.len() >= len, Format, "truncated tensor block");
            let (data, used) = xtsr::decode(&body[..len])?;
            ensure!(used == len, Format, "tensor block length mismatch");
            body = &body[len..];
            Ok(data)
        };

        let mut store = ParamStore::new();
        let mut state = BTreeMap::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["param", name, t, d, len] => {
                    let flags = format!("x {t} {d}");
                    let m = fields(&flags, "x", &["trainable", "decay"])?;
                    let value = take(len)?.into_f32()?;
                    store.push(*name, value, bit(&m, "trainable")?, bit(&m, "decay")?)?;
                }
                ["state", name, len] => {
                    let value = take(len)?.into_f32()?;
                    ensure!(
                        state.insert(name.to_string(), value).is_none(),
                        Format,
                        "duplicate state `{name}`"
                    );
                }
                _ => return Err(Error::Format(format!("malformed index line `{line}`"))),
            }
        }
        ensure!(
            body.is_empty(),
            Format,
            "{} trailing bytes after the last tensor",
            body.len()
        );

        Model::new(&spec)?.check_store(&store)?;
        let mut optim_state = OptimState::new(&config, &store);
        let expected = optim_state.named(&store).len();
        ensure!(
            state.len() == expected,
            Format,
            "checkpoint holds {} optimizer buffers, configuration needs {expected}",
            state.len()
        );
        for (name, slot) in optim_state.named_mut(&store) {
            let v = state
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing optimizer buffer `{name}`")))?;
            ensure!(
                v.dims() == slot.dims(),
                Format,
                "optimizer buffer `{name}` has dims {}",
                v.dims()
            );
            *slot = v;
        }
        optim_state.step = counters.step;
        optim_state.samples_seen = counters.samples_seen;
        Ok(Self {
            spec,
            store,
            optim: Optimizer {
                config,
                state: optim_state,
            },
            counters,
        })
    }

    /// Writes through a temporary file so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_sepconv_vgg, Shape3};
    use crate::rng::Rng;

    fn sample(cfg: OptimConfig) -> Checkpoint {
        let spec = build_sepconv_vgg(&[4], Shape3::new(3, 8, 8), 3).unwrap();
        let store = Model::new(&spec)
            .unwrap()
            .init_params(&mut Rng::seed(5))
            .unwrap();
        let mut optim = Optimizer::new(cfg, &store).unwrap();
        for s in &mut optim.state.slots {
            s.velocity = s.velocity.map(|_| 0.25);
        }
        Checkpoint {
            spec,
            store,
            optim,
            counters: Counters {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                samples_seen: 0,
                seed: 9,
            },
        }
    }

    #[test]
    fn bytes_round_trip() {
        for cfg in [OptimConfig::imagenet(), OptimConfig::jft()] {
            let ck = sample(cfg);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample(OptimConfig::imagenet()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("momentum=0.9", "momentum=0.9 x=1");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}

//! Checkpoint file format.
//!
//! ```text
//! patchdiff-checkpoint
//! format_version 1
//! net {"in_channels":5,...}
//! train_digest <hex>
//! step 1200
//! images_seen 76800
//! rng_seed 7
//! adam {"beta1":0.9,...}
//! adam_step 1200
//! tensors 3
//! tensor param/conv_in.weight 32,5,3,3 0 1440
//! ...
//! end
//! <raw little-endian f32 data>
//! ```
//!
//! Offsets are in bytes, relative to the first byte after the `end` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffusion::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::netgraph::{AdamConfig, AdamState, DenoiserParams, NetConfig};
use crate::rng::RngKey;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "patchdiff-checkpoint";
const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub train_digest: String,
    pub params: DenoiserParams<f32>,
    pub opt: AdamState<f32>,
    pub step: u64,
    pub images_seen: u64,
    pub rng: RngKey,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f32>, config: &TrainConfig) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            train_digest: config.digest(),
            params: state.params.clone(),
            opt: state.opt.clone(),
            step: state.step,
            images_seen: state.images_seen,
            rng: state.rng,
        }
    }

    pub fn net(&self) -> &NetConfig {
        self.params.config()
    }

    pub fn into_state(self) -> TrainState<f32> {
        TrainState {
            params: self.params,
            opt: self.opt,
            step: self.step,
            images_seen: self.images_seen,
            rng: self.rng,
        }
    }

    fn entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, map) in [
            (PARAM, self.params.tensors()),
            (ADAM_M, &self.opt.m),
            (ADAM_V, &self.opt.v),
        ] {
            out.extend(map.iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = serde_json::to_string(self.net()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let adam = serde_json::to_string(&self.opt.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let entries = self.entries();
        let mut header = String::new();
        header.push_str(&format!("{MAGIC}\nformat_version {}\n", self.format_version));
        header.push_str(&format!("net {net}\ntrain_digest {}\n", self.train_digest));
        header.push_str(&format!(
            "step {}\nimages_seen {}\nrng_seed {}\n",
            self.step, self.images_seen, self.rng.seed
        ));
        header.push_str(&format!(
            "adam {adam}\nadam_step {}\ntensors {}\n",
            self.opt.step,
            entries.len()
        ));
        let mut offset = 0usize;
        for (name, t) in &entries {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name `{name}` contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
            offset += 4 * t.numel();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &entries {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut cursor = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not valid UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a patchdiff checkpoint (bad magic line)".into()));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` header line, found `{line}`")))
        }
        fn num<N: std::str::FromStr>(s: &str, key: &str) -> Result<N> {
            s.parse()
                .map_err(|_| Error::Checkpoint(format!("invalid value `{s}` for `{key}`")))
        }
        let version: u32 = num(field(next_line()?, "format_version")?, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let net: NetConfig =
            serde_json::from_str(field(next_line()?, "net")?).map_err(|e| bad(format!("invalid net metadata: {e}")))?;
        let train_digest = field(next_line()?, "train_digest")?.to_string();
        let step: u64 = num(field(next_line()?, "step")?, "step")?;
        let images_seen: u64 = num(field(next_line()?, "images_seen")?, "images_seen")?;
        let seed: u64 = num(field(next_line()?, "rng_seed")?, "rng_seed")?;
        let adam: AdamConfig = serde_json::from_str(field(next_line()?, "adam")?)
            .map_err(|e| bad(format!("invalid optimizer metadata: {e}")))?;
        let adam_step: u64 = num(field(next_line()?, "adam_step")?, "adam_step")?;
        let count: usize = num(field(next_line()?, "tensors")?, "tensors")?;
        let mut directory = Vec::with_capacity(count);
        for _ in 0..count {
            let line = field(next_line()?, "tensor")?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dims, offset, numel] = parts[..] else {
                return Err(bad(format!("malformed tensor entry `{line}`")));
            };
            let shape: Vec<usize> = dims.split(',').map(|d| num(d, name)).collect::<Result<_>>()?;
            let offset: usize = num(offset, name)?;
            let numel: usize = num(numel, name)?;
            if shape.iter().product::<usize>() != numel {
                return Err(bad(format!(
                    "tensor `{name}`: shape {shape:?} does not hold {numel} values"
                )));
            }
            directory.push((name.to_string(), shape, offset, numel));
        }
        if next_line()? != "end" {
            return Err(bad("missing `end` after tensor directory".into()));
        }
        let data = &bytes[cursor..];
        let mut expected = 0usize;
        for (name, _, offset, numel) in &directory {
            if *offset != expected {
                return Err(bad(format!("tensor `{name}` at offset {offset}, expected {expected}")));
            }
            expected += 4 * numel;
        }
        if data.len() < expected {
            return Err(bad(format!(
                "truncated file: {} data bytes, directory needs {expected}",
                data.len()
            )));
        }
        if data.len() > expected {
            return Err(bad(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected
            )));
        }

        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, shape, offset, numel) in directory {
            let values: Vec<f32> = data[offset..offset + 4 * numel]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, values)?;
            let (map, key) = if let Some(k) = name.strip_prefix(PARAM) {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                (&mut m, k)
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                (&mut v, k)
            } else {
                return Err(bad(format!("unknown tensor group in `{name}`")));
            };
            if map.insert(key.to_string(), t).is_some() {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
        }
        let params = DenoiserParams::from_tensors(net, params)?;
        for (group, map) in [("adam_m", &m), ("adam_v", &v)] {
            if map.len() != params.tensors().len() {
                return Err(bad(format!(
                    "{group}: {} tensors, expected {}",
                    map.len(),
                    params.tensors().len()
                )));
            }
            for (k, t) in params.tensors() {
                let other = map
                    .get(k)
                    .ok_or_else(|| bad(format!("{group}: missing tensor `{k}`")))?;
                if other.shape() != t.shape() {
                    return Err(Error::shape(t.shape(), other.shape()));
                }
            }
        }
        Ok(Checkpoint {
            format_version: version,
            train_digest,
            params,
            opt: AdamState {
                config: adam,
                step: adam_step,
                m,
                v,
            },
            step,
            images_seen,
            rng: RngKey::new(seed),
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::init_params;
    use crate::rng::Purpose;

    fn sample() -> Checkpoint {
        let cfg = NetConfig::for_images(1, 8, 1, 8);
        let params = init_params::<f32, _>(&cfg, &mut RngKey::new(1).stream(Purpose::Init, 0, 0)).unwrap();
        let mut state = TrainState::new(params, 9);
        state.step = 17;
        state.images_seen = 17 * 4;
        for t in state.opt.m.values_mut() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f32).sin() * 1e-3);
        }
        Checkpoint::from_state(&state, &TrainConfig::default())
    }

    fn split(bytes: &[u8]) -> (String, Vec<u8>) {
        let pos = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        (String::from_utf8(bytes[..pos].to_vec()).unwrap(), bytes[pos..].to_vec())
    }

    fn join(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = header.as_bytes().to_vec();
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        for (k, t) in ck.params.tensors() {
            let u = back.params.get(k).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{k}");
        }
        assert_eq!(back, ck);
        assert!(!dir.path().join("ck.bin.tmp").exists());
    }

    #[test]
    fn offsets_strictly_increase() {
        let (text, _) = split(&sample().to_bytes().unwrap());
        let offsets: Vec<(usize, usize)> = text
            .lines()
            .filter_map(|l| l.strip_prefix("tensor "))
            .map(|l| {
                let p: Vec<&str> = l.split(' ').collect();
                (p[2].parse().unwrap(), p[3].parse().unwrap())
            })
            .collect();
        assert!(offsets.len() > 3);
        for w in offsets.windows(2) {
            assert!(w[1].0 > w[0].0);
            assert_eq!(w[1].0, w[0].0 + 4 * w[0].1);
        }
    }

    #[test]
    fn corrupt_version_and_truncation_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let (text, data) = split(&bytes);
        let bumped = text.replacen("format_version 1", "format_version 2", 1);
        let err = Checkpoint::from_bytes(&join(&bumped, &data)).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");

        let garbled = text.replacen("format_version 1", "format_versoin 1", 1);
        assert!(Checkpoint::from_bytes(&join(&garbled, &data)).is_err());

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (text, data) = split(&sample().to_bytes().unwrap());
        // declare conv_in as a different (but size-consistent) shape
        let line = text
            .lines()
            .find(|l| l.starts_with("tensor param/conv_in.weight "))
            .unwrap();
        let p: Vec<&str> = line.split(' ').collect();
        let numel: usize = p[4].parse().unwrap();
        let bad_line = format!("tensor {} {},1,1,1 {} {}", p[1], numel, p[3], p[4]);
        let tampered = text.replacen(line, &bad_line, 1);
        let err = Checkpoint::from_bytes(&join(&tampered, &data)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}

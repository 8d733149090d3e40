//! Checkpoint files: `b"PFCK"`, version `u16`, header length `u64`, a JSON
//! header (model kind, config, run metadata, tensor names), then one FTNS
//! block per tensor in header order. All integers little-endian.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ftns;
use crate::error::{Error, Result};

use super::params::Params;

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: RunMetadata,
    pub params: Params<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    metadata: RunMetadata,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, _, tr)| TensorEntry {
                    name: n.to_string(),
                    trainable: tr,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            ftns::write_tensor(&mut out, t).expect("Vec write");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = ftns::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic, "checkpoint magic")?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let mut b2 = [0u8; 2];
        c.read_exact(&mut b2, "checkpoint version")?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version.into(),
                expected: VERSION.into(),
            });
        }
        let mut b8 = [0u8; 8];
        c.read_exact(&mut b8, "checkpoint header length")?;
        let len = u64::from_le_bytes(b8);
        let start = c.offset();
        let avail = bytes.len() as u64 - start;
        if len > avail {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("truncated checkpoint header: need {len} bytes, have {avail}"),
            });
        }
        let mut json = vec![0u8; len as usize];
        c.read_exact(&mut json, "checkpoint header")?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Parse {
            offset: start,
            msg: format!("checkpoint header: {e}"),
        })?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut trainable = Vec::new();
        for entry in header.tensors {
            tensors.push(ftns::read_tensor(&mut c)?);
            names.push(entry.name);
            trainable.push(entry.trainable);
        }
        c.at_end()?;
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            params: Params::from_parts(names, tensors, trainable),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored tensors into a freshly built parameter set, checking
    /// names and shapes.
    pub fn restore_into(&self, params: &mut Params<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, (name, t, _)) in ids.into_iter().zip(self.params.iter()) {
            if params.name(id) != name || params.get(id).shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {} {:?}",
                    t.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            params.set(id, t.clone());
        }
        Ok(())
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::nn::feedforward::{FeedForward, MlpConfig};
    use crate::nn::layers::Ctx;
    use crate::nn::model::Classifier;
    use crate::rng::Rng;

    #[test]
    fn save_load_forward_is_bit_identical() {
        let cfg = MlpConfig { layer_widths: vec![5, 3], dropout_p: 0.0, num_classes: 2 };
        let mut params = Params::<f32>::new();
        let m = FeedForward::mlp(&cfg, 4, &mut params, &mut Rng::new(3).stream("init")).unwrap();
        let ck = Checkpoint {
            kind: "mlp".into(),
            config: serde_json::to_value(&cfg).unwrap(),
            metadata: RunMetadata { seed: 3, epochs_run: 0, final_loss: None },
            params: params.clone(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);

        let mut fresh = Params::<f32>::new();
        let m2 = FeedForward::mlp(&back.config_as::<MlpConfig>().unwrap(), 4, &mut fresh, &mut Rng::new(99).stream("init")).unwrap();
        back.restore_into(&mut fresh).unwrap();
        let x = Tensor::new(&[2, 4], vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 2.0]).unwrap();
        let run = |m: &FeedForward, p: &Params<f32>| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let o = m.forward(&mut tape, &b, &x, &[0, 1], &mut Ctx::eval()).unwrap();
            tape.value(o.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(&m, &params), run(&m2, &fresh));
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let mut params = Params::<f32>::new();
        params.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let ck = Checkpoint { kind: "x".into(), config: serde_json::json!({}), metadata: Default::default(), params };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Parse { .. })));
    }
}

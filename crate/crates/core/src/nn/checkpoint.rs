//! Checkpoint container: a text header followed by raw little-endian `f64` data.
//!
//! ```text
//! METACOUNT-CHECKPOINT 1
//! config {"extractor":[...],...}
//! tensor extractor.0.weight 8,1,3,3 0 72
//! ...
//! end
//! <data>
//! ```
//! Offsets and lengths count elements from the start of the data section.

use std::fs;
use std::path::Path;

use super::{ModelParams, NetConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "METACOUNT-CHECKPOINT 1";

pub struct Checkpoint;

impl Checkpoint {
    pub fn encode(params: &ModelParams) -> Vec<u8> {
        let named = params.named_tensors();
        let mut header = format!("{MAGIC}\n");
        header.push_str("config ");
        header.push_str(&serde_json::to_string(&params.config).expect("config serializes"));
        header.push('\n');
        let mut offset = 0;
        for (name, t) in &named {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
            offset += t.numel();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err(lines.len() + 1, "unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| err(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(err(1, "missing checkpoint magic".into()));
        }
        let config_json = lines
            .get(1)
            .and_then(|l| l.strip_prefix("config "))
            .ok_or_else(|| err(2, "missing config line".into()))?;
        let config: NetConfig =
            serde_json::from_str(config_json).map_err(|e| err(2, format!("config: {e}")))?;
        let template = super::init_model(&config).map_err(|e| err(2, e.to_string()))?;
        let data = &bytes[pos..];
        if data.len() % 8 != 0 {
            return Err(err(lines.len() + 1, "data section is not a whole number of f64".into()));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let expected = template.named_tensors();
        let records = &lines[2..];
        if records.len() != expected.len() {
            return Err(err(3, format!("expected {} tensors, found {}", expected.len(), records.len())));
        }
        let mut tensors = Vec::with_capacity(records.len());
        for (i, (rec, (name, tmpl))) in records.iter().zip(&expected).enumerate() {
            let line_no = i + 3;
            let f: Vec<&str> = rec.split(' ').collect();
            if f.len() != 5 || f[0] != "tensor" {
                return Err(err(line_no, format!("malformed tensor record {rec:?}")));
            }
            if f[1] != name {
                return Err(err(line_no, format!("expected tensor {name}, found {}", f[1])));
            }
            let shape = f[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(line_no, format!("bad shape {:?}", f[2])))?;
            if shape != tmpl.shape() {
                return Err(err(line_no, format!("{name}: shape {shape:?} does not match config {:?}", tmpl.shape())));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| err(line_no, format!("bad number {s:?}")));
            let (offset, len) = (parse(f[3])?, parse(f[4])?);
            let slice = values
                .get(offset..offset + len)
                .ok_or_else(|| err(line_no, format!("{name}: data range out of bounds")))?;
            tensors.push(Tensor::new(shape, slice.to_vec()).map_err(|e| err(line_no, e.to_string()))?);
        }
        template.with_all(tensors)
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, Checkpoint::encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = NetConfig::default();
        cfg.seed = 9;
        let mut m = init_model(&cfg).unwrap();
        m.estimator[0].bias.data_mut()[0] = f64::MIN_POSITIVE;
        m.estimator[1].bias.data_mut()[1] = -0.1 - 0.2;
        let bytes = Checkpoint::encode(&m);
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(Checkpoint::encode(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let m = init_model(&NetConfig::default()).unwrap();
        let bytes = Checkpoint::encode(&m);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8], Path::new("c")).is_err());
        assert!(Checkpoint::decode(b"garbage\nend\n", Path::new("c")).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("extractor.0.bias", "extractor.0.bogus");
        assert!(Checkpoint::decode(text.as_bytes(), Path::new("c")).is_err());
    }
}

//! Checkpoint serialization.
//!
//! Two interchangeable encodings, both of which round-trip bit-exactly:
//!
//! **Text** (the default): a line-oriented header followed by the parameter
//! vector printed with 17 significant digits, eight values per line.
//!
//! ```text
//! rttd checkpoint v1
//! input_dim 64
//! hidden_dims 32
//! num_classes 4
//! activation relu
//! step 120
//! meta 1
//! source<TAB>primary
//! values 2244
//! 1.0402154186733762e-1 -3.1137892404914215e-2 ...
//! ```
//!
//! `hidden_dims` is a comma-separated list, `-` when empty. Metadata keys
//! and values escape tab, newline, and backslash with `\t`, `\n`, `\\`.
//!
//! **Binary** (compact): magic `RTTDCKB1`, then little-endian fields -
//! u32 input_dim, u32 hidden count, u32 per hidden dim, u32 num_classes,
//! u8 activation (0 relu, 1 tanh), u64 step, u32 metadata count,
//! length-prefixed UTF-8 key/value pairs (u32 byte lengths), u64 value
//! count, and the values as 64-bit IEEE floats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ModelArch, ModelWeights};

const TEXT_HEADER: &str = "rttd checkpoint v1";
const BINARY_MAGIC: &[u8; 8] = b"RTTDCKB1";

/// Model weights at a training step, plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
}

/// Decimal rendering with 17 significant digits; parses back to the same bits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl Checkpoint {
    pub fn new(weights: ModelWeights, step: u64) -> Self {
        Checkpoint {
            weights,
            step,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let arch = self.weights.arch();
        let mut out = String::new();
        let _ = writeln!(out, "{TEXT_HEADER}");
        let _ = writeln!(out, "input_dim {}", arch.input_dim);
        let hidden = if arch.hidden_dims.is_empty() {
            "-".to_string()
        } else {
            arch.hidden_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(out, "hidden_dims {hidden}");
        let _ = writeln!(out, "num_classes {}", arch.num_classes);
        let act = match arch.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let _ = writeln!(out, "activation {act}");
        let _ = writeln!(out, "step {}", self.step);
        let _ = writeln!(out, "meta {}", self.metadata.len());
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "{}\t{}", escape(k), escape(v));
        }
        let _ = writeln!(out, "values {}", self.weights.values().len());
        for chunk in self.weights.values().chunks(8) {
            let line: Vec<String> = chunk.iter().map(|&v| format_value(v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing {what}"),
            })
        };
        let (line, header) = next("header")?;
        if header.trim() != TEXT_HEADER {
            return Err(Error::Parse {
                line,
                msg: format!("expected `{TEXT_HEADER}`"),
            });
        }
        fn field((line, l): (usize, &str), key: &str) -> Result<(usize, String)> {
            let mut parts = l.splitn(2, ' ');
            let k = parts.next().unwrap_or("");
            if k != key {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected field `{key}`, found `{k}`"),
                });
            }
            Ok((line, parts.next().unwrap_or("").trim().to_string()))
        }
        fn int((line, s): (usize, String)) -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid integer `{s}`"),
            })
        }
        let input_dim = int(field(next("input_dim")?, "input_dim")?)? as usize;
        let (hline, hidden_raw) = field(next("hidden_dims")?, "hidden_dims")?;
        let hidden_dims: Vec<usize> = if hidden_raw == "-" {
            Vec::new()
        } else {
            hidden_raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::Parse {
                        line: hline,
                        msg: format!("invalid hidden dim `{s}`"),
                    })
                })
                .collect::<Result<_>>()?
        };
        let num_classes = int(field(next("num_classes")?, "num_classes")?)? as usize;
        let (aline, act_raw) = field(next("activation")?, "activation")?;
        let activation = match act_raw.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => {
                return Err(Error::Parse {
                    line: aline,
                    msg: format!("unknown activation `{other}`"),
                })
            }
        };
        let step = int(field(next("step")?, "step")?)?;
        let meta_count = int(field(next("meta")?, "meta")?)? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let (line, entry) = next("metadata entry")?;
            let mut parts = entry.splitn(2, '\t');
            let k = parts.next().unwrap_or("");
            let v = parts.next().ok_or_else(|| Error::Parse {
                line,
                msg: "metadata entry must be key<TAB>value".into(),
            })?;
            metadata.insert(unescape(k), unescape(v));
        }
        let value_count = int(field(next("values")?, "values")?)? as usize;
        let mut values = Vec::with_capacity(value_count);
        while values.len() < value_count {
            let (line, row) = next("value row")?;
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid value `{tok}`"),
                })?;
                values.push(v);
            }
        }
        if values.len() != value_count {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {value_count} values, found {}", values.len()),
            });
        }
        let arch = ModelArch::new(input_dim, hidden_dims, num_classes, activation)?;
        Ok(Checkpoint {
            weights: ModelWeights::from_values(arch, values)?,
            step,
            metadata,
        })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let arch = self.weights.arch();
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(arch.hidden_dims.len() as u32).to_le_bytes());
        for &d in &arch.hidden_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(arch.num_classes as u32).to_le_bytes());
        out.push(match arch.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.extend_from_slice(&(self.weights.values().len() as u64).to_le_bytes());
        for &v in self.weights.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: msg.to_string(),
        };
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated binary checkpoint"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != BINARY_MAGIC {
            return Err(bad("bad magic for binary checkpoint"));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")))
        };
        let input_dim = read_u32(&mut pos)? as usize;
        let hidden_count = read_u32(&mut pos)? as usize;
        let mut hidden_dims = Vec::with_capacity(hidden_count);
        for _ in 0..hidden_count {
            hidden_dims.push(read_u32(&mut pos)? as usize);
        }
        let num_classes = read_u32(&mut pos)? as usize;
        let activation = match take(&mut pos, 1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => return Err(bad("unknown activation tag")),
        };
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
        let meta_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let mut strings = Vec::with_capacity(2);
            for _ in 0..2 {
                let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
                let raw = take(&mut pos, len)?;
                strings.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("metadata not UTF-8"))?);
            }
            let v = strings.pop().expect("value");
            let k = strings.pop().expect("key");
            metadata.insert(k, v);
        }
        let value_count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let mut values = Vec::with_capacity(value_count);
        for _ in 0..value_count {
            values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")));
        }
        let arch = ModelArch::new(input_dim, hidden_dims, num_classes, activation)?;
        Ok(Checkpoint {
            weights: ModelWeights::from_values(arch, values)?,
            step,
            metadata,
        })
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_binary())?;
        Ok(())
    }

    /// Loads either encoding, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Checkpoint::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
                line: 0,
                msg: "checkpoint is neither binary nor UTF-8 text".into(),
            })?;
            Checkpoint::from_text(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use crate::rng::{RngKey, Stream};
    use proptest::prelude::*;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let arch = ModelArch::new(5, vec![4, 3], 3, Activation::Tanh).unwrap();
        let weights = init_weights(&arch, &RngKey::new(seed, 2, 1, Stream::Init)).unwrap();
        let mut ck = Checkpoint::new(weights, 1234);
        ck.metadata.insert("server".into(), "1".into());
        ck.metadata.insert("note".into(), "tabs\tand\nnewlines\\ok".into());
        ck
    }

    #[test]
    fn text_roundtrip_is_identity() {
        let ck = sample_checkpoint(3);
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn binary_roundtrip_is_identity() {
        let ck = sample_checkpoint(4);
        let back = Checkpoint::from_binary(&ck.to_binary()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn load_sniffs_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(5);
        let t = dir.path().join("a.ckpt");
        let b = dir.path().join("a.bin");
        ck.save_text(&t).unwrap();
        ck.save_binary(&b).unwrap();
        assert_eq!(Checkpoint::load(&t).unwrap(), ck);
        assert_eq!(Checkpoint::load(&b).unwrap(), ck);
    }

    #[test]
    fn empty_hidden_dims_roundtrip() {
        let arch = ModelArch::new(3, vec![], 2, Activation::Relu).unwrap();
        let ck = Checkpoint::new(ModelWeights::zeros(arch).unwrap(), 0);
        assert_eq!(Checkpoint::from_text(&ck.to_text()).unwrap(), ck);
    }

    #[test]
    fn corrupt_text_reports_line() {
        let ck = sample_checkpoint(6);
        let mut text = ck.to_text();
        text = text.replace("num_classes 3", "num_classes x");
        match Checkpoint::from_text(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn extreme_values_roundtrip(values in prop::collection::vec(
            prop_oneof![
                any::<i64>().prop_map(|b| f64::from_bits(b as u64)).prop_filter("finite", |v| v.is_finite()),
                -1e300..1e300f64,
            ],
            6,
        )) {
            let arch = ModelArch::new(2, vec![], 2, Activation::Relu).unwrap();
            let ck = Checkpoint::new(ModelWeights::from_values(arch, values).unwrap(), 7);
            let text = Checkpoint::from_text(&ck.to_text()).unwrap();
            prop_assert_eq!(&text, &ck);
            let bin = Checkpoint::from_binary(&ck.to_binary()).unwrap();
            prop_assert_eq!(&bin, &ck);
        }
    }
}

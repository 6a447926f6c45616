//! Graph checkpoints.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! bytes 0..4   magic  b"RNCK"
//! bytes 4..8   format version, u32 little-endian (currently 1)
//! bytes 8..16  header length H, u64 little-endian
//! bytes 16..16+H  JSON header: topology, op attributes, parameter shapes
//! remainder    parameter payload: f64 little-endian, node order,
//!              weight-then-bias within a node, row-major within a tensor
//! ```
//!
//! The payload is written with `f64::to_le_bytes`, so save/load round-trips
//! are bit-exact.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Node, Op};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RNCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GraphSpec {
    inputs: Vec<usize>,
    output: usize,
    nodes: Vec<NodeSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeSpec {
    op: OpSpec,
    parents: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OpSpec {
    Input { shape: Vec<usize> },
    Linear { out: usize, input: usize },
    Conv2d {
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Square,
    Add,
    AvgPool2d { kernel: usize },
    GlobalAvgPool,
    Flatten,
    Reshape { shape: Vec<usize> },
    Concat,
    ChannelScale,
    MinMaxNorm,
    PowerNormalize { target: f64 },
    ProjectL2Ball,
    RowLpPool,
}

fn to_spec(node: &Node) -> NodeSpec {
    let op = match &node.op {
        Op::Input { shape } => OpSpec::Input {
            shape: shape.clone(),
        },
        Op::Linear { weight, .. } => OpSpec::Linear {
            out: weight.shape()[0],
            input: weight.shape()[1],
        },
        Op::Conv2d {
            weight,
            stride,
            padding,
            ..
        } => OpSpec::Conv2d {
            out_ch: weight.shape()[0],
            in_ch: weight.shape()[1],
            kernel: weight.shape()[2],
            stride: *stride,
            padding: *padding,
        },
        Op::Relu => OpSpec::Relu,
        Op::Square => OpSpec::Square,
        Op::Add => OpSpec::Add,
        Op::AvgPool2d { kernel } => OpSpec::AvgPool2d { kernel: *kernel },
        Op::GlobalAvgPool => OpSpec::GlobalAvgPool,
        Op::Flatten => OpSpec::Flatten,
        Op::Reshape { shape } => OpSpec::Reshape {
            shape: shape.clone(),
        },
        Op::Concat => OpSpec::Concat,
        Op::ChannelScale => OpSpec::ChannelScale,
        Op::MinMaxNorm => OpSpec::MinMaxNorm,
        Op::PowerNormalize { target } => OpSpec::PowerNormalize { target: *target },
        Op::ProjectL2Ball => OpSpec::ProjectL2Ball,
        Op::RowLpPool => OpSpec::RowLpPool,
    };
    NodeSpec {
        op,
        parents: node.parents.clone(),
    }
}

fn from_spec(spec: OpSpec) -> Op {
    match spec {
        OpSpec::Input { shape } => Op::Input { shape },
        OpSpec::Linear { out, input } => Op::Linear {
            weight: Tensor::zeros(&[out, input]),
            bias: Tensor::zeros(&[out]),
        },
        OpSpec::Conv2d {
            out_ch,
            in_ch,
            kernel,
            stride,
            padding,
        } => Op::Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        },
        OpSpec::Relu => Op::Relu,
        OpSpec::Square => Op::Square,
        OpSpec::Add => Op::Add,
        OpSpec::AvgPool2d { kernel } => Op::AvgPool2d { kernel },
        OpSpec::GlobalAvgPool => Op::GlobalAvgPool,
        OpSpec::Flatten => Op::Flatten,
        OpSpec::Reshape { shape } => Op::Reshape { shape },
        OpSpec::Concat => Op::Concat,
        OpSpec::ChannelScale => Op::ChannelScale,
        OpSpec::MinMaxNorm => Op::MinMaxNorm,
        OpSpec::PowerNormalize { target } => Op::PowerNormalize { target },
        OpSpec::ProjectL2Ball => Op::ProjectL2Ball,
        OpSpec::RowLpPool => Op::RowLpPool,
    }
}

pub fn save(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let spec = GraphSpec {
        inputs: graph.inputs.clone(),
        output: graph.output,
        nodes: graph.nodes.iter().map(to_spec).collect(),
    };
    let header =
        serde_json::to_vec(&spec).map_err(|e| NnError::Format(format!("header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    for tensor in graph.param_tensors() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let spec: GraphSpec = serde_json::from_slice(&header)
        .map_err(|e| NnError::Format(format!("header decode: {e}")))?;

    let mut graph = Graph::new();
    for node in spec.nodes {
        graph.push(from_spec(node.op), node.parents)?;
    }
    if spec.inputs != graph.inputs {
        return Err(NnError::Format("input list does not match topology".into()));
    }
    graph.set_output(spec.output)?;

    for tensor in graph.param_tensors_mut() {
        for v in tensor.data_mut() {
            let mut buf = [0u8; 8];
            file.read_exact(&mut buf).map_err(|_| {
                NnError::Format("parameter payload shorter than topology requires".into())
            })?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(NnError::Format("trailing bytes after payload".into()));
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_graph() -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(&[1, 4, 4]);
        let c = g.conv2d(x, 2, 3, 1, 1, &mut rng).unwrap();
        let r = g.relu(c).unwrap();
        let f = g.flatten(r).unwrap();
        let out = g.linear(f, 3, &mut rng).unwrap();
        g.set_output(out).unwrap();
        g
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let g = sample_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&g, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(g.nodes.len(), loaded.nodes.len());
        let a = g.param_tensors();
        let b = loaded.param_tensors();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.shape(), y.shape());
            for (u, v) in x.data().iter().zip(y.data().iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }

        // Same inference result through the reloaded graph.
        let input = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64 / 7.0).collect())
            .unwrap();
        let t1 = g.forward(&[input.clone()]).unwrap();
        let t2 = loaded.forward(&[input]).unwrap();
        assert_eq!(t1.output().data(), t2.output().data());
    }

    #[test]
    fn rejects_bad_magic() {
        let g = sample_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&g, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let g = sample_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load(&path).is_err());
    }
}

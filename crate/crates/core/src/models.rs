//! Classifier architectures: a configurable MLP and a LeNet-style
//! convolutional network for 28x28 grayscale inputs. Both produce logits;
//! argmax prediction breaks ties toward the lowest class index.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 4] = b"JENS";
const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// conv 6@5x5 -> avgpool -> conv 16@5x5 -> avgpool -> 120 -> 84 -> C,
    /// ReLU activations, 28x28x1 input.
    Lenet { classes: usize },
}

impl ArchSpec {
    pub fn mlp_default() -> Self {
        ArchSpec::Mlp {
            input_dim: 784,
            hidden: vec![256, 128],
            classes: 10,
        }
    }

    pub fn lenet() -> Self {
        ArchSpec::Lenet { classes: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                if *input_dim == 0 || *classes < 2 || hidden.iter().any(|&h| h == 0) {
                    return Err(Error::InvalidArgument(format!(
                        "invalid mlp spec: input_dim={input_dim}, hidden={hidden:?}, classes={classes}"
                    )));
                }
            }
            ArchSpec::Lenet { classes } => {
                if *classes < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "invalid lenet spec: classes={classes}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ArchSpec::Mlp { input_dim, .. } => *input_dim,
            ArchSpec::Lenet { .. } => 784,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { classes, .. } => *classes,
            ArchSpec::Lenet { classes } => *classes,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ArchSpec::Mlp { .. } => "mlp",
            ArchSpec::Lenet { .. } => "lenet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { w: Tensor, b: Tensor },
    Conv { k: Tensor, b: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchSpec,
    layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(spec: &ArchSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut uniform = |fan_in: usize, fan_out: usize, shape: Vec<usize>| -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Tensor::from_parts(shape, data)
    };

    let layers = match spec {
        ArchSpec::Mlp {
            input_dim,
            hidden,
            classes,
        } => {
            let mut dims = vec![*input_dim];
            dims.extend_from_slice(hidden);
            dims.push(*classes);
            dims.windows(2)
                .map(|d| Layer::Dense {
                    w: uniform(d[0], d[1], vec![d[0], d[1]]),
                    b: Tensor::zeros(&[1, d[1]]),
                })
                .collect()
        }
        ArchSpec::Lenet { classes } => {
            vec![
                Layer::Conv {
                    k: uniform(25, 150, vec![6, 1, 5, 5]),
                    b: Tensor::zeros(&[6]),
                },
                Layer::Conv {
                    k: uniform(150, 400, vec![16, 6, 5, 5]),
                    b: Tensor::zeros(&[16]),
                },
                Layer::Dense {
                    w: uniform(256, 120, vec![256, 120]),
                    b: Tensor::zeros(&[1, 120]),
                },
                Layer::Dense {
                    w: uniform(120, 84, vec![120, 84]),
                    b: Tensor::zeros(&[1, 84]),
                },
                Layer::Dense {
                    w: uniform(84, *classes, vec![84, *classes]),
                    b: Tensor::zeros(&[1, *classes]),
                },
            ]
        }
    };

    Ok(ModelParams {
        arch: spec.clone(),
        layers,
    })
}

impl ModelParams {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { w, b } | Layer::Conv { k: w, b } => [w, b],
            })
            .collect()
    }

    /// Mutable parameter views in the same interleaved weight/bias order as
    /// `param_tensors` and `attach`. Writing through them must preserve each
    /// tensor's shape.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense { w, b } | Layer::Conv { k: w, b } => [w, b],
            })
            .collect()
    }

    pub fn max_param_diff(&self, other: &ModelParams) -> f64 {
        let a = self.param_tensors();
        let b = other.param_tensors();
        assert_eq!(a.len(), b.len());
        let mut m: f64 = 0.0;
        for (ta, tb) in a.iter().zip(&b) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    /// Insert parameters into a graph as differentiable leaves.
    pub fn attach(&self, g: &mut Graph) -> AttachedModel {
        self.attach_with(g, true)
    }

    /// Insert parameters as constants; gradients will not flow into them.
    pub fn attach_frozen(&self, g: &mut Graph) -> AttachedModel {
        self.attach_with(g, false)
    }

    fn attach_with(&self, g: &mut Graph, differentiable: bool) -> AttachedModel {
        let mut params = Vec::new();
        for layer in &self.layers {
            let (w, b) = match layer {
                Layer::Dense { w, b } | Layer::Conv { k: w, b } => (w, b),
            };
            let wid = if differentiable {
                g.leaf(w.clone())
            } else {
                g.constant(w.clone())
            };
            let bid = if differentiable {
                g.leaf(b.clone())
            } else {
                g.constant(b.clone())
            };
            params.push(wid);
            params.push(bid);
        }
        AttachedModel {
            arch: self.arch.clone(),
            params,
        }
    }

    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let am = self.attach_frozen(&mut g);
        let x = g.constant(batch.clone());
        let out = am.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        Ok(argmax_rows(&logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        match &self.arch {
            ArchSpec::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                buf.push(0u8);
                buf.extend_from_slice(&(*input_dim as u32).to_le_bytes());
                buf.extend_from_slice(&(*classes as u32).to_le_bytes());
                buf.extend_from_slice(&(hidden.len() as u32).to_le_bytes());
                for &h in hidden {
                    buf.extend_from_slice(&(h as u32).to_le_bytes());
                }
            }
            ArchSpec::Lenet { classes } => {
                buf.push(1u8);
                buf.extend_from_slice(&(*classes as u32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let (tag, w, b) = match layer {
                Layer::Dense { w, b } => (0u8, w, b),
                Layer::Conv { k, b } => (1u8, k, b),
            };
            buf.push(tag);
            for t in [w, b] {
                buf.push(t.shape().len() as u8);
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let name = path.display().to_string();
        let mut file = fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut r = ByteReader::new(&buf, &name);

        let magic = r.bytes(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::format(&name, "bad model magic"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::format(&name, format!("unsupported version {version}")));
        }
        let arch = match r.u8()? {
            0 => {
                let input_dim = r.u32()? as usize;
                let classes = r.u32()? as usize;
                let hlen = r.u32()? as usize;
                let mut hidden = Vec::with_capacity(hlen);
                for _ in 0..hlen {
                    hidden.push(r.u32()? as usize);
                }
                ArchSpec::Mlp {
                    input_dim,
                    hidden,
                    classes,
                }
            }
            1 => ArchSpec::Lenet {
                classes: r.u32()? as usize,
            },
            t => return Err(Error::format(&name, format!("unknown arch tag {t}"))),
        };
        let nlayers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(nlayers);
        for _ in 0..nlayers {
            let tag = r.u8()?;
            let mut tensors = Vec::with_capacity(2);
            for _ in 0..2 {
                let rank = r.u8()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(r.f64()?);
                }
                tensors.push(Tensor::new(shape, data).map_err(|e| {
                    Error::format(&name, format!("invalid tensor payload: {e}"))
                })?);
            }
            let b = tensors.pop().unwrap();
            let w = tensors.pop().unwrap();
            layers.push(match tag {
                0 => Layer::Dense { w, b },
                1 => Layer::Conv { k: w, b },
                t => return Err(Error::format(&name, format!("unknown layer tag {t}"))),
            });
        }
        if !r.exhausted() {
            return Err(Error::format(&name, "trailing bytes"));
        }
        let model = ModelParams { arch, layers };
        model.validate_chain().map_err(|e| {
            Error::format(&name, format!("inconsistent layer chain: {e}"))
        })?;
        Ok(model)
    }

    /// Shapes must chain through the forward pass.
    fn validate_chain(&self) -> Result<()> {
        self.arch.validate()?;
        let check = init_params(&self.arch, 0)?;
        if check.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument("layer count mismatch".into()));
        }
        for (a, b) in check.layers.iter().zip(&self.layers) {
            let shapes_match = match (a, b) {
                (Layer::Dense { w: wa, b: ba }, Layer::Dense { w: wb, b: bb }) => {
                    wa.shape() == wb.shape() && ba.shape() == bb.shape()
                }
                (Layer::Conv { k: ka, b: ba }, Layer::Conv { k: kb, b: bb }) => {
                    ka.shape() == kb.shape() && ba.shape() == bb.shape()
                }
                _ => false,
            };
            if !shapes_match {
                return Err(Error::InvalidArgument("layer shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Parameters inserted into a graph, plus the forward wiring.
pub struct AttachedModel {
    arch: ArchSpec,
    /// Interleaved per layer: weight node, bias node.
    pub params: Vec<NodeId>,
}

impl AttachedModel {
    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let batch = {
            let shape = g.value(x).shape();
            if shape.len() != 2 || shape[1] != self.arch.input_dim() {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "input {:?} vs model dim {}",
                        shape,
                        self.arch.input_dim()
                    ),
                ));
            }
            shape[0]
        };

        match &self.arch {
            ArchSpec::Mlp { hidden, .. } => {
                let mut h = x;
                let nlayers = hidden.len() + 1;
                for li in 0..nlayers {
                    let w = self.params[2 * li];
                    let b = self.params[2 * li + 1];
                    let lin = g.matmul(h, w)?;
                    let bb = g.bcast_axis0(b, batch)?;
                    h = g.add(lin, bb)?;
                    if li + 1 < nlayers {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
            ArchSpec::Lenet { .. } => {
                let img = g.reshape(x, &[batch, 1, 28, 28])?;

                let c1 = g.conv2d(img, self.params[0])?;
                let b1 = g.bcast_chan(self.params[1], batch, 24, 24)?;
                let a1 = g.add(c1, b1)?;
                let r1 = g.relu(a1)?;
                let p1 = g.avgpool2d(r1)?;

                let c2 = g.conv2d(p1, self.params[2])?;
                let b2 = g.bcast_chan(self.params[3], batch, 8, 8)?;
                let a2 = g.add(c2, b2)?;
                let r2 = g.relu(a2)?;
                let p2 = g.avgpool2d(r2)?;

                let mut h = g.flatten(p2)?;
                for li in 2..5 {
                    let w = self.params[2 * li];
                    let b = self.params[2 * li + 1];
                    let lin = g.matmul(h, w)?;
                    let bb = g.bcast_axis0(b, batch)?;
                    h = g.add(lin, bb)?;
                    if li < 4 {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_string(),
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}

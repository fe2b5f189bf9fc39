use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, STREAM_INIT};
use crate::scalar::Scalar;

/// Affine map `y = x W + b` with `W` stored row-major as `fan_in x fan_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSlot {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormSlot {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub norm_attn: LayerNormSlot,
    pub query: LinearSlot,
    pub key: LinearSlot,
    pub value: LinearSlot,
    pub output: LinearSlot,
    pub norm_ffn: LayerNormSlot,
    pub ffn_in: LinearSlot,
    pub ffn_out: LinearSlot,
}

/// Name, shape and offset of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub adapter_in: LinearSlot,
    /// `3 x d_k` ring embedding, when enabled.
    pub ring_embedding: Option<usize>,
    pub layers: Vec<LayerLayout>,
    pub adapter_out: LinearSlot,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    next: usize,
    tensors: Vec<TensorInfo>,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.tensors.push(TensorInfo {
            name,
            shape,
            offset,
        });
        offset
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearSlot {
        LinearSlot {
            weight: self.tensor(format!("{name}.weight"), vec![fan_in, fan_out]),
            bias: self.tensor(format!("{name}.bias"), vec![fan_out]),
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> LayerNormSlot {
        LayerNormSlot {
            gain: self.tensor(format!("{name}.gain"), vec![dim]),
            bias: self.tensor(format!("{name}.bias"), vec![dim]),
            dim,
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_k;
        let mut b = Builder {
            next: 0,
            tensors: Vec::new(),
        };
        let adapter_in = b.linear("adapter_in", config.genes, d);
        let ring_embedding = config
            .ring_embedding
            .then(|| b.tensor("ring_embedding".into(), vec![3, d]));
        let layers = (0..config.num_layers)
            .map(|l| LayerLayout {
                norm_attn: b.norm(&format!("layer{l}.norm_attn"), d),
                query: b.linear(&format!("layer{l}.query"), d, d),
                key: b.linear(&format!("layer{l}.key"), d, d),
                value: b.linear(&format!("layer{l}.value"), d, d),
                output: b.linear(&format!("layer{l}.output"), d, d),
                norm_ffn: b.norm(&format!("layer{l}.norm_ffn"), d),
                ffn_in: b.linear(&format!("layer{l}.ffn_in"), d, config.ffn_dim),
                ffn_out: b.linear(&format!("layer{l}.ffn_out"), config.ffn_dim, d),
            })
            .collect();
        let adapter_out = b.linear("adapter_out", d, config.genes);
        Layout {
            adapter_in,
            ring_embedding,
            layers,
            adapter_out,
            tensors: b.tensors,
            total: b.next,
        }
    }

    fn linears(&self) -> Vec<LinearSlot> {
        let mut out = vec![self.adapter_in];
        for l in &self.layers {
            out.extend([l.query, l.key, l.value, l.output, l.ffn_in, l.ffn_out]);
        }
        out.push(self.adapter_out);
        out
    }

    fn norms(&self) -> Vec<LayerNormSlot> {
        self.layers
            .iter()
            .flat_map(|l| [l.norm_attn, l.norm_ffn])
            .collect()
    }
}

/// All trainable weights in one flat buffer, addressed through a [`Layout`].
///
/// Gradients use the same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        Ok(ModelParameters {
            config: config.clone(),
            data: vec![T::zero(); layout.total],
            layout,
        })
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = derive_rng(seed, &[STREAM_INIT]);
        for lin in p.layout.linears() {
            let bound = 1.0 / (lin.fan_in as f64).sqrt();
            for w in &mut p.data[lin.weight..lin.weight + lin.fan_in * lin.fan_out] {
                *w = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        for norm in p.layout.norms() {
            p.data[norm.gain..norm.gain + norm.dim].fill(T::one());
        }
        if let Some(off) = p.layout.ring_embedding {
            let bound = 1.0 / (config.d_k as f64).sqrt();
            for w in &mut p.data[off..off + 3 * config.d_k] {
                *w = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn from_data(config: &ModelConfig, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn weight(&self, slot: &LinearSlot) -> ArrayView2<'_, T> {
        ArrayView2::from_shape(
            (slot.fan_in, slot.fan_out),
            &self.data[slot.weight..slot.weight + slot.fan_in * slot.fan_out],
        )
        .expect("layout shape")
    }

    pub fn weight_mut(&mut self, slot: &LinearSlot) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape(
            (slot.fan_in, slot.fan_out),
            &mut self.data[slot.weight..slot.weight + slot.fan_in * slot.fan_out],
        )
        .expect("layout shape")
    }

    pub fn vector(&self, offset: usize, len: usize) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[offset..offset + len])
    }

    pub fn vector_mut(&mut self, offset: usize, len: usize) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(&mut self.data[offset..offset + len])
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let info = self.layout.tensors.iter().find(|t| t.name == name)?;
        let n: usize = info.shape.iter().product();
        Some(&self.data[info.offset..info.offset + n])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let info = self.layout.tensors.iter().find(|t| t.name == name)?.clone();
        let n: usize = info.shape.iter().product();
        Some(&mut self.data[info.offset..info.offset + n])
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let mut config = ModelConfig::new(4);
        config.d_k = 8;
        config.num_layers = 2;
        config.num_heads = 2;
        config.ffn_dim = 16;
        let layout = Layout::new(&config);
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, next);
            next += t.shape.iter().product::<usize>();
        }
        assert_eq!(next, layout.total);
        // adapters 4*8+8 + 8*4+4, per layer 2*(8+8) + 4*(64+8) + (128+16) + (128+8)
        assert_eq!(layout.total, 40 + 36 + 2 * (32 + 288 + 144 + 136));
    }

    #[test]
    fn init_is_seeded() {
        let mut config = ModelConfig::new(3);
        config.d_k = 8;
        config.num_heads = 2;
        config.ffn_dim = 8;
        let a = ModelParameters::<f64>::init(&config, 1).unwrap();
        let b = ModelParameters::<f64>::init(&config, 1).unwrap();
        let c = ModelParameters::<f64>::init(&config, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .tensor("adapter_out.bias")
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a
            .tensor("layer0.norm_attn.gain")
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        let w = a.tensor("adapter_in.weight").unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }
}

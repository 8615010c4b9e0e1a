//! Network architectures and the learned-weight container shared by the
//! encoder, decoder and trainer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::context::ContextNet;
use crate::nn::{InitScheme, ParamSpec, Params, Registry};
use crate::residual::ResidualNet;

/// Side of a coding tile in pixels.
pub const TILE: usize = 32;
/// Side of the context window (target tile plus one tile above and left).
pub const CONTEXT: usize = 2 * TILE;
/// Spatial side of the bottleneck after three stride-2 stages.
pub const BOTTLENECK_SIDE: usize = TILE / 8;
/// Depth of the bottleneck feature map.
pub const BOTTLENECK_DEPTH: usize = 8;
/// Bits emitted per residual-coder iteration.
pub const BITS_PER_ITERATION: usize = BOTTLENECK_SIDE * BOTTLENECK_SIDE * BOTTLENECK_DEPTH;
/// Largest number of residual iterations a tile may use.
pub const K_MAX: usize = 16;
/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_SIGMA: f32 = 0.02;

/// Feature depths of the context predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextArch {
    /// Four stride-2 convolutions, 64→32→16→8→4.
    pub down: [usize; 4],
    /// Three stride-2 upsampling convolutions, 4→8→16→32.
    pub up: [usize; 3],
}

/// Feature depths of the residual autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualArch {
    /// Unit-stride feature convolution at 32×32.
    pub enc_conv: usize,
    /// Stride-2 ConvLSTM layers, 32→16→8→4.
    pub enc_lstm: [usize; 3],
    /// 1×1 convolution lifting the 4×4×8 code.
    pub dec_conv: usize,
    /// Upsampling ConvLSTM layers, 4→8→16→32.
    pub dec_lstm: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub context: ContextArch,
    pub residual: ResidualArch,
}

impl Architecture {
    /// Full-size network: 512 channels at the 4×4 context bottleneck and a
    /// 32×32×64 map before each RGB output.
    pub fn published() -> Self {
        Architecture {
            context: ContextArch {
                down: [64, 128, 256, 512],
                up: [256, 128, 64],
            },
            residual: ResidualArch {
                enc_conv: 64,
                enc_lstm: [256, 512, 512],
                dec_conv: 512,
                dec_lstm: [512, 256, 64],
            },
        }
    }

    /// Narrow network with the same topology, trainable on a laptop CPU.
    pub fn toy() -> Self {
        Architecture {
            context: ContextArch {
                down: [16, 32, 48, 64],
                up: [48, 32, 16],
            },
            residual: ResidualArch {
                enc_conv: 16,
                enc_lstm: [32, 48, 64],
                dec_conv: 64,
                dec_lstm: [48, 32, 16],
            },
        }
    }

    pub fn to_fields(&self) -> [u16; 16] {
        let c = &self.context;
        let r = &self.residual;
        [
            c.down[0], c.down[1], c.down[2], c.down[3], c.up[0], c.up[1], c.up[2], r.enc_conv,
            r.enc_lstm[0], r.enc_lstm[1], r.enc_lstm[2], r.dec_conv, r.dec_lstm[0], r.dec_lstm[1],
            r.dec_lstm[2], BOTTLENECK_DEPTH,
        ]
        .map(|v| v as u16)
    }

    pub fn from_fields(f: &[u16; 16]) -> Option<Self> {
        if f.contains(&0) || f[15] as usize != BOTTLENECK_DEPTH {
            return None;
        }
        let u = |i: usize| f[i] as usize;
        Some(Architecture {
            context: ContextArch {
                down: [u(0), u(1), u(2), u(3)],
                up: [u(4), u(5), u(6)],
            },
            residual: ResidualArch {
                enc_conv: u(7),
                enc_lstm: [u(8), u(9), u(10)],
                dec_conv: u(11),
                dec_lstm: [u(12), u(13), u(14)],
            },
        })
    }
}

/// Parameter handles for both networks, registered context-first.
#[derive(Debug, Clone)]
pub struct Layout {
    pub context: ContextNet,
    pub residual: ResidualNet,
    pub specs: Vec<ParamSpec>,
    pub context_params: Range<usize>,
    pub residual_params: Range<usize>,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut reg = Registry::new();
        let context = ContextNet::register(&mut reg, &arch.context);
        let split = reg.specs().len();
        let residual = ResidualNet::register(&mut reg, &arch.residual);
        let specs = reg.into_specs();
        let n = specs.len();
        Layout {
            context,
            residual,
            specs,
            context_params: 0..split,
            residual_params: split..n,
        }
    }

    pub fn count(&self, range: Range<usize>) -> usize {
        self.specs[range].iter().map(ParamSpec::len).sum()
    }
}

/// Bookkeeping recorded by the trainer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainingMeta {
    pub context_steps: u64,
    pub context_loss: f32,
    pub residual_steps: u64,
    pub residual_loss: f32,
}

/// All learned weights of both networks plus their architecture.
#[derive(Debug, Clone)]
pub struct CodecModel {
    arch: Architecture,
    layout: Layout,
    params: Params,
    pub meta: TrainingMeta,
}

impl PartialEq for CodecModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.meta == other.meta
    }
}

impl CodecModel {
    /// Freshly initialized weights with σ = [`INIT_SIGMA`], deterministic
    /// in `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        Self::init_with(arch, InitScheme::Fixed(INIT_SIGMA), seed)
    }

    pub fn init_with(arch: Architecture, scheme: InitScheme, seed: u64) -> Self {
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&layout.specs, scheme, &mut rng);
        CodecModel {
            arch,
            layout,
            params,
            meta: TrainingMeta::default(),
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(&arch);
        let params = Params::zeros(&layout.specs);
        CodecModel {
            arch,
            layout,
            params,
            meta: TrainingMeta::default(),
        }
    }

    /// Assembles a model from decoded parts; `params` must follow the layout.
    pub fn from_parts(arch: Architecture, params: Params, meta: TrainingMeta) -> Option<Self> {
        let layout = Layout::new(&arch);
        if params.len() != layout.specs.len()
            || params.iter().zip(&layout.specs).any(|(t, s)| t.shape() != s.shape.as_slice())
        {
            return None;
        }
        Some(CodecModel {
            arch,
            layout,
            params,
            meta,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn context_net(&self) -> &ContextNet {
        &self.layout.context
    }

    pub fn residual_net(&self) -> &ResidualNet {
        &self.layout.residual
    }

    /// Replaces the context-predictor weights with those of `other`.
    pub fn with_context_from(mut self, other: &CodecModel) -> Option<Self> {
        if other.arch.context != self.arch.context {
            return None;
        }
        let mut tensors: Vec<_> = self.params.iter().cloned().collect();
        for i in self.layout.context_params.clone() {
            tensors[i] = other.params.get(crate::nn::ParamId(i)).clone();
        }
        self.params = Params::from_tensors(tensors);
        self.meta.context_steps = other.meta.context_steps;
        self.meta.context_loss = other.meta.context_loss;
        Some(self)
    }

    /// Descriptor bytes: architecture fields then every parameter's name and
    /// shape, little-endian.
    pub fn descriptor_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for f in self.arch.to_fields() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(self.layout.specs.len() as u32).to_le_bytes());
        for s in &self.layout.specs {
            out.push(s.name.len() as u8);
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.shape.len() as u8);
            for d in &s.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        out
    }

    /// First eight bytes of SHA-256 over descriptor and weights.
    pub fn digest(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(self.descriptor_bytes());
        for t in self.params.iter() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let full = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&full[..8]);
        out
    }
}

//! Desk-scale stand-ins for the video backbone: DiT velocity nets and the
//! chunk-recurrent decoder.

pub mod decoder;
pub mod dit;

use candle_core::Tensor;

pub use decoder::{luma, ChunkRecurrentDecoder, DecodeStats, DecoderConfig};
pub use dit::{DitConfig, DitVelocityNet, Frozen, Tracked};

use crate::error::Result;
use crate::fm::VelocityField;
use crate::nn::ParamSet;

/// The few-step generator `G_θ`.
#[derive(Debug, Clone)]
pub struct GeneratorNet(pub DitVelocityNet);

/// Frozen teacher velocity `v_real`. Only gradient-blocked forwards are exposed.
#[derive(Debug, Clone)]
pub struct TeacherNet(DitVelocityNet);

/// Trainable fake-score velocity `v_fake`.
#[derive(Debug, Clone)]
pub struct FakeScoreNet(pub DitVelocityNet);

impl GeneratorNet {
    /// Initialize from the teacher's weights.
    pub fn from_teacher(teacher: &TeacherNet) -> Result<Self> {
        Ok(Self(teacher.0.deep_copy()?))
    }

    /// Velocity prediction with gradients to `θ`; rejects non-finite input.
    pub fn forward(&self, z_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        Tracked(&self.0).velocity(z_t, t, cond)
    }

    pub fn tracked(&self) -> Tracked<'_> {
        Tracked(&self.0)
    }

    pub fn frozen(&self) -> Frozen<'_> {
        Frozen(&self.0)
    }

    pub fn params(&self) -> &ParamSet {
        self.0.params()
    }
}

impl TeacherNet {
    pub fn new(net: DitVelocityNet) -> Self {
        Self(net)
    }

    pub fn velocity_field(&self) -> Frozen<'_> {
        Frozen(&self.0)
    }

    pub fn config(&self) -> &DitConfig {
        self.0.config()
    }

    /// Read-only access for hashing and checkpointing.
    pub fn params(&self) -> &ParamSet {
        self.0.params()
    }

    pub fn content_hash(&self) -> Result<String> {
        self.0.params().content_hash()
    }
}

impl FakeScoreNet {
    /// Exact copy of the teacher with independent storage.
    pub fn from_teacher(teacher: &TeacherNet) -> Result<Self> {
        Ok(Self(teacher.0.deep_copy()?))
    }

    pub fn tracked(&self) -> Tracked<'_> {
        Tracked(&self.0)
    }

    pub fn frozen(&self) -> Frozen<'_> {
        Frozen(&self.0)
    }

    pub fn params(&self) -> &ParamSet {
        self.0.params()
    }
}

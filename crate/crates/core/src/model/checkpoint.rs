use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ParamLayout};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"UFCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Baseline,
    Reinforced,
    Unlearned,
}

impl RoleTag {
    fn code(self) -> u32 {
        match self {
            RoleTag::Baseline => 0,
            RoleTag::Reinforced => 1,
            RoleTag::Unlearned => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self, ModelError> {
        match c {
            0 => Ok(RoleTag::Baseline),
            1 => Ok(RoleTag::Reinforced),
            2 => Ok(RoleTag::Unlearned),
            _ => Err(ModelError::Format(format!("unknown role tag {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub parameters: Vec<f32>,
    pub step_count: u64,
    pub role: RoleTag,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box–Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Seeded initialization: N(0, 0.02) weights, residual projections scaled
/// by `1/sqrt(2·layers)`, unit layer-norm gains and zero biases.
pub fn init_model(config: ModelConfig) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = vec![0.0f32; layout.total];
    let c = config.embed_dim;
    let std = 0.02f32;
    let resid_std = std / ((2 * config.layers) as f32).sqrt();
    let mut fill = |p: &mut [f32], s: f32| {
        for x in p.iter_mut() {
            *x = standard_normal(&mut rng) * s;
        }
    };
    fill(&mut p[layout.wte..layout.wte + config.vocab_size * c], std);
    fill(&mut p[layout.wpe..layout.wpe + config.context_len * c], std);
    for b in &layout.blocks {
        p[b.ln1_g..b.ln1_g + c].fill(1.0);
        fill(&mut p[b.qkv_w..b.qkv_w + 3 * c * c], std);
        fill(&mut p[b.proj_w..b.proj_w + c * c], resid_std);
        p[b.ln2_g..b.ln2_g + c].fill(1.0);
        fill(&mut p[b.fc_w..b.fc_w + 4 * c * c], std);
        fill(&mut p[b.out_w..b.out_w + 4 * c * c], resid_std);
    }
    p[layout.lnf_g..layout.lnf_g + c].fill(1.0);
    Ok(Checkpoint {
        config,
        parameters: p,
        step_count: 0,
        role: RoleTag::Baseline,
    })
}

impl Checkpoint {
    /// `(name, offset, len)` of every parameter slice, in storage order.
    pub fn named_slices(&self) -> Vec<(String, usize, usize)> {
        ParamLayout::new(&self.config).named_slices(&self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.parameters.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [c.layers, c.heads, c.embed_dim, c.context_len, c.vocab_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out.extend_from_slice(&self.role.code().to_le_bytes());
        out.extend_from_slice(&(self.parameters.len() as u64).to_le_bytes());
        for &x in &self.parameters {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| ModelError::Format("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut u32s = [0usize; 5];
        for v in u32s.iter_mut() {
            *v = read_u32(&mut r)? as usize;
        }
        let seed = read_u64(&mut r)?;
        let step_count = read_u64(&mut r)?;
        let role = RoleTag::from_code(read_u32(&mut r)?)?;
        let count = read_u64(&mut r)? as usize;
        let config = ModelConfig {
            layers: u32s[0],
            heads: u32s[1],
            embed_dim: u32s[2],
            context_len: u32s[3],
            vocab_size: u32s[4],
            seed,
        };
        config.validate()?;
        if count != config.param_count() {
            return Err(ModelError::Format(format!(
                "parameter count {count} does not match config ({})",
                config.param_count()
            )));
        }
        if r.len() != count * 4 {
            return Err(ModelError::Format(format!(
                "expected {} parameter bytes, found {}",
                count * 4,
                r.len()
            )));
        }
        let parameters = r
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Checkpoint {
            config,
            parameters,
            step_count,
            role,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

//! The "GMNC" checkpoint format.
//!
//! Little-endian throughout; reals are IEEE-754 binary64, matrices row-major.
//!
//! ```text
//! magic "GMNC" | version u32 | positive logit index u32 | flags u32
//!   (bit 0: metric net present, bit 1: training state present,
//!    bit 2: metric net normalizes its inputs)
//! encoder:    num_layers u32 | dims u32 x (num_layers + 1) | dp_site u32
//!             per layer: weights f64 x (d_out * d_in) | bias f64 x d_out
//! classifier: num_classes u32 | weights | bias | class identity u32 x num_classes
//! metric net: d u32 | h u32 | w1 (h x d) | b1 | w2 (2 x h) | b2
//! state:      epoch u64 | iteration u64 | optimizer u32 | beta1 | beta2 | eps
//!             | steps u64 | moments u64 | m f64 x moments | v f64 x moments
//!             | 3 x (seed [u8; 32] | stream u64 | word_pos u128)   batch, pair, dp
//!             | history u64 | per epoch: epoch u64 | lr | 7 x f64
//!             | config text length u64 | UTF-8 bytes
//! ```

use std::fs;
use std::path::Path;

use super::{EpochRecord, Optimizer, OptimizerKind, TrainState};
use crate::encoder::EncoderParams;
use crate::error::{GmnError, Result};
use crate::linalg::Dense;
use crate::losses::LossBreakdown;
use crate::metric_net::{MetricNetParams, POSITIVE_LOGIT};
use crate::model::GmnModel;
use crate::rng::RngSnapshot;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMNC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_MNET: u32 = 1;
const FLAG_STATE: u32 = 2;
const FLAG_MNET_NORM: u32 = 4;

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(GmnModel),
    /// Full training state plus the config text it was trained under.
    Train { state: TrainState, config_text: String },
}

impl Checkpoint {
    pub fn model(&self) -> &GmnModel {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Train { state, .. } => &state.model,
        }
    }

    pub fn into_model(self) -> GmnModel {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Train { state, .. } => state.model,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let (model, state) = match self {
            Checkpoint::Model(m) => (m, None),
            Checkpoint::Train { state, config_text } => (&state.model, Some((state, config_text))),
        };
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(POSITIVE_LOGIT as u32);
        let mut flags = 0;
        if let Some(m) = &model.metric_net {
            flags |= FLAG_MNET;
            if m.normalize_inputs {
                flags |= FLAG_MNET_NORM;
            }
        }
        if state.is_some() {
            flags |= FLAG_STATE;
        }
        w.u32(flags);

        let enc = &model.encoder;
        w.u32(enc.layers.len() as u32);
        for d in enc.dims() {
            w.u32(d as u32);
        }
        w.u32(enc.dp_site as u32);
        for layer in &enc.layers {
            w.dense(layer);
        }
        w.u32(enc.classifier.d_out as u32);
        w.dense(&enc.classifier);
        for &id in &model.class_identities {
            w.u32(id);
        }
        if let Some(m) = &model.metric_net {
            w.u32(m.input_dim() as u32);
            w.u32(m.hidden() as u32);
            w.dense(&m.layer1);
            w.dense(&m.layer2);
        }

        if let Some((s, text)) = state {
            w.u64(s.epoch as u64);
            w.u64(s.iteration);
            let o = &s.optimizer;
            w.u32(o.kind.code());
            w.f64(o.beta1);
            w.f64(o.beta2);
            w.f64(o.eps);
            w.u64(o.steps);
            w.u64(o.first_moment.len() as u64);
            w.f64s(&o.first_moment);
            w.f64s(&o.second_moment);
            for rng in [&s.batch_rng, &s.pair_rng, &s.dp_rng] {
                let snap = RngSnapshot::capture(rng);
                w.bytes(&snap.seed);
                w.u64(snap.stream);
                w.bytes(&snap.word_pos.to_le_bytes());
            }
            w.u64(s.history.len() as u64);
            for r in &s.history {
                let l = &r.losses;
                w.u64(r.epoch as u64);
                w.f64s(&[r.lr, l.l_cls, l.l_tri, l.l_gmn, l.l_pic_pos, l.l_pic_neg, l.lambda, l.total]);
            }
            w.u64(text.len() as u64);
            w.bytes(text.as_bytes());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(GmnError::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(GmnError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let positive = r.u32()?;
        if positive as usize != POSITIVE_LOGIT {
            return Err(GmnError::Corrupt(format!("positive logit index {positive} is not supported")));
        }
        let flags = r.u32()?;
        if flags & !(FLAG_MNET | FLAG_STATE | FLAG_MNET_NORM) != 0 || flags & (FLAG_MNET | FLAG_MNET_NORM) == FLAG_MNET_NORM {
            return Err(GmnError::Corrupt(format!("unknown flags {flags:#x}")));
        }

        let num_layers = r.count(1 << 16)?;
        if num_layers == 0 {
            return Err(GmnError::Corrupt("encoder has no layers".into()));
        }
        let dims = (0..=num_layers).map(|_| r.count(1 << 24)).collect::<Result<Vec<_>>>()?;
        let dp_site = r.count(1 << 16)?;
        let layers = dims
            .windows(2)
            .map(|w| r.dense(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = r.count(1 << 24)?;
        let classifier = r.dense(dims[num_layers], num_classes)?;
        let class_identities = (0..num_classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams {
            layers,
            dp_site,
            classifier,
        };
        encoder
            .validate()
            .map_err(|e| GmnError::Corrupt(format!("encoder: {e}")))?;

        let metric_net = if flags & FLAG_MNET != 0 {
            let d = r.count(1 << 24)?;
            let h = r.count(1 << 24)?;
            let m = MetricNetParams {
                layer1: r.dense(d, h)?,
                layer2: r.dense(h, 2)?,
                normalize_inputs: flags & FLAG_MNET_NORM != 0,
            };
            m.validate().map_err(|e| GmnError::Corrupt(format!("metric net: {e}")))?;
            if d != encoder.embedding_dim() {
                return Err(GmnError::Corrupt(format!(
                    "metric net expects dimension {d}, encoder produces {}",
                    encoder.embedding_dim()
                )));
            }
            Some(m)
        } else {
            None
        };
        let model = GmnModel {
            encoder,
            metric_net,
            class_identities,
        };

        let out = if flags & FLAG_STATE != 0 {
            let epoch = r.u64()? as usize;
            let iteration = r.u64()?;
            let code = r.u32()?;
            let kind = OptimizerKind::from_code(code)
                .ok_or_else(|| GmnError::Corrupt(format!("unknown optimizer code {code}")))?;
            let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let steps = r.u64()?;
            let moments = r.count_u64(bytes.len() / 16)?;
            let expected = match kind {
                OptimizerKind::Adam => model.param_len(),
                OptimizerKind::Sgd => 0,
            };
            if moments != expected {
                return Err(GmnError::Corrupt(format!(
                    "optimizer has {moments} moments, model needs {expected}"
                )));
            }
            let first_moment = r.f64s(moments)?;
            let second_moment = r.f64s(moments)?;
            let mut rngs = Vec::with_capacity(3);
            for _ in 0..3 {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                rngs.push(RngSnapshot { seed, stream, word_pos }.restore());
            }
            let dp_rng = rngs.pop().expect("three streams");
            let pair_rng = rngs.pop().expect("three streams");
            let batch_rng = rngs.pop().expect("three streams");
            let n = r.count_u64(bytes.len() / 72)?;
            let mut history = Vec::with_capacity(n);
            for _ in 0..n {
                let epoch = r.u64()? as usize;
                let v = r.f64s(8)?;
                history.push(EpochRecord {
                    epoch,
                    lr: v[0],
                    losses: LossBreakdown {
                        l_cls: v[1],
                        l_tri: v[2],
                        l_gmn: v[3],
                        l_pic_pos: v[4],
                        l_pic_neg: v[5],
                        lambda: v[6],
                        total: v[7],
                    },
                });
            }
            let len = r.count_u64(bytes.len())?;
            let config_text = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| GmnError::Corrupt("config text is not UTF-8".into()))?;
            Checkpoint::Train {
                state: TrainState {
                    epoch,
                    iteration,
                    model,
                    optimizer: Optimizer {
                        kind,
                        beta1,
                        beta2,
                        eps,
                        steps,
                        first_moment,
                        second_moment,
                    },
                    batch_rng,
                    pair_rng,
                    dp_rng,
                    history,
                },
                config_text,
            }
        } else {
            Checkpoint::Model(model)
        };
        if r.pos != bytes.len() {
            return Err(GmnError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| GmnError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| GmnError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn dense(&mut self, d: &Dense) {
        self.f64s(&d.weights);
        self.f64s(&d.bias);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            GmnError::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| GmnError::Corrupt("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn count(&mut self, max: usize) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > max {
            return Err(GmnError::Corrupt(format!("implausible size {v}")));
        }
        Ok(v)
    }
    fn count_u64(&mut self, max: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > max as u64 {
            return Err(GmnError::Corrupt(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
    fn dense(&mut self, d_in: usize, d_out: usize) -> Result<Dense> {
        let weights = self.f64s(d_in * d_out)?;
        let bias = self.f64s(d_out)?;
        Ok(Dense {
            d_in,
            d_out,
            weights,
            bias,
        })
    }
}

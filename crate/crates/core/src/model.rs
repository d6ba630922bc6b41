//! Shared perception network: convolutional BEV encoder, region tokens,
//! gated cross-attention fusion and the transposed-convolution detector,
//! plus the parameters of every learned transmit policy.
//!
//! All forward passes are recorded on a [`Tape`]; parameters live in a
//! [`ParamStore`] addressed by the ids held in [`Network`].

use crate::autograd::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{purpose, RngKey};
use crate::scene::Observation;

pub const INPUT_CHANNELS: usize = 2;
pub const INPUT_SIDE: usize = 64;
pub const FEAT_SIDE: usize = 8;
pub const N_REGIONS: usize = FEAT_SIDE * FEAT_SIDE;
pub const FEAT_DIM: usize = 32;
pub const BYTES_PER_REGION: usize = FEAT_DIM * 4;
pub const N_AGENTS: usize = 4;
pub const SENDER_LANES: usize = N_AGENTS - 1;
pub const LN_EPS: f64 = 1e-5;

pub const ENC_CHANNELS: [usize; 4] = [8, 16, 32, 32];
pub const ENC_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const DET_CHANNELS: [usize; 3] = [16, 8, 1];
const FUSE_FFN: usize = 64;
const EMBED_INIT: f64 = 0.02;

pub const R2T_DIM: usize = 128;
pub const R2T_HEADS: usize = 4;
pub const R2T_FFN: usize = 256;
pub const R2T_LAYERS: usize = 2;
pub const R2T_TOKENS: usize = N_REGIONS + 3;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub recv_norm: Norm,
    pub slot_emb: ParamId,
    pub query_pos: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub gate: Linear,
    pub out_norm: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

#[derive(Clone, Debug)]
pub struct R2tLayer {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

#[derive(Clone, Debug)]
pub struct R2t {
    pub region: Linear,
    pub agent: Linear,
    pub neighbor: Linear,
    pub budget: Linear,
    pub pos: ParamId,
    pub layers: Vec<R2tLayer>,
    pub final_norm: Norm,
    pub transmit: Linear,
    pub priority: Linear,
}

#[derive(Clone, Debug)]
pub struct Where2comm {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

#[derive(Clone, Debug)]
pub struct Ic3net {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Clone, Debug)]
pub struct MaskNet {
    pub l1: Linear,
}

/// Parameter handles of the full system. The same handles address a store
/// in any precision produced by [`ParamStore::cast`].
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Vec<Linear>,
    pub fusion: Fusion,
    pub detector: Vec<Linear>,
    pub r2t: R2t,
    pub where2comm: Where2comm,
    pub ic3net: Ic3net,
    pub mask: MaskNet,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.store.insert_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, &mut self.rng)?,
            b: self.store.insert_zeros(&format!("{name}.b"), &[fan_out])?,
        })
    }

    fn conv(&mut self, name: &str, shape: [usize; 4], fan_in: usize, bias: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.store.insert_uniform(&format!("{name}.w"), &shape, fan_in, &mut self.rng)?,
            b: self.store.insert_zeros(&format!("{name}.b"), &[bias])?,
        })
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.store.insert_uniform(name, &[fan_in, fan_out], fan_in, &mut self.rng)
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<ParamId> {
        let fan = (1.0 / (EMBED_INIT * EMBED_INIT)).round() as usize;
        self.store.insert_uniform(name, &[rows, dim], fan, &mut self.rng)
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.insert_full(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: self.store.insert_zeros(&format!("{name}.beta"), &[dim])?,
        })
    }
}

impl Network {
    /// Builds the network with freshly initialized parameters drawn from
    /// the `(seed, INIT)` stream.
    pub fn init<T: Real>(seed: u64) -> Result<(Network, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: RngKey::new(seed).with(purpose::INIT).rng(),
        };
        let k = 3;
        let mut encoder = Vec::new();
        let mut c_in = INPUT_CHANNELS;
        for (i, &c) in ENC_CHANNELS.iter().enumerate() {
            encoder.push(init.conv(&format!("enc.conv{i}"), [c, c_in, k, k], c_in * k * k, c)?);
            c_in = c;
        }
        let fusion = Fusion {
            recv_norm: init.norm("fuse.recv_norm", FEAT_DIM)?,
            slot_emb: init.embedding("fuse.slot_emb", N_REGIONS * SENDER_LANES, FEAT_DIM)?,
            query_pos: init.embedding("fuse.query_pos", N_REGIONS, FEAT_DIM)?,
            wq: init.weight("fuse.wq", FEAT_DIM, FEAT_DIM)?,
            wk: init.weight("fuse.wk", FEAT_DIM, FEAT_DIM)?,
            wv: init.weight("fuse.wv", FEAT_DIM, FEAT_DIM)?,
            gate: init.linear("fuse.gate", 2 * FEAT_DIM, FEAT_DIM)?,
            out_norm: init.norm("fuse.out_norm", FEAT_DIM)?,
            ffn1: init.linear("fuse.ffn1", FEAT_DIM, FUSE_FFN)?,
            ffn2: init.linear("fuse.ffn2", FUSE_FFN, FEAT_DIM)?,
        };
        let mut detector = Vec::new();
        let mut c_in = FEAT_DIM;
        for (i, &c) in DET_CHANNELS.iter().enumerate() {
            detector.push(init.conv(&format!("det.deconv{i}"), [c_in, c, k, k], c * k * k, c)?);
            c_in = c;
        }
        let d = R2T_DIM;
        let mut layers = Vec::new();
        for l in 0..R2T_LAYERS {
            let p = format!("pol.r2t.layer{l}");
            layers.push(R2tLayer {
                ln1: init.norm(&format!("{p}.ln1"), d)?,
                q: init.linear(&format!("{p}.q"), d, d)?,
                k: init.linear(&format!("{p}.k"), d, d)?,
                v: init.linear(&format!("{p}.v"), d, d)?,
                o: init.linear(&format!("{p}.o"), d, d)?,
                ln2: init.norm(&format!("{p}.ln2"), d)?,
                ffn1: init.linear(&format!("{p}.ffn1"), d, R2T_FFN)?,
                ffn2: init.linear(&format!("{p}.ffn2"), R2T_FFN, d)?,
            });
        }
        let r2t = R2t {
            region: init.linear("pol.r2t.region", FEAT_DIM, d)?,
            agent: init.linear("pol.r2t.agent", 4, d)?,
            neighbor: init.linear("pol.r2t.neighbor", 4 * SENDER_LANES, d)?,
            budget: init.linear("pol.r2t.budget", 1, d)?,
            pos: init.embedding("pol.r2t.pos", R2T_TOKENS, d)?,
            layers,
            final_norm: init.norm("pol.r2t.final_norm", d)?,
            transmit: init.linear("pol.r2t.transmit", d, 1)?,
            priority: init.linear("pol.r2t.priority", d, 1)?,
        };
        let where2comm = Where2comm {
            l1: init.linear("pol.where2comm.l1", FEAT_DIM, 64)?,
            l2: init.linear("pol.where2comm.l2", 64, 64)?,
            l3: init.linear("pol.where2comm.l3", 64, 1)?,
        };
        let ic3net = Ic3net {
            l1: init.linear("pol.ic3net.l1", 2 * FEAT_DIM, 64)?,
            l2: init.linear("pol.ic3net.l2", 64, 1)?,
        };
        let mask = MaskNet {
            l1: init.linear("pol.mask.l1", FEAT_DIM, 1)?,
        };
        let net = Network {
            encoder,
            fusion,
            detector,
            r2t,
            where2comm,
            ic3net,
            mask,
        };
        Ok((net, store))
    }

    /// Network structure only; the returned store holds the architecture's
    /// names and shapes and is meant to be filled from a checkpoint.
    pub fn skeleton<T: Real>() -> Result<(Network, ParamStore<T>)> {
        Network::init(0)
    }
}

/// Convenience wrappers binding parameters onto a tape.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.tape.linear(x, w, b)
    }

    pub fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let (g, b) = (self.p(n.gamma), self.p(n.beta));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.tape.constant(Tensor::new(shape, data)?))
    }
}

/// Stacks observations into an `[n, 2, 64, 64]` input batch.
pub fn observation_batch<T: Real>(obs: &[Observation]) -> Result<Tensor<T>> {
    let per = INPUT_CHANNELS * INPUT_SIDE * INPUT_SIDE;
    let mut data = Vec::with_capacity(obs.len() * per);
    for o in obs {
        if o.data.len() != per {
            return Err(Error::contract(
                "encode",
                format!("observation has {} values, expected [2, 64, 64] = {per}", o.data.len()),
            ));
        }
        data.extend(o.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(&[obs.len(), INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE], data)
}

impl Network {
    /// Encodes `x [n, 2, 64, 64]` into BEV maps `[n, 32, 8, 8]`.
    pub fn encode<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1..] != [INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE] {
            return Err(Error::contract("encode", format!("expected [n, 2, 64, 64], got {s:?}")));
        }
        let mut h = x;
        for (layer, &stride) in self.encoder.iter().zip(&ENC_STRIDES) {
            let (w, b) = (cx.p(layer.w), cx.p(layer.b));
            h = cx.tape.conv2d(h, w, b, stride, 1)?;
            h = cx.tape.relu(h)?;
        }
        Ok(h)
    }

    /// Region tokens `[64, 32]` of agent `i` from a BEV batch; row `k` is
    /// the feature vector at spatial cell `(k / 8, k % 8)`.
    pub fn regions<T: Real>(&self, cx: &mut Ctx<T>, bev: Var, i: usize) -> Result<Var> {
        let one = cx.tape.slice(bev, 0, i, 1)?;
        let flat = cx.tape.reshape(one, &[FEAT_DIM, N_REGIONS])?;
        cx.tape.transpose(flat)
    }

    /// Decodes fused tokens of several receivers into `[n, 1, 64, 64]` logits.
    pub fn detect<T: Real>(&self, cx: &mut Ctx<T>, fused: &[Var]) -> Result<Var> {
        let mut maps = Vec::with_capacity(fused.len());
        for &f in fused {
            let s = cx.tape.shape(f);
            if s != [N_REGIONS, FEAT_DIM] {
                return Err(Error::contract("detect", format!("expected [64, 32] tokens, got {s:?}")));
            }
            let t = cx.tape.transpose(f)?;
            maps.push(cx.tape.reshape(t, &[1, FEAT_DIM, FEAT_SIDE, FEAT_SIDE])?);
        }
        let mut h = cx.tape.concat(&maps, 0)?;
        let last = self.detector.len() - 1;
        for (i, layer) in self.detector.iter().enumerate() {
            let (w, b) = (cx.p(layer.w), cx.p(layer.b));
            h = cx.tape.conv_transpose2d(h, w, b, 2, 1, 1)?;
            if i != last {
                h = cx.tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Received tokens for one receiver, grouped by link.
pub struct Received {
    /// `[m, 32]` raw region features.
    pub features: Var,
    /// Slot index `region * 3 + lane` for each row.
    pub slots: Vec<usize>,
    /// Optional `[m]` multiplicative weights applied after normalization.
    pub weights: Option<Var>,
}

pub struct FuseOutput {
    pub fused: Var,
    pub attention: Option<Var>,
    pub gate: Option<Var>,
}

/// Lane of `sender` as seen from `receiver`.
pub fn sender_lane(sender: usize, receiver: usize) -> usize {
    (sender + N_AGENTS - receiver - 1) % N_AGENTS
}

impl Network {
    /// Gated cross-attention fusion of `local [64, 32]` with received
    /// tokens. With nothing received the local tokens pass through.
    pub fn fuse<T: Real>(&self, cx: &mut Ctx<T>, local: Var, received: Option<&Received>) -> Result<FuseOutput> {
        let recv = match received {
            Some(r) if !r.slots.is_empty() => r,
            _ => {
                return Ok(FuseOutput {
                    fused: local,
                    attention: None,
                    gate: None,
                })
            }
        };
        let s = cx.tape.shape(recv.features);
        if s.len() != 2 || s[1] != FEAT_DIM || s[0] != recv.slots.len() {
            return Err(Error::contract(
                "fuse",
                format!("received tokens have shape {s:?}, expected [{}, {FEAT_DIM}]", recv.slots.len()),
            ));
        }
        let f = &self.fusion;
        let mut r = cx.norm(recv.features, &f.recv_norm)?;
        if let Some(w) = recv.weights {
            r = cx.tape.mul_col(r, w)?;
        }
        let slot_table = cx.p(f.slot_emb);
        let slot = cx.tape.gather_rows(slot_table, &recv.slots)?;
        let r = cx.tape.add(r, slot)?;

        let qpos = cx.p(f.query_pos);
        let qin = cx.tape.add(local, qpos)?;
        let (wq, wk, wv) = (cx.p(f.wq), cx.p(f.wk), cx.p(f.wv));
        let q = cx.tape.matmul(qin, wq)?;
        let k = cx.tape.matmul(r, wk)?;
        let v = cx.tape.matmul(r, wv)?;
        let logits = cx.tape.matmul_nt(q, k)?;
        let logits = cx.tape.scale(logits, T::from_f64_lossy(1.0 / (FEAT_DIM as f64).sqrt()))?;
        let att = cx.tape.softmax(logits)?;
        let a = cx.tape.matmul(att, v)?;

        let cat = cx.tape.concat(&[local, a], 1)?;
        let g = cx.linear(cat, &f.gate)?;
        let g = cx.tape.sigmoid(g)?;
        let ga = cx.tape.mul(g, a)?;
        let z = cx.tape.add(local, ga)?;
        let z = cx.norm(z, &f.out_norm)?;
        let h = cx.linear(z, &f.ffn1)?;
        let h = cx.tape.relu(h)?;
        let h = cx.linear(h, &f.ffn2)?;
        let fused = cx.tape.add(z, h)?;
        Ok(FuseOutput {
            fused,
            attention: Some(att),
            gate: Some(g),
        })
    }
}

//! Checkpoint file: the full training state (network, proxies, domain
//! head, momentum, merge map, step counter, RNG position) plus a config
//! echo, with the same header/payload/sha256 layout as shard files.
//! Round-trips are bit-exact, so a resumed run replays the uninterrupted
//! trajectory.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::linalg::Mat;
use crate::loss::{DomainHeadParams, ProxyMatrix};
use crate::net::{Layer, NetParams};
use crate::shard_file::split_checked;
use crate::trainer::{Momentum, RngState, TrainState};

pub const CKPT_MAGIC: &str = "PROXYFUSE-CKPT";
pub const CKPT_VERSION: u32 = 1;

const MAX_COUNT: u64 = 1 << 33;

fn put_mat(w: &mut ByteWriter, m: &Mat) {
    w.put_u64(m.rows() as u64);
    w.put_u64(m.cols() as u64);
    w.put_f64s(m.data());
}

fn get_mat(r: &mut ByteReader) -> Result<Mat> {
    let rows = r.get_count(MAX_COUNT, "matrix rows")?;
    let cols = r.get_count(MAX_COUNT, "matrix cols")?;
    Ok(Mat::from_vec(rows, cols, r.get_f64s(rows * cols)?))
}

fn encode_payload(state: &TrainState, config_echo: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.put_str(config_echo);
    w.put_u64(state.step);
    w.put_u8(u8::from(state.fusion_done));
    // net
    w.put_u64(state.net.layers.len() as u64);
    for l in &state.net.layers {
        put_mat(&mut w, &l.weight);
        w.put_u64(l.bias.len() as u64);
        w.put_f64s(&l.bias);
    }
    // proxies
    put_mat(&mut w, state.proxies.vecs());
    for &d in state.proxies.dataset_of_all() {
        w.put_u32(d);
    }
    for &a in state.proxies.active_flags() {
        w.put_u8(u8::from(a));
    }
    // head
    put_mat(&mut w, &state.head.weight);
    w.put_u64(state.head.bias.len() as u64);
    w.put_f64s(&state.head.bias);
    // momentum
    w.put_u64(state.momentum.net_weights.len() as u64);
    for m in &state.momentum.net_weights {
        put_mat(&mut w, m);
    }
    for b in &state.momentum.net_biases {
        w.put_u64(b.len() as u64);
        w.put_f64s(b);
    }
    put_mat(&mut w, &state.momentum.proxies);
    put_mat(&mut w, &state.momentum.head_weight);
    w.put_u64(state.momentum.head_bias.len() as u64);
    w.put_f64s(&state.momentum.head_bias);
    // merge map
    w.put_u64(state.merge.n_classes() as u64);
    for &m in state.merge.remap_table() {
        w.put_u32(m);
    }
    // rng
    w.put_bytes(&state.rng.seed);
    w.put_u64(state.rng.stream);
    w.put_u128(state.rng.word_pos);
    w.into_inner()
}

fn decode_payload(buf: &[u8]) -> Result<(TrainState, String)> {
    let mut r = ByteReader::new(buf);
    let config_echo = r.get_str()?;
    let step = r.get_u64()?;
    let fusion_done = r.get_u8()? != 0;
    let n_layers = r.get_count(MAX_COUNT, "layer")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = get_mat(&mut r)?;
        let n_bias = r.get_count(MAX_COUNT, "bias")?;
        layers.push(Layer {
            weight,
            bias: r.get_f64s(n_bias)?,
        });
    }
    let net = NetParams { layers };
    let vecs = get_mat(&mut r)?;
    let n_classes = vecs.rows();
    let mut dataset_of = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        dataset_of.push(r.get_u32()?);
    }
    let mut active = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        active.push(r.get_u8()? != 0);
    }
    let proxies = ProxyMatrix::from_parts(vecs, dataset_of, active);
    let head_weight = get_mat(&mut r)?;
    let n_hb = r.get_count(MAX_COUNT, "head bias")?;
    let head = DomainHeadParams {
        weight: head_weight,
        bias: r.get_f64s(n_hb)?,
    };
    let n_mw = r.get_count(MAX_COUNT, "momentum layer")?;
    let mut net_weights = Vec::with_capacity(n_mw);
    for _ in 0..n_mw {
        net_weights.push(get_mat(&mut r)?);
    }
    let mut net_biases = Vec::with_capacity(n_mw);
    for _ in 0..n_mw {
        let n = r.get_count(MAX_COUNT, "momentum bias")?;
        net_biases.push(r.get_f64s(n)?);
    }
    let mom_proxies = get_mat(&mut r)?;
    let mom_head_weight = get_mat(&mut r)?;
    let n_mhb = r.get_count(MAX_COUNT, "momentum head bias")?;
    let momentum = Momentum {
        net_weights,
        net_biases,
        proxies: mom_proxies,
        head_weight: mom_head_weight,
        head_bias: r.get_f64s(n_mhb)?,
    };
    let n_remap = r.get_count(MAX_COUNT, "remap")?;
    let mut remap = Vec::with_capacity(n_remap);
    for _ in 0..n_remap {
        remap.push(r.get_u32()?);
    }
    let merge = crate::fusion::MergeMap::from_remap(remap)?;
    let mut seed = [0u8; 32];
    for b in seed.iter_mut() {
        *b = r.get_u8()?;
    }
    let rng = RngState {
        seed,
        stream: r.get_u64()?,
        word_pos: r.get_u128()?,
    };
    if r.remaining() != 0 {
        return Err(crate::error::Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            r.remaining()
        )));
    }
    Ok((
        TrainState {
            step,
            fusion_done,
            net,
            proxies,
            head,
            momentum,
            merge,
            rng,
        },
        config_echo,
    ))
}

pub fn checkpoint_to_bytes(state: &TrainState, config_echo: &str) -> Vec<u8> {
    let payload = encode_payload(state, config_echo);
    let digest = Sha256::digest(&payload);
    let header = format!(
        "{CKPT_MAGIC} v{CKPT_VERSION}\nstep={}\npayload_bytes={}\nend-header\n",
        state.step,
        payload.len()
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out.extend_from_slice(&digest);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TrainState, String)> {
    let (payload, _) = split_checked(bytes, CKPT_MAGIC, CKPT_VERSION)?;
    decode_payload(payload)
}

pub fn save_checkpoint<P: AsRef<Path>>(state: &TrainState, config_echo: &str, path: P) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(state, config_echo))?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(TrainState, String)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

//! Motion encoder (masked bidirectional GRU + residual block + Gaussian
//! heads) and transformer motion decoder with sinusoidal query slots.

use super::params::Forward;
use super::ModelConfig;
use crate::autodiff::{Tensor, Var};
use crate::body::FRAME_PARAMS;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One GRU step: gates fused as [r | z | n] along the hidden axis.
fn gru_step(fw: &Forward, prefix: &str, x: &Var, h: &Var, hidden: usize) -> Result<Var> {
    let gx = fw.linear(x, &format!("{prefix}.x"))?; // (1, 3H)
    let gh = fw.linear(h, &format!("{prefix}.h"))?;
    let r = gx.cols(0, hidden)?.add(&gh.cols(0, hidden)?)?.sigmoid()?;
    let z = gx
        .cols(hidden, 2 * hidden)?
        .add(&gh.cols(hidden, 2 * hidden)?)?
        .sigmoid()?;
    let n = gx
        .cols(2 * hidden, 3 * hidden)?
        .add(&r.mul(&gh.cols(2 * hidden, 3 * hidden)?)?)?
        .tanh()?;
    // h' = (1 - z) * n + z * h
    n.sub(&z.mul(&n)?)?.add(&z.mul(h)?)
}

/// Run a masked GRU over (T, D) rows; padded frames keep the carried state.
fn masked_gru(
    fw: &Forward,
    prefix: &str,
    rows: &[Var],
    valid: &[bool],
    hidden: usize,
) -> Result<Var> {
    let mut h = Var::constant(Tensor::zeros(&[1, hidden]));
    for (x, &m) in rows.iter().zip(valid) {
        if !m {
            continue; // gate: padded frames leave the state untouched
        }
        h = gru_step(fw, prefix, x, &h, hidden)?;
    }
    Ok(h)
}

/// Posterior parameters (mu, log sigma^2), each (1, Z).
pub fn motion_encode(
    fw: &Forward,
    cfg: &ModelConfig,
    params: &Var,
    valid: &[bool],
    z_c: &Var,
) -> Result<(Var, Var)> {
    let s = params.shape();
    if s.len() != 2 || s[1] != FRAME_PARAMS {
        return Err(Error::InvalidShape {
            op: "motion_encode",
            shape: s.to_vec(),
            reason: format!("expected (T, {FRAME_PARAMS})"),
        });
    }
    if valid.len() != s[0] {
        return Err(Error::InvalidArgument("valid mask length mismatch".into()));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument(
            "motion_encode: all frames masked out".into(),
        ));
    }
    let t = s[0];
    let rows: Vec<Var> = (0..t)
        .map(|i| params.rows(i, i + 1))
        .collect::<Result<_>>()?;
    let h = cfg.gru_hidden;
    let h_fwd = masked_gru(fw, "enc.gru_f", &rows, valid, h)?;
    let rev_rows: Vec<Var> = rows.iter().rev().cloned().collect();
    let rev_valid: Vec<bool> = valid.iter().rev().copied().collect();
    let h_bwd = masked_gru(fw, "enc.gru_b", &rev_rows, &rev_valid, h)?;
    let joint = Var::concat(&[&h_fwd, &h_bwd, z_c], 1)?;
    // residual block: linear -> relu -> linear with identity skip
    let r = fw.linear(&joint, "enc.res1")?.relu()?;
    let r = fw.linear(&r, "enc.res2")?;
    let feat = joint.add(&r)?;
    let mu = fw.linear(&feat, "enc.mu")?;
    let logvar = fw.linear(&feat, "enc.logvar")?;
    Ok((mu, logvar))
}

/// z = mu + exp(logvar / 2) * eps with seeded standard-normal eps.
pub fn reparameterize(mu: &Var, logvar: &Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let z = mu.shape()[1];
    let eps: Vec<f64> = (0..z).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let eps = Var::constant(Tensor::from_raw(eps, vec![1, z]));
    mu.add(&logvar.scale(0.5)?.exp()?.mul(&eps)?)
}

/// Sinusoidal positional table (T, D).
pub fn sinusoidal_queries(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let rate = (10_000f64).powf(2.0 * pair / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_raw(data, vec![t, d])
}

/// Multi-head self-attention over (T, D) with residual, pre-norm.
fn decoder_self_attn(fw: &Forward, x: &Var, prefix: &str, heads: usize) -> Result<Var> {
    let d = x.shape()[1];
    let hd = d / heads;
    let h = fw.layer_norm(x, &format!("{prefix}.ln"))?;
    let q = fw.linear(&h, &format!("{prefix}.q"))?;
    let k = fw.linear(&h, &format!("{prefix}.k"))?;
    let v = fw.linear(&h, &format!("{prefix}.v"))?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * hd, (head + 1) * hd);
        let qh = q.cols(a, b)?;
        let kh = k.cols(a, b)?;
        let vh = v.cols(a, b)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        outs.push(scores.softmax()?.matmul(&vh)?);
    }
    let refs: Vec<&Var> = outs.iter().collect();
    let cat = Var::concat(&refs, 1)?;
    x.add(&fw.linear(&cat, &format!("{prefix}.o"))?)
}

/// Decode motion parameters (T, 72) from latent z and condition z_c.
///
/// Cross-attention to the single fused memory token reduces to adding its
/// value projection at every query slot.
pub fn motion_decode(fw: &Forward, cfg: &ModelConfig, z: &Var, z_c: &Var) -> Result<Var> {
    if z.shape() != [1, cfg.latent_dim] || z_c.shape() != [1, cfg.cond_dim] {
        return Err(Error::InvalidShape {
            op: "motion_decode",
            shape: z.shape().to_vec(),
            reason: format!("expected (1, {}) and (1, {})", cfg.latent_dim, cfg.cond_dim),
        });
    }
    let t = cfg.t_frames;
    let d = cfg.dec_model_dim;
    let memory = fw.linear(&Var::concat(&[z, z_c], 1)?, "dec.memory")?; // (1, D)
    let queries = Var::constant(sinusoidal_queries(t, d));
    let ones = Var::constant(Tensor::ones(&[t, 1]));
    let mut x = queries;
    for layer in 0..cfg.dec_layers {
        x = decoder_self_attn(fw, &x, &format!("dec.l{layer}.sa"), cfg.dec_heads)?;
        // cross-attention to one memory token: value broadcast to all slots
        let mem_v = fw.linear(&memory, &format!("dec.l{layer}.mem_v"))?;
        x = x.add(&ones.matmul(&mem_v)?)?;
        let h = fw.layer_norm(&x, &format!("dec.l{layer}.ffn_ln"))?;
        let h = fw.linear(&h, &format!("dec.l{layer}.ffn1"))?.relu()?;
        let h = fw.linear(&h, &format!("dec.l{layer}.ffn2"))?;
        x = x.add(&h)?;
    }
    fw.linear(&x, "dec.head")
}

pub fn init_motion_params(ps: &mut super::params::ParamSet, cfg: &ModelConfig, seed: u64) {
    let h = cfg.gru_hidden;
    for dir in ["enc.gru_f", "enc.gru_b"] {
        ps.insert_linear(&format!("{dir}.x"), FRAME_PARAMS, 3 * h, seed);
        ps.insert_linear(&format!("{dir}.h"), h, 3 * h, seed);
    }
    let joint = 2 * h + cfg.cond_dim;
    ps.insert_linear("enc.res1", joint, joint, seed);
    ps.insert_linear("enc.res2", joint, joint, seed);
    ps.insert_linear("enc.mu", joint, cfg.latent_dim, seed);
    ps.insert_linear("enc.logvar", joint, cfg.latent_dim, seed);

    let d = cfg.dec_model_dim;
    ps.insert_linear("dec.memory", cfg.latent_dim + cfg.cond_dim, d, seed);
    for layer in 0..cfg.dec_layers {
        let p = format!("dec.l{layer}");
        ps.insert_layer_norm(&format!("{p}.sa.ln"), d);
        ps.insert_linear(&format!("{p}.sa.q"), d, d, seed);
        ps.insert_linear(&format!("{p}.sa.k"), d, d, seed);
        ps.insert_linear(&format!("{p}.sa.v"), d, d, seed);
        ps.insert_linear(&format!("{p}.sa.o"), d, d, seed);
        ps.insert_linear(&format!("{p}.mem_v"), d, d, seed);
        ps.insert_layer_norm(&format!("{p}.ffn_ln"), d);
        ps.insert_linear(&format!("{p}.ffn1"), d, cfg.dec_ffn_dim, seed);
        ps.insert_linear(&format!("{p}.ffn2"), cfg.dec_ffn_dim, d, seed);
    }
    ps.insert_linear("dec.head", d, FRAME_PARAMS, seed);
}

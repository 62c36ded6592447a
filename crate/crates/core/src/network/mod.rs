//! Backbone `F_θ`, shape encoder, and the consistency wrapper
//! `f(x, t, c) = c_skip(t) x + c_out(t) F(c_in(t) x, t, c)`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::pointcloud::PointCloud;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Extra context channels appended to the latent: `t, sin(log t / 4), cos(log t / 4)`.
pub const TIME_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths of the backbone; input and output are 3.
    pub hidden: Vec<usize>,
    /// Per-point widths of the encoder MLP before the latent layer.
    pub encoder_hidden: Vec<usize>,
    pub sigma_data: f64,
    pub eps: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            hidden: vec![128, 256, 512, 256, 128],
            encoder_hidden: vec![64, 128],
            sigma_data: 0.5,
            eps: 0.002,
            leaky_slope: 0.01,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden.contains(&0) || self.encoder_hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.sigma_data > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("model.sigma_data and eps must be positive".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` lines; the checkpoint digest is taken over this.
    pub fn canonical(&self) -> String {
        format!(
            "model.latent_dim = {}\nmodel.hidden = {}\nmodel.encoder_hidden = {}\nmodel.sigma_data = {:?}\nschedule.eps = {:?}\nmodel.leaky_slope = {:?}\n",
            self.latent_dim,
            join(&self.hidden),
            join(&self.encoder_hidden),
            self.sigma_data,
            self.eps,
            self.leaky_slope
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for entry in crate::config::parse_kv(text, "checkpoint header")? {
            cfg.set(&entry.key, &entry.value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting; returns an error for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::{parse_list, parse_value};
        match key {
            "model.latent_dim" => self.latent_dim = parse_value(key, value)?,
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.encoder_hidden" => self.encoder_hidden = parse_list(key, value)?,
            "model.sigma_data" => self.sigma_data = parse_value(key, value)?,
            "schedule.eps" => self.eps = parse_value(key, value)?,
            "model.leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Boundary scalings `(c_skip, c_out, c_in)` at time `t`.
pub fn scalings(t: f64, sigma_data: f64, eps: f64) -> Result<(f64, f64, f64)> {
    if !(t >= eps) {
        return Err(Error::contract(format!("time {t} is below eps = {eps}")));
    }
    let s2 = sigma_data * sigma_data;
    let d = t - eps;
    let root = (t * t + s2).sqrt();
    Ok((s2 / (d * d + s2), d * sigma_data / root, 1.0 / root))
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let tt = t.ln() / 4.0;
    [t, tt.sin(), tt.cos()]
}

/// Parameter handles of one ConcatSquash layer:
/// `(x W + b) ⊙ sigmoid(ctx G + g) + ctx H`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatSquash {
    pub main_w: ParamId,
    pub main_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub hyper_w: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter layout shared by the online and target sets.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Vec<ConcatSquash>,
    pub encoder: Vec<Dense>,
    pub encoder_out: Dense,
}

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

impl Architecture {
    /// Allocates parameters in a fixed order. With `rng` the weights are
    /// Kaiming-uniform (final backbone layer zero); without it all are zero.
    pub fn build(cfg: &ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> (Architecture, ParamSet) {
        let mut ps = ParamSet::new();
        let mut init = |ps: &mut ParamSet, name: String, fan_in: usize, fan_out: usize, zero: bool| {
            let t = match rng.as_deref_mut() {
                Some(r) if !zero => kaiming(r, fan_in, fan_out),
                _ => Tensor::zeros(&[fan_in, fan_out]),
            };
            ps.add(name, t)
        };
        let ctx = cfg.latent_dim + TIME_FEATURES;
        let mut widths = vec![3];
        widths.extend(&cfg.hidden);
        widths.push(3);
        let layers = widths.len() - 1;
        let mut backbone = Vec::with_capacity(layers);
        for (i, w) in widths.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let last = i + 1 == layers;
            let p = format!("backbone.{i}");
            backbone.push(ConcatSquash {
                main_w: init(&mut ps, format!("{p}.main_w"), din, dout, last),
                main_b: ps.add(format!("{p}.main_b"), Tensor::zeros(&[dout])),
                gate_w: init(&mut ps, format!("{p}.gate_w"), ctx, dout, false),
                gate_b: ps.add(format!("{p}.gate_b"), Tensor::zeros(&[dout])),
                hyper_w: init(&mut ps, format!("{p}.hyper_w"), ctx, dout, last),
            });
        }
        let mut encoder = Vec::new();
        let mut din = 3;
        for (i, &dout) in cfg.encoder_hidden.iter().chain([&cfg.latent_dim]).enumerate() {
            encoder.push(Dense {
                w: init(&mut ps, format!("encoder.{i}.w"), din, dout, false),
                b: ps.add(format!("encoder.{i}.b"), Tensor::zeros(&[dout])),
            });
            din = dout;
        }
        let encoder_out = Dense {
            w: init(&mut ps, "encoder.out.w".into(), din, cfg.latent_dim, false),
            b: ps.add("encoder.out.b", Tensor::zeros(&[cfg.latent_dim])),
        };
        (
            Architecture {
                backbone,
                encoder,
                encoder_out,
            },
            ps,
        )
    }
}

fn tag_layer(e: Error, what: &str, layer: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{what} layer {layer}: {context}"),
        },
        other => other,
    }
}

/// Latent code `1 x latent_dim` of an `N x 3` cloud on the tape.
pub fn encode_on(tape: &mut Tape<'_>, arch: &Architecture, x: Var) -> Result<Var> {
    let mut h = x;
    let n = arch.encoder.len();
    for (i, d) in arch.encoder.iter().enumerate() {
        let run = |tape: &mut Tape<'_>| -> Result<Var> {
            let a = tape.affine(h, Var::Param(d.w), Some(Var::Param(d.b)))?;
            if i + 1 < n {
                tape.relu(a)
            } else {
                Ok(a)
            }
        };
        h = run(tape).map_err(|e| tag_layer(e, "encoder", i))?;
    }
    let run = |tape: &mut Tape<'_>| -> Result<Var> {
        let pooled = tape.max_pool_rows(h)?;
        let o = arch.encoder_out;
        tape.affine(pooled, Var::Param(o.w), Some(Var::Param(o.b)))
    };
    run(tape).map_err(|e| tag_layer(e, "encoder", n))
}

/// `F_θ(x, ctx)` for `x: N x 3`, `ctx: 1 x (latent_dim + 3)`.
pub fn backbone_on(tape: &mut Tape<'_>, arch: &Architecture, slope: f64, x: Var, ctx: Var) -> Result<Var> {
    let mut h = x;
    let n = arch.backbone.len();
    for (i, l) in arch.backbone.iter().enumerate() {
        let run = |tape: &mut Tape<'_>| -> Result<Var> {
            let main = tape.affine(h, Var::Param(l.main_w), Some(Var::Param(l.main_b)))?;
            let g = tape.affine(ctx, Var::Param(l.gate_w), Some(Var::Param(l.gate_b)))?;
            let g = tape.sigmoid(g)?;
            let hb = tape.affine(ctx, Var::Param(l.hyper_w), None)?;
            let out = tape.mul_row(main, g)?;
            let out = tape.add_row(out, hb)?;
            if i + 1 < n {
                tape.leaky_relu(out, slope)
            } else {
                Ok(out)
            }
        };
        h = run(tape).map_err(|e| tag_layer(e, "backbone", i))?;
    }
    Ok(h)
}

/// Context row `[c ‖ t ‖ sin ‖ cos]` on the tape.
pub fn context_on(tape: &mut Tape<'_>, c: Var, t: f64) -> Result<Var> {
    let tf = tape.constant(Tensor::new(vec![1, TIME_FEATURES], time_features(t).to_vec())?);
    tape.concat_cols(c, tf)
}

/// The consistency function on the tape.
pub fn consistency_on(
    tape: &mut Tape<'_>,
    arch: &Architecture,
    cfg: &ModelConfig,
    x: Var,
    t: f64,
    c: Var,
) -> Result<Var> {
    let (c_skip, c_out, c_in) = scalings(t, cfg.sigma_data, cfg.eps)?;
    let ctx = context_on(tape, c, t)?;
    let xin = tape.scale(x, c_in)?;
    let f = backbone_on(tape, arch, cfg.leaky_slope, xin, ctx)?;
    let f = tape.scale(f, c_out)?;
    let skip = tape.scale(x, c_skip)?;
    tape.add(skip, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

/// Online parameters `θ` and their EMA shadow `θ⁻` over one architecture.
#[derive(Clone, Debug)]
pub struct ConsistencyModel {
    config: ModelConfig,
    arch: Architecture,
    online: ParamSet,
    target: ParamSet,
}

impl ConsistencyModel {
    /// Seeded initialization; the target starts as a copy of the online set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (arch, online) = Architecture::build(&config, Some(&mut rng));
        let target = online.clone();
        Ok(Self {
            config,
            arch,
            online,
            target,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, arch: Architecture, online: ParamSet, target: ParamSet) -> Self {
        Self {
            config,
            arch,
            online,
            target,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self, which: Which) -> &ParamSet {
        match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        }
    }

    pub fn params_mut(&mut self, which: Which) -> &mut ParamSet {
        match which {
            Which::Online => &mut self.online,
            Which::Target => &mut self.target,
        }
    }

    /// Both sets at once, for updates that read one and write the other.
    pub fn split_mut(&mut self) -> (&mut ParamSet, &mut ParamSet) {
        (&mut self.online, &mut self.target)
    }

    pub fn is_finite(&self) -> bool {
        [&self.online, &self.target]
            .iter()
            .all(|ps| ps.iter().all(|(_, p)| p.value().is_finite()))
    }

    /// Latent code of a cloud (frozen evaluation).
    pub fn encode(&self, which: Which, pc: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::frozen(self.params(which));
        let x = tape.constant(pc.to_tensor());
        let c = encode_on(&mut tape, &self.arch, x)?;
        Ok(tape.value(c).data().to_vec())
    }

    /// `f(x, t, c)` (frozen evaluation).
    pub fn forward(&self, which: Which, x: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        if c.len() != self.config.latent_dim {
            return Err(Error::contract(format!(
                "latent has {} values, model expects {}",
                c.len(),
                self.config.latent_dim
            )));
        }
        if x.shape().len() != 2 || x.cols() != 3 {
            return Err(Error::contract(format!("forward expects N x 3 input, got {:?}", x.shape())));
        }
        let mut tape = Tape::frozen(self.params(which));
        let xv = tape.constant(x.clone());
        let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
        let y = consistency_on(&mut tape, &self.arch, &self.config, xv, t, cv)?;
        Ok(tape.value(y).clone())
    }

    /// Raw backbone output `F(x, t, c)` without boundary scalings.
    pub fn backbone(&self, which: Which, x: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::frozen(self.params(which));
        let xv = tape.constant(x.clone());
        let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
        let ctx = context_on(&mut tape, cv, t)?;
        let y = backbone_on(&mut tape, &self.arch, self.config.leaky_slope, xv, ctx)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests;

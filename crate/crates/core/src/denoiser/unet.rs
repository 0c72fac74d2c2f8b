//! Encoder-decoder noise-prediction network with residual blocks,
//! spatial self-attention and a sinusoidal timestep embedding.

use pa_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Architecture hyperparameters. Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Conditioning channels concatenated to the noisy image at the input.
    pub cond_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; its length is the number of levels.
    pub channel_mult: Vec<usize>,
    /// Levels (0 = finest) whose blocks are followed by self-attention.
    /// The bottleneck always carries one attention block.
    pub attention_levels: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    /// Fold 2×2 pixel neighbourhoods into channels before the first convolution
    /// and unfold them after the last one.
    pub pixel_unshuffle: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            cond_channels: 1,
            base_width: 32,
            channel_mult: vec![1, 2, 2],
            attention_levels: vec![2],
            res_blocks: 1,
            groups: 8,
            pixel_unshuffle: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.cond_channels >= 1, "model needs at least one condition channel");
        ensure!(self.base_width >= 2 && self.base_width.is_multiple_of(2), "base width must be even and >= 2");
        ensure!(!self.channel_mult.is_empty(), "at least one resolution level");
        ensure!(self.channel_mult.iter().all(|&m| m > 0), "channel multipliers must be positive");
        ensure!(self.res_blocks >= 1, "at least one residual block per level");
        ensure!(self.groups >= 1, "group count must be positive");
        ensure!(self.attention_levels.iter().all(|&l| l < self.levels()), "attention level out of range");
        Ok(())
    }

    /// Spatial size must survive `levels - 1` halvings (plus the unshuffle fold).
    pub fn check_image_size(&self, h: usize, w: usize) -> Result<()> {
        let factor = (1usize << (self.levels() - 1)) * if self.pixel_unshuffle { 2 } else { 1 };
        ensure!(
            h.is_multiple_of(factor) && w.is_multiple_of(factor) && h >= factor && w >= factor,
            "image {h}x{w} not divisible by {factor} required by the architecture"
        );
        Ok(())
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Sinusoidal embedding of integer timesteps, `[dim, N]`.
pub fn timestep_embedding<S: Scalar>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let n = t.len();
    let mut out = vec![S::zero(); dim * n];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        for (j, &step) in t.iter().enumerate() {
            let arg = step as f64 * freq;
            out[i * n + j] = S::lit(arg.sin());
            out[(half + i) * n + j] = S::lit(arg.cos());
        }
    }
    Tensor::from_vec(&[dim, n], out)
}

/// Parameterized U-Net. Parameters are addressed by name so checkpoints are
/// self-describing.
#[derive(Clone, Debug)]
pub struct UNet<S> {
    cfg: UNetConfig,
    params: ParamStore<S>,
}

struct Builder<'a, S> {
    store: ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        self.store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in, self.rng);
        self.store.add_uniform(format!("{name}.bias"), &[cout], fan_in, self.rng);
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.store.add_uniform(format!("{name}.weight"), &[cout, cin], cin, self.rng);
        self.store.add_uniform(format!("{name}.bias"), &[cout], cin, self.rng);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.add(format!("{name}.weight"), Tensor::full(&[c], S::one()));
        self.store.add(format!("{name}.bias"), Tensor::zeros(&[c]));
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3);
        self.linear(&format!("{name}.temb"), tdim, cout);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }

    fn attn_block(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        for part in ["q", "k", "v", "proj"] {
            self.conv(&format!("{name}.{part}"), c, c, 1);
        }
    }
}

impl<S: Scalar> UNet<S> {
    /// Fresh network; the output convolution starts at zero so an untrained
    /// model predicts zero noise.
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let fold = if cfg.pixel_unshuffle { 4 } else { 1 };
        let tdim = cfg.time_dim();
        let bw = cfg.base_width;
        b.linear("temb.0", bw, tdim);
        b.linear("temb.1", tdim, tdim);
        b.conv("conv_in", (1 + cfg.cond_channels) * fold, bw, 3);
        let mut ch = bw;
        for (lvl, &m) in cfg.channel_mult.iter().enumerate() {
            let out = bw * m;
            for r in 0..cfg.res_blocks {
                b.res_block(&format!("down.{lvl}.res.{r}"), ch, out, tdim);
                ch = out;
                if cfg.attention_levels.contains(&lvl) {
                    b.attn_block(&format!("down.{lvl}.attn.{r}"), ch);
                }
            }
        }
        b.res_block("mid.res.0", ch, ch, tdim);
        b.attn_block("mid.attn", ch);
        b.res_block("mid.res.1", ch, ch, tdim);
        for (lvl, &m) in cfg.channel_mult.iter().enumerate().rev() {
            let out = bw * m;
            for r in 0..cfg.res_blocks {
                let cin = if r == 0 { ch + out } else { ch };
                b.res_block(&format!("up.{lvl}.res.{r}"), cin, out, tdim);
                ch = out;
                if cfg.attention_levels.contains(&lvl) {
                    b.attn_block(&format!("up.{lvl}.attn.{r}"), ch);
                }
            }
        }
        b.norm("norm_out", ch);
        b.zero_conv("conv_out", ch, fold, 3);
        Ok(Self { cfg, params: b.store })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> UNet<T> {
        let mut store = ParamStore::new();
        for (name, value) in self.params.iter() {
            store.add(name, value.cast());
        }
        UNet { cfg: self.cfg.clone(), params: store }
    }

    fn p(&self, g: &mut Graph<S>, name: &str) -> Var {
        let id = self.params.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.params, id)
    }

    fn norm(&self, g: &mut Graph<S>, name: &str, x: Var) -> Var {
        let c = g.shape(x)[0];
        let w = self.p(g, &format!("{name}.weight"));
        let b = self.p(g, &format!("{name}.bias"));
        g.group_norm(x, w, b, group_count(c, self.cfg.groups))
    }

    fn conv(&self, g: &mut Graph<S>, name: &str, x: Var) -> Var {
        let w = self.p(g, &format!("{name}.weight"));
        let b = self.p(g, &format!("{name}.bias"));
        g.conv2d(x, w, b)
    }

    fn linear(&self, g: &mut Graph<S>, name: &str, x: Var) -> Var {
        let w = self.p(g, &format!("{name}.weight"));
        let b = self.p(g, &format!("{name}.bias"));
        g.linear(x, w, b)
    }

    fn res_block(&self, g: &mut Graph<S>, name: &str, x: Var, temb: Var) -> Var {
        let h = self.norm(g, &format!("{name}.norm1"), x);
        let h = g.silu(h);
        let h = self.conv(g, &format!("{name}.conv1"), h);
        let e = self.linear(g, &format!("{name}.temb"), temb);
        let h = g.add_channels(h, e);
        let h = self.norm(g, &format!("{name}.norm2"), h);
        let h = g.silu(h);
        let h = self.conv(g, &format!("{name}.conv2"), h);
        let skip = if self.params.find(&format!("{name}.skip.weight")).is_some() { self.conv(g, &format!("{name}.skip"), x) } else { x };
        g.add(skip, h)
    }

    fn attn_block(&self, g: &mut Graph<S>, name: &str, x: Var) -> Var {
        let h = self.norm(g, &format!("{name}.norm"), x);
        let q = self.conv(g, &format!("{name}.q"), h);
        let k = self.conv(g, &format!("{name}.k"), h);
        let v = self.conv(g, &format!("{name}.v"), h);
        let a = g.attention(q, k, v);
        let a = self.conv(g, &format!("{name}.proj"), a);
        g.add(x, a)
    }

    /// `input: [1 + cond_channels, N, H, W]` (noisy image first), `t` one step per image.
    /// Returns the predicted noise `[1, N, H, W]`.
    pub fn forward(&self, g: &mut Graph<S>, input: Var, t: &[usize]) -> Var {
        let cfg = &self.cfg;
        let shape = g.shape(input).to_vec();
        assert_eq!(shape[0], 1 + cfg.cond_channels, "input channels");
        assert_eq!(shape[1], t.len(), "one timestep per image");

        let emb = g.input(timestep_embedding(t, cfg.base_width));
        let emb = self.linear(g, "temb.0", emb);
        let emb = g.silu(emb);
        let emb = self.linear(g, "temb.1", emb);
        // Every block consumes the embedding through SiLU first.
        let temb = g.silu(emb);

        let mut h = if cfg.pixel_unshuffle { g.pixel_unshuffle(input) } else { input };
        h = self.conv(g, "conv_in", h);
        let mut skips = Vec::with_capacity(cfg.levels());
        for lvl in 0..cfg.levels() {
            for r in 0..cfg.res_blocks {
                h = self.res_block(g, &format!("down.{lvl}.res.{r}"), h, temb);
                if cfg.attention_levels.contains(&lvl) {
                    h = self.attn_block(g, &format!("down.{lvl}.attn.{r}"), h);
                }
            }
            skips.push(h);
            if lvl + 1 < cfg.levels() {
                h = g.avg_pool2(h);
            }
        }
        h = self.res_block(g, "mid.res.0", h, temb);
        h = self.attn_block(g, "mid.attn", h);
        h = self.res_block(g, "mid.res.1", h, temb);
        for lvl in (0..cfg.levels()).rev() {
            for r in 0..cfg.res_blocks {
                if r == 0 {
                    let skip = skips[lvl];
                    h = g.concat(&[h, skip]);
                }
                h = self.res_block(g, &format!("up.{lvl}.res.{r}"), h, temb);
                if cfg.attention_levels.contains(&lvl) {
                    h = self.attn_block(g, &format!("up.{lvl}.attn.{r}"), h);
                }
            }
            if lvl > 0 {
                h = g.upsample2(h);
            }
        }
        h = self.norm(g, "norm_out", h);
        h = g.silu(h);
        h = self.conv(g, "conv_out", h);
        if cfg.pixel_unshuffle {
            h = g.pixel_shuffle(h);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig { cond_channels: 2, base_width: 8, channel_mult: vec![1, 2], attention_levels: vec![1], groups: 4, ..Default::default() }
    }

    #[test]
    fn output_shape_matches_noisy_input() {
        let net = UNet::<f32>::new(tiny(), 0).unwrap();
        for &(h, w) in &[(8usize, 8usize), (16, 8)] {
            let mut g = Graph::new(false);
            let x = g.input(Tensor::full(&[3, 2, h, w], 0.3));
            let y = net.forward(&mut g, x, &[1, 999]);
            assert_eq!(g.shape(y), &[1, 2, h, w]);
        }
    }

    #[test]
    fn untrained_network_predicts_zero() {
        let net = UNet::<f32>::new(tiny(), 3).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(Tensor::full(&[3, 1, 8, 8], -0.7));
        let y = net.forward(&mut g, x, &[500]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_count_divides_channels() {
        assert_eq!(group_count(32, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(3, 8), 3);
        assert_eq!(group_count(7, 4), 1);
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding::<f64>(&[1, 2, 1000], 16);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        let col = |j: usize| (0..16).map(|i| e.data()[i * 3 + j]).collect::<Vec<_>>();
        assert_ne!(col(0), col(1));
        assert_ne!(col(1), col(2));
    }

    #[test]
    fn rejects_indivisible_images() {
        let cfg = UNetConfig::default();
        assert!(cfg.check_image_size(32, 32).is_ok());
        assert!(cfg.check_image_size(30, 32).is_err());
    }
}

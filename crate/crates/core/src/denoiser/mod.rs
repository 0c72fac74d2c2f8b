//! The conditional noise predictor `ε_θ(x_t, t, c)` and its checkpoint format.
//!
//! Conditioning shots are concatenated to the noisy image as extra input
//! channels. The null condition used for unconditional prediction is all
//! zeros.

mod unet;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use pa_nn::{Graph, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::error::{ensure, Error, Result};
use crate::phantom::Image;

pub use unet::{timestep_embedding, UNet, UNetConfig};

/// Images per forward pass. Fixed so that batch composition, and therefore
/// every floating-point result, is independent of how callers group work.
pub const PREDICT_CHUNK: usize = 16;

const META_KEY: &str = "pa_diffusion";

/// Anything that predicts noise from `(x_t, t, condition)`.
///
/// Buffers are flat and row-major: `x` is `[N, H, W]`, `cond` is
/// `[N, C, H, W]` with `C = cond_channels()`, and the result is `[N, H, W]`.
pub trait NoiseModel {
    fn cond_channels(&self) -> usize;

    /// Whether the null condition was seen in training.
    fn supports_unconditional(&self) -> bool;

    fn predict_batch(&self, x: &[f32], cond: &[f32], t: &[usize], size: usize) -> Result<Vec<f32>>;
}

/// Conditioning shots in model range, one per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub shots: Vec<Image>,
}

/// Checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture: UNetConfig,
    pub n_condition_channels: usize,
    pub schedule: ScheduleParams,
    pub image_size: usize,
    pub step: u64,
    pub dropout_trained: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct NoisePredictor {
    net: UNet<f32>,
    meta: ModelMeta,
}

impl NoisePredictor {
    pub fn new(arch: UNetConfig, schedule: ScheduleParams, image_size: usize, seed: u64) -> Result<Self> {
        arch.check_image_size(image_size, image_size)?;
        let net = UNet::new(arch.clone(), seed)?;
        let meta = ModelMeta {
            n_condition_channels: arch.cond_channels,
            architecture: arch,
            schedule,
            image_size,
            step: 0,
            dropout_trained: false,
            seed,
        };
        Ok(Self { net, meta })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn net(&self) -> &UNet<f32> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut UNet<f32> {
        &mut self.net
    }

    pub fn set_step(&mut self, step: u64) {
        self.meta.step = step;
    }

    pub fn set_dropout_trained(&mut self, v: bool) {
        self.meta.dropout_trained = v;
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.meta.schedule.steps, "timestep {t} outside 1..={}", self.meta.schedule.steps);
        Ok(())
    }

    /// Predicted noise for one image.
    pub fn predict(&self, x_t: &Image, t: usize, cond: &ConditionSet) -> Result<Image> {
        ensure!(
            cond.shots.len() == self.cond_channels(),
            "model expects {} condition channels, got {}",
            self.cond_channels(),
            cond.shots.len()
        );
        let dim = x_t.dim();
        ensure!(dim.0 == dim.1, "image must be square, got {dim:?}");
        let mut c = Vec::with_capacity(dim.0 * dim.1 * cond.shots.len());
        for s in &cond.shots {
            ensure!(s.dim() == dim, "condition shape {:?} differs from x_t {dim:?}", s.dim());
            c.extend(s.iter());
        }
        let x: Vec<f32> = x_t.iter().copied().collect();
        let out = self.predict_batch(&x, &c, &[t], dim.0)?;
        Ok(Image::from_shape_vec(dim, out).expect("shape"))
    }

    /// Prediction under the all-zero null condition.
    pub fn predict_unconditional(&self, x_t: &Image, t: usize) -> Result<Image> {
        if !self.meta.dropout_trained {
            return Err(Error::Unsupported("unconditional prediction needs a model trained with condition dropout".into()));
        }
        let dim = x_t.dim();
        let null = ConditionSet { shots: vec![Image::zeros(dim); self.cond_channels()] };
        self.predict(x_t, t, &null)
    }

    fn forward_chunk(&self, x: &[f32], cond: &[f32], t: &[usize], size: usize) -> Vec<f32> {
        let (n, c, px) = (t.len(), self.cond_channels(), size * size);
        // Channel-major [1 + C, N, H, W].
        let mut input = Vec::with_capacity((1 + c) * n * px);
        input.extend_from_slice(x);
        for ch in 0..c {
            for i in 0..n {
                let off = (i * c + ch) * px;
                input.extend_from_slice(&cond[off..off + px]);
            }
        }
        let mut g = Graph::new(false);
        let xin = g.input(Tensor::from_vec(&[1 + c, n, size, size], input));
        let y = self.net.forward(&mut g, xin, t);
        g.take(y).into_vec()
    }

    /// Saves to `path` atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.net.params();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
            .iter()
            .map(|(name, v)| (name.to_string(), v.shape().to_vec(), v.data().iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, data)| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::format(path, format!("{e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        let buf = safetensors::serialize(views, &Some(header)).map_err(|e| Error::format(path, format!("{e:?}")))?;
        write_atomic(path, &buf)
    }

    /// Rebuilds a model from a checkpoint written by [`NoisePredictor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::format(path, format!("{e:?}")))?;
        let meta_json =
            header.metadata().as_ref().and_then(|m| m.get(META_KEY)).ok_or_else(|| Error::format(path, "missing model header"))?;
        let meta: ModelMeta = serde_json::from_str(meta_json).map_err(|e| Error::format(path, e))?;
        let st = SafeTensors::deserialize(&buf).map_err(|e| Error::format(path, format!("{e:?}")))?;
        let mut net = UNet::<f32>::new(meta.architecture.clone(), 0)?;
        ensure!(st.len() == net.params().len(), "{}: expected {} tensors, found {}", path.display(), net.params().len(), st.len());
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let name = net.params().name(id).to_string();
            let view = st.tensor(&name).map_err(|_| Error::format(path, format!("missing tensor {name}")))?;
            let expect = net.params().value(id).shape().to_vec();
            if view.dtype() != Dtype::F32 || view.shape() != expect.as_slice() {
                return Err(Error::format(path, format!("tensor {name} has wrong dtype or shape")));
            }
            let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            net.params_mut().set(id, Tensor::from_vec(&expect, data));
        }
        Ok(Self { net, meta })
    }
}

impl NoiseModel for NoisePredictor {
    fn cond_channels(&self) -> usize {
        self.meta.n_condition_channels
    }

    fn supports_unconditional(&self) -> bool {
        self.meta.dropout_trained
    }

    fn predict_batch(&self, x: &[f32], cond: &[f32], t: &[usize], size: usize) -> Result<Vec<f32>> {
        let (n, c, px) = (t.len(), self.cond_channels(), size * size);
        ensure!(size == self.meta.image_size, "model trained on {0}x{0} images, got {size}x{size}", self.meta.image_size);
        ensure!(x.len() == n * px, "x has {} values, expected {}", x.len(), n * px);
        ensure!(cond.len() == n * c * px, "condition has {} values, expected {} ({c} channels)", cond.len(), n * c * px);
        for &s in t {
            self.check_t(s)?;
        }
        let mut out = Vec::with_capacity(n * px);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            out.extend(self.forward_chunk(&x[start * px..end * px], &cond[start * c * px..end * c * px], &t[start..end], size));
        }
        Ok(out)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` per probe.
    pub probes: Vec<(String, usize, f64, f64)>,
}

/// Architecture used for gradient checks: two levels, width 8.
pub fn tiny_config(cond_channels: usize) -> UNetConfig {
    UNetConfig {
        cond_channels,
        base_width: 8,
        channel_mult: vec![1, 2],
        attention_levels: vec![1],
        res_blocks: 1,
        groups: 4,
        pixel_unshuffle: true,
    }
}

/// Checks the gradient of the noise-prediction loss on a tiny `f64` model at
/// `n_probes` random scalar parameters.
pub fn gradient_check(n_probes: usize, seed: u64) -> Result<GradCheck> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    let cfg = tiny_config(2);
    let mut net = UNet::<f64>::new(cfg, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // The output convolution starts at zero, which would zero every upstream
    // gradient. Give it random weights so all parameters are exercised.
    for name in ["conv_out.weight", "conv_out.bias"] {
        let id = net.params().find(name).expect("conv_out");
        for v in net.params_mut().value_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = 0.1 * z;
        }
    }
    let (n, size) = (2usize, 8usize);
    let px = n * size * size;
    let mut normal = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let input = Tensor::from_vec(&[3, n, size, size], normal(3 * px));
    let eps = Tensor::from_vec(&[1, n, size, size], normal(px));
    let t = [37usize, 912];

    let loss_of = |net: &UNet<f64>, grad: bool| -> (Graph<f64>, pa_nn::Var) {
        let mut g = Graph::new(grad);
        let x = g.input(input.clone());
        let target = g.input(eps.clone());
        let pred = net.forward(&mut g, x, &t);
        let loss = g.mse(pred, target);
        (g, loss)
    };
    let (g, loss) = loss_of(&net, true);
    net.params_mut().zero_grads();
    g.backward(loss, net.params_mut());

    let ids: Vec<_> = net.params().ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| net.params().value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-6;
    let mut probes = Vec::with_capacity(n_probes);
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_probes {
        let mut k = rng.gen_range(0..total);
        let mut pi = 0;
        while k >= sizes[pi] {
            k -= sizes[pi];
            pi += 1;
        }
        let id = ids[pi];
        let analytic = net.params().grad(id).data()[k];
        let orig = net.params().value(id).data()[k];
        let mut eval = |v: f64| {
            net.params_mut().value_mut(id).data_mut()[k] = v;
            let (g, l) = loss_of(&net, false);
            g.value(l).data()[0]
        };
        let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom == 0.0 { 0.0 } else { (analytic - numeric).abs() / denom };
        max_rel = max_rel.max(rel);
        probes.push((net.params().name(id).to_string(), k, analytic, numeric));
    }
    Ok(GradCheck { checked: probes.len(), max_rel_error: max_rel, probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cond: usize) -> NoisePredictor {
        let arch = UNetConfig { cond_channels: cond, ..tiny_config(cond) };
        NoisePredictor::new(arch, ScheduleParams::default(), 16, 4).unwrap()
    }

    fn perturb(m: &mut NoisePredictor) {
        // Non-zero output layer so predictions depend on the inputs.
        let id = m.net().params().find("conv_out.weight").unwrap();
        for (i, v) in m.net_mut().params_mut().value_mut(id).data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f32 * 0.01 - 0.06;
        }
    }

    fn image(seed: u32) -> Image {
        Image::from_shape_fn((16, 16), |(r, c)| (((r * 31 + c * 17 + seed as usize * 7) % 23) as f32 / 11.5) - 1.0)
    }

    #[test]
    fn predictions_are_finite_shaped_and_deterministic() {
        let mut m = small(3);
        perturb(&mut m);
        let cond = ConditionSet { shots: vec![image(1), image(2), image(3)] };
        for t in [1usize, 500, 1000] {
            let a = m.predict(&image(0), t, &cond).unwrap();
            assert_eq!(a.dim(), (16, 16));
            assert!(a.iter().all(|v| v.is_finite()));
            assert_eq!(a, m.predict(&image(0), t, &cond).unwrap());
        }
        assert!(m.predict(&image(0), 0, &cond).is_err());
        let short = ConditionSet { shots: vec![image(1)] };
        assert!(matches!(m.predict(&image(0), 5, &short), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn batch_results_do_not_depend_on_grouping() {
        let mut m = small(1);
        perturb(&mut m);
        let n = 20;
        let x: Vec<f32> = (0..n).flat_map(|i| image(i).into_iter()).collect();
        let c: Vec<f32> = (0..n).flat_map(|i| image(i + 50).into_iter()).collect();
        let t: Vec<usize> = (0..n as usize).map(|i| 1 + i * 37).collect();
        let all = m.predict_batch(&x, &c, &t, 16).unwrap();
        for i in 0..n as usize {
            let one = m.predict_batch(&x[i * 256..(i + 1) * 256], &c[i * 256..(i + 1) * 256], &t[i..i + 1], 16).unwrap();
            assert_eq!(&all[i * 256..(i + 1) * 256], &one[..]);
        }
    }

    #[test]
    fn unconditional_requires_dropout_training() {
        let mut m = small(3);
        assert!(matches!(m.predict_unconditional(&image(0), 10), Err(Error::Unsupported(_))));
        m.set_dropout_trained(true);
        perturb(&mut m);
        let a = m.predict_unconditional(&image(0), 10).unwrap();
        assert_eq!(a.dim(), (16, 16));
        assert_eq!(a, m.predict_unconditional(&image(0), 10).unwrap());
        let zeros = ConditionSet { shots: vec![Image::zeros((16, 16)); 3] };
        assert_eq!(a, m.predict(&image(0), 10, &zeros).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small(3);
        perturb(&mut m);
        m.set_step(42);
        let path = dir.path().join("sub/model.safetensors");
        m.save(&path).unwrap();
        assert!(!dir.path().join("sub/model.safetensors.tmp").exists());
        let back = NoisePredictor::load(&path).unwrap();
        assert_eq!(back.meta(), m.meta());
        let cond = ConditionSet { shots: vec![image(1), image(2), image(3)] };
        assert_eq!(back.predict(&image(0), 77, &cond).unwrap(), m.predict(&image(0), 77, &cond).unwrap());
        assert!(matches!(NoisePredictor::load(&dir.path().join("none")), Err(Error::NotFound(_))));
        fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
        assert!(matches!(NoisePredictor::load(&dir.path().join("junk")), Err(Error::Format { .. })));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let r = gradient_check(50, 1).unwrap();
        assert_eq!(r.checked, 50);
        assert!(r.max_rel_error < 1e-3, "max relative error {}: {:?}", r.max_rel_error, r.probes);
        assert!(r.probes.iter().filter(|p| p.2 != 0.0).count() > 40);
    }
}

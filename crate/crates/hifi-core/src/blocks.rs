//! The network's distinctive layers.
//!
//! Color and frequency stems (the frequency stream runs a fixed
//! Laplacian-of-Gaussian band-pass between its convolutions), the
//! multi-resolution branch stack, the self-attention localization head that
//! produces per-pixel embeddings, partial convolutions over masked images,
//! and the per-level classification heads.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{self, Reduce};
use crate::tensor::{ParamSet, Tensor};

// ---------------------------------------------------------------------------
// Architecture configuration
// ---------------------------------------------------------------------------

/// Channel/resolution layout of the extractor and its attached modules.
///
/// `branch_widths[i]` is the width of branch i+1; branch 4 runs at the input
/// resolution and each coarser branch at half the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_res: usize,
    /// Channels per stem stream; the two streams concatenate to twice this.
    pub stem_channels: usize,
    pub log_size: usize,
    pub log_sigma: f64,
    pub branch_widths: [usize; 4],
    pub attention_channels: usize,
    /// Power-of-two downsampling applied before the attention matrix.
    pub attention_factor: usize,
    /// Dimension D of the per-pixel localization embedding.
    pub embed_dim: usize,
    pub pconv_channels: usize,
    /// Ablation switch: with the partial-convolution pathway off, the
    /// level-4 head sees only pooled branch-4 features.
    pub pconv_on: bool,
    /// Byte budget for the (H*W)^2 attention matrix.
    pub attention_budget: usize,
}

pub const DEFAULT_ATTENTION_BUDGET: usize = 64 << 20;

impl ArchConfig {
    /// Desk-scale default: 32x32 inputs, widths 16/24/32/48 from branch 4
    /// down to branch 1, D = 18.
    pub fn desk() -> Self {
        ArchConfig {
            input_res: 32,
            stem_channels: 6,
            log_size: 5,
            log_sigma: 1.0,
            branch_widths: [48, 32, 24, 16],
            attention_channels: 16,
            attention_factor: 2,
            embed_dim: 18,
            pconv_channels: 8,
            pconv_on: true,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }

    /// Minimal config for gradient checks: 8x8 input, 2 stem channels.
    pub fn tiny() -> Self {
        ArchConfig {
            input_res: 8,
            stem_channels: 1,
            log_size: 3,
            log_sigma: 0.8,
            branch_widths: [5, 4, 3, 2],
            attention_channels: 2,
            attention_factor: 1,
            embed_dim: 3,
            pconv_channels: 2,
            pconv_on: true,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }

    /// Full-scale layout mirroring the published constants (256x256 input,
    /// branch resolutions 256/128/64/32).
    pub fn paper() -> Self {
        ArchConfig {
            input_res: 256,
            stem_channels: 32,
            log_size: 5,
            log_sigma: 1.0,
            branch_widths: [192, 128, 96, 64],
            attention_channels: 32,
            attention_factor: 8,
            embed_dim: 18,
            pconv_channels: 16,
            pconv_on: true,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown architecture preset {other:?}"))),
        }
    }

    /// Per-branch spatial resolutions, index 0 = branch 1 (coarsest).
    pub fn resolutions(&self) -> [usize; 4] {
        [
            self.input_res / 8,
            self.input_res / 4,
            self.input_res / 2,
            self.input_res,
        ]
    }

    /// Width of branch `b` (1-based).
    pub fn width(&self, branch: usize) -> usize {
        self.branch_widths[branch - 1]
    }

    pub fn stem_out_channels(&self) -> usize {
        2 * self.stem_channels
    }

    /// Spatial side of the attention/localization grid.
    pub fn attention_res(&self) -> usize {
        self.input_res / self.attention_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_res < 8 || self.input_res % 8 != 0 {
            return Err(Error::Config(format!(
                "input resolution {} must be a positive multiple of 8",
                self.input_res
            )));
        }
        if !self.attention_factor.is_power_of_two() || self.input_res % self.attention_factor != 0 {
            return Err(Error::Config(format!(
                "attention factor {} must be a power of two dividing {}",
                self.attention_factor, self.input_res
            )));
        }
        if self.log_size % 2 == 0 || self.log_size < 3 {
            return Err(Error::Config(format!("LoG size {} must be odd and >= 3", self.log_size)));
        }
        if self.stem_channels == 0
            || self.branch_widths.iter().any(|&w| w == 0)
            || self.attention_channels == 0
            || self.embed_dim == 0
            || self.pconv_channels == 0
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let hw = self.attention_res() * self.attention_res();
        let need = hw * hw * std::mem::size_of::<f64>();
        if need > self.attention_budget {
            return Err(Error::Budget(format!(
                "attention matrix needs {need} bytes for a {hw}x{hw} grid, budget is {}; \
                 raise attention_factor to reduce the localization resolution",
                self.attention_budget
            )));
        }
        Ok(())
    }

    /// Canonical key=value block, digested into checkpoints.
    pub fn to_config_string(&self) -> String {
        format!(
            "input_res = {}\nstem_channels = {}\nlog_size = {}\nlog_sigma = {}\n\
             branch_widths = {},{},{},{}\nattention_channels = {}\nattention_factor = {}\n\
             embed_dim = {}\npconv_channels = {}\npconv_on = {}\nattention_budget = {}\n",
            self.input_res,
            self.stem_channels,
            self.log_size,
            self.log_sigma,
            self.branch_widths[0],
            self.branch_widths[1],
            self.branch_widths[2],
            self.branch_widths[3],
            self.attention_channels,
            self.attention_factor,
            self.embed_dim,
            self.pconv_channels,
            self.pconv_on,
            self.attention_budget
        )
    }
}

// ---------------------------------------------------------------------------
// Laplacian-of-Gaussian kernel
// ---------------------------------------------------------------------------

/// Fixed zero-sum band-pass kernel: the discrete 5-point Laplacian of a
/// Gaussian sampled on the kernel grid, normalized to exactly zero sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LoGKernel {
    pub size: usize,
    pub sigma: f64,
    weights: Vec<f64>,
}

impl LoGKernel {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || size < 3 {
            return Err(Error::Config(format!("LoG size {size} must be odd and >= 3")));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("LoG sigma {sigma} must be positive")));
        }
        let k = size as isize;
        let half = (k - 1) / 2;
        let gauss = |y: isize, x: isize| -> f64 {
            let (fy, fx) = (y as f64, x as f64);
            (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp()
        };
        let mut weights = vec![0.0; size * size];
        for i in 0..k {
            for j in 0..k {
                let (y, x) = (i - half, j - half);
                // Summing the stencil neighbours in sorted order makes the
                // result exactly invariant under the grid symmetries.
                let mut neigh = [
                    gauss(y + 1, x),
                    gauss(y - 1, x),
                    gauss(y, x + 1),
                    gauss(y, x - 1),
                ];
                neigh.sort_by(|a, b| a.partial_cmp(b).unwrap());
                weights[(i * k + j) as usize] =
                    neigh.iter().sum::<f64>() - 4.0 * gauss(y, x);
            }
        }
        let mean: f64 = weights.iter().sum::<f64>() / (size * size) as f64;
        weights.iter_mut().for_each(|w| *w -= mean);
        Ok(LoGKernel {
            size,
            sigma,
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.weights.clone()).expect("square kernel")
    }
}

/// Per-channel convolution with the zero-sum LoG kernel; shape preserved.
pub fn log_filter(g: &mut Graph, features: NodeId, kernel: &LoGKernel) -> Result<NodeId> {
    let shape = g.value(features).shape();
    let (h, w) = (shape[1], shape[2]);
    if h < kernel.size || w < kernel.size {
        return Err(Error::ShapeMismatch {
            op: "log_filter",
            detail: format!("feature map {h}x{w} smaller than kernel size {}", kernel.size),
        });
    }
    g.depthwise_fixed(features, kernel.weights().to_vec(), kernel.size, (kernel.size - 1) / 2)
}

// ---------------------------------------------------------------------------
// Parameter binding
// ---------------------------------------------------------------------------

/// Records which graph leaves hold which named parameters so gradients can
/// be routed back into the `ParamSet` after `backward`.
pub struct ParamBind {
    pub entries: Vec<(String, NodeId)>,
    pub train: bool,
}

impl ParamBind {
    pub fn new(train: bool) -> Self {
        ParamBind {
            entries: Vec::new(),
            train,
        }
    }

    pub fn node(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> Result<NodeId> {
        let tensor = params.get(name)?.clone();
        let id = g.leaf(tensor, self.train);
        self.entries.push((name.to_string(), id));
        Ok(id)
    }

    /// Copies accumulated gradients out of the graph, keyed by name.
    pub fn collect_grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .filter_map(|(name, id)| g.grad(*id).map(|t| (name.clone(), t.data().to_vec())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Stems and branches
// ---------------------------------------------------------------------------

/// Color and frequency stems over the input image, concatenated channelwise.
pub fn stem_forward(
    g: &mut Graph,
    bind: &mut ParamBind,
    params: &ParamSet,
    cfg: &ArchConfig,
    log: &LoGKernel,
    image: NodeId,
) -> Result<NodeId> {
    let w1 = bind.node(g, params, "stem.color.conv1.w")?;
    let b1 = bind.node(g, params, "stem.color.conv1.b")?;
    let w2 = bind.node(g, params, "stem.color.conv2.w")?;
    let b2 = bind.node(g, params, "stem.color.conv2.b")?;
    let c = g.conv2d(image, w1, b1, 1, 1)?;
    let c = g.relu(c);
    let c = g.conv2d(c, w2, b2, 1, 1)?;
    let color = g.relu(c);

    let w1 = bind.node(g, params, "stem.freq.conv1.w")?;
    let b1 = bind.node(g, params, "stem.freq.conv1.b")?;
    let w2 = bind.node(g, params, "stem.freq.conv2.w")?;
    let b2 = bind.node(g, params, "stem.freq.conv2.b")?;
    let f = g.conv2d(image, w1, b1, 1, 1)?;
    let f = log_filter(g, f, log)?;
    let f = g.conv2d(f, w2, b2, 1, 1)?;
    let freq = g.relu(f);

    let _ = cfg;
    g.concat0(&[color, freq])
}

/// Four feature maps at halving resolutions; index 0 is branch 1.
pub fn branch_forward(
    g: &mut Graph,
    bind: &mut ParamBind,
    params: &ParamSet,
    cfg: &ArchConfig,
    stem_out: NodeId,
) -> Result<[NodeId; 4]> {
    let shape = g.value(stem_out).shape().to_vec();
    if shape[1] != cfg.input_res || shape[2] != cfg.input_res || shape[0] != cfg.stem_out_channels() {
        return Err(Error::ShapeMismatch {
            op: "branch_forward",
            detail: format!(
                "stem output {:?} does not match config ({} channels at {})",
                shape,
                cfg.stem_out_channels(),
                cfg.input_res
            ),
        });
    }
    let mut maps = [stem_out; 4];
    let mut cur = stem_out;
    for branch in (1..=4).rev() {
        if branch != 4 {
            cur = g.down_avg(cur, 2)?;
        }
        let w = bind.node(g, params, &format!("branch.{branch}.conv.w"))?;
        let b = bind.node(g, params, &format!("branch.{branch}.conv.b"))?;
        let conv = g.conv2d(cur, w, b, 1, 1)?;
        cur = g.relu(conv);
        maps[branch - 1] = cur;
    }
    Ok(maps)
}

/// Global average pool over H,W followed by an affine map to K logits.
pub fn classification_head(
    g: &mut Graph,
    bind: &mut ParamBind,
    params: &ParamSet,
    level: usize,
    features: NodeId,
) -> Result<NodeId> {
    let pooled = g.reduce(Reduce::Mean, features, &[1, 2])?;
    let w = bind.node(g, params, &format!("head.{level}.w"))?;
    let b = bind.node(g, params, &format!("head.{level}.b"))?;
    g.linear(w, pooled, b)
}

// ---------------------------------------------------------------------------
// Self-attention localization head
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AttentionOut {
    /// Re-weighted value map F' at the attention resolution.
    pub f_prime: NodeId,
    /// D-dimensional per-pixel embedding entering the localization loss.
    pub pixel_embed: NodeId,
    /// Row-stochastic attention matrix, kept for invariant checks.
    pub attn: NodeId,
}

/// Non-local attention over the branch-4 feature map followed by the
/// mask-projection to per-pixel embeddings.
///
/// Queries come from phi, keys from psi, values from g; attention rows are
/// softmax-normalized over key positions.
pub fn attention_localize(
    g: &mut Graph,
    bind: &mut ParamBind,
    params: &ParamSet,
    cfg: &ArchConfig,
    features: NodeId,
) -> Result<AttentionOut> {
    let shape = g.value(features).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let need = hw * hw * std::mem::size_of::<f64>();
    if need > cfg.attention_budget {
        return Err(Error::Budget(format!(
            "attention matrix needs {need} bytes for a {h}x{w} feature map, budget is {}; \
             reduce the attention resolution (raise attention_factor)",
            cfg.attention_budget
        )));
    }

    let one_by_one = |g: &mut Graph, bind: &mut ParamBind, name: &str, x: NodeId| -> Result<NodeId> {
        let wt = bind.node(g, params, &format!("attn.{name}.w"))?;
        let bt = bind.node(g, params, &format!("attn.{name}.b"))?;
        g.conv2d(x, wt, bt, 1, 0)
    };
    let f_g = one_by_one(g, bind, "g", features)?;
    let f_phi = one_by_one(g, bind, "phi", features)?;
    let f_psi = one_by_one(g, bind, "psi", features)?;

    let c_att = cfg.attention_channels;
    let g_flat = g.reshape(f_g, &[c_att, hw])?;
    let phi_flat = g.reshape(f_phi, &[c_att, hw])?;
    let psi_flat = g.reshape(f_psi, &[c_att, hw])?;

    let phi_t = g.transpose(phi_flat)?;
    let scores = g.matmul(phi_t, psi_flat)?;
    let attn = g.softmax_rows(scores)?;

    // F'[., q] mixes value columns with the q-th attention row.
    let attn_t = g.transpose(attn)?;
    let mixed = g.matmul(g_flat, attn_t)?;
    let f_prime = g.reshape(mixed, &[c_att, h, w])?;

    let wt = bind.node(g, params, "attn.proj.w")?;
    let bt = bind.node(g, params, "attn.proj.b")?;
    let pixel_embed = g.conv2d(f_prime, wt, bt, 1, 0)?;

    Ok(AttentionOut {
        f_prime,
        pixel_embed,
        attn,
    })
}

// ---------------------------------------------------------------------------
// Partial convolution
// ---------------------------------------------------------------------------

/// Convolution renormalized over unmasked pixels, plus the propagated mask.
///
/// At each output site the response is kernel . (input masked over the
/// window) * (in-bounds window size / window mask sum) + bias where the
/// window holds any masked-in pixel, and 0 (without bias) elsewhere. The
/// mask does not take gradients.
pub fn partial_conv(
    g: &mut Graph,
    input: NodeId,
    mask: &Tensor,
    kernel: NodeId,
    bias: NodeId,
    stride: usize,
    pad: usize,
) -> Result<(NodeId, Tensor)> {
    let in_shape = g.value(input).shape();
    if mask.shape() != [1, in_shape[1], in_shape[2]] {
        return Err(Error::ShapeMismatch {
            op: "partial_conv",
            detail: format!(
                "mask shape {:?} does not match input {:?}",
                mask.shape(),
                in_shape
            ),
        });
    }
    let k = g.value(kernel).shape()[2];
    let (renorm, validity) = ops::mask_window_stats(mask, k, stride, pad)?;

    let mask_node = g.constant(mask.clone());
    let masked = g.mul_mask(input, mask_node)?;
    let c_out = g.value(kernel).shape()[0];
    let zero_bias = g.constant(Tensor::zeros(&[c_out]));
    let raw = g.conv2d(masked, kernel, zero_bias, stride, pad)?;
    let renorm_node = g.constant(renorm);
    let scaled = g.mul_mask(raw, renorm_node)?;
    let biased = g.add_channel_bias(scaled, bias)?;
    let validity_node = g.constant(validity.clone());
    let out = g.mul_mask(biased, validity_node)?;
    Ok((out, validity))
}

/// Two stacked partial convolutions over the masked image, pooled to a
/// fixed-length embedding for the level-4 head.
pub fn masked_embed(
    g: &mut Graph,
    bind: &mut ParamBind,
    params: &ParamSet,
    mask: &Tensor,
    image: NodeId,
) -> Result<NodeId> {
    let w1 = bind.node(g, params, "pconv.1.w")?;
    let b1 = bind.node(g, params, "pconv.1.b")?;
    let (p1, m1) = partial_conv(g, image, mask, w1, b1, 1, 1)?;
    let p1 = g.relu(p1);

    let w2 = bind.node(g, params, "pconv.2.w")?;
    let b2 = bind.node(g, params, "pconv.2.b")?;
    let (p2, _m2) = partial_conv(g, p1, &m1, w2, b2, 2, 1)?;
    let p2 = g.relu(p2);

    g.reduce(Reduce::Mean, p2, &[1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn log_kernel_has_zero_sum_and_full_symmetry() {
        for (size, sigma) in [(3, 0.7), (5, 1.0), (7, 1.4)] {
            let k = LoGKernel::new(size, sigma).unwrap();
            let sum: f64 = k.weights().iter().sum();
            assert!(sum.abs() < 1e-12, "sum {sum}");
            for i in 0..size {
                for j in 0..size {
                    let w = k.weights()[i * size + j];
                    assert_eq!(w, k.weights()[j * size + i]);
                    assert_eq!(w, k.weights()[(size - 1 - i) * size + j]);
                    assert_eq!(w, k.weights()[i * size + (size - 1 - j)]);
                }
            }
        }
        assert!(LoGKernel::new(4, 1.0).is_err());
        assert!(LoGKernel::new(5, 0.0).is_err());
    }

    #[test]
    fn log_kernel_matches_discrete_laplacian_of_sampled_gaussian() {
        // Independent reconstruction: sample the Gaussian on an extended
        // grid, apply the 5-point Laplacian stencil, subtract the mean.
        let (size, sigma) = (5usize, 1.0f64);
        let k = LoGKernel::new(size, sigma).unwrap();
        let half = (size as isize - 1) / 2;
        let sample = |y: isize, x: isize| -> f64 {
            ((-((x * x + y * y) as f64)) / (2.0 * sigma * sigma)).exp()
        };
        let mut oracle = vec![0.0; size * size];
        for i in 0..size as isize {
            for j in 0..size as isize {
                let (y, x) = (i - half, j - half);
                oracle[(i as usize) * size + j as usize] =
                    sample(y + 1, x) + sample(y - 1, x) + sample(y, x + 1) + sample(y, x - 1)
                        - 4.0 * sample(y, x);
            }
        }
        let mean: f64 = oracle.iter().sum::<f64>() / (size * size) as f64;
        for ((a, &b), _) in k.weights().iter().zip(&oracle).zip(0..) {
            assert!((a - (b - mean)).abs() < 1e-10);
        }
    }

    #[test]
    fn log_filter_zeroes_constant_maps() {
        let kernel = LoGKernel::new(5, 1.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[3, 8, 8], 2.75));
        let y = log_filter(&mut g, x, &kernel).unwrap();
        // Interior sites see the full zero-sum kernel; border sites see a
        // truncated window whose weights no longer cancel, so check interior.
        let t = g.value(y);
        for c in 0..3 {
            for i in 2..6 {
                for j in 2..6 {
                    assert!(t.at(&[c, i, j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn log_filter_impulse_response_is_the_kernel() {
        let kernel = LoGKernel::new(5, 1.0).unwrap();
        let mut img = Tensor::zeros(&[1, 11, 11]);
        img.set(&[0, 5, 5], 1.0);
        let mut g = Graph::new();
        let x = g.constant(img);
        let y = log_filter(&mut g, x, &kernel).unwrap();
        let t = g.value(y);
        // The kernel is symmetric under 180-degree rotation, so the window
        // around the impulse reproduces it directly.
        for dy in 0..5usize {
            for dx in 0..5usize {
                let expected = kernel.weights()[dy * 5 + dx];
                assert!((t.at(&[0, 3 + dy, 3 + dx]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_filter_rejects_undersized_maps() {
        let kernel = LoGKernel::new(5, 1.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(log_filter(&mut g, x, &kernel).is_err());
    }

    #[test]
    fn partial_conv_with_full_mask_equals_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rng_tensor(&[3, 6, 6], &mut rng);
        let kernel = rng_tensor(&[4, 3, 3, 3], &mut rng);
        let bias = rng_tensor(&[4], &mut rng);
        let mask = Tensor::ones(&[1, 6, 6]);

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let kn = g.constant(kernel.clone());
        let bn = g.constant(bias.clone());
        let (out, updated) = partial_conv(&mut g, x, &mask, kn, bn, 1, 1).unwrap();
        let plain = ops::conv2d(&input, &kernel, &bias, 1, 1).unwrap();
        for (a, b) in g.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(updated.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn partial_conv_with_empty_mask_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = rng_tensor(&[2, 5, 5], &mut rng);
        let kernel = rng_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = rng_tensor(&[3], &mut rng);
        let mask = Tensor::zeros(&[1, 5, 5]);

        let mut g = Graph::new();
        let x = g.constant(input);
        let kn = g.constant(kernel);
        let bn = g.constant(bias);
        let (out, updated) = partial_conv(&mut g, x, &mask, kn, bn, 1, 1).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert!(updated.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_conv_hand_renormalization_case() {
        // Window values [2,4,6], all-ones kernel, mask keeps 2 of 3 in-bounds
        // positions: raw 8 scaled by 3/2 gives exactly 12.
        let input = Tensor::new(vec![1, 1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let mask = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let kernel = Tensor::ones(&[1, 1, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let x = g.constant(input);
        let kn = g.constant(kernel);
        let bn = g.constant(bias);
        let (out, updated) = partial_conv(&mut g, x, &mask, kn, bn, 1, 1).unwrap();
        assert_eq!(g.value(out).at(&[0, 0, 1]), 12.0);
        assert_eq!(updated.at(&[0, 0, 1]), 1.0);
    }

    #[test]
    fn partial_conv_mask_update_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mask_data: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let mask = Tensor::new(vec![1, 6, 6], mask_data).unwrap();
            let input = rng_tensor(&[1, 6, 6], &mut rng);
            let kernel = rng_tensor(&[1, 1, 3, 3], &mut rng);
            let bias = Tensor::zeros(&[1]);
            let mut g = Graph::new();
            let x = g.constant(input);
            let kn = g.constant(kernel);
            let bn = g.constant(bias);
            let (_, updated) = partial_conv(&mut g, x, &mask, kn, bn, 1, 1).unwrap();
            // Any masked-in pixel inside a window forces the output site on.
            for oy in 0..6usize {
                for ox in 0..6usize {
                    let mut any = false;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let iy = oy as isize + ky - 1;
                            let ix = ox as isize + kx - 1;
                            if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                                any |= mask.at(&[0, iy as usize, ix as usize]) == 1.0;
                            }
                        }
                    }
                    assert_eq!(updated.at(&[0, oy, ox]) == 1.0, any);
                }
            }
        }
    }

    #[test]
    fn partial_conv_rejects_non_binary_masks() {
        let mask = Tensor::new(vec![1, 2, 2], vec![0.0, 0.5, 1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let kn = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let bn = g.constant(Tensor::zeros(&[1]));
        assert!(partial_conv(&mut g, x, &mask, kn, bn, 1, 0).is_err());
    }

    fn attention_params(cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let c_in = cfg.width(4);
        let c = cfg.attention_channels;
        for name in ["g", "phi", "psi"] {
            p.insert(&format!("attn.{name}.w"), rng_tensor(&[c, c_in, 1, 1], rng)).unwrap();
            p.insert(&format!("attn.{name}.b"), rng_tensor(&[c], rng)).unwrap();
        }
        p.insert("attn.proj.w", rng_tensor(&[cfg.embed_dim, c, 1, 1], rng)).unwrap();
        p.insert("attn.proj.b", rng_tensor(&[cfg.embed_dim], rng)).unwrap();
        p
    }

    #[test]
    fn constant_queries_average_the_value_map() {
        let mut cfg = ArchConfig::tiny();
        cfg.branch_widths[3] = 3;
        cfg.attention_channels = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = attention_params(&cfg, &mut rng);
        // Zero phi makes every query vector the same (zero), so every score
        // row is flat and attention is uniform.
        for name in ["attn.phi.w", "attn.phi.b"] {
            let w = params.get_mut(name).unwrap();
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }

        let features = rng_tensor(&[3, 2, 2], &mut rng);
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(features.clone());
        let out = attention_localize(&mut g, &mut bind, &params, &cfg, x).unwrap();

        // Expected: each F' position equals the spatial mean of g(F).
        let gw = params.get("attn.g.w").unwrap();
        let gb = params.get("attn.g.b").unwrap();
        let f_g = ops::conv2d(&features, gw, gb, 1, 0).unwrap();
        let fp = g.value(out.f_prime);
        for c in 0..2usize {
            let mean: f64 = f_g.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            for i in 0..2 {
                for j in 0..2 {
                    assert!((fp.at(&[c, i, j]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_position_attention_is_the_identity_on_values() {
        let mut cfg = ArchConfig::tiny();
        cfg.branch_widths[3] = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = attention_params(&cfg, &mut rng);
        let features = rng_tensor(&[3, 1, 1], &mut rng);
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(features.clone());
        let out = attention_localize(&mut g, &mut bind, &params, &cfg, x).unwrap();
        let gw = params.get("attn.g.w").unwrap();
        let gb = params.get("attn.g.b").unwrap();
        let f_g = ops::conv2d(&features, gw, gb, 1, 0).unwrap();
        for (a, b) in g.value(out.f_prime).data().iter().zip(f_g.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_naive_double_loop_oracle() {
        let mut cfg = ArchConfig::tiny();
        cfg.branch_widths[3] = 3;
        cfg.attention_channels = 2;
        cfg.embed_dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = attention_params(&cfg, &mut rng);
        let features = rng_tensor(&[3, 2, 2], &mut rng);

        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(features.clone());
        let out = attention_localize(&mut g, &mut bind, &params, &cfg, x).unwrap();

        // Naive oracle: explicit position-by-position attention.
        let conv = |name: &str| {
            ops::conv2d(
                &features,
                params.get(&format!("attn.{name}.w")).unwrap(),
                params.get(&format!("attn.{name}.b")).unwrap(),
                1,
                0,
            )
            .unwrap()
        };
        let (fg, fphi, fpsi) = (conv("g"), conv("phi"), conv("psi"));
        let hw = 4usize;
        let c = 2usize;
        let col = |t: &Tensor, pos: usize| -> Vec<f64> {
            (0..c).map(|ch| t.data()[ch * hw + pos]).collect()
        };
        for q in 0..hw {
            let qv = col(&fphi, q);
            let mut scores = Vec::new();
            for k in 0..hw {
                let kv = col(&fpsi, k);
                scores.push(qv.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..hw {
                    acc += exps[k] / z * fg.data()[ch * hw + k];
                }
                let got = g.value(out.f_prime).data()[ch * hw + q];
                assert!((got - acc).abs() < 1e-10, "q={q} ch={ch}: {got} vs {acc}");
            }
        }

        // Attention rows are stochastic.
        let attn = g.value(out.attn);
        for r in 0..hw {
            let s: f64 = attn.data()[r * hw..(r + 1) * hw].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(g.value(out.pixel_embed).shape(), &[3, 2, 2]);
    }

    #[test]
    fn attention_budget_violations_ask_for_resolution_reduction() {
        let mut cfg = ArchConfig::desk();
        cfg.attention_budget = 1024;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut small = ArchConfig::tiny();
        small.branch_widths[3] = 3;
        let params = attention_params(&small, &mut rng);
        cfg.attention_channels = small.attention_channels;
        cfg.embed_dim = small.embed_dim;
        cfg.branch_widths[3] = 3;
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let err = attention_localize(&mut g, &mut bind, &params, &cfg, x).unwrap_err();
        assert!(err.to_string().contains("attention_factor"), "{err}");
    }

    fn branch_params(cfg: &ArchConfig, rng: &mut ChaCha8Rng, zero: bool) -> ParamSet {
        let mut p = ParamSet::new();
        let mut c_in = cfg.stem_out_channels();
        for branch in (1..=4).rev() {
            let w = cfg.width(branch);
            let shape = [w, c_in, 3, 3];
            let t = if zero { Tensor::zeros(&shape) } else { rng_tensor(&shape, rng) };
            p.insert(&format!("branch.{branch}.conv.w"), t).unwrap();
            p.insert(&format!("branch.{branch}.conv.b"), Tensor::zeros(&[w])).unwrap();
            c_in = w;
        }
        p
    }

    #[test]
    fn branch_shapes_follow_the_configured_resolutions() {
        let cfg = ArchConfig::desk();
        assert_eq!(cfg.resolutions(), [4, 8, 16, 32]);
        assert_eq!(ArchConfig::paper().resolutions(), [32, 64, 128, 256]);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = branch_params(&cfg, &mut rng, true);
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let stem = g.constant(rng_tensor(&[cfg.stem_out_channels(), 32, 32], &mut rng));
        let maps = branch_forward(&mut g, &mut bind, &params, &cfg, stem).unwrap();
        for branch in 1..=4 {
            let t = g.value(maps[branch - 1]);
            let r = cfg.resolutions()[branch - 1];
            assert_eq!(t.shape(), &[cfg.width(branch), r, r]);
            // zero weights -> all-zero maps
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn head_zero_weights_give_zero_logits_and_pooling_keeps_constants() {
        let mut p = ParamSet::new();
        p.insert("head.2.w", Tensor::zeros(&[4, 3])).unwrap();
        p.insert("head.2.b", Tensor::zeros(&[4])).unwrap();
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let f = g.constant(Tensor::filled(&[3, 5, 5], 1.5));
        let logits = classification_head(&mut g, &mut bind, &p, 2, f).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));

        // Pooling a constant map is the identity on the constant.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut p = ParamSet::new();
        p.insert("head.3.w", rng_tensor(&[4, 3], &mut rng)).unwrap();
        p.insert("head.3.b", rng_tensor(&[4], &mut rng)).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled(&[3, 5, 5], 1.5));
        let logits = classification_head(&mut g, &mut bind, &p, 3, f).unwrap();
        let w = p.get("head.3.w").unwrap();
        let b = p.get("head.3.b").unwrap();
        for i in 0..4 {
            let expect: f64 = (0..3).map(|j| w.data()[i * 3 + j] * 1.5).sum::<f64>() + b.data()[i];
            assert!((g.value(logits).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn head_matches_loop_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let feats = rng_tensor(&[2, 2, 2], &mut rng);
        let mut p = ParamSet::new();
        p.insert("head.1.w", rng_tensor(&[3, 2], &mut rng)).unwrap();
        p.insert("head.1.b", rng_tensor(&[3], &mut rng)).unwrap();
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let f = g.constant(feats.clone());
        let logits = classification_head(&mut g, &mut bind, &p, 1, f).unwrap();
        let w = p.get("head.1.w").unwrap();
        let b = p.get("head.1.b").unwrap();
        for i in 0..3usize {
            let mut acc = b.data()[i];
            for c in 0..2usize {
                let mean: f64 = feats.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
                acc += w.data()[i * 2 + c] * mean;
            }
            assert!((g.value(logits).data()[i] - acc).abs() < 1e-12);
        }
    }

    fn pconv_params(rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("pconv.1.w", rng_tensor(&[2, 3, 3, 3], rng)).unwrap();
        p.insert("pconv.1.b", rng_tensor(&[2], rng)).unwrap();
        p.insert("pconv.2.w", rng_tensor(&[2, 2, 3, 3], rng)).unwrap();
        p.insert("pconv.2.b", rng_tensor(&[2], rng)).unwrap();
        p
    }

    #[test]
    fn masked_embed_zero_mask_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let params = pconv_params(&mut rng);
        let image = rng_tensor(&[3, 8, 8], &mut rng);
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(image);
        let emb = masked_embed(&mut g, &mut bind, &params, &Tensor::zeros(&[1, 8, 8]), x).unwrap();
        assert!(g.value(emb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_embed_full_mask_equals_plain_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let params = pconv_params(&mut rng);
        let image = rng_tensor(&[3, 8, 8], &mut rng);
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(image.clone());
        let emb = masked_embed(&mut g, &mut bind, &params, &Tensor::ones(&[1, 8, 8]), x).unwrap();

        let c1 = ops::conv2d(&image, params.get("pconv.1.w").unwrap(), params.get("pconv.1.b").unwrap(), 1, 1).unwrap();
        let c1 = ops::relu(&c1);
        let c2 = ops::conv2d(&c1, params.get("pconv.2.w").unwrap(), params.get("pconv.2.b").unwrap(), 2, 1).unwrap();
        let c2 = ops::relu(&c2);
        let pooled = ops::reduce(Reduce::Mean, &c2, &[1, 2]).unwrap();
        for (a, b) in g.value(emb).data().iter().zip(pooled.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_embed_half_plane_matches_renormalized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let params = pconv_params(&mut rng);
        let image = rng_tensor(&[3, 4, 4], &mut rng);
        let mut mask = Tensor::zeros(&[1, 4, 4]);
        for y in 0..4 {
            for x in 2..4 {
                mask.set(&[0, y, x], 1.0);
            }
        }
        let mut g = Graph::new();
        let mut bind = ParamBind::new(false);
        let x = g.constant(image.clone());
        let emb = masked_embed(&mut g, &mut bind, &params, &mask, x).unwrap();

        // Oracle: per-site renormalized convolution computed longhand.
        let naive_pconv = |input: &Tensor, mask: &Tensor, w: &Tensor, b: &Tensor, stride: usize| -> (Tensor, Tensor) {
            let (ci, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (co, k) = (w.shape()[0], w.shape()[2]);
            let ho = (h + 2 - k) / stride + 1;
            let wo = (wd + 2 - k) / stride + 1;
            let mut out = Tensor::zeros(&[co, ho, wo]);
            let mut upd = Tensor::zeros(&[1, ho, wo]);
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        let mut msum = 0.0;
                        let mut inb = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let m = mask.at(&[0, iy as usize, ix as usize]);
                                        if c == 0 {
                                            msum += m;
                                            inb += 1.0;
                                        }
                                        acc += w.at(&[o, c, ky, kx]) * input.at(&[c, iy as usize, ix as usize]) * m;
                                    }
                                }
                            }
                        }
                        if msum > 0.0 {
                            out.set(&[o, oy, ox], acc * (inb / msum) + b.data()[o]);
                            upd.set(&[0, oy, ox], 1.0);
                        }
                    }
                }
            }
            (out, upd)
        };
        let (p1, m1) = naive_pconv(&image, &mask, params.get("pconv.1.w").unwrap(), params.get("pconv.1.b").unwrap(), 1);
        let p1 = ops::relu(&p1);
        let (p2, _) = naive_pconv(&p1, &m1, params.get("pconv.2.w").unwrap(), params.get("pconv.2.b").unwrap(), 2);
        let p2 = ops::relu(&p2);
        let pooled = ops::reduce(Reduce::Mean, &p2, &[1, 2]).unwrap();
        for (a, b) in g.value(emb).data().iter().zip(pooled.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation_catches_bad_layouts() {
        assert!(ArchConfig::desk().validate().is_ok());
        assert!(ArchConfig::tiny().validate().is_ok());
        assert!(ArchConfig::paper().validate().is_ok());
        let mut c = ArchConfig::desk();
        c.input_res = 20;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::desk();
        c.attention_factor = 3;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::desk();
        c.attention_budget = 10;
        assert!(matches!(c.validate().unwrap_err(), Error::Budget(_)));
    }
}

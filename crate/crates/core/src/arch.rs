//! Fractal pyramid model.
//!
//! The network is a recursive composition over a feature pyramid. Each scale
//! carries a shared feature (entering fusion) and a private feature (bypassing
//! fusion, mixed back in through scale-aggregation convolutions). Builders run
//! in two modes over the same traversal: parameter creation at construction,
//! and binding into a fresh graph on every forward pass, so parameter names
//! are stable for identical configs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{Graph, TensorId};
use crate::error::Error;
use crate::optim::ParamSet;
use crate::real::{real, Real};
use crate::rng::{fnv1a, SplitMix64};
use crate::tensor::{Shape, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Per-source, per-channel weighted sum of the resampled sources.
    Cws,
    /// Concatenate resampled sources, then convolve back to the target width.
    Ctc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfnConfig {
    /// Pyramid depth S; scale s runs at 1/2^(s-1) of the input resolution.
    pub scales: usize,
    /// Uniform composition count: how many times each fractal level is
    /// applied before fusing into the next.
    pub expansion: usize,
    /// Optional per-level override of `expansion`; entry s-1 is the
    /// composition count of level s. Must have exactly `scales` entries.
    pub expansion_schedule: Option<Vec<usize>>,
    pub shared_channels: usize,
    pub private_channels: usize,
    pub kernel: usize,
    pub fusion_inner: FusionKind,
    pub fusion_output: FusionKind,
    /// When false, CWS blocks use fixed 1/sources weights instead of
    /// trainable ones.
    pub cws_weighted: bool,
    /// Upper bound applied after every activation to keep the deep
    /// multiplicative paths from blowing up.
    pub clamp_hi: f64,
    /// Number of finest scales that receive a prediction head.
    pub output_scales: usize,
    pub output_channels: usize,
    pub output_activation: OutputActivation,
    pub input_channels: usize,
}

impl PfnConfig {
    /// Full-size reference configuration.
    pub fn base() -> Self {
        PfnConfig {
            scales: 5,
            expansion: 2,
            expansion_schedule: None,
            shared_channels: 18,
            private_channels: 54,
            kernel: 3,
            fusion_inner: FusionKind::Cws,
            fusion_output: FusionKind::Ctc,
            cws_weighted: true,
            clamp_hi: 1e4,
            output_scales: 4,
            output_channels: 1,
            output_activation: OutputActivation::Sigmoid,
            input_channels: 3,
        }
    }

    /// Composition count of fractal level `s` (1-based).
    pub fn expansion_at(&self, s: usize) -> usize {
        match &self.expansion_schedule {
            Some(v) => v[s - 1],
            None => self.expansion,
        }
    }

    /// Input resolutions must be multiples of this.
    pub fn resolution_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.scales < 1 {
            return fail(format!("scales must be >= 1, got {}", self.scales));
        }
        if self.shared_channels < 1 {
            return fail(format!(
                "shared_channels must be >= 1, got {}",
                self.shared_channels
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.expansion < 1 {
            return fail(format!("expansion must be >= 1, got {}", self.expansion));
        }
        if let Some(sched) = &self.expansion_schedule {
            if sched.len() != self.scales {
                return fail(format!(
                    "expansion_schedule needs one entry per scale: got {}, need {}",
                    sched.len(),
                    self.scales
                ));
            }
            if sched.iter().any(|&n| n < 1) {
                return fail("expansion_schedule entries must be >= 1".into());
            }
        }
        if self.output_scales < 1 || self.output_scales > self.scales {
            return fail(format!(
                "output_scales must be in 1..={}, got {}",
                self.scales, self.output_scales
            ));
        }
        if self.output_channels < 1 {
            return fail("output_channels must be >= 1".into());
        }
        if self.input_channels < 1 {
            return fail("input_channels must be >= 1".into());
        }
        if !(self.clamp_hi > 0.0) || !self.clamp_hi.is_finite() {
            return fail(format!("clamp_hi must be positive, got {}", self.clamp_hi));
        }
        Ok(())
    }
}

/// One pyramid level: shared feature plus optional private companion
/// (absent when `private_channels` is 0).
#[derive(Debug, Clone, Copy)]
pub struct ScaleFeat {
    pub shared: TensorId,
    pub private: Option<TensorId>,
}

/// Forward-pass handles: per-scale predictions (finest first) and the final
/// pyramid they were read from.
#[derive(Debug, Clone)]
pub struct BuiltPfn {
    pub predictions: Vec<TensorId>,
    pub pyramid: Vec<ScaleFeat>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStats {
    /// Scale-aggregation module count per scale, finest first.
    pub sa_count_per_scale: Vec<usize>,
    /// Fusion blocks inside the recursion (the output head's block is part
    /// of the head, not the recursion, and is not counted here).
    pub fusion_count: usize,
    pub param_count: usize,
    /// Worst case over all computed nodes of the fewest convolution layers
    /// between that node's value and the nearest prediction. Grows linearly
    /// with `scales`: fusion gives every feature a short escape route.
    pub max_conv_depth: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zero,
    Const(f64),
}

fn sample_init<T: Real>(init: Init, shape: Shape, seed: u64, name: &str) -> Tensor<T> {
    match init {
        Init::Uniform { fan_in } => {
            let bound = num_traits::Float::sqrt(6.0 / fan_in as f64);
            let mut r = SplitMix64::fork(seed, fnv1a(name.as_bytes()));
            Tensor::from_fn(shape, |_, _, _, _| real(r.uniform(-bound, bound)))
        }
        Init::Zero => Tensor::zeros(shape),
        Init::Const(c) => Tensor::full(shape, real(c)),
    }
}

enum Access<'s, T: Real> {
    /// Create parameters as the traversal discovers them, seeding each from
    /// its name so values do not depend on traversal order.
    Create { set: &'s mut ParamSet<T>, seed: u64 },
    /// Bind existing parameters into the graph by name.
    Bind(&'s ParamSet<T>),
}

fn make_or_bind<T: Real>(
    g: &mut Graph<T>,
    access: &mut Access<'_, T>,
    name: &str,
    shape: Shape,
    init: Init,
) -> Result<TensorId> {
    match access {
        Access::Create { set, seed } => {
            let t = sample_init(init, shape, *seed, name);
            let id = set.create(name, t)?;
            Ok(g.param(set, id))
        }
        Access::Bind(set) => {
            let id = set
                .lookup(name)
                .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))?;
            let p = g.param(set, id);
            if g.shape(p) != shape {
                return Err(Error::shape(
                    "bind",
                    format!("parameter {name:?} is {}, expected {}", g.shape(p), shape),
                ));
            }
            Ok(p)
        }
    }
}

struct Builder<'g, 's, T: Real> {
    g: &'g mut Graph<T>,
    access: Access<'s, T>,
    cfg: &'s PfnConfig,
    sa_counts: Vec<usize>,
    fusion_count: usize,
}

impl<'g, 's, T: Real> Builder<'g, 's, T> {
    fn param(&mut self, name: &str, shape: Shape, init: Init) -> Result<TensorId> {
        make_or_bind(self.g, &mut self.access, name, shape, init)
    }

    /// Convolution with bias; stride 1 keeps resolution (same padding).
    fn conv_layer(&mut self, x: TensorId, prefix: &str, cout: usize, stride: usize) -> Result<TensorId> {
        let cin = self.g.shape(x).c;
        let k = self.cfg.kernel;
        let w = self.param(
            &format!("{prefix}.w"),
            Shape::new(cout, cin, k, k),
            Init::Uniform { fan_in: cin * k * k },
        )?;
        let b = self.param(&format!("{prefix}.b"), Shape::new(cout, 1, 1, 1), Init::Zero)?;
        if stride == 1 {
            self.g.conv2d_same(x, w, Some(b))
        } else {
            self.g.conv2d(x, w, Some(b), stride, k / 2)
        }
    }

    fn act_clamp(&mut self, x: TensorId) -> Result<TensorId> {
        let r = self.g.relu(x);
        self.g.clamp(r, T::zero(), real(self.cfg.clamp_hi))
    }

    fn cat_sp(&mut self, f: &ScaleFeat) -> Result<TensorId> {
        match f.private {
            Some(p) => self.g.concat_channels(&[f.shared, p]),
            None => Ok(f.shared),
        }
    }

    /// Scale-aggregation module: both halves see the concatenation of shared
    /// and private, and each is produced by its own convolution.
    fn sa(&mut self, scale: usize, f: &ScaleFeat) -> Result<ScaleFeat> {
        let idx = self.sa_counts[scale - 1];
        self.sa_counts[scale - 1] += 1;
        let prefix = format!("sa.s{scale}.i{idx}");
        let cat = self.cat_sp(f)?;
        let sh = self.conv_layer(cat, &format!("{prefix}.shared"), self.cfg.shared_channels, 1)?;
        let shared = self.act_clamp(sh)?;
        let private = if self.cfg.private_channels > 0 {
            let pr = self.conv_layer(cat, &format!("{prefix}.private"), self.cfg.private_channels, 1)?;
            Some(self.act_clamp(pr)?)
        } else {
            None
        };
        Ok(ScaleFeat { shared, private })
    }

    /// Resolution change along fusion routes: repeated 2x average pooling
    /// down, bilinear up.
    fn resample_to(&mut self, x: TensorId, th: usize, tw: usize) -> Result<TensorId> {
        let s = self.g.shape(x);
        if s.h == th && s.w == tw {
            return Ok(x);
        }
        let pow2_down = s.h > th
            && s.h % th == 0
            && (s.h / th).is_power_of_two()
            && s.w > tw
            && s.w % tw == 0
            && s.w / tw == s.h / th;
        if pow2_down {
            let mut cur = x;
            for _ in 0..(s.h / th).trailing_zeros() {
                cur = self.g.avg_pool2(cur)?;
            }
            return Ok(cur);
        }
        self.g.bilinear_resample(x, th, tw)
    }

    /// Fuses `sources` (one feature per scale, finest first, all `width`
    /// channels) into one output per requested target scale.
    fn fusion(
        &mut self,
        sources: &[TensorId],
        width: usize,
        targets: &[usize],
        prefix: &str,
        mode: FusionKind,
        weighted: bool,
    ) -> Result<Vec<TensorId>> {
        let m = sources.len();
        let mut out = Vec::with_capacity(targets.len());
        for &a in targets {
            let ts = self.g.shape(sources[a]);
            let mut resampled = Vec::with_capacity(m);
            for &src in sources {
                resampled.push(self.resample_to(src, ts.h, ts.w)?);
            }
            let tag = format!("{prefix}.a{}", a + 1);
            let fused = match mode {
                FusionKind::Cws => {
                    let wshape = Shape::new(m, width, 1, 1);
                    let w = if weighted {
                        self.param(&format!("{tag}.w"), wshape, Init::Const(1.0 / m as f64))?
                    } else {
                        let t = Tensor::full(wshape, real::<T>(1.0 / m as f64));
                        self.g.constant(t)
                    };
                    self.g.channel_weighted_sum(&resampled, w)?
                }
                FusionKind::Ctc => {
                    let cat = self.g.concat_channels(&resampled)?;
                    let conv = self.conv_layer(cat, &tag, width, 1)?;
                    self.act_clamp(conv)?
                }
            };
            out.push(fused);
        }
        Ok(out)
    }

    /// One recursion-level fusion: shared features of scales 1..=m mix into
    /// every one of those scales; private features ride through untouched.
    fn fuse_inner(&mut self, pyr: &mut [ScaleFeat]) -> Result<()> {
        let idx = self.fusion_count;
        self.fusion_count += 1;
        let shared: Vec<TensorId> = pyr.iter().map(|f| f.shared).collect();
        let targets: Vec<usize> = (0..pyr.len()).collect();
        let fused = self.fusion(
            &shared,
            self.cfg.shared_channels,
            &targets,
            &format!("fuse.i{idx}"),
            self.cfg.fusion_inner,
            self.cfg.cws_weighted,
        )?;
        for (f, new_shared) in pyr.iter_mut().zip(fused) {
            f.shared = new_shared;
        }
        Ok(())
    }

    /// Applies fractal level `s` once, in place, to the first `s` pyramid
    /// entries: recurse on the finer levels (composed), aggregate scale `s`,
    /// then fuse the shared features of scales 1..=s.
    fn apply_level(&mut self, s: usize, pyr: &mut [ScaleFeat]) -> Result<()> {
        if s == 1 {
            pyr[0] = self.sa(1, &pyr[0])?;
            return Ok(());
        }
        for _ in 0..self.cfg.expansion_at(s - 1) {
            self.apply_level(s - 1, pyr)?;
        }
        pyr[s - 1] = self.sa(s, &pyr[s - 1])?;
        self.fuse_inner(&mut pyr[0..s])
    }

    /// Two parallel convolutions split the image into shared and private
    /// full-resolution features; average pooling forms the coarser scales.
    fn input_head(&mut self, image: TensorId) -> Result<Vec<ScaleFeat>> {
        let sc = self.cfg.shared_channels;
        let pc = self.cfg.private_channels;
        let sh = self.conv_layer(image, "input.shared", sc, 1)?;
        let shared = self.act_clamp(sh)?;
        let private = if pc > 0 {
            let pr = self.conv_layer(image, "input.private", pc, 1)?;
            Some(self.act_clamp(pr)?)
        } else {
            None
        };
        let mut pyr = vec![ScaleFeat { shared, private }];
        for s in 2..=self.cfg.scales {
            let prev = pyr[s - 2];
            let shared = self.g.avg_pool2(prev.shared)?;
            let private = match prev.private {
                Some(p) => Some(self.g.avg_pool2(p)?),
                None => None,
            };
            pyr.push(ScaleFeat { shared, private });
        }
        Ok(pyr)
    }

    /// Concatenates shared and private per scale, fuses across all scales at
    /// the requested output resolutions, and convolves each down to the
    /// prediction channels.
    fn output_head(&mut self, pyr: &[ScaleFeat]) -> Result<Vec<TensorId>> {
        let width = self.cfg.shared_channels + self.cfg.private_channels;
        let mut cat = Vec::with_capacity(pyr.len());
        for f in pyr {
            cat.push(self.cat_sp(f)?);
        }
        let targets: Vec<usize> = (0..self.cfg.output_scales).collect();
        let fused = self.fusion(
            &cat,
            width,
            &targets,
            "out.fuse",
            self.cfg.fusion_output,
            self.cfg.cws_weighted,
        )?;
        let mut preds = Vec::with_capacity(fused.len());
        for (a, &f) in fused.iter().enumerate() {
            let p = self.conv_layer(f, &format!("out.pred.s{}", a + 1), self.cfg.output_channels, 1)?;
            let p = match self.cfg.output_activation {
                OutputActivation::Sigmoid => self.g.sigmoid(p),
                OutputActivation::Linear => p,
            };
            self.g.set_label(p, format!("pred.s{}", a + 1));
            preds.push(p);
        }
        Ok(preds)
    }

    fn build(&mut self, image: TensorId) -> Result<BuiltPfn> {
        let s = self.g.shape(image);
        if s.c != self.cfg.input_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {} channels, config says {}", s.c, self.cfg.input_channels),
            ));
        }
        let m = self.cfg.resolution_multiple();
        if s.h < m || s.w < m || s.h % m != 0 || s.w % m != 0 {
            return Err(Error::Config(format!(
                "input resolution {}x{} must be a positive multiple of {m}",
                s.h, s.w
            )));
        }
        let mut pyr = self.input_head(image)?;
        for _ in 0..self.cfg.expansion_at(self.cfg.scales) {
            self.apply_level(self.cfg.scales, &mut pyr)?;
        }
        let predictions = self.output_head(&pyr)?;
        Ok(BuiltPfn {
            predictions,
            pyramid: pyr,
        })
    }
}

/// Worst case over computed nodes of the fewest convolutions on any route
/// from that node's value to a prediction. Leaves are excluded; node order
/// is construction order, so one reverse sweep relaxes every edge.
fn max_conv_escape<T: Real>(g: &Graph<T>, outputs: &[TensorId]) -> usize {
    const UNREACHED: u32 = u32::MAX;
    let n = g.node_count();
    let mut esc = vec![UNREACHED; n];
    for &o in outputs {
        esc[o.index()] = 0;
    }
    let mut worst = 0usize;
    for v in (0..n).rev() {
        let e = esc[v];
        if e == UNREACHED {
            continue;
        }
        let id = TensorId::from_index(v);
        let name = g.op_name(id);
        if name != "leaf" && e as usize > worst {
            worst = e as usize;
        }
        let step = if name == "conv2d" { 1 } else { 0 };
        for u in g.op_inputs(id) {
            let cand = e + step;
            if cand < esc[u.index()] {
                esc[u.index()] = cand;
            }
        }
    }
    worst
}

pub struct PfnModel<T: Real> {
    config: PfnConfig,
    params: ParamSet<T>,
    stats: GraphStats,
}

impl<T: Real> PfnModel<T> {
    /// Creates all parameters (reproducible from `seed`) and derives the
    /// structural stats from a throwaway forward pass at the smallest legal
    /// resolution.
    pub fn new(config: PfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let m = config.resolution_multiple();
        let image = g.leaf(Tensor::zeros(Shape::new(1, config.input_channels, m, m)), false);
        let (built, sa_counts, fusion_count) = {
            let mut b = Builder {
                g: &mut g,
                access: Access::Create {
                    set: &mut params,
                    seed,
                },
                cfg: &config,
                sa_counts: vec![0; config.scales],
                fusion_count: 0,
            };
            let built = b.build(image)?;
            (built, b.sa_counts, b.fusion_count)
        };
        let stats = GraphStats {
            sa_count_per_scale: sa_counts,
            fusion_count,
            param_count: params.value_count(),
            max_conv_depth: max_conv_escape(&g, &built.predictions),
        };
        Ok(PfnModel {
            config,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &PfnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn stats(&self) -> &GraphStats {
        &self.stats
    }

    /// Builds the forward pass into `g` and returns prediction handles,
    /// finest scale first. Pure in (parameters, image).
    pub fn forward(&self, g: &mut Graph<T>, image: TensorId) -> Result<BuiltPfn> {
        let mut b = Builder {
            g,
            access: Access::Bind(&self.params),
            cfg: &self.config,
            sa_counts: vec![0; self.config.scales],
            fusion_count: 0,
        };
        b.build(image)
    }
}

/// Relative-pose regressor: two RGB frames in, one 6-vector out per batch
/// entry (rotation vector then translation), shrunk so training starts near
/// the identity transform.
pub struct PoseNet<T: Real> {
    params: ParamSet<T>,
}

const POSE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
const POSE_OUT_SCALE: f64 = 0.01;

fn build_pose<T: Real>(
    g: &mut Graph<T>,
    access: &mut Access<'_, T>,
    target: TensorId,
    source: TensorId,
) -> Result<TensorId> {
    let ts = g.shape(target);
    let ss = g.shape(source);
    if ts != ss {
        return Err(Error::shape(
            "pose",
            format!("frame shapes differ: {ts} vs {ss}"),
        ));
    }
    let mut x = g.concat_channels(&[target, source])?;
    let mut cin = g.shape(x).c;
    for (i, &width) in POSE_WIDTHS.iter().enumerate() {
        let w = make_or_bind(
            g,
            access,
            &format!("pose.enc{}.w", i + 1),
            Shape::new(width, cin, 3, 3),
            Init::Uniform { fan_in: cin * 9 },
        )?;
        let b = make_or_bind(
            g,
            access,
            &format!("pose.enc{}.b", i + 1),
            Shape::new(width, 1, 1, 1),
            Init::Zero,
        )?;
        x = g.conv2d(x, w, Some(b), 2, 1)?;
        x = g.relu(x);
        cin = width;
    }
    x = g.mean_spatial(x);
    let w = make_or_bind(
        g,
        access,
        "pose.head.w",
        Shape::new(6, cin, 1, 1),
        Init::Uniform { fan_in: cin },
    )?;
    let b = make_or_bind(g, access, "pose.head.b", Shape::new(6, 1, 1, 1), Init::Zero)?;
    x = g.conv2d(x, w, Some(b), 1, 0)?;
    Ok(g.scale(x, real(POSE_OUT_SCALE)))
}

impl<T: Real> PoseNet<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 3, 16, 16)), false);
        let b = g.leaf(Tensor::zeros(Shape::new(1, 3, 16, 16)), false);
        build_pose(&mut g, &mut Access::Create { set: &mut params, seed }, a, b)?;
        Ok(PoseNet { params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Predicted motion of the source camera expressed in the target frame:
    /// shape (N, 6, 1, 1), rows are (rotation vector, translation).
    pub fn forward(&self, g: &mut Graph<T>, target: TensorId, source: TensorId) -> Result<TensorId> {
        build_pose(g, &mut Access::Bind(&self.params), target, source)
    }
}

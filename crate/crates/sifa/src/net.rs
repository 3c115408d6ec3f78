//! Networks realized from [`NetworkSpec`]s: named parameters, a recorded
//! forward pass and a backward pass that can skip parameter or input
//! gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sifa_core::arch::{predict_output_shape, Activation, ConvSpec, DeconvSpec, LayerSpec, NetworkSpec, NormKind, Shape};
use sifa_core::{Error, Result};

use crate::engine::*;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Vec<f32>,
}

/// Gradient buffers aligned with a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Conv { spec: ConvSpec, w: usize, b: Option<usize> },
    Deconv { spec: DeconvSpec, w: usize, b: Option<usize> },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    InstanceNorm,
    Act(Activation),
    MaxPool { kernel: usize, stride: usize },
    Upsample(usize),
    Residual { main: Vec<Node>, skip: Vec<Node>, post_relu: bool },
}

/// Per-node state saved by a recorded forward pass.
#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    Norm(NormCache),
    Output(Tensor),
    Pool { shape: [usize; 4], arg: Vec<u32> },
    Shape([usize; 4]),
    Residual { main: Vec<Cache>, skip: Vec<Cache>, out: Option<Tensor> },
}

/// Recorded forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// How batch-norm layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are left alone.
    Train,
    /// Batch statistics, folded into the running statistics.
    TrainUpdateStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Param>,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: Vec<Param>,
    nodes: Vec<Node>,
}

struct Builder<'a> {
    prefix: String,
    params: &'a mut Vec<Param>,
    buffers: &'a mut Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, len: usize) -> usize {
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let data = (0..len).map(|_| normal.sample(self.rng)).collect();
        self.params.push(Param { name: format!("{}.{name}", self.prefix), data });
        self.params.len() - 1
    }

    fn constant(&mut self, name: &str, len: usize, value: f32, buffer: bool) -> usize {
        let p = Param { name: format!("{}.{name}", self.prefix), data: vec![value; len] };
        let list = if buffer { &mut *self.buffers } else { &mut *self.params };
        list.push(p);
        list.len() - 1
    }

    fn conv(&mut self, spec: ConvSpec) -> Node {
        let w = self.weight("weight", spec.out_ch * spec.in_ch * spec.kernel * spec.kernel);
        let b = spec.bias.then(|| self.constant("bias", spec.out_ch, 0.0, false));
        Node::Conv { spec, w, b }
    }

    fn norm(&mut self, kind: NormKind, channels: usize) -> Node {
        match kind {
            NormKind::Instance => Node::InstanceNorm,
            NormKind::Batch => Node::BatchNorm {
                gamma: self.constant("gamma", channels, 1.0, false),
                beta: self.constant("beta", channels, 0.0, false),
                mean: self.constant("running_mean", channels, 0.0, true),
                var: self.constant("running_var", channels, 1.0, true),
            },
        }
    }

    fn scoped<T>(&mut self, suffix: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}.{suffix}");
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn layer(&mut self, layer: &LayerSpec) -> Node {
        match layer {
            LayerSpec::Conv(spec) => self.scoped("conv", |b| b.conv(*spec)),
            LayerSpec::Deconv(spec) => self.scoped("deconv", |b| {
                let w = b.weight("weight", spec.in_ch * spec.out_ch * spec.kernel * spec.kernel);
                let bias = spec.bias.then(|| b.constant("bias", spec.out_ch, 0.0, false));
                Node::Deconv { spec: *spec, w, b: bias }
            }),
            LayerSpec::Norm { kind, channels } => self.scoped("norm", |b| b.norm(*kind, *channels)),
            LayerSpec::Act(a) => Node::Act(*a),
            LayerSpec::MaxPool { kernel, stride } => Node::MaxPool { kernel: *kernel, stride: *stride },
            LayerSpec::Upsample { factor } => Node::Upsample(*factor),
            LayerSpec::Residual(r) => {
                let main = vec![
                    self.scoped("conv1", |b| b.conv(r.first_conv())),
                    self.scoped("norm1", |b| b.norm(r.norm, r.out_ch)),
                    Node::Act(Activation::Relu),
                    self.scoped("conv2", |b| b.conv(r.second_conv())),
                    self.scoped("norm2", |b| b.norm(r.norm, r.out_ch)),
                ];
                let skip = match r.projection() {
                    Some(p) => vec![
                        self.scoped("proj", |b| b.conv(p)),
                        self.scoped("proj_norm", |b| b.norm(r.norm, r.out_ch)),
                    ],
                    None => Vec::new(),
                };
                Node::Residual { main, skip, post_relu: r.post_relu }
            }
        }
    }
}

struct Ctx<'a> {
    params: &'a [Param],
    buffers: &'a mut [Param],
    mode: Mode,
    record: bool,
}

fn forward_nodes(nodes: &[Node], mut x: Tensor, ctx: &mut Ctx<'_>, caches: &mut Vec<Cache>) -> Tensor {
    for node in nodes {
        let (y, cache) = forward_node(node, x, ctx);
        if ctx.record {
            caches.push(cache);
        }
        x = y;
    }
    x
}

fn forward_node(node: &Node, x: Tensor, ctx: &mut Ctx<'_>) -> (Tensor, Cache) {
    let p = ctx.params;
    match node {
        Node::Conv { spec, w, b } => {
            let y = conv_forward(&x, spec, &p[*w].data, b.map(|b| p[b].data.as_slice()));
            (y, if ctx.record { Cache::Input(x) } else { Cache::Shape([0; 4]) })
        }
        Node::Deconv { spec, w, b } => {
            let y = deconv_forward(&x, spec, &p[*w].data, b.map(|b| p[b].data.as_slice()));
            (y, if ctx.record { Cache::Input(x) } else { Cache::Shape([0; 4]) })
        }
        Node::BatchNorm { gamma, beta, mean, var } => {
            let running = (ctx.mode == Mode::Eval)
                .then(|| RunningStats { mean: &ctx.buffers[*mean].data, var: &ctx.buffers[*var].data });
            let (y, cache, stats) = batch_norm_forward(&x, &p[*gamma].data, &p[*beta].data, running);
            if let (Mode::TrainUpdateStats, Some((m, v))) = (ctx.mode, stats) {
                for (r, s) in ctx.buffers[*mean].data.iter_mut().zip(&m) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
                for (r, s) in ctx.buffers[*var].data.iter_mut().zip(&v) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
            }
            (y, Cache::Norm(cache))
        }
        Node::InstanceNorm => {
            let (y, cache) = instance_norm_forward(&x);
            (y, Cache::Norm(cache))
        }
        Node::Act(a) => {
            let y = activation_forward(&x, *a);
            (y.clone(), if ctx.record { Cache::Output(y) } else { Cache::Shape([0; 4]) })
        }
        Node::MaxPool { kernel, stride } => {
            let (y, arg) = maxpool_forward(&x, *kernel, *stride);
            (y, Cache::Pool { shape: x.shape(), arg })
        }
        Node::Upsample(f) => (upsample_forward(&x, *f), Cache::Shape(x.shape())),
        Node::Residual { main, skip, post_relu } => {
            let mut main_c = Vec::new();
            let mut skip_c = Vec::new();
            let skip_out = if skip.is_empty() { x.clone() } else { forward_nodes(skip, x.clone(), ctx, &mut skip_c) };
            let mut y = forward_nodes(main, x, ctx, &mut main_c);
            y.add_assign(&skip_out);
            let out = if *post_relu { Some(activation_forward(&y, Activation::Relu)) } else { None };
            let y = out.clone().unwrap_or(y);
            let out = if ctx.record { out } else { None };
            (y, Cache::Residual { main: main_c, skip: skip_c, out })
        }
    }
}

struct BackCtx<'a> {
    params: &'a [Param],
    grads: Option<&'a mut Grads>,
}

fn param_grads<'g>(grads: &'g mut Option<&mut Grads>, w: usize, b: Option<usize>) -> Option<(&'g mut [f32], Option<&'g mut [f32]>)> {
    let g = grads.as_deref_mut()?;
    match b {
        None => Some((g.0[w].as_mut_slice(), None)),
        Some(b) => {
            // b is always pushed right after w
            debug_assert_eq!(b, w + 1);
            let (lo, hi) = g.0.split_at_mut(b);
            Some((lo[w].as_mut_slice(), Some(hi[0].as_mut_slice())))
        }
    }
}

fn backward_nodes(nodes: &[Node], caches: &[Cache], mut dy: Tensor, ctx: &mut BackCtx<'_>, need_dx: bool) -> Option<Tensor> {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let need = need_dx || i > 0;
        {
            let d = backward_node(node, cache, dy, ctx, need)?;
            dy = d
        }
    }
    Some(dy)
}

fn backward_node(node: &Node, cache: &Cache, dy: Tensor, ctx: &mut BackCtx<'_>, need_dx: bool) -> Option<Tensor> {
    let p = ctx.params;
    match (node, cache) {
        (Node::Conv { spec, w, b }, Cache::Input(x)) => {
            let grads = param_grads(&mut ctx.grads, *w, *b);
            if grads.is_none() && !need_dx {
                return None;
            }
            conv_backward(x, spec, &p[*w].data, &dy, grads, need_dx)
        }
        (Node::Deconv { spec, w, b }, Cache::Input(x)) => {
            let grads = param_grads(&mut ctx.grads, *w, *b);
            if grads.is_none() && !need_dx {
                return None;
            }
            deconv_backward(x, spec, &p[*w].data, &dy, grads, need_dx)
        }
        (Node::BatchNorm { gamma, beta, .. }, Cache::Norm(c)) => {
            let grads = ctx.grads.as_deref_mut().map(|g| {
                let (lo, hi) = g.0.split_at_mut(*beta);
                (lo[*gamma].as_mut_slice(), hi[0].as_mut_slice())
            });
            batch_norm_backward(c, &p[*gamma].data, &dy, grads, need_dx)
        }
        (Node::InstanceNorm, Cache::Norm(c)) => need_dx.then(|| instance_norm_backward(c, &dy)),
        (Node::Act(a), Cache::Output(y)) => need_dx.then(|| activation_backward(y, *a, &dy)),
        (Node::MaxPool { .. }, Cache::Pool { shape, arg }) => need_dx.then(|| maxpool_backward(*shape, arg, &dy)),
        (Node::Upsample(f), Cache::Shape(shape)) => need_dx.then(|| upsample_backward(*shape, *f, &dy)),
        (Node::Residual { main, skip, post_relu }, Cache::Residual { main: mc, skip: sc, out }) => {
            let dy = if *post_relu { activation_backward(out.as_ref().expect("recorded"), Activation::Relu, &dy) } else { dy };
            let d_main = backward_nodes(main, mc, dy.clone(), ctx, need_dx);
            let d_skip = if skip.is_empty() { Some(dy) } else { backward_nodes(skip, sc, dy, ctx, need_dx) };
            match (d_main, d_skip) {
                (Some(mut a), Some(b)) if need_dx => {
                    a.add_assign(&b);
                    Some(a)
                }
                _ => None,
            }
        }
        _ => unreachable!("cache does not match node"),
    }
}

impl Network {
    /// Realizes `spec` with weights drawn from `N(0, INIT_STD)` using `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut b = Builder { prefix: spec.name.clone(), params: &mut params, buffers: &mut buffers, rng: &mut rng };
        let nodes = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| b.scoped(&i.to_string(), |b| b.layer(l)))
            .collect();
        Ok(Self { spec, params, buffers, nodes })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn output_shape(&self, x: &Tensor) -> Result<Shape> {
        predict_output_shape(&self.spec, Shape::new(x.c, x.h, x.w))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        self.output_shape(x).map(|_| ())
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut ctx = Ctx { params: &self.params, buffers: &mut self.buffers, mode, record: true };
        let y = forward_nodes(&self.nodes, x.clone(), &mut ctx, &mut caches);
        Ok((y, Tape { caches }))
    }

    /// Forward pass without a tape; batch norm uses running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut buffers = self.buffers.clone();
        let mut ctx = Ctx { params: &self.params, buffers: &mut buffers, mode: Mode::Eval, record: false };
        Ok(forward_nodes(&self.nodes, x.clone(), &mut ctx, &mut Vec::new()))
    }

    /// Forward pass without a tape and without touching running statistics.
    pub fn forward_no_grad(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::TrainUpdateStats {
            return Err(Error::invalid("a no-grad forward cannot update running statistics"));
        }
        self.check_input(x)?;
        let mut buffers = self.buffers.clone();
        let mut ctx = Ctx { params: &self.params, buffers: &mut buffers, mode, record: false };
        Ok(forward_nodes(&self.nodes, x.clone(), &mut ctx, &mut Vec::new()))
    }

    /// Backpropagates `dy`. Parameter gradients are accumulated into `grads`
    /// when given; the input gradient is returned when `need_dx`.
    pub fn backward(&self, tape: &Tape, dy: Tensor, grads: Option<&mut Grads>, need_dx: bool) -> Option<Tensor> {
        let mut ctx = BackCtx { params: &self.params, grads };
        backward_nodes(&self.nodes, &tape.caches, dy, &mut ctx, need_dx)
    }

    /// Order-sensitive hash of all parameters and buffers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().chain(&self.buffers) {
            for v in &p.data {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn params_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in &p.data {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use sifa_core::arch::{ResidualSpec, Width};

    fn random(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn residual_block_gradients() {
        for (in_ch, out_ch, norm) in [(3, 3, NormKind::Instance), (2, 4, NormKind::Batch)] {
            let spec = NetworkSpec {
                name: "r".into(),
                in_channels: in_ch,
                layers: vec![LayerSpec::Residual(ResidualSpec { in_ch, out_ch, dilation: 1, norm, post_relu: true })],
            };
            let mut net = Network::new(spec, 3).unwrap();
            for p in &mut net.params {
                p.data.iter_mut().for_each(|v| *v *= 20.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x = random(&mut rng, 2, in_ch, 5, 5);
            let (y, tape) = net.forward(&x, Mode::Train).unwrap();
            let probe = random(&mut rng, y.n, y.c, y.h, y.w);
            let mut grads = net.zero_grads();
            let dx = net.backward(&tape, probe.clone(), Some(&mut grads), true).unwrap();
            let loss = |net: &Network, x: &Tensor| dot(&net.forward_no_grad(x, Mode::Train).unwrap(), &probe);
            // a ReLU kink can spoil one step size, so accept a match at either
            let close = |f: &dyn Fn(f32) -> f64, analytic: f64| {
                [3e-3f32, 1e-3].iter().any(|&h| {
                    let num = (f(h) - f(-h)) / (2.0 * h as f64);
                    (num - analytic).abs() < 2e-2 * (1.0 + analytic.abs())
                })
            };
            for i in (0..x.data.len()).step_by(7) {
                let f = |h: f32| {
                    let mut moved = x.clone();
                    moved.data[i] += h;
                    loss(&net, &moved)
                };
                assert!(close(&f, dx.data[i] as f64), "dx {i}");
            }
            for pi in 0..net.params.len() {
                for j in (0..net.params[pi].data.len()).step_by(11) {
                    let f = |h: f32| {
                        let mut moved = net.clone();
                        moved.params[pi].data[j] += h;
                        loss(&moved, &x)
                    };
                    assert!(close(&f, grads.0[pi][j] as f64), "{} [{j}]", net.params[pi].name);
                }
            }
        }
    }

    #[test]
    fn skipping_param_grads_keeps_input_grad() {
        let spec = sifa_core::arch::patch_discriminator_spec(1, Width::scaled(16, 2)).unwrap();
        let mut net = Network::new(spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 2, 1, 32, 32);
        let (y, tape) = net.forward(&x, Mode::Train).unwrap();
        let dy = random(&mut rng, y.n, y.c, y.h, y.w);
        let mut g = net.zero_grads();
        let a = net.backward(&tape, dy.clone(), Some(&mut g), true).unwrap();
        let b = net.backward(&tape, dy.clone(), None, true).unwrap();
        assert_eq!(a, b);
        assert!(net.backward(&tape, dy, None, false).is_none());
    }

    #[test]
    fn running_stats_only_move_when_asked() {
        let spec = sifa_core::arch::encoder_spec(1, Width::scaled(16, 4));
        let mut net = Network::new(spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 2, 1, 16, 16);
        let before = net.checksum();
        net.forward(&x, Mode::Train).unwrap();
        net.forward_no_grad(&x, Mode::Train).unwrap();
        net.infer(&x).unwrap();
        assert_eq!(net.checksum(), before);
        net.forward(&x, Mode::TrainUpdateStats).unwrap();
        assert_ne!(net.checksum(), before);
        assert_eq!(net.params_checksum(), Network::new(net.spec.clone(), 1).unwrap().params_checksum());
    }

    /// Directional derivative along the analytic input gradient, for every
    /// sub-network at small widths.
    #[test]
    fn whole_network_input_gradients() {
        let widths = crate::models::Widths { generator: (16, 2), encoder: (16, 2), decoder: (16, 2), discriminator: (16, 2) };
        let specs = crate::models::network_specs(3, &widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in specs {
            let mut net = Network::new(spec, 5).unwrap();
            let (c, h) = if matches!(net.spec.name.as_str(), "C" | "U") { (net.spec.in_channels, 8) } else { (net.spec.in_channels, 16) };
            let x = random(&mut rng, 2, c, h, h);
            let (y, tape) = net.forward(&x, Mode::Train).unwrap();
            let probe = random(&mut rng, y.n, y.c, y.h, y.w);
            let dx = net.backward(&tape, probe.clone(), None, true).unwrap();
            let norm = dot(&dx, &dx).sqrt();
            let eps = 1e-4;
            let at = |s: f64| {
                let mut moved = x.clone();
                for (v, &d) in moved.data.iter_mut().zip(&dx.data) {
                    *v += (s * eps * d as f64 / norm) as f32;
                }
                dot(&net.forward_no_grad(&moved, Mode::Train).unwrap(), &probe)
            };
            let numeric = (at(1.0) - at(-1.0)) / (2.0 * eps);
            assert!((numeric - norm).abs() < 0.03 * norm, "{}: numeric {numeric} vs analytic {norm}", net.spec.name);
        }
    }
}

use std::collections::HashMap;

use rand::Rng;

use super::layers::{BufferFn, BufferMutFn, Ctx, ParamFn, ParamMutFn};
use super::{
    build_block, Architecture, FloatConv, Linear, ModelConfig, ParamKind, QuantConvBlock,
    ResidualUnit,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub enum Layer<F> {
    Conv(FloatConv<F>),
    Block(QuantConvBlock<F>),
    Residual(ResidualUnit<F>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Linear(Linear<F>),
}

/// Input and output of one quantized block during an eval-mode forward.
#[derive(Clone, Debug)]
pub struct BlockProbe<F> {
    pub name: String,
    pub input: Tensor<F>,
    pub output: Tensor<F>,
}

/// Result of [`Model::forward`].
pub struct ForwardPass {
    pub logits: Var,
    /// Graph leaves of every parameter, in [`Model::param_names`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<F>>,
}

fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

impl<F: Float> Model<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mode = config.mode;
        let ch = |base| config.channels(base);
        let classes = config.classes;
        let mut layers = Vec::new();
        match config.architecture {
            Architecture::LenetT => {
                let (c1, c2, c3) = (ch(16), ch(32), ch(128));
                layers.push(Layer::Conv(FloatConv::new(1, c1, 5, 1, 0, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Block(build_block(c1, c2, 5, 5, 1, 0, mode, rng)?));
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Block(build_block(c2, c3, 4, 4, 1, 0, mode, rng)?));
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear(Linear::new(c3, classes, rng)));
            }
            Architecture::Vgg7T => {
                let (c1, c2, c3) = (ch(128), ch(256), ch(512));
                layers.push(Layer::Conv(FloatConv::new(3, c1, 3, 1, 1, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::Block(build_block(c1, c1, 3, 3, 1, 1, mode, rng)?));
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Block(build_block(c1, c2, 3, 3, 1, 1, mode, rng)?));
                layers.push(Layer::Block(build_block(c2, c2, 3, 3, 1, 1, mode, rng)?));
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Block(build_block(c2, c3, 3, 3, 1, 1, mode, rng)?));
                layers.push(Layer::Block(build_block(c3, c3, 3, 3, 1, 1, mode, rng)?));
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear(Linear::new(c3 * 16, classes, rng)));
            }
            Architecture::ResminiT => {
                let (c1, c2, c3) = (ch(16), ch(32), ch(64));
                layers.push(Layer::Conv(FloatConv::new(3, c1, 3, 1, 1, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::Residual(ResidualUnit::new(c1, c1, false, mode, rng)?));
                layers.push(Layer::Residual(ResidualUnit::new(c1, c1, false, mode, rng)?));
                layers.push(Layer::Residual(ResidualUnit::new(c1, c2, true, mode, rng)?));
                layers.push(Layer::Residual(ResidualUnit::new(c2, c3, true, mode, rng)?));
                layers.push(Layer::GlobalAvgPool);
                layers.push(Layer::Linear(Linear::new(c3, classes, rng)));
            }
        }
        let mut model = Model { config, layers };
        let grad_mode = model.config.grad_mode;
        for (_, block) in model.blocks_mut() {
            block.grad_mode = grad_mode;
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.architecture.input_shape()
    }

    fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        let [c, h, w] = self.input_shape();
        match *input.shape() {
            [_, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => Ok(()),
            _ => Err(Error::shape(
                "model_forward",
                format!(
                    "{} expects [n, {c}, {h}, {w}], got {:?}",
                    self.config.architecture.id(),
                    input.shape()
                ),
            )),
        }
    }

    fn run(&self, g: &mut Graph<F>, input: Tensor<F>, ctx: &mut Ctx<F>) -> Result<Var> {
        self.check_input(&input)?;
        let mut x = g.constant(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer_name(i);
            x = match layer {
                Layer::Conv(conv) => conv.forward(g, x, ctx)?,
                Layer::Block(block) => block.forward(g, x, &name, ctx)?,
                Layer::Residual(unit) => unit.forward(g, x, &name, ctx)?,
                Layer::Relu => g.relu(x)?,
                Layer::MaxPool { kernel, stride } => g.max_pool2d(x, *kernel, *stride)?,
                Layer::GlobalAvgPool => g.global_avg_pool(x)?,
                Layer::Flatten => g.flatten(x)?,
                Layer::Linear(linear) => linear.forward(g, x, ctx)?,
            };
        }
        Ok(x)
    }

    /// Forward a batch. In training mode the parameters become gradient
    /// leaves, BN uses batch statistics and the running estimates are
    /// updated; in eval mode nothing is recorded and the model is unchanged.
    pub fn forward(&mut self, g: &mut Graph<F>, input: Tensor<F>, train: bool) -> Result<ForwardPass> {
        let mut ctx = Ctx::new(train, false);
        let logits = self.run(g, input, &mut ctx)?;
        if train {
            let mut stats = ctx.stats.iter();
            self.for_each_bn_mut(&mut |bn| {
                if let Some(s) = stats.next() {
                    bn.update(s);
                }
            });
        }
        Ok(ForwardPass {
            logits,
            params: ctx.binds,
        })
    }

    /// Eval-mode logits.
    pub fn predict(&self, input: Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(false, false);
        let logits = self.run(&mut g, input, &mut ctx)?;
        Ok(g.value(logits).clone())
    }

    /// Eval-mode forward that records every quantized block's input and
    /// output.
    pub fn probe(&self, input: Tensor<F>) -> Result<(Tensor<F>, Vec<BlockProbe<F>>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(false, true);
        let logits = self.run(&mut g, input, &mut ctx)?;
        Ok((g.value(logits).clone(), ctx.probes.unwrap_or_default()))
    }

    /// Quantized blocks with their names, in forward order.
    pub fn blocks(&self) -> Vec<(String, &QuantConvBlock<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Block(b) => out.push((layer_name(i), b)),
                Layer::Residual(u) => {
                    let [a, b] = u.blocks();
                    out.push((format!("{}.first", layer_name(i)), a));
                    out.push((format!("{}.second", layer_name(i)), b));
                }
                _ => {}
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut QuantConvBlock<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Block(b) => out.push((layer_name(i), b)),
                Layer::Residual(u) => {
                    let [a, b] = u.blocks_mut();
                    out.push((format!("{}.first", layer_name(i)), a));
                    out.push((format!("{}.second", layer_name(i)), b));
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter walk in the order [`ForwardPass::params`] uses.
    pub fn visit_params(&self, f: &mut ParamFn<'_, F>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer_name(i);
            match layer {
                Layer::Conv(c) => f(format!("{name}.weight"), ParamKind::Weight, &c.weight),
                Layer::Block(b) => b.visit(&name, f),
                Layer::Residual(u) => {
                    u.first.visit(&format!("{name}.first"), f);
                    u.second.visit(&format!("{name}.second"), f);
                }
                Layer::Linear(l) => {
                    f(format!("{name}.weight"), ParamKind::Weight, &l.weight);
                    f(format!("{name}.bias"), ParamKind::Bias, &l.bias);
                }
                _ => {}
            }
        }
    }

    /// Mutable parameter walk; derived quantities (pair scales) are
    /// refreshed as it goes.
    pub fn visit_params_mut(&mut self, f: &mut ParamMutFn<'_, F>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = layer_name(i);
            match layer {
                Layer::Conv(c) => f(format!("{name}.weight"), ParamKind::Weight, &mut c.weight),
                Layer::Block(b) => b.visit_mut(&name, f),
                Layer::Residual(u) => {
                    u.first.visit_mut(&format!("{name}.first"), f);
                    u.second.visit_mut(&format!("{name}.second"), f);
                }
                Layer::Linear(l) => {
                    f(format!("{name}.weight"), ParamKind::Weight, &mut l.weight);
                    f(format!("{name}.bias"), ParamKind::Bias, &mut l.bias);
                }
                _ => {}
            }
        }
    }

    fn visit_buffers(&self, f: &mut BufferFn<'_, F>) {
        for (name, block) in self.blocks() {
            block.visit_buffers(&name, f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut BufferMutFn<'_, F>) {
        for (name, block) in self.blocks_mut() {
            block.visit_buffers_mut(&name, f);
        }
    }

    fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut super::BatchNorm<F>)) {
        for (_, block) in self.blocks_mut() {
            block.for_each_bn_mut(f);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _, _| names.push(n));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, _, t| total += t.len());
        total
    }

    /// Every parameter and BN buffer by name.
    pub fn state(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, _, t| out.push((n, t.clone())));
        self.visit_buffers(&mut |n, v| {
            out.push((n, Tensor::new(vec![v.len()], v.to_vec()).expect("buffer")));
        });
        out
    }

    /// Overwrite parameters and buffers from `state`. Every entry the model
    /// has must be present with a matching shape.
    pub fn load_state(&mut self, state: &HashMap<String, Tensor<F>>) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(&mut |n, _, t| {
            if err.is_some() {
                return;
            }
            match state.get(&n) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(Error::shape(
                        "load_state",
                        format!("{n}: stored {:?}, model {:?}", src.shape(), t.shape()),
                    ))
                }
                None => err = Some(Error::invalid("load_state", format!("missing tensor {n}"))),
            }
        });
        self.visit_buffers_mut(&mut |n, v| {
            if err.is_some() {
                return;
            }
            match state.get(&n) {
                Some(src) if src.len() == v.len() => v.copy_from_slice(src.data()),
                Some(_) => err = Some(Error::shape("load_state", format!("{n}: length mismatch"))),
                None => err = Some(Error::invalid("load_state", format!("missing tensor {n}"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{BlockWeights, QuantMode};
    use crate::quant::{sign_i8, sttn_quantize_pair};

    fn model(arch: Architecture, mode: QuantMode) -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Model::new(ModelConfig::new(arch, mode), &mut rng).unwrap()
    }

    fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = shape;
        Tensor::from_fn(vec![n, c, h, w], |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn output_shapes() {
        let mut m = model(Architecture::LenetT, QuantMode::Sttn22);
        let mut g = Graph::new();
        let out = m.forward(&mut g, batch(8, [1, 28, 28], 1), false).unwrap();
        assert_eq!(g.shape(out.logits), &[8, 10]);

        let m = model(Architecture::Vgg7T, QuantMode::Sttn22);
        assert_eq!(m.predict(batch(4, [3, 32, 32], 2)).unwrap().shape(), &[4, 10]);

        let m = model(Architecture::ResminiT, QuantMode::Sttn22);
        assert_eq!(m.predict(batch(2, [3, 32, 32], 3)).unwrap().shape(), &[2, 10]);
        assert_eq!(m.blocks().len(), 8);
    }

    #[test]
    fn wrong_input_shape() {
        let m = model(Architecture::LenetT, QuantMode::Float);
        assert!(matches!(m.predict(batch(2, [3, 32, 32], 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn sttn_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_block::<f32, _>(16, 32, 3, 3, 1, 1, QuantMode::Sttn22, &mut rng).unwrap();
        match &b.weights {
            BlockWeights::Sttn(pair) => {
                assert_eq!(pair.w1().shape(), &[32, 16, 3, 3]);
                assert_eq!(pair.w2().shape(), &[32, 16, 3, 3]);
                assert_ne!(pair.w1(), pair.w2());
            }
            _ => panic!("expected a latent pair"),
        }
        assert!(build_block::<f32, _>(0, 4, 3, 3, 1, 1, QuantMode::Float, &mut rng).is_err());
    }

    #[test]
    fn block_modes_pick_input_quantizer() {
        let names = |mode| {
            let mut m = model(Architecture::LenetT, mode);
            let mut g = Graph::new();
            m.forward(&mut g, batch(2, [1, 28, 28], 4), true).unwrap();
            g.node_names()
        };
        let n = names(QuantMode::Sttn232);
        assert!(n.iter().any(|s| s == "sttn_pair"));
        assert!(!n.iter().any(|s| s == "ternarize"));
        let n = names(QuantMode::Sttn22);
        assert!(n.iter().any(|s| s == "ternarize"));
        let n = names(QuantMode::Float);
        assert!(!n.iter().any(|s| s == "sttn_pair" || s == "ternarize"));
        let n = names(QuantMode::TwnBaseline);
        assert!(n.iter().any(|s| s == "twn_weights"));
    }

    #[test]
    fn first_and_last_layers_stay_full_precision() {
        let mut m = model(Architecture::LenetT, QuantMode::Sttn22);
        let mut g = Graph::new();
        let fp = m.forward(&mut g, batch(4, [1, 28, 28], 5), true).unwrap();
        let loss = g.softmax_cross_entropy(fp.logits, &[0, 1, 2, 3]).unwrap();
        let names = m.param_names();
        let first = fp.params[0];
        let last = fp.params[names.len() - 2];
        assert_eq!(names[0], "layer0.weight");
        assert_eq!(names[names.len() - 2], "layer7.weight");
        for v in [first, last] {
            let path = g.path_node_names(v, loss);
            assert!(!path.is_empty());
            assert!(!path.iter().any(|s| s == "sttn_pair" || s == "twn_weights"), "{path:?}");
        }
        // Nothing but a float conv sits between the first weight and its output.
        let conv_out = g.path_node_names(first, loss);
        assert_eq!(conv_out[0], "conv2d");
    }

    #[test]
    fn param_binding_order_matches_names() {
        let mut m = model(Architecture::ResminiT, QuantMode::Sttn22);
        let mut g = Graph::new();
        let fp = m.forward(&mut g, batch(2, [3, 32, 32], 6), true).unwrap();
        let mut shapes = Vec::new();
        m.visit_params(&mut |_, _, t| shapes.push(t.shape().to_vec()));
        assert_eq!(fp.params.len(), shapes.len());
        for (v, s) in fp.params.iter().zip(&shapes) {
            assert_eq!(g.shape(*v), s.as_slice());
        }
    }

    #[test]
    fn training_forward_updates_running_stats_eval_does_not() {
        let mut m = model(Architecture::LenetT, QuantMode::Sttn22);
        let before = m.state();
        let mut g = Graph::new();
        m.forward(&mut g, batch(4, [1, 28, 28], 8), false).unwrap();
        assert_eq!(m.state(), before);
        let mut g = Graph::new();
        m.forward(&mut g, batch(4, [1, 28, 28], 8), true).unwrap();
        let after = m.state();
        let changed = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.clone())
            .collect::<Vec<_>>();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| n.contains("running")));
    }

    #[test]
    fn state_round_trip() {
        let a = model(Architecture::Vgg7T, QuantMode::Sttn22);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut b = Model::<f32>::new(a.config.clone(), &mut rng).unwrap();
        let state: HashMap<_, _> = a.state().into_iter().collect();
        b.load_state(&state).unwrap();
        assert_eq!(a.state(), b.state());
        // The pair scale follows the loaded kernels.
        for ((_, x), (_, y)) in a.blocks().iter().zip(b.blocks()) {
            if let (BlockWeights::Sttn(p), BlockWeights::Sttn(q)) = (&x.weights, &y.weights) {
                assert_eq!(p.alpha(), q.alpha());
            }
        }
        let mut missing = state.clone();
        missing.remove("layer2.bn.gamma");
        assert!(b.load_state(&missing).is_err());
    }

    #[test]
    fn equal_latents_collapse_to_binary() {
        let mut m = model(Architecture::LenetT, QuantMode::Sttn22);
        for (_, block) in m.blocks_mut() {
            if let BlockWeights::Sttn(pair) = &mut block.weights {
                let w1 = pair.w1().clone();
                *pair.w2_mut() = w1;
                pair.refresh();
                let (view, _) = sttn_quantize_pair(pair).unwrap();
                let t: Vec<i8> = view.b1.iter().zip(&view.b2).map(|(a, b)| (a + b) / 2).collect();
                assert!(t.iter().all(|&v| v != 0));
                assert!(t.iter().zip(pair.w1().data()).all(|(&v, &w)| v == sign_i8(w)));
            }
        }
    }

    #[test]
    fn width_multiplier_scales_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = ModelConfig::new(Architecture::Vgg7T, QuantMode::Float);
        cfg.width = 0.125;
        let m = Model::<f32>::new(cfg, &mut rng).unwrap();
        assert_eq!(m.blocks()[0].1.kernel_shape(), &[16, 16, 3, 3]);
        assert_eq!(m.predict(batch(1, [3, 32, 32], 0)).unwrap().shape(), &[1, 10]);
    }
}

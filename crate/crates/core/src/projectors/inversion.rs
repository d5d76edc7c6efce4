//! Generator inversion: momentum gradient descent on
//! `L(w) = d_perceptual(G(w), x) + alpha * ||G(w) - x||^2` over all `C` rows of
//! the code independently, with step halving whenever a step would raise
//! the loss.

use serde::{Deserialize, Serialize};

use super::encoder::EncoderModel;
use super::{shape_mismatch, Code, Projector, ProjectorKind};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, StyleCode};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
use crate::image::Image;
use crate::perceptual::FeatureExtractor;
use crate::rng;
use crate::tensor::Tensor;

pub const MEAN_CODE_SAMPLES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    MeanW,
    Encoder,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f64,
    pub alpha: f64,
    pub init: InitKind,
    pub momentum: f64,
    pub max_halvings: usize,
    /// Seed of the `random` initialisation.
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.05,
            alpha: 1.0,
            init: InitKind::MeanW,
            momentum: 0.9,
            max_halvings: 5,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(self.step_size > 0.0) {
            return Err(("step_size".into(), "must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(("alpha".into(), "must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum".into(), "must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub code: StyleCode,
    pub final_loss: f64,
    /// Loss at the initial code followed by the loss after every iteration.
    pub losses: Vec<f64>,
}

/// Reusable inversion objective for one generator and perceptual network.
pub struct Inverter<'a> {
    generator: &'a GeneratorModel,
    extractor: &'a FeatureExtractor,
    params: ParamSet,
    graph: Graph,
    loss: NodeId,
    alpha: f64,
    mean_code: StyleCode,
}

impl<'a> Inverter<'a> {
    pub fn new(generator: &'a GeneratorModel, extractor: &'a FeatureExtractor, alpha: f64) -> Result<Self> {
        let mean_code = generator.mean_code(MEAN_CODE_SAMPLES)?;
        Ok(Self::with_mean(generator, extractor, alpha, mean_code))
    }

    pub fn with_mean(
        generator: &'a GeneratorModel,
        extractor: &'a FeatureExtractor,
        alpha: f64,
        mean_code: StyleCode,
    ) -> Self {
        let (graph, loss) = loss_graph(generator.channels(), alpha);
        let mut params = generator.params().clone();
        params.extend_prefixed(extractor.params(), "");
        Self {
            generator,
            extractor,
            params,
            graph,
            loss,
            alpha,
            mean_code,
        }
    }

    pub fn mean_code(&self) -> &StyleCode {
        &self.mean_code
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn target(&self, x: &Image) -> Result<Target> {
        let [f0, f1] = self.extractor.features(x)?;
        Ok(Target {
            image: x.tensor().clone(),
            f0,
            f1,
        })
    }

    /// Loss and `dL/dw` at `w`.
    pub fn loss_and_gradient(&self, target: &Target, w: &StyleCode) -> Result<(f64, Tensor)> {
        let binds = target.bind(Bindings::new().bind("w", w.tensor()).bind_params(&self.params));
        let mut g = self.graph.gradient(&binds, self.loss, &["w"])?;
        Ok((g.value, g.grads.remove("w").expect("requested")))
    }

    pub fn loss(&self, target: &Target, w: &StyleCode) -> Result<f64> {
        let binds = target.bind(Bindings::new().bind("w", w.tensor()).bind_params(&self.params));
        Ok(self.graph.forward(&binds)?.get(self.loss).item())
    }

    pub fn initial_code(&self, x: &Image, cfg: &InversionConfig, encoder: Option<&EncoderModel>) -> Result<StyleCode> {
        match cfg.init {
            InitKind::MeanW => Ok(self.mean_code.clone()),
            InitKind::Encoder => encoder
                .ok_or_else(|| Error::invalid("encoder initialisation requested without an encoder"))?
                .encode(x),
            InitKind::Random => {
                self.generator
                    .map(&self.generator.sample_z(rng::derive(cfg.seed, "inversion_init", 0)))
            }
        }
    }

    pub fn invert(&self, x: &Image, cfg: &InversionConfig, encoder: Option<&EncoderModel>) -> Result<InversionResult> {
        if (cfg.alpha - self.alpha).abs() > 0.0 {
            return Err(Error::invalid(format!(
                "inverter built for alpha {}, config asks for {}",
                self.alpha, cfg.alpha
            )));
        }
        let init = self.initial_code(x, cfg, encoder)?;
        self.invert_from(x, init, cfg)
    }

    pub fn invert_from(&self, x: &Image, init: StyleCode, cfg: &InversionConfig) -> Result<InversionResult> {
        cfg.validate()
            .map_err(|(k, m)| Error::invalid(format!("inversion {k}: {m}")))?;
        self.generator.check_code(&init)?;
        let target = self.target(x)?;
        let eval = |w: &StyleCode, iteration: usize| {
            self.loss_and_gradient(&target, w).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { iteration },
                other => other,
            })
        };
        let mut w = init;
        let (mut loss, mut grad) = eval(&w, 0)?;
        let mut losses = Vec::with_capacity(cfg.steps + 1);
        losses.push(loss);
        let mut velocity = Tensor::zeros(w.tensor().shape());
        for it in 1..=cfg.steps {
            let mut step = velocity.clone();
            step.scale_assign(cfg.momentum);
            step.axpy(-cfg.step_size, &grad);
            let mut accepted = false;
            for _ in 0..=cfg.max_halvings {
                let mut cand = w.tensor().clone();
                cand.add_assign(&step);
                let cand = StyleCode::new(cand).map_err(|_| Error::NonFiniteLoss { iteration: it })?;
                let (cl, cg) = eval(&cand, it)?;
                if !cl.is_finite() {
                    return Err(Error::NonFiniteLoss { iteration: it });
                }
                if cl <= loss {
                    w = cand;
                    loss = cl;
                    grad = cg;
                    velocity = step;
                    accepted = true;
                    break;
                }
                step.scale_assign(0.5);
            }
            if !accepted {
                velocity = Tensor::zeros(w.tensor().shape());
            }
            losses.push(loss);
        }
        Ok(InversionResult {
            code: w,
            final_loss: loss,
            losses,
        })
    }
}

/// Precomputed target image and its perceptual features.
pub struct Target {
    image: Tensor,
    f0: Tensor,
    f1: Tensor,
}

impl Target {
    fn bind<'b>(&'b self, b: Bindings<'b>) -> Bindings<'b> {
        b.bind("x", &self.image).bind("x.f0", &self.f0).bind("x.f1", &self.f1)
    }
}

fn loss_graph(channels: usize, alpha: f64) -> (Graph, NodeId) {
    let mut b = GraphBuilder::new();
    let w = b.param("w");
    let x = b.input("x");
    let tf0 = b.input("x.f0");
    let tf1 = b.input("x.f1");
    let img = GeneratorModel::synthesis_nodes(&mut b, w, channels);
    let fg = FeatureExtractor::feature_nodes(&mut b, img);
    let perc = FeatureExtractor::distance_nodes(&mut b, fg, [tf0, tf1]);
    let diff = b.sub(img, x);
    let pix = b.sum_squares(diff);
    let pix = b.scale(pix, alpha);
    let loss = b.add(perc, pix);
    b.output("loss", loss);
    (b.build(), loss)
}

/// Inversion-backed projector: `project` runs [`Inverter::invert`], `reconstruct`
/// synthesises the code.
pub struct GanProjector {
    generator: GeneratorModel,
    extractor: FeatureExtractor,
    config: InversionConfig,
    mean_code: StyleCode,
    encoder: Option<EncoderModel>,
}

impl GanProjector {
    pub fn new(
        generator: GeneratorModel,
        extractor: FeatureExtractor,
        config: InversionConfig,
        encoder: Option<EncoderModel>,
    ) -> Result<Self> {
        if config.init == InitKind::Encoder && encoder.is_none() {
            return Err(Error::invalid("encoder initialisation requested without an encoder"));
        }
        let mean_code = generator.mean_code(MEAN_CODE_SAMPLES)?;
        Ok(Self {
            generator,
            extractor,
            config,
            mean_code,
            encoder,
        })
    }

    pub fn inverter(&self) -> Inverter<'_> {
        Inverter::with_mean(
            &self.generator,
            &self.extractor,
            self.config.alpha,
            self.mean_code.clone(),
        )
    }

    pub fn generator(&self) -> &GeneratorModel {
        &self.generator
    }

    pub fn config(&self) -> &InversionConfig {
        &self.config
    }

    pub fn invert(&self, x: &Image) -> Result<InversionResult> {
        self.inverter().invert(x, &self.config, self.encoder.as_ref())
    }
}

impl Projector for GanProjector {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::GanInversion
    }

    fn code_shape(&self) -> Vec<usize> {
        self.generator.code_shape().to_vec()
    }

    fn project(&self, x: &Image) -> Result<Code> {
        Ok(Code::Style(self.invert(x)?.code))
    }

    fn reconstruct(&self, code: &Code) -> Result<Image> {
        match code {
            Code::Style(w) if w.tensor().shape() == self.generator.code_shape() => self.generator.synthesize(w),
            other => Err(shape_mismatch(self.kind(), &self.code_shape(), other)),
        }
    }
}

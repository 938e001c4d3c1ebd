use crate::autograd::{ParamId, ParamStore, Tape, VarId};
use crate::blocks::{
    Conv, Decoder, DecoderConfig, EspConfig, EspModule, FplConfig, FplModule, FusionStrategy, InitialModule,
    LayerRow, RfStep,
};
use crate::error::{Error, Result};
use crate::network::config::{DecoderKind, Downsampling, Factorization, ModuleKind, NetworkConfig};
use crate::tensor::{argmax_channels, BnMode, ConvSpec, Scalar, Shape, Tensor};

/// Spatial dims must be divisible by this.
pub const OUTPUT_STRIDE: usize = 8;

/// FPL or ESP module behind one interface.
#[derive(Clone, Debug)]
pub enum PyramidModule {
    Fpl(FplModule),
    Esp(EspModule),
}

impl PyramidModule {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        match self {
            PyramidModule::Fpl(m) => m.forward(tape, store, x, mode),
            PyramidModule::Esp(m) => m.forward(tape, store, x, mode),
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            PyramidModule::Fpl(m) => m.output_shape(input),
            PyramidModule::Esp(m) => m.output_shape(input),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            PyramidModule::Fpl(m) => m.param_ids(),
            PyramidModule::Esp(m) => m.param_ids(),
        }
    }

    fn rf_steps(&self) -> Vec<RfStep> {
        match self {
            PyramidModule::Fpl(m) => m.rf_steps(),
            PyramidModule::Esp(m) => m.rf_steps(),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            PyramidModule::Fpl(_) => "FPL",
            PyramidModule::Esp(_) => "ESP",
        }
    }
}

/// Downsampler, stride-1 modules, then a fusion of the downsampler output
/// (shallow), the last module output (deep) and the image.
#[derive(Clone, Debug)]
struct Stage {
    down: PyramidModule,
    modules: Vec<PyramidModule>,
    fusion: FusionStrategy,
}

impl Stage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &NetworkConfig,
        kind: ModuleKind,
        c_in: usize,
        c: usize,
        count: usize,
    ) -> Result<Self> {
        let make = |store: &mut ParamStore<T>, name: String, c_in: usize, stride: usize| -> Result<PyramidModule> {
            Ok(match kind {
                ModuleKind::Fpl => {
                    let base = if stride == 2 { FplConfig::downsampler(c_in, c) } else { FplConfig::new(c_in, c) };
                    let mcfg = fpl_template(cfg, base);
                    PyramidModule::Fpl(FplModule::new(store, &name, mcfg)?)
                }
                ModuleKind::Esp => {
                    let base = if stride == 2 { EspConfig::downsampler(c_in, c) } else { EspConfig::new(c_in, c) };
                    PyramidModule::Esp(EspModule::new(store, &name, esp_template(cfg, base))?)
                }
            })
        };
        let down = make(store, format!("{name}.down"), c_in, 2)?;
        let modules = (0..count)
            .map(|i| make(store, format!("{name}.module{i}"), c, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stage {
            down,
            modules,
            fusion: cfg.fusion_strategy,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
        image: VarId,
        mode: BnMode,
    ) -> Result<VarId> {
        let shallow = self.down.forward(tape, store, x, mode)?;
        let mut deep = shallow;
        for m in &self.modules {
            deep = m.forward(tape, store, deep, mode)?;
        }
        self.fusion.forward(tape, deep, shallow, image)
    }

    fn rows(&self, input: Shape, image_c: usize, rows: &mut Vec<LayerRow>) -> Result<Shape> {
        let mut s = self.down.output_shape(input)?;
        rows.push(LayerRow::new(
            format!("Downsample ({})", self.down.label()),
            s,
            self.down.param_ids(),
            self.down.rf_steps(),
        ));
        for m in &self.modules {
            s = m.output_shape(s)?;
            rows.push(LayerRow::new(format!("{} module", m.label()), s, m.param_ids(), m.rf_steps()));
        }
        let out = self.fusion.output_shape(s, image_c);
        rows.push(LayerRow::new(self.fusion.label(), out, vec![], vec![]));
        Ok(out)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        for m in &self.modules {
            ids.extend(m.param_ids());
        }
        ids
    }
}

/// Applies the network-wide FPL settings to a module shape.
pub(crate) fn fpl_template(cfg: &NetworkConfig, base: FplConfig) -> FplConfig {
    let base = base.with_branches(cfg.fpl_branches).with_fusion(cfg.branch_fusion);
    let (bank, stage1) = match cfg.factorization {
        Factorization::None => (false, false),
        Factorization::Composite => (true, false),
        Factorization::All => (true, true),
    };
    FplConfig {
        factorize_bank: bank,
        factorize_stage1: stage1,
        ..base
    }
}

pub(crate) fn esp_template(cfg: &NetworkConfig, base: EspConfig) -> EspConfig {
    EspConfig {
        branches: cfg.esp_branches,
        dilations: crate::blocks::fpl::power_of_two_dilations(cfg.esp_branches),
        ..base
    }
}

#[derive(Clone, Debug)]
enum Head {
    Decoder(Decoder),
    /// 1x1 projection to classes followed by bilinear upsampling.
    EncoderOnly { proj: Conv, factor: usize },
}

/// The assembled segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    cfg: NetworkConfig,
    store: ParamStore<T>,
    initial: InitialModule,
    stage2: Stage,
    stage3: Stage,
    head: Head,
}

/// Builds the network described by `cfg` with parameters drawn from `cfg.seed`.
pub fn build_fplnet<T: Scalar>(cfg: &NetworkConfig) -> Result<Network<T>> {
    Network::new(cfg.clone())
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let convs = match cfg.downsampling {
            Downsampling::Delayed => 2,
            Downsampling::Hasty => 0,
        };
        let initial = InitialModule::new(&mut store, "encoder.initial", cfg.image_channels, cfg.initial_channels, convs)?;
        let stage2 = Stage::new(
            &mut store,
            "encoder.stage2",
            &cfg,
            cfg.stage2_module,
            initial.out_channels(),
            cfg.stage2_channels,
            cfg.stage2_modules,
        )?;
        let c2 = cfg.fusion_strategy.out_channels(cfg.stage2_channels, cfg.image_channels);
        let stage3 = Stage::new(
            &mut store,
            "encoder.stage3",
            &cfg,
            cfg.stage3_module,
            c2,
            cfg.stage3_channels,
            cfg.stage3_modules,
        )?;
        let c3 = cfg.fusion_strategy.out_channels(cfg.stage3_channels, cfg.image_channels);
        let head = match cfg.decoder {
            DecoderKind::SequentialDefault => {
                let module = fpl_template(&cfg, FplConfig::new(cfg.decoder_mid_channels, cfg.decoder_mid_channels));
                let dcfg = DecoderConfig {
                    c_in: c3,
                    c_mid: cfg.decoder_mid_channels,
                    c_low: cfg.decoder_low_channels,
                    modules_per_stage: cfg.decoder_modules,
                    num_classes: cfg.num_classes,
                    module,
                };
                Head::Decoder(Decoder::new(&mut store, "decoder", dcfg)?)
            }
            DecoderKind::EncoderOnly => Head::EncoderOnly {
                proj: Conv::new(
                    &mut store,
                    "encoder_head.proj",
                    ConvSpec::new(c3, cfg.num_classes, 1, 1).with_bias(true),
                )?,
                factor: cfg.encoder_upsample,
            },
        };
        Ok(Network {
            cfg,
            store,
            initial,
            stage2,
            stage3,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.cfg.image_channels {
            return Err(Error::ShapeMismatch {
                op: "network_forward",
                dim: "image channels",
                expected: self.cfg.image_channels,
                actual: shape.c,
            });
        }
        if shape.h % OUTPUT_STRIDE != 0 || shape.w % OUTPUT_STRIDE != 0 {
            return Err(Error::InvalidValue(format!(
                "input {}x{} is not divisible by {OUTPUT_STRIDE}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward(&self, tape: &mut Tape<T>, image: VarId, mode: BnMode) -> Result<VarId> {
        self.check_input(tape.shape(image))?;
        let half = tape.avg_pool2(image)?;
        let quarter = tape.avg_pool2(half)?;
        let eighth = tape.avg_pool2(quarter)?;
        let x = self.initial.forward(tape, &self.store, image, half, mode)?;
        let x = self.stage2.forward(tape, &self.store, x, quarter, mode)?;
        let x = self.stage3.forward(tape, &self.store, x, eighth, mode)?;
        match &self.head {
            Head::Decoder(d) => d.forward(tape, &self.store, x, mode),
            Head::EncoderOnly { proj, factor } => {
                let y = proj.forward(tape, &self.store, x)?;
                tape.bilinear(y, *factor)
            }
        }
    }

    /// Inference-mode logits.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.input(image.clone());
        let y = self.forward(&mut tape, x, BnMode::Infer)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax of the inference logits, one map per batch item;
    /// ties go to the lowest class index.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        Ok(argmax_channels(&self.infer(image)?))
    }

    /// Static layer table for an input of the given shape.
    pub fn layers(&self, input: Shape) -> Result<Vec<LayerRow>> {
        self.check_input(input)?;
        let ic = self.cfg.image_channels;
        let mut rows = self.initial.rows(input)?;
        let s = rows.last().expect("initial module emits rows").shape;
        let s = self.stage2.rows(s, ic, &mut rows)?;
        let s = self.stage3.rows(s, ic, &mut rows)?;
        match &self.head {
            Head::Decoder(d) => rows.extend(d.rows(s)?),
            Head::EncoderOnly { proj, factor } => {
                let p = proj.output_shape(s)?;
                rows.push(LayerRow::new("Projection (Conv-1x1)", p, proj.param_ids(), vec![proj.rf_step()]));
                rows.push(LayerRow::new(
                    format!("BLU-{factor}X"),
                    p.with_hw(p.h * factor, p.w * factor),
                    vec![],
                    vec![RfStep::Bilinear { factor: *factor }],
                ));
            }
        }
        Ok(rows)
    }

    /// Parameters of the initial module and both encoder stages.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.initial.param_ids();
        ids.extend(self.stage2.param_ids());
        ids.extend(self.stage3.param_ids());
        ids
    }
}

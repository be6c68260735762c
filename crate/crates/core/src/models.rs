//! Backbone registry, the classification head and checkpoint files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::imaging::Image;
use crate::losses::ProbabilityVector;
use crate::nn::{
    BatchNorm2d, Conv2d, Ctx, Dropout, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d, Normalize, Param,
    ParamVisitor, Relu, Residual, Sequential, Silu, SqueezeExcite,
};
use crate::{Error, Result, NUM_CLASSES};

pub const CHECKPOINT_FORMAT: &str = "lesionkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Channel statistics of the natural-image corpus the backbones are
/// pretrained on.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet50,
    Vgg16,
    Mobilenet,
    EfficientnetB1,
    TinyTest,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::Resnet50,
        BackboneKind::Vgg16,
        BackboneKind::Mobilenet,
        BackboneKind::EfficientnetB1,
        BackboneKind::TinyTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Mobilenet => "mobilenet",
            BackboneKind::EfficientnetB1 => "efficientnet_b1",
            BackboneKind::TinyTest => "tiny_test",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownBackbone {
                name: s.to_string(),
                known: list_backbones().join(", "),
            })
    }
}

pub fn list_backbones() -> Vec<&'static str> {
    BackboneKind::ALL.iter().map(|b| b.name()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub num_classes: usize,
    pub use_gap: bool,
    pub dropout_rate: f32,
    pub hidden_width: usize,
    pub pretrained: bool,
    /// Backbone weights to start from when `pretrained` is set.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    pub all_layers_trainable: bool,
    /// Seed for freshly initialised parameters.
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::standard(BackboneKind::Resnet50)
    }
}

impl ModelSpec {
    /// Pretrained backbone, GAP, dropout 0.5, 512-wide head, nothing frozen.
    pub fn standard(backbone: BackboneKind) -> Self {
        ModelSpec {
            backbone,
            num_classes: NUM_CLASSES,
            use_gap: true,
            dropout_rate: 0.5,
            hidden_width: 512,
            pretrained: backbone != BackboneKind::TinyTest,
            pretrained_weights: None,
            all_layers_trainable: true,
            init_seed: 0,
        }
    }

    pub fn tiny() -> Self {
        ModelSpec::standard(BackboneKind::TinyTest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::SpecMismatch(format!(
                "num_classes is {}, expected {NUM_CLASSES}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone followed by `[pool] → dense → relu → dropout → dense`. Softmax is
/// applied by [`Model::predict`]; the training losses take raw scores.
pub struct Model {
    spec: ModelSpec,
    backbone: Sequential,
    head: Sequential,
    feature_shape: [usize; 3],
}

pub const INPUT_SHAPE: [usize; 3] = [3, 224, 224];

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    let mut model = build_untrained(spec)?;
    if spec.pretrained {
        let path = spec
            .pretrained_weights
            .clone()
            .filter(|p| p.is_file())
            .ok_or_else(|| Error::MissingPretrained {
                backbone: spec.backbone.to_string(),
                path: spec.pretrained_weights.clone(),
            })?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        load_tensors(&st, &path, "backbone", &mut model.backbone)?;
    }
    Ok(model)
}

fn build_untrained(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut backbone = Sequential::new().with("normalize", Normalize::new(IMAGENET_MEAN, IMAGENET_STD));
    match spec.backbone {
        BackboneKind::Resnet50 => resnet50(&mut backbone, &mut rng),
        BackboneKind::Vgg16 => vgg16(&mut backbone, &mut rng),
        BackboneKind::Mobilenet => mobilenet(&mut backbone, &mut rng),
        BackboneKind::EfficientnetB1 => efficientnet_b1(&mut backbone, &mut rng),
        BackboneKind::TinyTest => tiny_test(&mut backbone, &mut rng),
    }
    let feature_shape = backbone.output_shape(INPUT_SHAPE);
    let [c, h, w] = feature_shape;
    let mut head = Sequential::new();
    let pooled = if spec.use_gap {
        head.push("pool", GlobalAvgPool::new());
        c
    } else {
        head.push("flatten", Flatten::new());
        c * h * w
    };
    head.push("fc1", Linear::new(pooled, spec.hidden_width, &mut rng));
    head.push("relu", Relu::new());
    head.push("dropout", Dropout::new(spec.dropout_rate));
    head.push("fc2", Linear::new(spec.hidden_width, spec.num_classes, &mut rng));
    if !spec.all_layers_trainable {
        backbone.visit_params("", &mut |_, p| p.trainable = false);
    }
    Ok(Model {
        spec: spec.clone(),
        backbone,
        head,
        feature_shape,
    })
}

fn conv_bn_relu(seq: &mut Sequential, name: &str, conv: Conv2d) {
    let c = conv.out_channels();
    seq.push(format!("{name}_conv"), conv);
    seq.push(format!("{name}_bn"), BatchNorm2d::new(c));
    seq.push(format!("{name}_relu"), Relu::new());
}

fn first_conv(mut conv: Conv2d) -> Conv2d {
    conv.input_grad = false;
    conv
}

fn tiny_test(seq: &mut Sequential, rng: &mut ChaCha8Rng) {
    conv_bn_relu(seq, "stem", first_conv(Conv2d::new(3, 16, 4, 4, 0, 1, false, rng)));
    for (i, (cin, cout)) in [(16, 32), (32, 64), (64, 128)].into_iter().enumerate() {
        let name = format!("block{}", i + 1);
        conv_bn_relu(seq, &name, Conv2d::same(cin, cout, 3, 1, rng));
        seq.push(format!("{name}_pool"), MaxPool2d::new(2, 2, 0));
    }
}

fn vgg16(seq: &mut Sequential, rng: &mut ChaCha8Rng) {
    let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut cin = 3;
    for (s, (width, reps)) in stages.into_iter().enumerate() {
        for r in 0..reps {
            let mut conv = Conv2d::new(cin, width, 3, 1, 1, 1, true, rng);
            if cin == 3 {
                conv = first_conv(conv);
            }
            seq.push(format!("block{}_conv{}", s + 1, r + 1), conv);
            seq.push(format!("block{}_relu{}", s + 1, r + 1), Relu::new());
            cin = width;
        }
        seq.push(format!("block{}_pool", s + 1), MaxPool2d::new(2, 2, 0));
    }
}

fn resnet50(seq: &mut Sequential, rng: &mut ChaCha8Rng) {
    conv_bn_relu(seq, "stem", first_conv(Conv2d::same(3, 64, 7, 2, rng)));
    seq.push("stem_pool", MaxPool2d::new(3, 2, 1));
    let mut cin = 64;
    for (s, (width, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let cout = width * 4;
            let mut main = Sequential::new();
            conv_bn_relu(&mut main, "a", Conv2d::same(cin, width, 1, 1, rng));
            conv_bn_relu(&mut main, "b", Conv2d::same(width, width, 3, stride, rng));
            main.push("c_conv", Conv2d::same(width, cout, 1, 1, rng));
            main.push("c_bn", BatchNorm2d::new(cout));
            let shortcut = (b == 0).then(|| {
                Sequential::new()
                    .with("conv", Conv2d::new(cin, cout, 1, stride, 0, 1, false, rng))
                    .with("bn", BatchNorm2d::new(cout))
            });
            seq.push(
                format!("stage{}_block{}", s + 1, b + 1),
                Residual::new(main, shortcut, true),
            );
            cin = cout;
        }
    }
}

fn mobilenet(seq: &mut Sequential, rng: &mut ChaCha8Rng) {
    let relu6 = |seq: &mut Sequential, name: String| {
        seq.push(name, Relu::capped(6.0));
    };
    let stem = first_conv(Conv2d::same(3, 32, 3, 2, rng));
    seq.push("stem_conv", stem);
    seq.push("stem_bn", BatchNorm2d::new(32));
    relu6(seq, "stem_relu".into());
    let blocks: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let mut cin = 32;
    for (i, (cout, stride)) in blocks.into_iter().enumerate() {
        let n = i + 1;
        seq.push(format!("dw{n}_conv"), Conv2d::depthwise(cin, 3, stride, rng));
        seq.push(format!("dw{n}_bn"), BatchNorm2d::new(cin));
        relu6(seq, format!("dw{n}_relu"));
        seq.push(format!("pw{n}_conv"), Conv2d::same(cin, cout, 1, 1, rng));
        seq.push(format!("pw{n}_bn"), BatchNorm2d::new(cout));
        relu6(seq, format!("pw{n}_relu"));
        cin = cout;
    }
}

fn efficientnet_b1(seq: &mut Sequential, rng: &mut ChaCha8Rng) {
    // (expansion, kernel, stride, output channels, repeats)
    let stages: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 2),
        (6, 3, 2, 24, 3),
        (6, 5, 2, 40, 3),
        (6, 3, 2, 80, 4),
        (6, 5, 1, 112, 4),
        (6, 5, 2, 192, 5),
        (6, 3, 1, 320, 2),
    ];
    seq.push("stem_conv", first_conv(Conv2d::same(3, 32, 3, 2, rng)));
    seq.push("stem_bn", BatchNorm2d::new(32));
    seq.push("stem_act", Silu::new());
    let mut cin = 32;
    for (s, (expand, k, stride, cout, reps)) in stages.into_iter().enumerate() {
        for r in 0..reps {
            let stride = if r == 0 { stride } else { 1 };
            let mid = cin * expand;
            let mut main = Sequential::new();
            if expand != 1 {
                main.push("expand_conv", Conv2d::same(cin, mid, 1, 1, rng));
                main.push("expand_bn", BatchNorm2d::new(mid));
                main.push("expand_act", Silu::new());
            }
            main.push("dw_conv", Conv2d::depthwise(mid, k, stride, rng));
            main.push("dw_bn", BatchNorm2d::new(mid));
            main.push("dw_act", Silu::new());
            main.push("se", SqueezeExcite::new(mid, (cin / 4).max(1), rng));
            main.push("project_conv", Conv2d::same(mid, cout, 1, 1, rng));
            main.push("project_bn", BatchNorm2d::new(cout));
            let name = format!("block{}{}", s + 1, (b'a' + r as u8) as char);
            if stride == 1 && cin == cout {
                seq.push(name, Residual::new(main, None, false));
            } else {
                seq.push(name, main);
            }
            cin = cout;
        }
    }
    seq.push("top_conv", Conv2d::same(cin, 1280, 1, 1, rng));
    seq.push("top_bn", BatchNorm2d::new(1280));
    seq.push("top_act", Silu::new());
}

/// Stacks images (all the same size) into an `(n, 3, h, w)` tensor.
pub fn batch_tensor<T: AsRef<Image>>(images: &[T]) -> Array4<f32> {
    let (w, h) = images
        .first()
        .map_or((0, 0), |i| (i.as_ref().width(), i.as_ref().height()));
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        let img = img.as_ref();
        assert_eq!((img.width(), img.height()), (w, h), "batch images differ in size");
        data.extend(img.to_chw());
    }
    Array4::from_shape_vec((images.len(), 3, h, w), data).unwrap()
}

fn to_logits(y: Array4<f32>) -> Array2<f32> {
    let (n, k, _, _) = y.dim();
    y.into_shape_with_order((n, k)).unwrap()
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `(channels, height, width)` of the backbone output for a 224×224 input.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_shape[0]
    }

    pub fn features(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        self.backbone.forward(x, ctx)
    }

    pub fn head_forward(&mut self, features: Array4<f32>, ctx: &mut Ctx<'_>) -> Array2<f32> {
        to_logits(self.head.forward(features, ctx))
    }

    /// Gradient of the logits back to the feature map; accumulates head
    /// parameter gradients.
    pub fn head_backward(&mut self, grad: Array2<f32>) -> Array4<f32> {
        let (n, k) = grad.dim();
        self.head.backward(grad.into_shape_with_order((n, k, 1, 1)).unwrap())
    }

    pub fn logits(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array2<f32> {
        let f = self.features(x, ctx);
        self.head_forward(f, ctx)
    }

    /// Backpropagates logit gradients through head and backbone.
    pub fn backward_logits(&mut self, grad: Array2<f32>) {
        let g = self.head_backward(grad);
        self.backbone.backward(g);
    }

    /// Evaluation-mode class probabilities for a batch tensor.
    pub fn predict_tensor(&mut self, x: Array4<f32>) -> Result<Vec<ProbabilityVector>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx::eval(&mut rng);
        let logits = self.logits(x, &mut ctx);
        logits
            .outer_iter()
            .map(|row| {
                let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                ProbabilityVector::from_logits(&z)
            })
            .collect()
    }

    pub fn predict<T: AsRef<Image>>(&mut self, images: &[T]) -> Result<Vec<ProbabilityVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(self.predict_tensor(batch_tensor(chunk))?);
        }
        Ok(out)
    }

    pub fn param_count(&mut self, trainable_only: bool) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable || !trainable_only {
                n += p.len();
            }
        });
        n
    }

    /// L2 norm of the first convolution's kernel.
    pub fn first_conv_norm(&mut self) -> f64 {
        let mut norm = None;
        self.backbone.visit_params("", &mut |_, p| {
            if norm.is_none() && p.value.ndim() == 4 {
                norm = Some(p.value.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt());
            }
        });
        norm.expect("backbone has a convolution")
    }

    fn for_each_tensor(&mut self, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params("backbone", f);
        self.head.visit_params("head", f);
    }
}

impl Layer for Model {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let f = self.backbone.forward(x, ctx);
        self.head.forward(f, ctx)
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let g = self.head.backward(grad);
        self.backbone.backward(g)
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.head.output_shape(self.backbone.output_shape(input))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params(&crate::nn::join(prefix, "backbone"), f);
        self.head.visit_params(&crate::nn::join(prefix, "head"), f);
    }

    fn clear(&mut self) {
        self.backbone.clear();
        self.head.clear();
    }
}

fn tensor_bytes(p: &Param) -> Vec<u8> {
    p.value.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes every parameter and running statistic plus the model spec.
pub fn save_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.for_each_tensor(&mut |name, p| tensors.push((name.to_string(), p.value.shape().to_vec(), tensor_bytes(p))));
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes).expect("consistent tensor");
            (name.clone(), view)
        })
        .collect::<Vec<_>>();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("format_version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert("model_spec".to_string(), serde_json::to_string(&model.spec)?);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the spec recorded in a checkpoint without building the model.
pub fn read_checkpoint_spec(path: &Path) -> Result<ModelSpec> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_spec(&bytes, path)
}

fn checkpoint_spec(bytes: &[u8], path: &Path) -> Result<ModelSpec> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = meta.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(bad("not a model checkpoint".into()));
    }
    let version: u32 = meta
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format_version {version}")));
    }
    let spec = meta.get("model_spec").ok_or_else(|| bad("missing model_spec".into()))?;
    serde_json::from_str(spec).map_err(|e| bad(format!("model_spec: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    load(path, None)
}

/// Loads a checkpoint and checks that it was written for `expected`.
/// Initialisation seed and pretrained source are not compared.
pub fn load_checkpoint_as(path: &Path, expected: &ModelSpec) -> Result<Model> {
    load(path, Some(expected))
}

fn load(path: &Path, expected: Option<&ModelSpec>) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let spec = checkpoint_spec(&bytes, path)?;
    if let Some(want) = expected {
        let fields = [
            ("backbone", spec.backbone.to_string(), want.backbone.to_string()),
            (
                "num_classes",
                spec.num_classes.to_string(),
                want.num_classes.to_string(),
            ),
            ("use_gap", spec.use_gap.to_string(), want.use_gap.to_string()),
            (
                "hidden_width",
                spec.hidden_width.to_string(),
                want.hidden_width.to_string(),
            ),
            (
                "dropout_rate",
                spec.dropout_rate.to_string(),
                want.dropout_rate.to_string(),
            ),
        ];
        for (field, got, want) in fields {
            if got != want {
                return Err(Error::SpecMismatch(format!(
                    "{field}: file has {got}, requested {want}"
                )));
            }
        }
    }
    let mut model = build_untrained(&spec)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut missing = None;
    let mut result = Ok(());
    model.for_each_tensor(&mut |name, p| {
        if result.is_ok() {
            match st.tensor(name) {
                Ok(t) => result = assign(p, name, &t),
                Err(_) => missing = missing.clone().or(Some(name.to_string())),
            }
        }
    });
    result?;
    if let Some(name) = missing {
        return Err(Error::SpecMismatch(format!("tensor '{name}' absent from checkpoint")));
    }
    Ok(model)
}

fn assign(p: &mut Param, name: &str, t: &TensorView<'_>) -> Result<()> {
    if t.dtype() != Dtype::F32 || t.shape() != p.value.shape() {
        return Err(Error::SpecMismatch(format!(
            "tensor '{name}' is {:?}{:?}, model expects F32{:?}",
            t.dtype(),
            t.shape(),
            p.value.shape()
        )));
    }
    let values: Vec<f32> = t
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    p.value = ArrayD::from_shape_vec(IxDyn(t.shape()), values).expect("shape checked");
    Ok(())
}

/// Copies `prefix.*` tensors of a weights file into `layer`; every backbone
/// tensor must be present.
fn load_tensors(st: &SafeTensors<'_>, path: &Path, prefix: &str, layer: &mut dyn Layer) -> Result<()> {
    let mut result = Ok(());
    layer.visit_params(prefix, &mut |name, p| {
        if result.is_err() {
            return;
        }
        result = match st.tensor(name) {
            Ok(t) => assign(p, name, &t),
            Err(_) => Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("weights file lacks '{name}'"),
            }),
        };
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::seed::rng;

    fn random_batch(n: usize, seed: u64) -> Array4<f32> {
        use rand::Rng;
        let mut r = rng(seed);
        Array4::from_shape_fn((n, 3, 224, 224), |_| r.random::<f32>())
    }

    #[test]
    fn registry_names() {
        let names = list_backbones();
        for want in ["resnet50", "vgg16", "mobilenet", "efficientnet_b1", "tiny_test"] {
            assert!(names.contains(&want));
            assert_eq!(want.parse::<BackboneKind>().unwrap().name(), want);
        }
        let err = "alexnet".parse::<BackboneKind>().unwrap_err();
        assert!(matches!(err, Error::UnknownBackbone { .. }));
        assert!(err.to_string().contains("resnet50"));
    }

    #[test]
    fn every_backbone_builds() {
        let expected = [
            (BackboneKind::Resnet50, [2048, 7, 7]),
            (BackboneKind::Vgg16, [512, 7, 7]),
            (BackboneKind::Mobilenet, [1024, 7, 7]),
            (BackboneKind::EfficientnetB1, [1280, 7, 7]),
            (BackboneKind::TinyTest, [128, 7, 7]),
        ];
        for (kind, shape) in expected {
            let spec = ModelSpec {
                pretrained: false,
                ..ModelSpec::standard(kind)
            };
            let mut m = build_model(&spec).unwrap();
            assert_eq!(m.feature_shape(), shape, "{kind}");
            assert_eq!(m.output_shape(INPUT_SHAPE), [NUM_CLASSES, 1, 1]);
            // GAP makes the head size independent of the input resolution
            let probs = m
                .predict_tensor(random_batch(1, 1).slice_move(ndarray::s![.., .., ..64, ..64]))
                .unwrap();
            assert_eq!(probs.len(), 1, "{kind}");
        }
    }

    #[test]
    fn resnet50_parameter_count() {
        let spec = ModelSpec {
            pretrained: false,
            ..ModelSpec::standard(BackboneKind::Resnet50)
        };
        let mut m = build_model(&spec).unwrap();
        let mut backbone = 0;
        m.backbone.visit_params("", &mut |_, p| {
            if p.trainable {
                backbone += p.len()
            }
        });
        // the canonical 25,557,032 less its 2048×1000 classifier
        assert_eq!(backbone, 23_508_032);
    }

    #[test]
    fn pretrained_needs_weights() {
        let err = build_model(&ModelSpec::standard(BackboneKind::Resnet50)).err().unwrap();
        assert!(matches!(err, Error::MissingPretrained { .. }));
        let spec = ModelSpec {
            pretrained_weights: Some("/nonexistent/w.safetensors".into()),
            ..ModelSpec::standard(BackboneKind::Mobilenet)
        };
        assert!(matches!(build_model(&spec), Err(Error::MissingPretrained { .. })));
    }

    #[test]
    fn pretrained_weights_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let mut donor = build_model(&ModelSpec {
            init_seed: 5,
            ..ModelSpec::tiny()
        })
        .unwrap();
        save_checkpoint(&mut donor, &path).unwrap();
        let spec = ModelSpec {
            pretrained: true,
            pretrained_weights: Some(path),
            init_seed: 6,
            ..ModelSpec::tiny()
        };
        let mut m = build_model(&spec).unwrap();
        assert_eq!(m.first_conv_norm(), donor.first_conv_norm());
        let fresh = build_model(&ModelSpec {
            init_seed: 6,
            ..ModelSpec::tiny()
        })
        .unwrap();
        let head = |m: &mut Model| {
            let mut v = Vec::new();
            m.head.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        assert_eq!(head(&mut m), head(&mut { fresh }));
    }

    #[test]
    fn outputs_on_simplex_and_eval_is_deterministic() {
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        let x = random_batch(4, 2);
        let a = m.predict_tensor(x.clone()).unwrap();
        let b = m.predict_tensor(x).unwrap();
        assert_eq!(a.len(), 4);
        for (p, q) in a.iter().zip(&b) {
            let s: f64 = p.as_array().iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(p.as_array().iter().all(|&v| v >= 0.0));
            assert_eq!(p, q);
        }
    }

    #[test]
    fn gap_head_is_smaller_than_flatten() {
        let mut gap = build_model(&ModelSpec::tiny()).unwrap();
        let mut flat = build_model(&ModelSpec {
            use_gap: false,
            ..ModelSpec::tiny()
        })
        .unwrap();
        let (a, b) = (gap.param_count(true), flat.param_count(true));
        assert!(a < b, "{a} vs {b}");
        // 128 channels in, 512 hidden, 7 out
        let head = 128 * 512 + 512 + 512 * 7 + 7;
        assert_eq!(b - a, (128 * 49 - 128) * 512);
        assert!(a > head);
    }

    #[test]
    fn head_shape() {
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        let mut shapes = Vec::new();
        m.head
            .visit_params("", &mut |n, p| shapes.push((n.to_string(), p.value.shape().to_vec())));
        assert_eq!(
            shapes,
            vec![
                ("fc1.weight".to_string(), vec![512, 128]),
                ("fc1.bias".to_string(), vec![512]),
                ("fc2.weight".to_string(), vec![7, 512]),
                ("fc2.bias".to_string(), vec![7]),
            ]
        );
    }

    #[test]
    fn one_step_moves_the_first_convolution() {
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        let before = m.first_conv_norm();
        let mut r = rng(3);
        let mut ctx = Ctx::train(&mut r);
        let logits = m.logits(random_batch(2, 4), &mut ctx);
        let mut grad = Array2::<f32>::zeros(logits.dim());
        grad[[0, 1]] = 1.0;
        grad[[1, 4]] = -1.0;
        m.backward_logits(grad);
        Adam::new(1e-3).step(&mut m);
        assert_ne!(m.first_conv_norm(), before);

        let mut frozen = build_model(&ModelSpec {
            all_layers_trainable: false,
            ..ModelSpec::tiny()
        })
        .unwrap();
        let before = frozen.first_conv_norm();
        let mut ctx = Ctx::train(&mut r);
        let logits = frozen.logits(random_batch(2, 4), &mut ctx);
        frozen.backward_logits(Array2::ones(logits.dim()));
        Adam::new(1e-3).step(&mut frozen);
        assert_eq!(frozen.first_conv_norm(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        // move running statistics away from their initial values
        let mut r = rng(9);
        m.logits(random_batch(2, 5), &mut Ctx::train(&mut r));
        save_checkpoint(&mut m, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        let x = random_batch(3, 6);
        assert_eq!(m.predict_tensor(x.clone()).unwrap(), back.predict_tensor(x).unwrap());
        let size = std::fs::metadata(&path).unwrap().len();
        assert!(size < 50 * 1024 * 1024, "{size} bytes");
        assert!(load_checkpoint_as(&path, &ModelSpec::tiny()).is_ok());
    }

    #[test]
    fn checkpoint_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        save_checkpoint(&mut m, &path).unwrap();

        let wanted = ModelSpec {
            use_gap: false,
            ..ModelSpec::tiny()
        };
        assert!(matches!(
            load_checkpoint_as(&path, &wanted),
            Err(Error::SpecMismatch(_))
        ));

        // a file claiming five classes
        let mut spec = ModelSpec::tiny();
        spec.num_classes = 5;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("format_version".to_string(), "1".to_string());
        meta.insert("model_spec".to_string(), serde_json::to_string(&spec).unwrap());
        let bytes = safetensors::serialize(Vec::<(String, TensorView<'_>)>::new(), Some(meta)).unwrap();
        let five = dir.path().join("five.safetensors");
        std::fs::write(&five, bytes).unwrap();
        let err = load_checkpoint_as(&five, &ModelSpec::tiny()).err().unwrap();
        assert!(
            matches!(err, Error::SpecMismatch(ref s) if s.contains("num_classes")),
            "{err}"
        );
        assert!(matches!(load_checkpoint(&five), Err(Error::SpecMismatch(_))));

        let junk = dir.path().join("junk.safetensors");
        std::fs::write(&junk, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&junk), Err(Error::Checkpoint { .. })));

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.safetensors");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint { .. })));
    }
}

//! Declarative layered detector graph with backbone/neck/head role tags.
//!
//! The miniature detector mirrors a one-stage layout: three strided backbone
//! convs, an upsample/concat/conv fusion neck at two scales, and per-scale
//! class/box/objectness head branches. Neck fusion convs carry the group-lasso
//! tag; each head branch stem is wrapped in a learnable per-channel scale
//! carrying the selection tag, so hard pruning stays local to its branch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GsaError, Result};
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Total stride of the coarse detection scale.
pub const TOTAL_STRIDE: usize = 8;
/// Stride of the fine detection scale.
pub const FINE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Backbone,
    Neck,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularizer {
    None,
    GroupLasso,
    Sss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 2-D convolution; `act` applies SiLU to the output.
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        act: bool,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    /// Learnable per-channel scaling (the pruning handle).
    ChannelScale,
    /// Final 1x1 projection producing raw predictions, no activation.
    DetectHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub role: Role,
    pub in_channels: usize,
    pub out_channels: usize,
    pub regularizer: Regularizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Layer indices of the three prediction projections at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleHeads {
    pub cls: usize,
    pub boxes: usize,
    pub obj: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub fine: ScaleHeads,
    pub coarse: ScaleHeads,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    /// Input layer indices per layer; empty means the image tensor.
    pub edges: Vec<Vec<usize>>,
    pub weights: BTreeMap<usize, ConvParams>,
    /// Per-channel scaling vectors, keyed by ChannelScale layer index.
    pub scaling: BTreeMap<usize, Tensor>,
    pub outputs: OutputSpec,
    pub num_classes: usize,
}

/// Raw predictions of one detection scale.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    /// [N, C, Hs, Ws] class logits.
    pub cls: Tensor,
    /// [N, 4, Hs, Ws] box values (cell offsets tx, ty and sizes tw, th).
    pub boxes: Tensor,
    /// [N, 1, Hs, Ws] objectness logits.
    pub obj: Tensor,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub fine: ScaleOutput,
    pub coarse: ScaleOutput,
}

/// Identifies one trainable tensor inside a [`ModelGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    Lambda,
}

/// Forward pass with the tape still attached, for backprop.
pub struct TapedForward {
    pub tape: Tape,
    pub output: DetectorOutput,
    pub output_ids: OutputIds,
    pub params: BTreeMap<ParamId, BufId>,
}

#[derive(Debug, Clone, Copy)]
pub struct OutputIds {
    pub fine_cls: BufId,
    pub fine_boxes: BufId,
    pub fine_obj: BufId,
    pub coarse_cls: BufId,
    pub coarse_boxes: BufId,
    pub coarse_obj: BufId,
}

struct Builder {
    layers: Vec<LayerSpec>,
    edges: Vec<Vec<usize>>,
    scaled: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            layers: Vec::new(),
            edges: Vec::new(),
            scaled: Vec::new(),
        }
    }

    fn push(
        &mut self,
        kind: LayerKind,
        role: Role,
        in_channels: usize,
        out_channels: usize,
        reg: Regularizer,
        inputs: Vec<usize>,
    ) -> usize {
        let index = self.layers.len();
        self.layers.push(LayerSpec {
            index,
            kind,
            role,
            in_channels,
            out_channels,
            regularizer: reg,
        });
        self.edges.push(inputs);
        if matches!(kind, LayerKind::ChannelScale) {
            self.scaled.push(index);
        }
        index
    }

    fn conv(
        &mut self,
        role: Role,
        cin: usize,
        cout: usize,
        stride: usize,
        reg: Regularizer,
        from: usize,
    ) -> usize {
        self.push(
            LayerKind::Conv { kernel: 3, stride, padding: 1, act: true },
            role,
            cin,
            cout,
            reg,
            vec![from],
        )
    }

    /// One head branch: stem conv, optional channel scale, 1x1 projection.
    fn head_branch(&mut self, cin: usize, stem: usize, out: usize, scaled: bool, from: usize) -> usize {
        let s = self.conv(Role::Head, cin, stem, 1, Regularizer::None, from);
        let pre_proj = if scaled {
            self.push(
                LayerKind::ChannelScale,
                Role::Head,
                stem,
                stem,
                Regularizer::Sss,
                vec![s],
            )
        } else {
            s
        };
        self.push(
            LayerKind::DetectHead,
            Role::Head,
            stem,
            out,
            Regularizer::None,
            vec![pre_proj],
        )
    }
}

fn build_detector(num_classes: usize, width: usize, with_scales: bool) -> Result<ModelGraph> {
    if num_classes < 1 {
        return Err(GsaError::argument("num_classes", "must be >= 1"));
    }
    if width < 4 {
        return Err(GsaError::argument(
            "width",
            format!("must be >= 4 to leave room for channel surgery, got {width}"),
        ));
    }
    let w = width;
    let mut b = Builder::new();

    // backbone: /2, /4, /8
    let b1 = b.conv(Role::Backbone, 3, w, 2, Regularizer::None, 0);
    debug_assert_eq!(b1, 0);
    b.edges[0].clear(); // first layer reads the image
    let b2 = b.conv(Role::Backbone, w, 2 * w, 2, Regularizer::None, b1);
    let b3 = b.conv(Role::Backbone, 2 * w, 4 * w, 2, Regularizer::None, b2);

    // neck: top-down fusion at /4, bottom-up back to /8
    let up = b.push(
        LayerKind::Upsample { factor: 2 },
        Role::Neck,
        4 * w,
        4 * w,
        Regularizer::None,
        vec![b3],
    );
    let cat_fine = b.push(
        LayerKind::Concat,
        Role::Neck,
        6 * w,
        6 * w,
        Regularizer::None,
        vec![up, b2],
    );
    let fuse_fine = b.conv(Role::Neck, 6 * w, 2 * w, 1, Regularizer::GroupLasso, cat_fine);
    let down = b.conv(Role::Neck, 2 * w, 2 * w, 2, Regularizer::GroupLasso, fuse_fine);
    let cat_coarse = b.push(
        LayerKind::Concat,
        Role::Neck,
        6 * w,
        6 * w,
        Regularizer::None,
        vec![down, b3],
    );
    let fuse_coarse = b.conv(Role::Neck, 6 * w, 4 * w, 1, Regularizer::GroupLasso, cat_coarse);

    // heads: cls/box/obj branches per scale, stems width w
    let fine = ScaleHeads {
        cls: b.head_branch(2 * w, w, num_classes, with_scales, fuse_fine),
        boxes: b.head_branch(2 * w, w, 4, with_scales, fuse_fine),
        obj: b.head_branch(2 * w, w, 1, with_scales, fuse_fine),
    };
    let coarse = ScaleHeads {
        cls: b.head_branch(4 * w, w, num_classes, with_scales, fuse_coarse),
        boxes: b.head_branch(4 * w, w, 4, with_scales, fuse_coarse),
        obj: b.head_branch(4 * w, w, 1, with_scales, fuse_coarse),
    };

    let mut model = ModelGraph {
        layers: b.layers,
        edges: b.edges,
        weights: BTreeMap::new(),
        scaling: BTreeMap::new(),
        outputs: OutputSpec { fine, coarse },
        num_classes,
    };
    for idx in b.scaled {
        let c = model.layers[idx].out_channels;
        model.scaling.insert(idx, Tensor::new(vec![c], vec![1.0; c]));
    }
    model.reinit_weights(0);
    model.validate()?;
    Ok(model)
}

/// Student detector: tagged neck fusion convs and scaled head stems.
pub fn build_student(num_classes: usize, width: usize) -> Result<ModelGraph> {
    build_detector(num_classes, width, true)
}

/// Teacher detector: same topology at `multiplier`-times the width, no
/// sparsity tags, identical output dimensionality.
pub fn build_teacher(num_classes: usize, width: usize, multiplier: usize) -> Result<ModelGraph> {
    if multiplier < 2 {
        return Err(GsaError::argument("multiplier", "must be >= 2"));
    }
    let mut teacher = build_detector(num_classes, width * multiplier, false)?;
    for layer in &mut teacher.layers {
        layer.regularizer = Regularizer::None;
    }
    teacher.validate()?;
    Ok(teacher)
}

impl ModelGraph {
    /// He-style init of every conv weight, zero biases, unit scales.
    pub fn reinit_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.weights.clear();
        for layer in &self.layers {
            let k = kernel_of(layer);
            if k > 0 {
                let fan_in = (layer.in_channels * k * k) as f32;
                let std = (2.0 / fan_in).sqrt();
                let normal = Normal::new(0.0f32, std).expect("std is finite");
                let n = layer.out_channels * layer.in_channels * k * k;
                let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                self.weights.insert(
                    layer.index,
                    ConvParams {
                        weight: Tensor::new(
                            vec![layer.out_channels, layer.in_channels, k, k],
                            data,
                        ),
                        bias: Tensor::zeros(vec![layer.out_channels]),
                    },
                );
            }
        }
        for (idx, lam) in self.scaling.iter_mut() {
            let c = self.layers[*idx].out_channels;
            *lam = Tensor::new(vec![c], vec![1.0; c]);
        }
    }

    /// Structural checks: topology, channel bookkeeping, tag placement, and
    /// the branch-locality rule that keeps channel surgery simple.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.edges.len() {
            return Err(GsaError::Structural("layers/edges length mismatch".into()));
        }
        let mut consumers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (layer, inputs)) in self.layers.iter().zip(&self.edges).enumerate() {
            if layer.index != i {
                return Err(GsaError::Structural(format!("layer {i} has index {}", layer.index)));
            }
            for &j in inputs {
                if j >= i {
                    return Err(GsaError::Structural(format!(
                        "layer {i} consumes layer {j}: graph must be topologically ordered"
                    )));
                }
                consumers.entry(j).or_default().push(i);
            }
            let in_sum: usize = if inputs.is_empty() {
                3
            } else {
                match layer.kind {
                    LayerKind::Concat => inputs.iter().map(|&j| self.layers[j].out_channels).sum(),
                    _ => self.layers[inputs[0]].out_channels,
                }
            };
            if in_sum != layer.in_channels {
                return Err(GsaError::Dimension {
                    axis: "in_channels",
                    expected: layer.in_channels,
                    got: in_sum,
                });
            }
            match layer.regularizer {
                Regularizer::GroupLasso => {
                    if layer.role != Role::Neck || !matches!(layer.kind, LayerKind::Conv { .. }) {
                        return Err(GsaError::Structural(format!(
                            "group-lasso tag on layer {i} requires a neck conv"
                        )));
                    }
                }
                Regularizer::Sss => {
                    if layer.role != Role::Head || !matches!(layer.kind, LayerKind::ChannelScale) {
                        return Err(GsaError::Structural(format!(
                            "selection tag on layer {i} requires a head channel scale"
                        )));
                    }
                }
                Regularizer::None => {}
            }
            if matches!(layer.kind, LayerKind::ChannelScale) {
                let lam = self.scaling.get(&i).ok_or_else(|| {
                    GsaError::Structural(format!("channel-scale layer {i} missing scaling vector"))
                })?;
                if lam.numel() != layer.out_channels {
                    return Err(GsaError::Dimension {
                        axis: "lambda",
                        expected: layer.out_channels,
                        got: lam.numel(),
                    });
                }
            }
        }
        // branch locality: a scaled stem feeds only its scale layer, and the
        // scale layer feeds only its projection
        for (&idx, _) in &self.scaling {
            let stem = self.edges[idx][0];
            let stem_consumers = consumers.get(&stem).cloned().unwrap_or_default();
            if stem_consumers != vec![idx] {
                return Err(GsaError::Structural(format!(
                    "scaled stem {stem} must feed only its channel scale {idx}"
                )));
            }
            let scale_consumers = consumers.get(&idx).cloned().unwrap_or_default();
            if scale_consumers.len() != 1
                || !matches!(self.layers[scale_consumers[0]].kind, LayerKind::DetectHead)
            {
                return Err(GsaError::Structural(format!(
                    "channel scale {idx} must feed exactly one projection layer"
                )));
            }
        }
        for heads in [&self.outputs.fine, &self.outputs.coarse] {
            for idx in [heads.cls, heads.boxes, heads.obj] {
                if idx >= self.layers.len()
                    || !matches!(self.layers[idx].kind, LayerKind::DetectHead)
                {
                    return Err(GsaError::Structural(format!(
                        "output layer {idx} is not a projection layer"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Layer indices carrying the given regularizer tag.
    pub fn tagged_layers(&self, reg: Regularizer) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.regularizer == reg)
            .map(|l| l.index)
            .collect()
    }

    /// Ordered ids of every trainable tensor (weights, biases, scales).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for &idx in self.weights.keys() {
            ids.push(ParamId { layer: idx, kind: ParamKind::Weight });
            ids.push(ParamId { layer: idx, kind: ParamKind::Bias });
        }
        for &idx in self.scaling.keys() {
            ids.push(ParamId { layer: idx, kind: ParamKind::Lambda });
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id.kind {
            ParamKind::Weight => &self.weights[&id.layer].weight,
            ParamKind::Bias => &self.weights[&id.layer].bias,
            ParamKind::Lambda => &self.scaling[&id.layer],
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id.kind {
            ParamKind::Weight => &mut self.weights.get_mut(&id.layer).unwrap().weight,
            ParamKind::Bias => &mut self.weights.get_mut(&id.layer).unwrap().bias,
            ParamKind::Lambda => self.scaling.get_mut(&id.layer).unwrap(),
        }
    }

    pub fn forward(&self, images: &Tensor) -> Result<DetectorOutput> {
        Ok(self.execute(images, false)?.output)
    }

    /// Forward pass recording every op for a later backward sweep.
    pub fn forward_taped(&self, images: &Tensor) -> Result<TapedForward> {
        self.execute(images, true)
    }

    fn execute(&self, images: &Tensor, record: bool) -> Result<TapedForward> {
        let [_, c, h, w]: [usize; 4] = images
            .shape()
            .try_into()
            .map_err(|_| GsaError::argument("images", "expected rank-4 input (N,3,H,W)"))?;
        if c != 3 {
            return Err(GsaError::Dimension { axis: "channels", expected: 3, got: c });
        }
        if h % TOTAL_STRIDE != 0 {
            return Err(GsaError::Dimension {
                axis: "height",
                expected: (h / TOTAL_STRIDE + 1) * TOTAL_STRIDE,
                got: h,
            });
        }
        if w % TOTAL_STRIDE != 0 {
            return Err(GsaError::Dimension {
                axis: "width",
                expected: (w / TOTAL_STRIDE + 1) * TOTAL_STRIDE,
                got: w,
            });
        }

        let mut tape = Tape::new();
        tape.set_recording(record);
        let image_id = tape.leaf(images);
        let mut params: BTreeMap<ParamId, BufId> = BTreeMap::new();
        let mut values: Vec<BufId> = Vec::with_capacity(self.layers.len());

        for (layer, inputs) in self.layers.iter().zip(&self.edges) {
            let arg = |slot: usize| -> BufId {
                if inputs.is_empty() {
                    image_id
                } else {
                    values[inputs[slot]]
                }
            };
            let out = match layer.kind {
                LayerKind::Conv { stride, padding, act, .. } => {
                    let p = &self.weights[&layer.index];
                    let wid = tape.leaf(&p.weight);
                    let bid = tape.leaf(&p.bias);
                    params.insert(ParamId { layer: layer.index, kind: ParamKind::Weight }, wid);
                    params.insert(ParamId { layer: layer.index, kind: ParamKind::Bias }, bid);
                    let conv = tape.conv2d(arg(0), wid, bid, stride, padding)?;
                    if act {
                        tape.silu(conv)
                    } else {
                        conv
                    }
                }
                LayerKind::DetectHead => {
                    let p = &self.weights[&layer.index];
                    let wid = tape.leaf(&p.weight);
                    let bid = tape.leaf(&p.bias);
                    params.insert(ParamId { layer: layer.index, kind: ParamKind::Weight }, wid);
                    params.insert(ParamId { layer: layer.index, kind: ParamKind::Bias }, bid);
                    tape.conv2d(arg(0), wid, bid, 1, 0)?
                }
                LayerKind::Upsample { factor } => tape.upsample_nearest(arg(0), factor)?,
                LayerKind::Concat => tape.concat_channels(arg(0), arg(1))?,
                LayerKind::ChannelScale => {
                    let lam = &self.scaling[&layer.index];
                    let lid = tape.leaf(lam);
                    params.insert(ParamId { layer: layer.index, kind: ParamKind::Lambda }, lid);
                    tape.channel_scale(arg(0), lid)?
                }
            };
            values.push(out);
        }

        let output_ids = OutputIds {
            fine_cls: values[self.outputs.fine.cls],
            fine_boxes: values[self.outputs.fine.boxes],
            fine_obj: values[self.outputs.fine.obj],
            coarse_cls: values[self.outputs.coarse.cls],
            coarse_boxes: values[self.outputs.coarse.boxes],
            coarse_obj: values[self.outputs.coarse.obj],
        };
        let tensor_of = |id: BufId| Tensor::new(tape.shape(id).to_vec(), tape.data(id).to_vec());
        let output = DetectorOutput {
            fine: ScaleOutput {
                cls: tensor_of(output_ids.fine_cls),
                boxes: tensor_of(output_ids.fine_boxes),
                obj: tensor_of(output_ids.fine_obj),
            },
            coarse: ScaleOutput {
                cls: tensor_of(output_ids.coarse_cls),
                boxes: tensor_of(output_ids.coarse_boxes),
                obj: tensor_of(output_ids.coarse_obj),
            },
        };
        Ok(TapedForward { tape, output, output_ids, params })
    }

    /// Fold each scaling vector into its stem conv and drop the scale layers.
    ///
    /// Export-only transform: the returned graph computes the same function
    /// but no longer exposes the per-channel pruning handles.
    pub fn fold_scales(&self) -> ModelGraph {
        let mut folded = self.clone();
        for (&idx, lam) in &self.scaling {
            let stem = self.edges[idx][0];
            let p = folded.weights.get_mut(&stem).expect("scaled stem has weights");
            let cout = p.weight.shape()[0];
            let per_out = p.weight.numel() / cout;
            for (o, &l) in lam.data().iter().enumerate() {
                for v in &mut p.weight.data_mut()[o * per_out..(o + 1) * per_out] {
                    *v *= l;
                }
                p.bias.data_mut()[o] *= l;
            }
        }
        // rewire consumers of each scale layer straight to the stem
        let scale_ids: Vec<usize> = folded.scaling.keys().copied().collect();
        for idx in scale_ids {
            let stem = folded.edges[idx][0];
            for inputs in &mut folded.edges {
                for j in inputs.iter_mut() {
                    if *j == idx {
                        *j = stem;
                    }
                }
            }
            // leave the scale layer in place but inert (identity weights)
            folded.scaling.insert(idx, Tensor::new(
                vec![folded.layers[idx].out_channels],
                vec![1.0; folded.layers[idx].out_channels],
            ));
        }
        folded
    }
}

fn kernel_of(layer: &LayerSpec) -> usize {
    match layer.kind {
        LayerKind::Conv { kernel, .. } => kernel,
        LayerKind::DetectHead => 1,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_graph_validates_and_tags_match_roles() {
        let m = build_student(4, 16).unwrap();
        m.validate().unwrap();
        for l in &m.layers {
            match l.regularizer {
                Regularizer::GroupLasso => assert_eq!(l.role, Role::Neck),
                Regularizer::Sss => assert_eq!(l.role, Role::Head),
                Regularizer::None => {}
            }
        }
        assert_eq!(m.tagged_layers(Regularizer::Sss).len(), 6);
        assert_eq!(m.tagged_layers(Regularizer::GroupLasso).len(), 3);
        for (_, lam) in &m.scaling {
            assert!(lam.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn width_floor_is_enforced() {
        assert!(build_student(4, 3).is_err());
        assert!(build_student(0, 16).is_err());
    }

    #[test]
    fn forward_shapes_follow_the_two_scale_contract() {
        let m = build_student(4, 8).unwrap();
        let images = Tensor::zeros(vec![2, 3, 64, 64]);
        let out = m.forward(&images).unwrap();
        assert_eq!(out.fine.cls.shape(), &[2, 4, 16, 16]);
        assert_eq!(out.fine.boxes.shape(), &[2, 4, 16, 16]);
        assert_eq!(out.fine.obj.shape(), &[2, 1, 16, 16]);
        assert_eq!(out.coarse.cls.shape(), &[2, 4, 8, 8]);
        assert_eq!(out.coarse.boxes.shape(), &[2, 4, 8, 8]);
        assert_eq!(out.coarse.obj.shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn forward_rejects_bad_stride_multiple() {
        let m = build_student(2, 8).unwrap();
        let images = Tensor::zeros(vec![1, 3, 60, 64]);
        assert!(m.forward(&images).is_err());
    }

    #[test]
    fn zero_weights_produce_zero_outputs() {
        let mut m = build_student(3, 8).unwrap();
        for (_, p) in m.weights.iter_mut() {
            p.weight.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
        let images = Tensor::new(vec![1, 3, 32, 32], vec![0.5; 3 * 32 * 32]);
        let out = m.forward(&images).unwrap();
        assert!(out.fine.cls.data().iter().all(|&v| v == 0.0));
        assert!(out.coarse.obj.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_scales_equal_folded_model() {
        let m = build_student(4, 8).unwrap();
        let folded = m.fold_scales();
        let images = random_images(1, 32, 32, 3);
        let a = m.forward(&images).unwrap();
        let b = folded.forward(&images).unwrap();
        assert_eq!(a.fine.cls.data(), b.fine.cls.data());
        assert_eq!(a.coarse.boxes.data(), b.coarse.boxes.data());
    }

    #[test]
    fn batch_of_two_equals_two_batches_of_one() {
        let m = build_student(2, 8).unwrap();
        let images = random_images(2, 32, 32, 5);
        let both = m.forward(&images).unwrap();
        let single = |n: usize| {
            let sz = 3 * 32 * 32;
            let img = Tensor::new(vec![1, 3, 32, 32], images.data()[n * sz..(n + 1) * sz].to_vec());
            m.forward(&img).unwrap()
        };
        let (o0, o1) = (single(0), single(1));
        let half = both.fine.cls.numel() / 2;
        for (i, &v) in both.fine.cls.data().iter().enumerate() {
            let expect = if i < half {
                o0.fine.cls.data()[i]
            } else {
                o1.fine.cls.data()[i - half]
            };
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = build_student(4, 8).unwrap();
        let images = random_images(2, 32, 32, 9);
        let a = m.forward(&images).unwrap();
        let b = m.forward(&images).unwrap();
        assert_eq!(a.fine.cls.data(), b.fine.cls.data());
        assert_eq!(a.coarse.obj.data(), b.coarse.obj.data());
    }

    #[test]
    fn forward_outputs_stay_finite() {
        let m = build_student(4, 16).unwrap();
        let images = random_images(2, 64, 64, 3);
        let out = m.forward(&images).unwrap();
        for t in [&out.fine.cls, &out.fine.boxes, &out.fine.obj, &out.coarse.cls] {
            assert!(t.is_finite());
        }
    }

    #[test]
    fn teacher_doubles_channels_but_not_projections() {
        let s = build_student(4, 8).unwrap();
        let t = build_teacher(4, 8, 2).unwrap();
        assert_eq!(t.tagged_layers(Regularizer::Sss).len(), 0);
        assert_eq!(t.tagged_layers(Regularizer::GroupLasso).len(), 0);
        assert!(t.scaling.is_empty());
        // backbone convs doubled
        assert_eq!(t.layers[0].out_channels, 2 * s.layers[0].out_channels);
        // projections keep C/4/1
        let s_out = s.forward(&Tensor::zeros(vec![1, 3, 32, 32])).unwrap();
        let t_out = t.forward(&Tensor::zeros(vec![1, 3, 32, 32])).unwrap();
        assert_eq!(s_out.fine.cls.shape(), t_out.fine.cls.shape());
        assert_eq!(s_out.coarse.boxes.shape(), t_out.coarse.boxes.shape());
        assert_eq!(s_out.coarse.obj.shape(), t_out.coarse.obj.shape());
    }

    #[test]
    fn taped_forward_exposes_all_params() {
        let m = build_student(2, 8).unwrap();
        let images = random_images(1, 32, 32, 1);
        let fwd = m.forward_taped(&images).unwrap();
        assert_eq!(fwd.params.len(), m.param_ids().len());
    }

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 3 * h * w)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        Tensor::new(vec![n, 3, h, w], data)
    }
}

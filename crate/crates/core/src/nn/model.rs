//! Whole-model forward and backward over a vectorized batch, plus text
//! checkpoints. A model is K identical-kind layers followed by a linear
//! prediction head applied to target rows only. When the batch carries
//! pruned adjacencies, layer k aggregates over its pruned copy and skips
//! rows no later layer will read; predictions match the unpruned forward
//! on target rows.

use std::path::Path;
use std::sync::atomic::AtomicU64;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::VectorizedBatch;
use super::layers::{
    dropout_mask, layer_backward, layer_forward, DropoutSpec, LayerCache, LayerIo, LayerKind,
    LayerParams,
};
use super::loss::TaskKind;
use super::sparse::{partition_edges, EdgePartition, SparseAdj};
use super::{NnError, Scalar};
use crate::graph::{fmt_f32, parse_f32, GraphError};

// ====== Model ======

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: LayerKind,
    pub task: TaskKind,
    /// Layer count; must equal the hop count of every batch.
    pub k: u32,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Attention heads per layer (gat only, ignored otherwise).
    pub heads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub kind: LayerKind,
    pub task: TaskKind,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: Array2<T>,
    pub head_b: Array2<T>,
}

impl Model<f32> {
    pub fn init(spec: &ModelSpec) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.k as usize);
        let mut d = spec.in_dim;
        for _ in 0..spec.k {
            layers.push(LayerParams::init(
                spec.kind, d, spec.hidden, spec.heads, &mut rng,
            )?);
            d = spec.hidden;
        }
        if spec.classes == 0 || d == 0 {
            return Err(NnError::ShapeError("zero head dimension".into()));
        }
        Ok(Model {
            kind: spec.kind,
            task: spec.task,
            layers,
            head_w: super::layers::glorot(&mut rng, d, spec.classes),
            head_b: Array2::zeros((1, spec.classes)),
        })
    }
}

impl<T: Scalar> Model<T> {
    pub fn k(&self) -> u32 {
        self.layers.len() as u32
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(self.head_w.nrows(), |l| l.in_dim())
    }

    pub fn classes(&self) -> usize {
        self.head_w.ncols()
    }

    /// Layer output widths d_0..d_K (d_0 is the input width).
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        for l in &self.layers {
            d.push(l.out_dim());
        }
        d
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(1, |l| l.heads())
    }

    /// Every tensor in checkpoint order: layers front to back, head last.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            task: self.task,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            head_w: self.head_w.mapv(|v| U::from_f64(v.as_f64())),
            head_b: self.head_b.mapv(|v| U::from_f64(v.as_f64())),
        }
    }
}

/// Gradient tensors aligned with [`Model::tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub tensors: Vec<Array2<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        ModelGrads {
            tensors: model
                .tensors()
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * f);
        }
    }
}

// ====== Forward and backward ======

#[derive(Debug, Default)]
pub struct ForwardOpts<'a> {
    /// Dropout rates; None runs inference-mode (no masks).
    pub dropout: Option<DropoutSpec>,
    /// Counts aggregation multiply-adds: (edge terms + self terms) * width.
    pub ops: Option<&'a AtomicU64>,
    /// Edge partitions per aggregation; 0 behaves as 1.
    pub partitions: usize,
}

pub struct ForwardCache<T> {
    /// Activations h_0..h_K; h_0 is the input after input dropout.
    pub hs: Vec<Array2<T>>,
    layer_caches: Vec<LayerCache<T>>,
    pub target_h: Array2<T>,
    hidden_masks: Vec<Option<Array2<T>>>,
    targets: Vec<usize>,
}

fn layer_adjs<'b, T: Scalar>(
    batch: &'b VectorizedBatch<T>,
    k: u32,
) -> (Vec<&'b SparseAdj<T>>, Vec<Option<Vec<bool>>>) {
    match &batch.pruned {
        Some(pruned) => {
            let adjs = pruned.iter().collect();
            let actives = (0..k).map(|l| Some(batch.active_rows(l))).collect();
            (adjs, actives)
        }
        None => (
            (0..k).map(|_| &batch.adj).collect(),
            (0..k).map(|_| None).collect(),
        ),
    }
}

pub fn forward<T: Scalar>(
    model: &Model<T>,
    batch: &VectorizedBatch<T>,
    opts: &ForwardOpts<'_>,
) -> Result<(Array2<T>, ForwardCache<T>), NnError> {
    let k = model.k();
    if batch.hop != k {
        return Err(NnError::SchemaError(format!(
            "batch carries {}-hop neighborhoods but the model has {k} layers",
            batch.hop
        )));
    }
    if batch.x.ncols() != model.in_dim() {
        return Err(NnError::ShapeError(format!(
            "batch features have width {}, model expects {}",
            batch.x.ncols(),
            model.in_dim()
        )));
    }
    let (adjs, actives) = layer_adjs(batch, k);
    let parts: Vec<EdgePartition> = adjs
        .iter()
        .map(|a| partition_edges(a, opts.partitions.max(1)))
        .collect();

    let mut rng = opts.dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
    let mut h0 = batch.x.clone();
    if let (Some(r), Some(d)) = (rng.as_mut(), &opts.dropout) {
        if d.input > 0.0 {
            // Input gradients are never needed, so the mask is not kept.
            h0 *= &dropout_mask::<T>(r, h0.dim(), d.input);
        }
    }

    let mut hs = vec![h0];
    let mut layer_caches = Vec::with_capacity(k as usize);
    let mut hidden_masks = Vec::with_capacity(k as usize);
    for l in 0..k as usize {
        let last = l + 1 == k as usize;
        let io = LayerIo {
            adj: adjs[l],
            part: &parts[l],
            active: actives[l].as_deref(),
            ops: opts.ops,
        };
        let attn = match (rng.as_mut(), &opts.dropout) {
            (Some(r), Some(d)) if d.attention > 0.0 => Some((d.attention, r)),
            _ => None,
        };
        let (mut h, cache) = layer_forward(&model.layers[l], &io, &hs[l], last, attn)?;
        let mut mask = None;
        if !last {
            if let (Some(r), Some(d)) = (rng.as_mut(), &opts.dropout) {
                if d.hidden > 0.0 {
                    let m = dropout_mask::<T>(r, h.dim(), d.hidden);
                    h *= &m;
                    mask = Some(m);
                }
            }
        }
        hs.push(h);
        layer_caches.push(cache);
        hidden_masks.push(mask);
    }

    let h_last = &hs[k as usize];
    let mut target_h = Array2::<T>::zeros((batch.targets.len(), h_last.ncols()));
    for (i, &row) in batch.targets.iter().enumerate() {
        target_h.row_mut(i).assign(&h_last.row(row));
    }
    let logits = target_h.dot(&model.head_w) + &model.head_b;
    Ok((
        logits,
        ForwardCache {
            hs,
            layer_caches,
            target_h,
            hidden_masks,
            targets: batch.targets.clone(),
        },
    ))
}

/// Backpropagates `dlogits` through the head and all layers. Duplicate
/// targets scatter-add into the same row, so their gradients accumulate.
pub fn backward<T: Scalar>(
    model: &Model<T>,
    batch: &VectorizedBatch<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array2<T>,
) -> Result<ModelGrads<T>, NnError> {
    let k = model.k() as usize;
    if cache.hs.len() != k + 1
        || cache.targets != batch.targets
        || cache.hs[0].nrows() != batch.x.nrows()
    {
        return Err(NnError::CacheError(
            "forward cache does not match this batch".into(),
        ));
    }
    if dlogits.dim() != (batch.targets.len(), model.classes()) {
        return Err(NnError::ShapeError(format!(
            "dlogits shape {:?} does not match ({}, {})",
            dlogits.dim(),
            batch.targets.len(),
            model.classes()
        )));
    }

    let d_head_w = cache.target_h.t().dot(dlogits);
    let d_head_b = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_target = dlogits.dot(&model.head_w.t());

    let mut dh = Array2::<T>::zeros(cache.hs[k].raw_dim());
    for (i, &row) in batch.targets.iter().enumerate() {
        let mut r = dh.row_mut(row);
        r += &d_target.row(i);
    }

    let (adjs, actives) = layer_adjs(batch, model.k());
    let mut layer_grads = Vec::with_capacity(k);
    for l in (0..k).rev() {
        if let Some(m) = &cache.hidden_masks[l] {
            dh *= m;
        }
        // Backward is sequential, so a single edge partition suffices.
        let part = partition_edges(adjs[l], 1);
        let io = LayerIo {
            adj: adjs[l],
            part: &part,
            active: actives[l].as_deref(),
            ops: None,
        };
        let (dh_prev, grads) = layer_backward(
            &model.layers[l],
            &io,
            &cache.layer_caches[l],
            &cache.hs[l],
            &dh,
            l + 1 == k,
        )?;
        layer_grads.push(grads);
        dh = dh_prev;
    }

    let mut tensors = Vec::new();
    for grads in layer_grads.into_iter().rev() {
        tensors.extend(grads.into_tensors());
    }
    tensors.push(d_head_w);
    tensors.push(d_head_b);
    Ok(ModelGrads { tensors })
}

// ====== Checkpoints ======

fn write_tensor(out: &mut String, name: &str, t: &Array2<f32>) {
    out.push_str(&format!("T {name} {} {}\n", t.nrows(), t.ncols()));
    for row in t.rows() {
        let line: Vec<String> = row.iter().map(|v| fmt_f32(*v)).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
}

impl Model<f32> {
    /// Text checkpoint. The header carries everything needed to rebuild
    /// shapes; LAYER and HEAD sections list tensors in a fixed order.
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        let mut out = format!(
            "MODEL v1 kind={} task={} K={} heads={} dims={} classes={}\n",
            self.kind,
            self.task,
            self.k(),
            self.heads(),
            dims.join(","),
            self.classes(),
        );
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!("LAYER {i}\n"));
            for (h, w) in l.w.iter().enumerate() {
                write_tensor(&mut out, &format!("w{h}"), w);
            }
            for (h, a) in l.attn_src.iter().enumerate() {
                write_tensor(&mut out, &format!("asrc{h}"), a);
            }
            for (h, a) in l.attn_dst.iter().enumerate() {
                write_tensor(&mut out, &format!("adst{h}"), a);
            }
            write_tensor(&mut out, "bias", &l.bias);
        }
        out.push_str("HEAD\n");
        write_tensor(&mut out, "w", &self.head_w);
        write_tensor(&mut out, "bias", &self.head_b);
        out.push_str("END\n");
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines().peekable();
        let header = lines
            .next()
            .ok_or_else(|| NnError::SchemaError("empty checkpoint".into()))?;
        let head = ModelHeader::parse(header)?;

        let mut read_tensor = |lines: &mut std::iter::Peekable<std::str::Lines<'_>>,
                               want: &str|
         -> Result<Array2<f32>, NnError> {
            let line = lines
                .next()
                .ok_or_else(|| NnError::SchemaError(format!("missing tensor {want}")))?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "T" || parts[1] != want {
                return Err(NnError::SchemaError(format!(
                    "expected tensor {want}, found {line:?}"
                )));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| NnError::SchemaError(format!("bad tensor rows in {line:?}")))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| NnError::SchemaError(format!("bad tensor cols in {line:?}")))?;
            let mut m = Array2::<f32>::zeros((rows, cols));
            for r in 0..rows {
                let row = lines
                    .next()
                    .ok_or_else(|| NnError::SchemaError(format!("tensor {want} truncated")))?;
                let vals: Vec<&str> = row.split('\t').collect();
                if vals.len() != cols {
                    return Err(NnError::SchemaError(format!(
                        "tensor {want} row {r} has {} values, expected {cols}",
                        vals.len()
                    )));
                }
                for (cidx, v) in vals.iter().enumerate() {
                    m[[r, cidx]] = parse_f32(v, r + 2)
                        .map_err(|e| NnError::SchemaError(format!("tensor {want}: {e}")))?;
                }
            }
            Ok(m)
        };

        let mut layers = Vec::with_capacity(head.k as usize);
        for i in 0..head.k as usize {
            let marker = lines
                .next()
                .ok_or_else(|| NnError::SchemaError(format!("missing LAYER {i}")))?;
            if marker != format!("LAYER {i}") {
                return Err(NnError::SchemaError(format!(
                    "expected \"LAYER {i}\", found {marker:?}"
                )));
            }
            let heads = if head.kind == LayerKind::Gat { head.heads } else { 1 };
            let mut w = Vec::with_capacity(heads);
            for h in 0..heads {
                w.push(read_tensor(&mut lines, &format!("w{h}"))?);
            }
            let mut attn_src = Vec::new();
            let mut attn_dst = Vec::new();
            if head.kind == LayerKind::Gat {
                for h in 0..heads {
                    attn_src.push(read_tensor(&mut lines, &format!("asrc{h}"))?);
                }
                for h in 0..heads {
                    attn_dst.push(read_tensor(&mut lines, &format!("adst{h}"))?);
                }
            }
            let bias = read_tensor(&mut lines, "bias")?;
            let expect_in = head.dims[i];
            let expect_out = head.dims[i + 1];
            if w[0].nrows() != expect_in || bias.ncols() != expect_out {
                return Err(NnError::SchemaError(format!(
                    "layer {i} shapes disagree with header dims"
                )));
            }
            layers.push(LayerParams {
                kind: head.kind,
                w,
                attn_src,
                attn_dst,
                bias,
            });
        }
        let marker = lines
            .next()
            .ok_or_else(|| NnError::SchemaError("missing HEAD section".into()))?;
        if marker != "HEAD" {
            return Err(NnError::SchemaError(format!(
                "expected \"HEAD\", found {marker:?}"
            )));
        }
        let head_w = read_tensor(&mut lines, "w")?;
        let head_b = read_tensor(&mut lines, "bias")?;
        if head_w.ncols() != head.classes || head_w.nrows() != *head.dims.last().unwrap() {
            return Err(NnError::SchemaError(
                "head shapes disagree with header".into(),
            ));
        }
        match lines.next() {
            Some("END") => {}
            other => {
                return Err(NnError::SchemaError(format!(
                    "expected END, found {other:?}"
                )))
            }
        }
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(NnError::SchemaError(format!(
                "trailing content after END: {extra:?}"
            )));
        }
        Ok(Model {
            kind: head.kind,
            task: head.task,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| NnError::Graph(GraphError::Io(e)))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| NnError::Graph(GraphError::Io(e)))?;
        Self::parse_text(&text)
    }
}

/// Parsed checkpoint header; shared with the inference-side model splitter.
pub(crate) struct ModelHeader {
    pub kind: LayerKind,
    pub task: TaskKind,
    pub k: u32,
    pub heads: usize,
    pub dims: Vec<usize>,
    pub classes: usize,
}

impl ModelHeader {
    pub fn parse(line: &str) -> Result<Self, NnError> {
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 8 || parts[0] != "MODEL" || parts[1] != "v1" {
            return Err(NnError::SchemaError(format!(
                "bad checkpoint header {line:?}"
            )));
        }
        let field = |idx: usize, name: &str| -> Result<&str, NnError> {
            parts[idx]
                .strip_prefix(&format!("{name}="))
                .ok_or_else(|| NnError::SchemaError(format!("expected {name}= in {line:?}")))
        };
        let kind: LayerKind = field(2, "kind")?.parse()?;
        let task: TaskKind = field(3, "task")?.parse()?;
        let k: u32 = field(4, "K")?
            .parse()
            .map_err(|_| NnError::SchemaError(format!("bad K in {line:?}")))?;
        let heads: usize = field(5, "heads")?
            .parse()
            .map_err(|_| NnError::SchemaError(format!("bad heads in {line:?}")))?;
        let dims: Vec<usize> = field(6, "dims")?
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| NnError::SchemaError(format!("bad dims in {line:?}")))?;
        let classes: usize = field(7, "classes")?
            .parse()
            .map_err(|_| NnError::SchemaError(format!("bad classes in {line:?}")))?;
        if dims.len() != k as usize + 1 {
            return Err(NnError::SchemaError(format!(
                "dims lists {} widths for K={k}",
                dims.len()
            )));
        }
        Ok(ModelHeader {
            kind,
            task,
            k,
            heads,
            dims,
            classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Triple};
    use crate::flat::khop_oracle;
    use crate::graph::{generate_synthetic, Graph, SyntheticModel, SyntheticSpec};
    use crate::nn::batch::vectorize;
    use crate::nn::loss::{sigmoid_ce, softmax_ce};
    use std::sync::atomic::Ordering;

    fn test_graph(n: usize, seed: u64, dim: usize) -> Graph {
        generate_synthetic(&SyntheticSpec {
            n,
            model: SyntheticModel::PowerLaw,
            seed,
            node_dim: dim,
            edge_dim: 0,
        })
        .unwrap()
        .symmetrize()
    }

    fn batch_for(
        g: &Graph,
        targets: &[u64],
        k: u32,
        labels: &[Label],
    ) -> VectorizedBatch<f32> {
        let triples: Vec<Triple> = targets
            .iter()
            .zip(labels)
            .map(|(&v, label)| Triple {
                target: v,
                label: label.clone(),
                gf: khop_oracle(g, v, k),
            })
            .collect();
        vectorize(&triples).unwrap()
    }

    fn spec(kind: LayerKind, task: TaskKind, k: u32, in_dim: usize) -> ModelSpec {
        ModelSpec {
            kind,
            task,
            k,
            in_dim,
            hidden: 6,
            classes: 3,
            heads: 2,
            seed: 42,
        }
    }

    /// Central finite differences against the analytic gradient for every
    /// parameter entry, in f64.
    fn grad_check(
        kind: LayerKind,
        task: TaskKind,
        batch: &VectorizedBatch<f32>,
        dropout: Option<DropoutSpec>,
    ) {
        let sp = spec(kind, task, batch.hop, batch.x.ncols());
        let model32 = Model::init(&sp).unwrap();
        let mut model = model32.cast::<f64>();
        let batch = batch.cast::<f64>();
        let opts = ForwardOpts {
            dropout,
            ops: None,
            partitions: 2,
        };

        let loss_of = |m: &Model<f64>| -> f64 {
            let (logits, _) = forward(m, &batch, &opts).unwrap();
            match &batch.labels {
                crate::nn::batch::BatchLabels::Classes(c) => softmax_ce(&logits, c).unwrap().0,
                crate::nn::batch::BatchLabels::Multi(p) => sigmoid_ce(&logits, p).unwrap().0,
                crate::nn::batch::BatchLabels::Unlabeled => unreachable!(),
            }
        };
        let (logits, cache) = forward(&model, &batch, &opts).unwrap();
        let dlogits = match &batch.labels {
            crate::nn::batch::BatchLabels::Classes(c) => softmax_ce(&logits, c).unwrap().1,
            crate::nn::batch::BatchLabels::Multi(p) => sigmoid_ce(&logits, p).unwrap().1,
            crate::nn::batch::BatchLabels::Unlabeled => unreachable!(),
        };
        let grads = backward(&model, &batch, &cache, &dlogits).unwrap();

        let n_tensors = grads.tensors.len();
        let h = 1e-4;
        for ti in 0..n_tensors {
            let dim = grads.tensors[ti].raw_dim();
            for r in 0..dim[0] {
                for c in 0..dim[1] {
                    let orig = model.tensors()[ti][[r, c]];
                    model.tensors_mut()[ti][[r, c]] = orig + h;
                    let lp = loss_of(&model);
                    model.tensors_mut()[ti][[r, c]] = orig - h;
                    let lm = loss_of(&model);
                    model.tensors_mut()[ti][[r, c]] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads.tensors[ti][[r, c]];
                    let tol = 1e-7 + 1e-4 * (fd.abs() + an.abs());
                    assert!(
                        (fd - an).abs() <= tol,
                        "tensor {ti} [{r},{c}]: finite diff {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_check_gcn() {
        let g = test_graph(12, 3, 3).gcn_normalize();
        // Duplicate target 0 so scatter-add accumulation is exercised.
        let b = batch_for(
            &g,
            &[0, 4, 0],
            2,
            &[Label::Class(0), Label::Class(2), Label::Class(1)],
        );
        grad_check(LayerKind::Gcn, TaskKind::SingleLabel, &b, None);
    }

    #[test]
    fn grad_check_gcn_with_dropout() {
        let g = test_graph(10, 9, 3).gcn_normalize();
        let b = batch_for(&g, &[1, 5], 2, &[Label::Class(1), Label::Class(0)]);
        grad_check(
            LayerKind::Gcn,
            TaskKind::SingleLabel,
            &b,
            Some(DropoutSpec::all(0.3, 7)),
        );
    }

    #[test]
    fn grad_check_sage_multilabel() {
        let g = test_graph(12, 5, 3);
        let b = batch_for(
            &g,
            &[2, 7],
            2,
            &[Label::Multi(vec![0, 2]), Label::Multi(vec![1])],
        );
        grad_check(LayerKind::Sage, TaskKind::MultiLabel, &b, None);
    }

    #[test]
    fn grad_check_gat() {
        let g = test_graph(10, 6, 3);
        let b = batch_for(&g, &[0, 3], 2, &[Label::Class(0), Label::Class(2)]);
        grad_check(LayerKind::Gat, TaskKind::SingleLabel, &b, None);
    }

    #[test]
    fn grad_check_gat_pruned_with_attention_dropout() {
        let g = test_graph(11, 8, 3);
        let mut b = batch_for(&g, &[1, 6], 2, &[Label::Class(1), Label::Class(2)]);
        b.prune().unwrap();
        grad_check(
            LayerKind::Gat,
            TaskKind::SingleLabel,
            &b,
            Some(DropoutSpec {
                input: 0.0,
                hidden: 0.0,
                attention: 0.25,
                seed: 11,
            }),
        );
    }

    #[test]
    fn grad_check_sage_pruned() {
        let g = test_graph(12, 5, 3);
        let mut b = batch_for(&g, &[2, 7], 2, &[Label::Class(0), Label::Class(1)]);
        b.prune().unwrap();
        grad_check(LayerKind::Sage, TaskKind::SingleLabel, &b, None);
    }

    #[test]
    fn pruned_forward_matches_unpruned_on_targets() {
        for kind in [LayerKind::Gcn, LayerKind::Sage, LayerKind::Gat] {
            let g = if kind == LayerKind::Gcn {
                test_graph(25, 2, 4).gcn_normalize()
            } else {
                test_graph(25, 2, 4)
            };
            let b = batch_for(
                &g,
                &[0, 7, 13],
                3,
                &[Label::Class(0), Label::Class(1), Label::Class(2)],
            );
            let mut pruned = b.clone();
            pruned.prune().unwrap();
            let sp = spec(kind, TaskKind::SingleLabel, 3, b.x.ncols());
            let model = Model::init(&sp).unwrap();
            let opts = ForwardOpts::default();
            let (full, _) = forward(&model, &b, &opts).unwrap();
            let (cut, _) = forward(&model, &pruned, &opts).unwrap();
            for (a, z) in full.iter().zip(cut.iter()) {
                assert!(
                    (a - z).abs() <= 1e-6,
                    "{kind}: pruned logit {z} vs full {a}"
                );
            }
        }
    }

    #[test]
    fn pruning_reduces_aggregation_work() {
        let g = test_graph(40, 4, 4);
        let b = batch_for(&g, &[0], 3, &[Label::Class(0)]);
        let mut pruned = b.clone();
        pruned.prune().unwrap();
        let sp = spec(LayerKind::Sage, TaskKind::SingleLabel, 3, b.x.ncols());
        let model = Model::init(&sp).unwrap();
        let full_ops = AtomicU64::new(0);
        let cut_ops = AtomicU64::new(0);
        forward(
            &model,
            &b,
            &ForwardOpts { ops: Some(&full_ops), ..Default::default() },
        )
        .unwrap();
        forward(
            &model,
            &pruned,
            &ForwardOpts { ops: Some(&cut_ops), ..Default::default() },
        )
        .unwrap();
        assert!(cut_ops.load(Ordering::Relaxed) < full_ops.load(Ordering::Relaxed));
    }

    #[test]
    fn ops_counter_matches_entry_counts() {
        let g = test_graph(15, 1, 3);
        let mut b = batch_for(&g, &[2], 2, &[Label::Class(0)]);
        b.prune().unwrap();
        let sp = spec(LayerKind::Sage, TaskKind::SingleLabel, 2, 3);
        let model = Model::init(&sp).unwrap();
        let ops = AtomicU64::new(0);
        forward(
            &model,
            &b,
            &ForwardOpts { ops: Some(&ops), ..Default::default() },
        )
        .unwrap();
        // sage counts every kept entry plus one self term per active row,
        // times the width being aggregated (the layer input width).
        let mut want = 0u64;
        for l in 0..2u32 {
            let adj = &b.pruned.as_ref().unwrap()[l as usize];
            let active = b.active_rows(l);
            let rows = active.iter().filter(|&&a| a).count() as u64;
            let width = model.dims()[l as usize] as u64;
            want += (adj.len() as u64 + rows) * width;
        }
        assert_eq!(ops.load(Ordering::Relaxed), want);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = test_graph(20, 12, 4);
        let b = batch_for(&g, &[3, 9], 2, &[Label::Class(0), Label::Class(1)]);
        let sp = spec(LayerKind::Gat, TaskKind::SingleLabel, 2, 4);
        let model = Model::init(&sp).unwrap();
        let opts = ForwardOpts {
            dropout: Some(DropoutSpec::all(0.5, 99)),
            ops: None,
            partitions: 3,
        };
        let (a, _) = forward(&model, &b, &opts).unwrap();
        let (z, _) = forward(&model, &b, &opts).unwrap();
        assert_eq!(a, z);
    }

    #[test]
    fn dropout_changes_output() {
        let g = test_graph(20, 12, 4);
        let b = batch_for(&g, &[3], 2, &[Label::Class(0)]);
        let sp = spec(LayerKind::Gcn, TaskKind::SingleLabel, 2, 4);
        let model = Model::init(&sp).unwrap();
        let (plain, _) = forward(&model, &b, &ForwardOpts::default()).unwrap();
        let (dropped, _) = forward(
            &model,
            &b,
            &ForwardOpts {
                dropout: Some(DropoutSpec::all(0.5, 1)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(plain, dropped);
    }

    #[test]
    fn hop_mismatch_rejected() {
        let g = test_graph(10, 2, 3);
        let b = batch_for(&g, &[0], 1, &[Label::Class(0)]);
        let sp = spec(LayerKind::Gcn, TaskKind::SingleLabel, 2, 3);
        let model = Model::init(&sp).unwrap();
        assert!(matches!(
            forward(&model, &b, &ForwardOpts::default()),
            Err(NnError::SchemaError(_))
        ));
    }

    #[test]
    fn stale_cache_rejected() {
        let g = test_graph(10, 2, 3);
        let b1 = batch_for(&g, &[0], 2, &[Label::Class(0)]);
        let b2 = batch_for(&g, &[1], 2, &[Label::Class(1)]);
        let sp = spec(LayerKind::Gcn, TaskKind::SingleLabel, 2, 3);
        let model = Model::init(&sp).unwrap();
        let (logits, cache) = forward(&model, &b1, &ForwardOpts::default()).unwrap();
        let dlogits = Array2::zeros(logits.raw_dim());
        assert!(matches!(
            backward(&model, &b2, &cache, &dlogits),
            Err(NnError::CacheError(_))
        ));
    }

    #[test]
    fn zero_layer_model_is_linear() {
        let g = test_graph(8, 3, 4);
        let b = batch_for(&g, &[2, 5], 0, &[Label::Class(0), Label::Class(1)]);
        let sp = ModelSpec {
            k: 0,
            ..spec(LayerKind::Gcn, TaskKind::SingleLabel, 0, 4)
        };
        let model = Model::init(&sp).unwrap();
        let (logits, _) = forward(&model, &b, &ForwardOpts::default()).unwrap();
        for (i, &t) in b.targets.iter().enumerate() {
            let row = b.x.row(t);
            for c in 0..model.classes() {
                let mut want = model.head_b[[0, c]];
                for j in 0..4 {
                    want += row[j] * model.head_w[[j, c]];
                }
                assert!((logits[[i, c]] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for (kind, heads) in [(LayerKind::Gcn, 1), (LayerKind::Sage, 1), (LayerKind::Gat, 2)] {
            let sp = ModelSpec {
                heads,
                ..spec(kind, TaskKind::SingleLabel, 2, 5)
            };
            let model = Model::init(&sp).unwrap();
            let text = model.to_text();
            let back = Model::parse_text(&text).unwrap();
            assert_eq!(model, back);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let sp = spec(LayerKind::Gcn, TaskKind::SingleLabel, 2, 5);
        let model = Model::init(&sp).unwrap();
        let text = model.to_text();
        assert!(Model::parse_text(&text.replace("MODEL v1", "MODEL v2")).is_err());
        assert!(Model::parse_text(text.trim_end_matches("END\n")).is_err());
        assert!(Model::parse_text(&text.replace("LAYER 1", "LAYER 7")).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let sp = spec(LayerKind::Gat, TaskKind::SingleLabel, 2, 5);
        let a = Model::init(&sp).unwrap();
        let b = Model::init(&sp).unwrap();
        let c = Model::init(&ModelSpec { seed: 43, ..sp }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

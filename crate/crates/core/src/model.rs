//! The crack-localization network: temporal pooling, inception-style blocks
//! with self-attention, a reduction/convolution head and a dense regressor
//! producing the four box coordinates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gradnet::{
    checkpoint, AttentionAxis, BatchNorm, Concat, Conv2d, Dense, Dropout, Flatten, Graph,
    GraphBuilder, Layer, MaxPool2d, Mode, NodeId, Padding, Real, Relu, Reshape, SelfAttention,
    Tensor,
};
use crate::io::write_atomic;
use crate::kv;
use crate::labels::KeypointBox;
use crate::rng::{derive_seed, stream_rng};

/// Trainable-parameter count reported for the reference architecture.
pub const REFERENCE_TOTAL_PARAMS: usize = 1_228_760;

/// Gains for fan-in scaled uniform init, `limit = sqrt(gain / fan_in)`.
const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(time, sensors, channels)` per sample.
    pub input_shape: [usize; 3],
    pub time_pool: usize,
    pub base_filters: usize,
    pub n_blocks: usize,
    pub pool_after_block: (usize, usize),
    pub attention: bool,
    pub attention_axis: AttentionAxis,
    pub reduction_filters: usize,
    pub head_filters: (usize, usize),
    pub dense_widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [2000, 81, 2],
            time_pool: 4,
            base_filters: 16,
            n_blocks: 4,
            pool_after_block: (2, 2),
            attention: true,
            attention_axis: AttentionAxis::Width,
            reduction_filters: 128,
            head_filters: (16, 8),
            dense_widths: vec![128, 64],
            output_dim: 4,
            dropout_rate: 0.3,
            batchnorm: true,
        }
    }
}

/// Filter counts of one block: (1x1, 3x3, 5x5, pool-branch 1x1).
pub fn block_split(filters: usize) -> [usize; 4] {
    [filters / 4, filters / 2, filters / 4, filters / 4]
}

impl ModelConfig {
    pub fn block_filters(&self, block: usize) -> usize {
        self.base_filters << block
    }

    pub fn block_out_channels(&self, block: usize) -> usize {
        block_split(self.block_filters(block)).iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.output_dim != 4 {
            return bad("output_dim must be 4");
        }
        if self.base_filters < 4 || !self.base_filters.is_multiple_of(4) {
            return bad("base_filters must be a positive multiple of 4");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1");
        }
        if self.time_pool == 0 || self.pool_after_block.0 == 0 || self.pool_after_block.1 == 0 {
            return bad("pool sizes must be positive");
        }
        if self.input_shape.contains(&0) {
            return bad("input dimensions must be positive");
        }
        if self.reduction_filters < 3 || self.head_filters.0 == 0 || self.head_filters.1 == 0 {
            return bad("head filter counts are too small");
        }
        if self.dense_widths.contains(&0) {
            return bad("dense widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Shapes every named stage must have, derived by shape arithmetic alone.
    pub fn expected_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let [t0, s0, c0] = self.input_shape;
        let mut trace = vec![("input".to_string(), vec![t0, s0, c0])];
        let (mut t, mut s) = (t0 / self.time_pool, s0);
        trace.push(("time_pool".into(), vec![t, s, c0]));
        let (pt, ps) = self.pool_after_block;
        for b in 0..self.n_blocks {
            let c = self.block_out_channels(b);
            trace.push((format!("block{}", b + 1), vec![t, s, c]));
            (t, s) = (t / pt, s / ps);
            trace.push((format!("pool{}", b + 1), vec![t, s, c]));
            if self.attention {
                trace.push((format!("attention{}", b + 1), vec![t, s, c]));
            }
        }
        let r = self.reduction_filters;
        let (h1, h2) = self.head_filters;
        trace.push(("reduction".into(), vec![1, s, r]));
        trace.push(("reshape".into(), vec![s, r, 1]));
        trace.push(("head3x3".into(), vec![s.saturating_sub(2), r - 2, h1]));
        trace.push((
            "head4x4".into(),
            vec![s.saturating_sub(2), (r - 2).div_ceil(4), h2],
        ));
        let flat = s.saturating_sub(2) * (r - 2).div_ceil(4) * h2;
        trace.push(("flatten".into(), vec![flat]));
        for (i, &w) in self.dense_widths.iter().enumerate() {
            trace.push((format!("dense{}", i + 1), vec![w]));
        }
        trace.push(("output".into(), vec![self.output_dim]));
        Ok(trace)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let [t, s, c] = self.input_shape;
        vec![
            ("input_shape".into(), kv::join(&[t, s, c])),
            ("time_pool".into(), self.time_pool.to_string()),
            ("base_filters".into(), self.base_filters.to_string()),
            ("n_blocks".into(), self.n_blocks.to_string()),
            (
                "pool_after_block".into(),
                kv::join(&[self.pool_after_block.0, self.pool_after_block.1]),
            ),
            ("attention".into(), self.attention.to_string()),
            (
                "attention_axis".into(),
                match self.attention_axis {
                    AttentionAxis::Width => "width",
                    AttentionAxis::Full => "full",
                }
                .into(),
            ),
            (
                "reduction_filters".into(),
                self.reduction_filters.to_string(),
            ),
            (
                "head_filters".into(),
                kv::join(&[self.head_filters.0, self.head_filters.1]),
            ),
            ("dense_widths".into(), kv::join(&self.dense_widths)),
            ("output_dim".into(), self.output_dim.to_string()),
            ("dropout_rate".into(), self.dropout_rate.to_string()),
            ("batchnorm".into(), self.batchnorm.to_string()),
        ]
    }

    /// Applies one config entry; returns `false` for keys this type does not own.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let pair = |key: &str, v: &str| -> Result<(usize, usize)> {
            match kv::list::<usize>(key, v)?.as_slice() {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Config(format!("{key}: expected two integers"))),
            }
        };
        match key {
            "input_shape" => {
                self.input_shape = kv::list::<usize>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config("input_shape: expected three integers".into()))?
            }
            "time_pool" => self.time_pool = kv::value(key, v)?,
            "base_filters" => self.base_filters = kv::value(key, v)?,
            "n_blocks" => self.n_blocks = kv::value(key, v)?,
            "pool_after_block" => self.pool_after_block = pair(key, v)?,
            "attention" => self.attention = kv::value(key, v)?,
            "attention_axis" => {
                self.attention_axis = match v {
                    "width" => AttentionAxis::Width,
                    "full" => AttentionAxis::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "attention_axis: expected width|full, got `{v}`"
                        )))
                    }
                }
            }
            "reduction_filters" => self.reduction_filters = kv::value(key, v)?,
            "head_filters" => self.head_filters = pair(key, v)?,
            "dense_widths" => self.dense_widths = kv::list(key, v)?,
            "output_dim" => self.output_dim = kv::value(key, v)?,
            "dropout_rate" => self.dropout_rate = kv::value(key, v)?,
            "batchnorm" => self.batchnorm = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Builds graph nodes with deterministic per-layer init streams.
struct Assembler<T> {
    b: GraphBuilder<T>,
    seed: u64,
    counter: u64,
    bn_channels: usize,
}

impl<T: Real> Assembler<T> {
    fn rng(&mut self, stream: &str) -> rand_chacha::ChaCha8Rng {
        self.counter += 1;
        stream_rng(self.seed, stream, self.counter)
    }

    fn add(&mut self, name: &str, layer: impl Into<Layer<T>>, input: NodeId) -> Result<NodeId> {
        self.b.chain(name, layer, input)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        input: NodeId,
        kernel: (usize, usize),
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let mut c = Conv2d::new(kernel.0, kernel.1, c_in, c_out, stride, padding);
        c.init_uniform(RELU_GAIN, &mut self.rng("init-conv"));
        self.add(name, c, input)
    }

    /// conv -> [batchnorm] -> relu
    fn conv_unit(
        &mut self,
        name: &str,
        input: NodeId,
        k: usize,
        c_in: usize,
        c_out: usize,
        bn: bool,
    ) -> Result<NodeId> {
        let mut x = self.conv(
            &format!("{name}/conv"),
            input,
            (k, k),
            c_in,
            c_out,
            (1, 1),
            Padding::Same,
        )?;
        if bn {
            x = self.add(&format!("{name}/bn"), BatchNorm::new(c_out), x)?;
            self.bn_channels += c_out;
        }
        self.add(&format!("{name}/relu"), Relu::new(), x)
    }

    fn dense(
        &mut self,
        name: &str,
        input: NodeId,
        n_in: usize,
        n_out: usize,
        gain: f64,
    ) -> Result<NodeId> {
        let mut d = Dense::new(n_in, n_out);
        d.init_uniform(gain, &mut self.rng("init-dense"));
        self.add(name, d, input)
    }
}

/// A built network plus the shape trace it was validated against.
#[derive(Debug, Clone)]
pub struct MicroCrackNet<T> {
    config: ModelConfig,
    graph: Graph<T>,
    trace: Vec<(String, Vec<usize>)>,
    bn_channels: usize,
}

impl<T: Real> MicroCrackNet<T> {
    /// Builds the graph and checks every named stage against
    /// [`ModelConfig::expected_trace`].
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let expected = config.expected_trace()?;
        let mut a = Assembler {
            b: GraphBuilder::new(&config.input_shape),
            seed,
            counter: 0,
            bn_channels: 0,
        };
        let mut stages: Vec<(String, NodeId)> = vec![("input".into(), NodeId::Input)];
        let bn = config.batchnorm;

        let mut x = a.add(
            "time_pool",
            MaxPool2d::temporal(config.time_pool),
            NodeId::Input,
        )?;
        stages.push(("time_pool".into(), x));
        let mut c_in = config.input_shape[2];
        for blk in 0..config.n_blocks {
            let name = format!("block{}", blk + 1);
            let [f1, f3, f5, fp] = block_split(config.block_filters(blk));
            let b1 = a.conv_unit(&format!("{name}/b1x1"), x, 1, c_in, f1, bn)?;
            let b3 = a.conv_unit(&format!("{name}/b3x3"), x, 3, c_in, f3, bn)?;
            let b5 = a.conv_unit(&format!("{name}/b5x5"), x, 5, c_in, f5, bn)?;
            let p = a.add(
                &format!("{name}/bpool/pool"),
                MaxPool2d::new((3, 3), (1, 1), Padding::Same),
                x,
            )?;
            let bp = a.conv_unit(&format!("{name}/bpool"), p, 1, c_in, fp, bn)?;
            x =
                a.b.add(&format!("{name}/concat"), Concat::new(), &[b1, b3, b5, bp])?;
            stages.push((name, x));
            c_in = f1 + f3 + f5 + fp;
            let (pt, ps) = config.pool_after_block;
            x = a.add(
                &format!("pool{}", blk + 1),
                MaxPool2d::new((pt, ps), (pt, ps), Padding::Valid),
                x,
            )?;
            stages.push((format!("pool{}", blk + 1), x));
            if config.attention {
                let mut att = SelfAttention::new(c_in, config.attention_axis);
                att.init_uniform(LINEAR_GAIN, &mut a.rng("init-attention"));
                x = a.add(&format!("attention{}", blk + 1), att, x)?;
                stages.push((format!("attention{}", blk + 1), x));
            }
        }
        let t_final = a.b.shape_of(x)?[0];
        let r = config.reduction_filters;
        x = a.conv(
            "reduction",
            x,
            (t_final, 1),
            c_in,
            r,
            (1, 1),
            Padding::Valid,
        )?;
        stages.push(("reduction".into(), x));
        x = a.add("reduction/relu", Relu::new(), x)?;
        let s = a.b.shape_of(x)?[1];
        x = a.add("reshape", Reshape::new(&[s, r, 1]), x)?;
        stages.push(("reshape".into(), x));
        let (h1, h2) = config.head_filters;
        x = a.conv("head3x3", x, (3, 3), 1, h1, (1, 1), Padding::Valid)?;
        stages.push(("head3x3".into(), x));
        x = a.add("head3x3/relu", Relu::new(), x)?;
        x = a.conv("head4x4", x, (4, 4), h1, h2, (1, 4), Padding::Same)?;
        stages.push(("head4x4".into(), x));
        x = a.add("head4x4/relu", Relu::new(), x)?;
        x = a.add("flatten", Flatten::new(), x)?;
        stages.push(("flatten".into(), x));
        let mut width = a.b.shape_of(x)?[0];
        for (i, &w) in config.dense_widths.iter().enumerate() {
            let name = format!("dense{}", i + 1);
            x = a.dense(&name, x, width, w, RELU_GAIN)?;
            stages.push((name.clone(), x));
            x = a.add(&format!("{name}/relu"), Relu::new(), x)?;
            let drop_seed = derive_seed(seed, "dropout", i as u64);
            x = a.add(
                &format!("{name}/dropout"),
                Dropout::new(config.dropout_rate, drop_seed),
                x,
            )?;
            width = w;
        }
        x = a.dense("output", x, width, config.output_dim, LINEAR_GAIN)?;
        stages.push(("output".into(), x));

        let mut trace = Vec::with_capacity(stages.len());
        for (name, id) in &stages {
            trace.push((name.clone(), a.b.shape_of(*id)?.to_vec()));
        }
        if trace != expected {
            let diff = trace
                .iter()
                .zip(&expected)
                .find(|(g, e)| g != e)
                .map(|(g, e)| {
                    format!(
                        "stage {} built as {:?}, expected {} {:?}",
                        g.0, g.1, e.0, e.1
                    )
                })
                .unwrap_or_else(|| "stage lists differ in length".into());
            return Err(Error::Shape(format!("model shape trace mismatch: {diff}")));
        }
        let bn_channels = a.bn_channels;
        let graph = a.b.build(x)?;
        Ok(Self {
            config: config.clone(),
            graph,
            trace,
            bn_channels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    /// `(stage, per-sample shape)` for each named stage.
    pub fn shape_trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    /// Sum of batchnorm channel widths.
    pub fn bn_channels(&self) -> usize {
        self.bn_channels
    }

    /// `(trainable, non-trainable)`.
    pub fn count_params(&self) -> (usize, usize) {
        self.graph.count_params()
    }

    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.graph.forward(batch, mode)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.backward(grad)
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn backward_params(&mut self, grad: &Tensor<T>) -> Result<()> {
        self.graph.backward_params(grad)
    }

    /// Inference-mode forward that leaves no caches behind.
    pub fn infer(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.infer(batch)
    }

    /// Boxes for every sample in `batch`.
    pub fn predict_boxes(&mut self, batch: &Tensor<T>) -> Result<Vec<KeypointBox>> {
        let y = self.infer(batch)?;
        Ok(y.data()
            .chunks_exact(4)
            .map(|r| box_from_raw([r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()]))
            .collect())
    }

    pub fn predict_box(&mut self, sample: &Tensor<T>) -> Result<KeypointBox> {
        if sample.batch() != 1 {
            return Err(Error::Shape(
                "predict_box takes a batch of one sample".into(),
            ));
        }
        Ok(self.predict_boxes(sample)?[0])
    }

    pub fn cast<U: Real>(&self) -> MicroCrackNet<U> {
        let mut out = MicroCrackNet::<U>::build(&self.config, 0).expect("config already validated");
        for (dst, src) in out.graph.layers_mut().zip(self.graph.layers()) {
            for (d, s) in dst.buffers_mut().into_iter().zip(src.buffers()) {
                *d = s.cast();
            }
        }
        out
    }

    /// Writes `path` (MCPN weights) and `path.cfg` (config sidecar holding
    /// the model config plus any `extra` entries).
    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        checkpoint::save(&self.graph, path)?;
        let mut entries = self.config.to_kv();
        entries.extend_from_slice(extra);
        write_atomic(&sidecar_path(path), kv::render(&entries).as_bytes())?;
        Ok(())
    }

    /// Rebuilds the model described by `path.cfg` and loads its weights.
    /// Sidecar keys not owned by the model config are returned.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| {
            Error::Format(format!(
                "cannot read config sidecar {}: {e}",
                side.display()
            ))
        })?;
        let mut cfg = ModelConfig::default();
        let mut extra = BTreeMap::new();
        for (k, v) in kv::parse(&text)? {
            if !cfg.apply(&k, &v)? {
                extra.insert(k, v);
            }
        }
        let mut net = Self::build(&cfg, 0)?;
        checkpoint::load_into(&mut net.graph, path)?;
        Ok((net, extra))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Clamps raw outputs to `[0, 1]` and orders each axis so min <= max.
pub fn box_from_raw(raw: [f64; 4]) -> KeypointBox {
    let c = raw.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    KeypointBox::new(
        c[0].min(c[2]),
        c[1].min(c[3]),
        c[0].max(c[2]),
        c[1].max(c[3]),
    )
}

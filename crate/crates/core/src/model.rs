//! Item embeddings, a single GRU layer and the two output heads.
//!
//! Inputs are left-padded windows of item indices. Padding positions are
//! skipped entirely: the hidden state of a row is carried through
//! unchanged and no gradient flows through them. Each timestep therefore
//! only computes the rows that are active at that step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{MiniBatch, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, sigmoid, softmax_rows, Matrix, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax over every item (index 0 included).
    Softmax,
    /// Dense ReLU layer then a linear projection into item-embedding space.
    Embedding,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Embedding => "embedding",
        }
    }

    pub fn parse(raw: &str) -> Result<Self> {
        match raw {
            "softmax" => Ok(HeadKind::Softmax),
            "embedding" => Ok(HeadKind::Embedding),
            other => Err(Error::config(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of items plus the padding slot.
    pub vocab_size_with_pad: usize,
    pub embed_dim: usize,
    pub gru_units: usize,
    pub head: HeadKind,
    pub hidden_dense_units: Option<usize>,
    pub window: usize,
    pub embed_dropout_rate: f64,
}

impl ModelConfig {
    pub fn softmax(vocab_size_with_pad: usize, embed_dim: usize, gru_units: usize) -> Self {
        ModelConfig {
            vocab_size_with_pad,
            embed_dim,
            gru_units,
            head: HeadKind::Softmax,
            hidden_dense_units: None,
            window: 19,
            embed_dropout_rate: 0.25,
        }
    }

    /// Embedding-output head with a dense layer of `2 · gru_units`.
    pub fn embedding(vocab_size_with_pad: usize, embed_dim: usize, gru_units: usize) -> Self {
        ModelConfig {
            head: HeadKind::Embedding,
            hidden_dense_units: Some(2 * gru_units),
            ..ModelConfig::softmax(vocab_size_with_pad, embed_dim, gru_units)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size_with_pad < 2 {
            return Err(Error::config("vocabulary needs at least one real item"));
        }
        if self.embed_dim == 0 || self.gru_units == 0 || self.window == 0 {
            return Err(Error::config("embed_dim, gru_units and window must be positive"));
        }
        if !(0.0..1.0).contains(&self.embed_dropout_rate) {
            return Err(Error::config("embed_dropout_rate must lie in [0, 1)"));
        }
        match (self.head, self.hidden_dense_units) {
            (HeadKind::Softmax, None) => Ok(()),
            (HeadKind::Embedding, Some(n)) if n > 0 => Ok(()),
            (HeadKind::Softmax, Some(_)) => {
                Err(Error::config("hidden_dense_units only applies to the embedding head"))
            }
            (HeadKind::Embedding, _) => {
                Err(Error::config("embedding head needs hidden_dense_units > 0"))
            }
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size_with_pad".into(), self.vocab_size_with_pad.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("gru_units".into(), self.gru_units.to_string()),
            ("head".into(), self.head.as_str().into()),
            (
                "hidden_dense_units".into(),
                self.hidden_dense_units
                    .map_or_else(|| "none".to_string(), |n| n.to_string()),
            ),
            ("window".into(), self.window.to_string()),
            ("embed_dropout_rate".into(), self.embed_dropout_rate.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| Error::checkpoint(format!("bad value {raw:?} for {key}")))
        }
        let mut vocab = None;
        let mut embed = None;
        let mut gru = None;
        let mut head = None;
        let mut hidden = None;
        let mut window = None;
        let mut dropout = None;
        for (k, v) in pairs {
            match k {
                "vocab_size_with_pad" => vocab = Some(num(k, v)?),
                "embed_dim" => embed = Some(num(k, v)?),
                "gru_units" => gru = Some(num(k, v)?),
                "head" => head = Some(HeadKind::parse(v)?),
                "hidden_dense_units" => {
                    hidden = Some(if v == "none" { None } else { Some(num(k, v)?) })
                }
                "window" => window = Some(num(k, v)?),
                "embed_dropout_rate" => dropout = Some(num(k, v)?),
                other => return Err(Error::checkpoint(format!("unknown config key {other}"))),
            }
        }
        let missing = |name: &str| Error::checkpoint(format!("missing config key {name}"));
        let cfg = ModelConfig {
            vocab_size_with_pad: vocab.ok_or_else(|| missing("vocab_size_with_pad"))?,
            embed_dim: embed.ok_or_else(|| missing("embed_dim"))?,
            gru_units: gru.ok_or_else(|| missing("gru_units"))?,
            head: head.ok_or_else(|| missing("head"))?,
            hidden_dense_units: hidden.ok_or_else(|| missing("hidden_dense_units"))?,
            window: window.ok_or_else(|| missing("window"))?,
            embed_dropout_rate: dropout.ok_or_else(|| missing("embed_dropout_rate"))?,
        };
        cfg.validate().map_err(|e| Error::checkpoint(e.to_string()))?;
        Ok(cfg)
    }

    /// Name and shape of every trainable tensor, in canonical order.
    pub fn param_shapes(&self) -> Vec<(&'static str, (usize, usize))> {
        let (v, d, h) = (self.vocab_size_with_pad, self.embed_dim, self.gru_units);
        let mut shapes = vec![
            ("embedding", (v, d)),
            ("gru.w_z", (d, h)),
            ("gru.w_r", (d, h)),
            ("gru.w_h", (d, h)),
            ("gru.u_z", (h, h)),
            ("gru.u_r", (h, h)),
            ("gru.u_h", (h, h)),
            ("gru.b_z", (1, h)),
            ("gru.b_r", (1, h)),
            ("gru.b_h", (1, h)),
        ];
        match self.head {
            HeadKind::Softmax => {
                shapes.push(("head.w_out", (h, v)));
                shapes.push(("head.b_out", (1, v)));
            }
            HeadKind::Embedding => {
                let hd = self.hidden_dense_units.unwrap_or(2 * h);
                shapes.push(("head.w_hid", (h, hd)));
                shapes.push(("head.w_emb", (hd, d)));
                shapes.push(("head.b_emb", (1, d)));
            }
        }
        shapes
    }
}

/// Trainable scalar count.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (v, d, h) = (cfg.vocab_size_with_pad, cfg.embed_dim, cfg.gru_units);
    let embedding = v * d;
    let gru = 3 * (d * h + h * h + h);
    let head = match cfg.head {
        HeadKind::Softmax => h * v + v,
        HeadKind::Embedding => {
            let hd = cfg.hidden_dense_units.unwrap_or(2 * h);
            h * hd + hd * d + d
        }
    };
    embedding + gru + head
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Parameter,
    pub w_r: Parameter,
    pub w_h: Parameter,
    pub u_z: Parameter,
    pub u_r: Parameter,
    pub u_h: Parameter,
    pub b_z: Parameter,
    pub b_r: Parameter,
    pub b_h: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Softmax {
        w_out: Parameter,
        b_out: Parameter,
    },
    Embedding {
        w_hid: Parameter,
        w_emb: Parameter,
        b_emb: Parameter,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Parameter,
    pub gru: GruParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn iter(&self) -> Vec<&Parameter> {
        let g = &self.gru;
        let mut out = vec![
            &self.embedding,
            &g.w_z,
            &g.w_r,
            &g.w_h,
            &g.u_z,
            &g.u_r,
            &g.u_h,
            &g.b_z,
            &g.b_r,
            &g.b_h,
        ];
        match &self.head {
            HeadParams::Softmax { w_out, b_out } => out.extend([w_out, b_out]),
            HeadParams::Embedding { w_hid, w_emb, b_emb } => out.extend([w_hid, w_emb, b_emb]),
        }
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut Parameter> {
        let g = &mut self.gru;
        let mut out = vec![
            &mut self.embedding,
            &mut g.w_z,
            &mut g.w_r,
            &mut g.w_h,
            &mut g.u_z,
            &mut g.u_r,
            &mut g.u_h,
            &mut g.b_z,
            &mut g.b_r,
            &mut g.b_h,
        ];
        match &mut self.head {
            HeadParams::Softmax { w_out, b_out } => out.extend([w_out, b_out]),
            HeadParams::Embedding { w_hid, w_emb, b_emb } => out.extend([w_hid, w_emb, b_emb]),
        }
        out
    }

    pub fn to_vec(&self) -> Vec<Parameter> {
        self.iter().into_iter().cloned().collect()
    }

    /// Rebuilds from tensors in canonical order, checking names and shapes.
    pub fn from_vec(cfg: &ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let shapes = cfg.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&shapes) {
            if p.name != *name || p.shape() != *shape {
                return Err(Error::checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.shape(),
                    name,
                    shape
                )));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let gru = GruParams {
            w_z: next(),
            w_r: next(),
            w_h: next(),
            u_z: next(),
            u_r: next(),
            u_h: next(),
            b_z: next(),
            b_r: next(),
            b_h: next(),
        };
        let head = match cfg.head {
            HeadKind::Softmax => HeadParams::Softmax {
                w_out: next(),
                b_out: next(),
            },
            HeadKind::Embedding => HeadParams::Embedding {
                w_hid: next(),
                w_emb: next(),
                b_emb: next(),
            },
        };
        Ok(ModelParams {
            embedding,
            gru,
            head,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.iter().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().into_iter().for_each(Parameter::zero_grad);
    }
}

/// Weights ~ U(−s, s) with `s = sqrt(6 / (rows + cols))`; biases and the
/// padding embedding row are zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, (r, c))| {
            let mut m = Matrix::zeros(r, c);
            let is_bias = name.contains(".b_");
            if !is_bias {
                let s = (6.0 / (r + c) as f64).sqrt();
                m.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = rng.gen_range(-s..s));
            }
            if name == "embedding" {
                m.row_mut(PADDING_INDEX).fill(0.0);
            }
            Parameter::new(name, m)
        })
        .collect();
    ModelParams::from_vec(cfg, params).expect("shapes come from the config")
}

/// Embedded inputs for one timestep, restricted to the rows that hold a
/// real click at that step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub rows: Vec<usize>,
    pub items: Vec<usize>,
    /// Multiplier applied to each looked-up vector (0 when dropped).
    pub scale: Vec<f64>,
    pub x: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBatch {
    pub batch_size: usize,
    pub steps: Vec<StepInput>,
}

/// Looks up embeddings for every non-padding position of a
/// `batch × window` index matrix.
pub fn embed(embedding: &Matrix, inputs: &[usize], mask: &[u8], window: usize) -> EmbeddedBatch {
    let batch_size = inputs.len() / window.max(1);
    let steps = (0..window)
        .map(|t| {
            let rows: Vec<usize> = (0..batch_size)
                .filter(|&b| mask[b * window + t] != 0)
                .collect();
            let items: Vec<usize> = rows.iter().map(|&b| inputs[b * window + t]).collect();
            let x = embedding.gather_rows(&items);
            StepInput {
                scale: vec![1.0; rows.len()],
                rows,
                items,
                x,
            }
        })
        .collect();
    EmbeddedBatch { batch_size, steps }
}

/// Zeroes each (sequence, timestep) embedding vector with probability
/// `rate` and rescales survivors by `1 / (1 − rate)`. Padding positions
/// are not part of the batch and are never touched.
pub fn apply_embedding_dropout(batch: &mut EmbeddedBatch, rate: f64, rng: &mut impl Rng) {
    if rate <= 0.0 {
        return;
    }
    let keep_scale = 1.0 / (1.0 - rate);
    for step in &mut batch.steps {
        for i in 0..step.rows.len() {
            let dropped = rng.gen::<f64>() < rate;
            let s = if dropped { 0.0 } else { keep_scale };
            step.scale[i] *= s;
            step.x.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Per-step GRU activations of the active rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub h_prev: Matrix,
    pub z: Matrix,
    pub r: Matrix,
    pub candidate: Matrix,
    /// `r ⊙ h_prev`, the input to `U_h`.
    pub reset_hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    pub steps: Vec<StepTrace>,
    /// Hidden state after the last step, batch × H.
    pub final_h: Matrix,
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    dst.data_mut()
        .iter_mut()
        .zip(src.data())
        .for_each(|(a, b)| *a += b);
}

/// `h_t = (1 − z) ⊙ h_{t−1} + z ⊙ tanh(x W_h + (r ⊙ h_{t−1}) U_h + b_h)`,
/// with padded positions passing `h_{t−1}` through.
pub fn gru_forward(gru: &GruParams, input: &EmbeddedBatch) -> HiddenStateTrace {
    let hidden = gru.u_z.value.rows();
    let mut h = Matrix::zeros(input.batch_size, hidden);
    let mut steps = Vec::with_capacity(input.steps.len());
    for step in &input.steps {
        let h_prev = h.gather_rows(&step.rows);
        let gate = |w: &Parameter, u: &Parameter, b: &Parameter, hin: &Matrix| {
            let mut a = matmul(&step.x, &w.value).expect("gru shapes");
            add_into(&mut a, &matmul(hin, &u.value).expect("gru shapes"));
            a.add_row_broadcast(&b.value).expect("gru shapes");
            a
        };
        let z = gate(&gru.w_z, &gru.u_z, &gru.b_z, &h_prev).map(sigmoid);
        let r = gate(&gru.w_r, &gru.u_r, &gru.b_r, &h_prev).map(sigmoid);
        let mut reset_hidden = r.clone();
        reset_hidden
            .data_mut()
            .iter_mut()
            .zip(h_prev.data())
            .for_each(|(a, b)| *a *= b);
        let candidate = gate(&gru.w_h, &gru.u_h, &gru.b_h, &reset_hidden).map(f64::tanh);

        for (i, &row) in step.rows.iter().enumerate() {
            let (hp, zz, cc) = (h_prev.row(i), z.row(i), candidate.row(i));
            for (j, out) in h.row_mut(row).iter_mut().enumerate() {
                *out = (1.0 - zz[j]) * hp[j] + zz[j] * cc[j];
            }
        }
        steps.push(StepTrace {
            h_prev,
            z,
            r,
            candidate,
            reset_hidden,
        });
    }
    HiddenStateTrace { steps, final_h: h }
}

/// Backpropagates `d_final` (batch × H) through the unrolled GRU,
/// accumulating into the GRU gradients and the looked-up embedding rows.
pub fn gru_backward(
    gru: &mut GruParams,
    embedding: &mut Parameter,
    input: &EmbeddedBatch,
    trace: &HiddenStateTrace,
    d_final: &Matrix,
) {
    let mut dh_full = d_final.clone();
    for (step, tr) in input.steps.iter().zip(&trace.steps).rev() {
        if step.rows.is_empty() {
            continue;
        }
        let dh = dh_full.gather_rows(&step.rows);
        let (k, hdim) = dh.shape();
        let mut da_z = Matrix::zeros(k, hdim);
        let mut da_h = Matrix::zeros(k, hdim);
        let mut dh_prev = Matrix::zeros(k, hdim);
        for i in 0..k {
            for j in 0..hdim {
                let g = dh[(i, j)];
                let z = tr.z[(i, j)];
                let c = tr.candidate[(i, j)];
                let hp = tr.h_prev[(i, j)];
                da_z[(i, j)] = g * (c - hp) * z * (1.0 - z);
                da_h[(i, j)] = g * z * (1.0 - c * c);
                dh_prev[(i, j)] = g * (1.0 - z);
            }
        }

        matmul_tn_acc(&mut gru.w_h.grad, &step.x, &da_h).expect("gru shapes");
        matmul_tn_acc(&mut gru.u_h.grad, &tr.reset_hidden, &da_h).expect("gru shapes");
        da_h.sum_rows_into(&mut gru.b_h.grad);
        let d_reset_hidden = matmul_nt(&da_h, &gru.u_h.value).expect("gru shapes");

        let mut da_r = Matrix::zeros(k, hdim);
        for i in 0..k {
            for j in 0..hdim {
                let d = d_reset_hidden[(i, j)];
                let r = tr.r[(i, j)];
                da_r[(i, j)] = d * tr.h_prev[(i, j)] * r * (1.0 - r);
                dh_prev[(i, j)] += d * r;
            }
        }

        matmul_tn_acc(&mut gru.w_r.grad, &step.x, &da_r).expect("gru shapes");
        matmul_tn_acc(&mut gru.u_r.grad, &tr.h_prev, &da_r).expect("gru shapes");
        da_r.sum_rows_into(&mut gru.b_r.grad);
        matmul_tn_acc(&mut gru.w_z.grad, &step.x, &da_z).expect("gru shapes");
        matmul_tn_acc(&mut gru.u_z.grad, &tr.h_prev, &da_z).expect("gru shapes");
        da_z.sum_rows_into(&mut gru.b_z.grad);

        add_into(&mut dh_prev, &matmul_nt(&da_r, &gru.u_r.value).expect("gru shapes"));
        add_into(&mut dh_prev, &matmul_nt(&da_z, &gru.u_z.value).expect("gru shapes"));

        let mut dx = matmul_nt(&da_z, &gru.w_z.value).expect("gru shapes");
        add_into(&mut dx, &matmul_nt(&da_r, &gru.w_r.value).expect("gru shapes"));
        add_into(&mut dx, &matmul_nt(&da_h, &gru.w_h.value).expect("gru shapes"));
        for (i, (&item, &s)) in step.items.iter().zip(&step.scale).enumerate() {
            if s == 0.0 || item == PADDING_INDEX {
                continue;
            }
            for (g, d) in embedding.grad.row_mut(item).iter_mut().zip(dx.row(i)) {
                *g += s * d;
            }
        }

        for (i, &row) in step.rows.iter().enumerate() {
            dh_full.row_mut(row).copy_from_slice(dh_prev.row(i));
        }
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embedded: EmbeddedBatch,
    pub trace: HiddenStateTrace,
    pub head: HeadOutput,
}

#[derive(Debug, Clone)]
pub enum HeadOutput {
    Softmax {
        logits: Matrix,
    },
    Embedding {
        hidden_pre: Matrix,
        hidden: Matrix,
        output: Matrix,
    },
}

impl ForwardPass {
    /// Logits of the softmax head or the predicted vectors of the
    /// embedding head.
    pub fn output(&self) -> &Matrix {
        match &self.head {
            HeadOutput::Softmax { logits } => logits,
            HeadOutput::Embedding { output, .. } => output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        for (p, (name, shape)) in params.iter().iter().zip(&shapes) {
            if p.name != *name || p.shape() != *shape {
                return Err(Error::checkpoint(format!("tensor {} does not match config", p.name)));
            }
        }
        Ok(Model { config, params })
    }

    pub fn forward(&self, inputs: &[usize], mask: &[u8], window: usize) -> ForwardPass {
        let embedded = embed(&self.params.embedding.value, inputs, mask, window);
        self.forward_embedded(embedded)
    }

    /// Forward pass in training mode: embedding dropout at the configured
    /// rate, masks drawn from `rng`.
    pub fn forward_train(
        &self,
        inputs: &[usize],
        mask: &[u8],
        window: usize,
        rng: &mut impl Rng,
    ) -> ForwardPass {
        let mut embedded = embed(&self.params.embedding.value, inputs, mask, window);
        apply_embedding_dropout(&mut embedded, self.config.embed_dropout_rate, rng);
        self.forward_embedded(embedded)
    }

    pub fn forward_embedded(&self, embedded: EmbeddedBatch) -> ForwardPass {
        let trace = gru_forward(&self.params.gru, &embedded);
        let head = match &self.params.head {
            HeadParams::Softmax { w_out, b_out } => {
                let mut logits = matmul(&trace.final_h, &w_out.value).expect("head shapes");
                logits.add_row_broadcast(&b_out.value).expect("head shapes");
                HeadOutput::Softmax { logits }
            }
            HeadParams::Embedding { w_hid, w_emb, b_emb } => {
                let hidden_pre = matmul(&trace.final_h, &w_hid.value).expect("head shapes");
                let hidden = hidden_pre.map(|x| x.max(0.0));
                let mut output = matmul(&hidden, &w_emb.value).expect("head shapes");
                output.add_row_broadcast(&b_emb.value).expect("head shapes");
                HeadOutput::Embedding {
                    hidden_pre,
                    hidden,
                    output,
                }
            }
        };
        ForwardPass {
            embedded,
            trace,
            head,
        }
    }

    /// Accumulates gradients given `d_output`, the loss gradient with
    /// respect to [`ForwardPass::output`].
    pub fn backward(&mut self, pass: &ForwardPass, d_output: &Matrix) {
        let h = &pass.trace.final_h;
        let d_final = match (&mut self.params.head, &pass.head) {
            (HeadParams::Softmax { w_out, b_out }, HeadOutput::Softmax { .. }) => {
                matmul_tn_acc(&mut w_out.grad, h, d_output).expect("head shapes");
                d_output.sum_rows_into(&mut b_out.grad);
                matmul_nt(d_output, &w_out.value).expect("head shapes")
            }
            (
                HeadParams::Embedding { w_hid, w_emb, b_emb },
                HeadOutput::Embedding {
                    hidden_pre, hidden, ..
                },
            ) => {
                matmul_tn_acc(&mut w_emb.grad, hidden, d_output).expect("head shapes");
                d_output.sum_rows_into(&mut b_emb.grad);
                let mut d_hidden = matmul_nt(d_output, &w_emb.value).expect("head shapes");
                d_hidden
                    .data_mut()
                    .iter_mut()
                    .zip(hidden_pre.data())
                    .for_each(|(d, &a)| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                matmul_tn_acc(&mut w_hid.grad, h, &d_hidden).expect("head shapes");
                matmul_nt(&d_hidden, &w_hid.value).expect("head shapes")
            }
            _ => panic!("forward pass does not belong to this head"),
        };
        gru_backward(
            &mut self.params.gru,
            &mut self.params.embedding,
            &pass.embedded,
            &pass.trace,
            &d_final,
        );
    }

    /// Next-item distribution over all `m + 1` columns.
    pub fn forward_softmax(&self, batch: &MiniBatch) -> Result<Matrix> {
        if self.config.head != HeadKind::Softmax {
            return Err(Error::config("forward_softmax needs the softmax head"));
        }
        let pass = self.forward(&batch.inputs, &batch.mask, batch.window);
        Ok(softmax_rows(pass.output()))
    }

    /// Predicted next-item embedding, batch × D.
    pub fn forward_embedding_output(&self, batch: &MiniBatch) -> Result<Matrix> {
        if self.config.head != HeadKind::Embedding {
            return Err(Error::config("forward_embedding_output needs the embedding head"));
        }
        let pass = self.forward(&batch.inputs, &batch.mask, batch.window);
        match pass.head {
            HeadOutput::Embedding { output, .. } => Ok(output),
            HeadOutput::Softmax { .. } => unreachable!(),
        }
    }
}

//! Relatedness module: a bidirectional GRU encodes the expression, each box
//! attends over the word features, and the fused box/expression feature is
//! mapped to a relatedness probability.
//!
//! For box features `V` (`n×v`) and word features `W` (`|Q|×q`):
//!
//! ```text
//! V'   = V·P + p                      feature projection (identity init)
//! V_a  = MLP_a(V')                    n×q
//! a_ij = FC_s([V_a[i]; W[j]])         n×|Q|
//! α    = softmax_j(a)
//! Q    = α·W                          attended expression feature, n×q
//! V_b  = MLP_b(V')
//! M    = L2Norm(V_b ⊙ Q)              row-wise
//! r^   = FC_r(M),  r = sigmoid(r^)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gru_sequence, Array, Graph, GruParams, GruVars, Var, L2_EPS};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ingest::{EmbeddingTable, ImageDetections, Vocabulary, PAD_INDEX};

pub const DEFAULT_WORD_DIM: usize = 300;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// Per-direction GRU width; word features are `2 * hidden` wide.
    pub hidden: usize,
    pub feature_dim: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            word_dim: DEFAULT_WORD_DIM,
            hidden: DEFAULT_HIDDEN,
            feature_dim,
        }
    }

    /// Word feature width `q`.
    pub fn q(&self) -> usize {
        2 * self.hidden
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.word_dim == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl Mlp {
    fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            w1: linear_init(d_in, d_hidden, rng),
            b1: Array::zeros(vec![1, d_hidden]),
            w2: linear_init(d_hidden, d_out, rng),
            b2: Array::zeros(vec![1, d_out]),
        }
    }
}

fn linear_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array {
    let k = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-k..k)).collect();
    Array::new(vec![fan_in, fan_out], data).expect("sized")
}

/// Which learning-rate group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// The trainable feature projection standing in for the detector head.
    Head,
    Rest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub word_embeddings: Array,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub proj_w: Array,
    pub proj_b: Array,
    pub mlp_a: Mlp,
    /// `2q×1`: rows `0..q` weight the box feature, rows `q..2q` the word feature.
    pub fc_s_w: Array,
    pub fc_s_b: Array,
    pub mlp_b: Mlp,
    pub fc_r_w: Array,
    pub fc_r_b: Array,
}

const GRU_NAMES: [&str; 9] = crate::autodiff::GRU_TENSOR_NAMES;

impl ModelParameters {
    /// Seeded initialization. Embedding rows of words found in `glove` are
    /// copied from it; the rest are uniform in `(-0.1, 0.1)` and padding is zero.
    pub fn init(
        config: ModelConfig,
        vocab: Option<&Vocabulary>,
        glove: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(v) = vocab {
            if v.len() != config.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary has {} words, config says {}",
                    v.len(),
                    config.vocab_size
                )));
            }
        }
        if let Some(t) = glove {
            if t.dimension() != config.word_dim {
                return Err(Error::shape(
                    "embeddings",
                    format!("table is {}-d, model expects {}", t.dimension(), config.word_dim),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, q, v, h) = (config.word_dim, config.q(), config.feature_dim, config.hidden);

        let mut emb = Array::zeros(vec![config.vocab_size, d]);
        for i in 0..config.vocab_size {
            let pretrained = match (vocab, glove) {
                (Some(voc), Some(t)) => t.get(&voc.words()[i]),
                _ => None,
            };
            let row = &mut emb.data_mut()[i * d..(i + 1) * d];
            match pretrained {
                Some(vec) => row.copy_from_slice(vec),
                None if i == PAD_INDEX => {}
                None => row.iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1)),
            }
        }

        Ok(ModelParameters {
            word_embeddings: emb,
            gru_fwd: GruParams::init(d, h, &mut rng),
            gru_bwd: GruParams::init(d, h, &mut rng),
            proj_w: Array::identity(v),
            proj_b: Array::zeros(vec![1, v]),
            mlp_a: Mlp::init(v, q, q, &mut rng),
            fc_s_w: linear_init(2 * q, 1, &mut rng),
            fc_s_b: Array::zeros(vec![1, 1]),
            mlp_b: Mlp::init(v, q, q, &mut rng),
            fc_r_w: linear_init(q, 1, &mut rng),
            fc_r_b: Array::zeros(vec![1, 1]),
            config,
        })
    }

    /// Stable tensor names, in checkpoint and optimizer order.
    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["word_embeddings".to_string()];
        for dir in ["gru_fwd", "gru_bwd"] {
            names.extend(GRU_NAMES.iter().map(|n| format!("{dir}.{n}")));
        }
        names.extend(["proj.w", "proj.b"].map(String::from));
        names.extend(["mlp_a.w1", "mlp_a.b1", "mlp_a.w2", "mlp_a.b2"].map(String::from));
        names.extend(["fc_s.w", "fc_s.b"].map(String::from));
        names.extend(["mlp_b.w1", "mlp_b.b1", "mlp_b.w2", "mlp_b.b2"].map(String::from));
        names.extend(["fc_r.w", "fc_r.b"].map(String::from));
        names
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("proj.") {
            ParamGroup::Head
        } else {
            ParamGroup::Rest
        }
    }

    pub fn tensors(&self) -> Vec<&Array> {
        let mut t = vec![&self.word_embeddings];
        t.extend(self.gru_fwd.tensors());
        t.extend(self.gru_bwd.tensors());
        t.extend([&self.proj_w, &self.proj_b]);
        t.extend([&self.mlp_a.w1, &self.mlp_a.b1, &self.mlp_a.w2, &self.mlp_a.b2]);
        t.extend([&self.fc_s_w, &self.fc_s_b]);
        t.extend([&self.mlp_b.w1, &self.mlp_b.b1, &self.mlp_b.w2, &self.mlp_b.b2]);
        t.extend([&self.fc_r_w, &self.fc_r_b]);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut t = vec![&mut self.word_embeddings];
        t.extend(self.gru_fwd.tensors_mut());
        t.extend(self.gru_bwd.tensors_mut());
        t.extend([&mut self.proj_w, &mut self.proj_b]);
        let a = &mut self.mlp_a;
        t.extend([&mut a.w1, &mut a.b1, &mut a.w2, &mut a.b2]);
        t.extend([&mut self.fc_s_w, &mut self.fc_s_b]);
        let b = &mut self.mlp_b;
        t.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        t.extend([&mut self.fc_r_w, &mut self.fc_r_b]);
        t
    }

    /// Expected shape of every tensor under `config`, in tensor order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, q, v, h) = (config.word_dim, config.q(), config.feature_dim, config.hidden);
        let gru = [
            vec![d, h],
            vec![h, h],
            vec![1, h],
            vec![d, h],
            vec![h, h],
            vec![1, h],
            vec![d, h],
            vec![h, h],
            vec![1, h],
        ];
        let mlp = [vec![v, q], vec![1, q], vec![q, q], vec![1, q]];
        let mut s = vec![vec![config.vocab_size, d]];
        s.extend(gru.clone());
        s.extend(gru);
        s.extend([vec![v, v], vec![1, v]]);
        s.extend(mlp.clone());
        s.extend([vec![2 * q, 1], vec![1, 1]]);
        s.extend(mlp);
        s.extend([vec![q, 1], vec![1, 1]]);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let names = Self::tensor_names();
        for ((t, want), name) in self
            .tensors()
            .into_iter()
            .zip(Self::expected_shapes(&self.config))
            .zip(&names)
        {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundModel::from_vars(vars, self.config.clone())
    }
}

/// Graph handles of every parameter tensor, in [`ModelParameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    vars: Vec<Var>,
    pub embeddings: Var,
    pub gru_fwd: GruVars,
    pub gru_bwd: GruVars,
    pub proj_w: Var,
    pub proj_b: Var,
    pub mlp_a: [Var; 4],
    pub fc_s_w: Var,
    pub fc_s_b: Var,
    pub mlp_b: [Var; 4],
    pub fc_r_w: Var,
    pub fc_r_b: Var,
}

fn gru_vars(v: &[Var]) -> GruVars {
    GruVars {
        w_z: v[0],
        u_z: v[1],
        b_z: v[2],
        w_r: v[3],
        u_r: v[4],
        b_r: v[5],
        w_h: v[6],
        u_h: v[7],
        b_h: v[8],
    }
}

impl BoundModel {
    /// Wraps graph leaves supplied in tensor order.
    pub fn from_vars(vars: Vec<Var>, config: ModelConfig) -> Self {
        assert_eq!(vars.len(), ModelParameters::tensor_names().len());
        let v = &vars;
        BoundModel {
            embeddings: v[0],
            gru_fwd: gru_vars(&v[1..10]),
            gru_bwd: gru_vars(&v[10..19]),
            proj_w: v[19],
            proj_b: v[20],
            mlp_a: [v[21], v[22], v[23], v[24]],
            fc_s_w: v[25],
            fc_s_b: v[26],
            mlp_b: [v[27], v[28], v[29], v[30]],
            fc_r_w: v[31],
            fc_r_b: v[32],
            config,
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `x·w + b` with `b` (`1×k`) broadcast over the rows of `x`.
fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let shape = g.shape(xw).to_vec();
    let bb = g.broadcast_to(b, &shape)?;
    g.add(xw, bb)
}

fn mlp(g: &mut Graph, x: Var, p: &[Var; 4]) -> Result<Var> {
    let h = linear(g, x, p[0], p[1])?;
    let h = g.relu(h);
    linear(g, h, p[2], p[3])
}

/// Word features `|Q|×2h`: row `j` is `[forward state j; backward state j]`.
pub fn encode_expression(g: &mut Graph, m: &BoundModel, indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::Empty("expression has no tokens".into()));
    }
    let x = g.gather_rows(m.embeddings, indices)?;
    let fwd = gru_sequence(g, x, &m.gru_fwd, false)?;
    let bwd = gru_sequence(g, x, &m.gru_bwd, true)?;
    g.concat(&[fwd, bwd], 1)
}

/// Graph nodes of one forward pass over `n` boxes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub words: Var,
    pub v_a: Var,
    pub logits: Var,
    pub alpha: Var,
    pub q_attn: Var,
    pub v_b: Var,
    pub fused: Var,
    pub r_hat: Var,
    /// `n×1` relatedness.
    pub r: Var,
}

/// Per-box attention over the word features. Returns (`V_a`, logits, α, attended feature).
pub fn attend(g: &mut Graph, m: &BoundModel, feats: Var, words: Var) -> Result<(Var, Var, Var, Var)> {
    let n = g.shape(feats)[0];
    let n_words = g.shape(words)[0];
    let q = m.config.q();
    let v_a = mlp(g, feats, &m.mlp_a)?;

    // FC_s over [v_a; w_j] splits into a box term and a word term.
    let w_box = g.slice_rows(m.fc_s_w, 0, q)?;
    let w_word = g.slice_rows(m.fc_s_w, q, q)?;
    let box_term = g.matmul(v_a, w_box)?;
    let box_term = g.broadcast_to(box_term, &[n, n_words])?;
    let word_term = g.matmul(words, w_word)?;
    let word_term = g.reshape(word_term, &[1, n_words])?;
    let word_term = g.broadcast_to(word_term, &[n, n_words])?;
    let bias = g.broadcast_to(m.fc_s_b, &[n, n_words])?;
    let logits = g.add(box_term, word_term)?;
    let logits = g.add(logits, bias)?;

    // The box term and bias are constant along j and cancel inside the
    // softmax; dropping them keeps α exact instead of off by rounding.
    let alpha = g.softmax(word_term, 1)?;
    let q_attn = g.matmul(alpha, words)?;
    Ok((v_a, logits, alpha, q_attn))
}

/// Fusion head. Returns (`V_b`, normalized fused feature, logit, relatedness).
pub fn relate(g: &mut Graph, m: &BoundModel, feats: Var, q_attn: Var) -> Result<(Var, Var, Var, Var)> {
    let v_b = mlp(g, feats, &m.mlp_b)?;
    let prod = g.mul(v_b, q_attn)?;
    let fused = g.l2_normalize(prod, 1, L2_EPS)?;
    let r_hat = linear(g, fused, m.fc_r_w, m.fc_r_b)?;
    let r = g.sigmoid(r_hat);
    Ok((v_b, fused, r_hat, r))
}

/// Full forward pass for `feats` (`n×v`, raw detector features).
pub fn forward(g: &mut Graph, m: &BoundModel, feats: Var, indices: &[usize]) -> Result<ForwardVars> {
    let shape = g.shape(feats).to_vec();
    if shape.len() != 2 || shape[1] != m.config.feature_dim || shape[0] == 0 {
        return Err(Error::shape(
            "forward",
            format!("features {shape:?}, model expects n×{}", m.config.feature_dim),
        ));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= m.config.vocab_size) {
        return Err(Error::Range(format!(
            "token index {bad} outside vocabulary of {}",
            m.config.vocab_size
        )));
    }
    let words = encode_expression(g, m, indices)?;
    let projected = linear(g, feats, m.proj_w, m.proj_b)?;
    let (v_a, logits, alpha, q_attn) = attend(g, m, projected, words)?;
    let (v_b, fused, r_hat, r) = relate(g, m, projected, q_attn)?;
    Ok(ForwardVars {
        words,
        v_a,
        logits,
        alpha,
        q_attn,
        v_b,
        fused,
        r_hat,
        r,
    })
}

/// Values of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub words: Array,
    pub v_a: Array,
    pub logits: Array,
    pub alpha: Array,
    pub q_attn: Array,
    pub v_b: Array,
    pub fused: Array,
    pub r_hat: Vec<f64>,
    pub r: Vec<f64>,
}

impl ModelParameters {
    /// Inference over a feature matrix (`n×v`) without recording gradients.
    pub fn trace(&self, feats: &Array, indices: &[usize]) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let f = g.constant(feats.clone());
        let out = forward(&mut g, &m, f, indices)?;
        Ok(ForwardTrace {
            words: g.value(out.words).clone(),
            v_a: g.value(out.v_a).clone(),
            logits: g.value(out.logits).clone(),
            alpha: g.value(out.alpha).clone(),
            q_attn: g.value(out.q_attn).clone(),
            v_b: g.value(out.v_b).clone(),
            fused: g.value(out.fused).clone(),
            r_hat: g.value(out.r_hat).data().to_vec(),
            r: g.value(out.r).data().to_vec(),
        })
    }

    pub fn relatedness(&self, feats: &Array, indices: &[usize]) -> Result<Vec<f64>> {
        Ok(self.trace(feats, indices)?.r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposal {
    /// Index of the record in its image's detection list.
    pub index: usize,
    pub bbox: BBox,
    pub category_id: i64,
    pub confidence: f64,
    pub relatedness: f64,
    /// `relatedness * confidence`.
    pub fused: f64,
}

impl ScoredProposal {
    pub fn new(index: usize, bbox: BBox, category_id: i64, confidence: f64, relatedness: f64) -> Self {
        ScoredProposal {
            index,
            bbox,
            category_id,
            confidence,
            relatedness,
            fused: relatedness * confidence,
        }
    }
}

/// Indices of the records with `confidence >= delta`, in input order.
pub fn confidence_survivors(image: &ImageDetections, delta: f64) -> Vec<usize> {
    image
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.confidence >= delta)
        .map(|(i, _)| i)
        .collect()
}

/// Stacks the features of the given records into an `n×v` matrix.
pub fn feature_matrix(image: &ImageDetections, indices: &[usize], dim: usize) -> Result<Array> {
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        let f = &image.records[i].feature;
        if f.len() != dim {
            return Err(Error::shape(
                "features",
                format!(
                    "image {} record {i} has {}-d feature, expected {dim}",
                    image.image_id,
                    f.len()
                ),
            ));
        }
        data.extend_from_slice(f);
    }
    Array::new(vec![indices.len(), dim], data)
}

/// Where relatedness scores come from.
#[derive(Clone, Copy, Debug)]
pub enum Relatedness<'a> {
    Model(&'a ModelParameters),
    /// Every box gets the same score.
    Constant(f64),
}

impl Relatedness<'_> {
    pub fn scores(&self, image: &ImageDetections, survivors: &[usize], indices: &[usize]) -> Result<Vec<f64>> {
        match self {
            Relatedness::Constant(k) => Ok(vec![*k; survivors.len()]),
            Relatedness::Model(p) => {
                if survivors.is_empty() {
                    return Ok(Vec::new());
                }
                let feats = feature_matrix(image, survivors, p.config.feature_dim)?;
                p.relatedness(&feats, indices)
            }
        }
    }
}

/// Drops boxes below `delta` and scores the rest; input order is preserved.
pub fn score_boxes(
    image: &ImageDetections,
    indices: &[usize],
    relatedness: Relatedness<'_>,
    delta: f64,
) -> Result<Vec<ScoredProposal>> {
    let survivors = confidence_survivors(image, delta);
    let r = relatedness.scores(image, &survivors, indices)?;
    Ok(survivors
        .iter()
        .zip(r)
        .map(|(&i, ri)| {
            let rec = &image.records[i];
            ScoredProposal::new(i, rec.bbox, rec.category_id, rec.confidence, ri)
        })
        .collect())
}

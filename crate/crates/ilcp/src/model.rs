//! The full prediction network: heterogeneous-attention encoder, per-UE GRU,
//! candidate scorer, latent compressor/decoder (β-VAE), and the gated
//! target-side projection, plus the loss functions.
//!
//! All forward passes build on a [`crate::diffcore::Tape`]; parameters live
//! in named blocks so checkpoints, the optimizer and gradient checks all
//! address the same storage.

use crate::diffcore::{load_checkpoint, save_checkpoint, ParamBlocks, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{CandidateSet, CellIndex, GraphSnapshot, EDGE_FEATURES};
use crate::xn::{deserialize_latent, serialize_latent, LATENT_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Architecture dimensions. [`ModelConfig::standard`] pins the reference
/// configuration; smaller configurations exist for fast gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Node embedding width d_x.
    pub d_x: usize,
    /// Recurrent state width d_h (must equal d_x for the scorer's
    /// elementwise interaction term).
    pub d_h: usize,
    /// Latent width d_z.
    pub d_z: usize,
    /// Encoder message-passing rounds.
    pub layers: usize,
    /// Attention heads per round.
    pub heads: usize,
    /// Scorer hidden width.
    pub scorer_hidden: usize,
    /// Gate-network / projection-MLP hidden width.
    pub mlp_hidden: usize,
    /// Number of deployed cells (embedding table rows).
    pub n_cells: usize,
    /// Inbound dropout rate on the decoded state during training.
    pub dropout: f64,
    /// KL weight β.
    pub beta: f64,
}

impl ModelConfig {
    /// Reference configuration: 3 encoder layers, 4 heads, 128-dim
    /// embeddings and state, 32-dim latent, dropout 0.2, β = 0.001.
    pub fn standard(n_cells: usize) -> ModelConfig {
        ModelConfig {
            d_x: 128,
            d_h: 128,
            d_z: LATENT_DIM,
            layers: 3,
            heads: 4,
            scorer_hidden: 128,
            mlp_hidden: 128,
            n_cells,
            dropout: 0.2,
            beta: 1e-3,
        }
    }

    /// Small configuration for finite-difference gradient checks and fuzz
    /// tests, where the reference widths would be needlessly slow.
    pub fn toy(n_cells: usize) -> ModelConfig {
        ModelConfig {
            d_x: 8,
            d_h: 8,
            // The wire payload is fixed at LATENT_DIM slots, so even the
            // small configuration keeps the real latent width.
            d_z: LATENT_DIM,
            layers: 2,
            heads: 2,
            scorer_hidden: 8,
            mlp_hidden: 8,
            n_cells,
            dropout: 0.2,
            beta: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_x == 0 || self.d_h == 0 || self.d_z == 0 || self.n_cells == 0 {
            return bad("zero dimension".into());
        }
        if self.d_x != self.d_h {
            return bad(format!(
                "d_x {} must equal d_h {} for the scorer interaction term",
                self.d_x, self.d_h
            ));
        }
        if self.layers == 0 || self.heads == 0 || self.d_x % self.heads != 0 {
            return bad(format!(
                "need layers > 0, heads > 0 and heads {} dividing d_x {}",
                self.heads, self.d_x
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.beta < 0.0 {
            return bad("dropout must be in [0, 1), beta non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    One,
    Embed,
}

fn schema(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_x;
    let dh = cfg.d_h;
    let mut s: Vec<(String, usize, usize, Init)> = vec![
        ("embed.ue".into(), 1, d, Init::Embed),
        ("embed.cell".into(), cfg.n_cells, d, Init::Embed),
        ("embed.pos".into(), 2, d, Init::Xavier),
        ("h_init".into(), 1, dh, Init::Zero),
    ];
    for l in 0..cfg.layers {
        let p = |n: &str| format!("enc.l{l}.{n}");
        for ty in ["ue", "cell"] {
            s.push((p(&format!("q.{ty}")), d, d, Init::Xavier));
            s.push((p(&format!("k.{ty}")), d, d, Init::Xavier));
            s.push((p(&format!("v.{ty}")), d, d, Init::Xavier));
            s.push((p(&format!("out.{ty}")), d, d, Init::Xavier));
            s.push((p(&format!("out.{ty}.b")), 1, d, Init::Zero));
            s.push((p(&format!("ln.{ty}.gain")), 1, d, Init::One));
            s.push((p(&format!("ln.{ty}.bias")), 1, d, Init::Zero));
        }
        for rel in ["meas", "xn"] {
            s.push((p(&format!("att.{rel}")), d, d, Init::Xavier));
            s.push((p(&format!("msg.{rel}")), d, d, Init::Xavier));
        }
        s.push((p("edge"), EDGE_FEATURES, d, Init::Xavier));
    }
    for g in ["z", "r", "n"] {
        s.push((format!("gru.w_{g}"), d, dh, Init::Xavier));
        s.push((format!("gru.u_{g}"), dh, dh, Init::Xavier));
        s.push((format!("gru.b_{g}"), 1, dh, Init::Zero));
    }
    s.push(("scorer.w1".into(), 3 * dh, cfg.scorer_hidden, Init::Xavier));
    s.push(("scorer.b1".into(), 1, cfg.scorer_hidden, Init::Zero));
    s.push(("scorer.w2".into(), cfg.scorer_hidden, 1, Init::Xavier));
    s.push(("scorer.b2".into(), 1, 1, Init::Zero));
    s.push(("vae.enc.mu.w".into(), dh, cfg.d_z, Init::Xavier));
    s.push(("vae.enc.mu.b".into(), 1, cfg.d_z, Init::Zero));
    s.push(("vae.enc.lv.w".into(), dh, cfg.d_z, Init::Xavier));
    s.push(("vae.enc.lv.b".into(), 1, cfg.d_z, Init::Zero));
    s.push(("vae.dec.w".into(), cfg.d_z, dh, Init::Xavier));
    s.push(("vae.dec.b".into(), 1, dh, Init::Zero));
    for net in ["gate", "proj"] {
        s.push((format!("{net}.w1"), dh + d, cfg.mlp_hidden, Init::Xavier));
        s.push((format!("{net}.b1"), 1, cfg.mlp_hidden, Init::Zero));
        s.push((format!("{net}.w2"), cfg.mlp_hidden, dh, Init::Xavier));
        s.push((format!("{net}.b2"), 1, dh, Init::Zero));
    }
    s.push(("proj.ln.gain".into(), 1, dh, Init::One));
    s.push(("proj.ln.bias".into(), 1, dh, Init::Zero));
    s
}

const META_DIMS: &str = "meta.dims";
const META_TRAIN: &str = "meta.train";

/// Model parameters: named blocks addressable by checkpoint, optimizer and
/// tape registration alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: ParamBlocks,
}

impl ModelParams {
    /// Deterministic initialization from a seed: Xavier-uniform weights,
    /// zero biases, unit layer-norm gains, small-uniform embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = ParamBlocks::new();
        for (name, rows, cols, kind) in schema(&config) {
            let n = rows * cols;
            let values = match kind {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Embed => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                Init::Xavier => {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
            };
            blocks.insert(name, (vec![rows, cols], values));
        }
        blocks.insert(
            META_DIMS.into(),
            (
                vec![8],
                vec![
                    config.d_x as f64,
                    config.d_h as f64,
                    config.d_z as f64,
                    config.layers as f64,
                    config.heads as f64,
                    config.scorer_hidden as f64,
                    config.mlp_hidden as f64,
                    config.n_cells as f64,
                ],
            ),
        );
        blocks.insert(
            META_TRAIN.into(),
            (vec![2], vec![config.dropout, config.beta]),
        );
        Ok(ModelParams { config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.blocks)
    }

    /// Loads a checkpoint; the configuration is self-describing via the
    /// metadata blocks, and every block shape is validated.
    pub fn load(path: &Path) -> Result<ModelParams> {
        let blocks = load_checkpoint(path)?;
        let dims = &blocks
            .get(META_DIMS)
            .ok_or_else(|| Error::Checkpoint("missing metadata block".into()))?
            .1;
        let train = &blocks
            .get(META_TRAIN)
            .ok_or_else(|| Error::Checkpoint("missing metadata block".into()))?
            .1;
        if dims.len() != 8 || train.len() != 2 {
            return Err(Error::Checkpoint("malformed metadata block".into()));
        }
        let config = ModelConfig {
            d_x: dims[0] as usize,
            d_h: dims[1] as usize,
            d_z: dims[2] as usize,
            layers: dims[3] as usize,
            heads: dims[4] as usize,
            scorer_hidden: dims[5] as usize,
            mlp_hidden: dims[6] as usize,
            n_cells: dims[7] as usize,
            dropout: train[0],
            beta: train[1],
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid stored configuration: {e}")))?;
        for (name, rows, cols, _) in schema(&config) {
            match blocks.get(&name) {
                Some((shape, _)) if shape == &vec![rows, cols] => {}
                Some((shape, _)) => {
                    return Err(Error::Checkpoint(format!(
                        "block {name}: shape {shape:?}, expected [{rows}, {cols}]"
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing block {name}"))),
            }
        }
        Ok(ModelParams { config, blocks })
    }

    /// Names of the trainable blocks (metadata excluded), in stable order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.blocks
            .keys()
            .filter(|k| !k.starts_with("meta."))
            .cloned()
            .collect()
    }
}

/// Where a recurrent state came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateOrigin {
    /// Fresh start (learned h_init), the Zero-Knowledge condition.
    Init,
    /// Carried forward by the GRU within a cell.
    Carried,
    /// Reconstructed target-side from a transferred latent.
    Projected,
}

/// A per-UE recurrent state on some tape.
#[derive(Debug, Clone, Copy)]
pub struct HiddenState {
    pub h: Tensor,
    pub origin: StateOrigin,
}

/// Per-UE and per-cell embeddings produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// One `[1, d_x]` embedding per UE, parallel to the snapshot's UE list.
    pub ue: Vec<Tensor>,
    /// `[n_cells, d_x]`; row order follows the cell index.
    pub cells: Tensor,
}

/// Output of the latent compressor.
#[derive(Debug, Clone, Copy)]
pub struct Compressed {
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Result of the full handover-instant inference path.
#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub predicted_slot: usize,
    pub payload: [f32; LATENT_DIM],
    pub h_new: Tensor,
    /// Padded scores, −∞ on masked slots.
    pub scores: Vec<f64>,
}

/// Model parameters registered as leaves on a tape, ready for forward
/// passes and backprop.
pub struct TapeModel<'a> {
    pub tape: &'a Tape,
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl<'a> TapeModel<'a> {
    pub fn new(tape: &'a Tape, params: &ModelParams) -> TapeModel<'a> {
        let mut tensors = BTreeMap::new();
        for name in params.trainable_names() {
            let (shape, values) = &params.blocks[&name];
            tensors.insert(name, tape.leaf(shape[0], shape[1], values));
        }
        TapeModel {
            tape,
            config: params.config,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Tensor {
        *self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Replaces the tensor handle for one block; gradient checking uses this
    /// to splice in an externally created leaf.
    pub fn override_block(&mut self, name: &str, t: Tensor) {
        assert!(self.tensors.contains_key(name), "unknown block {name}");
        self.tensors.insert(name.to_string(), t);
    }

    /// Learned fresh-start state (the Zero-Knowledge initialization).
    pub fn h_init(&self) -> Tensor {
        self.tensor("h_init")
    }

    fn affine(&self, x: Tensor, w: &str, b: &str) -> Tensor {
        let t = self.tape;
        t.add_row(t.matmul(x, self.tensor(w)), self.tensor(b))
    }

    /// Three rounds of relation-typed multi-head message passing over the
    /// snapshot. Type-specific Q/K/V, relation-specific key/value transforms,
    /// edge features added to measurement messages, residual + layer norm
    /// per round.
    pub fn encode_snapshot(&self, snapshot: &GraphSnapshot, index: &CellIndex) -> Encoded {
        let t = self.tape;
        let cfg = &self.config;
        assert_eq!(index.len(), cfg.n_cells, "cell index vs embedding table");
        let n_ues = snapshot.ues.len();
        let n_cells = cfg.n_cells;

        // Node input states.
        let mut pos = Vec::with_capacity(2 * n_cells);
        for i in 0..n_cells {
            let (x, y) = index.position(i);
            pos.push(x);
            pos.push(y);
        }
        let pos = t.leaf(n_cells, 2, &pos);
        let mut cell_state = t.add(self.tensor("embed.cell"), t.matmul(pos, self.tensor("embed.pos")));
        let ue_embed = self.tensor("embed.ue");
        let mut ue_state = t.concat_rows(&vec![ue_embed; n_ues]);

        // Incoming edges per target.
        let n_edges = snapshot.meas_edges.len();
        let mut edge_feats = Vec::with_capacity(n_edges * EDGE_FEATURES);
        let mut ue_in: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_ues]; // (cell, edge)
        let mut cell_in_meas: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_cells]; // (ue, edge)
        for (e, edge) in snapshot.meas_edges.iter().enumerate() {
            edge_feats.extend_from_slice(&edge.feats);
            ue_in[edge.ue].push((edge.cell, e));
            cell_in_meas[edge.cell].push((edge.ue, e));
        }
        let edge_feats = t.leaf(n_edges.max(1), EDGE_FEATURES, if n_edges == 0 {
            &[0.0; EDGE_FEATURES]
        } else {
            &edge_feats
        });
        let mut cell_in_xn: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
        for &(a, b) in index.xn_pairs() {
            cell_in_xn[a].push(b);
            cell_in_xn[b].push(a);
        }

        for l in 0..cfg.layers {
            let p = |n: &str| format!("enc.l{l}.{n}");
            let edge_lift = t.matmul(edge_feats, self.tensor(&p("edge")));
            let q_ue = t.matmul(ue_state, self.tensor(&p("q.ue")));
            let q_cell = t.matmul(cell_state, self.tensor(&p("q.cell")));
            let k_ue = t.matmul(ue_state, self.tensor(&p("k.ue")));
            let v_ue = t.matmul(ue_state, self.tensor(&p("v.ue")));
            let k_cell = t.matmul(cell_state, self.tensor(&p("k.cell")));
            let v_cell = t.matmul(cell_state, self.tensor(&p("v.cell")));
            let att_meas = self.tensor(&p("att.meas"));
            let msg_meas = self.tensor(&p("msg.meas"));
            let k_cell_meas = t.matmul(k_cell, att_meas);
            let v_cell_meas = t.matmul(v_cell, msg_meas);
            let k_ue_meas = t.matmul(k_ue, att_meas);
            let v_ue_meas = t.matmul(v_ue, msg_meas);
            let k_cell_xn = t.matmul(k_cell, self.tensor(&p("att.xn")));
            let v_cell_xn = t.matmul(v_cell, self.tensor(&p("msg.xn")));

            // UE targets: attend over measured cells.
            let mut new_ue_rows = Vec::with_capacity(n_ues);
            for u in 0..n_ues {
                let agg = if ue_in[u].is_empty() {
                    t.zeros(1, cfg.d_x)
                } else {
                    let cells: Vec<usize> = ue_in[u].iter().map(|&(c, _)| c).collect();
                    let edges: Vec<usize> = ue_in[u].iter().map(|&(_, e)| e).collect();
                    let k = t.gather_rows(k_cell_meas, &cells);
                    let v = t.add(
                        t.gather_rows(v_cell_meas, &cells),
                        t.gather_rows(edge_lift, &edges),
                    );
                    let q = t.slice_rows(q_ue, u, u + 1);
                    let w = t.softmax(t.multi_head_scores(q, k, cfg.heads));
                    t.attn_combine(w, v)
                };
                new_ue_rows.push(agg);
            }
            // Cell targets: attend over measuring UEs and Xn neighbors.
            let mut new_cell_rows = Vec::with_capacity(n_cells);
            for c in 0..n_cells {
                let agg = if cell_in_meas[c].is_empty() && cell_in_xn[c].is_empty() {
                    t.zeros(1, cfg.d_x)
                } else {
                    let mut k_parts = Vec::new();
                    let mut v_parts = Vec::new();
                    if !cell_in_meas[c].is_empty() {
                        let ues: Vec<usize> = cell_in_meas[c].iter().map(|&(u, _)| u).collect();
                        let edges: Vec<usize> = cell_in_meas[c].iter().map(|&(_, e)| e).collect();
                        k_parts.push(t.gather_rows(k_ue_meas, &ues));
                        v_parts.push(t.add(
                            t.gather_rows(v_ue_meas, &ues),
                            t.gather_rows(edge_lift, &edges),
                        ));
                    }
                    if !cell_in_xn[c].is_empty() {
                        k_parts.push(t.gather_rows(k_cell_xn, &cell_in_xn[c]));
                        v_parts.push(t.gather_rows(v_cell_xn, &cell_in_xn[c]));
                    }
                    let k = t.concat_rows(&k_parts);
                    let v = t.concat_rows(&v_parts);
                    let q = t.slice_rows(q_cell, c, c + 1);
                    let w = t.softmax(t.multi_head_scores(q, k, cfg.heads));
                    t.attn_combine(w, v)
                };
                new_cell_rows.push(agg);
            }
            let agg_ue = t.concat_rows(&new_ue_rows);
            let agg_cell = t.concat_rows(&new_cell_rows);
            let out_ue = self.affine(t.gelu(agg_ue), &p("out.ue"), &p("out.ue.b"));
            let out_cell = self.affine(t.gelu(agg_cell), &p("out.cell"), &p("out.cell.b"));
            ue_state = t.layer_norm(
                t.add(ue_state, out_ue),
                self.tensor(&p("ln.ue.gain")),
                self.tensor(&p("ln.ue.bias")),
            );
            cell_state = t.layer_norm(
                t.add(cell_state, out_cell),
                self.tensor(&p("ln.cell.gain")),
                self.tensor(&p("ln.cell.bias")),
            );
        }
        let ue = (0..n_ues).map(|u| t.slice_rows(ue_state, u, u + 1)).collect();
        Encoded {
            ue,
            cells: cell_state,
        }
    }

    /// One gated-recurrent-unit step: update gate z, reset gate r, candidate
    /// n, h' = (1−z)⊙n + z⊙h.
    pub fn gru_step(&self, h_prev: Tensor, x: Tensor) -> Tensor {
        let t = self.tape;
        let gate = |w: &str, u: &str, b: &str, h: Tensor| {
            t.add_row(
                t.add(t.matmul(x, self.tensor(w)), t.matmul(h, self.tensor(u))),
                self.tensor(b),
            )
        };
        let z = t.sigmoid(gate("gru.w_z", "gru.u_z", "gru.b_z", h_prev));
        let r = t.sigmoid(gate("gru.w_r", "gru.u_r", "gru.b_r", h_prev));
        let n = t.tanh(gate("gru.w_n", "gru.u_n", "gru.b_n", t.mul(r, h_prev)));
        // (1−z)⊙n + z⊙h = n + z⊙(h − n)
        t.add(n, t.mul(z, t.sub(h_prev, n)))
    }

    /// Per-candidate scores from the shared scorer on [h, e, h⊙e].
    /// Returns `[1, mask.len()]`; masked (padded) slots are −∞. The mask must
    /// be a true-prefix, matching how candidate sets are built.
    pub fn score_candidates(&self, h: Tensor, cand_emb: Tensor, mask: &[bool]) -> Tensor {
        let t = self.tape;
        let k = cand_emb.rows;
        assert!(k > 0, "score_candidates: empty candidate set");
        assert!(
            mask.iter().take(k).all(|&m| m) && mask.iter().skip(k).all(|&m| !m),
            "mask must be a true-prefix of length {k}"
        );
        let h_rep = t.concat_rows(&vec![h; k]);
        let inter = t.mul(h_rep, cand_emb);
        let inp = t.concat_cols(t.concat_cols(h_rep, cand_emb), inter);
        let hid = t.gelu(self.affine(inp, "scorer.w1", "scorer.b1"));
        let col = self.affine(hid, "scorer.w2", "scorer.b2"); // [k, 1]
        let mut row = t.slice_rows(col, 0, 1);
        for i in 1..k {
            row = t.concat_cols(row, t.slice_rows(col, i, i + 1));
        }
        if mask.len() > k {
            let pad = t.leaf(1, mask.len() - k, &vec![f64::NEG_INFINITY; mask.len() - k]);
            row = t.concat_cols(row, pad);
        }
        row
    }

    /// μ and logvar heads of the latent compressor.
    pub fn vae_encode(&self, h: Tensor) -> (Tensor, Tensor) {
        (
            self.affine(h, "vae.enc.mu.w", "vae.enc.mu.b"),
            self.affine(h, "vae.enc.lv.w", "vae.enc.lv.b"),
        )
    }

    /// Latent compression. With `eps` (training) z is the reparameterized
    /// sample μ + σ⊙eps; without (inference) z = μ, deterministically.
    pub fn vae_compress(&self, h: Tensor, eps: Option<Tensor>) -> Compressed {
        let (mu, logvar) = self.vae_encode(h);
        let z = match eps {
            Some(e) => self.tape.gaussian_sample(mu, logvar, e),
            None => mu,
        };
        Compressed { z, mu, logvar }
    }

    /// Decodes a latent back into a d_h-dim state.
    pub fn vae_decode(&self, z: Tensor) -> Tensor {
        self.affine(z, "vae.dec.w", "vae.dec.b")
    }

    /// Casts a latent tensor to the binary32 wire representation.
    pub fn latent_payload(&self, z: Tensor) -> [f32; LATENT_DIM] {
        let v = self.tape.value(z);
        assert_eq!(v.len(), LATENT_DIM, "latent has {} slots", v.len());
        let mut out = [0.0f32; LATENT_DIM];
        for (o, x) in out.iter_mut().zip(&v) {
            *o = *x as f32;
        }
        out
    }

    /// Re-enters a received binary32 payload as a tape leaf.
    pub fn payload_leaf(&self, z: &[f32; LATENT_DIM]) -> Tensor {
        let v: Vec<f64> = z.iter().map(|&x| x as f64).collect();
        self.tape.leaf(1, LATENT_DIM, &v)
    }

    /// Target-side fusion: γ = σ(gate([h̃, x])), h' = LN(h̃ + γ⊙MLP([h̃, x])).
    /// Inbound dropout applies to h̃ only during training.
    pub fn project<R: Rng>(
        &self,
        h_tilde: Tensor,
        x_new: Tensor,
        train: bool,
        rng: &mut R,
    ) -> Tensor {
        let t = self.tape;
        let hd = t.dropout(h_tilde, self.config.dropout, train, rng);
        let c = t.concat_cols(hd, x_new);
        let gamma = t.sigmoid(self.affine(
            t.relu(self.affine(c, "gate.w1", "gate.b1")),
            "gate.w2",
            "gate.b2",
        ));
        let m = self.affine(
            t.relu(self.affine(c, "proj.w1", "proj.b1")),
            "proj.w2",
            "proj.b2",
        );
        t.layer_norm(
            t.add(hd, t.mul(gamma, m)),
            self.tensor("proj.ln.gain"),
            self.tensor("proj.ln.bias"),
        )
    }

    /// The full handover-instant path: compress (deterministic) → wire cast
    /// → optional codec round trip → decode → gated projection → score →
    /// argmax. `use_codec = false` bypasses serialize/deserialize only; the
    /// wire cast is part of the payload type either way, so both paths are
    /// bit-identical.
    pub fn ilcp_handover_inference(
        &self,
        h_src: Tensor,
        x_new: Tensor,
        cand_emb: Tensor,
        mask: &[bool],
        use_codec: bool,
    ) -> Result<InferenceOutcome> {
        let compressed = self.vae_compress(h_src, None);
        let mut payload = self.latent_payload(compressed.z);
        if use_codec {
            payload = deserialize_latent(&serialize_latent(&payload)?)?;
        }
        let h_tilde = self.vae_decode(self.payload_leaf(&payload));
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: inference has no dropout
        let h_new = self.project(h_tilde, x_new, false, &mut rng);
        let scores_t = self.score_candidates(h_new, cand_emb, mask);
        let scores = self.tape.value(scores_t);
        let predicted_slot = argmax_slot(&scores, mask);
        Ok(InferenceOutcome {
            predicted_slot,
            payload,
            h_new,
            scores,
        })
    }
}

/// Gathers the candidate embeddings for a candidate set from the encoder's
/// cell matrix.
pub fn candidate_embeddings(tape: &Tape, encoded: &Encoded, cand: &CandidateSet) -> Tensor {
    tape.gather_rows(encoded.cells, &cand.cell_indices)
}

/// Softmax over unmasked score slots; masked probabilities are exactly zero.
pub fn candidate_probs(tape: &Tape, scores: Tensor, mask: &[bool]) -> Tensor {
    tape.softmax_masked(scores, mask)
}

/// Index of the best unmasked score; ties resolve to the lowest slot, which
/// by candidate ordering means strongest RSRP then lowest CellId.
pub fn argmax_slot(scores: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&s, &m)) in scores.iter().zip(mask).enumerate() {
        if m && s > best_v {
            best_v = s;
            best = i;
        }
    }
    assert!(best != usize::MAX, "argmax_slot: all slots masked");
    best
}

/// Summed and per-event negative log-likelihood over (probability row, label
/// slot) pairs. Events whose label is outside the candidate set must be
/// excluded (and counted) by the caller before this point.
pub struct PredictionLoss {
    pub total: Tensor,
    pub mean_per_event: f64,
    pub n_events: usize,
}

pub fn prediction_loss(tape: &Tape, events: &[(Tensor, usize)]) -> PredictionLoss {
    let mut total = tape.scalar(0.0);
    for &(probs, slot) in events {
        let p = tape.slice_cols(probs, slot, slot + 1);
        total = tape.sub(total, tape.ln(p));
    }
    let n = events.len();
    let sum = tape.scalar_value(total);
    PredictionLoss {
        total,
        mean_per_event: if n == 0 { 0.0 } else { sum / n as f64 },
        n_events: n,
    }
}

/// Mean-squared reconstruction error plus β·KL against the standard normal:
/// KL = ½·Σ(μ² + exp(logvar) − 1 − logvar).
pub fn vae_loss(
    tape: &Tape,
    h: Tensor,
    reconstruction: Tensor,
    mu: Tensor,
    logvar: Tensor,
    beta: f64,
) -> Tensor {
    let d = tape.sub(reconstruction, h);
    let mse = tape.mean_all(tape.mul(d, d));
    let kl = tape.scale(
        tape.sum_all(tape.sub(
            tape.add(tape.mul(mu, mu), tape.exp(tape.clamp(logvar, -30.0, 30.0))),
            tape.add_scalar(logvar, 1.0),
        )),
        0.5,
    );
    tape.add(mse, tape.scale(kl, beta))
}

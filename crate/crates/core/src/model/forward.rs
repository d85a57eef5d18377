use crate::error::{Error, Result};
use crate::nn::{binary_xent, binary_xent_grad, categorical_xent, categorical_xent_grad, sigmoid, softmax};
use crate::nn::DenseCache;
use crate::types::{FeatureBundle, IntegrityLabel};

use super::{AttentionParams, ForgetGate, GateMode, Model, ModelParams, RelatedParams, SiameseParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub integrity_prob: f64,
    /// `None` when the related-package branch is disabled.
    pub relationship_prob: Option<f64>,
    /// Distribution over (clean, manipulated, unknown).
    pub manipulation_probs: Option<[f64; 3]>,
    pub retrieved_id: Option<String>,
}

/// Supervision for one (query, retrieved) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabels {
    pub integrity: IntegrityLabel,
    pub relationship: bool,
    pub manipulation: IntegrityLabel,
}

impl PairLabels {
    fn integrity_target(&self) -> f64 {
        if self.integrity == IntegrityLabel::Manipulated {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub query: &'a FeatureBundle,
    pub retrieved: Option<&'a FeatureBundle>,
    pub labels: PairLabels,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    proj: Vec<DenseCache>,
    alphas: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SideCache {
    attention: Option<AttentionCache>,
    balance: [DenseCache; 3],
    balanced: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SiameseCache {
    q: DenseCache,
    r: DenseCache,
    combine: DenseCache,
}

#[derive(Debug, Clone)]
struct RelatedCache {
    rel: SiameseCache,
    rel_prob: f64,
    man: SiameseCache,
    man_probs: Vec<f64>,
    gate: Option<DenseCache>,
    gated: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    q: SideCache,
    r: Option<SideCache>,
    related: Option<RelatedCache>,
    single: DenseCache,
    head_input: Vec<f64>,
    integrity_prob: f64,
}

impl ForwardCache {
    fn output(&self) -> ModelOutput {
        ModelOutput {
            integrity_prob: self.integrity_prob,
            relationship_prob: self.related.as_ref().map(|r| r.rel_prob),
            manipulation_probs: self
                .related
                .as_ref()
                .map(|r| [r.man_probs[0], r.man_probs[1], r.man_probs[2]]),
            retrieved_id: None,
        }
    }
}

fn attention_forward(tokens: &[Vec<f64>], p: &AttentionParams) -> Result<(Vec<f64>, Option<AttentionCache>)> {
    let dim = p.proj.input_dim();
    let Some(anchor) = tokens.first() else {
        return Ok((vec![0.0; dim], None));
    };
    let proj = tokens.iter().map(|h| p.proj.forward(h)).collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = proj
        .iter()
        .map(|c| c.out.iter().zip(&p.context).map(|(a, u)| a * u).sum())
        .collect();
    let alphas = softmax(&scores);
    // Pool relative to the first token; equal to sum(alpha_i h_i) because
    // the weights sum to one, and exact when all tokens coincide.
    let mut out = anchor.clone();
    for (h, &a) in tokens.iter().zip(&alphas).skip(1) {
        for ((o, v), v0) in out.iter_mut().zip(h).zip(anchor) {
            *o += a * (v - v0);
        }
    }
    Ok((out, Some(AttentionCache { proj, alphas })))
}

fn attention_backward(p: &AttentionParams, tokens: &[Vec<f64>], cache: &AttentionCache, d_out: &[f64], grads: &mut AttentionParams) {
    let d_alpha: Vec<f64> = tokens
        .iter()
        .map(|h| h.iter().zip(d_out).map(|(v, g)| v * g).sum())
        .collect();
    let mean: f64 = cache.alphas.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    for (i, c) in cache.proj.iter().enumerate() {
        let d_score = cache.alphas[i] * (d_alpha[i] - mean);
        if d_score == 0.0 {
            continue;
        }
        for (g, a) in grads.context.iter_mut().zip(&c.out) {
            *g += d_score * a;
        }
        let d_proj: Vec<f64> = p.context.iter().map(|u| d_score * u).collect();
        p.proj.backward(c, &d_proj, &mut grads.proj);
    }
}

/// Attention-weighted mean of token vectors. Empty input gives zeros and `false`.
pub fn attention_pool(tokens: &[Vec<f64>], p: &AttentionParams) -> Result<(Vec<f64>, bool)> {
    let (out, cache) = attention_forward(tokens, p)?;
    Ok((out, cache.is_some()))
}

fn side_forward(bundle: &FeatureBundle, params: &ModelParams) -> Result<SideCache> {
    let (text, attention) = match &params.attention {
        Some(att) => attention_forward(&bundle.text_tokens, att)?,
        None => (bundle.text_pooled.clone(), None),
    };
    let balance = [
        params.balance[0].forward(&bundle.image)?,
        params.balance[1].forward(&text)?,
        params.balance[2].forward(&bundle.gps)?,
    ];
    let balanced = balance.iter().flat_map(|c| c.out.iter().copied()).collect();
    Ok(SideCache {
        attention,
        balance,
        balanced,
    })
}

fn side_backward(params: &ModelParams, bundle: &FeatureBundle, cache: &SideCache, d_balanced: &[f64], grads: &mut ModelParams) {
    let b = params.balance[0].output_dim();
    let mut d_text = Vec::new();
    for (i, c) in cache.balance.iter().enumerate() {
        let d_in = params.balance[i].backward(c, &d_balanced[i * b..(i + 1) * b], &mut grads.balance[i]);
        if i == 1 {
            d_text = d_in;
        }
    }
    if let (Some(att), Some(att_cache), Some(att_grads)) = (&params.attention, &cache.attention, &mut grads.attention) {
        attention_backward(att, &bundle.text_tokens, att_cache, &d_text, att_grads);
    }
}

/// Balanced `3 * D_bal` vector of a package (image, text, gps blocks).
pub fn balance(bundle: &FeatureBundle, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(side_forward(bundle, params)?.balanced)
}

fn siamese_forward(p: &SiameseParams, q: &[f64], r: &[f64]) -> Result<SiameseCache> {
    let qc = p.tower.forward(q)?;
    let rc = p.tower.forward(r)?;
    let mut joined = Vec::with_capacity(3 * qc.out.len());
    joined.extend_from_slice(&qc.out);
    joined.extend_from_slice(&rc.out);
    joined.extend(qc.out.iter().zip(&rc.out).map(|(a, b)| (a - b).abs()));
    let combine = p.combine.forward(&joined)?;
    Ok(SiameseCache { q: qc, r: rc, combine })
}

fn siamese_backward(p: &SiameseParams, cache: &SiameseCache, d_feat: &[f64], grads: &mut SiameseParams) -> (Vec<f64>, Vec<f64>) {
    let d_joined = p.combine.backward(&cache.combine, d_feat, &mut grads.combine);
    let h = cache.q.out.len();
    let mut d_fq = d_joined[..h].to_vec();
    let mut d_fr = d_joined[h..2 * h].to_vec();
    for i in 0..h {
        let diff = cache.q.out[i] - cache.r.out[i];
        let s = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_fq[i] += d_joined[2 * h + i] * s;
        d_fr[i] -= d_joined[2 * h + i] * s;
    }
    let d_q = p.tower.backward(&cache.q, &d_fq, &mut grads.tower);
    let d_r = p.tower.backward(&cache.r, &d_fr, &mut grads.tower);
    (d_q, d_r)
}

/// Relationship probability, relationship feature, and raw manipulation feature.
pub fn related_forward(q_bal: &[f64], r_bal: &[f64], params: &RelatedParams) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let rel = siamese_forward(&params.relationship, q_bal, r_bal)?;
    let logit = params.relationship_head.forward(&rel.combine.out)?.out[0];
    let man = siamese_forward(&params.manipulation, q_bal, r_bal)?;
    Ok((sigmoid(logit), rel.combine.out, man.combine.out))
}

fn gate_forward(gate: &ForgetGate, rel_prob: f64, rel_feat: &[f64], manip: &[f64]) -> Result<(Vec<f64>, Option<DenseCache>)> {
    match (gate.mode, &gate.layer) {
        (GateMode::Fixed, _) => Ok((manip.iter().map(|v| rel_prob * v).collect(), None)),
        (GateMode::Learnable, Some(layer)) => {
            let c = layer.forward(rel_feat)?;
            if c.out.len() != manip.len() {
                return Err(Error::Shape("gate width differs from manipulation feature".into()));
            }
            let gated = manip.iter().zip(&c.out).map(|(m, g)| m * g).collect();
            Ok((gated, Some(c)))
        }
        (GateMode::Learnable, None) => Err(Error::Invalid("learnable gate without parameters".into())),
    }
}

/// Forget gate: fixed mode scales by the relationship probability,
/// learnable mode multiplies elementwise by `sigmoid(w . rel_feat + b)`.
pub fn apply_gate(gate: &ForgetGate, rel_prob: f64, rel_feat: &[f64], manip: &[f64]) -> Result<Vec<f64>> {
    Ok(gate_forward(gate, rel_prob, rel_feat, manip)?.0)
}

pub fn single_forward(q_bal: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(params.single.forward(q_bal)?.out)
}

/// Single affine layer plus sigmoid over `[gated, single]` (or `single` alone).
pub fn integrity_forward(gated: Option<&[f64]>, single: &[f64], params: &ModelParams) -> Result<f64> {
    let input: Vec<f64> = gated.unwrap_or(&[]).iter().chain(single).copied().collect();
    Ok(sigmoid(params.integrity.forward(&input)?.out[0]))
}

impl Model {
    pub(crate) fn forward_cached(&self, q: &FeatureBundle, r: Option<&FeatureBundle>) -> Result<ForwardCache> {
        let p = &self.params;
        let q_side = side_forward(q, p)?;
        let (r_side, related) = match &p.related {
            Some(rp) => {
                let r = r.ok_or_else(|| Error::Invalid("related branch needs a retrieved package".into()))?;
                let r_side = side_forward(r, p)?;
                let rel = siamese_forward(&rp.relationship, &q_side.balanced, &r_side.balanced)?;
                let rel_prob = sigmoid(rp.relationship_head.forward(&rel.combine.out)?.out[0]);
                let man = siamese_forward(&rp.manipulation, &q_side.balanced, &r_side.balanced)?;
                let man_probs = softmax(&rp.manipulation_head.forward(&man.combine.out)?.out);
                let (gated, gate) = gate_forward(&rp.gate, rel_prob, &rel.combine.out, &man.combine.out)?;
                (
                    Some(r_side),
                    Some(RelatedCache {
                        rel,
                        rel_prob,
                        man,
                        man_probs,
                        gate,
                        gated,
                    }),
                )
            }
            None => (None, None),
        };
        let single = p.single.forward(&q_side.balanced)?;
        let head_input: Vec<f64> = related
            .as_ref()
            .map(|rc| rc.gated.as_slice())
            .unwrap_or(&[])
            .iter()
            .chain(&single.out)
            .copied()
            .collect();
        let integrity_prob = sigmoid(p.integrity.forward(&head_input)?.out[0]);
        Ok(ForwardCache {
            q: q_side,
            r: r_side,
            related,
            single,
            head_input,
            integrity_prob,
        })
    }

    /// Runs every head on a (query, retrieved) pair. `retrieved` is ignored
    /// when the related branch is disabled.
    pub fn forward(&self, q: &FeatureBundle, r: Option<&FeatureBundle>) -> Result<ModelOutput> {
        Ok(self.forward_cached(q, r)?.output())
    }

    fn pair_loss(&self, out: &ForwardCache, labels: &PairLabels) -> Result<f64> {
        multitask_loss_parts(
            out.integrity_prob,
            out.related.as_ref().map(|r| (r.rel_prob, r.man_probs.as_slice())),
            labels,
            self.config.lambda_rel,
            self.config.lambda_man,
        )
    }

    /// Mean multitask loss over a batch.
    pub fn batch_loss(&self, batch: &[PairRef<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for pair in batch {
            let c = self.forward_cached(pair.query, pair.retrieved)?;
            total += self.pair_loss(&c, &pair.labels)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean batch loss; gradients of that mean are added into `grads`.
    pub fn loss_and_grad(&self, batch: &[PairRef<'_>], grads: &mut ModelParams) -> Result<f64> {
        let n = batch.len().max(1) as f64;
        let mut total = 0.0;
        for pair in batch {
            let c = self.forward_cached(pair.query, pair.retrieved)?;
            total += self.pair_loss(&c, &pair.labels)?;
            self.backward(pair, &c, 1.0 / n, grads);
        }
        Ok(total / n)
    }

    fn backward(&self, pair: &PairRef<'_>, c: &ForwardCache, weight: f64, grads: &mut ModelParams) {
        let p = &self.params;
        let cfg = &self.config;
        let labels = &pair.labels;

        let d_logit = weight * binary_xent_grad(c.integrity_prob, labels.integrity_target());
        let d_head_in = p.integrity.backward_pre(&c.head_input, &[d_logit], &mut grads.integrity);
        let h = c.single.out.len();
        let (d_gated, d_single) = d_head_in.split_at(d_head_in.len() - h);

        let mut d_q_bal = p.single.backward(&c.single, d_single, &mut grads.single);

        if let (Some(rp), Some(rc), Some(rg), Some(r_side), Some(r_bundle)) =
            (&p.related, &c.related, &mut grads.related, &c.r, pair.retrieved)
        {
            let man_raw = &rc.man.combine.out;
            let rel_feat = &rc.rel.combine.out;
            let mut d_man_raw = vec![0.0; man_raw.len()];
            let mut d_rel_feat = vec![0.0; rel_feat.len()];
            let mut d_rel_logit = weight * cfg.lambda_rel * binary_xent_grad(rc.rel_prob, f64::from(u8::from(labels.relationship)));

            match (&rp.gate.layer, &rc.gate, &mut rg.gate.layer) {
                (Some(layer), Some(gc), Some(gg)) => {
                    for i in 0..d_man_raw.len() {
                        d_man_raw[i] += d_gated[i] * gc.out[i];
                    }
                    let d_gate: Vec<f64> = d_gated.iter().zip(man_raw).map(|(d, m)| d * m).collect();
                    let d_in = layer.backward(gc, &d_gate, gg);
                    for (a, b) in d_rel_feat.iter_mut().zip(d_in) {
                        *a += b;
                    }
                }
                _ => {
                    let mut d_prob = 0.0;
                    for i in 0..d_man_raw.len() {
                        d_man_raw[i] += d_gated[i] * rc.rel_prob;
                        d_prob += d_gated[i] * man_raw[i];
                    }
                    d_rel_logit += d_prob * rc.rel_prob * (1.0 - rc.rel_prob);
                }
            }

            let d_feat = rp
                .relationship_head
                .backward_pre(rel_feat, &[d_rel_logit], &mut rg.relationship_head);
            for (a, b) in d_rel_feat.iter_mut().zip(d_feat) {
                *a += b;
            }

            let d_man_logits: Vec<f64> = categorical_xent_grad(&rc.man_probs, labels.manipulation.class_index())
                .into_iter()
                .map(|g| g * weight * cfg.lambda_man)
                .collect();
            let d_man_feat = rp
                .manipulation_head
                .backward_pre(man_raw, &d_man_logits, &mut rg.manipulation_head);
            for (a, b) in d_man_raw.iter_mut().zip(d_man_feat) {
                *a += b;
            }

            let (dq1, dr1) = siamese_backward(&rp.relationship, &rc.rel, &d_rel_feat, &mut rg.relationship);
            let (dq2, dr2) = siamese_backward(&rp.manipulation, &rc.man, &d_man_raw, &mut rg.manipulation);
            for i in 0..d_q_bal.len() {
                d_q_bal[i] += dq1[i] + dq2[i];
            }
            let d_r_bal: Vec<f64> = dr1.iter().zip(&dr2).map(|(a, b)| a + b).collect();
            side_backward(p, r_bundle, r_side, &d_r_bal, grads);
        }

        side_backward(p, pair.query, &c.q, &d_q_bal, grads);
    }
}

pub(crate) fn multitask_loss_parts(
    integrity_prob: f64,
    related: Option<(f64, &[f64])>,
    labels: &PairLabels,
    lambda_rel: f64,
    lambda_man: f64,
) -> Result<f64> {
    let mut loss = binary_xent(integrity_prob, labels.integrity_target())?;
    if let Some((rel_prob, man_probs)) = related {
        if lambda_rel != 0.0 {
            loss += lambda_rel * binary_xent(rel_prob, f64::from(u8::from(labels.relationship)))?;
        }
        if lambda_man != 0.0 {
            loss += lambda_man * categorical_xent(man_probs, labels.manipulation.class_index())?;
        }
    }
    Ok(loss)
}

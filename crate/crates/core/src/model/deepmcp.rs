use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::embedding::{embed_fields, field_plan, scatter_fields, SharedEmbedding};
use super::tower::{Tower, TowerCache};
use super::{Architecture, InitScheme, ModelError, Scorer, INIT_SCALE};
use crate::features::{AdBundle, FieldSchema, Group, Instance};
use crate::tensor::{
    dot, logistic_loss, logistic_loss_logit_grad, neg_log_sigmoid, neg_log_sigmoid_grad, sigmoid,
    Activation, FcCache, FcLayer, Mode, Real,
};

const PREDICTION_GROUPS: [Group; 4] = Group::ALL;
const USER_GROUPS: [Group; 2] = [Group::User, Group::Query];
const AD_GROUPS: [Group; 1] = [Group::Ad];

/// The matching and correlation towers. Inference never needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTowers<T: Real = f32> {
    pub user_tower: Tower<T>,
    pub ad_match_tower: Tower<T>,
    pub ad_corr_tower: Tower<T>,
}

/// Forward-call counters per subnet.
#[derive(Debug, Default)]
struct Counters {
    prediction: AtomicU64,
    matching: AtomicU64,
    correlation: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubnetCounts {
    pub prediction: u64,
    pub matching: u64,
    pub correlation: u64,
}

/// Which loss terms a batch pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `loss_p + alpha * loss_m + beta * loss_c`.
    Joint,
    /// Prediction subnet only; the auxiliary towers are never run.
    PredictionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub objective: Objective,
}

/// One skip-gram training example with its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationExample {
    pub center: AdBundle,
    pub context: AdBundle,
    pub negatives: Vec<AdBundle>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLosses {
    pub loss_p: f64,
    pub loss_m: f64,
    pub loss_c: f64,
    pub joint: f64,
}

struct PredItem<T: Real> {
    fields: Vec<Vec<usize>>,
    tower: TowerCache<T>,
    out: FcCache<T>,
    dlogit: f64,
}

struct MatchItem<T: Real> {
    user_fields: Vec<Vec<usize>>,
    ad_fields: Vec<Vec<usize>>,
    user: TowerCache<T>,
    ad: TowerCache<T>,
    v_user: Vec<T>,
    v_ad: Vec<T>,
    dscore: f64,
}

/// Bundle order: center, context, negatives.
struct CorrItem<T: Real> {
    bundles: Vec<(AdBundle, TowerCache<T>, Vec<T>)>,
    dpos: f64,
    dneg: Vec<f64>,
}

struct PassCache<T: Real> {
    pred: Vec<PredItem<T>>,
    matching: Vec<MatchItem<T>>,
    corr: Vec<CorrItem<T>>,
}

/// Losses of one mini-batch plus, when requested, what backprop needs.
pub struct BatchPass<T: Real = f32> {
    pub losses: BatchLosses,
    alpha: f64,
    beta: f64,
    cache: Option<PassCache<T>>,
}

/// Shared embedding, prediction subnet, and (unless stripped) the matching
/// and correlation towers.
#[derive(Debug)]
pub struct DeepMcp<T: Real = f32> {
    schema: FieldSchema,
    arch: Architecture,
    pub shared: SharedEmbedding<T>,
    pub pred_tower: Tower<T>,
    pub pred_out: FcLayer<T>,
    pub aux: Option<AuxTowers<T>>,
    counters: Counters,
}

impl<T: Real> Clone for DeepMcp<T> {
    fn clone(&self) -> Self {
        Self {
            schema: self.schema.clone(),
            arch: self.arch.clone(),
            shared: self.shared.clone(),
            pred_tower: self.pred_tower.clone(),
            pred_out: self.pred_out.clone(),
            aux: self.aux.clone(),
            counters: Counters::default(),
        }
    }
}

impl<T: Real> PartialEq for DeepMcp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.arch == other.arch
            && self.shared.table.value == other.shared.table.value
            && self.pred_tower == other.pred_tower
            && self.pred_out == other.pred_out
            && self.aux == other.aux
    }
}

impl<T: Real> DeepMcp<T> {
    /// All parameters zero.
    pub fn zeros(schema: FieldSchema, arch: Architecture) -> Self {
        let k = arch.embedding_dim;
        let pred_in = k * schema.len();
        let user_in = k * (schema.field_count(Group::User) + schema.field_count(Group::Query));
        let ad_in = k * schema.field_count(Group::Ad);
        let pred_tower = Tower::new(pred_in, &arch.layer_dims, None);
        let pred_out = FcLayer::zeros(pred_tower.output_dim(), 1, Activation::Identity);
        let projection = Some((arch.repr_dim, Activation::Tanh));
        let aux = AuxTowers {
            user_tower: Tower::new(user_in, &arch.layer_dims, projection),
            ad_match_tower: Tower::new(ad_in, &arch.layer_dims, projection),
            ad_corr_tower: Tower::new(ad_in, &arch.layer_dims, projection),
        };
        Self {
            shared: SharedEmbedding::zeros(arch.hash_space, k),
            schema,
            arch,
            pred_tower,
            pred_out,
            aux: Some(aux),
            counters: Counters::default(),
        }
    }

    /// Uniform `[-INIT_SCALE, INIT_SCALE]` weights and embeddings, zero
    /// biases. Draw order: embedding rows, prediction tower weights,
    /// prediction output weights, user tower, ad matching tower, ad
    /// correlation tower; each matrix row-major.
    pub fn init<R: Rng + ?Sized>(schema: FieldSchema, arch: Architecture, rng: &mut R) -> Self {
        Self::init_with_scale(schema, arch, rng, INIT_SCALE)
    }

    pub fn init_with_scale<R: Rng + ?Sized>(
        schema: FieldSchema,
        arch: Architecture,
        rng: &mut R,
        scale: f64,
    ) -> Self {
        Self::init_with(schema, arch, rng, scale, InitScheme::Uniform)
    }

    /// Same draw order as [`DeepMcp::init`]; `scheme` picks the FC weight
    /// ranges.
    pub fn init_with<R: Rng + ?Sized>(
        schema: FieldSchema,
        arch: Architecture,
        rng: &mut R,
        scale: f64,
        scheme: InitScheme,
    ) -> Self {
        let mut m = Self::zeros(schema, arch);
        m.shared.init_uniform(rng, scale);
        let tower = |t: &mut Tower<T>, rng: &mut R| match scheme {
            InitScheme::Uniform => t.init_uniform(rng, scale),
            InitScheme::Glorot => t.init_glorot(rng),
        };
        tower(&mut m.pred_tower, rng);
        match scheme {
            InitScheme::Uniform => m.pred_out.weight.init_uniform(rng, scale),
            InitScheme::Glorot => m.pred_out.init_glorot(rng),
        }
        if let Some(aux) = m.aux.as_mut() {
            tower(&mut aux.user_tower, rng);
            tower(&mut aux.ad_match_tower, rng);
            tower(&mut aux.ad_corr_tower, rng);
        }
        m
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Drops the matching and correlation towers.
    pub fn strip(&mut self) {
        self.aux = None;
    }

    pub fn counts(&self) -> SubnetCounts {
        SubnetCounts {
            prediction: self.counters.prediction.load(Ordering::Relaxed),
            matching: self.counters.matching.load(Ordering::Relaxed),
            correlation: self.counters.correlation.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.counters.prediction.store(0, Ordering::Relaxed);
        self.counters.matching.store(0, Ordering::Relaxed);
        self.counters.correlation.store(0, Ordering::Relaxed);
    }

    fn aux(&self) -> Result<&AuxTowers<T>, ModelError> {
        self.aux.as_ref().ok_or(ModelError::Stripped)
    }

    fn check_bundle(&self, bundle: &AdBundle) -> Result<(), ModelError> {
        let expected = self.schema.field_count(Group::Ad);
        if bundle.len() != expected {
            return Err(ModelError::InstanceShape {
                group: "ad",
                expected,
                got: bundle.len(),
            });
        }
        Ok(())
    }

    fn bundle_fields(bundle: &AdBundle) -> Vec<&[usize]> {
        bundle.iter().map(Vec::as_slice).collect()
    }

    /// pCTR. In train mode dropout follows every prediction-tower layer.
    pub fn predict_ctr<R: Rng + ?Sized>(
        &self,
        instance: &Instance,
        mode: Mode,
        rng: &mut R,
    ) -> Result<f64, ModelError> {
        self.counters.prediction.fetch_add(1, Ordering::Relaxed);
        let plan = field_plan(&self.schema, &PREDICTION_GROUPS, instance)?;
        let m = embed_fields(&self.shared, &plan)?;
        let z = match mode {
            Mode::Eval => self.pred_tower.forward(&m)?,
            Mode::Train => self.pred_tower.forward_train(&m, Some((self.arch.dropout, rng)))?.0,
        };
        let logit = self.pred_out.forward(&z)?[0];
        Ok(sigmoid(logit.to_wide()))
    }

    /// Eval-mode pCTR: deterministic and side-effect free apart from the
    /// call counter.
    pub fn score_eval(&self, instance: &Instance) -> Result<f64, ModelError> {
        self.counters.prediction.fetch_add(1, Ordering::Relaxed);
        let plan = field_plan(&self.schema, &PREDICTION_GROUPS, instance)?;
        let m = embed_fields(&self.shared, &plan)?;
        let z = self.pred_tower.forward(&m)?;
        let logit = self.pred_out.forward(&z)?[0];
        Ok(sigmoid(logit.to_wide()))
    }

    /// User-side and ad-side representations of the matching subnet.
    pub fn matching_vectors(&self, instance: &Instance) -> Result<(Vec<T>, Vec<T>), ModelError> {
        let aux = self.aux()?;
        self.counters.matching.fetch_add(1, Ordering::Relaxed);
        let user_plan = field_plan(&self.schema, &USER_GROUPS, instance)?;
        let ad_plan = field_plan(&self.schema, &AD_GROUPS, instance)?;
        let v_user = aux.user_tower.forward(&embed_fields(&self.shared, &user_plan)?)?;
        let v_ad = aux.ad_match_tower.forward(&embed_fields(&self.shared, &ad_plan)?)?;
        Ok((v_user, v_ad))
    }

    /// `sigmoid(v_u . v_a)`.
    pub fn matching_score(&self, instance: &Instance) -> Result<f64, ModelError> {
        let (v_user, v_ad) = self.matching_vectors(instance)?;
        Ok(sigmoid(dot(&v_user, &v_ad)))
    }

    /// Correlation-tower representation of one ad.
    pub fn ad_representation(&self, bundle: &AdBundle) -> Result<Vec<T>, ModelError> {
        let aux = self.aux()?;
        self.check_bundle(bundle)?;
        self.counters.correlation.fetch_add(1, Ordering::Relaxed);
        let m = embed_fields(&self.shared, &Self::bundle_fields(bundle))?;
        Ok(aux.ad_corr_tower.forward(&m)?)
    }

    /// `-ln σ(h_ctx . h_ctr) - Σ_q ln σ(-h_q . h_ctr)`.
    pub fn correlation_loss_term(
        &self,
        center: &AdBundle,
        context: &AdBundle,
        negatives: &[AdBundle],
    ) -> Result<f64, ModelError> {
        let h_center = self.ad_representation(center)?;
        let h_context = self.ad_representation(context)?;
        let mut loss = neg_log_sigmoid(dot(&h_context, &h_center));
        for neg in negatives {
            let h = self.ad_representation(neg)?;
            loss += neg_log_sigmoid(-dot(&h, &h_center));
        }
        Ok(loss)
    }

    /// Computes `(loss_p, loss_m, loss_c, joint)` over a labeled batch and a
    /// batch of correlation examples. With `keep_cache` the pass can be fed
    /// to [`DeepMcp::backward_joint`].
    pub fn batch_losses<R: Rng + ?Sized>(
        &self,
        batch: &[Instance],
        pairs: &[CorrelationExample],
        cfg: &LossConfig,
        rng: &mut R,
        keep_cache: bool,
    ) -> Result<BatchPass<T>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut cache = PassCache {
            pred: Vec::new(),
            matching: Vec::new(),
            corr: Vec::new(),
        };

        let mut sum_p = 0.0;
        for inst in batch {
            self.counters.prediction.fetch_add(1, Ordering::Relaxed);
            let plan = field_plan(&self.schema, &PREDICTION_GROUPS, inst)?;
            let m = embed_fields(&self.shared, &plan)?;
            let (z, tower) = self.pred_tower.forward_train(&m, Some((self.arch.dropout, &mut *rng)))?;
            let (logit, out) = self.pred_out.forward_cached(&z)?;
            let p = sigmoid(logit[0].to_wide());
            let y = inst.label_f64();
            sum_p += logistic_loss(p, y);
            if keep_cache {
                cache.pred.push(PredItem {
                    fields: plan.iter().map(|f| f.to_vec()).collect(),
                    tower,
                    out,
                    dlogit: logistic_loss_logit_grad(p, y),
                });
            }
        }
        let loss_p = sum_p / batch.len() as f64;

        let (mut loss_m, mut loss_c) = (0.0, 0.0);
        if cfg.objective == Objective::Joint {
            let aux = self.aux()?;
            let mut sum_m = 0.0;
            for inst in batch {
                self.counters.matching.fetch_add(1, Ordering::Relaxed);
                let user_plan = field_plan(&self.schema, &USER_GROUPS, inst)?;
                let ad_plan = field_plan(&self.schema, &AD_GROUPS, inst)?;
                let (v_user, user) = aux
                    .user_tower
                    .forward_train::<R>(&embed_fields(&self.shared, &user_plan)?, None)?;
                let (v_ad, ad) = aux
                    .ad_match_tower
                    .forward_train::<R>(&embed_fields(&self.shared, &ad_plan)?, None)?;
                let s = sigmoid(dot(&v_user, &v_ad));
                let y = inst.label_f64();
                sum_m += logistic_loss(s, y);
                if keep_cache {
                    cache.matching.push(MatchItem {
                        user_fields: user_plan.iter().map(|f| f.to_vec()).collect(),
                        ad_fields: ad_plan.iter().map(|f| f.to_vec()).collect(),
                        user,
                        ad,
                        v_user,
                        v_ad,
                        dscore: logistic_loss_logit_grad(s, y),
                    });
                }
            }
            loss_m = sum_m / batch.len() as f64;

            if !pairs.is_empty() {
                let mut sum_c = 0.0;
                for ex in pairs {
                    let mut bundles = Vec::with_capacity(2 + ex.negatives.len());
                    for b in [&ex.center, &ex.context].into_iter().chain(&ex.negatives) {
                        self.check_bundle(b)?;
                        self.counters.correlation.fetch_add(1, Ordering::Relaxed);
                        let m = embed_fields(&self.shared, &Self::bundle_fields(b))?;
                        let (h, c) = aux.ad_corr_tower.forward_train::<R>(&m, None)?;
                        bundles.push((b, c, h));
                    }
                    let h_center = &bundles[0].2;
                    let pos = dot(&bundles[1].2, h_center);
                    let mut term = neg_log_sigmoid(pos);
                    let mut dneg = Vec::with_capacity(ex.negatives.len());
                    for (_, _, h) in &bundles[2..] {
                        let x = dot(h, h_center);
                        term += neg_log_sigmoid(-x);
                        // d/dx of -ln σ(-x)
                        dneg.push(-neg_log_sigmoid_grad(-x));
                    }
                    sum_c += term;
                    if keep_cache {
                        cache.corr.push(CorrItem {
                            bundles: bundles.into_iter().map(|(b, c, h)| (b.clone(), c, h)).collect(),
                            dpos: neg_log_sigmoid_grad(pos),
                            dneg,
                        });
                    }
                }
                loss_c = sum_c / pairs.len() as f64;
            }
        }

        let joint = loss_p + cfg.alpha * loss_m + cfg.beta * loss_c;
        Ok(BatchPass {
            losses: BatchLosses {
                loss_p,
                loss_m,
                loss_c,
                joint,
            },
            alpha: cfg.alpha,
            beta: cfg.beta,
            cache: keep_cache.then_some(cache),
        })
    }

    /// Accumulates the gradient of the joint loss of `pass` into every
    /// parameter block, including the embedding rows any subnet touched.
    pub fn backward_joint(&mut self, pass: &BatchPass<T>) -> Result<(), ModelError> {
        let cache = pass.cache.as_ref().ok_or(ModelError::MissingCache)?;

        let n_pred = cache.pred.len().max(1) as f64;
        for item in &cache.pred {
            let d = T::from_wide(item.dlogit / n_pred);
            let gz = self.pred_out.backward(Some(&item.out), &[d])?;
            let gm = self.pred_tower.backward(&item.tower, &gz)?;
            scatter_fields(&mut self.shared, &item.fields, &gm);
        }

        if !cache.matching.is_empty() || !cache.corr.is_empty() {
            let aux = self.aux.as_mut().ok_or(ModelError::Stripped)?;

            let n_match = cache.matching.len().max(1) as f64;
            for item in &cache.matching {
                let d = pass.alpha * item.dscore / n_match;
                let g_user: Vec<T> = item.v_ad.iter().map(|&v| T::from_wide(d * v.to_wide())).collect();
                let g_ad: Vec<T> = item.v_user.iter().map(|&v| T::from_wide(d * v.to_wide())).collect();
                let gm_user = aux.user_tower.backward(&item.user, &g_user)?;
                let gm_ad = aux.ad_match_tower.backward(&item.ad, &g_ad)?;
                scatter_fields(&mut self.shared, &item.user_fields, &gm_user);
                scatter_fields(&mut self.shared, &item.ad_fields, &gm_ad);
            }

            let n_corr = cache.corr.len().max(1) as f64;
            for item in &cache.corr {
                let scale = pass.beta / n_corr;
                let h_center = &item.bundles[0].2;
                let mut grads: Vec<Vec<f64>> = Vec::with_capacity(item.bundles.len());
                let mut g_center: Vec<f64> = item.bundles[1].2.iter().map(|v| item.dpos * v.to_wide()).collect();
                grads.push(Vec::new());
                grads.push(h_center.iter().map(|v| item.dpos * v.to_wide()).collect());
                for ((_, _, h), &dq) in item.bundles[2..].iter().zip(&item.dneg) {
                    for (gc, v) in g_center.iter_mut().zip(h) {
                        *gc += dq * v.to_wide();
                    }
                    grads.push(h_center.iter().map(|v| dq * v.to_wide()).collect());
                }
                grads[0] = g_center;
                for ((bundle, tc, _), g) in item.bundles.iter().zip(&grads) {
                    let g: Vec<T> = g.iter().map(|&v| T::from_wide(scale * v)).collect();
                    let gm = aux.ad_corr_tower.backward(tc, &g)?;
                    scatter_fields(&mut self.shared, bundle, &gm);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.shared.zero_grad();
        self.pred_tower.zero_grad();
        self.pred_out.zero_grad();
        if let Some(aux) = self.aux.as_mut() {
            aux.user_tower.zero_grad();
            aux.ad_match_tower.zero_grad();
            aux.ad_corr_tower.zero_grad();
        }
    }

    /// Adagrad on every block; the embedding only on touched rows.
    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), ModelError> {
        self.shared.adagrad(lr, eps)?;
        self.pred_tower.adagrad(lr, eps)?;
        self.pred_out.adagrad(lr, eps)?;
        if let Some(aux) = self.aux.as_mut() {
            aux.user_tower.adagrad(lr, eps)?;
            aux.ad_match_tower.adagrad(lr, eps)?;
            aux.ad_corr_tower.adagrad(lr, eps)?;
        }
        Ok(())
    }

    /// Parameter values converted to another precision; optimizer state is
    /// not carried over.
    pub fn cast<U: Real>(&self) -> DeepMcp<U> {
        DeepMcp {
            schema: self.schema.clone(),
            arch: self.arch.clone(),
            shared: self.shared.cast(),
            pred_tower: self.pred_tower.cast(),
            pred_out: self.pred_out.cast(),
            aux: self.aux.as_ref().map(|a| AuxTowers {
                user_tower: a.user_tower.cast(),
                ad_match_tower: a.ad_match_tower.cast(),
                ad_corr_tower: a.ad_corr_tower.cast(),
            }),
            counters: Counters::default(),
        }
    }
}

impl<T: Real> Scorer for DeepMcp<T> {
    fn score(&self, instance: &Instance) -> Result<f64, ModelError> {
        self.score_eval(instance)
    }
}

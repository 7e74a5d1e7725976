//! Backbone pretraining, fusion fine-tuning and the synthetic corpus.

pub mod config;
pub mod model;
pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::cross_entropy_head;
use crate::manifest::{LoadedObject, Split, ViewInput};
use crate::nn::Linear;
use crate::numkit::io::save_checkpoint;
use crate::numkit::{param_seed, sgd_step, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::pointbranch::{farthest_point_sample, PointBranch};
use crate::retrieval::{self, SweepAxis, SweepRow};
use crate::viewbranch::{intra_view_pool, ViewCnn};

pub use config::{Config, Phase, TrainConfig};
pub use model::{ablation_build, AblationFlags, BackboneFeatures, Model, Variant};
pub use synthetic::{generate_synthetic_corpus, synthesize, Primitive, SyntheticSpec};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.tsv";
pub const LAST_GOOD_DIR: &str = "last_good";

/// Order-preserving map, parallel when the `parallel` feature is on.
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

/// Tab-separated `epoch  phase  loss  lr` lines under a header.
pub fn epoch_log_tsv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\tphase\tloss\tlr\n");
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{:.9}\t{}", r.epoch, r.phase.as_str(), r.loss, r.lr);
    }
    s
}

/// Result of a training phase; `store` holds every trained parameter.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<EpochRecord>,
}

/// Raised when training produces a non-finite value. `last_good` holds the
/// parameters at the start of the failing epoch.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: ParamStore,
    pub log: Vec<EpochRecord>,
}

/// Mini-batch SGD over `samples`. Per-sample gradients are summed in sample
/// order, so results do not depend on the thread count.
fn run_epochs<S: Sync>(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    samples: &[S],
    mut before_epoch: impl FnMut(usize, &mut ParamStore),
    loss: impl Fn(&mut Tape, &S, usize) -> Result<Var> + Sync + Send,
) -> std::result::Result<Vec<EpochRecord>, Box<TrainFailure>> {
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        before_epoch(epoch, store);
        let snapshot = store.clone();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(cfg.seed, &format!("{}/{epoch}", cfg.phase.as_str())));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let step = |store: &mut ParamStore, batch: &[usize]| -> Result<f64> {
            let scale = 1.0 / batch.len() as f64;
            let shared: &ParamStore = store;
            let results: Vec<Result<(f64, ParamGrads)>> = par_map(batch, |&i| {
                let mut tape = Tape::new(shared);
                let l = loss(&mut tape, &samples[i], epoch)?;
                let value = tape.value(l).item()?;
                let scaled = tape.scale(l, scale)?;
                Ok((value, tape.backward(scaled)?.into_params()))
            });
            let mut batch_loss = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (v, g) = r?;
                batch_loss += v;
                grads.push(g);
            }
            for g in &grads {
                store.accumulate(g)?;
            }
            sgd_step(store, lr, cfg.momentum, cfg.weight_decay)?;
            Ok(batch_loss)
        };
        for batch in order.chunks(cfg.batch_size) {
            match step(store, batch) {
                Ok(l) => total += l,
                Err(error) => {
                    return Err(Box::new(TrainFailure {
                        error,
                        last_good: snapshot,
                        log,
                    }))
                }
            }
        }
        let record = EpochRecord {
            epoch,
            phase: cfg.phase,
            loss: total / samples.len().max(1) as f64,
            lr,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.6} lr {lr}",
            cfg.phase.as_str(),
            record.loss
        );
        log.push(record);
    }
    Ok(log)
}

fn train_split(objects: &[LoadedObject]) -> Vec<&LoadedObject> {
    objects.iter().filter(|o| o.split == Split::Train).collect()
}

fn classifier_name(phase: Phase) -> String {
    format!("{}.ce", phase.as_str())
}

/// Cross-entropy pretraining of one backbone on the training split.
///
/// The point backbone is trained on its pooled global feature, the view
/// backbone on the mean of its per-view tokens.
pub fn pretrain(
    config: &Config,
    phase: Phase,
    objects: &[LoadedObject],
    classes: usize,
) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let fail = |error: Error| {
        Box::new(TrainFailure {
            error,
            last_good: ParamStore::new(),
            log: Vec::new(),
        })
    };
    let cfg = config.train_config(phase);
    let samples = train_split(objects);
    let mut store = ParamStore::new();
    let seed = config.seed;
    let built = (|| -> Result<(Option<PointBranch>, Option<ViewCnn>, Linear)> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::contract("no training objects"));
        }
        match phase {
            Phase::PretrainPoint => {
                let b = PointBranch::new(&mut store, "point", &config.point_branch(), seed)?;
                let ce = Linear::new(&mut store, &classifier_name(phase), config.model.point_dim, classes, 1.0, true, seed)?;
                Ok((Some(b), None, ce))
            }
            Phase::PretrainView => {
                if samples.iter().any(|o| matches!(o.views, ViewInput::Features(_))) {
                    return Err(Error::contract("view pretraining needs rendered views, not precomputed maps"));
                }
                let b = ViewCnn::new(&mut store, "view", &config.view_cnn(), seed)?;
                let ce = Linear::new(&mut store, &classifier_name(phase), config.view_cnn().channels(), classes, 1.0, true, seed)?;
                Ok((None, Some(b), ce))
            }
            Phase::Finetune => Err(Error::contract("pretrain called with the finetune phase")),
        }
    })();
    let (point, view, ce) = built.map_err(fail)?;
    let log = run_epochs(&mut store, &cfg, &samples, |_, _| {}, |tape, obj, _| {
        let feature = if let Some(b) = &point {
            b.forward(tape, &obj.cloud.clone().normalized())?
        } else {
            let ViewInput::Images(stack) = &obj.views else { unreachable!() };
            let maps = view.as_ref().unwrap().forward(tape, stack)?;
            let tokens = intra_view_pool(tape, maps)?;
            let c = tape.shape(tokens)[1];
            let mean = tape.mean(tokens, 0)?;
            tape.reshape(mean, &[1, c])?
        };
        cross_entropy_head(tape, feature, &[obj.label as usize], &ce)
    })?;
    Ok(TrainOutcome { store, log })
}

/// Copies every parameter whose name starts with `prefix` from `source`.
/// The model must contain each of them with the same shape, and at least one
/// must exist.
pub fn load_prefixed(store: &mut ParamStore, source: &[(String, Tensor)], prefix: &str) -> Result<usize> {
    let mut loaded = 0;
    for (name, t) in source.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let id = store.id(name).ok_or_else(|| Error::Load {
            name: name.clone(),
            reason: "not present in the model".into(),
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Load {
                name: name.clone(),
                reason: format!("shape {:?} does not match model shape {:?}", t.shape(), p.value.shape()),
            });
        }
        p.value = t.clone();
        loaded += 1;
    }
    let expected = store.names().filter(|n| n.starts_with(prefix)).count();
    if loaded != expected {
        let missing = store
            .names()
            .find(|n| n.starts_with(prefix) && !source.iter().any(|(s, _)| s == n))
            .unwrap_or(prefix);
        return Err(Error::Load {
            name: missing.to_string(),
            reason: "missing from the pretrained checkpoint".into(),
        });
    }
    Ok(loaded)
}

/// Every `(name, value)` pair of a store.
pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

/// ArcFace fine-tuning of the model variant named by `config.model.ablation`.
///
/// Backbones start from the pretrained entries and stay frozen for epochs
/// `< freeze_backbones_until`; while frozen their outputs are computed once
/// and reused. Precomputed view maps keep the view backbone frozen throughout.
pub fn finetune(
    config: &Config,
    objects: &[LoadedObject],
    classes: usize,
    point_ckpt: Option<&[(String, Tensor)]>,
    view_ckpt: Option<&[(String, Tensor)]>,
) -> std::result::Result<(Model, Vec<EpochRecord>), Box<TrainFailure>> {
    let fail = |error: Error| {
        Box::new(TrainFailure {
            error,
            last_good: ParamStore::new(),
            log: Vec::new(),
        })
    };
    let cfg = config.train_config(Phase::Finetune);
    let samples = train_split(objects);
    let mut model = Model::new(config, classes).map_err(fail)?;
    let setup = (|| -> Result<bool> {
        if samples.is_empty() {
            return Err(Error::contract("no training objects"));
        }
        if model.variant.uses_point() {
            let src = point_ckpt.ok_or_else(|| Error::contract("missing pretrained point backbone"))?;
            load_prefixed(&mut model.store, src, model::POINT_PREFIX)?;
        }
        let precomputed = samples.iter().any(|o| matches!(o.views, ViewInput::Features(_)));
        if model.variant.uses_view() && !precomputed {
            let src = view_ckpt.ok_or_else(|| Error::contract("missing pretrained view backbone"))?;
            load_prefixed(&mut model.store, src, model::VIEW_PREFIX)?;
        }
        Ok(precomputed)
    })();
    let precomputed = setup.map_err(fail)?;
    let freeze_until = cfg.freeze_backbones_until.min(cfg.epochs);
    let cache: Vec<BackboneFeatures> = if freeze_until > 0 {
        par_map(&samples, |o| model.backbone_features(o))
            .into_iter()
            .collect::<Result<_>>()
            .map_err(fail)?
    } else {
        Vec::new()
    };
    let indexed: Vec<(usize, &LoadedObject)> = samples.iter().copied().enumerate().collect();
    let mut store = std::mem::take(&mut model.store);
    let frozen_model = Model {
        store: ParamStore::new(),
        ..model.clone()
    };
    let log = run_epochs(
        &mut store,
        &cfg,
        &indexed,
        |epoch, store| {
            let frozen = epoch < freeze_until;
            store.set_requires_grad(model::POINT_PREFIX, !frozen);
            store.set_requires_grad(model::VIEW_PREFIX, !frozen && !precomputed);
        },
        |tape, &(i, obj), epoch| {
            let d = if epoch < freeze_until {
                frozen_model.descriptor_cached(tape, &cache[i])?
            } else {
                frozen_model.descriptor(tape, &obj.cloud, &obj.views)?
            };
            frozen_model.loss(tape, d, obj.label)
        },
    );
    store.set_requires_grad(model::POINT_PREFIX, true);
    store.set_requires_grad(model::VIEW_PREFIX, true);
    let log = log?;
    model.store = store;
    Ok((model, log))
}

/// Writes the parameters, `config.txt` and `log.tsv` into `dir`.
pub fn write_checkpoint_dir(dir: impl AsRef<Path>, store: &ParamStore, config: &Config, log: &[EpochRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(store, dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = dir.join(LOG_FILE);
    fs::write(&log_path, epoch_log_tsv(log)).map_err(|e| Error::io(&log_path, e))
}

/// Test objects with the input reduced to `setting` along `axis`. The full
/// setting passes inputs through untouched.
pub fn reduce_inputs(objects: &[LoadedObject], axis: SweepAxis, setting: usize) -> Result<Vec<LoadedObject>> {
    objects
        .iter()
        .map(|o| {
            let mut r = o.clone();
            match axis {
                SweepAxis::Views if setting < o.views.num_views() => {
                    r.views = match &o.views {
                        ViewInput::Images(v) => ViewInput::Images(v.first_views(setting)?),
                        ViewInput::Features(t) => {
                            let s = t.shape();
                            let per = s[1..].iter().product::<usize>();
                            let mut shape = s.to_vec();
                            shape[0] = setting;
                            ViewInput::Features(Tensor::new(shape, t.data()[..setting * per].to_vec())?)
                        }
                    };
                }
                SweepAxis::Points if setting < o.cloud.len() => {
                    let keep = farthest_point_sample(o.cloud.points(), setting)?;
                    r.cloud = o.cloud.select(&keep);
                }
                _ => {}
            }
            Ok(r)
        })
        .collect()
}

/// Micro mAP of the test split under each reduced input setting.
pub fn sweep(model: &Model, objects: &[LoadedObject], axis: SweepAxis, grid: &[usize]) -> Result<Vec<SweepRow>> {
    let test: Vec<LoadedObject> = objects.iter().filter(|o| o.split == Split::Test).cloned().collect();
    let full = match axis {
        SweepAxis::Views => model.config.data.views,
        SweepAxis::Points => model.config.data.points,
    };
    retrieval::robustness_sweep(grid, full, |g| model.embed_all(&reduce_inputs(&test, axis, g)?))
}

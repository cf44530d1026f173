use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use log::info;
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TraceConfig};
use super::record::{DimRecord, EpochRecord, RunRecord};
use crate::data::{augment, load_dataset, subsample, Dataset, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::nn::{backward_and_step, capture_activations, correct_count, Checkpoint, Mode, Network, Optimizer};
use crate::pca::{effective_dim, fit_variances, flatten_image_batch, sample_rows, CONV_SAMPLE_CAP};
use crate::tensor::Tensor;
use crate::transform::{apply_plan, validate_plan, FitOptions, TransformPlan};

const LOADER_QUEUE: usize = 4;
const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_474d;
const PCA_SALT: u64 = 0x5043_4153;
const TRACE_SALT: u64 = 0x5452_4143;

/// Loads the configured dataset with its validation split and training
/// subset.
pub fn prepare_data(config: &RunConfig, root: impl AsRef<Path>) -> Result<Dataset<f32>> {
    let opts = LoadOptions {
        validation: config.validation_fraction,
        seed: config.seed,
    };
    let data = load_dataset::<f32>(&config.dataset_name(), root, &opts)?;
    match config.train_subset {
        Some(n) => subsample(data, n, config.seed),
        None => Ok(data),
    }
}

/// Accuracy of `net` on `split`, evaluated in batches of `batch_size`.
pub fn evaluate(net: &Network<f32>, split: &Split<f32>, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::dataset("cannot evaluate on an empty split"));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = split.batch(chunk)?;
        let cache = net.forward(&x, Mode::Eval)?;
        correct += correct_count(cache.logits(), &y);
    }
    Ok(correct as f64 / split.len() as f64)
}

/// One pass over `order`, batches prepared on a loader thread. Returns the
/// mean loss and the training accuracy.
fn train_epoch(
    net: &mut Network<f32>,
    opt: &mut Optimizer<f32>,
    split: &Split<f32>,
    order: &[usize],
    config: &RunConfig,
    augment_seed: u64,
) -> Result<(f64, f64)> {
    let policy = config.augmentation;
    let batch_size = config.batch_size;
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<(Tensor<f32>, Vec<usize>)>>(LOADER_QUEUE);
        s.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(augment_seed);
            for chunk in order.chunks(batch_size) {
                let item = split
                    .batch(chunk)
                    .and_then(|(x, y)| Ok((augment(&x, policy, &mut rng)?, y)));
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
        for item in rx {
            let (x, y) = item?;
            let cache = net.forward(&x, Mode::Train)?;
            correct += correct_count(cache.logits(), &y);
            let l = backward_and_step(net, &cache, &y, opt, config.l2)?;
            if !l.is_finite() {
                return Err(Error::numerical(format!("training loss became {l}")));
            }
            loss += l * y.len() as f64;
            seen += y.len();
        }
        Ok((loss / seen as f64, correct as f64 / seen as f64))
    })
}

/// `(layer, width, effective dimensionality)` of each traced layer's input
/// over `images`. Convolution inputs count every pixel as a sample, up to
/// the usual cap.
pub fn measure_effective_dims(
    net: &Network<f32>,
    trace: &TraceConfig,
    images: &Tensor<f32>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(String, usize, usize)>> {
    let n = images.shape()[0];
    let batches = (0..n).step_by(batch_size).map(|start| {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        images.select_rows(&idx).expect("indices in range")
    });
    let names: Vec<&str> = trace.layers.iter().map(String::as_str).collect();
    let captured = capture_activations(net, batches, &names, n)?;
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let h = &captured[name];
        let rows = if h.rank() == 4 {
            sample_rows(&flatten_image_batch(h)?, CONV_SAMPLE_CAP, seed)?
        } else {
            h.clone()
        };
        let width = rows.shape()[1];
        let e = fit_variances(&rows)?;
        out.push((name.to_string(), width, effective_dim(&e, trace.tau)?));
    }
    Ok(out)
}

struct Transform<'a> {
    plan: &'a TransformPlan,
    done: bool,
}

/// Trains one configuration on `data`.
///
/// With a plan, the network is trained for `transform_epoch` epochs,
/// transformed with bases fitted on `pca_samples` training images, then
/// trained for `post_epochs` more. Optimizer state of every changed layer
/// is dropped at the transformation. With `out_dir`, the record and
/// checkpoints go to `out_dir/<run id>/`.
pub fn run(config: &RunConfig, data: &Dataset<f32>, out_dir: Option<&Path>) -> Result<RunRecord> {
    train(config, data, out_dir).map(|(record, _)| record)
}

/// [`run`], also returning the final network.
pub fn train(config: &RunConfig, data: &Dataset<f32>, out_dir: Option<&Path>) -> Result<(RunRecord, Network<f32>)> {
    config.validate()?;
    let mut net = config.architecture.build::<f32>(config.seed)?;
    if data.train.image_shape() != net.input_shape() {
        return Err(Error::config(format!(
            "{} expects {:?} images but {} has {:?}",
            config.architecture,
            net.input_shape(),
            data.name,
            data.train.image_shape()
        )));
    }
    if let Some(plan) = &config.plan {
        validate_plan(&net, plan)?;
    }
    if let Some(trace) = &config.trace {
        for layer in &trace.layers {
            net.require(layer)?;
        }
    }
    if config.early_stopping.is_some() && data.val.is_none() {
        return Err(Error::config("early stopping needs a validation split"));
    }
    let run_id = config.run_id();
    let run_dir: Option<PathBuf> = out_dir.map(|d| d.join(&run_id));
    if let Some(dir) = &run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let checkpoint_dir = run_dir.as_deref().filter(|_| config.checkpoints);

    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let trace_images = match &config.trace {
        Some(t) => {
            let n = t.samples.min(data.train.len());
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(config.seed ^ TRACE_SALT), data.train.len(), n).into_vec();
            idx.sort_unstable();
            Some(data.train.images.select_rows(&idx)?)
        }
        None => None,
    };

    let mut record = RunRecord {
        run_id: run_id.clone(),
        config: config.clone(),
        epochs: Vec::new(),
        dims: Vec::new(),
        transform_epoch: None,
        effective_dims: BTreeMap::new(),
        wall_time: Vec::new(),
    };
    let mut transform = config.plan.as_ref().map(|plan| Transform { plan, done: false });

    let trace = |net: &Network<f32>, epoch: usize, train_acc: Option<f64>, val_acc: Option<f64>, dims: &mut Vec<DimRecord>| -> Result<()> {
        if let (Some(t), Some(images)) = (&config.trace, &trace_images) {
            for (layer, width, effective_dim) in measure_effective_dims(net, t, images, config.eval_batch_size, config.seed ^ epoch as u64)? {
                info!("{} epoch {epoch}: '{layer}' input {effective_dim}/{width} effective dimensions", config.run_id());
                dims.push(DimRecord {
                    epoch,
                    layer,
                    width,
                    effective_dim,
                    train_acc,
                    val_acc,
                });
            }
        }
        Ok(())
    };
    if config.trace.as_ref().is_some_and(|t| t.initial) {
        trace(&net, 0, None, None, &mut record.dims)?;
    }

    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        if let Some(t) = transform.as_mut().filter(|t| !t.done && t.plan.transform_epoch == epoch) {
            net = transform_network(net, &mut opt, t.plan, data, config, &mut rng, epoch, checkpoint_dir, &mut record)?;
            t.done = true;
        }
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let augment_seed = config.seed ^ AUGMENT_SALT ^ ((epoch as u64) << 32);
        let (train_loss, train_acc) = train_epoch(&mut net, &mut opt, &data.train, &order, config, augment_seed)?;
        let val_acc = data.val.as_ref().map(|v| evaluate(&net, v, config.eval_batch_size)).transpose()?;
        let test_acc = evaluate(&net, &data.test, config.eval_batch_size)?;
        let counts = net.count_params();
        let transformed = transform.as_ref().is_some_and(|t| t.done);
        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_acc,
            test_acc,
            trainable_params: counts.trainable,
            total_params: counts.total,
            learning_rate: lr,
            transformed: transformed as u8,
        });
        trace(&net, epoch + 1, Some(train_acc), val_acc, &mut record.dims)?;
        record.wall_time.push(started.elapsed().as_secs_f64());
        info!(
            "{run_id} epoch {}/{}: loss {train_loss:.4} train {:.4} val {} test {test_acc:.4} params {}",
            epoch + 1,
            config.epochs,
            train_acc,
            val_acc.map_or("-".to_string(), |v| format!("{v:.4}")),
            counts.trainable
        );

        if let (Some(patience), Some(v)) = (config.early_stopping, val_acc) {
            if transform.is_none() || transformed {
                if v > best_val {
                    best_val = v;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        info!("{run_id}: early stop after epoch {}", epoch + 1);
                        break;
                    }
                }
            }
        }
    }
    if let Some(t) = transform.as_mut().filter(|t| !t.done) {
        let epoch = record.epochs.len();
        net = transform_network(net, &mut opt, t.plan, data, config, &mut rng, epoch, checkpoint_dir, &mut record)?;
    }

    if let Some(dir) = checkpoint_dir {
        let ckpt = Checkpoint {
            network: net,
            optimizer: Some(opt),
            epoch: record.epochs.len(),
            rng: Some(rng),
        };
        ckpt.save(dir.join("final.pcnc"))?;
        net = ckpt.network;
    }
    if let Some(dir) = &run_dir {
        record.save(dir)?;
    }
    Ok((record, net))
}

#[allow(clippy::too_many_arguments)]
fn transform_network(
    net: Network<f32>,
    opt: &mut Optimizer<f32>,
    plan: &TransformPlan,
    data: &Dataset<f32>,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    checkpoint_dir: Option<&Path>,
    record: &mut RunRecord,
) -> Result<Network<f32>> {
    let mut ckpt = Checkpoint {
        network: net,
        optimizer: Some(opt.clone()),
        epoch,
        rng: Some(rng.clone()),
    };
    if let Some(dir) = checkpoint_dir {
        ckpt.save(dir.join("parent.pcnc"))?;
    }
    let n = config.pca_samples.min(data.train.len());
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(config.seed ^ PCA_SALT), data.train.len(), n).into_vec();
    idx.sort_unstable();
    let samples = data.train.images.select_rows(&idx)?;
    let opts = FitOptions {
        dense_budget: n,
        conv_cap: CONV_SAMPLE_CAP,
        batch_size: config.eval_batch_size,
        seed: config.seed,
    };
    let t = apply_plan(&ckpt.network, plan, &samples, &opts)?;
    for name in &t.changed {
        opt.reset_layer(name);
    }
    let before = ckpt.network.count_params();
    let after = t.network.count_params();
    info!(
        "{}: transformed after epoch {epoch}, trainable parameters {} -> {}",
        record.run_id, before.trainable, after.trainable
    );
    record.transform_epoch = Some(epoch);
    record.effective_dims = t.effective_dims();
    ckpt.network = t.network;
    if let Some(dir) = checkpoint_dir {
        ckpt.optimizer = Some(opt.clone());
        ckpt.save(dir.join("transformed.pcnc"))?;
    }
    Ok(ckpt.network)
}

/// Loads the data for `config` from `data_root` and trains it.
pub fn run_from_root(config: &RunConfig, data_root: impl AsRef<Path>, out_dir: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let data = prepare_data(config, data_root)?;
    run(config, &data, out_dir)
}

//! The two-phase training loop: dataset-aware softmax until the fusion
//! event at floor(T2·total_steps), then dataset-agnostic softmax over the
//! fused proxy set. Owns the SGD-with-momentum optimizer, the milestone
//! LR schedule, and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{apply_merge, build_merge_map, count_active, top1_report, FusionConfig, MergeMap, SimilarityReport};
use crate::linalg::Mat;
use crate::loss::{
    classification_loss, domain_adaptation_loss, DomainHeadParams, LossConfig, ProxyMatrix,
    SoftmaxMode,
};
use crate::net::{backward, forward, init_params, NetParams};
use crate::synthetic::ShardSet;

/// Training regime: how the softmax pool is constrained over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// All classes in one pool from step 0; conflicts never merge
    /// (equivalent to fusion with T1 > 1).
    Naive,
    /// Dataset-aware softmax for the entire run; no fusion event.
    Dail,
    /// Dataset-aware until the fusion event, then dataset-agnostic.
    FaceFusion,
}

impl Method {
    pub fn has_fusion_event(self) -> bool {
        matches!(self, Method::FaceFusion)
    }

    pub fn softmax_mode(self, fusion_done: bool) -> SoftmaxMode {
        match self {
            Method::Naive => SoftmaxMode::Agnostic,
            Method::Dail => SoftmaxMode::DatasetAware,
            Method::FaceFusion => {
                if fusion_done {
                    SoftmaxMode::Agnostic
                } else {
                    SoftmaxMode::DatasetAware
                }
            }
        }
    }

    pub fn phase_name(self, fusion_done: bool) -> &'static str {
        match self.softmax_mode(fusion_done) {
            SoftmaxMode::DatasetAware => "aware",
            SoftmaxMode::Agnostic => "agnostic",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Naive => write!(f, "naive"),
            Method::Dail => write!(f, "dail"),
            Method::FaceFusion => write!(f, "facefusion"),
        }
    }
}

/// Every knob of a run, serializable as one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Each milestone divides the LR by 10 from that step on.
    pub lr_milestones: Vec<u64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
    /// Shard-set file the run trains on.
    pub data: Option<PathBuf>,
    pub metrics_every: u64,
    pub checkpoint_every: Option<u64>,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // desk-scale defaults: milestones sit at the same fractions of the
        // schedule as the reference regime (1/6, ~0.29, ~0.42)
        TrainConfig {
            method: Method::FaceFusion,
            total_steps: 20_000,
            batch_size: 256,
            base_lr: 0.005,
            lr_milestones: vec![3_333, 5_833, 8_333],
            momentum: 0.9,
            weight_decay: 5e-4,
            hidden_dims: vec![64],
            embed_dim: 32,
            seed: 1,
            data: None,
            metrics_every: 50,
            checkpoint_every: None,
            loss: LossConfig {
                grl_active_after: Some(3_333),
                ..LossConfig::default()
            },
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every violated key instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.total_steps == 0 {
            problems.push("total_steps must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.base_lr <= 0.0 {
            problems.push(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            problems.push("lr_milestones must be strictly increasing".to_string());
        }
        if self.lr_milestones.iter().any(|&m| m >= self.total_steps) {
            problems.push("lr_milestones must all be < total_steps".to_string());
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be >= 1".to_string());
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            problems.push("hidden_dims entries must be >= 1".to_string());
        }
        if self.metrics_every == 0 {
            problems.push("metrics_every must be >= 1".to_string());
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be >= 1 when set".to_string());
        }
        problems.extend(self.loss.validate());
        problems.extend(self.fusion.validate());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// LR after all milestone drops at or before `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= step).count();
        self.base_lr / 10f64.powi(drops as i32)
    }

    /// The one-shot fusion event step: floor(T2 × total_steps).
    pub fn fusion_step(&self) -> u64 {
        (self.fusion.t2 * self.total_steps as f64).floor() as u64
    }
}

/// Momentum buffers, shaped like the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    pub net_weights: Vec<Mat>,
    pub net_biases: Vec<Vec<f64>>,
    pub proxies: Mat,
    pub head_weight: Mat,
    pub head_bias: Vec<f64>,
}

impl Momentum {
    fn zeros(net: &NetParams, proxies: &ProxyMatrix, head: &DomainHeadParams) -> Self {
        Momentum {
            net_weights: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            net_biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            proxies: Mat::zeros(proxies.n_classes(), proxies.dim()),
            head_weight: Mat::zeros(head.weight.rows(), head.weight.cols()),
            head_bias: vec![0.0; head.bias.len()],
        }
    }
}

/// Serializable RNG position: enough to resume the exact stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full mutable training state; checkpoints round-trip it bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub fusion_done: bool,
    pub net: NetParams,
    pub proxies: ProxyMatrix,
    pub head: DomainHeadParams,
    pub momentum: Momentum,
    pub merge: MergeMap,
    pub rng: RngState,
}

impl TrainState {
    /// Fresh state for a config + data pair.
    pub fn init(cfg: &TrainConfig, data: &ShardSet) -> TrainState {
        let input_dim = data.bank.dim;
        let net = init_params(input_dim, &cfg.hidden_dims, cfg.embed_dim, cfg.seed);
        let proxies = ProxyMatrix::init_random(
            data.dataset_of_classes(),
            cfg.embed_dim,
            cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        let head = DomainHeadParams::init(
            cfg.embed_dim,
            data.shards.len(),
            cfg.seed ^ 0x5851_f42d_4c95_7f2d,
        );
        let momentum = Momentum::zeros(&net, &proxies, &head);
        let merge = MergeMap::identity(proxies.n_classes());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xBA7C4);
        TrainState {
            step: 0,
            fusion_done: false,
            net,
            proxies,
            head,
            momentum,
            merge,
            rng: RngState::capture(&rng),
        }
    }
}

/// Flattened training samples across all shards.
pub struct SampleIndex {
    pub features: Mat,
    pub class_global: Vec<u32>,
    pub dataset: Vec<u32>,
}

impl SampleIndex {
    pub fn build(data: &ShardSet) -> Result<SampleIndex> {
        let n: usize = data.shards.iter().map(|s| s.samples.len()).sum();
        if n == 0 {
            return Err(Error::Contract("make_batch: shards contain no samples".into()));
        }
        let dim = data.bank.dim;
        let offsets = data.class_offsets();
        let mut features = Mat::zeros(n, dim);
        let mut class_global = Vec::with_capacity(n);
        let mut dataset = Vec::with_capacity(n);
        let mut row = 0;
        for (si, shard) in data.shards.iter().enumerate() {
            for s in &shard.samples {
                features.row_mut(row).copy_from_slice(&s.feature);
                class_global.push(offsets[si] + s.local_class_id);
                dataset.push(shard.dataset_id);
                row += 1;
            }
        }
        Ok(SampleIndex {
            features,
            class_global,
            dataset,
        })
    }

    pub fn len(&self) -> usize {
        self.class_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_global.is_empty()
    }
}

/// Uniform sample over all records; labels go through the merge map so
/// merged classes train their canonical proxy.
pub fn make_batch(
    index: &SampleIndex,
    batch_size: usize,
    merge: &MergeMap,
    rng: &mut ChaCha8Rng,
) -> (Mat, Vec<u32>, Vec<u32>) {
    let n = index.len();
    let dim = index.features.cols();
    let mut features = Mat::zeros(batch_size, dim);
    let mut labels = Vec::with_capacity(batch_size);
    let mut datasets = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let i = rng.gen_range(0..n);
        features.row_mut(b).copy_from_slice(index.features.row(i));
        labels.push(merge.remap(index.class_global[i]));
        datasets.push(index.dataset[i]);
    }
    (features, labels, datasets)
}

/// One per-cadence log line. Wall time never reaches the metrics file and
/// does not take part in equality, so logs and comparisons stay identical
/// across replays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub cls_loss: f64,
    pub dom_loss: f64,
    pub lr: f64,
    pub active_classes: usize,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl PartialEq for MetricsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.phase == other.phase
            && self.cls_loss == other.cls_loss
            && self.dom_loss == other.dom_loss
            && self.lr == other.lr
            && self.active_classes == other.active_classes
    }
}

fn sgd_update(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// One SGD step over net, head, and active proxies.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    features: &Mat,
    labels: &[u32],
    dataset_labels: &[u32],
) -> Result<(f64, f64)> {
    let step = state.step;
    let mode = cfg.method.softmax_mode(state.fusion_done);
    let (embeddings, cache) = forward(&state.net, features)?;
    let cls = classification_loss(&embeddings, &state.proxies, labels, mode, &cfg.loss)?;
    let grl_on = cfg
        .loss
        .grl_active_after
        .map_or(false, |after| step >= after);
    let lambda_eff = if grl_on { cfg.loss.lambda_da } else { 0.0 };
    let dom = domain_adaptation_loss(&embeddings, dataset_labels, &state.head, lambda_eff)?;

    if !cls.loss.is_finite() || !dom.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "cls={} dom={} labels[0..8]={:?}",
                cls.loss,
                dom.loss,
                &labels[..labels.len().min(8)]
            ),
        });
    }

    let mut grad_emb = cls.grad_embeddings;
    grad_emb.axpy(1.0, &dom.grad_embeddings_reversed);
    let (net_grads, _) = backward(&state.net, &cache, &grad_emb)?;

    let lr = cfg.lr_at(step);
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for (li, layer) in state.net.layers.iter_mut().enumerate() {
        sgd_update(
            layer.weight.data_mut(),
            net_grads.layers[li].weight.data(),
            state.momentum.net_weights[li].data_mut(),
            lr,
            mu,
            wd,
        );
        sgd_update(
            &mut layer.bias,
            &net_grads.layers[li].bias,
            &mut state.momentum.net_biases[li],
            lr,
            mu,
            wd,
        );
    }
    sgd_update(
        state.head.weight.data_mut(),
        dom.grad_weight.data(),
        state.momentum.head_weight.data_mut(),
        lr,
        mu,
        wd,
    );
    sgd_update(
        &mut state.head.bias,
        &dom.grad_bias,
        &mut state.momentum.head_bias,
        lr,
        mu,
        wd,
    );
    // proxies: decay applies to the raw vector before renormalization
    for (row, &class) in cls.active_cols.iter().enumerate() {
        let c = class as usize;
        sgd_update(
            state.proxies.vec_mut(c),
            cls.grad_proxies_compact.row(row),
            state.momentum.proxies.row_mut(c),
            lr,
            mu,
            wd,
        );
    }
    state.proxies.renormalize_active();
    Ok((cls.loss, dom.loss))
}

/// Everything a finished run hands back.
pub struct RunOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub similarity_reports: Vec<SimilarityReport>,
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
pub struct RunSink<'a> {
    pub out_dir: Option<&'a Path>,
}

impl RunSink<'_> {
    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        if let Some(dir) = self.out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn fusion_event(
    state: &mut TrainState,
    cfg: &TrainConfig,
    sink: &RunSink,
    reports: &mut Vec<SimilarityReport>,
) -> Result<()> {
    let step = state.step;
    if state.proxies.active_datasets().len() >= 2 {
        let report = top1_report(&state.proxies, step)?;
        let mut hist = Vec::new();
        report.write_histogram(&mut hist)?;
        sink.write(&format!("similarity_hist_step{step}.txt"), &hist)?;
        let mut raw = Vec::new();
        report.write_raw(&mut raw)?;
        sink.write(&format!("similarity_raw_step{step}.txt"), &raw)?;
        reports.push(report);
    }
    let map = build_merge_map(&state.proxies, &cfg.fusion);
    apply_merge(&mut state.proxies, &map)?;
    // stale momentum dies with the merge: canonical rows restart clean
    for group in map.merged_components() {
        for &member in &group {
            state.momentum.proxies.row_mut(member as usize).fill(0.0);
        }
    }
    state.merge = state.merge.compose(&map);
    state.fusion_done = true;
    Ok(())
}

/// Runs a config from a fresh state.
pub fn run(cfg: &TrainConfig, data: &ShardSet, sink: &RunSink) -> Result<RunOutput> {
    cfg.validate()?;
    let state = TrainState::init(cfg, data);
    run_from(cfg, data, state, sink)
}

/// Continues a (possibly checkpointed) state to total_steps.
pub fn run_from(
    cfg: &TrainConfig,
    data: &ShardSet,
    mut state: TrainState,
    sink: &RunSink,
) -> Result<RunOutput> {
    cfg.validate()?;
    let index = SampleIndex::build(data)?;
    let mut rng = state.rng.restore();
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    let fusion_step = cfg.fusion_step();
    let started = Instant::now();
    if state.head.n_datasets() == 1 && cfg.loss.lambda_da > 0.0 && state.step == 0 {
        eprintln!("note: single dataset; domain loss is identically zero");
    }

    let mut metrics_buf = String::new();
    let echo = serde_json::json!({
        "format_version": 1u32,
        "config": cfg.to_toml(),
    });
    metrics_buf.push_str(&echo.to_string());
    metrics_buf.push('\n');

    while state.step < cfg.total_steps {
        let step = state.step;
        if cfg.method.has_fusion_event() {
            let rescan_due = state.fusion_done
                && cfg.fusion.rescan_every.map_or(false, |every| {
                    step > fusion_step && (step - fusion_step) % every == 0
                });
            if (!state.fusion_done && step == fusion_step) || rescan_due {
                fusion_event(&mut state, cfg, sink, &mut reports)?;
            }
        }
        let (features, labels, datasets) = make_batch(&index, cfg.batch_size, &state.merge, &mut rng);
        let (cls_loss, dom_loss) = train_step(&mut state, cfg, &features, &labels, &datasets)?;
        state.step += 1;
        state.rng = RngState::capture(&rng);

        if state.step % cfg.metrics_every == 0 || state.step == cfg.total_steps {
            let rec = MetricsRecord {
                step: state.step,
                phase: cfg.method.phase_name(state.fusion_done).to_string(),
                cls_loss,
                dom_loss,
                lr: cfg.lr_at(step),
                active_classes: count_active(&state.proxies),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            metrics_buf.push_str(&serde_json::to_string(&rec).expect("metrics serialize"));
            metrics_buf.push('\n');
            metrics.push(rec);
        }
        if let Some(every) = cfg.checkpoint_every {
            if state.step % every == 0 && state.step < cfg.total_steps {
                let bytes = crate::checkpoint::checkpoint_to_bytes(&state, &cfg.to_toml());
                sink.write(&format!("checkpoint_step{}.ckpt", state.step), &bytes)?;
            }
        }
    }

    let bytes = crate::checkpoint::checkpoint_to_bytes(&state, &cfg.to_toml());
    sink.write("checkpoint_final.ckpt", &bytes)?;
    sink.write("metrics.jsonl", metrics_buf.as_bytes())?;
    Ok(RunOutput {
        state,
        metrics,
        similarity_reports: reports,
    })
}

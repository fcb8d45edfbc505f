//! Experiment orchestration: TOML configuration, data preparation, shared
//! pre-trained checkpoints, method runs and result files.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.json` | config, its hash, derived seeds, status, output hashes |
//! | `dataset.jsonl` | the world: header line plus one image record per line |
//! | `split.json` | category partition and the index lists of every subset |
//! | `checkpoints/` | pre-trained agents (agent JSON) and their hash index |
//! | `rounds_{method}.jsonl` | one round report per line |
//! | `likelihood.csv` | `method,agent,round,joint_loglik,acceptance_rate` |
//! | `metrics.csv` | `agent,method,slice,metric,value` |
//! | `cf1_matrix.csv` | per-category F1 of every decoded agent |
//! | `verify.json` | chain and detailed-balance diagnostics (`mcmc-verify`) |
//!
//! Everything except the round streams' `wallclock_ms` is a pure function
//! of the config.

mod output;
pub mod pretrain;
pub mod verify;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentId, AgentParams, Caption, Observation};
use crate::baselines::{
    ensemble_decode, finetune_round, kd_round, kd_samples, packllm_decode, single_greedy, weight_average, DecodeCost,
};
use crate::dataset::{
    build_world, category_counts, read_dataset, route_images, split_categories, subsample, write_dataset, ImageRecord,
    SplitResult, WorldSpec,
};
use crate::error::{Error, Result};
use crate::game::{evaluate_joint_loglik, init_game, perceive_mean, play_round, write_reports, GameConfig, RoundReport};
use crate::learning::ReplayBuffer;
use crate::metrics::{bleu4, match_categories, CategoryCounts};

pub use output::{read_metrics, write_cf1_matrix, write_likelihood, write_metrics, LikelihoodRow, MetricRow};
pub use pretrain::{fit_backbone, pretrain_agent, Backbone, PretrainConfig, Pretrained};
pub use verify::{run_verification, VerifyConfig, VerifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Joint caption likelihood over the rounds of the game.
    Exp1Likelihood,
    /// Category-level comparison against the fusion baselines.
    #[default]
    Exp2Category,
    /// Chain checks on the enumerable verification world.
    McmcVerify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pretrain,
    Finetune,
    Mhcg,
    Kd,
    Ensemble,
    Packllm,
    WeightAverage,
    Topline,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Pretrain,
        Method::Topline,
        Method::WeightAverage,
        Method::Ensemble,
        Method::Packllm,
        Method::Finetune,
        Method::Kd,
        Method::Mhcg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Finetune => "finetune",
            Method::Mhcg => "mhcg",
            Method::Kd => "kd",
            Method::Ensemble => "ensemble",
            Method::Packllm => "packllm",
            Method::WeightAverage => "weight-average",
            Method::Topline => "topline",
        }
    }
}

/// Which images a distilling student sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdData {
    /// The teacher's own pre-training images.
    #[default]
    TeacherDomain,
    /// The game pool.
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub methods: Vec<Method>,
    /// Dataset JSON-lines file; the desk default world is generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    /// Game pool size, drawn from the training part of the others subset.
    pub pool_size: usize,
    /// Every `eval_every`-th record is held out for evaluation.
    pub eval_every: usize,
    pub packllm_lambda: f64,
    pub kd_data: KdData,
    pub pretrain: PretrainConfig,
    /// `game.seed` is mixed into the derived game seed. Keys given here
    /// override [`desk_game`], not the generic game defaults.
    #[serde(deserialize_with = "desk_game_overrides")]
    pub game: GameConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::default(),
            methods: Method::ALL.to_vec(),
            world: None,
            out_dir: PathBuf::from("runs/default"),
            seed: 7,
            pool_size: 600,
            eval_every: 5,
            packllm_lambda: 1.0,
            kd_data: KdData::default(),
            pretrain: PretrainConfig::default(),
            game: desk_game(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Lays the given keys over `desk_game()`, recursing into tables.
fn desk_game_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<GameConfig, D::Error> {
    fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
        match (base, patch) {
            (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
                for (k, v) in p {
                    match b.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            b.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(desk_game()).map_err(D::Error::custom)?;
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(|e| D::Error::custom(format!("game: {e}")))
}

/// Game settings for the desk world: the default rounds, epochs, batch
/// size and replay weights, a much larger text-decoder step and near-frozen
/// encoders. With image-encoder steps of 1e-5 or more the encoder drifts
/// toward the encodings of the current, partly wrong captions and every
/// agent collapses to filler captions within 30 rounds.
pub fn desk_game() -> GameConfig {
    let mut game = GameConfig::default();
    game.learn.lr_xi = 0.2;
    game.learn.lr_phi = 1e-6;
    game.learn.lr_psi = 1e-6;
    game.learn.lr_theta = 1e-6;
    game
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && self.experiment != ExperimentId::McmcVerify {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.experiment == ExperimentId::Exp1Likelihood
            && !self.methods.iter().any(|m| matches!(m, Method::Mhcg | Method::Finetune))
        {
            return Err(Error::Config("exp1-likelihood needs mhcg or finetune among the methods".into()));
        }
        if self.pool_size == 0 || self.eval_every < 2 {
            return Err(Error::Config("pool_size must be positive and eval_every at least 2".into()));
        }
        if !(self.packllm_lambda >= 0.0 && self.packllm_lambda.is_finite()) {
            return Err(Error::Config("packllm_lambda must be finite and non-negative".into()));
        }
        if i64::try_from(self.seed).is_err() || i64::try_from(self.game.seed).is_err() {
            return Err(Error::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        if let Some(p) = &self.world {
            if !p.exists() {
                return Err(Error::Config(format!("world file {} does not exist", p.display())));
            }
        }
        self.pretrain.validate()?;
        self.game.validate()?;
        self.verify.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Parses a TOML config. Missing keys take their defaults; unknown keys are
/// rejected with the offending key and its line in the message.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable child seed: the first eight bytes of `SHA-256(master ‖ tag)`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes")) >> 1
}

/// Every seed a run uses, by name.
pub fn seeds(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    let s = config.seed;
    let mut m = BTreeMap::new();
    for tag in ["world", "pool", "backbone-A", "backbone-B", "backbone-topline", "pretrain-A", "pretrain-B", "pretrain-topline", "kd", "verify"] {
        m.insert(tag.to_string(), derive_seed(s, tag));
    }
    m.insert("game".into(), derive_seed(s ^ config.game.seed, "game"));
    m
}

/// Record index lists of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: SplitResult,
    pub eval: Vec<usize>,
    pub train_a: Vec<usize>,
    pub train_b: Vec<usize>,
    pub train_all: Vec<usize>,
    pub pool: Vec<usize>,
}

/// A world with its split and the run's subsets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: WorldSpec,
    pub records: Vec<ImageRecord>,
    pub subsets: SplitManifest,
}

impl Prepared {
    pub fn observations(&self, idx: &[usize]) -> Vec<Observation> {
        idx.iter().map(|&i| self.records[i].observation.clone()).collect()
    }

    pub fn pairs(&self, idx: &[usize]) -> Vec<(Observation, Caption)> {
        idx.iter().map(|&i| (self.records[i].observation.clone(), self.records[i].caption.clone())).collect()
    }

    /// `(own categories incl. common, counterpart-only categories)` of an agent.
    pub fn sides(&self, id: AgentId) -> (Vec<usize>, Vec<usize>) {
        let p = &self.subsets.split.partition;
        let (own, other) = match id {
            AgentId::A => (&p.a_only, &p.b_only),
            AgentId::B => (&p.b_only, &p.a_only),
        };
        let mut own_side = vec![p.common];
        own_side.extend(own);
        (own_side, other.clone())
    }
}

/// Loads or generates the world, splits it and carves out evaluation,
/// pre-training and pool subsets.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (spec, records, split) = match &config.world {
        Some(path) => {
            let file = fs::File::open(path)?;
            let (spec, mut records) = read_dataset(BufReader::new(file))?;
            let partition = split_categories(&spec, &category_counts(&spec, &records))?;
            let split = route_images(&mut records, &partition);
            (spec, records, split)
        }
        None => {
            let spec = WorldSpec::desk_default(derive_seed(config.seed, "world"));
            let (records, split) = build_world(&spec)?;
            (spec, records, split)
        }
    };
    let held_out = |i: &usize| i.is_multiple_of(config.eval_every);
    let eval: Vec<usize> = (0..records.len()).filter(held_out).collect();
    let train = |v: &[usize]| v.iter().copied().filter(|i| !held_out(i)).collect::<Vec<_>>();
    let train_a = train(&split.a);
    let train_b = train(&split.b);
    let train_all: Vec<usize> = (0..records.len()).filter(|i| !held_out(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pool"));
    let pool = subsample(&train(&split.others), config.pool_size, &mut rng);
    for (name, v) in [("a", &train_a), ("b", &train_b), ("others", &pool), ("evaluation", &eval)] {
        if v.is_empty() {
            return Err(Error::Config(format!("the {name} subset of this world is empty")));
        }
    }
    Ok(Prepared { spec, records, subsets: SplitManifest { split, eval, train_a, train_b, train_all, pool } })
}

/// Pre-trained agents shared by every method of a run.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub a: AgentParams,
    pub b: AgentParams,
    pub topline: AgentParams,
    /// File name → SHA-256 of its bytes.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    key: String,
    files: BTreeMap<String, String>,
}

const CHECKPOINTS: [&str; 3] = ["A.json", "B.json", "topline.json"];

fn checkpoint_key(config: &ExperimentConfig, prepared: &Prepared) -> Result<String> {
    let key = serde_json::json!({
        "pretrain": config.pretrain,
        "seed": config.seed,
        "world": prepared.spec,
        "eval_every": config.eval_every,
    });
    Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes()))
}

/// Returns the checkpoints under `dir/checkpoints`, pre-training them first
/// unless a cache for the same world and pre-training settings exists.
/// Cached files must match their recorded hashes.
pub fn pretrain_stage(config: &ExperimentConfig, prepared: &Prepared, dir: &Path) -> Result<Checkpoints> {
    let ck = dir.join("checkpoints");
    let key = checkpoint_key(config, prepared)?;
    let index_path = ck.join("index.json");
    if let Ok(text) = fs::read_to_string(&index_path) {
        let index: CheckpointIndex = serde_json::from_str(&text)?;
        if index.key == key {
            return load_checkpoints(&ck, &index);
        }
        log::info!("checkpoint cache is for other settings; pre-training again");
    }
    let s = seeds(config);
    let dims = prepared.spec.dims(config.pretrain.latent)?;
    let everything = prepared.pairs(&prepared.subsets.train_all);
    let fit = |who: &str, id: AgentId, data: &[(Observation, Caption)]| -> Result<AgentParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(s[&format!("backbone-{who}")]);
        let backbone = fit_backbone(dims, &everything, &config.pretrain, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s[&format!("pretrain-{who}")]);
        Ok(pretrain_agent(id, &backbone, data, &config.pretrain, &mut rng)?.agent)
    };
    let a = fit("A", AgentId::A, &prepared.pairs(&prepared.subsets.train_a))?;
    let b = fit("B", AgentId::B, &prepared.pairs(&prepared.subsets.train_b))?;
    let topline = fit("topline", AgentId::A, &everything)?;
    fs::create_dir_all(&ck)?;
    let mut files = BTreeMap::new();
    for (name, agent) in CHECKPOINTS.iter().zip([&a, &b, &topline]) {
        let json = agent.to_json()?;
        fs::write(ck.join(name), &json)?;
        files.insert(name.to_string(), sha256_hex(json.as_bytes()));
    }
    fs::write(&index_path, serde_json::to_string_pretty(&CheckpointIndex { key, files: files.clone() })?)?;
    Ok(Checkpoints { a, b, topline, hashes: files })
}

fn load_checkpoints(ck: &Path, index: &CheckpointIndex) -> Result<Checkpoints> {
    let mut agents = Vec::with_capacity(3);
    for name in CHECKPOINTS {
        let expected = index
            .files
            .get(name)
            .ok_or_else(|| Error::Verification(format!("checkpoint index lacks {name}")))?;
        let bytes = fs::read(ck.join(name))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Verification(format!("checkpoint {name} does not match its recorded hash")));
        }
        agents.push(AgentParams::from_json(&String::from_utf8_lossy(&bytes))?);
    }
    let topline = agents.pop().expect("three checkpoints");
    let b = agents.pop().expect("three checkpoints");
    let a = agents.pop().expect("three checkpoints");
    Ok(Checkpoints { a, b, topline, hashes: index.files.clone() })
}

/// Greedy captions of one agent for every observation, perceiving through
/// the image-encoder mean.
pub fn decode_single(agent: &AgentParams, obs: &[Observation], cost: &mut DecodeCost) -> Result<Vec<Caption>> {
    obs.iter().map(|o| Ok(single_greedy(agent, &perceive_mean(agent, o)?, cost))).collect()
}

fn decode_pair(
    a: &AgentParams,
    b: &AgentParams,
    obs: &[Observation],
    packllm: Option<f64>,
    cost: &mut DecodeCost,
) -> Result<Vec<Caption>> {
    obs.iter()
        .map(|o| {
            let (za, zb) = (perceive_mean(a, o)?, perceive_mean(b, o)?);
            match packllm {
                Some(lambda) => packllm_decode::<ChaCha8Rng>([a, b], [&za, &zb], lambda, None, cost),
                None => ensemble_decode::<ChaCha8Rng>([a, b], [&za, &zb], [0.5, 0.5], None, cost),
            }
        })
        .collect()
}

/// Captions some method produced for the evaluation set.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub method: Method,
    /// `A`, `B`, `AB` for two-agent methods, `all` for the topline.
    pub agent: String,
    pub captions: Vec<Caption>,
    pub cost: DecodeCost,
}

/// Category counts of `captions` against the annotations of `records[idx]`.
pub fn caption_counts(prepared: &Prepared, idx: &[usize], captions: &[Caption]) -> CategoryCounts {
    let lexicon = prepared.spec.lexicon();
    let mut counts = CategoryCounts::zeros(prepared.spec.categories.len());
    for (&i, c) in idx.iter().zip(captions) {
        counts.record(&match_categories(c, &lexicon), &prepared.records[i].categories);
    }
    counts
}

/// Mean BLEU@4 against each image's ground-truth caption.
pub fn mean_bleu(prepared: &Prepared, idx: &[usize], captions: &[Caption]) -> Result<f64> {
    let mut total = 0.0;
    for (&i, c) in idx.iter().zip(captions) {
        total += bleu4(c, std::slice::from_ref(&prepared.records[i].caption))?;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Round reports of one game, preceded by the pre-game evaluation.
#[derive(Debug, Clone)]
pub struct GameRun {
    pub initial: (f64, f64),
    pub reports: Vec<RoundReport>,
    pub a: AgentParams,
    pub b: AgentParams,
}

/// Plays the game from the checkpoints on the pool, scoring every round on
/// the evaluation set. `finetune` accepts every proposal.
pub fn run_game(config: &ExperimentConfig, prepared: &Prepared, ck: &Checkpoints, finetune: bool) -> Result<GameRun> {
    let mut game = config.game.clone();
    game.seed = seeds(config)["game"];
    let eval = prepared.observations(&prepared.subsets.eval);
    let initial = evaluate_joint_loglik(&ck.a, &ck.b, &eval)?;
    let mut state = init_game(
        game,
        ck.a.clone(),
        ck.b.clone(),
        prepared.observations(&prepared.subsets.pool),
        &prepared.pairs(&prepared.subsets.train_a),
        &prepared.pairs(&prepared.subsets.train_b),
    )?;
    state.set_eval_observations(eval)?;
    let mut reports = Vec::with_capacity(state.config.rounds);
    for r in 0..state.config.rounds {
        let report = if finetune { finetune_round(&mut state)? } else { play_round(&mut state)? };
        log::info!(
            "{} round {}: accept A {:.3} B {:.3}, loglik A {:.3} B {:.3}",
            if finetune { "finetune" } else { "mhcg" },
            r + 1,
            report.acceptance_rate_a,
            report.acceptance_rate_b,
            report.joint_loglik_a,
            report.joint_loglik_b
        );
        reports.push(report);
    }
    let (a, b) = state.into_agents();
    Ok(GameRun { initial, reports, a, b })
}

/// Distillation in both directions from the frozen pre-trained agents:
/// per round, `epochs` passes of A learning from B, then the same for B.
pub fn run_kd(config: &ExperimentConfig, prepared: &Prepared, ck: &Checkpoints) -> Result<(AgentParams, AgentParams)> {
    let learn = &config.game.learn;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds(config)["kd"]);
    let own = [prepared.pairs(&prepared.subsets.train_a), prepared.pairs(&prepared.subsets.train_b)];
    let buffers = [
        ReplayBuffer::from_pretraining(&ck.a, &own[0], learn.buffer_capacity, &mut rng)?,
        ReplayBuffer::from_pretraining(&ck.b, &own[1], learn.buffer_capacity, &mut rng)?,
    ];
    let images = match config.kd_data {
        KdData::TeacherDomain => [
            prepared.observations(&prepared.subsets.train_b),
            prepared.observations(&prepared.subsets.train_a),
        ],
        KdData::Pool => {
            let pool = prepared.observations(&prepared.subsets.pool);
            [pool.clone(), pool]
        }
    };
    let teachers = [&ck.b, &ck.a];
    let mut students = [ck.a.clone(), ck.b.clone()];
    for round in 0..config.game.rounds {
        for i in 0..2 {
            let samples = kd_samples(&students[i], teachers[i], &images[i], &mut rng)?;
            for _ in 0..learn.epochs {
                let trace = kd_round(&mut students[i], &samples, &buffers[i], learn, &mut rng)?;
                log::debug!("kd round {} student {i}: KL {:.4} -> {:.4}", round + 1, trace.initial(), trace.last());
            }
        }
    }
    let [a, b] = students;
    Ok((a, b))
}

/// Manifest status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub experiment: ExperimentId,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Output file → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub checkpoints: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Runs the configured experiment into `config.out_dir`.
///
/// `manifest.json` is written before any work starts and rewritten at the
/// end, with status `failed` and the error message if anything failed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Manifest> {
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: config.experiment,
        status: RunStatus::Running,
        error: None,
        config_sha256: config.hash()?,
        config: config.clone(),
        seeds: seeds(config),
        outputs: BTreeMap::new(),
        checkpoints: BTreeMap::new(),
    };
    let dir = config.out_dir.clone();
    manifest.write(&dir)?;
    let result = config.validate().and_then(|_| match config.experiment {
        ExperimentId::McmcVerify => run_verify_experiment(config, &dir, &mut manifest),
        _ => run_fusion(config, &dir, &mut manifest),
    });
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Ok;
            manifest.write(&dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

fn record(manifest: &mut Manifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn run_verify_experiment(config: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let report = run_verification(&config.verify, manifest.seeds["verify"])?;
    record(manifest, dir, "verify.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    if !report.pass {
        return Err(Error::Verification(report.summary()));
    }
    Ok(())
}

fn run_fusion(config: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let prepared = prepare(config)?;
    let mut data = Vec::new();
    write_dataset(&mut data, &prepared.spec, &prepared.records)?;
    record(manifest, dir, "dataset.jsonl", &data)?;
    record(manifest, dir, "split.json", serde_json::to_string_pretty(&prepared.subsets)?.as_bytes())?;
    manifest.write(dir)?;

    let ck = pretrain_stage(config, &prepared, dir)?;
    manifest.checkpoints = ck.hashes.clone();
    manifest.write(dir)?;

    let eval_idx = prepared.subsets.eval.clone();
    let eval = prepared.observations(&eval_idx);
    let mut decoded: Vec<Decoded> = Vec::new();
    let mut likelihood: Vec<LikelihoodRow> = Vec::new();
    let single = |method: Method, agent: &str, params: &AgentParams, out: &mut Vec<Decoded>| -> Result<()> {
        let mut cost = DecodeCost::default();
        let captions = decode_single(params, &eval, &mut cost)?;
        out.push(Decoded { method, agent: agent.to_string(), captions, cost });
        Ok(())
    };
    for &method in Method::ALL.iter().filter(|m| config.methods.contains(m)) {
        log::info!("running {}", method.name());
        match method {
            Method::Pretrain => {
                single(method, "A", &ck.a, &mut decoded)?;
                single(method, "B", &ck.b, &mut decoded)?;
            }
            Method::Topline => single(method, "all", &ck.topline, &mut decoded)?,
            Method::WeightAverage => single(method, "AB", &weight_average(&ck.a, &ck.b)?, &mut decoded)?,
            Method::Ensemble | Method::Packllm => {
                let lambda = (method == Method::Packllm).then_some(config.packllm_lambda);
                let mut cost = DecodeCost::default();
                let captions = decode_pair(&ck.a, &ck.b, &eval, lambda, &mut cost)?;
                decoded.push(Decoded { method, agent: "AB".into(), captions, cost });
            }
            Method::Mhcg | Method::Finetune => {
                let run = run_game(config, &prepared, &ck, method == Method::Finetune)?;
                let mut stream = Vec::new();
                write_reports(&mut stream, &run.reports)?;
                record(manifest, dir, &format!("rounds_{}.jsonl", method.name()), &stream)?;
                likelihood.extend(output::likelihood_rows(method, &run));
                single(method, "A", &run.a, &mut decoded)?;
                single(method, "B", &run.b, &mut decoded)?;
            }
            Method::Kd => {
                let (a, b) = run_kd(config, &prepared, &ck)?;
                single(method, "A", &a, &mut decoded)?;
                single(method, "B", &b, &mut decoded)?;
            }
        }
    }

    if !likelihood.is_empty() {
        let mut buf = Vec::new();
        write_likelihood(&mut buf, &likelihood)?;
        record(manifest, dir, "likelihood.csv", &buf)?;
    }
    let rows = output::metric_rows(&prepared, &eval_idx, &decoded)?;
    let mut buf = Vec::new();
    write_metrics(&mut buf, &rows)?;
    record(manifest, dir, "metrics.csv", &buf)?;
    let mut buf = Vec::new();
    write_cf1_matrix(&mut buf, &prepared, &eval_idx, &decoded)?;
    record(manifest, dir, "cf1_matrix.csv", &buf)?;
    Ok(())
}

/// Re-runs the experiment recorded in `manifest_path` into `out_dir` and
/// lists every CSV output with whether its bytes came out identical.
pub fn rerun_from_manifest(manifest_path: &Path, out_dir: &Path) -> Result<Vec<(String, bool)>> {
    let old = Manifest::load(manifest_path)?;
    let mut config = old.config.clone();
    config.out_dir = out_dir.to_path_buf();
    let new = run_experiment(&config)?;
    Ok(old
        .outputs
        .iter()
        .filter(|(name, _)| name.ends_with(".csv"))
        .map(|(name, hash)| (name.clone(), new.outputs.get(name) == Some(hash)))
        .collect())
}

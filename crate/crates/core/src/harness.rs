//! Run configuration, seeded experiment driver, summaries and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Maze, TrajectoryRow, Waypoints};
use crate::error::{ConfigError, Error, Result};
use crate::eval::{eval_starts, evaluate, probe_skills, EvalProtocol, SkillProbe};
use crate::game::{GameConfig, GameState, MetricsRow, Variant};
use crate::hrl::{random_return, solver_return, train_hierarchy, DqnConfig, HierarchyRun, References, SkillLibrary};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrlTask {
    Waypoints,
    Maze,
}

impl HrlTask {
    pub fn name(self) -> &'static str {
        match self {
            HrlTask::Waypoints => "waypoints",
            HrlTask::Maze => "maze",
        }
    }
}

/// Downstream hierarchy settings; present only when the run should train one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrlSettings {
    pub tasks: Vec<HrlTask>,
    pub dqn: DqnConfig,
    pub maze_cell_size: f64,
    pub random_episodes: usize,
    /// Also train the epsilon = 1 baseline.
    pub random_baseline: bool,
    pub renormalize: bool,
}

impl Default for HrlSettings {
    fn default() -> Self {
        Self {
            tasks: vec![HrlTask::Waypoints, HrlTask::Maze],
            dqn: DqnConfig::default(),
            maze_cell_size: 2.0,
            random_episodes: 50,
            random_baseline: true,
            renormalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub env: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub game: GameConfig,
    pub eval_every: usize,
    pub eval_protocol: String,
    pub eval_horizon: usize,
    pub eval_skill_repeats: usize,
    /// Stop a seed early once its evaluation success reaches this level.
    pub stop_at_success: Option<f64>,
    /// Full-state snapshots for resume, every this many iterations.
    pub resume_every: usize,
    pub start: [f64; 2],
    pub hrl: Option<HrlSettings>,
}

impl RunConfig {
    pub fn new(name: &str, game: GameConfig) -> Self {
        let horizon = game.t_forward;
        Self {
            name: name.to_string(),
            env: "point_mass".into(),
            seeds: vec![0, 1, 2, 3],
            out_dir: PathBuf::from("runs"),
            game,
            eval_every: 25,
            eval_protocol: "standard15".into(),
            eval_horizon: horizon,
            eval_skill_repeats: 2,
            stop_at_success: None,
            resume_every: 200,
            start: [0.0, 0.0],
            hrl: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "at least one seed is required"));
        }
        if self.eval_every == 0 {
            return Err(ConfigError::invalid("eval.every", "must be >= 1"));
        }
        if self.env != "point_mass" {
            return Err(ConfigError::invalid("env", format!("unknown environment '{}'", self.env)));
        }
        if self.eval_protocol != "standard15" {
            return Err(ConfigError::invalid("eval.protocol", format!("unknown protocol '{}'", self.eval_protocol)));
        }
        if self.eval_horizon == 0 {
            return Err(ConfigError::invalid("eval.horizon", "must be >= 1"));
        }
        if self.resume_every == 0 {
            return Err(ConfigError::invalid("resume_every", "must be >= 1"));
        }
        if let Some(h) = &self.hrl {
            h.dqn.validate().map_err(|e| ConfigError::invalid("hrl", e.to_string()))?;
            if h.maze_cell_size <= 0.0 {
                return Err(ConfigError::invalid("hrl.maze_cell_size", "must be > 0"));
            }
        }
        self.game.validate()
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol::standard(self.eval_horizon)
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(ConfigError::invalid(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize, ConfigError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(ConfigError::invalid(key, "expected a non-negative integer")),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError::invalid(key, "expected true or false"))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| ConfigError::invalid(key, "expected a string"))
}

fn as_widths(key: &str, v: &toml::Value) -> Result<Vec<usize>, ConfigError> {
    match v {
        toml::Value::Array(a) => a.iter().map(|x| as_usize(key, x)).collect(),
        _ => Err(ConfigError::invalid(key, "expected an array of integers")),
    }
}

fn apply_game(g: &mut GameConfig, field: &str, key: &str, v: &toml::Value) -> Result<(), ConfigError> {
    match field {
        "variant" => {
            let s = as_str(key, v)?;
            g.variant = Variant::parse(s).ok_or_else(|| ConfigError::invalid(key, format!("unknown variant '{s}'")))?;
        }
        "lambda" => g.lambda = as_f64(key, v)?,
        "t_reset" => g.t_reset = as_usize(key, v)?,
        "t_forward" => g.t_forward = as_usize(key, v)?,
        "gamma" => g.gamma = as_f64(key, v)?,
        "num_skills" => g.num_skills = as_usize(key, v)?,
        "lr_forward" => g.lr_forward = as_f64(key, v)?,
        "lr_reset" => g.lr_reset = as_f64(key, v)?,
        "skill_reward_scale" => g.skill_reward_scale = as_f64(key, v)?,
        "omit_entropy" => g.omit_entropy = as_bool(key, v)?,
        "updates_per_phase" => g.updates_per_phase = as_usize(key, v)?,
        "batch_size" => g.batch_size = as_usize(key, v)?,
        "iterations" => g.iterations = as_usize(key, v)?,
        "replay_capacity" => g.replay_capacity = as_usize(key, v)?,
        "hidden" => g.hidden = as_widths(key, v)?,
        "alpha" => g.alpha = as_f64(key, v)?,
        "auto_alpha" => g.auto_alpha = as_bool(key, v)?,
        "tau" => g.tau = as_f64(key, v)?,
        "disc_hidden" => g.disc_hidden = as_widths(key, v)?,
        "disc_steps" => g.disc_steps = as_usize(key, v)?,
        "disc_batch" => g.disc_batch = as_usize(key, v)?,
        "disc_lr" => g.disc_lr = as_f64(key, v)?,
        "disc_xy_only" => g.disc_xy_only = as_bool(key, v)?,
        "disc_final_state_only" => g.disc_final_state_only = as_bool(key, v)?,
        "disc_capacity" => g.disc_capacity = as_usize(key, v)?,
        "rnd" => g.rnd = as_bool(key, v)?,
        "rnd_scale" => g.rnd_scale = as_f64(key, v)?,
        "rnd_hidden" => g.rnd_hidden = as_widths(key, v)?,
        "rnd_embed" => g.rnd_embed = as_usize(key, v)?,
        "rnd_lr" => g.rnd_lr = as_f64(key, v)?,
        "rnd_batch" => g.rnd_batch = as_usize(key, v)?,
        "dispersion_window" => g.dispersion_window = as_usize(key, v)?,
        "normalize_obs" => g.normalize_obs = as_bool(key, v)?,
        _ => return Err(ConfigError::invalid(key, "unknown key")),
    }
    Ok(())
}

fn apply_hrl(h: &mut HrlSettings, field: &str, key: &str, v: &toml::Value) -> Result<(), ConfigError> {
    let d = &mut h.dqn;
    match field {
        "tasks" => {
            let arr = v.as_array().ok_or_else(|| ConfigError::invalid(key, "expected an array of task names"))?;
            h.tasks = arr
                .iter()
                .map(|t| match as_str(key, t)? {
                    "waypoints" => Ok(HrlTask::Waypoints),
                    "maze" => Ok(HrlTask::Maze),
                    other => Err(ConfigError::invalid(key, format!("unknown task '{other}'"))),
                })
                .collect::<Result<_, _>>()?;
        }
        "maze_cell_size" => h.maze_cell_size = as_f64(key, v)?,
        "random_episodes" => h.random_episodes = as_usize(key, v)?,
        "random_baseline" => h.random_baseline = as_bool(key, v)?,
        "renormalize" => h.renormalize = as_bool(key, v)?,
        "hidden" => d.hidden = as_widths(key, v)?,
        "lr" => d.lr = as_f64(key, v)?,
        "gamma" => d.gamma = as_f64(key, v)?,
        "batch_size" => d.batch_size = as_usize(key, v)?,
        "buffer_capacity" => d.buffer_capacity = as_usize(key, v)?,
        "eps_start" => d.eps_start = as_f64(key, v)?,
        "eps_end" => d.eps_end = as_f64(key, v)?,
        "exploration_fraction" => d.exploration_fraction = as_f64(key, v)?,
        "tau" => d.tau = as_f64(key, v)?,
        "update_every" => d.update_every = as_usize(key, v)?,
        "epochs" => d.epochs = as_usize(key, v)?,
        "max_macro_steps" => d.max_macro_steps = as_usize(key, v)?,
        "horizon" => d.horizon = as_usize(key, v)?,
        "deterministic_skills" => d.deterministic_skills = as_bool(key, v)?,
        _ => return Err(ConfigError::invalid(key, "unknown key")),
    }
    Ok(())
}

/// Parses config text. `preset = "desk"` starts from desk-scale settings,
/// `"full"` (the default) from full-scale settings.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    let mut overrides = Vec::new();
    for (k, v) in &flat {
        overrides.push((k.clone(), v.clone()));
    }
    config_from_pairs(&overrides)
}

/// Builds a config from already-split `(dotted key, value)` pairs.
pub fn config_from_pairs(pairs: &[(String, toml::Value)]) -> Result<RunConfig, ConfigError> {
    let lookup = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v);
    let game = match lookup("preset").map(|v| as_str("preset", v)).transpose()? {
        None | Some("full") => GameConfig::default(),
        Some("desk") => GameConfig::desk(),
        Some(other) => return Err(ConfigError::invalid("preset", format!("unknown preset '{other}'"))),
    };
    let mut cfg = RunConfig::new("run", game);
    let mut horizon_set = false;
    for (key, v) in pairs {
        let (section, field) = key.split_once('.').unwrap_or(("", key.as_str()));
        match (section, field) {
            ("", "preset") => {}
            ("", "name") => cfg.name = as_str(key, v)?.to_string(),
            ("", "env") => cfg.env = as_str(key, v)?.to_string(),
            ("", "out_dir") => cfg.out_dir = PathBuf::from(as_str(key, v)?),
            ("", "seeds") => {
                let arr = v.as_array().ok_or_else(|| ConfigError::invalid(key, "expected an array of integers"))?;
                cfg.seeds = arr
                    .iter()
                    .map(|s| s.as_integer().filter(|i| *i >= 0).map(|i| i as u64).ok_or_else(|| ConfigError::invalid(key, "seeds must be non-negative integers")))
                    .collect::<Result<_, _>>()?;
            }
            ("", "resume_every") => cfg.resume_every = as_usize(key, v)?,
            ("", "start") => {
                let w = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| ConfigError::invalid(key, "expected [x, y]"))?;
                cfg.start = [as_f64(key, &w[0])?, as_f64(key, &w[1])?];
            }
            ("eval", "every") => cfg.eval_every = as_usize(key, v)?,
            ("eval", "protocol") => cfg.eval_protocol = as_str(key, v)?.to_string(),
            ("eval", "horizon") => {
                cfg.eval_horizon = as_usize(key, v)?;
                horizon_set = true;
            }
            ("eval", "skill_repeats") => cfg.eval_skill_repeats = as_usize(key, v)?,
            ("eval", "stop_at_success") => cfg.stop_at_success = Some(as_f64(key, v)?),
            ("game", f) => apply_game(&mut cfg.game, f, key, v)?,
            ("hrl", f) => apply_hrl(cfg.hrl.get_or_insert_with(HrlSettings::default), f, key, v)?,
            _ => return Err(ConfigError::invalid(key, "unknown key")),
        }
    }
    if cfg.game.variant == Variant::DiaynOnly && lookup("game.lambda").is_none() {
        cfg.game.lambda = 0.0;
    }
    if !horizon_set {
        cfg.eval_horizon = cfg.game.t_forward;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses a `key=value` override; the value uses TOML syntax, bare words are strings.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Parse(format!("expected key=value, got '{s}'")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("x").cloned())
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

/// Percentile bootstrap of the mean: `(mean, low, high)` for the given level.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let idx = ((q * resamples as f64).floor() as usize).min(resamples - 1);
        means[idx]
    };
    (mean, pick(tail), pick(1.0 - tail))
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Deterministic seed for the bootstrap at one curve point.
pub fn bootstrap_seed(iteration: u64) -> u64 {
    0x5eed_0000_0000_0000 ^ iteration
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(&cfg.name).join(format!("seed_{seed}"))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.name)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Data {
            file: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Persisted form of a seed's progress.
#[derive(Serialize, Deserialize)]
struct Snapshot {
    game: GameState,
    eval_rng: ChaCha8Rng,
    stopped: bool,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Result of one evaluation round.
#[derive(Debug, Clone)]
pub struct EvalRound {
    pub success: f64,
    pub final_distance: f64,
    pub probe: SkillProbe,
    pub disc_accuracy: f64,
    pub dispersion: f64,
}

/// Forward-policy evaluation plus a skill probe, on clones and the eval stream only.
pub fn eval_round(game: &GameState, protocol: &EvalProtocol, repeats: usize, rng: &mut ChaCha8Rng) -> Result<EvalRound> {
    let e = evaluate(&game.forward, protocol, rng)?;
    let probe = probe_skills(&game.reset, &eval_starts(), game.cfg.t_reset, repeats.max(1), rng)?;
    Ok(EvalRound {
        success: e.success_rate,
        final_distance: e.mean_final_distance,
        disc_accuracy: probe.accuracy(&game.disc)?,
        dispersion: probe.dispersion()?,
        probe,
    })
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_state: GameState,
    pub hierarchy: Vec<(HrlTask, HierarchyRun, Option<HierarchyRun>, References)>,
}

impl SeedOutcome {
    /// First evaluated iteration with success at or above `level`.
    pub fn iterations_to(&self, level: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.eval_success.is_some_and(|s| s >= level)).map(|r| r.iteration)
    }
}

fn skill_rows(probe: &SkillProbe) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for (start, z, path) in &probe.paths {
        for (step, p) in path.iter().enumerate() {
            rows.push(TrajectoryRow {
                step,
                phase: format!("reset_start{start}"),
                skill: Some(*z),
                x: p[0],
                y: p[1],
                reward: 0.0,
                terminated: false,
            });
        }
    }
    rows
}

/// Trains one seed, resuming from its last snapshot when one exists.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(dir.join("checkpoints"))?;
    let metrics_path = dir.join("metrics.csv");
    let snapshot_path = dir.join("state.bin");
    let protocol = cfg.protocol();

    let (mut snap, mut rows) = if snapshot_path.exists() {
        let snap: Snapshot = bincode::deserialize(&fs::read(&snapshot_path)?)?;
        let done = snap.game.iteration;
        let rows: Vec<MetricsRow> = if metrics_path.exists() {
            read_metrics(&metrics_path)?.into_iter().filter(|r| r.iteration <= done).collect()
        } else {
            Vec::new()
        };
        info!("seed {seed}: resuming at iteration {done}");
        (snap, rows)
    } else {
        let game = GameState::new(cfg.game.clone(), seed, cfg.start)?;
        (
            Snapshot {
                game,
                eval_rng: stream(seed, Stream::Eval),
                stopped: false,
            },
            Vec::new(),
        )
    };
    let mut expected = cfg.game.clone();
    expected.iterations = snap.game.cfg.iterations;
    if snap.game.cfg != expected {
        return Err(Error::Invalid(format!("{}: snapshot was written by a different game config", snapshot_path.display())));
    }
    snap.game.cfg.iterations = cfg.game.iterations;
    write_csv(&metrics_path, &rows)?;
    let mut metrics = csv::WriterBuilder::new().has_headers(rows.is_empty()).from_writer(
        fs::OpenOptions::new().append(true).open(&metrics_path)?,
    );
    let timing_path = dir.join("timing.csv");
    let fresh_timing = !timing_path.exists();
    let mut timing = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&timing_path)?);
    if fresh_timing {
        writeln!(timing, "iteration,seconds")?;
    }
    let clock = Instant::now();
    let mut last_probe = None;

    while !snap.stopped && (snap.game.iteration as usize) < cfg.game.iterations {
        let mut row = snap.game.game_iteration()?;
        let it = snap.game.iteration;
        if it as usize % cfg.eval_every == 0 {
            let round = eval_round(&snap.game, &protocol, cfg.eval_skill_repeats, &mut snap.eval_rng)?;
            row.eval_success = Some(round.success);
            row.eval_final_distance = Some(round.final_distance);
            row.eval_disc_accuracy = Some(round.disc_accuracy);
            row.eval_dispersion = Some(round.dispersion);
            for (name, agent) in [("forward", &snap.game.forward), ("reset", &snap.game.reset)] {
                let mut bytes = Vec::new();
                agent.write_checkpoint(&mut bytes)?;
                write_atomic(&dir.join("checkpoints").join(format!("{name}.lsra")), &bytes)?;
            }
            if cfg.stop_at_success.is_some_and(|s| round.success >= s) {
                snap.stopped = true;
            }
            last_probe = Some(round.probe);
        }
        metrics.serialize(&row)?;
        writeln!(timing, "{it},{:.6}", clock.elapsed().as_secs_f64())?;
        rows.push(row);
        if it as usize % cfg.resume_every == 0 || snap.stopped {
            metrics.flush()?;
            write_atomic(&snapshot_path, &bincode::serialize(&snap)?)?;
        }
    }
    metrics.flush()?;
    timing.flush()?;
    write_atomic(&snapshot_path, &bincode::serialize(&snap)?)?;

    let probe = match last_probe {
        Some(p) => p,
        None => eval_round(&snap.game, &protocol, cfg.eval_skill_repeats, &mut stream(seed, Stream::Eval))?.probe,
    };
    write_csv(&dir.join("skills.csv"), &skill_rows(&probe))?;

    let mut hierarchy = Vec::new();
    if let Some(h) = &cfg.hrl {
        let library = SkillLibrary::new(snap.game.reset.clone(), h.dqn.deterministic_skills, h.renormalize)?;
        for task in &h.tasks {
            let out = run_hierarchy_task(*task, &library, h, seed)?;
            write_csv(&dir.join(format!("hrl_{}.csv", task.name())), &out.0.curve)?;
            if let Some(r) = &out.1 {
                write_csv(&dir.join(format!("hrl_{}_random.csv", task.name())), &r.curve)?;
            }
            if *task == HrlTask::Maze {
                let rows: Vec<TrajectoryRow> = out
                    .0
                    .best_path
                    .iter()
                    .enumerate()
                    .map(|(step, p)| TrajectoryRow {
                        step,
                        phase: "hierarchy".into(),
                        skill: None,
                        x: p[0],
                        y: p[1],
                        reward: 0.0,
                        terminated: false,
                    })
                    .collect();
                write_csv(&dir.join("maze_path.csv"), &rows)?;
            }
            hierarchy.push((*task, out.0, out.1, out.2));
        }
    }
    Ok(SeedOutcome {
        seed,
        dir,
        rows,
        final_state: snap.game,
        hierarchy,
    })
}

/// Trains the meta-controller (and optionally the random baseline) on one task.
pub fn run_hierarchy_task(
    task: HrlTask,
    library: &SkillLibrary,
    h: &HrlSettings,
    seed: u64,
) -> Result<(HierarchyRun, Option<HierarchyRun>, References)> {
    match task {
        HrlTask::Waypoints => hierarchy_on(&Waypoints::new(), library, h, seed),
        HrlTask::Maze => hierarchy_on(&Maze::medium(h.maze_cell_size), library, h, seed),
    }
}

fn hierarchy_on<E: crate::hrl::Solver>(
    proto: &E,
    library: &SkillLibrary,
    h: &HrlSettings,
    seed: u64,
) -> Result<(HierarchyRun, Option<HierarchyRun>, References)> {
    let budget = h.dqn.max_macro_steps * h.dqn.horizon;
    let mut rng = stream(seed, Stream::Eval);
    let refs = References {
        solver: solver_return(proto, budget)?,
        random: random_return(proto, library, &h.dqn, h.random_episodes.max(1), &mut rng)?,
    };
    if refs.solver <= refs.random {
        warn!("solver return {} does not exceed random return {}", refs.solver, refs.random);
    }
    let mut train_rng = stream(seed, Stream::Init);
    let run = train_hierarchy(proto, library, &h.dqn, refs, None, &mut train_rng)?;
    let baseline = if h.random_baseline {
        Some(train_hierarchy(proto, library, &h.dqn, refs, Some(1.0), &mut train_rng)?)
    } else {
        None
    };
    Ok((run, baseline, refs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub seeds: usize,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Eval-success curve with bootstrap bands across seeds. A seed that stopped
/// early carries its last evaluation forward.
pub fn success_curve(per_seed: &[Vec<MetricsRow>]) -> Vec<CurvePoint> {
    let mut iterations: Vec<u64> = per_seed
        .iter()
        .flat_map(|rows| rows.iter().filter(|r| r.eval_success.is_some()).map(|r| r.iteration))
        .collect();
    iterations.sort_unstable();
    iterations.dedup();
    iterations
        .into_iter()
        .map(|it| {
            let values: Vec<f64> = per_seed
                .iter()
                .filter_map(|rows| rows.iter().filter(|r| r.iteration <= it).filter_map(|r| r.eval_success).last())
                .collect();
            let (mean, low, high) = bootstrap_ci(&values, BOOTSTRAP_RESAMPLES, 0.95, bootstrap_seed(it));
            CurvePoint {
                iteration: it,
                seeds: values.len(),
                mean,
                low,
                high,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Runs every seed. A failing seed is logged and recorded; the others continue.
pub fn run_experiment(cfg: &RunConfig) -> Result<(PathBuf, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let root = run_dir(cfg);
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.toml"), render_config(cfg))?;
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    let mut f = fs::File::create(root.join("failures.txt"))?;
    for (s, e) in &failures {
        writeln!(f, "seed {s}: {e}")?;
    }
    let per_seed: Vec<Vec<MetricsRow>> = outcomes.iter().map(|o| o.rows.clone()).collect();
    write_csv(&root.join("curves.csv"), &success_curve(&per_seed))?;
    write_csv(&root.join("summary.csv"), &summarize(&outcomes))?;
    Ok((root, outcomes))
}

fn summarize(outcomes: &[SeedOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, values: Vec<f64>| {
        if values.is_empty() {
            return;
        }
        let (mean, low, high) = bootstrap_ci(&values, BOOTSTRAP_RESAMPLES, 0.95, 0);
        rows.push(SummaryRow {
            metric: metric.to_string(),
            seeds: values.len(),
            mean,
            low,
            high,
        });
    };
    let last_eval = |o: &SeedOutcome, f: fn(&MetricsRow) -> Option<f64>| o.rows.iter().rev().find_map(f);
    push("final_eval_success", outcomes.iter().filter_map(|o| last_eval(o, |r| r.eval_success)).collect());
    push("final_eval_distance", outcomes.iter().filter_map(|o| last_eval(o, |r| r.eval_final_distance)).collect());
    push("final_disc_accuracy", outcomes.iter().filter_map(|o| last_eval(o, |r| r.eval_disc_accuracy)).collect());
    push("final_dispersion", outcomes.iter().filter_map(|o| last_eval(o, |r| r.eval_dispersion)).collect());
    push(
        "iterations_to_0.7",
        outcomes.iter().filter_map(|o| o.iterations_to(0.7)).map(|i| i as f64).collect(),
    );
    let mut tasks: Vec<HrlTask> = outcomes.iter().flat_map(|o| o.hierarchy.iter().map(|h| h.0)).collect();
    tasks.dedup();
    for task in tasks {
        let pick = |run: &HierarchyRun| run.curve.last().map(|r| r.normalized_return);
        push(
            &format!("hrl_{}_normalized_return", task.name()),
            outcomes.iter().flat_map(|o| o.hierarchy.iter().filter(|h| h.0 == task).filter_map(|h| pick(&h.1))).collect(),
        );
        push(
            &format!("hrl_{}_random_normalized_return", task.name()),
            outcomes
                .iter()
                .flat_map(|o| o.hierarchy.iter().filter(|h| h.0 == task).filter_map(|h| h.2.as_ref().and_then(pick)))
                .collect(),
        );
    }
    rows
}

/// Writes the effective configuration back out as flat dotted keys.
pub fn render_config(cfg: &RunConfig) -> String {
    let g = &cfg.game;
    let widths = |w: &[usize]| format!("[{}]", w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("name", format!("{:?}", cfg.name));
    kv("env", format!("{:?}", cfg.env));
    kv("seeds", format!("[{}]", cfg.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")));
    kv("out_dir", format!("{:?}", cfg.out_dir.display().to_string()));
    kv("resume_every", cfg.resume_every.to_string());
    kv("start", format!("[{:?}, {:?}]", cfg.start[0], cfg.start[1]));
    kv("eval.every", cfg.eval_every.to_string());
    kv("eval.protocol", format!("{:?}", cfg.eval_protocol));
    kv("eval.horizon", cfg.eval_horizon.to_string());
    kv("eval.skill_repeats", cfg.eval_skill_repeats.to_string());
    if let Some(v) = cfg.stop_at_success {
        kv("eval.stop_at_success", format!("{v:?}"));
    }
    kv("game.variant", format!("{:?}", g.variant.name()));
    kv("game.lambda", format!("{:?}", g.lambda));
    kv("game.t_reset", g.t_reset.to_string());
    kv("game.t_forward", g.t_forward.to_string());
    kv("game.gamma", format!("{:?}", g.gamma));
    kv("game.num_skills", g.num_skills.to_string());
    kv("game.lr_forward", format!("{:?}", g.lr_forward));
    kv("game.lr_reset", format!("{:?}", g.lr_reset));
    kv("game.skill_reward_scale", format!("{:?}", g.skill_reward_scale));
    kv("game.omit_entropy", g.omit_entropy.to_string());
    kv("game.updates_per_phase", g.updates_per_phase.to_string());
    kv("game.batch_size", g.batch_size.to_string());
    kv("game.iterations", g.iterations.to_string());
    kv("game.replay_capacity", g.replay_capacity.to_string());
    kv("game.hidden", widths(&g.hidden));
    kv("game.alpha", format!("{:?}", g.alpha));
    kv("game.auto_alpha", g.auto_alpha.to_string());
    kv("game.tau", format!("{:?}", g.tau));
    kv("game.disc_hidden", widths(&g.disc_hidden));
    kv("game.disc_steps", g.disc_steps.to_string());
    kv("game.disc_batch", g.disc_batch.to_string());
    kv("game.disc_lr", format!("{:?}", g.disc_lr));
    kv("game.disc_xy_only", g.disc_xy_only.to_string());
    kv("game.disc_final_state_only", g.disc_final_state_only.to_string());
    kv("game.disc_capacity", g.disc_capacity.to_string());
    kv("game.rnd", g.rnd.to_string());
    kv("game.rnd_scale", format!("{:?}", g.rnd_scale));
    kv("game.rnd_hidden", widths(&g.rnd_hidden));
    kv("game.rnd_embed", g.rnd_embed.to_string());
    kv("game.rnd_lr", format!("{:?}", g.rnd_lr));
    kv("game.rnd_batch", g.rnd_batch.to_string());
    kv("game.dispersion_window", g.dispersion_window.to_string());
    kv("game.normalize_obs", g.normalize_obs.to_string());
    if let Some(h) = &cfg.hrl {
        let d = &h.dqn;
        kv("hrl.tasks", format!("[{}]", h.tasks.iter().map(|t| format!("{:?}", t.name())).collect::<Vec<_>>().join(", ")));
        kv("hrl.maze_cell_size", format!("{:?}", h.maze_cell_size));
        kv("hrl.random_episodes", h.random_episodes.to_string());
        kv("hrl.random_baseline", h.random_baseline.to_string());
        kv("hrl.renormalize", h.renormalize.to_string());
        kv("hrl.hidden", widths(&d.hidden));
        kv("hrl.lr", format!("{:?}", d.lr));
        kv("hrl.gamma", format!("{:?}", d.gamma));
        kv("hrl.batch_size", d.batch_size.to_string());
        kv("hrl.buffer_capacity", d.buffer_capacity.to_string());
        kv("hrl.eps_start", format!("{:?}", d.eps_start));
        kv("hrl.eps_end", format!("{:?}", d.eps_end));
        kv("hrl.exploration_fraction", format!("{:?}", d.exploration_fraction));
        kv("hrl.tau", format!("{:?}", d.tau));
        kv("hrl.update_every", d.update_every.to_string());
        kv("hrl.epochs", d.epochs.to_string());
        kv("hrl.max_macro_steps", d.max_macro_steps.to_string());
        kv("hrl.horizon", d.horizon.to_string());
        kv("hrl.deterministic_skills", d.deterministic_skills.to_string());
    }
    s
}

/// Cartesian product of `key=v1,v2,...` grid axes, applied on top of `base` text.
pub fn sweep_configs(base: &str, grid: &[String]) -> Result<Vec<RunConfig>, ConfigError> {
    let table: toml::Table = base.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    let base_pairs: Vec<(String, toml::Value)> = flat.into_iter().collect();
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for g in grid {
        let (k, vs) = g.split_once('=').ok_or_else(|| ConfigError::Parse(format!("expected key=v1,v2 in '{g}'")))?;
        axes.push((k.trim().to_string(), vs.split(',').map(|v| v.trim().to_string()).collect()));
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vs.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|combo| {
            let mut pairs = base_pairs.clone();
            let mut suffix = String::new();
            for (k, v) in &combo {
                pairs.push(parse_override(&format!("{k}={v}"))?);
                suffix.push_str(&format!("__{}-{}", k.rsplit('.').next().unwrap_or(k), v));
            }
            let mut cfg = config_from_pairs(&pairs)?;
            cfg.name.push_str(&suffix);
            Ok(cfg)
        })
        .collect()
}

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curve::ActionMap;
use crate::image::{resize, ImageTensor};
use crate::nn::{AdamConfig, AdamState, Checkpoint, NetworkParams};
use crate::oracle::AestheticOracle;
use crate::reward::{exposure_reward, RewardBreakdown};

use super::calibrate::{measure_term_scales, rescale_weights};
use super::loss::{accumulate_a3c_gradients, A3cLosses};
use super::rollout::rollout_segment;
use super::sampling::{derive_seed, SelectionMode};
use super::{AgentError, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    /// 1-based.
    pub epoch: usize,
    pub worker: usize,
    pub episode: usize,
    pub image: usize,
    pub rewards: Vec<RewardBreakdown>,
    /// Mean over the episode's update segments.
    pub losses: A3cLosses,
    pub luminance_in: f64,
    pub luminance_out: f64,
    pub exposure_in: f64,
    pub exposure_out: f64,
    pub score_in: f64,
    pub score_out: f64,
    pub wall_ms: f64,
}

impl EpisodeSummary {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|r| r.r_total).sum()
    }
}

/// Means over the episodes of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub episodes: usize,
    pub exposure_in: f64,
    pub exposure_out: f64,
    pub score_in: f64,
    pub score_out: f64,
    pub luminance_out: f64,
    pub reward: f64,
    pub total_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Effective configuration and run facts, echoed at the top of the log.
    pub header: Vec<(String, String)>,
    pub episodes: Vec<EpisodeSummary>,
    pub epochs: Vec<EpochSummary>,
    pub wall_ms: f64,
}

/// Line-oriented log record kinds, as rendered by [`TrainingLog::render`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogRecord {
    Config,
    Step,
    Episode,
    Epoch,
    Done,
}

impl LogRecord {
    pub fn tag(self) -> &'static str {
        match self {
            LogRecord::Config => "config",
            LogRecord::Step => "step",
            LogRecord::Episode => "episode",
            LogRecord::Epoch => "epoch",
            LogRecord::Done => "done",
        }
    }
}

impl TrainingLog {
    pub fn render(&self) -> String {
        let mut out = String::from("# pixrl training log\n");
        for (k, v) in &self.header {
            let _ = writeln!(out, "{} {k}={v}", LogRecord::Config.tag());
        }
        let mut epochs = self.epochs.iter().peekable();
        for (i, e) in self.episodes.iter().enumerate() {
            for (t, r) in e.rewards.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{} epoch={} worker={} episode={} image={} t={} r_aes={} r_fea={} r_exp={} r_total={} color={} smoothness={} score_before={} score_after={}",
                    LogRecord::Step.tag(), e.epoch, e.worker, e.episode, e.image, t + 1,
                    r.r_aes, r.r_fea, r.r_exp, r.r_total, r.color, r.smoothness, r.score_before, r.score_after
                );
            }
            let l = &e.losses;
            let _ = writeln!(
                out,
                "{} epoch={} worker={} episode={} image={} policy_loss={} value_loss={} entropy={} total_loss={} return={} luminance_in={} luminance_out={} exposure_in={} exposure_out={} score_in={} score_out={} wall_ms={:.3}",
                LogRecord::Episode.tag(), e.epoch, e.worker, e.episode, e.image,
                l.policy, l.value, l.entropy, l.total, e.total_reward(),
                e.luminance_in, e.luminance_out, e.exposure_in, e.exposure_out, e.score_in, e.score_out, e.wall_ms
            );
            let epoch_done = self.episodes.get(i + 1).is_none_or(|next| next.epoch != e.epoch);
            if epoch_done {
                if let Some(s) = epochs.next_if(|s| s.epoch == e.epoch) {
                    let _ = writeln!(
                        out,
                        "{} epoch={} episodes={} exposure_in={} exposure_out={} score_in={} score_out={} luminance_out={} reward={} total_loss={} entropy={}",
                        LogRecord::Epoch.tag(), s.epoch, s.episodes, s.exposure_in, s.exposure_out,
                        s.score_in, s.score_out, s.luminance_out, s.reward, s.total_loss, s.entropy
                    );
                }
            }
        }
        let _ = writeln!(
            out,
            "{} episodes={} wall_ms={:.3}",
            LogRecord::Done.tag(),
            self.episodes.len(),
            self.wall_ms
        );
        out
    }
}

/// Drops `wall_ms=` fields so that logs of identical runs compare equal.
pub fn strip_wall_time(log: &str) -> String {
    log.lines()
        .map(|line| {
            line.split(' ')
                .filter(|tok| !tok.starts_with("wall_ms="))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters rounded to storage precision, the optimizer state and the
    /// configuration echo.
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

struct Job {
    epoch: usize,
    images: Vec<usize>,
    first_episode: usize,
}

struct Shared {
    params: NetworkParams,
    adam: AdamState,
}

fn schedule(config: &TrainConfig, images: usize) -> Vec<Job> {
    let budget = config.max_episodes.unwrap_or(usize::MAX);
    let mut jobs = Vec::new();
    let mut episodes = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..images).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let take = chunk.len().min(budget - episodes);
            if take == 0 {
                break 'epochs;
            }
            jobs.push(Job {
                epoch: epoch + 1,
                images: chunk[..take].to_vec(),
                first_episode: episodes,
            });
            episodes += take;
        }
    }
    jobs
}

struct Progress {
    state: ImageTensor,
    maps: Vec<ActionMap>,
    rewards: Vec<RewardBreakdown>,
    losses: A3cLosses,
    segments: usize,
}

fn run_job(
    shared: &Mutex<Shared>,
    job: &Job,
    worker: usize,
    config: &TrainConfig,
    images: &[ImageTensor],
    oracle: &dyn AestheticOracle,
) -> Result<Vec<EpisodeSummary>, AgentError> {
    let start = Instant::now();
    let n = config.steps;
    let weight = 1.0 / job.images.len() as f64;
    let mut progress: Vec<Progress> = job
        .images
        .iter()
        .map(|&i| Progress {
            state: images[i].clone(),
            maps: Vec::new(),
            rewards: Vec::new(),
            losses: A3cLosses::default(),
            segments: 0,
        })
        .collect();
    let mut t = 0;
    while t < n {
        let len = config.t_max.min(n - t);
        let mut local = shared.lock().expect("shared parameters").params.clone();
        local.zero_grad();
        for (b, p) in progress.iter_mut().enumerate() {
            let seed = derive_seed(config.seed, (job.first_episode + b) as u64);
            let snapshot = local.clone();
            let trace = rollout_segment(
                &snapshot,
                &config.action_space,
                oracle,
                &config.reward,
                config.gamma,
                &p.state,
                &p.maps,
                len,
                n,
                SelectionMode::Sample,
                seed,
            )?;
            let l = accumulate_a3c_gradients(&mut local, &trace, config.entropy_beta, weight)?;
            p.losses.policy += l.policy;
            p.losses.value += l.value;
            p.losses.entropy += l.entropy;
            p.losses.total += l.total;
            p.segments += 1;
            p.state = trace.last_state().clone();
            p.maps.extend(trace.action_maps);
            p.rewards.extend(trace.rewards);
        }
        let grads = local.take_grads().expect("gradients were accumulated");
        let mut guard = shared.lock().expect("shared parameters");
        let Shared { params, adam } = &mut *guard;
        adam.apply(params, &grads)?;
        drop(guard);
        t += len;
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3 / job.images.len() as f64;
    let r = &config.reward;
    Ok(job
        .images
        .iter()
        .zip(progress)
        .enumerate()
        .map(|(b, (&image, p))| {
            let k = p.segments as f64;
            let input = &images[image];
            EpisodeSummary {
                epoch: job.epoch,
                worker,
                episode: job.first_episode + b,
                image,
                losses: A3cLosses {
                    policy: p.losses.policy / k,
                    value: p.losses.value / k,
                    entropy: p.losses.entropy / k,
                    total: p.losses.total / k,
                },
                luminance_in: input.mean_luminance(),
                luminance_out: p.state.mean_luminance(),
                exposure_in: exposure_reward(input, r.exposure_level, r.block),
                exposure_out: exposure_reward(&p.state, r.exposure_level, r.block),
                score_in: p.rewards[0].score_before,
                score_out: p.rewards[n - 1].score_after,
                rewards: p.rewards,
                wall_ms,
            }
        })
        .collect())
}

fn summarize(episodes: &[EpisodeSummary]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    for group in episodes.chunk_by(|a, b| a.epoch == b.epoch) {
        let k = group.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeSummary) -> f64| group.iter().map(f).sum::<f64>() / k;
        out.push(EpochSummary {
            epoch: group[0].epoch,
            episodes: group.len(),
            exposure_in: mean(&|e| e.exposure_in),
            exposure_out: mean(&|e| e.exposure_out),
            score_in: mean(&|e| e.score_in),
            score_out: mean(&|e| e.score_out),
            luminance_out: mean(&|e| e.luminance_out),
            reward: mean(&|e| e.total_reward()),
            total_loss: mean(&|e| e.losses.total),
            entropy: mean(&|e| e.losses.entropy),
        });
    }
    out
}

/// Asynchronous actor-critic training. Each worker repeatedly takes a batch
/// of images, copies the shared parameters, rolls out up to `t_max` steps per
/// image, accumulates gradients locally and applies them to the shared
/// parameters through the shared optimizer. With one worker the result is a
/// pure function of the config and the images.
pub fn train(
    config: &TrainConfig,
    images: &[ImageTensor],
    oracle: &dyn AestheticOracle,
) -> Result<TrainOutcome, AgentError> {
    config.validate()?;
    if images.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let started = Instant::now();
    let images: Vec<ImageTensor> = match config.resolution {
        Some(r) => images
            .iter()
            .map(|img| {
                if img.height() == r && img.width() == r {
                    img.clone()
                } else {
                    resize(img, r, r)
                }
            })
            .collect(),
        None => images.to_vec(),
    };
    let calibrated;
    let config = if config.calibrate_rewards {
        let scales = measure_term_scales(config, &images, oracle)?;
        calibrated = TrainConfig {
            reward: rescale_weights(&config.reward, &scales),
            calibrate_rewards: false,
            ..config.clone()
        };
        &calibrated
    } else {
        config
    };
    let params = NetworkParams::init(config.architecture(), config.seed)?;
    let adam = AdamState::new(
        &params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let parameter_count = config.architecture().parameter_count();
    let shared = Mutex::new(Shared { params, adam });
    let jobs = schedule(config, images.len());
    let total_episodes: usize = jobs.iter().map(|j| j.images.len()).sum();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Mutex<Vec<Option<EpisodeSummary>>> = Mutex::new(vec![None; total_episodes]);
    let first_error: Mutex<Option<AgentError>> = Mutex::new(None);

    let worker_loop = |worker: usize| loop {
        if failed.load(Ordering::SeqCst) {
            break;
        }
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some(job) = jobs.get(j) else { break };
        match run_job(&shared, job, worker, config, &images, oracle) {
            Ok(done) => {
                let mut slots = results.lock().expect("results");
                for e in done {
                    let idx = e.episode;
                    slots[idx] = Some(e);
                }
            }
            Err(e) => {
                failed.store(true, Ordering::SeqCst);
                first_error.lock().expect("error slot").get_or_insert(e);
                break;
            }
        }
    };
    if config.workers == 1 {
        worker_loop(0);
    } else {
        std::thread::scope(|s| {
            for w in 0..config.workers {
                let run = &worker_loop;
                s.spawn(move || run(w));
            }
        });
    }
    if let Some(e) = first_error.into_inner().expect("error slot") {
        return Err(e);
    }
    let episodes: Vec<EpisodeSummary> = results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|e| e.expect("every scheduled episode ran"))
        .collect();

    let Shared { mut params, mut adam } = shared.into_inner().expect("shared parameters");
    params.round_to_f32();
    for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        for v in buf {
            *v = *v as f32 as f64;
        }
    }
    let mut header = config.echo();
    header.push(("images".into(), images.len().to_string()));
    header.push(("parameters".into(), parameter_count.to_string()));
    header.push(("episodes".into(), total_episodes.to_string()));
    let mut checkpoint = Checkpoint::new(params);
    checkpoint.optimizer = Some(adam);
    checkpoint.meta = header.clone();
    let epochs = summarize(&episodes);
    Ok(TrainOutcome {
        checkpoint,
        log: TrainingLog {
            header,
            episodes,
            epochs,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ProxyParams, ProxyScorer};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 2,
            t_max: 2,
            epochs: 2,
            workers: 1,
            batch_size: 2,
            resolution: Some(8),
            trunk: vec![3, 4],
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn images() -> Vec<ImageTensor> {
        (0..3)
            .map(|k| ImageTensor::from_fn(10, 10, |y, x| [0.01 * (y + k) as f64, 0.02 * x as f64, 0.05]))
            .collect()
    }

    fn proxy() -> ProxyScorer {
        ProxyScorer::new(ProxyParams::default()).unwrap()
    }

    #[test]
    fn schedule_covers_each_epoch_in_batches() {
        let jobs = schedule(&tiny_config(), 3);
        assert_eq!(jobs.len(), 4);
        assert_eq!(
            jobs.iter().map(|j| j.images.len()).collect::<Vec<_>>(),
            vec![2, 1, 2, 1]
        );
        for e in [1, 2] {
            let mut seen: Vec<usize> = jobs
                .iter()
                .filter(|j| j.epoch == e)
                .flat_map(|j| j.images.clone())
                .collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2]);
        }
        let capped = schedule(
            &TrainConfig {
                max_episodes: Some(3),
                ..tiny_config()
            },
            3,
        );
        assert_eq!(capped.iter().map(|j| j.images.len()).sum::<usize>(), 3);
    }

    #[test]
    fn single_worker_runs_are_identical() {
        let a = train(&tiny_config(), &images(), &proxy()).unwrap();
        let b = train(&tiny_config(), &images(), &proxy()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(strip_wall_time(&a.log.render()), strip_wall_time(&b.log.render()));
        assert_eq!(a.log.episodes.len(), 6);
        assert_eq!(a.log.epochs.len(), 2);
    }

    #[test]
    fn parameters_change_and_are_stored_at_f32() {
        let cfg = tiny_config();
        let out = train(&cfg, &images(), &proxy()).unwrap();
        let init = NetworkParams::init(cfg.architecture(), cfg.seed).unwrap();
        assert_ne!(out.checkpoint.params.tensors(), init.tensors());
        for v in out.checkpoint.params.tensors().iter().flat_map(|t| t.data()) {
            assert_eq!(*v, *v as f32 as f64);
        }
        assert_eq!(out.checkpoint.optimizer.as_ref().unwrap().step, 4);
        assert_eq!(out.checkpoint.meta_value("actions"), Some("28"));
    }

    #[test]
    fn zero_budget_writes_initial_parameters() {
        let cfg = TrainConfig {
            max_episodes: Some(0),
            ..tiny_config()
        };
        let out = train(&cfg, &images(), &proxy()).unwrap();
        assert!(out.log.episodes.is_empty());
        let mut init = NetworkParams::init(cfg.architecture(), cfg.seed).unwrap();
        init.round_to_f32();
        assert_eq!(out.checkpoint.params.tensors(), init.tensors());
        assert!(!out.log.render().contains("\nepisode "));
    }

    #[test]
    fn segmented_updates_apply_once_per_segment() {
        let cfg = TrainConfig {
            steps: 3,
            t_max: 1,
            epochs: 1,
            ..tiny_config()
        };
        let out = train(&cfg, &images(), &proxy()).unwrap();
        assert_eq!(out.checkpoint.optimizer.as_ref().unwrap().step, 2 * 3);
        assert!(out.log.episodes.iter().all(|e| e.rewards.len() == 3));
    }

    #[test]
    fn parallel_workers_complete_every_episode() {
        let cfg = TrainConfig {
            workers: 3,
            epochs: 3,
            batch_size: 1,
            ..tiny_config()
        };
        let out = train(&cfg, &images(), &proxy()).unwrap();
        assert_eq!(out.log.episodes.len(), 9);
        assert!(out.log.episodes.iter().enumerate().all(|(i, e)| e.episode == i));
    }

    #[test]
    fn rejects_empty_dataset_and_bad_config() {
        assert!(matches!(
            train(&tiny_config(), &[], &proxy()),
            Err(AgentError::EmptyDataset)
        ));
        let bad = TrainConfig {
            workers: 0,
            ..tiny_config()
        };
        assert!(train(&bad, &images(), &proxy()).is_err());
    }

    #[test]
    fn log_lines_are_tagged() {
        let out = train(&tiny_config(), &images(), &proxy()).unwrap();
        let text = out.log.render();
        assert!(text.contains("config actions=28"));
        assert_eq!(text.lines().filter(|l| l.starts_with("step ")).count(), 12);
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 2);
        assert!(strip_wall_time(&text).lines().all(|l| !l.contains("wall_ms")));
    }
}

//! `jungle run`: daemon, workers, the step loop and the output files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use jungle::coupler::status::{WorkerState, WorkerStatus};
use jungle::coupler::{ChannelKind, Coupler, CouplerError, Daemon, DaemonClient, StatusReport, Worker};
use jungle::units::UnitRegistry;

use crate::scenario::{parse_quantity, Scenario};
use crate::simulation::{generate, nbody_units, Simulation, Workers};
use crate::snapshot::Snapshot;
use crate::CliError;

/// Where the daemon runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DaemonMode {
    /// A thread of this process.
    Thread,
    /// A child process started from this executable (`<exe> daemon ...`).
    Process(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub out_dir: PathBuf,
    pub daemon: DaemonMode,
    /// Print a progress line every this many steps; 0 for none.
    pub progress_every: u64,
}

impl RunOptions {
    pub fn new(scenario: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            seed: None,
            steps: None,
            out_dir: out_dir.into(),
            daemon: DaemonMode::Thread,
            progress_every: 0,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub steps: u64,
    pub initial_energy: Option<f64>,
    pub drift: Option<f64>,
    pub supernovae: u64,
    /// The status document as written to the output directory.
    pub status: Option<StatusReport>,
    pub error: Option<CliError>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, CliError::exit_code)
    }
}

/// Prints the endpoint line the parent waits for, then serves until stopped.
pub fn serve_daemon(scenario: &Path, out_dir: &Path) -> Result<(), CliError> {
    let s = Scenario::load(scenario)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("creating {}", out_dir.display()), e))?;
    let daemon = Daemon::start(s.daemon_config(out_dir))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "endpoint {}", daemon.endpoint()).and_then(|_| out.flush()).map_err(|e| CliError::io("stdout", e))?;
    drop(out);
    daemon.join();
    Ok(())
}

enum DaemonHandle {
    Thread(Daemon),
    Process(Child),
}

impl DaemonHandle {
    fn start(mode: &DaemonMode, scenario: &Scenario, path: &Path, out_dir: &Path) -> Result<(Self, String), CliError> {
        match mode {
            DaemonMode::Thread => {
                let d = Daemon::start(scenario.daemon_config(out_dir))?;
                let endpoint = d.endpoint();
                Ok((DaemonHandle::Thread(d), endpoint))
            }
            DaemonMode::Process(exe) => {
                let mut child = Command::new(exe)
                    .arg("daemon")
                    .arg(path)
                    .arg("--out-dir")
                    .arg(out_dir)
                    .stdin(Stdio::null())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| CliError::io(format!("starting {}", exe.display()), e))?;
                let mut line = String::new();
                let read = BufReader::new(child.stdout.take().expect("piped stdout")).read_line(&mut line);
                match (read, line.trim().strip_prefix("endpoint ")) {
                    (Ok(_), Some(endpoint)) => {
                        let endpoint = endpoint.to_string();
                        Ok((DaemonHandle::Process(child), endpoint))
                    }
                    (read, _) => {
                        let _ = child.kill();
                        let status = child.wait().ok();
                        Err(CliError::Config(format!(
                            "daemon process did not report an endpoint ({}; read {:?}, exit {:?})",
                            line.trim(),
                            read.err(),
                            status
                        )))
                    }
                }
            }
        }
    }

    /// Waits for the daemon to finish after a STOP; forces it if it hangs.
    fn finish(self, client: Option<&DaemonClient>) {
        if let Some(c) = client {
            let _ = c.stop();
        }
        match self {
            DaemonHandle::Thread(d) => {
                d.stop();
                d.join();
            }
            DaemonHandle::Process(mut child) => {
                let deadline = Instant::now() + Duration::from_secs(10);
                loop {
                    match child.try_wait() {
                        Ok(Some(_)) => break,
                        Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                        _ => {
                            let _ = child.kill();
                            let _ = child.wait();
                            break;
                        }
                    }
                }
            }
        }
    }
}

struct Files {
    dir: PathBuf,
    energy: File,
}

impl Files {
    fn create(dir: &Path, energy_log: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(energy_log);
        let mut energy = File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        writeln!(energy, "step\ttime\tenergy\tdrift\tsupernovae").map_err(|e| CliError::io("energy log", e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            energy,
        })
    }

    fn energy_row(&mut self, step: u64, time: f64, energy: f64, drift: f64, sn: u32) -> Result<(), CliError> {
        writeln!(self.energy, "{step}\t{time}\t{energy}\t{drift}\t{sn}").map_err(|e| CliError::io("energy log", e))
    }
}

/// Worker entries for in-process workers, which the daemon never sees.
fn inproc_status(workers: &[&Worker]) -> Vec<WorkerStatus> {
    workers
        .iter()
        .filter(|w| w.info().channel == ChannelKind::Inproc)
        .map(|w| {
            let i = w.info();
            let s = w.stats();
            WorkerStatus {
                id: i.id,
                name: i.name.clone(),
                kernel: i.kernel.clone(),
                resource: i.resource.clone(),
                channel: i.channel,
                job: None,
                proxy: None,
                nodes: Vec::new(),
                route: None,
                state: WorkerState::Released,
                reason: None,
                calls: s.calls,
                mean_rtt_us: s.mean_rtt_us(),
                mean_rtt_ticks: 0.0,
                bytes_sent: s.bytes_sent,
                bytes_received: s.bytes_received,
            }
        })
        .collect()
}

/// A lost worker shows up in the status once the pool's failure detector
/// has declared it; give that a bounded wait.
fn await_death(client: &DaemonClient, worker: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        match client.status() {
            Ok(s) if s.workers.iter().any(|w| w.name == worker && w.state == WorkerState::Died) => return,
            Ok(_) => std::thread::sleep(Duration::from_millis(20)),
            Err(_) => return,
        }
    }
}

struct Progress {
    steps: u64,
    e0: Option<f64>,
    energy: Option<f64>,
    drift: Option<f64>,
    supernovae: u64,
}

/// Runs a scenario. Failures after the daemon is up still produce a status
/// file; they come back in [`RunOutcome::error`].
pub fn run(opts: &RunOptions, mut log: impl Write) -> Result<RunOutcome, CliError> {
    let mut scenario = Scenario::load(&opts.scenario)?;
    if let Some(seed) = opts.seed {
        scenario.physics.seed = seed;
    }
    if let Some(steps) = opts.steps {
        if steps == 0 {
            return Err(CliError::Config("--steps must be at least 1".into()));
        }
        scenario.physics.steps = steps;
    }
    let mut units = UnitRegistry::with_defaults();
    let ics = match &scenario.physics.initial_conditions {
        Some(path) => Snapshot::read(&scenario.resolve(path))?,
        None => generate(&scenario.physics, scenario.physics.seed, &units)?,
    };
    let length = parse_quantity(&scenario.physics.length_scale, &units)?;
    let nb = nbody_units(&ics, &length, &units)?;
    nb.register(&mut units);
    let mut files = Files::create(&opts.out_dir, &scenario.outputs.energy_log)?;

    let (daemon, endpoint) = DaemonHandle::start(&opts.daemon, &scenario, &opts.scenario, &opts.out_dir)?;
    let endpoint_file = opts.out_dir.join("daemon.endpoint");
    let _ = std::fs::write(&endpoint_file, format!("{endpoint}\n"));
    let coupler = match Coupler::new(units.clone()).connect(&endpoint) {
        Ok(c) => c,
        Err(e) => {
            daemon.finish(None);
            return Err(e.into());
        }
    };
    let _ = writeln!(log, "daemon at {endpoint}");

    let mut progress = Progress {
        steps: 0,
        e0: None,
        energy: None,
        drift: None,
        supernovae: 0,
    };
    let mut inproc = Vec::new();
    let result = drive(&scenario, opts, &coupler, &ics, &nb, &units, &mut files, &mut progress, &mut inproc, &mut log);

    let client = coupler.daemon().expect("connected").clone();
    if let Err(CliError::Worker {
        worker,
        source: CouplerError::WorkerDied(_),
        ..
    }) = &result
    {
        await_death(&client, worker);
    }
    let status = client.status().ok().map(|mut s| {
        s.workers.extend(inproc);
        if let (None, Some(drift), Some(energy)) = (&s.energy, progress.drift, progress.energy) {
            s.energy = Some(jungle::coupler::status::EnergyStatus {
                steps: progress.steps,
                energy,
                drift,
            });
        }
        s
    });
    let status_path = files.dir.join(&scenario.outputs.status);
    let write_status = match &status {
        Some(s) => std::fs::write(&status_path, s.to_json()).map_err(|e| CliError::io(format!("writing {}", status_path.display()), e)),
        None => Err(CliError::Config("daemon status unavailable".into())),
    };
    daemon.finish(Some(&client));
    let error = result.err().or(write_status.err());
    if let Some(e) = &error {
        let _ = writeln!(log, "run failed: {e}");
    }
    Ok(RunOutcome {
        steps: progress.steps,
        initial_energy: progress.e0,
        drift: progress.drift,
        supernovae: progress.supernovae,
        status,
        error,
    })
}

#[allow(clippy::too_many_arguments)]
fn drive(
    scenario: &Scenario,
    opts: &RunOptions,
    coupler: &Coupler,
    ics: &Snapshot,
    nb: &jungle::units::NbodyUnits,
    units: &UnitRegistry,
    files: &mut Files,
    progress: &mut Progress,
    inproc: &mut Vec<WorkerStatus>,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let workers = Workers::create(coupler, |role| scenario.worker_request(scenario.worker_for(role)))?;
    for w in workers.all() {
        let i = w.info();
        let route = i.route.as_ref().map(|r| format!("{:?}", r.strategy).to_lowercase());
        let _ = writeln!(
            log,
            "worker {} ({}) on {} via {}{}",
            i.name,
            i.kernel,
            i.resource,
            i.channel,
            route.map(|r| format!(", {r} route")).unwrap_or_default()
        );
    }
    let result = steps(scenario, opts, &workers, ics, nb, units, files, progress, log);
    inproc.extend(inproc_status(&workers.all()));
    result?;
    if let Some(client) = coupler.daemon() {
        if let (Some(e), Some(d)) = (progress.energy, progress.drift) {
            client.report_energy(progress.steps, e, d)?;
        }
    }
    for w in workers.all() {
        w.release().map_err(|source| CliError::Worker {
            worker: w.info().name.clone(),
            resource: w.info().resource.clone(),
            source,
        })?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn steps(
    scenario: &Scenario,
    opts: &RunOptions,
    workers: &Workers,
    ics: &Snapshot,
    nb: &jungle::units::NbodyUnits,
    units: &UnitRegistry,
    files: &mut Files,
    progress: &mut Progress,
    log: &mut impl Write,
) -> Result<(), CliError> {
    let mut sim = Simulation::start(workers, ics, &scenario.physics, nb, units)?;
    let e0 = sim.initial_energy();
    progress.e0 = Some(e0);
    progress.energy = Some(e0);
    progress.drift = Some(0.0);
    files.energy_row(0, 0.0, e0, 0.0, 0)?;
    let every = scenario.outputs.snapshot_every;
    let total = scenario.physics.steps;
    for _ in 0..total {
        let info = sim.step()?;
        progress.steps = info.step;
        progress.drift = Some(info.drift);
        progress.energy = Some(info.energy);
        progress.supernovae = sim.supernovae();
        files.energy_row(info.step, info.time, info.energy, info.drift, info.supernovae)?;
        if every > 0 && info.step % every == 0 {
            sim.snapshot()?.write(&files.dir.join(format!("snapshot-{:06}.snap", info.step)))?;
        }
        if opts.progress_every > 0 && (info.step % opts.progress_every == 0 || info.step == total) {
            let _ = writeln!(
                log,
                "step {}/{total}  t = {:.4}  E = {:.6e}  drift = {:+.3e}  supernovae = {}",
                info.step,
                info.time,
                info.energy,
                info.drift,
                sim.supernovae()
            );
        }
    }
    sim.snapshot()?.write(&files.dir.join("final.snap"))
}

//! Scenario files written into scratch directories.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use jungle::coupler::StatusReport;
use jungle_cli::run::{run, RunOptions, RunOutcome};

/// The bundled scenario directory.
pub fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

/// Writes `text` as a scenario next to an empty install directory.
pub fn scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    std::fs::create_dir_all(dir.join("install")).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs in-process with the daemon on a thread.
pub fn run_quietly(scenario: &Path, out: &Path, seed: Option<u64>) -> RunOutcome {
    let opts = RunOptions {
        seed,
        ..RunOptions::new(scenario, out)
    };
    run(&opts, std::io::sink()).unwrap()
}

pub fn read_status(out: &Path) -> StatusReport {
    StatusReport::from_json(&std::fs::read_to_string(out.join("status.json")).unwrap()).unwrap()
}

/// Four workers over four resources, two of them behind deny-inbound
/// firewalls. `channel` applies to every worker.
pub fn spread(channel: &str, steps: u64) -> String {
    format!(
        r#"
[fabric]
host = "desktop"

[[resource]]
name = "local"
middleware = "local"
nodes = 1
install_path = "install"

[[resource]]
name = "gpu"
middleware = "simsched"
nodes = 1
gpu = true
install_path = "install"
latency_ms = 3

[[resource]]
name = "walled"
middleware = "simsched"
nodes = 3
private = true
firewall = "deny-inbound"
install_path = "install"
latency_ms = 4

[[resource]]
name = "remote"
middleware = "shell"
nodes = 1
install_path = "install"
latency_ms = 2

[[worker]]
name = "gravity"
kernel = "gravity-direct"
resource = "gpu"
channel = "{channel}"

[[worker]]
name = "gas"
kernel = "gas-tree"
resource = "walled"
nodes = 2
channel = "{channel}"

[[worker]]
name = "coupling"
kernel = "coupling-tree"
resource = "walled"
channel = "{channel}"

[[worker]]
name = "stellar"
kernel = "stellar"
resource = "remote"
channel = "{channel}"

[physics]
stars = 40
gas = 120
gas_mass = "60 MSun"
dt = "0.01 Myr"
steps = {steps}
stellar_stride = 4
eps = "0.05 pc"

[outputs]
snapshot_every = 0
"#
    )
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use quorate_cli::config::{LoadedConfig, Timeouts, Transport};
use quorate_cli::files::{load_discovery, read_hex, read_input, write_hex};
use quorate_cli::keys::{gen_keys, random_key, read_key, GenKeysOptions};
use quorate_cli::net_client::NetClient;
use quorate_cli::node::{install_signal_handlers, run_node, NodeOptions};
use quorate_cli::{exit, CliError, Result};
use quorate_core::certificate::{verify_cert, InferenceCertificate};
use quorate_core::client::{Endpoints, Outcome};
use quorate_core::crypto::hash;
use quorate_core::distance::{DistanceDescriptor, Metric};
use quorate_core::domain::{
    ClusterConfig, GroupUpdate, InferenceRequest, InferenceResult, ModelDescriptor, NodeIndex, Op, OpOutcome,
    SignedUpdate,
};
use quorate_core::inference::LinearToyModel;
use quorate_harness::accuracy::{run_accuracy, AccuracyConfig};
use quorate_harness::bench::{batch_sweep, bench_strategies, saturating_workload};
use quorate_harness::oracle::{check_liveness, check_safety};
use quorate_harness::{run, Scenario, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "quorate", version, about = "Byzantine-agreed ML inference: nodes, clients and experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate node, owner and discovery keys, a node config and a signed
    /// discovery file.
    GenKeys(GenKeysArgs),
    /// Run one node of a cluster.
    Node {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        index: NodeIndex,
        /// Key file; defaults to the one listed for this index.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Inference requests and certificate checks.
    #[command(subcommand)]
    Client(ClientCmd),
    /// Model group management.
    #[command(subcommand)]
    Owner(OwnerCmd),
    /// Simulated runs, benchmarks and accuracy experiments.
    #[command(subcommand)]
    Harness(HarnessCmd),
}

#[derive(Args)]
struct GenKeysArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the largest f with n >= 3f + 1.
    #[arg(long)]
    f: Option<u32>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7100)]
    base_port: u16,
    /// Endpoint for each index, in order; overrides host and base port.
    #[arg(long = "endpoint")]
    endpoints: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    view_timeout_ms: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DiscoveryArgs {
    /// Signed discovery file.
    #[arg(long)]
    discovery: PathBuf,
    /// Trusted discovery public key; defaults to discovery.pub beside the
    /// discovery file.
    #[arg(long)]
    trust: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ClientCmd {
    /// Request an inference and write the certified results.
    Infer {
        #[command(flatten)]
        discovery: DiscoveryArgs,
        #[arg(long)]
        group: String,
        /// JSON array of numbers.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Client key; a fresh one is generated when absent.
        #[arg(long)]
        key: Option<PathBuf>,
        /// First proxy to try; random when absent.
        #[arg(long)]
        proxy: Option<NodeIndex>,
        /// Directory for request.hex, results.hex and cert.hex.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a certificate against a request and its results.
    Verify {
        #[command(flatten)]
        discovery: DiscoveryArgs,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// List model groups as one node sees them.
    Groups {
        #[command(flatten)]
        discovery: DiscoveryArgs,
    },
}

#[derive(Args)]
struct OwnerArgs {
    #[command(flatten)]
    discovery: DiscoveryArgs,
    /// Owner key file.
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    group: String,
    #[arg(long)]
    proxy: Option<NodeIndex>,
}

#[derive(Subcommand)]
enum OwnerCmd {
    /// Write a random dense model file.
    NewModel {
        #[arg(long)]
        inputs: usize,
        #[arg(long)]
        outputs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        softmax: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Stage a model file in a store directory under its digest.
    Upload {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Define a new version of a model group.
    DefineGroup {
        #[command(flatten)]
        owner: OwnerArgs,
        /// Model files, in group order.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// euclidean, max_minus_min or chebyshev.
        #[arg(long, default_value = "chebyshev")]
        metric: String,
        #[arg(long)]
        epsilon: f64,
    },
    /// Activate the latest defined version of a group.
    Activate {
        #[command(flatten)]
        owner: OwnerArgs,
    },
    /// Retire a group.
    Retire {
        #[command(flatten)]
        owner: OwnerArgs,
    },
}

#[derive(Subcommand)]
enum HarnessCmd {
    /// Run a simulated scenario and check it with the oracles.
    Run {
        /// Scenario file (cluster, faults, workload).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        scenario: Option<PathBuf>,
        /// Node config file with transport "sim"; runs an honest default
        /// workload on that cluster shape.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the trace log here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also fail unless every session completed.
        #[arg(long)]
        expect_live: bool,
    },
    /// Execution placement and execution batch size throughput.
    Bench {
        #[arg(long, default_value_t = 400)]
        requests: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Ensemble accuracy with honest and dishonest nodes.
    Accuracy {
        #[arg(long)]
        group_size: usize,
        #[arg(long)]
        faulty: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    let result = match cli.cmd {
        Cmd::GenKeys(a) => cmd_gen_keys(a),
        Cmd::Node { config, index, key } => cmd_node(&config, index, key.as_deref()),
        Cmd::Client(c) => cmd_client(c),
        Cmd::Owner(c) => cmd_owner(c),
        Cmd::Harness(c) => cmd_harness(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn cmd_gen_keys(a: GenKeysArgs) -> Result<()> {
    let generated = gen_keys(&GenKeysOptions {
        n: a.n,
        f: a.f,
        out_dir: a.out,
        endpoints: a.endpoints,
        host: a.host,
        base_port: a.base_port,
        view_timeout: Duration::from_millis(a.view_timeout_ms),
        force: a.force,
    })?;
    for f in &generated.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_node(config: &Path, index: NodeIndex, key: Option<&Path>) -> Result<()> {
    let config = LoadedConfig::load(config)?;
    let key_path = match key {
        Some(k) => k.to_path_buf(),
        None => config
            .key_file(index)
            .ok_or_else(|| CliError::KeyMismatch(format!("no key file configured for node {index}")))?,
    };
    let key = read_key(&key_path)?;
    let timeouts = Timeouts::from_env(config.cluster.view_timeout)?;
    let stop = install_signal_handlers();
    let report = run_node(
        NodeOptions {
            config,
            index,
            key,
            timeouts,
        },
        stop,
    )?;
    println!("{}", report.state_file.display());
    Ok(())
}

fn unique_nonce() -> u64 {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    (t.as_nanos() as u64) ^ rand::random::<u16>() as u64
}

struct Connected {
    cluster: ClusterConfig,
    endpoints: Endpoints,
    client: NetClient,
}

fn connect(d: &DiscoveryArgs) -> Result<Connected> {
    let (cluster, endpoints) = load_discovery(&d.discovery, d.trust.as_deref())?;
    let timeouts = Timeouts::from_env(cluster.view_timeout)?;
    let client = NetClient::new(endpoints.clone(), timeouts);
    Ok(Connected {
        cluster,
        endpoints,
        client,
    })
}

fn first_proxy(proxy: Option<NodeIndex>, n: usize) -> Result<NodeIndex> {
    match proxy {
        Some(p) if p as usize >= n => Err(CliError::Config(format!("proxy {p} out of range"))),
        Some(p) => Ok(p),
        None => Ok(rand::thread_rng().gen_range(0..n) as NodeIndex),
    }
}

fn cmd_client(c: ClientCmd) -> Result<()> {
    match c {
        ClientCmd::Infer {
            discovery,
            group,
            input,
            epsilon,
            key,
            proxy,
            out,
        } => {
            let input = read_input(&input)?;
            let key = match key {
                Some(k) => read_key(&k)?,
                None => random_key(),
            };
            let mut conn = connect(&discovery)?;
            let first = first_proxy(proxy, conn.endpoints.nodes.len())?;
            let request = InferenceRequest::new(&key, unique_nonce(), group, input, epsilon);
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(out.display(), e))?;
            let request_file = out.join("request.hex");
            write_hex(&request_file, &request)?;
            match conn.client.submit(Op::Request(request), first) {
                Outcome::Certified {
                    results,
                    cert,
                    distance,
                    epsilon,
                    proxy,
                } => {
                    let results_file = out.join("results.hex");
                    let cert_file = out.join("cert.hex");
                    write_hex(&results_file, &results)?;
                    write_hex(&cert_file, &cert)?;
                    print_json(json!({
                        "status": "certified",
                        "proxy": proxy,
                        "view": cert.view,
                        "seq": cert.seq,
                        "metric": distance.metric.name(),
                        "epsilon": epsilon,
                        "results": results.iter().map(|r| json!({
                            "node": r.node_index,
                            "version": r.group_version,
                            "output": r.output,
                        })).collect::<Vec<_>>(),
                        "files": {
                            "request": request_file,
                            "results": results_file,
                            "cert": cert_file,
                        },
                    }));
                    Ok(())
                }
                Outcome::Failed { cert, proxy } => {
                    let failure_file = out.join("failure.hex");
                    write_hex(&failure_file, &cert)?;
                    print_json(json!({
                        "status": "failed",
                        "proxy": proxy,
                        "code": format!("{:?}", cert.code),
                        "files": { "request": request_file, "failure": failure_file },
                    }));
                    Err(CliError::CertifiedFailure(format!("ordered failure: {:?}", cert.code)))
                }
                Outcome::Rejected(code) => Err(CliError::NotCertified(format!("request rejected: {code:?}"))),
                Outcome::Update { .. } => Err(CliError::NotCertified("unexpected update outcome".into())),
                Outcome::GaveUp => Err(CliError::NotCertified("no proxy returned a verifiable answer".into())),
            }
        }
        ClientCmd::Verify {
            discovery,
            cert,
            request,
            results,
        } => {
            let (cluster, endpoints) = load_discovery(&discovery.discovery, discovery.trust.as_deref())?;
            let request: InferenceRequest = read_hex(&request)?;
            let results: Vec<InferenceResult> = read_hex(&results)?;
            let cert: InferenceCertificate = read_hex(&cert)?;
            if verify_cert(&request, &results, &cert, &endpoints.keys(), cluster.f()) {
                println!("valid: {} results, view {} seq {}", results.len(), cert.view, cert.seq);
                Ok(())
            } else {
                println!("invalid");
                Err(CliError::VerifyFailed("certificate does not verify".into()))
            }
        }
        ClientCmd::Groups { discovery } => {
            let mut conn = connect(&discovery)?;
            let (from, groups) = conn.client.list_groups()?;
            print_json(json!({
                "node": from,
                "groups": groups.iter().map(|g| json!({
                    "group": g.group_id,
                    "version": g.version,
                    "status": format!("{:?}", g.status).to_lowercase(),
                    "models": g.models.len(),
                    "metric": g.distance.metric.name(),
                    "epsilon": g.distance.default_epsilon,
                })).collect::<Vec<_>>(),
            }));
            let _ = conn.cluster;
            Ok(())
        }
    }
}

fn read_model(path: &Path) -> Result<(Vec<u8>, LinearToyModel)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    let model = LinearToyModel::from_bytes(&bytes)
        .map_err(|e| CliError::Config(format!("{}: not a model file: {e}", path.display())))?;
    Ok((bytes, model))
}

fn descriptor(path: &Path) -> Result<ModelDescriptor> {
    let (bytes, model) = read_model(path)?;
    let abs = std::fs::canonicalize(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(ModelDescriptor {
        model_url: abs.display().to_string(),
        params: Default::default(),
        input_dim: (model.weights().len() / model.bias().len()) as u64,
        output_dim: model.bias().len() as u64,
        weights_digest: hash(&bytes),
    })
}

fn submit_update(owner: &OwnerArgs, update: GroupUpdate) -> Result<()> {
    let key = read_key(&owner.key)?;
    let mut conn = connect(&owner.discovery)?;
    let first = first_proxy(owner.proxy, conn.endpoints.nodes.len())?;
    let op = Op::Update(SignedUpdate::new(&key, unique_nonce(), update));
    match conn.client.submit(op, first) {
        Outcome::Update { seq, outcome } => {
            let (status, detail) = match outcome {
                OpOutcome::Applied { version } => ("applied", json!(version)),
                OpOutcome::Failed(code) => ("failed", json!(format!("{code:?}"))),
            };
            print_json(json!({ "status": status, "seq": seq, "detail": detail, "group": owner.group }));
            match outcome {
                OpOutcome::Applied { .. } => Ok(()),
                OpOutcome::Failed(code) => Err(CliError::CertifiedFailure(format!("update failed: {code:?}"))),
            }
        }
        Outcome::Rejected(code) => Err(CliError::NotCertified(format!("update rejected: {code:?}"))),
        Outcome::GaveUp => Err(CliError::NotCertified("no f + 1 proxies reported the outcome".into())),
        other => Err(CliError::NotCertified(format!("unexpected answer: {other:?}"))),
    }
}

fn cmd_owner(c: OwnerCmd) -> Result<()> {
    match c {
        OwnerCmd::NewModel {
            inputs,
            outputs,
            seed,
            softmax,
            out,
            force,
        } => {
            if out.exists() && !force {
                return Err(CliError::Exists(format!("refusing to overwrite {} (use --force)", out.display())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (inputs.max(1) as f64).sqrt();
            let weights = (0..inputs * outputs).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let bias = (0..outputs).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let model = LinearToyModel::new(outputs, inputs, weights, bias, softmax)
                .ok_or_else(|| CliError::Config("model dimensions must be positive".into()))?;
            let bytes = model.to_bytes();
            std::fs::write(&out, &bytes).map_err(|e| CliError::io(out.display(), e))?;
            println!("{} {}", out.display(), hash(&bytes).to_hex());
            Ok(())
        }
        OwnerCmd::Upload { model, store } => {
            let (bytes, _) = read_model(&model)?;
            let digest = hash(&bytes).to_hex();
            std::fs::create_dir_all(&store).map_err(|e| CliError::io(store.display(), e))?;
            let dest = store.join(format!("{digest}.model"));
            std::fs::write(&dest, &bytes).map_err(|e| CliError::io(dest.display(), e))?;
            let d = descriptor(&dest)?;
            print_json(json!({ "url": d.model_url, "digest": digest, "input_dim": d.input_dim, "output_dim": d.output_dim }));
            Ok(())
        }
        OwnerCmd::DefineGroup {
            owner,
            models,
            metric,
            epsilon,
        } => {
            let metric: Metric = metric.parse().map_err(|_| CliError::Config(format!("unknown metric {metric}")))?;
            let distance = DistanceDescriptor::new(metric, epsilon).map_err(|e| CliError::Config(e.to_string()))?;
            let models = models.iter().map(|m| descriptor(m)).collect::<Result<Vec<_>>>()?;
            let update = GroupUpdate::Define {
                group_id: owner.group.clone(),
                models,
                distance,
            };
            submit_update(&owner, update)
        }
        OwnerCmd::Activate { owner } => {
            let update = GroupUpdate::Activate {
                group_id: owner.group.clone(),
            };
            submit_update(&owner, update)
        }
        OwnerCmd::Retire { owner } => {
            let update = GroupUpdate::Retire {
                group_id: owner.group.clone(),
            };
            submit_update(&owner, update)
        }
    }
}

fn sim_scenario(config: &Path) -> Result<Scenario> {
    let loaded = LoadedConfig::load(config)?;
    if loaded.file.transport != Transport::Sim {
        return Err(CliError::Config(format!(
            "{}: harness run --config needs transport = \"sim\"",
            config.display()
        )));
    }
    let c = &loaded.cluster;
    Ok(Scenario {
        config: SimConfig {
            nodes: c.n(),
            f: Some(c.f),
            view_timeout_ms: c.view_timeout.as_millis() as u64,
            exec_batch_max: c.exec_batch_max,
            agree_batch_max: c.agree_batch_max,
            agree_pipeline: c.agree_pipeline,
            checkpoint_interval: c.checkpoint_interval,
            ..SimConfig::default()
        },
        ..Scenario::default()
    })
}

fn cmd_harness(c: HarnessCmd) -> Result<()> {
    match c {
        HarnessCmd::Run {
            scenario,
            config,
            trace,
            expect_live,
        } => {
            let scenario = match (scenario, config) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
                    Scenario::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                }
                (None, Some(config)) => sim_scenario(&config)?,
                (None, None) => unreachable!("argument parser requires one"),
            };
            let run = run(&scenario).map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(path) = trace {
                let file = std::fs::File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
                run.trace
                    .write_to(std::io::BufWriter::new(file))
                    .map_err(|e| CliError::io(path.display(), e))?;
            }
            let safety = check_safety(&run);
            let live = check_liveness(&run);
            print_json(json!({
                "requests": run.requests().count(),
                "certified": run.certified(),
                "sessions": live.sessions,
                "completed": live.completed,
                "views_entered": live.views_entered,
                "max_latency_ms": live.max_latency.as_secs_f64() * 1e3,
                "deadlocked": live.deadlocked,
                "ordered_batches": safety.ordered_batches,
                "certificates_checked": safety.certificates_checked,
                "violations": safety.violations(),
                "messages": run.messages,
            }));
            if !safety.is_safe() {
                return Err(CliError::Invariant(safety.summary()));
            }
            if expect_live && (live.deadlocked || live.completed != live.sessions) {
                return Err(CliError::Invariant(format!(
                    "{} of {} sessions completed",
                    live.completed, live.sessions
                )));
            }
            Ok(())
        }
        HarnessCmd::Bench { requests, seed } => {
            let cfg = SimConfig::default();
            let wl = saturating_workload(requests, seed);
            let strategies = bench_strategies(&cfg, &wl).map_err(|e| CliError::Invariant(e.to_string()))?;
            let sweep = batch_sweep(&cfg, &wl, &[1, 2, 4]).map_err(|e| CliError::Invariant(e.to_string()))?;
            print_json(json!({
                "execute_agree_attest_tps": strategies.execute_agree_attest_tps,
                "agree_execute_tps": strategies.agree_execute_tps,
                "ratio": strategies.ratio(),
                "exec_batch_tps": sweep.iter().map(|(b, t)| json!({ "batch": b, "tps": t })).collect::<Vec<_>>(),
            }));
            Ok(())
        }
        HarnessCmd::Accuracy {
            group_size,
            faulty,
            trials,
            seed,
        } => {
            let cfg = AccuracyConfig {
                group_size,
                faulty,
                trials,
                seed,
                ..AccuracyConfig::default()
            };
            let r = run_accuracy(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            print_json(json!({
                "group_size": group_size,
                "faulty": faulty,
                "trials": trials,
                "epsilon": r.epsilon,
                "single": r.single,
                "honest": r.honest,
                "beyond_epsilon": r.beyond,
                "beyond_excluded": r.beyond_excluded,
                "honest_only": r.honest_only,
                "steered": r.steered,
                "colluding": r.colluding,
            }));
            Ok(())
        }
    }
}

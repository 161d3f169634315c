//! Command-line surface: synthetic corpus generation, the service daemon, a
//! thin API client, and the benchmark driver.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use obidos::bench;
use obidos::config::InstanceConfig;
use obidos::service::{self, ApiClient};
use obidos::source::{generate_synthetic_source, GeneratorParams, MetadataProfile, RemoteProfile};

#[derive(Parser)]
#[command(name = "obidos", about = "On-demand hybrid ETL for hierarchical scientific datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ApiArgs {
    /// Service base URL, e.g. http://127.0.0.1:7070
    #[arg(long, default_value = "http://127.0.0.1:7070")]
    api: String,
    /// API key (X-Api-Key)
    #[arg(long, env = "OBIDOS_API_KEY")]
    key: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic source on disk.
    Generate {
        /// Target directory (must be empty or absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source_id: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Children per level: collections,patients,studies,series,images.
        #[arg(long, default_value = "2,2,2,2,2", value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 524288)]
        image_size: usize,
        /// Filler bytes added to every metadata sidecar.
        #[arg(long, default_value_t = 0)]
        pad_bytes: usize,
    },
    /// Run the HTTP service for one instance.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replicaset CRUD against a running instance.
    Replicaset {
        #[command(subcommand)]
        action: ReplicasetCmd,
    },
    /// Run a query through a replicaset (selective load).
    Query {
        #[command(flatten)]
        api: ApiArgs,
        #[arg(long)]
        replicaset_id: String,
        /// JSON file holding the query body.
        #[arg(long, conflicts_with_all = ["target_level", "filter", "include_binary"])]
        query_file: Option<PathBuf>,
        #[arg(long)]
        target_level: Option<String>,
        /// Predicate like "modality=CT", "num<=500", or "id contains SE".
        #[arg(long = "where")]
        filter: Vec<String>,
        #[arg(long)]
        include_binary: bool,
        /// Reload every replica regardless of holder state.
        #[arg(long)]
        force_load: bool,
    },
    /// Export a share envelope from the sender instance.
    Share {
        #[command(flatten)]
        api: ApiArgs,
        #[arg(long)]
        replicaset_id: String,
        #[arg(long)]
        receiver: String,
        /// Grant the receiver remote access to this repository.
        #[arg(long)]
        grant_access: bool,
        /// Embed the full replicaset instead of the id-only envelope.
        #[arg(long)]
        full: bool,
        /// Write the envelope to a file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Import a share envelope file into the receiving instance.
    ImportEnvelope {
        #[command(flatten)]
        api: ApiArgs,
        envelope: PathBuf,
    },
    /// Collect orphaned repository data.
    Gc {
        #[command(flatten)]
        api: ApiArgs,
    },
    /// Run a benchmark experiment and emit CSV.
    Bench {
        /// One of: vary-total-volume, vary-interest, remote-load,
        /// repeat-query, share-volume.
        experiment: String,
        /// CSV output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Working directory for corpora and instances.
        #[arg(long)]
        scratch: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Simulated remote latency for remote-load.
        #[arg(long, default_value_t = 20)]
        remote_request_ms: u64,
        #[arg(long, default_value_t = 10.0)]
        remote_byte_ns: f64,
    },
}

#[derive(Subcommand)]
enum ReplicasetCmd {
    Create {
        #[command(flatten)]
        api: ApiArgs,
        /// Pointer like "src1:C1/P1"; repeatable. An empty path ("src1:")
        /// points at the whole source.
        #[arg(long = "replica", required = true)]
        replicas: Vec<String>,
        /// Optional query to run as part of the create.
        #[arg(long)]
        query_file: Option<PathBuf>,
    },
    Get {
        #[command(flatten)]
        api: ApiArgs,
        id: String,
    },
    Update {
        #[command(flatten)]
        api: ApiArgs,
        id: String,
        #[arg(long = "replica", required = true)]
        replicas: Vec<String>,
    },
    Delete {
        #[command(flatten)]
        api: ApiArgs,
        id: String,
    },
}

fn parse_replica(text: &str) -> anyhow::Result<(String, String)> {
    let (source, path) = text
        .split_once(':')
        .with_context(|| format!("replica {text:?} must look like source:path"))?;
    Ok((source.to_string(), path.to_string()))
}

fn parse_filter(text: &str) -> anyhow::Result<Value> {
    let (attribute, op, literal) = if let Some((a, v)) = text.split_once(" contains ") {
        (a.trim(), "contains", v.trim())
    } else {
        let mut found: Option<(usize, &str)> = None;
        for op in ["!=", "<=", ">=", "=", "<", ">"] {
            if let Some(idx) = text.find(op) {
                let better = match found {
                    Some((best_idx, best_op)) => {
                        idx < best_idx || (idx == best_idx && op.len() > best_op.len())
                    }
                    None => true,
                };
                if better {
                    found = Some((idx, op));
                }
            }
        }
        let (idx, op) = found.with_context(|| format!("no operator in {text:?}"))?;
        (text[..idx].trim(), op, text[idx + op.len()..].trim())
    };
    if attribute.is_empty() || literal.is_empty() {
        bail!("bad predicate {text:?}");
    }
    let value: Value = if let Ok(i) = literal.parse::<i64>() {
        json!(i)
    } else if let Ok(f) = literal.parse::<f64>() {
        json!(f)
    } else {
        json!(literal)
    };
    Ok(json!({ "attribute": attribute, "op": op, "value": value }))
}

fn load_query_file(path: &PathBuf) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading query file {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { out, source_id, seed, counts, image_size, pad_bytes } => {
            let params = GeneratorParams {
                source_id,
                seed,
                counts,
                image_size_bytes: image_size,
                profile: MetadataProfile { pad_bytes },
            };
            generate_synthetic_source(&out, &params)?;
            println!("generated source at {}", out.display());
        }
        Command::Serve { config } => {
            let cfg = InstanceConfig::load(&config)?;
            let engine = cfg.build_engine()?;
            let keys = cfg.api_keys.iter().map(|k| (k.key.clone(), k.user.clone())).collect();
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve_instance(engine, keys, cfg.public_uri.clone(), &cfg.listen))?;
        }
        Command::Replicaset { action } => match action {
            ReplicasetCmd::Create { api, replicas, query_file } => {
                let client = ApiClient::new(&api.api, &api.key);
                let replicas: Vec<(String, String)> =
                    replicas.iter().map(|r| parse_replica(r)).collect::<anyhow::Result<_>>()?;
                let query = query_file.as_ref().map(load_query_file).transpose()?;
                print_json(&client.create_replicaset(&replicas, query)?);
            }
            ReplicasetCmd::Get { api, id } => {
                let client = ApiClient::new(&api.api, &api.key);
                print_json(&client.get_replicaset(&id)?);
            }
            ReplicasetCmd::Update { api, id, replicas } => {
                let client = ApiClient::new(&api.api, &api.key);
                let replicas: Vec<(String, String)> =
                    replicas.iter().map(|r| parse_replica(r)).collect::<anyhow::Result<_>>()?;
                print_json(&client.update_replicaset(&id, &replicas)?);
            }
            ReplicasetCmd::Delete { api, id } => {
                let client = ApiClient::new(&api.api, &api.key);
                client.delete_replicaset(&id)?;
                println!("deleted {id}");
            }
        },
        Command::Query {
            api,
            replicaset_id,
            query_file,
            target_level,
            filter,
            include_binary,
            force_load,
        } => {
            let client = ApiClient::new(&api.api, &api.key);
            let query = match query_file {
                Some(path) => load_query_file(&path)?,
                None => {
                    let level =
                        target_level.context("either --query-file or --target-level is required")?;
                    let predicates: Vec<Value> =
                        filter.iter().map(|f| parse_filter(f)).collect::<anyhow::Result<_>>()?;
                    json!({
                        "target_level": level,
                        "predicates": predicates,
                        "include_binary": include_binary,
                    })
                }
            };
            print_json(&client.query(&replicaset_id, query, force_load)?);
        }
        Command::Share { api, replicaset_id, receiver, grant_access, full, out } => {
            let client = ApiClient::new(&api.api, &api.key);
            let envelope = client.share_export(&replicaset_id, &receiver, grant_access, full)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, serde_json::to_vec(&envelope)?)?;
                    println!("envelope written to {}", path.display());
                }
                None => print_json(&envelope),
            }
        }
        Command::ImportEnvelope { api, envelope } => {
            let client = ApiClient::new(&api.api, &api.key);
            let body: Value = serde_json::from_slice(&std::fs::read(&envelope)?)?;
            print_json(&client.share_import(&body)?);
        }
        Command::Gc { api } => {
            let client = ApiClient::new(&api.api, &api.key);
            print_json(&client.gc()?);
        }
        Command::Bench { experiment, out, scratch, runs, remote_request_ms, remote_byte_ns } => {
            let scratch = scratch.unwrap_or_else(bench::default_scratch);
            let remote = RemoteProfile::new(remote_request_ms, remote_byte_ns)?;
            let rows = bench::run_experiment(&experiment, &scratch, runs, Some(remote))?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path)?;
                    bench::write_csv(&rows, file)?;
                    eprintln!("{} rows written to {}", rows.len(), path.display());
                }
                None => {
                    let mut buf = Vec::new();
                    bench::write_csv(&rows, &mut buf)?;
                    print!("{}", String::from_utf8(buf).expect("csv is utf-8"));
                }
            }
        }
    }
    Ok(())
}

//! Benchmark harness: desk-scale recreations of the evaluation shapes, with
//! the traffic meter as the primary metric and wall-clock as secondary.
//!
//! Experiments:
//! - `vary-total-volume`: fixed replicaset, growing corpora; hybrid traffic
//!   stays constant while eager and lazy grow with the corpus.
//! - `vary-interest`: fixed corpus, replicaset coverage growing to 100% of
//!   studies; hybrid converges to the lazy bootstrap exactly at full
//!   coverage.
//! - `remote-load`: `vary-total-volume` over simulated remote sources, where
//!   per-request latency dominates elapsed time.
//! - `repeat-query`: one binary query run twice; the hybrid repeat is free,
//!   the lazy repeat pays the blob traffic again.
//! - `share-volume`: envelope bytes versus the binary volume they point at;
//!   id-only envelopes are constant-size, full envelopes grow linearly.
//!
//! Rows serialize to a fixed-header CSV. For `share-volume`, metadata_bytes
//! carries the envelope size and blob_bytes the referenced binary volume.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::etl::{Engine, EtlMode};
use crate::model::{EntryPath, GranularitySchema, UserQuery, VirtualReplica};
use crate::sharing::measure_share_size;
use crate::source::{
    generate_synthetic_source, Connector, FsConnector, GeneratorParams, MetadataProfile,
    RemoteProfile, SimulatedRemote, TransferStats,
};

pub const CSV_HEADER: &str = "experiment,mode,param,metadata_bytes,blob_bytes,requests,elapsed_ms,run";

pub const EXPERIMENTS: [&str; 5] =
    ["vary-total-volume", "vary-interest", "remote-load", "repeat-query", "share-volume"];

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub experiment: String,
    pub mode: EtlMode,
    pub param: u64,
    pub metadata_bytes: u64,
    pub blob_bytes: u64,
    pub requests: u64,
    pub elapsed_ms: u64,
    pub run: u32,
}

impl BenchRow {
    fn from_stats(
        experiment: &str,
        mode: EtlMode,
        param: u64,
        stats: &TransferStats,
        elapsed_ms: u64,
        run: u32,
    ) -> Self {
        BenchRow {
            experiment: experiment.to_string(),
            mode,
            param,
            metadata_bytes: stats.metadata_bytes,
            blob_bytes: stats.blob_bytes,
            requests: stats.total_requests(),
            elapsed_ms,
            run,
        }
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER.split(','))
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    for row in rows {
        w.write_record([
            row.experiment.as_str(),
            &row.mode.to_string(),
            &row.param.to_string(),
            &row.metadata_bytes.to_string(),
            &row.blob_bytes.to_string(),
            &row.requests.to_string(),
            &row.elapsed_ms.to_string(),
            &row.run.to_string(),
        ])
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Bench corpus shape: per-collection layout is fixed so corpora scale by
/// collection count and a subtree's bytes stay identical across corpora.
const PATIENTS: usize = 4;
const STUDIES: usize = 8;
const SERIES: usize = 2;
const IMAGES: usize = 2;
const STUDIES_PER_COLLECTION: usize = PATIENTS * STUDIES;
const BENCH_IMAGE_BYTES: usize = 4096;
const BENCH_SEED: u64 = 20180401;

fn corpus_params(collections: usize, image_bytes: usize) -> GeneratorParams {
    GeneratorParams {
        source_id: "src1".into(),
        seed: BENCH_SEED,
        counts: vec![collections, PATIENTS, STUDIES, SERIES, IMAGES],
        image_size_bytes: image_bytes,
        profile: MetadataProfile::default(),
    }
}

fn gen_corpus(dir: &Path, collections: usize, image_bytes: usize) -> Result<()> {
    generate_synthetic_source(dir, &corpus_params(collections, image_bytes))
}

fn open_connector(src: &Path, remote: Option<RemoteProfile>) -> Result<Box<dyn Connector>> {
    let fs = FsConnector::open(src)?;
    Ok(match remote {
        Some(profile) => Box::new(SimulatedRemote::new(fs, profile)),
        None => Box::new(fs),
    })
}

fn fresh_engine(scratch: &Path, tag: &str, src: &Path, remote: Option<RemoteProfile>) -> Result<Engine> {
    let dir = scratch.join(format!("instance-{tag}"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    Engine::open(dir, vec![open_connector(src, remote)?])
}

/// The first `count` study paths in collection-major order.
fn study_pointers(count: usize) -> Vec<VirtualReplica> {
    let schema = GranularitySchema::medical();
    let mut out = Vec::with_capacity(count);
    'outer: for c in 1.. {
        for p in 1..=PATIENTS {
            for s in 1..=STUDIES {
                if out.len() == count {
                    break 'outer;
                }
                let path =
                    EntryPath::parse(&schema, &format!("C{c}/P{p}/S{s}")).expect("generator ids");
                out.push(VirtualReplica::new("src1", path));
            }
        }
    }
    out
}

fn register(engine: &mut Engine, replicas: Vec<VirtualReplica>) -> Result<crate::model::ReplicaSetId> {
    Ok(engine.create_replicaset("bench", replicas, None)?.replicaset_id)
}

fn total_stats(report: &crate::etl::LoadReport) -> TransferStats {
    report.total_stats()
}

/// Fixed replicaset (16 studies inside C1) against corpora of 64..512
/// studies. Hybrid rows are identical across corpora; eager and lazy grow.
pub fn vary_total_volume(scratch: &Path, runs: u32, remote: Option<RemoteProfile>) -> Result<Vec<BenchRow>> {
    vary_total_volume_impl(scratch, runs, remote, "vary-total-volume", &[2, 4, 8, 16])
}

/// The remote-access variant of `vary-total-volume`, with smaller corpora so
/// the simulated per-request latency stays tractable.
pub fn remote_load(scratch: &Path, runs: u32, remote: RemoteProfile) -> Result<Vec<BenchRow>> {
    vary_total_volume_impl(scratch, runs, Some(remote), "remote-load", &[1, 2, 3])
}

fn vary_total_volume_impl(
    scratch: &Path,
    runs: u32,
    remote: Option<RemoteProfile>,
    experiment: &str,
    collection_counts: &[usize],
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let query = UserQuery::match_all("series");
    let pointers = study_pointers(16.min(STUDIES_PER_COLLECTION));
    for &collections in collection_counts {
        let studies_total = (collections * STUDIES_PER_COLLECTION) as u64;
        let src = scratch.join(format!("{experiment}-corpus-{collections}"));
        if !src.exists() {
            gen_corpus(&src, collections, BENCH_IMAGE_BYTES)?;
        }
        for run in 1..=runs {
            let tag = format!("{experiment}-h-{collections}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, remote)?;
            let id = register(&mut engine, pointers.clone())?;
            let loaded = engine
                .selective_load(&id, Some(&query))
                .map_err(|a| a.error)?;
            rows.push(BenchRow::from_stats(
                experiment,
                EtlMode::Hybrid,
                studies_total,
                &total_stats(&loaded.report),
                loaded.report.elapsed_ms,
                run,
            ));

            let tag = format!("{experiment}-e-{collections}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, remote)?;
            let report = engine.eager_etl(&["src1".to_string()])?;
            rows.push(BenchRow::from_stats(
                experiment,
                EtlMode::Eager,
                studies_total,
                &total_stats(&report),
                report.elapsed_ms,
                run,
            ));

            let tag = format!("{experiment}-l-{collections}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, remote)?;
            let report = engine.lazy_etl_bootstrap(&["src1".to_string()])?;
            rows.push(BenchRow::from_stats(
                experiment,
                EtlMode::Lazy,
                studies_total,
                &total_stats(&report),
                report.elapsed_ms,
                run,
            ));
        }
    }
    Ok(rows)
}

/// Fixed 128-study corpus; replicaset coverage sweeps 25% to 100% of the
/// studies. The demand is full metadata coverage of the pointed subtrees (a
/// match-all query at the deepest level), so at 100% coverage the hybrid
/// metadata requests equal the lazy bootstrap's exactly.
pub fn vary_interest(scratch: &Path, runs: u32) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let collections = 4; // 128 studies
    let total_studies = collections * STUDIES_PER_COLLECTION;
    let src = scratch.join("vary-interest-corpus");
    if !src.exists() {
        gen_corpus(&src, collections, BENCH_IMAGE_BYTES)?;
    }
    let deepest = GranularitySchema::medical().leaf_level().to_string();
    let query = UserQuery::match_all(deepest);
    for percent in [25usize, 50, 75, 100] {
        let covered = total_studies * percent / 100;
        for run in 1..=runs {
            let tag = format!("vi-h-{percent}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, None)?;
            let id = register(&mut engine, study_pointers(covered))?;
            let loaded = engine.selective_load(&id, Some(&query)).map_err(|a| a.error)?;
            rows.push(BenchRow::from_stats(
                "vary-interest",
                EtlMode::Hybrid,
                covered as u64,
                &total_stats(&loaded.report),
                loaded.report.elapsed_ms,
                run,
            ));

            let tag = format!("vi-l-{percent}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, None)?;
            let report = engine.lazy_etl_bootstrap(&["src1".to_string()])?;
            rows.push(BenchRow::from_stats(
                "vary-interest",
                EtlMode::Lazy,
                covered as u64,
                &total_stats(&report),
                report.elapsed_ms,
                run,
            ));

            let tag = format!("vi-e-{percent}-{run}");
            let mut engine = fresh_engine(scratch, &tag, &src, None)?;
            let report = engine.eager_etl(&["src1".to_string()])?;
            rows.push(BenchRow::from_stats(
                "vary-interest",
                EtlMode::Eager,
                covered as u64,
                &total_stats(&report),
                report.elapsed_ms,
                run,
            ));
        }
    }
    Ok(rows)
}

/// One binary query executed twice. The hybrid repeat is answered from the
/// repository with zero source traffic; the lazy repeat re-fetches blobs.
pub fn repeat_query(scratch: &Path, runs: u32) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let collections = 4; // 128 studies
    let src = scratch.join("repeat-query-corpus");
    if !src.exists() {
        gen_corpus(&src, collections, BENCH_IMAGE_BYTES)?;
    }
    let query = UserQuery {
        target_level: "series".into(),
        predicates: vec![],
        include_binary: true,
    };
    for run in 1..=runs {
        let tag = format!("rq-h-{run}");
        let mut engine = fresh_engine(scratch, &tag, &src, None)?;
        let id = register(&mut engine, study_pointers(16))?;
        for pass in 1..=2u64 {
            let loaded = engine.selective_load(&id, Some(&query)).map_err(|a| a.error)?;
            rows.push(BenchRow::from_stats(
                "repeat-query",
                EtlMode::Hybrid,
                pass,
                &total_stats(&loaded.report),
                loaded.report.elapsed_ms,
                run,
            ));
        }

        let tag = format!("rq-l-{run}");
        let mut engine = fresh_engine(scratch, &tag, &src, None)?;
        engine.lazy_etl_bootstrap(&["src1".to_string()])?;
        let scoped = UserQuery {
            target_level: "series".into(),
            predicates: vec![crate::model::Predicate {
                attribute: "id".into(),
                op: crate::model::PredicateOp::Eq,
                value: crate::model::AttrValue::from("SE1"),
            }],
            include_binary: true,
        };
        for pass in 1..=2u64 {
            let (_, report) = engine.lazy_etl_query(&scoped)?;
            rows.push(BenchRow::from_stats(
                "repeat-query",
                EtlMode::Lazy,
                pass,
                &total_stats(&report),
                report.elapsed_ms,
                run,
            ));
        }
    }
    Ok(rows)
}

pub const SHARE_IMAGE_BYTES: usize = 512 * 1024;
pub const SHARE_IMAGES_PER_SERIES: usize = 3;

/// Envelope size versus the binary volume shared, sweeping the number of
/// shared series. Emitted under three experiment names: `share-volume-idonly`
/// and `share-volume-full` carry envelope bytes in `metadata_bytes` and the
/// referenced binary volume in `blob_bytes`; `share-volume-binary` is the
/// baseline of copying the images themselves.
pub fn share_volume(scratch: &Path) -> Result<Vec<BenchRow>> {
    let src = scratch.join("share-volume-corpus");
    if !src.exists() {
        generate_synthetic_source(
            &src,
            &GeneratorParams {
                source_id: "src1".into(),
                seed: BENCH_SEED,
                counts: vec![1, 1, 1, 100, SHARE_IMAGES_PER_SERIES],
                image_size_bytes: SHARE_IMAGE_BYTES,
                profile: MetadataProfile::default(),
            },
        )?;
    }
    let mut engine = fresh_engine(scratch, "share-volume", &src, None)?;
    engine.set_instance_id("bench-sender");
    let schema = GranularitySchema::medical();

    let mut rows = Vec::new();
    for k in (10..=100).step_by(10) {
        let replicas: Vec<VirtualReplica> = (1..=k)
            .map(|i| {
                let path = EntryPath::parse(&schema, &format!("C1/P1/S1/SE{i}")).unwrap();
                VirtualReplica::new("src1", path)
            })
            .collect();
        let id = register(&mut engine, replicas)?;
        let id_only =
            engine.export_envelope(&id, "peer", "http://sender.example", false, 3_600_000, false)?;
        let full =
            engine.export_envelope(&id, "peer", "http://sender.example", false, 3_600_000, true)?;
        let binary_volume = (k * SHARE_IMAGES_PER_SERIES * SHARE_IMAGE_BYTES) as u64;

        rows.push(BenchRow {
            experiment: "share-volume-idonly".into(),
            mode: EtlMode::Hybrid,
            param: k as u64,
            metadata_bytes: measure_share_size(&id_only) as u64,
            blob_bytes: binary_volume,
            requests: 0,
            elapsed_ms: 0,
            run: 1,
        });
        rows.push(BenchRow {
            experiment: "share-volume-full".into(),
            mode: EtlMode::Hybrid,
            param: k as u64,
            metadata_bytes: measure_share_size(&full) as u64,
            blob_bytes: binary_volume,
            requests: 0,
            elapsed_ms: 0,
            run: 1,
        });
        rows.push(BenchRow {
            experiment: "share-volume-binary".into(),
            mode: EtlMode::Eager,
            param: k as u64,
            metadata_bytes: 0,
            blob_bytes: binary_volume,
            requests: (k * SHARE_IMAGES_PER_SERIES) as u64,
            elapsed_ms: 0,
            run: 1,
        });
    }
    Ok(rows)
}

/// Runs one named experiment into `scratch`, returning its rows.
pub fn run_experiment(
    name: &str,
    scratch: &Path,
    runs: u32,
    remote: Option<RemoteProfile>,
) -> Result<Vec<BenchRow>> {
    std::fs::create_dir_all(scratch)?;
    match name {
        "vary-total-volume" => vary_total_volume(scratch, runs, None),
        "vary-interest" => vary_interest(scratch, runs),
        "remote-load" => remote_load(scratch, runs, remote.unwrap_or_default()),
        "repeat-query" => repeat_query(scratch, runs),
        "share-volume" => share_volume(scratch),
        other => Err(Error::Config(format!(
            "unknown experiment {other:?}; expected one of {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

/// Scratch layout helper for the CLI.
pub fn default_scratch() -> PathBuf {
    std::env::temp_dir().join("obidos-bench")
}

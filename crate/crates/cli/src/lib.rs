//! Command implementations behind the `hitl-slam` binary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::{SinkExt, StreamExt};
use hitl_slam::dataset::{
    generate_bent_hallway, generate_lost_poses, load_graph, load_script, load_truth, save_graph,
    save_truth, BentHallwayConfig, Generated, LostPosesConfig,
};
use hitl_slam::interpret::InterpretationParams;
use hitl_slam::model::FactorGraph;
use hitl_slam::protocol::{decode_client, encode, handle, ClientMessage, ServerMessage};
use hitl_slam::session::{evaluate, replay, write_metrics, Session, SessionConfig};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

#[derive(Debug, Parser)]
#[command(
    name = "hitl-slam",
    version,
    about = "Human-in-the-loop pose-graph correction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a correction script against a graph.
    Solve(SolveArgs),
    /// Write a synthetic dataset: graph plus ground truth.
    Generate(GenerateArgs),
    /// Serve a correction session over a websocket at `/ws`.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub script: PathBuf,
    /// Corrected graph output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration metrics output.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Ground truth to score the final graph against (adds measure rows to the metrics).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Stroke pointing accuracy, meters.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Minimum selected points per pose.
    #[arg(long, default_value_t = 5)]
    pub tp: usize,
    #[arg(long, default_value_t = 2.0)]
    pub k1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k2: f64,
    /// Inconsistency raster cell size, meters.
    #[arg(long, default_value_t = 0.05)]
    pub resolution: f64,
    /// Seed stamped into the output graph's metadata.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SolveArgs {
    pub fn config(&self) -> SessionConfig {
        let mut c = SessionConfig::default();
        c.interpretation = InterpretationParams::with_sigma(self.sigma);
        c.interpretation.t_p = self.tp;
        c.weights.k1 = self.k1;
        c.weights.k2 = self.k2;
        c.resolution = self.resolution;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    LostPoses,
    BentHallway,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub kind: DatasetKind,
    /// TOML generator settings; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Graph output. Ground truth goes next to it with a `.truth` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(args) => solve(&args).map(|summary| println!("{summary}")),
        Command::Generate(args) => generate(&args).map(|summary| println!("{summary}")),
        Command::Serve(args) => {
            let graph = load_graph(&args.graph)
                .with_context(|| format!("loading {}", args.graph.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = TcpListener::bind(args.bind).await?;
                tracing::info!("listening on ws://{}/ws", listener.local_addr()?);
                serve(listener, graph, SessionConfig::default()).await
            })
        }
    }
}

/// Replays the script and writes the outputs. Returns a one-line summary.
pub fn solve(args: &SolveArgs) -> Result<String> {
    let graph =
        load_graph(&args.graph).with_context(|| format!("loading {}", args.graph.display()))?;
    let script =
        load_script(&args.script).with_context(|| format!("loading {}", args.script.display()))?;
    let truth = match &args.truth {
        Some(p) => Some(load_truth(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut out = replay(graph, &script, args.config())?;
    if let Some(seed) = args.seed {
        out.graph.metadata.seed = Some(seed);
    }
    save_graph(&out.graph, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let report = truth
        .as_ref()
        .map(|t| evaluate(&out.graph, t))
        .transpose()?;
    if let Some(path) = &args.metrics {
        std::fs::write(path, write_metrics(&out.log, report.as_ref()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let first = out.log.first().expect("initial record");
    let last = out.log.last().expect("initial record");
    let mut summary = format!(
        "{} records, inconsistency {:.3} -> {:.3}",
        script.len(),
        first.inconsistency,
        last.inconsistency
    );
    if let Some(r) = &report {
        summary.push_str(&format!(", {}", r.summary_line()));
    }
    Ok(summary)
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

pub fn truth_path(graph_out: &Path) -> PathBuf {
    graph_out.with_extension("truth")
}

pub fn generate(args: &GenerateArgs) -> Result<String> {
    let data: Generated = match args.kind {
        DatasetKind::LostPoses => {
            generate_lost_poses(&read_config::<LostPosesConfig>(args.config.as_deref())?)
        }
        DatasetKind::BentHallway => {
            generate_bent_hallway(&read_config::<BentHallwayConfig>(args.config.as_deref())?)
        }
    };
    save_graph(&data.graph, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let truth = truth_path(&args.out);
    save_truth(&data.truth, &truth).with_context(|| format!("writing {}", truth.display()))?;
    Ok(format!(
        "{} poses, {} points -> {}, {}",
        data.graph.poses.len(),
        data.graph
            .scans
            .iter()
            .map(|s| s.points.len())
            .sum::<usize>(),
        args.out.display(),
        truth.display()
    ))
}

type Job = (ClientMessage, oneshot::Sender<Vec<ServerMessage>>);

/// Owns the session on a dedicated thread; jobs run one at a time in arrival order.
fn spawn_worker(mut session: Session) -> mpsc::UnboundedSender<Job> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
    std::thread::spawn(move || {
        while let Some((msg, reply)) = rx.blocking_recv() {
            let _ = reply.send(handle(&mut session, &msg));
        }
    });
    tx
}

pub fn router(graph: FactorGraph, config: SessionConfig) -> Result<Router> {
    let session = Session::new(graph, config)?;
    let jobs = spawn_worker(session);
    Ok(Router::new().route("/ws", get(upgrade)).with_state(jobs))
}

pub async fn serve(listener: TcpListener, graph: FactorGraph, config: SessionConfig) -> Result<()> {
    axum::serve(listener, router(graph, config)?).await?;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(jobs): State<mpsc::UnboundedSender<Job>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, jobs))
}

async fn connection(socket: WebSocket, jobs: mpsc::UnboundedSender<Job>) {
    let (mut sink, mut stream) = socket.split();
    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let replies = match decode_client(&text) {
            Err(reply) => vec![reply],
            Ok(msg) => {
                let (tx, rx) = oneshot::channel();
                if jobs.send((msg, tx)).is_err() {
                    break;
                }
                match rx.await {
                    Ok(replies) => replies,
                    Err(_) => break,
                }
            }
        };
        for reply in replies {
            if sink
                .send(Message::Text(encode(&reply).into()))
                .await
                .is_err()
            {
                return;
            }
        }
    }
}

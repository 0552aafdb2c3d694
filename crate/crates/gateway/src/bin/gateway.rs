//! Gateway process.

use std::fs::File;
use std::io::BufReader;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Parser;
use ecgpps_core::channel::{bench_modes, KeyMode};
use ecgpps_core::classifier::CnnModel;
use ecgpps_gateway::analysis::{load_secret_key, load_server_keys};
use ecgpps_gateway::{train_default_model, Gateway, GatewayConfig};

#[derive(Parser)]
#[command(about = "Receive encrypted ECG sessions, store them and serve the JSON API")]
struct Args {
    /// Address agents connect to.
    #[arg(long, default_value = "127.0.0.1:7700")]
    listen: String,
    /// Address of the JSON-lines API.
    #[arg(long, default_value = "127.0.0.1:7701")]
    api: String,
    #[arg(long, default_value = "gateway-store")]
    store: PathBuf,
    /// `preshared` or `ecdh`.
    #[arg(long, default_value = "preshared")]
    mode: KeyMode,
    /// 64 hex characters, for pre-shared mode.
    #[arg(long, env = "ECGPPS_PSK", hide_env_values = true)]
    psk: Option<String>,
    /// Directory with public.key and eval.key for the encrypted path.
    #[arg(long)]
    he_keys: Option<PathBuf>,
    /// Also load secret.key from --he-keys and finish encrypted analyses here.
    #[arg(long, requires = "he_keys")]
    he_finish: bool,
    /// Classifier weights; a model is trained at startup if absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Print the key-mode cost comparison and exit.
    #[arg(long)]
    bench_modes: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if args.bench_modes {
        print!("{}", bench_modes(256, 2000));
        return Ok(());
    }
    if args.mode == KeyMode::PreShared && args.psk.is_none() {
        bail!("pre-shared mode needs --psk or ECGPPS_PSK");
    }

    let model = match &args.model {
        Some(p) => CnnModel::read_from(BufReader::new(File::open(p).with_context(|| p.display().to_string())?))?,
        None => {
            log::info!("training the default classifier");
            train_default_model(0)?
        }
    };
    let mut config = GatewayConfig::new(args.mode, &args.store);
    config.psk = args.psk.clone();
    config.model = Some(Arc::new(model));
    if let Some(dir) = &args.he_keys {
        config.he_server = Some(load_server_keys(dir).context("loading evaluation keys")?);
        if args.he_finish {
            config.he_finisher = Some(load_secret_key(dir).context("loading secret key")?);
        }
    }

    let gateway = Gateway::start(config)?;
    let handle = gateway.serve(TcpListener::bind(&args.listen)?, TcpListener::bind(&args.api)?)?;
    log::info!("agents on {}, api on {}, store {}", handle.agent_addr, handle.api_addr, args.store.display());
    loop {
        thread::sleep(Duration::from_secs(3600));
    }
}

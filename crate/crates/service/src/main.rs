use std::net::SocketAddr;
use std::path::PathBuf;

use saliencytune::data::{load_dataset, ClassSet};
use saliencytune::model::{Checkpoint, Network};
use saliencytune::synthetic::{generate_synthetic_dataset, input_shape};
use saliencytune::trainer::{train_classifier, TrainingConfig};
use saliencytune_service::{router, AppState, Catalog, Error, Result};
use tracing::info;
use tracing_subscriber::EnvFilter;

fn env<T: std::str::FromStr>(name: &str, default: T) -> Result<T> {
    match std::env::var(name) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::State(format!("{name}={v} is not valid"))),
        Err(_) => Ok(default),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let port: u16 = env("SALIENCYTUNE_PORT", 8080)?;
    let data_dir: PathBuf = env("SALIENCYTUNE_DATA_DIR", PathBuf::from("service-data"))?;
    let seed: u64 = env("SALIENCYTUNE_SEED", 0)?;
    let checkpoint = std::env::var_os("SALIENCYTUNE_CHECKPOINT").map(PathBuf::from);
    let classes = ClassSet::default();

    let model = checkpoint.as_ref().map(|p| Checkpoint::load(p)?.to_network()).transpose()?;
    let shape = model.as_ref().map(Network::input_shape).unwrap_or_else(input_shape);
    let samples = match std::env::var_os("SALIENCYTUNE_DATASET") {
        Some(root) => load_dataset(root, &classes, shape)?,
        None => generate_synthetic_dataset(env("SALIENCYTUNE_SYNTHETIC", 300)?, seed)?,
    };
    let catalog = Catalog::from_dataset(classes, &samples, seed)?;
    let training = TrainingConfig {
        seed,
        ..TrainingConfig::default()
    };

    let state = AppState::open(&data_dir, catalog, training.clone(), || {
        if let Some(m) = model {
            return Ok(m);
        }
        info!("no checkpoint given, training a baseline classifier on catalog labels");
        // same split as the served catalog
        let c = Catalog::from_dataset(ClassSet::default(), &samples, seed)?;
        let init = Network::reference(shape, c.classes.len(), seed)?;
        let cfg = TrainingConfig {
            epochs: 5,
            ..training
        };
        Ok(train_classifier(&init, &c.samples, &c.validation, &c.classes, &cfg)?.best)
    })?;

    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, data_dir = %data_dir.display(), "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

use clap::Parser;
use hedgelab_cli::{init_thread_pool, run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    init_thread_pool()?;
    let manifest = run(&cli)?;
    println!(
        "{} done: {} artifact(s) in {}, input hash {}",
        manifest.command,
        manifest.artifacts.len(),
        manifest.config.out.display(),
        manifest.input_hash
    );
    Ok(())
}

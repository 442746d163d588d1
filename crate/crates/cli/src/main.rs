use clap::Parser;

fn main() -> anyhow::Result<()> {
    chunkplay_cli::run(chunkplay_cli::Cli::parse())
}

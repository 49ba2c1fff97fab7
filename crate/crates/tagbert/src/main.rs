use clap::Parser;

fn main() -> anyhow::Result<()> {
    tagbert::cli::run(tagbert::cli::Cli::parse())?;
    Ok(())
}

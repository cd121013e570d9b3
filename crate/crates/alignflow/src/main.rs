use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = alignflow::cli::Cli::parse();
    let code = alignflow::cli::run(cli, &mut std::io::stdout().lock())?;
    std::process::exit(code);
}

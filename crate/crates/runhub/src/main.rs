use clap::Parser;

fn main() {
    let cli = runhub::cli::Cli::parse();
    std::process::exit(runhub::cli::main_with(cli));
}
